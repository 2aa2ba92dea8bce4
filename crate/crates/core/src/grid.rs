use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Regular lat/lon grid. Row index 0 is `lat_min`, column index 0 is `lon_min`.
///
/// Latitude spacing is uniform: `resolution() = (lat_max - lat_min) / (n_lat - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    /// Number of latitude rows (H).
    pub n_lat: usize,
    /// Number of longitude columns (W).
    pub n_lon: usize,
}

impl GridSpec {
    pub fn new(
        lat_min: f64,
        lat_max: f64,
        lon_min: f64,
        lon_max: f64,
        n_lat: usize,
        n_lon: usize,
    ) -> Result<Self> {
        if n_lat < 2 || n_lon < 2 {
            return Err(CoreError::config(format!(
                "grid must have n_lat >= 2 and n_lon >= 2, got {n_lat}x{n_lon}"
            )));
        }
        if !(lat_min < lat_max) || lat_min <= -90.0 || lat_max >= 90.0 {
            return Err(CoreError::config(format!(
                "latitude range must satisfy -90 < lat_min < lat_max < 90, got [{lat_min}, {lat_max}]"
            )));
        }
        if !(lon_min < lon_max) {
            return Err(CoreError::config(format!(
                "longitude range must satisfy lon_min < lon_max, got [{lon_min}, {lon_max}]"
            )));
        }
        Ok(GridSpec { lat_min, lat_max, lon_min, lon_max, n_lat, n_lon })
    }

    /// Region used throughout: 86°–150° E, 1°–41° N, at the given shape.
    pub fn default_region(n_lat: usize, n_lon: usize) -> Result<Self> {
        GridSpec::new(1.0, 41.0, 86.0, 150.0, n_lat, n_lon)
    }

    /// Latitude spacing in degrees.
    pub fn resolution(&self) -> f64 {
        (self.lat_max - self.lat_min) / (self.n_lat - 1) as f64
    }

    /// Latitude of row `i` in degrees.
    pub fn lat(&self, i: usize) -> f64 {
        self.lat_min + self.resolution() * i as f64
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_lat, self.n_lon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_matches_endpoints() {
        let g = GridSpec::new(1.0, 41.0, 86.0, 150.0, 160, 256).unwrap();
        assert!((g.resolution() - 40.0 / 159.0).abs() < 1e-12);
        assert!((g.lat(159) - 41.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(GridSpec::new(1.0, 41.0, 86.0, 150.0, 1, 10).is_err());
        assert!(GridSpec::new(-95.0, 41.0, 86.0, 150.0, 8, 8).is_err());
        assert!(GridSpec::new(41.0, 1.0, 86.0, 150.0, 8, 8).is_err());
    }
}
