//! Sequence datasets in (T, C, H, W) layout: synthetic generation, sliding
//! windows, normalization to [-1, 1], severe-case resampling and file I/O.

pub mod io;
pub mod synthetic;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::GridSpec;

pub use synthetic::{generate_episode, generate_episode_with, Boundary, WindMode, WorldOptions};

/// Brightness-temperature mapping: `BT = 300 K - 110 K * intensity`.
pub const BT_MAX: f32 = 300.0;
pub const BT_SPAN: f32 = 110.0;

/// Satellite channel position within C. Fixed by convention.
pub const SAT_CHANNEL: usize = 0;

/// One (T, C, H, W) episode or window. Channel 0 is the satellite
/// brightness-temperature channel in kelvin; the remaining channels are
/// physical condition fields in native units. Frames are hourly.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub values: Array4<f32>,
    /// Epoch hour of frame 0; frame `t` is at `start_hour + t`.
    pub start_hour: i64,
    pub channel_names: Vec<String>,
    pub grid: GridSpec,
}

impl SequenceSample {
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.values.dim()
    }

    pub fn n_frames(&self) -> usize {
        self.values.dim().0
    }

    pub fn n_channels(&self) -> usize {
        self.values.dim().1
    }

    /// Hourly timestamps, one per frame.
    pub fn timestamps(&self) -> Vec<i64> {
        (0..self.n_frames() as i64).map(|t| self.start_hour + t).collect()
    }

    /// Minimum brightness temperature over all frames.
    pub fn min_bt(&self) -> f32 {
        self.values
            .index_axis(ndarray::Axis(1), SAT_CHANNEL)
            .iter()
            .copied()
            .fold(f32::INFINITY, f32::min)
    }
}

/// Per-channel affine normalization ranges in native units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTable {
    pub channel_names: Vec<String>,
    /// (min, max) per channel, max > min.
    pub ranges: Vec<(f64, f64)>,
}

impl NormalizationTable {
    /// Map a native value of channel `c` into [-1, 1].
    pub fn to_normalized(&self, c: usize, v: f32) -> f32 {
        let (lo, hi) = self.ranges[c];
        (2.0 * (v as f64 - lo) / (hi - lo) - 1.0) as f32
    }

    /// Inverse of [`Self::to_normalized`].
    pub fn to_native(&self, c: usize, v: f32) -> f32 {
        let (lo, hi) = self.ranges[c];
        (lo + (v as f64 + 1.0) / 2.0 * (hi - lo)) as f32
    }
}

/// An immutable collection of equally-shaped sequence samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SequenceSample>,
    pub normalization: Option<NormalizationTable>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn grid(&self) -> Option<&GridSpec> {
        self.samples.first().map(|s| &s.grid)
    }
}

/// Cut sliding windows of length `window` (stride 1) from each episode.
///
/// Episodes shorter than the window are skipped with a warning. All episodes
/// must agree in channel count, grid and channel names.
pub fn assemble_dataset(episodes: &[SequenceSample], window: usize) -> Result<Dataset> {
    if window == 0 {
        return Err(CoreError::config("window must be >= 1"));
    }
    let mut samples = Vec::new();
    let mut reference: Option<(&SequenceSample, usize)> = None;
    for (idx, ep) in episodes.iter().enumerate() {
        if ep.n_frames() < window {
            log::warn!(
                "episode {idx} has {} frames, shorter than window {window}; skipped",
                ep.n_frames()
            );
            continue;
        }
        if let Some((first, _)) = reference {
            if first.n_channels() != ep.n_channels()
                || first.grid != ep.grid
                || first.channel_names != ep.channel_names
            {
                return Err(CoreError::shape(format!(
                    "episode {idx} layout differs from episode 0"
                )));
            }
        } else {
            reference = Some((ep, idx));
        }
        for start in 0..=(ep.n_frames() - window) {
            let values = ep
                .values
                .slice(ndarray::s![start..start + window, .., .., ..])
                .to_owned();
            samples.push(SequenceSample {
                values,
                start_hour: ep.start_hour + start as i64,
                channel_names: ep.channel_names.clone(),
                grid: ep.grid,
            });
        }
    }
    Ok(Dataset { samples, normalization: None })
}

/// Per-channel (min, max) over the whole dataset.
///
/// Fails when a channel is degenerate (max == min), naming the channel.
pub fn fit_normalization(dataset: &Dataset) -> Result<NormalizationTable> {
    let first = dataset
        .samples
        .first()
        .ok_or_else(|| CoreError::config("cannot fit normalization on an empty dataset"))?;
    let c = first.n_channels();
    let mut lo = vec![f64::INFINITY; c];
    let mut hi = vec![f64::NEG_INFINITY; c];
    for s in &dataset.samples {
        for t in 0..s.n_frames() {
            for ci in 0..c {
                for &v in s.values.index_axis(ndarray::Axis(0), t).index_axis(ndarray::Axis(0), ci) {
                    let v = v as f64;
                    if v < lo[ci] {
                        lo[ci] = v;
                    }
                    if v > hi[ci] {
                        hi[ci] = v;
                    }
                }
            }
        }
    }
    let mut ranges = Vec::with_capacity(c);
    for ci in 0..c {
        if !(hi[ci] > lo[ci]) {
            return Err(CoreError::config(format!(
                "channel '{}' is degenerate: min == max == {}",
                first.channel_names[ci], lo[ci]
            )));
        }
        ranges.push((lo[ci], hi[ci]));
    }
    Ok(NormalizationTable { channel_names: first.channel_names.clone(), ranges })
}

fn map_sample(sample: &SequenceSample, table: &NormalizationTable, forward: bool) -> Result<SequenceSample> {
    if sample.n_channels() != table.ranges.len() {
        return Err(CoreError::shape(format!(
            "sample has {} channels, table covers {}",
            sample.n_channels(),
            table.ranges.len()
        )));
    }
    let mut values = sample.values.clone();
    for t in 0..sample.n_frames() {
        for c in 0..sample.n_channels() {
            let mut plane = values
                .index_axis_mut(ndarray::Axis(0), t);
            let mut plane = plane.index_axis_mut(ndarray::Axis(0), c);
            plane.mapv_inplace(|v| {
                if forward {
                    table.to_normalized(c, v)
                } else {
                    table.to_native(c, v)
                }
            });
        }
    }
    Ok(SequenceSample { values, ..sample.clone() })
}

/// Map native units into [-1, 1] per channel.
pub fn normalize(sample: &SequenceSample, table: &NormalizationTable) -> Result<SequenceSample> {
    map_sample(sample, table, true)
}

/// Map normalized values back to native units.
pub fn denormalize(sample: &SequenceSample, table: &NormalizationTable) -> Result<SequenceSample> {
    map_sample(sample, table, false)
}

/// Duplicate every sample whose minimum brightness temperature is below the
/// threshold; all other samples appear once.
pub fn resample_severe(dataset: &Dataset, intensity_threshold_kelvin: f32) -> Dataset {
    let mut samples = Vec::with_capacity(dataset.samples.len());
    let mut severe = 0usize;
    for s in &dataset.samples {
        samples.push(s.clone());
        if s.min_bt() < intensity_threshold_kelvin {
            samples.push(s.clone());
            severe += 1;
        }
    }
    log::info!(
        "resample_severe: {severe}/{} samples below {intensity_threshold_kelvin} K duplicated",
        dataset.samples.len()
    );
    Dataset { samples, normalization: dataset.normalization.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn toy_sample(t: usize, fill: f32) -> SequenceSample {
        let grid = GridSpec::default_region(4, 6).unwrap();
        let mut values = Array4::from_elem((t, 2, 4, 6), fill);
        // Keep channels non-degenerate.
        values[[0, 0, 0, 0]] = fill + 50.0;
        values[[0, 1, 0, 0]] = fill - 1.0;
        SequenceSample {
            values,
            start_hour: 0,
            channel_names: vec!["bt".into(), "cond".into()],
            grid,
        }
    }

    #[test]
    fn window_counts() {
        let ep32 = toy_sample(32, 250.0);
        let d = assemble_dataset(&[ep32], 12).unwrap();
        assert_eq!(d.len(), 21);
        let ep12 = toy_sample(12, 250.0);
        assert_eq!(assemble_dataset(&[ep12], 12).unwrap().len(), 1);
        let eps = vec![toy_sample(16, 250.0), toy_sample(16, 240.0)];
        assert_eq!(assemble_dataset(&eps, 16).unwrap().len(), 2);
    }

    #[test]
    fn short_episode_skipped() {
        let eps = vec![toy_sample(4, 250.0), toy_sample(12, 250.0)];
        let d = assemble_dataset(&eps, 12).unwrap();
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn window_timestamps_shift() {
        let d = assemble_dataset(&[toy_sample(14, 250.0)], 12).unwrap();
        assert_eq!(d.samples[0].start_hour, 0);
        assert_eq!(d.samples[2].start_hour, 2);
        assert_eq!(d.samples[2].timestamps()[11], 13);
    }

    #[test]
    fn normalization_endpoints_and_midpoint() {
        let table = NormalizationTable {
            channel_names: vec!["bt".into()],
            ranges: vec![(190.0, 300.0)],
        };
        assert_eq!(table.to_normalized(0, 245.0), 0.0);
        assert_eq!(table.to_normalized(0, 300.0), 1.0);
        assert_eq!(table.to_normalized(0, 190.0), -1.0);
    }

    #[test]
    fn normalize_denormalize_round_trip() {
        let mut rng = crate::rng::stream(4, "norm-roundtrip");
        use rand::Rng;
        let grid = GridSpec::default_region(4, 6).unwrap();
        let values = Array4::from_shape_fn((3, 2, 4, 6), |_| rng.gen_range(190.0f32..300.0));
        let s = SequenceSample {
            values,
            start_hour: 5,
            channel_names: vec!["bt".into(), "cond".into()],
            grid,
        };
        let d = Dataset { samples: vec![s.clone()], normalization: None };
        let table = fit_normalization(&d).unwrap();
        let n = normalize(&s, &table).unwrap();
        assert!(n.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        let back = denormalize(&n, &table).unwrap();
        for (a, b) in back.values.iter().zip(s.values.iter()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn degenerate_channel_named() {
        let grid = GridSpec::default_region(4, 6).unwrap();
        let values = Array4::from_elem((2, 2, 4, 6), 7.0);
        let s = SequenceSample {
            values,
            start_hour: 0,
            channel_names: vec!["bt".into(), "flatliner".into()],
            grid,
        };
        let d = Dataset { samples: vec![s], normalization: None };
        let err = fit_normalization(&d).unwrap_err().to_string();
        assert!(err.contains("bt"), "{err}");
    }

    #[test]
    fn resample_counts() {
        let mut samples = Vec::new();
        for i in 0..10 {
            // three severe samples dip to 200 K
            let fill = if i < 3 { 200.0 } else { 260.0 };
            samples.push(toy_sample(4, fill));
        }
        let d = Dataset { samples, normalization: None };
        assert_eq!(resample_severe(&d, 210.0).len(), 13);
        assert_eq!(resample_severe(&d, 100.0).len(), 10);
        assert_eq!(resample_severe(&d, 400.0).len(), 20);
    }

    #[test]
    fn resample_is_super_multiset() {
        let d = Dataset {
            samples: vec![toy_sample(4, 200.0), toy_sample(4, 260.0)],
            normalization: None,
        };
        let r = resample_severe(&d, 210.0);
        for s in &d.samples {
            let count = r.samples.iter().filter(|x| *x == s).count();
            assert!((1..=2).contains(&count));
        }
    }
}
