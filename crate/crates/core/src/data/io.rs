//! Dataset persistence: `<name>.meta` (JSON text metadata) plus
//! `<name>.bin` (little-endian f32, C-order, shape (N, T, C, H, W)).
//! Round-trips are bit-exact.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormalizationTable, SequenceSample};
use crate::error::{CoreError, Result};
use crate::grid::GridSpec;

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    format_version: String,
    dtype: String,
    endianness: String,
    order: String,
    /// (N, T, C, H, W)
    shape: [usize; 5],
    channel_names: Vec<String>,
    grid: GridSpec,
    start_hours: Vec<i64>,
    normalization: Option<NormalizationTable>,
}

fn with_ext(path: &Path, ext: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(ext);
    PathBuf::from(p)
}

/// Write `<path>.meta` and `<path>.bin`.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let first = dataset
        .samples
        .first()
        .ok_or_else(|| CoreError::config("cannot save an empty dataset"))?;
    let (t, c, h, w) = first.shape();
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.shape() != (t, c, h, w) || s.grid != first.grid || s.channel_names != first.channel_names
        {
            return Err(CoreError::shape(format!("sample {i} layout differs from sample 0")));
        }
    }
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION.to_string(),
        dtype: "f32".to_string(),
        endianness: "little".to_string(),
        order: "C".to_string(),
        shape: [dataset.samples.len(), t, c, h, w],
        channel_names: first.channel_names.clone(),
        grid: first.grid,
        start_hours: dataset.samples.iter().map(|s| s.start_hour).collect(),
        normalization: dataset.normalization.clone(),
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        }
    }
    let meta_path = with_ext(path, ".meta");
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| CoreError::format(&meta_path, e.to_string()))?;
    fs::write(&meta_path, json).map_err(|e| CoreError::io(&meta_path, e))?;

    let bin_path = with_ext(path, ".bin");
    let file = fs::File::create(&bin_path).map_err(|e| CoreError::io(&bin_path, e))?;
    let mut out = BufWriter::new(file);
    for s in &dataset.samples {
        // values are C-order (standard layout) by construction
        for &v in s.values.as_slice().expect("standard layout") {
            out.write_all(&v.to_le_bytes()).map_err(|e| CoreError::io(&bin_path, e))?;
        }
    }
    out.flush().map_err(|e| CoreError::io(&bin_path, e))?;
    Ok(())
}

/// Load a dataset written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let meta_path = with_ext(path, ".meta");
    let text = fs::read_to_string(&meta_path).map_err(|e| CoreError::io(&meta_path, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| CoreError::format(&meta_path, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(CoreError::format(
            &meta_path,
            format!("format version '{}', expected '{FORMAT_VERSION}'", meta.format_version),
        ));
    }
    if meta.dtype != "f32" || meta.endianness != "little" || meta.order != "C" {
        return Err(CoreError::format(&meta_path, "unsupported dtype/endianness/order"));
    }
    let [n, t, c, h, w] = meta.shape;
    if meta.start_hours.len() != n {
        return Err(CoreError::format(
            &meta_path,
            format!("{} start_hours for {n} samples", meta.start_hours.len()),
        ));
    }

    let bin_path = with_ext(path, ".bin");
    let mut file = fs::File::open(&bin_path).map_err(|e| CoreError::io(&bin_path, e))?;
    let expected = n * t * c * h * w * 4;
    let mut bytes = Vec::with_capacity(expected);
    file.read_to_end(&mut bytes).map_err(|e| CoreError::io(&bin_path, e))?;
    if bytes.len() != expected {
        return Err(CoreError::format(
            &bin_path,
            format!("{} bytes on disk, expected {expected}", bytes.len()),
        ));
    }

    let per_sample = t * c * h * w;
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let mut values = Vec::with_capacity(per_sample);
        let base = k * per_sample * 4;
        for off in (0..per_sample * 4).step_by(4) {
            let b = &bytes[base + off..base + off + 4];
            values.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        let values = ndarray::Array4::from_shape_vec((t, c, h, w), values)
            .map_err(|e| CoreError::format(&bin_path, e.to_string()))?;
        samples.push(SequenceSample {
            values,
            start_hour: meta.start_hours[k],
            channel_names: meta.channel_names.clone(),
            grid: meta.grid,
        });
    }
    Ok(Dataset { samples, normalization: meta.normalization })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_episodes, WorldOptions};
    use crate::data::{assemble_dataset, fit_normalization};

    fn sample_dataset() -> Dataset {
        let grid = GridSpec::default_region(8, 10).unwrap();
        let eps = generate_episodes(5, &grid, 3, 6, 3, &WorldOptions::default()).unwrap();
        let mut d = assemble_dataset(&eps, 4).unwrap();
        d.normalization = Some(fit_normalization(&d).unwrap());
        d
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train");
        let d = sample_dataset();
        save_dataset(&d, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn version_mismatch_reports_path_and_expected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train");
        save_dataset(&sample_dataset(), &path).unwrap();
        let meta_path = dir.path().join("train.meta");
        let text = std::fs::read_to_string(&meta_path).unwrap();
        std::fs::write(&meta_path, text.replace("\"format_version\": \"1\"", "\"format_version\": \"9\"")).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("train.meta") && err.contains("expected '1'"), "{err}");
    }

    #[test]
    fn truncated_bin_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train");
        save_dataset(&sample_dataset(), &path).unwrap();
        let bin_path = dir.path().join("train.bin");
        let bytes = std::fs::read(&bin_path).unwrap();
        std::fs::write(&bin_path, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("bytes on disk"), "{err}");
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_dataset(Path::new("/nonexistent/nope")).unwrap_err().to_string();
        assert!(err.contains("nope.meta"), "{err}");
    }
}
