//! Merged-input assembly from normalized sequence windows.

use ndarray::{s, Array4, Array5, ArrayView5, Axis};

use crate::cascade::PhaseSpec;
use crate::data::{Dataset, NormalizationTable, SequenceSample, SAT_CHANNEL};
use crate::error::{CoreError, Result};
use crate::network::MergedLayout;

/// Stack samples into a normalized (B, T, C, H, W) array.
pub fn normalized_windows(samples: &[&SequenceSample], table: &NormalizationTable) -> Result<Array5<f32>> {
    let first = samples.first().ok_or_else(|| CoreError::config("empty batch"))?;
    let (t, c, h, w) = first.shape();
    if c != table.ranges.len() {
        return Err(CoreError::shape(format!(
            "samples have {c} channels, normalization covers {}",
            table.ranges.len()
        )));
    }
    let mut out = Array5::zeros((samples.len(), t, c, h, w));
    for (bi, sample) in samples.iter().enumerate() {
        if sample.shape() != (t, c, h, w) {
            return Err(CoreError::shape(format!("sample {bi} shape differs")));
        }
        let mut dst = out.index_axis_mut(Axis(0), bi);
        for ti in 0..t {
            for ci in 0..c {
                let src = sample.values.slice(s![ti, ci, .., ..]);
                let mut d = dst.slice_mut(s![ti, ci, .., ..]);
                d.zip_mut_with(&src, |o, &v| *o = table.to_normalized(ci, v));
            }
        }
    }
    Ok(out)
}

/// Convenience accessor over a whole dataset slice.
pub fn dataset_windows<'a>(dataset: &'a Dataset, indices: &[usize]) -> Result<Vec<&'a SequenceSample>> {
    indices
        .iter()
        .map(|&i| {
            dataset
                .samples
                .get(i)
                .ok_or_else(|| CoreError::config(format!("index {i} out of range")))
        })
        .collect()
}

/// Build the merged conditioning template and the normalized target frames.
///
/// The template holds observed satellite frames in the conditioning slots
/// (with `generated` frames substituted into the generated sub-range when
/// given), condition-field channels for every merged frame when the variant
/// uses them, zeros in the target slots, and a trailing layout-flag channel
/// (0 base window, 1 generated-frame window).
pub fn build_template(
    values_norm: &ArrayView5<f32>,
    phase: &PhaseSpec,
    use_condition_fields: bool,
    generated: Option<&Array4<f32>>,
) -> Result<(Array4<f32>, Array4<f32>, MergedLayout)> {
    let (b, t_src, c_src, h, w) = values_norm.dim();
    if phase.window.end > t_src {
        return Err(CoreError::shape(format!(
            "phase window {:?} exceeds source frames {t_src}",
            phase.window
        )));
    }
    let t_w = phase.window.len();
    let c_eff = if use_condition_fields { c_src } else { 1 };
    let layout = MergedLayout { t: t_w, c: c_eff, mask: true };
    let mut template = Array4::zeros((b, layout.in_channels(), h, w));

    // Satellite channel for conditioning frames.
    for f in phase.sat_condition.clone() {
        let src_f = phase.window.start + f;
        let ch = layout.channel_of(f, SAT_CHANNEL);
        let is_generated_slot = phase
            .generated
            .as_ref()
            .map(|g| g.contains(&f))
            .unwrap_or(false);
        if is_generated_slot {
            let gen = generated.ok_or_else(|| {
                CoreError::config("phase expects generated frames but none were provided")
            })?;
            let g0 = phase.generated.as_ref().unwrap().start;
            if gen.dim() != (b, phase.generated.as_ref().unwrap().len(), h, w) {
                return Err(CoreError::shape(format!(
                    "generated frames have shape {:?}",
                    gen.dim()
                )));
            }
            template
                .slice_mut(s![.., ch, .., ..])
                .assign(&gen.slice(s![.., f - g0, .., ..]));
        } else {
            template
                .slice_mut(s![.., ch, .., ..])
                .assign(&values_norm.slice(s![.., src_f, SAT_CHANNEL, .., ..]));
        }
    }

    // Condition-field channels over the whole merged window.
    if use_condition_fields {
        for f in phase.condition_fields.clone() {
            let src_f = phase.window.start + f;
            for ci in 1..c_src {
                let ch = layout.channel_of(f, ci);
                template
                    .slice_mut(s![.., ch, .., ..])
                    .assign(&values_norm.slice(s![.., src_f, ci, .., ..]));
            }
        }
    }

    // Layout flag channel.
    let flag = if phase.uses_generated_frames { 1.0 } else { 0.0 };
    template
        .slice_mut(s![.., layout.in_channels() - 1, .., ..])
        .fill(flag);

    // Ground-truth normalized target frames.
    let mut target = Array4::zeros((b, phase.n_target(), h, w));
    for (k, f) in phase.target.clone().enumerate() {
        let src_f = phase.window.start + f;
        target
            .slice_mut(s![.., k, .., ..])
            .assign(&values_norm.slice(s![.., src_f, SAT_CHANNEL, .., ..]));
    }
    Ok((template, target, layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{phase1_spec, phase2_spec};
    use crate::grid::GridSpec;

    fn windows(b: usize, t: usize, c: usize) -> Array5<f32> {
        Array5::from_shape_fn((b, t, c, 2, 2), |(bi, ti, ci, _, _)| {
            (bi * 100 + ti * 10 + ci) as f32 / 100.0
        })
    }

    #[test]
    fn template_places_channels_frame_major() {
        let vals = windows(1, 12, 3);
        let phase = phase1_spec(8, 4);
        let (tpl, target, layout) = build_template(&vals.view(), &phase, true, None).unwrap();
        assert_eq!(layout.in_channels(), 12 * 3 + 1);
        // Frame 2 sat channel
        assert_eq!(tpl[[0, 2 * 3, 0, 0]], vals[[0, 2, 0, 0, 0]]);
        // Frame 9 condition channel 2 present even in the target window
        assert_eq!(tpl[[0, 9 * 3 + 2, 0, 0]], vals[[0, 9, 2, 0, 0]]);
        // Target sat slots zeroed
        assert_eq!(tpl[[0, 9 * 3, 0, 0]], 0.0);
        // Mask flag is 0 for the base layout
        assert_eq!(tpl[[0, layout.in_channels() - 1, 0, 0]], 0.0);
        assert_eq!(target[[0, 1, 0, 0]], vals[[0, 9, 0, 0, 0]]);
    }

    #[test]
    fn nof_template_drops_condition_channels() {
        let vals = windows(2, 12, 4);
        let phase = phase1_spec(8, 4);
        let (tpl, _, layout) = build_template(&vals.view(), &phase, false, None).unwrap();
        assert_eq!(layout.c, 1);
        assert_eq!(tpl.dim().1, 13);
    }

    #[test]
    fn phase2_template_uses_generated_frames() {
        let vals = windows(1, 16, 2);
        let phase = phase2_spec();
        let gen = Array4::from_elem((1, 4, 2, 2), -0.77f32);
        let (tpl, target, layout) = build_template(&vals.view(), &phase, true, Some(&gen)).unwrap();
        // Slots 0..4 observed frames 4..8 of the source window.
        assert_eq!(tpl[[0, layout.channel_of(0, 0), 0, 0]], vals[[0, 4, 0, 0, 0]]);
        // Slots 4..8 hold generated imagery.
        assert_eq!(tpl[[0, layout.channel_of(5, 0), 0, 0]], -0.77);
        // Mask flag raised.
        assert_eq!(tpl[[0, layout.in_channels() - 1, 0, 0]], 1.0);
        // Target maps to source frames 12..16.
        assert_eq!(target[[0, 0, 0, 0]], vals[[0, 12, 0, 0, 0]]);
        // Missing generated frames is an error.
        assert!(build_template(&vals.view(), &phase, true, None).is_err());
    }

    #[test]
    fn normalized_windows_applies_table() {
        let grid = GridSpec::default_region(2, 2).unwrap();
        let s = SequenceSample {
            values: Array4::from_elem((2, 1, 2, 2), 245.0),
            start_hour: 0,
            channel_names: vec!["bt".into()],
            grid,
        };
        let table = NormalizationTable {
            channel_names: vec!["bt".into()],
            ranges: vec![(190.0, 300.0)],
        };
        let arr = normalized_windows(&[&s], &table).unwrap();
        assert!(arr.iter().all(|v| *v == 0.0));
    }
}
