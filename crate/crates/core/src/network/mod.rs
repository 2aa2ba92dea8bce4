//! The denoiser and the merged time-channel input convention.
//!
//! Sequence windows (B, T, C, H, W) are flattened to (B, T*C, H, W) with
//! frame-major, channel-minor ordering: merged channel `t * C + c` holds
//! channel `c` of frame `t`. Noise is applied only to the target-frame
//! satellite channels; one extra binary channel flags the window layout so
//! the two cascade phases can share one architecture.

pub mod nn;

use ndarray::{s, Array4, Array5, Axis};

use crate::cascade::PhaseSpec;
use crate::data::SAT_CHANNEL;
use crate::diffusion::GuidedDenoiser;
use crate::error::{CoreError, Result};
use nn::unet::{UNet, UNetConfig};
use nn::{ParamStore, Scalar};

pub use nn::unet::UNetConfig as NetConfig;

/// Shape metadata for a merged input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergedLayout {
    /// Frames in the merged window.
    pub t: usize,
    /// Channels per frame (1 when condition fields are excluded).
    pub c: usize,
    /// Whether a trailing layout-flag channel is appended.
    pub mask: bool,
}

impl MergedLayout {
    pub fn in_channels(&self) -> usize {
        self.t * self.c + usize::from(self.mask)
    }

    /// Merged channel index of channel `c` in frame `t`.
    pub fn channel_of(&self, frame: usize, channel: usize) -> usize {
        frame * self.c + channel
    }

    /// Merged channel indices of the target-frame satellite channels.
    pub fn target_channels(&self, phase: &PhaseSpec) -> Vec<usize> {
        phase.target.clone().map(|f| self.channel_of(f, SAT_CHANNEL)).collect()
    }
}

/// Reshape (B, T, C, H, W) into (B, T*C, H, W). Pure reshape, no copy of
/// element order.
pub fn merge_time_channel<F: Scalar>(x: &Array5<F>) -> Array4<F> {
    let (b, t, c, h, w) = x.dim();
    x.to_owned()
        .into_shape_with_order((b, t * c, h, w))
        .expect("merge reshape")
}

/// Inverse of [`merge_time_channel`].
pub fn unmerge_time_channel<F: Scalar>(x: &Array4<F>, t: usize, c: usize) -> Result<Array5<F>> {
    let (b, tc, h, w) = x.dim();
    if tc != t * c {
        return Err(CoreError::shape(format!(
            "merged input has {tc} channels, metadata says {t}x{c}"
        )));
    }
    Ok(x.to_owned().into_shape_with_order((b, t, c, h, w)).expect("unmerge reshape"))
}

fn check_phase(layout: &MergedLayout, phase: &PhaseSpec) -> Result<()> {
    if phase.target.end > layout.t || phase.sat_condition.end > layout.t {
        return Err(CoreError::shape(format!(
            "phase windows (sat {:?}, target {:?}) exceed merged window of {} frames",
            phase.sat_condition, phase.target, layout.t
        )));
    }
    Ok(())
}

/// Extract the target-window satellite channels from a merged tensor.
pub fn extract_target<F: Scalar>(
    merged: &Array4<F>,
    layout: &MergedLayout,
    phase: &PhaseSpec,
) -> Result<Array4<F>> {
    check_phase(layout, phase)?;
    let (b, _, h, w) = merged.dim();
    let idx = layout.target_channels(phase);
    let mut out = Array4::zeros((b, idx.len(), h, w));
    for (k, &ch) in idx.iter().enumerate() {
        out.slice_mut(s![.., k, .., ..]).assign(&merged.slice(s![.., ch, .., ..]));
    }
    Ok(out)
}

/// Write target-frame satellite channels into a merged tensor in place.
pub fn insert_target<F: Scalar>(
    merged: &mut Array4<F>,
    target: &Array4<F>,
    layout: &MergedLayout,
    phase: &PhaseSpec,
) -> Result<()> {
    check_phase(layout, phase)?;
    let idx = layout.target_channels(phase);
    if target.dim().1 != idx.len() {
        return Err(CoreError::shape(format!(
            "target has {} channels, phase expects {}",
            target.dim().1,
            idx.len()
        )));
    }
    for (k, &ch) in idx.iter().enumerate() {
        merged.slice_mut(s![.., ch, .., ..]).assign(&target.slice(s![.., k, .., ..]));
    }
    Ok(())
}

/// Zero the conditioning context: past satellite frames and all condition
/// channels become the normalized-zero value; the noised target channels and
/// the layout-flag channel are untouched.
pub fn null_condition<F: Scalar>(
    merged: &Array4<F>,
    layout: &MergedLayout,
    phase: &PhaseSpec,
) -> Result<Array4<F>> {
    check_phase(layout, phase)?;
    let mut out = merged.clone();
    let targets: std::collections::HashSet<usize> =
        layout.target_channels(phase).into_iter().collect();
    for frame in 0..layout.t {
        for channel in 0..layout.c {
            let ch = layout.channel_of(frame, channel);
            if !targets.contains(&ch) {
                out.slice_mut(s![.., ch, .., ..]).fill(F::zero());
            }
        }
    }
    Ok(out)
}

/// Build the denoiser network, reporting the parameter count.
pub fn build_denoiser<F: Scalar>(
    cfg: &UNetConfig,
    ps: &mut ParamStore<F>,
    seed: u64,
) -> Result<UNet> {
    let net = UNet::build(cfg, ps, seed)?;
    log::info!(
        "denoiser built: {} parameter tensors, {} parameters",
        ps.len(),
        ps.n_elements()
    );
    Ok(net)
}

/// A merged conditioning context bound to a network, implementing the
/// sampler-facing denoiser interface. The template holds everything except
/// the noised target channels, which the sampler supplies each step.
pub struct UNetDenoiser<'a> {
    pub net: &'a UNet,
    pub ps: &'a ParamStore<f32>,
    pub layout: MergedLayout,
    pub phase: PhaseSpec,
    template: Array4<f32>,
    null_template: Array4<f32>,
}

impl<'a> UNetDenoiser<'a> {
    /// `template` is the merged input with target slots holding anything
    /// (they are overwritten before each evaluation).
    pub fn new(
        net: &'a UNet,
        ps: &'a ParamStore<f32>,
        layout: MergedLayout,
        phase: PhaseSpec,
        template: Array4<f32>,
    ) -> Result<Self> {
        if template.dim().1 != layout.in_channels() {
            return Err(CoreError::shape(format!(
                "template has {} channels, layout expects {}",
                template.dim().1,
                layout.in_channels()
            )));
        }
        let null_template = null_condition(&template, &layout, &phase)?;
        Ok(UNetDenoiser { net, ps, layout, phase, template, null_template })
    }
}

impl GuidedDenoiser for UNetDenoiser<'_> {
    fn predict(&self, x_t: &Array4<f32>, t: usize, null: bool) -> Result<Array4<f32>> {
        let mut merged =
            if null { self.null_template.clone() } else { self.template.clone() };
        insert_target(&mut merged, x_t, &self.layout, &self.phase)?;
        let steps = vec![t; merged.dim().0];
        self.net.forward(self.ps, &merged, &steps, None)
    }
}

/// Stack per-sample merged inputs along the batch axis.
pub fn stack_batch<F: Scalar>(items: &[Array4<F>]) -> Array4<F> {
    let views: Vec<_> = items.iter().map(|a| a.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("stack_batch")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::phase1_spec;
    use ndarray::Array5;
    use rand::Rng;

    #[test]
    fn merge_shapes() {
        let x = Array5::<f32>::zeros((2, 12, 14, 16, 24));
        assert_eq!(merge_time_channel(&x).dim(), (2, 168, 16, 24));
        let tiny = Array5::<f32>::zeros((1, 1, 1, 4, 4));
        assert_eq!(merge_time_channel(&tiny).dim(), (1, 1, 4, 4));
    }

    #[test]
    fn merge_unmerge_round_trip_bit_exact() {
        let mut rng = crate::rng::stream(2, "merge-rt");
        let x = Array5::from_shape_fn((2, 3, 4, 5, 6), |_| rng.gen_range(-1.0f32..1.0));
        let merged = merge_time_channel(&x);
        let back = unmerge_time_channel(&merged, 3, 4).unwrap();
        assert_eq!(x, back);
        assert!(unmerge_time_channel(&merged, 4, 4).is_err());
    }

    #[test]
    fn merged_ordering_is_frame_major() {
        // channel index = frame * C + channel
        let mut x = Array5::<f32>::zeros((1, 3, 2, 1, 1));
        x[[0, 2, 1, 0, 0]] = 7.0;
        let merged = merge_time_channel(&x);
        assert_eq!(merged[[0, 2 * 2 + 1, 0, 0]], 7.0);
    }

    #[test]
    fn extract_insert_round_trip() {
        let phase = phase1_spec(8, 4);
        let layout = MergedLayout { t: 12, c: 3, mask: false };
        let mut rng = crate::rng::stream(3, "extract-rt");
        let mut merged =
            Array4::from_shape_fn((2, layout.in_channels(), 4, 4), |_| rng.gen_range(-1.0f32..1.0));
        let z = Array4::from_shape_fn((2, 4, 4, 4), |_| rng.gen_range(-1.0f32..1.0));
        insert_target(&mut merged, &z, &layout, &phase).unwrap();
        let back = extract_target(&merged, &layout, &phase).unwrap();
        assert_eq!(back, z);
    }

    #[test]
    fn extract_target_picks_expected_channels() {
        let phase = phase1_spec(8, 4);
        let layout = MergedLayout { t: 12, c: 14, mask: false };
        assert_eq!(layout.target_channels(&phase), vec![112, 126, 140, 154]);
        // Whole-sequence target on a single-channel layout is the identity.
        let mut whole = phase.clone();
        whole.target = 0..12;
        let one = MergedLayout { t: 12, c: 1, mask: false };
        let mut rng = crate::rng::stream(4, "extract-id");
        let merged = Array4::from_shape_fn((1, 12, 2, 2), |_| rng.gen_range(-1.0f32..1.0));
        let out = extract_target(&merged, &one, &whole).unwrap();
        assert_eq!(out, merged);
    }

    #[test]
    fn null_condition_zeroes_context_only() {
        let phase = phase1_spec(8, 4);
        let layout = MergedLayout { t: 12, c: 2, mask: true };
        let merged = Array4::from_elem((1, layout.in_channels(), 2, 2), 0.5f32);
        let nulled = null_condition(&merged, &layout, &phase).unwrap();
        let targets = layout.target_channels(&phase);
        for ch in 0..layout.in_channels() {
            let expect = if targets.contains(&ch) || ch == layout.in_channels() - 1 {
                0.5
            } else {
                0.0
            };
            assert_eq!(nulled[[0, ch, 0, 0]], expect, "channel {ch}");
        }
    }

    #[test]
    fn out_of_window_target_is_error() {
        let mut phase = phase1_spec(8, 4);
        phase.target = 10..14;
        let layout = MergedLayout { t: 12, c: 1, mask: false };
        let merged = Array4::<f32>::zeros((1, 12, 2, 2));
        assert!(extract_target(&merged, &layout, &phase).is_err());
    }
}
