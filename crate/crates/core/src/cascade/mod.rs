//! Two-phase cascade: window specifications, ablation variants, training and
//! autoregressive rollout.

pub mod batch;
pub mod rollout;
pub mod trainer;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use rollout::{rollout, ForecastArchive, LeadProvenance, RolloutOptions, RolloutPolicy};
pub use trainer::{train_phase, ArchParams, TrainOutcome, TrainerConfig};

/// Window definition for one training phase.
///
/// `window` selects the frames of the source sample that enter the merged
/// input; the remaining ranges are relative to that merged window (frame 0
/// is the first selected frame).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSpec {
    /// Slice of source-sample frames forming the merged window.
    pub window: Range<usize>,
    /// Frames whose satellite channel conditions the prediction.
    pub sat_condition: Range<usize>,
    /// Frames whose condition-field channels are provided (always the whole
    /// merged window here, mirroring the forecast-source availability).
    pub condition_fields: Range<usize>,
    /// Frames to predict.
    pub target: Range<usize>,
    /// Sub-range of `sat_condition` that holds generated rather than
    /// observed imagery (second phase only).
    pub generated: Option<Range<usize>>,
    pub uses_generated_frames: bool,
}

impl PhaseSpec {
    pub fn merged_frames(&self) -> usize {
        self.window.len()
    }

    pub fn n_target(&self) -> usize {
        self.target.len()
    }

    fn validate(&self) -> Result<()> {
        let len = self.window.len();
        if self.sat_condition.end > len || self.target.end > len || self.condition_fields.end > len
        {
            return Err(CoreError::config("phase windows exceed the merged window"));
        }
        if self.target.start < self.sat_condition.end && self.target.end > self.sat_condition.start
        {
            return Err(CoreError::config(
                "target window overlaps the satellite condition window",
            ));
        }
        Ok(())
    }
}

/// First phase: predict `t_out` frames from `t_in` observed frames. The
/// merged window spans `t_in + t_out` frames with the target at the tail.
pub fn phase1_spec(t_in: usize, t_out: usize) -> PhaseSpec {
    let len = t_in + t_out;
    let spec = PhaseSpec {
        window: 0..len,
        sat_condition: 0..t_in,
        condition_fields: 0..len,
        target: t_in..len,
        generated: None,
        uses_generated_frames: false,
    };
    spec.validate().expect("phase1 spec is well-formed by construction");
    spec
}

/// Second phase over a 16-frame source window (frames 0..16): the merged
/// window drops the oldest 4 frames; satellite conditioning is 4 observed
/// frames followed by 4 generated frames, and the target is the final 4.
pub fn phase2_spec() -> PhaseSpec {
    let spec = PhaseSpec {
        window: 4..16,
        sat_condition: 0..8,
        condition_fields: 0..12,
        target: 8..12,
        generated: Some(4..8),
        uses_generated_frames: true,
    };
    spec.validate().expect("phase2 spec is well-formed by construction");
    spec
}

/// Single-shot variant: predict 8 frames at once from 8 observed frames
/// over a 16-frame window.
pub fn noc_spec() -> PhaseSpec {
    let spec = PhaseSpec {
        window: 0..16,
        sat_condition: 0..8,
        condition_fields: 0..16,
        target: 8..16,
        generated: None,
        uses_generated_frames: false,
    };
    spec.validate().expect("noc spec is well-formed by construction");
    spec
}

/// Model variants: the full cascade model and its three ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Cascade, fine-tuned second phase, condition fields included.
    Full,
    /// Single-shot eight-frame prediction (no autoregression, no tuning).
    NoCascade,
    /// Autoregressive but without the fine-tuned second phase.
    NoTuning,
    /// Autoregressive without condition fields (and without fine-tuning).
    NoFields,
}

impl Variant {
    /// (autoregressive, fine_tuning, uses_condition_fields)
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::Full => (true, true, true),
            Variant::NoCascade => (false, false, true),
            Variant::NoTuning => (true, false, true),
            Variant::NoFields => (true, false, false),
        }
    }

    /// Inverse of [`Self::flags`]; any combination outside the four defined
    /// rows is rejected.
    pub fn from_flags(autoregressive: bool, fine_tuning: bool, condition_fields: bool) -> Result<Self> {
        match (autoregressive, fine_tuning, condition_fields) {
            (true, true, true) => Ok(Variant::Full),
            (false, false, true) => Ok(Variant::NoCascade),
            (true, false, true) => Ok(Variant::NoTuning),
            (true, false, false) => Ok(Variant::NoFields),
            other => Err(CoreError::config(format!(
                "no variant has flags (autoregressive, fine_tuning, condition_fields) = {other:?}"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCascade => "noc",
            Variant::NoTuning => "not",
            Variant::NoFields => "nof",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "noc" => Ok(Variant::NoCascade),
            "not" => Ok(Variant::NoTuning),
            "nof" => Ok(Variant::NoFields),
            other => Err(CoreError::config(format!(
                "unknown variant '{other}' (expected full|noc|not|nof)"
            ))),
        }
    }

    pub fn uses_condition_fields(self) -> bool {
        self.flags().2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase1_default_targets_tail() {
        let p = phase1_spec(8, 4);
        assert_eq!(p.window, 0..12);
        assert_eq!(p.target, 8..12);
        assert_eq!(p.sat_condition, 0..8);
        // 1-based frame labels of a 12-frame sequence: {9, 10, 11, 12}.
        let one_based: Vec<usize> = p.target.clone().map(|f| f + 1).collect();
        assert_eq!(one_based, vec![9, 10, 11, 12]);
    }

    #[test]
    fn phase1_desk_scale_and_disjointness() {
        let p = phase1_spec(2, 1);
        assert_eq!(p.window.len(), 3);
        assert_eq!(p.target, 2..3);
        // target and satellite condition never overlap
        for f in p.target.clone() {
            assert!(!p.sat_condition.contains(&f));
        }
    }

    #[test]
    fn phase2_layout() {
        let p = phase2_spec();
        assert_eq!(p.window, 4..16);
        assert_eq!(p.merged_frames(), 12);
        assert_eq!(p.target, 8..12);
        assert!(p.uses_generated_frames);
        assert_eq!(p.generated, Some(4..8));
    }

    #[test]
    fn variant_table_is_exactly_four_rows() {
        let mut ok = 0;
        for a in [false, true] {
            for f in [false, true] {
                for c in [false, true] {
                    match Variant::from_flags(a, f, c) {
                        Ok(v) => {
                            ok += 1;
                            assert_eq!(v.flags(), (a, f, c));
                        }
                        Err(_) => {}
                    }
                }
            }
        }
        assert_eq!(ok, 4);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Full, Variant::NoCascade, Variant::NoTuning, Variant::NoFields] {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("satcast").is_err());
    }
}
