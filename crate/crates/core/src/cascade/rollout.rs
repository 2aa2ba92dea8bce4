//! Autoregressive cascade rollout: first-phase chunks, fine-tuned
//! second-phase refinement for leads 5-8, and re-anchored first-phase
//! iteration beyond, with per-lead provenance.

use ndarray::{s, Array4, Array5, ArrayView5};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::batch::{build_template, normalized_windows};
use crate::cascade::PhaseSpec;
use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, NormalizationTable, SequenceSample, SAT_CHANNEL};
use crate::diffusion::{sample, NoiseSchedule, SampleOptions};
use crate::error::{CoreError, Result};
use crate::grid::GridSpec;
use crate::metrics::{evaluate_fields, MetricReport};
use crate::network::nn::unet::UNet;
use crate::network::nn::ParamStore;
use crate::network::{MergedLayout, UNetDenoiser};

/// How leads are assigned to the two phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutPolicy {
    /// Leads 1-4 from the first phase, 5-8 from the second (when present),
    /// beyond 8 by re-applying the first phase on the rolling window.
    Paper,
    /// First phase everywhere.
    Phase1Only,
}

impl RolloutPolicy {
    pub fn name(self) -> &'static str {
        match self {
            RolloutPolicy::Paper => "paper",
            RolloutPolicy::Phase1Only => "phase1_only",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub policy: RolloutPolicy,
    /// Beyond lead 8, alternate first- and second-phase chunks instead of
    /// first-phase only.
    pub alternate_beyond_8: bool,
    pub sample: SampleOptions,
    pub seed: u64,
    /// Windows sampled per batch during generation.
    pub batch: usize,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            policy: RolloutPolicy::Paper,
            alternate_beyond_8: false,
            sample: SampleOptions::default(),
            seed: 0,
            batch: 64,
        }
    }
}

/// Origin of each forecast lead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeadProvenance {
    Phase1,
    Phase2,
    Phase1Iterative,
    Phase2Iterative,
}

impl LeadProvenance {
    pub fn name(self) -> &'static str {
        match self {
            LeadProvenance::Phase1 => "phase1",
            LeadProvenance::Phase2 => "phase2",
            LeadProvenance::Phase1Iterative => "phase1-iterative",
            LeadProvenance::Phase2Iterative => "phase2-iterative",
        }
    }
}

/// Produces normalized target frames for a merged conditioning template.
pub trait FrameGenerator {
    fn generate(
        &self,
        template: Array4<f32>,
        layout: &MergedLayout,
        phase: &PhaseSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array4<f32>>;
}

/// Real generator backed by a denoiser network and the diffusion sampler.
pub struct DiffusionGenerator<'a> {
    pub net: &'a UNet,
    pub ps: &'a ParamStore<f32>,
    pub schedule: &'a NoiseSchedule,
    pub opts: SampleOptions,
}

impl FrameGenerator for DiffusionGenerator<'_> {
    fn generate(
        &self,
        template: Array4<f32>,
        layout: &MergedLayout,
        phase: &PhaseSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array4<f32>> {
        let (b, _, h, w) = template.dim();
        let denoiser = UNetDenoiser::new(self.net, self.ps, *layout, phase.clone(), template)?;
        sample(&denoiser, (b, phase.n_target(), h, w), self.schedule, self.opts, rng)
    }
}

/// One segment of the rollout plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ChunkKind {
    Phase1(LeadProvenance),
    Phase2(LeadProvenance),
}

fn plan_chunks(
    horizon: usize,
    chunk_len: usize,
    has_phase2: bool,
    opts: &RolloutOptions,
) -> Vec<ChunkKind> {
    let n_chunks = horizon.div_ceil(chunk_len);
    (0..n_chunks)
        .map(|k| {
            let use_phase2 = has_phase2
                && opts.policy == RolloutPolicy::Paper
                && (k == 1 || (opts.alternate_beyond_8 && k > 1 && k % 2 == 1));
            match (k, use_phase2) {
                (0, _) => ChunkKind::Phase1(LeadProvenance::Phase1),
                (1, true) => ChunkKind::Phase2(LeadProvenance::Phase2),
                (1, false) => ChunkKind::Phase1(LeadProvenance::Phase1Iterative),
                (_, true) => ChunkKind::Phase2(LeadProvenance::Phase2Iterative),
                (_, false) => ChunkKind::Phase1(LeadProvenance::Phase1Iterative),
            }
        })
        .collect()
}

/// Core rollout on normalized arrays.
///
/// `values` is (B, T_full, C, H, W) with observed satellite frames in
/// `0..t_in` and condition fields available for every frame the plan
/// touches. Returns normalized predictions (B, horizon, H, W) plus per-lead
/// provenance.
pub fn rollout_arrays(
    phase1: &dyn FrameGenerator,
    phase1_spec: &PhaseSpec,
    phase2: Option<(&dyn FrameGenerator, &PhaseSpec)>,
    use_condition_fields: bool,
    values: &ArrayView5<f32>,
    horizon: usize,
    opts: &RolloutOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(Array4<f32>, Vec<LeadProvenance>)> {
    if horizon == 0 {
        return Err(CoreError::config("horizon must be >= 1"));
    }
    let (b, t_full, c, h, w) = values.dim();
    let t_in = phase1_spec.sat_condition.len();
    let chunk_len = phase1_spec.n_target();
    let merged_frames = phase1_spec.merged_frames();
    let chunks = plan_chunks(horizon, chunk_len, phase2.is_some(), opts);
    let needed = t_in + chunks.len() * chunk_len;
    if t_full < needed {
        return Err(CoreError::config(format!(
            "rollout to horizon {horizon} needs condition fields for {needed} frames, windows have {t_full}"
        )));
    }

    // Satellite timeline: observed frames then generated frames.
    let mut timeline = Array4::<f32>::zeros((b, needed, h, w));
    for f in 0..t_in {
        timeline
            .slice_mut(s![.., f, .., ..])
            .assign(&values.slice(s![.., f, SAT_CHANNEL, .., ..]));
    }

    let mut provenance = Vec::with_capacity(horizon);
    for (k, kind) in chunks.iter().enumerate() {
        let start = k * chunk_len; // first timeline frame of this chunk's window
        let window_end = start + merged_frames;
        // Virtual source window: satellite from the timeline, condition
        // fields from the data.
        let mut virt = Array5::<f32>::zeros((b, merged_frames, c, h, w));
        for f in 0..merged_frames {
            let tl = start + f;
            virt.slice_mut(s![.., f, SAT_CHANNEL, .., ..])
                .assign(&timeline.slice(s![.., tl, .., ..]));
            for ci in 1..c {
                virt.slice_mut(s![.., f, ci, .., ..])
                    .assign(&values.slice(s![.., tl, ci, .., ..]));
            }
        }
        let (phase, generator): (PhaseSpec, &dyn FrameGenerator) = match kind {
            ChunkKind::Phase1(_) => {
                let mut p = phase1_spec.clone();
                p.window = 0..merged_frames;
                (p, phase1)
            }
            ChunkKind::Phase2(_) => {
                let (g, spec) = phase2.expect("plan only schedules phase2 when present");
                let mut p = spec.clone();
                p.window = 0..merged_frames;
                // The timeline already holds the generated frames.
                p.generated = None;
                (p, g)
            }
        };
        let (template, _, layout) = build_template(&virt.view(), &phase, use_condition_fields, None)?;
        let frames = generator.generate(template, &layout, &phase, rng)?;
        if !frames.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Divergence(format!("non-finite frames in chunk {k}")));
        }
        for f in 0..chunk_len {
            let tl = t_in + start + f;
            let _ = window_end;
            timeline
                .slice_mut(s![.., tl, .., ..])
                .assign(&frames.slice(s![.., f, .., ..]));
        }
        let prov = match kind {
            ChunkKind::Phase1(p) | ChunkKind::Phase2(p) => *p,
        };
        for _ in 0..chunk_len {
            if provenance.len() < horizon {
                provenance.push(prov);
            }
        }
    }

    let mut out = Array4::zeros((b, horizon, h, w));
    for lead in 0..horizon {
        out.slice_mut(s![.., lead, .., ..])
            .assign(&timeline.slice(s![.., t_in + lead, .., ..]));
    }
    Ok((out, provenance))
}

/// Per-init-time predicted fields in kelvin, plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastArchive {
    pub grid: GridSpec,
    pub init_hours: Vec<i64>,
    /// (N, horizon, H, W) brightness temperature in kelvin.
    pub fields: Array4<f32>,
    /// One entry per lead.
    pub provenance: Vec<String>,
    pub variant: String,
    pub policy: String,
    pub checkpoint_hashes: Vec<String>,
    pub seed: u64,
}

impl ForecastArchive {
    pub fn horizon(&self) -> usize {
        self.fields.dim().1
    }

    pub fn n_init_times(&self) -> usize {
        self.fields.dim().0
    }
}

/// Physical plausibility bounds for denormalized brightness temperature.
pub const BT_HARD_BOUNDS: (f32, f32) = (150.0, 350.0);

/// Roll out trained checkpoints over test windows.
///
/// Each window must carry `t_in` observed frames plus condition fields
/// covering the full plan; truth frames beyond `t_in` are ignored here (the
/// evaluation helpers read them). Outputs are denormalized to kelvin and
/// hard-clamped to physical bounds (clamps are logged).
pub fn rollout(
    phase1: &Checkpoint,
    phase2: Option<&Checkpoint>,
    windows: &[SequenceSample],
    horizon: usize,
    opts: &RolloutOptions,
) -> Result<ForecastArchive> {
    if opts.policy == RolloutPolicy::Paper
        && phase2.is_none()
        && phase1.variant == crate::cascade::Variant::Full
        && horizon > phase1.phase.n_target()
    {
        return Err(CoreError::config(
            "policy 'paper' with the full variant requires a second-phase checkpoint",
        ));
    }
    let table = &phase1.normalization;
    let (net1, ps1) = phase1.instantiate(true)?;
    let gen1 = DiffusionGenerator {
        net: &net1,
        ps: &ps1,
        schedule: &phase1.schedule,
        opts: opts.sample,
    };
    let loaded2 = match phase2 {
        Some(ck) => Some((ck.instantiate(true)?, ck)),
        None => None,
    };

    let (_, _, h, w) = windows
        .first()
        .ok_or_else(|| CoreError::config("no rollout windows"))?
        .shape();
    let n = windows.len();
    let mut fields = Array4::<f32>::zeros((n, horizon, h, w));
    let mut provenance: Vec<LeadProvenance> = Vec::new();
    let mut rng = crate::rng::stream(opts.seed, "rollout-sampling");
    let mut clamped = 0usize;
    let mut row = 0usize;
    for chunk in windows.chunks(opts.batch.max(1)) {
        let samples: Vec<&SequenceSample> = chunk.iter().collect();
        let values = normalized_windows(&samples, table)?;
        let (normed, prov) = match &loaded2 {
            Some(((net2, ps2), ck2)) => {
                let gen2 = DiffusionGenerator {
                    net: net2,
                    ps: ps2,
                    schedule: &ck2.schedule,
                    opts: opts.sample,
                };
                rollout_arrays(
                    &gen1,
                    &phase1.phase,
                    Some((&gen2 as &dyn FrameGenerator, &ck2.phase)),
                    phase1.variant.uses_condition_fields(),
                    &values.view(),
                    horizon,
                    opts,
                    &mut rng,
                )?
            }
            None => rollout_arrays(
                &gen1,
                &phase1.phase,
                None,
                phase1.variant.uses_condition_fields(),
                &values.view(),
                horizon,
                opts,
                &mut rng,
            )?,
        };
        provenance = prov;
        // Denormalize to kelvin with hard physical bounds.
        for (bi, _) in chunk.iter().enumerate() {
            for lead in 0..horizon {
                let src = normed.slice(s![bi, lead, .., ..]);
                let mut dst = fields.slice_mut(s![row + bi, lead, .., ..]);
                dst.zip_mut_with(&src, |o, &v| {
                    let kelvin = table.to_native(SAT_CHANNEL, v);
                    let c = kelvin.clamp(BT_HARD_BOUNDS.0, BT_HARD_BOUNDS.1);
                    if c != kelvin {
                        clamped += 1;
                    }
                    *o = c;
                });
            }
        }
        row += chunk.len();
    }
    if clamped > 0 {
        log::warn!("rollout: {clamped} values hit the physical BT bounds and were clamped");
    }

    let mut hashes = vec![phase1.content_hash()];
    if let Some(ck2) = phase2 {
        hashes.push(ck2.content_hash());
    }
    Ok(ForecastArchive {
        grid: windows[0].grid,
        init_hours: windows.iter().map(|s| s.start_hour + phase1.phase.sat_condition.len() as i64 - 1).collect(),
        fields,
        provenance: provenance.iter().map(|p| p.name().to_string()).collect(),
        variant: phase1.variant.name().to_string(),
        policy: opts.policy.name().to_string(),
        checkpoint_hashes: hashes,
        seed: opts.seed,
    })
}

/// Kelvin truth fields for leads `1..=horizon` from test windows whose first
/// `t_in` frames were the observations.
pub fn truth_fields(
    windows: &[SequenceSample],
    t_in: usize,
    horizon: usize,
) -> Result<Vec<Vec<ndarray::Array2<f64>>>> {
    windows
        .iter()
        .map(|s| {
            let (t, _, _, _) = s.shape();
            if t < t_in + horizon {
                return Err(CoreError::shape(format!(
                    "window has {t} frames, need {t_in} + {horizon}"
                )));
            }
            Ok((0..horizon)
                .map(|lead| {
                    s.values
                        .slice(s![t_in + lead, SAT_CHANNEL, .., ..])
                        .mapv(|v| v as f64)
                })
                .collect())
        })
        .collect()
}

/// Evaluate an archive against truth windows with the standard metric set.
pub fn evaluate_archive(
    archive: &ForecastArchive,
    truth_windows: &[SequenceSample],
    t_in: usize,
    csi_threshold: f64,
    msssim_scales: usize,
) -> Result<MetricReport> {
    if truth_windows.len() != archive.n_init_times() {
        return Err(CoreError::shape(format!(
            "archive has {} init times, truth has {}",
            archive.n_init_times(),
            truth_windows.len()
        )));
    }
    let horizon = archive.horizon();
    let truth = truth_fields(truth_windows, t_in, horizon)?;
    let pred: Vec<Vec<ndarray::Array2<f64>>> = (0..archive.n_init_times())
        .map(|i| {
            (0..horizon)
                .map(|lead| archive.fields.slice(s![i, lead, .., ..]).mapv(|v| v as f64))
                .collect()
        })
        .collect();
    evaluate_fields(&pred, &truth, &archive.grid, csi_threshold, msssim_scales)
}

/// Persist an archive as `<path>.meta` + `<path>.bin` (same container as
/// datasets, shape (N, horizon, H, W)).
pub fn save_archive(archive: &ForecastArchive, path: &std::path::Path) -> Result<()> {
    #[derive(Serialize)]
    struct Meta<'a> {
        format_version: String,
        kind: &'a str,
        dtype: &'a str,
        endianness: &'a str,
        order: &'a str,
        shape: [usize; 4],
        grid: GridSpec,
        init_hours: &'a [i64],
        provenance: &'a [String],
        variant: &'a str,
        policy: &'a str,
        checkpoint_hashes: &'a [String],
        seed: u64,
    }
    let (n, l, h, w) = archive.fields.dim();
    let meta = Meta {
        format_version: crate::data::io::FORMAT_VERSION.to_string(),
        kind: "forecast-archive",
        dtype: "f32",
        endianness: "little",
        order: "C",
        shape: [n, l, h, w],
        grid: archive.grid,
        init_hours: &archive.init_hours,
        provenance: &archive.provenance,
        variant: &archive.variant,
        policy: &archive.policy,
        checkpoint_hashes: &archive.checkpoint_hashes,
        seed: archive.seed,
    };
    let base = path.to_path_buf();
    let meta_file = {
        let mut p = base.as_os_str().to_owned();
        p.push(".meta");
        std::path::PathBuf::from(p)
    };
    let bin_file = {
        let mut p = base.as_os_str().to_owned();
        p.push(".bin");
        std::path::PathBuf::from(p)
    };
    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        }
    }
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| CoreError::format(&meta_file, e.to_string()))?;
    std::fs::write(&meta_file, json).map_err(|e| CoreError::io(&meta_file, e))?;
    let mut bytes = Vec::with_capacity(archive.fields.len() * 4);
    for &v in archive.fields.as_slice().expect("standard layout") {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&bin_file, bytes).map_err(|e| CoreError::io(&bin_file, e))?;
    Ok(())
}

/// Load an archive written by [`save_archive`].
pub fn load_archive(path: &std::path::Path) -> Result<ForecastArchive> {
    #[derive(Deserialize)]
    struct Meta {
        format_version: String,
        kind: String,
        dtype: String,
        endianness: String,
        shape: [usize; 4],
        grid: GridSpec,
        init_hours: Vec<i64>,
        provenance: Vec<String>,
        variant: String,
        policy: String,
        checkpoint_hashes: Vec<String>,
        seed: u64,
    }
    let meta_file = {
        let mut p = path.as_os_str().to_owned();
        p.push(".meta");
        std::path::PathBuf::from(p)
    };
    let bin_file = {
        let mut p = path.as_os_str().to_owned();
        p.push(".bin");
        std::path::PathBuf::from(p)
    };
    let text = std::fs::read_to_string(&meta_file).map_err(|e| CoreError::io(&meta_file, e))?;
    let meta: Meta =
        serde_json::from_str(&text).map_err(|e| CoreError::format(&meta_file, e.to_string()))?;
    if meta.format_version != crate::data::io::FORMAT_VERSION {
        return Err(CoreError::format(
            &meta_file,
            format!("format version '{}', expected '{}'", meta.format_version, crate::data::io::FORMAT_VERSION),
        ));
    }
    if meta.kind != "forecast-archive" || meta.dtype != "f32" || meta.endianness != "little" {
        return Err(CoreError::format(&meta_file, "not a forecast archive"));
    }
    let bytes = std::fs::read(&bin_file).map_err(|e| CoreError::io(&bin_file, e))?;
    let [n, l, h, w] = meta.shape;
    if bytes.len() != n * l * h * w * 4 {
        return Err(CoreError::format(
            &bin_file,
            format!("{} bytes on disk, expected {}", bytes.len(), n * l * h * w * 4),
        ));
    }
    let mut vals = Vec::with_capacity(n * l * h * w);
    for k in (0..bytes.len()).step_by(4) {
        vals.push(f32::from_le_bytes([bytes[k], bytes[k + 1], bytes[k + 2], bytes[k + 3]]));
    }
    let fields = Array4::from_shape_vec((n, l, h, w), vals)
        .map_err(|e| CoreError::format(&bin_file, e.to_string()))?;
    Ok(ForecastArchive {
        grid: meta.grid,
        init_hours: meta.init_hours,
        fields,
        provenance: meta.provenance,
        variant: meta.variant,
        policy: meta.policy,
        checkpoint_hashes: meta.checkpoint_hashes,
        seed: meta.seed,
    })
}

/// Convenience: slice a dataset into evaluation windows (all samples).
pub fn all_windows(dataset: &Dataset) -> Vec<SequenceSample> {
    dataset.samples.clone()
}

/// Normalization table accessor shared by rollout callers.
pub fn table_of(ck: &Checkpoint) -> &NormalizationTable {
    &ck.normalization
}
