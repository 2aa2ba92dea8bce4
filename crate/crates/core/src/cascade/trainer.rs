//! Phase training: conditional denoising with classifier-free-guidance
//! condition dropout, AdamW with warmup-cosine annealing, and an EMA of the
//! weights used for sampling.

use ndarray::{s, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::batch::{build_template, normalized_windows};
use crate::cascade::{PhaseSpec, Variant};
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::diffusion::{
    forward_sample_batch, sample, standard_noise, training_loss, training_loss_grad,
    NoiseSchedule, SampleOptions,
};
use crate::error::{CoreError, Result};
use crate::network::nn::optim::{AdamW, AdamWConfig, Ema};
use crate::network::nn::unet::{UNet, UNetConfig};
use crate::network::nn::{ParamStore, Tape};
use crate::network::{null_condition, UNetDenoiser};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub ema_decay: f64,
    /// Probability of replacing the condition with the null condition.
    pub cfg_drop_prob: f64,
    pub loss: crate::diffusion::LossKind,
    pub seed: u64,
    /// Epochs between regenerations of the first-phase inputs used for
    /// second-phase training; 0 generates once before training.
    pub phase2_regen_interval: usize,
    /// Sampler settings for producing those generated frames.
    pub phase2_generation: SampleOptions,
    /// Cap on windows used for second-phase fine-tuning (0 = all).
    pub phase2_subset: usize,
    pub log_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            batch_size: 16,
            epochs: 300,
            optimizer: AdamWConfig::default(),
            ema_decay: 0.999,
            cfg_drop_prob: 0.1,
            loss: crate::diffusion::LossKind::SmoothL1,
            seed: 0,
            phase2_regen_interval: 1,
            phase2_generation: SampleOptions { guidance_scale: 1.0, offset_scale: 0.05 },
            phase2_subset: 0,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Per-step loss trajectory.
    pub losses: Vec<f64>,
    pub steps: usize,
    pub diverged: bool,
}

/// Size hyperparameters shared by all phases of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub base_channels: usize,
    pub n_resolutions: usize,
    pub blocks_per_level: usize,
    pub attention_levels: Vec<usize>,
    pub time_embed_dim: usize,
    pub initial_kernel_size: usize,
}

impl Default for ArchParams {
    fn default() -> Self {
        ArchParams {
            base_channels: 32,
            n_resolutions: 2,
            blocks_per_level: 2,
            attention_levels: vec![1],
            time_embed_dim: 64,
            initial_kernel_size: 7,
        }
    }
}

/// Derive the network configuration for a phase/variant over data with
/// `n_channels` channels per frame.
pub fn unet_config_for(
    arch: &ArchParams,
    phase: &PhaseSpec,
    variant: Variant,
    n_channels: usize,
) -> UNetConfig {
    let c_eff = if variant.uses_condition_fields() { n_channels } else { 1 };
    UNetConfig {
        in_channels: phase.merged_frames() * c_eff + 1,
        out_channels: phase.n_target(),
        base_channels: arch.base_channels,
        n_resolutions: arch.n_resolutions,
        blocks_per_level: arch.blocks_per_level,
        attention_levels: arch.attention_levels.clone(),
        time_embed_dim: arch.time_embed_dim,
        initial_kernel_size: arch.initial_kernel_size,
    }
}

/// Generate first-phase predictions for every listed window, batched.
///
/// Returns normalized frames of shape (N, n_target, H, W).
pub fn generate_phase1_frames(
    phase1: &Checkpoint,
    dataset: &Dataset,
    indices: &[usize],
    opts: SampleOptions,
    gen_batch: usize,
    seed: u64,
) -> Result<Array4<f32>> {
    let table = &phase1.normalization;
    let (net, ps) = phase1.instantiate(true)?;
    let (_, _, h, w) = dataset.samples[0].shape();
    let n_target = phase1.phase.n_target();
    let mut out = Array4::zeros((indices.len(), n_target, h, w));
    let mut rng = crate::rng::stream(seed, "phase1-generation");
    let gen_batch = gen_batch.max(1);
    for (chunk_no, chunk) in indices.chunks(gen_batch).enumerate() {
        let samples: Vec<_> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
        let values = normalized_windows(&samples, table)?;
        let (template, _, layout) = build_template(
            &values.view(),
            &phase1.phase,
            phase1.variant.uses_condition_fields(),
            None,
        )?;
        let denoiser = UNetDenoiser::new(&net, &ps, layout, phase1.phase.clone(), template)?;
        let shape = (chunk.len(), n_target, h, w);
        let frames = sample(&denoiser, shape, &phase1.schedule, opts, &mut rng)?;
        let lo = chunk_no * gen_batch;
        out.slice_mut(s![lo..lo + chunk.len(), .., .., ..]).assign(&frames);
    }
    Ok(out)
}

/// Train one phase model.
///
/// For the second phase (`phase.uses_generated_frames`), `phase1` must be
/// provided; its EMA weights produce the generated conditioning frames,
/// refreshed every `phase2_regen_interval` epochs. `init_from` seeds the
/// weights (the second phase is initialized from the first).
#[allow(clippy::too_many_arguments)]
pub fn train_phase(
    dataset: &Dataset,
    phase: &PhaseSpec,
    variant: Variant,
    arch: &ArchParams,
    schedule: &NoiseSchedule,
    cfg: &TrainerConfig,
    init_from: Option<&Checkpoint>,
    phase1: Option<&Checkpoint>,
) -> Result<(Checkpoint, TrainOutcome)> {
    let table = dataset
        .normalization
        .clone()
        .ok_or_else(|| CoreError::config("dataset has no normalization table"))?;
    let first = dataset
        .samples
        .first()
        .ok_or_else(|| CoreError::config("cannot train on an empty dataset"))?;
    let (t_src, n_channels, _, _) = first.shape();
    if phase.window.end > t_src {
        return Err(CoreError::config(format!(
            "phase needs {} source frames, dataset windows have {t_src}",
            phase.window.end
        )));
    }
    if phase.uses_generated_frames && phase1.is_none() {
        return Err(CoreError::config(
            "second-phase training requires a first-phase checkpoint for frame generation",
        ));
    }

    let unet_cfg = unet_config_for(arch, phase, variant, n_channels);
    let mut ps = ParamStore::<f32>::new();
    let net = UNet::build(&unet_cfg, &mut ps, cfg.seed ^ 0x5eed)?;
    if let Some(init) = init_from {
        // Weight transfer by name where shapes agree; layers tied to other
        // input/output widths keep their fresh initialization.
        let mut copied = 0usize;
        for (dst, src) in ps.ids().zip(init.params.ids()).collect::<Vec<_>>() {
            if ps.name(dst) == init.params.name(src)
                && ps.value(dst).shape() == init.params.value(src).shape()
            {
                ps.value_mut(dst).assign(init.params.value(src));
                copied += 1;
            }
        }
        log::info!("initialized {copied}/{} tensors from the provided checkpoint", ps.len());
    }

    // Training indices (optionally capped for fine-tuning).
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    if phase.uses_generated_frames && cfg.phase2_subset > 0 && cfg.phase2_subset < indices.len() {
        let mut pick_rng = crate::rng::stream(cfg.seed, "phase2-subset");
        indices.shuffle(&mut pick_rng);
        indices.truncate(cfg.phase2_subset);
    }

    let n = indices.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt_cfg = cfg.optimizer;
    if opt_cfg.total_steps == 0 {
        opt_cfg.total_steps = total_steps;
    }
    let mut opt = AdamW::new(opt_cfg, &ps);
    let mut ema = Ema::new(cfg.ema_decay, &ps);

    let mut shuffle_rng = crate::rng::stream(cfg.seed, "train-shuffle");
    let mut noise_rng = crate::rng::stream(cfg.seed, "train-noise");
    let mut drop_rng = crate::rng::stream(cfg.seed, "train-cfg-drop");

    let mut losses = Vec::with_capacity(total_steps);
    let mut generated: Option<Array4<f32>> = None;
    let mut last_good = ps.clone();
    let mut diverged = false;

    'training: for epoch in 0..cfg.epochs {
        if phase.uses_generated_frames {
            let due = if cfg.phase2_regen_interval == 0 {
                generated.is_none()
            } else {
                epoch % cfg.phase2_regen_interval == 0
            };
            if due {
                log::info!("epoch {epoch}: generating first-phase frames for {n} windows");
                generated = Some(generate_phase1_frames(
                    phase1.unwrap(),
                    dataset,
                    &indices,
                    cfg.phase2_generation,
                    64,
                    cfg.seed ^ ((epoch as u64) << 32),
                )?);
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<_> = batch.iter().map(|&k| &dataset.samples[indices[k]]).collect();
            let values = normalized_windows(&samples, &table)?;
            let gen_batch: Option<Array4<f32>> = generated.as_ref().map(|g| {
                let mut gb = Array4::zeros((batch.len(), g.dim().1, g.dim().2, g.dim().3));
                for (row, &k) in batch.iter().enumerate() {
                    gb.index_axis_mut(Axis(0), row).assign(&g.index_axis(Axis(0), k));
                }
                gb
            });
            let (mut merged, target, layout) = build_template(
                &values.view(),
                phase,
                variant.uses_condition_fields(),
                gen_batch.as_ref(),
            )?;

            let bsz = batch.len();
            let ts: Vec<usize> =
                (0..bsz).map(|_| noise_rng.gen_range(1..=schedule.n_steps())).collect();
            let eps = standard_noise::<f32>(target.dim(), &mut noise_rng);
            let x_t = forward_sample_batch(&target, &ts, &eps, schedule)?;
            crate::network::insert_target(&mut merged, &x_t, &layout, phase)?;

            // Classifier-free-guidance condition dropout, per sample.
            let nulled = null_condition(&merged, &layout, phase)?;
            for bi in 0..bsz {
                if drop_rng.gen_range(0.0..1.0) < cfg.cfg_drop_prob {
                    merged
                        .index_axis_mut(Axis(0), bi)
                        .assign(&nulled.index_axis(Axis(0), bi));
                }
            }

            let mut tape = Tape::new();
            let eps_pred = net.forward(&ps, &merged, &ts, Some(&mut tape))?;
            let loss = training_loss(&eps_pred, &eps, cfg.loss)? as f64;
            if !loss.is_finite() {
                log::error!(
                    "non-finite loss at step {}; aborting with last good weights",
                    losses.len()
                );
                ps = last_good.clone();
                diverged = true;
                break 'training;
            }
            let dloss = training_loss_grad(&eps_pred, &eps, cfg.loss)?;
            net.backward(&mut ps, &mut tape, &dloss);
            last_good = ps.clone();
            opt.update(&mut ps);
            ema.update(&ps);
            losses.push(loss);
            if cfg.log_every > 0 && losses.len() % cfg.log_every == 0 {
                let tail = &losses[losses.len().saturating_sub(cfg.log_every)..];
                let avg = tail.iter().sum::<f64>() / tail.len() as f64;
                log::info!("step {}/{total_steps}: loss {avg:.5}", losses.len());
            }
        }
    }

    let mut ema_ps = ps.clone();
    ema.apply_to(&mut ema_ps);
    let ckpt = Checkpoint {
        unet: unet_cfg,
        phase: phase.clone(),
        variant,
        schedule: schedule.clone(),
        normalization: table,
        train_step: losses.len() as u64,
        params: ps,
        ema_params: ema_ps,
    };
    let steps = losses.len();
    Ok((ckpt, TrainOutcome { losses, steps, diverged }))
}
