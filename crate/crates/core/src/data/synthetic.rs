//! Latent-field cloud simulator.
//!
//! A cloud-intensity field evolves by semi-Lagrangian advection under latent
//! winds, grows or decays where a latent moisture field is anomalously moist
//! or dry, and receives a small stochastic perturbation. The latent fields
//! are emitted as condition channels, so they are causally informative about
//! the future cloud field; a pressure-analog channel evolves independently
//! of the cloud and carries no predictive information.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{SequenceSample, BT_MAX, BT_SPAN};
use crate::error::{CoreError, Result};
use crate::grid::GridSpec;

/// Boundary handling for advection and blurring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Periodic,
    Clamped,
}

/// Wind selection per episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WindMode {
    /// Random base wind drawn per episode, plus smooth spatial jitter.
    Random,
    /// Fixed uniform wind in grid-cells per hour (no jitter).
    Constant { u: f32, v: f32 },
}

/// Generator controls. Defaults give a learnable but non-trivial scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldOptions {
    pub boundary: Boundary,
    pub wind: WindMode,
    /// Scale of the random base wind (cells/hour).
    pub wind_speed: f32,
    /// Amplitude of smooth spatial wind perturbation (cells/hour).
    pub wind_jitter: f32,
    /// Bound on the per-episode wind rotation rate (degrees/hour).
    pub wind_rotation_max_deg: f32,
    /// Logistic growth/decay rate per hour, driven by the moisture anomaly.
    pub growth_rate: f32,
    /// Per-step stochastic perturbation of the cloud intensity.
    pub noise_sigma: f32,
    /// AR refresh rate for the latent moisture and pressure fields
    /// (0 freezes them).
    pub latent_evolution: f32,
    /// Approximate initial cloud coverage fraction.
    pub cloud_cover: f32,
}

impl Default for WorldOptions {
    fn default() -> Self {
        WorldOptions {
            boundary: Boundary::Periodic,
            wind: WindMode::Random,
            wind_speed: 1.0,
            wind_jitter: 0.25,
            wind_rotation_max_deg: 3.0,
            growth_rate: 0.35,
            noise_sigma: 0.012,
            latent_evolution: 0.05,
            cloud_cover: 0.35,
        }
    }
}

fn wrap(i: isize, n: usize, boundary: Boundary) -> usize {
    match boundary {
        Boundary::Periodic => i.rem_euclid(n as isize) as usize,
        Boundary::Clamped => i.clamp(0, n as isize - 1) as usize,
    }
}

/// Smooth unit-scale random field: blurred white noise, standardized.
fn smooth_field(h: usize, w: usize, passes: usize, boundary: Boundary, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let mut f = Array2::from_shape_fn((h, w), |_| rng.sample::<f32, _>(StandardNormal));
    for _ in 0..passes {
        let src = f.clone();
        for i in 0..h {
            for j in 0..w {
                let ii = i as isize;
                let jj = j as isize;
                let up = src[[wrap(ii - 1, h, boundary), j]];
                let dn = src[[wrap(ii + 1, h, boundary), j]];
                let lf = src[[i, wrap(jj - 1, w, boundary)]];
                let rt = src[[i, wrap(jj + 1, w, boundary)]];
                f[[i, j]] = 0.5 * src[[i, j]] + 0.125 * (up + dn + lf + rt);
            }
        }
    }
    let mean = f.sum() / f.len() as f32;
    let var = f.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / f.len() as f32;
    let std = var.sqrt().max(1e-6);
    f.mapv_inplace(|v| (v - mean) / std);
    f
}

/// Backward semi-Lagrangian advection with bilinear interpolation.
///
/// Interpolation weights are computed in f64 so the operation commutes with
/// integer grid shifts to rounding precision; displacements landing exactly
/// on grid points reproduce source values bit-exactly.
pub fn advect(field: &Array2<f32>, u: &Array2<f32>, v: &Array2<f32>, dt: f32, boundary: Boundary) -> Array2<f32> {
    let (h, w) = field.dim();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            // u moves columns (lon), v moves rows (lat).
            let src_i = i as f64 - v[[i, j]] as f64 * dt as f64;
            let src_j = j as f64 - u[[i, j]] as f64 * dt as f64;
            let i0 = src_i.floor();
            let j0 = src_j.floor();
            let fi = src_i - i0;
            let fj = src_j - j0;
            let i0 = i0 as isize;
            let j0 = j0 as isize;
            let (ia, ib) = (wrap(i0, h, boundary), wrap(i0 + 1, h, boundary));
            let (ja, jb) = (wrap(j0, w, boundary), wrap(j0 + 1, w, boundary));
            if fi == 0.0 && fj == 0.0 {
                out[[i, j]] = field[[ia, ja]];
            } else {
                let val = (1.0 - fi) * (1.0 - fj) * field[[ia, ja]] as f64
                    + (1.0 - fi) * fj * field[[ia, jb]] as f64
                    + fi * (1.0 - fj) * field[[ib, ja]] as f64
                    + fi * fj * field[[ib, jb]] as f64;
                out[[i, j]] = val as f32;
            }
        }
    }
    out
}

/// Latent world state for one episode.
#[derive(Debug, Clone)]
pub struct SyntheticWorldState {
    pub cloud: Array2<f32>,
    pub u: Array2<f32>,
    pub v: Array2<f32>,
    pub moisture: Array2<f32>,
    pub pressure: Array2<f32>,
}

fn quantile(values: &Array2<f32>, q: f32) -> f32 {
    let mut v: Vec<f32> = values.iter().copied().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    let idx = ((v.len() - 1) as f32 * q).round() as usize;
    v[idx]
}

fn init_state(grid: &GridSpec, opts: &WorldOptions, rng: &mut ChaCha8Rng) -> SyntheticWorldState {
    let (h, w) = grid.shape();
    let s = smooth_field(h, w, 8, opts.boundary, rng);
    // Soft-threshold into blobs: zero over the dry fraction, ramping to 1.
    let q = quantile(&s, 1.0 - opts.cloud_cover);
    let peak = quantile(&s, 0.995);
    let spread = (peak - q).max(0.3);
    let cloud = s.mapv(|v| ((v - q) / spread).clamp(0.0, 1.0));

    let (u, v) = match opts.wind {
        WindMode::Constant { u, v } => {
            (Array2::from_elem((h, w), u), Array2::from_elem((h, w), v))
        }
        WindMode::Random => {
            let dir: f32 = rng.gen_range(-std::f32::consts::PI..std::f32::consts::PI);
            let speed: f32 = opts.wind_speed * rng.gen_range(0.6..1.4);
            let base_u = speed * dir.cos();
            let base_v = speed * dir.sin();
            let ju = smooth_field(h, w, 10, opts.boundary, rng);
            let jv = smooth_field(h, w, 10, opts.boundary, rng);
            (
                ju.mapv(|x| base_u + opts.wind_jitter * x),
                jv.mapv(|x| base_v + opts.wind_jitter * x),
            )
        }
    };
    let moisture = smooth_field(h, w, 8, opts.boundary, rng).mapv(|v| (0.8 * v).tanh());
    let pressure = smooth_field(h, w, 8, opts.boundary, rng);
    SyntheticWorldState { cloud, u, v, moisture, pressure }
}

fn step_state(state: &mut SyntheticWorldState, opts: &WorldOptions, rot: f32, rng: &mut ChaCha8Rng) {
    // Advect cloud and moisture with the current wind.
    state.cloud = advect(&state.cloud, &state.u, &state.v, 1.0, opts.boundary);
    if opts.latent_evolution > 0.0 {
        state.moisture = advect(&state.moisture, &state.u, &state.v, 1.0, opts.boundary);
    }

    // Growth/decay driven by the moisture anomaly.
    if opts.growth_rate > 0.0 {
        let g = opts.growth_rate;
        for (c, m) in state.cloud.iter_mut().zip(state.moisture.iter()) {
            *c = (*c + g * *m * *c * (1.0 - *c)).clamp(0.0, 1.0);
        }
    }

    // Small stochastic perturbation, smoothed one pass to avoid salt noise.
    if opts.noise_sigma > 0.0 {
        let (h, w) = state.cloud.dim();
        let noise = smooth_field(h, w, 1, opts.boundary, rng);
        for (c, n) in state.cloud.iter_mut().zip(noise.iter()) {
            *c = (*c + opts.noise_sigma * n).clamp(0.0, 1.0);
        }
    }

    // Slow wind rotation.
    if rot != 0.0 {
        let (sin, cos) = rot.to_radians().sin_cos();
        for (u, v) in state.u.iter_mut().zip(state.v.iter_mut()) {
            let (pu, pv) = (*u, *v);
            *u = cos * pu - sin * pv;
            *v = sin * pu + cos * pv;
        }
    }

    // Latent AR refresh: moisture drifts, pressure evolves independently of
    // the cloud field entirely.
    if opts.latent_evolution > 0.0 {
        let (h, w) = state.cloud.dim();
        let a = opts.latent_evolution;
        let fresh_m = smooth_field(h, w, 8, opts.boundary, rng);
        for (m, f) in state.moisture.iter_mut().zip(fresh_m.iter()) {
            *m = ((1.0 - a) * *m + a * f).clamp(-1.0, 1.0);
        }
        let fresh_p = smooth_field(h, w, 8, opts.boundary, rng);
        for (p, f) in state.pressure.iter_mut().zip(fresh_p.iter()) {
            *p = (1.0 - a) * *p + a * f;
        }
    }
}

/// Generate one episode with default world options.
pub fn generate_episode(
    seed: u64,
    grid: &GridSpec,
    n_steps: usize,
    n_condition_channels: usize,
) -> Result<SequenceSample> {
    generate_episode_with(seed, grid, n_steps, n_condition_channels, &WorldOptions::default())
}

/// Generate one `(n_steps, 1 + n_condition_channels, H, W)` episode.
///
/// Channel 0 is brightness temperature in kelvin; condition channels are the
/// latent fields sampled at each step, in the order wind-u, wind-v,
/// moisture, pressure, then independent extra fields if more are requested.
pub fn generate_episode_with(
    seed: u64,
    grid: &GridSpec,
    n_steps: usize,
    n_condition_channels: usize,
    opts: &WorldOptions,
) -> Result<SequenceSample> {
    if n_steps < 2 {
        return Err(CoreError::config(format!("n_steps must be >= 2, got {n_steps}")));
    }
    if n_condition_channels < 1 {
        return Err(CoreError::config("n_condition_channels must be >= 1"));
    }
    let (h, w) = grid.shape();
    let mut rng = crate::rng::stream(seed, "synthetic-episode");
    let mut state = init_state(grid, opts, &mut rng);
    let rot = if opts.wind_rotation_max_deg > 0.0 {
        rng.gen_range(-opts.wind_rotation_max_deg..opts.wind_rotation_max_deg)
    } else {
        0.0
    };
    let n_extra = n_condition_channels.saturating_sub(4);
    let mut extras: Vec<Array2<f32>> =
        (0..n_extra).map(|_| smooth_field(h, w, 8, opts.boundary, &mut rng)).collect();

    let c_total = 1 + n_condition_channels;
    let mut values = ndarray::Array4::zeros((n_steps, c_total, h, w));
    for t in 0..n_steps {
        if t > 0 {
            step_state(&mut state, opts, rot, &mut rng);
            if opts.latent_evolution > 0.0 {
                let a = opts.latent_evolution;
                for e in extras.iter_mut() {
                    let fresh = smooth_field(h, w, 8, opts.boundary, &mut rng);
                    for (x, f) in e.iter_mut().zip(fresh.iter()) {
                        *x = (1.0 - a) * *x + a * f;
                    }
                }
            }
        }
        let latents: Vec<&Array2<f32>> = [&state.u, &state.v, &state.moisture, &state.pressure]
            .into_iter()
            .chain(extras.iter())
            .collect();
        for i in 0..h {
            for j in 0..w {
                values[[t, 0, i, j]] = BT_MAX - BT_SPAN * state.cloud[[i, j]];
            }
        }
        for (ci, lat) in latents.iter().take(n_condition_channels).enumerate() {
            for i in 0..h {
                for j in 0..w {
                    values[[t, 1 + ci, i, j]] = lat[[i, j]];
                }
            }
        }
    }

    let mut channel_names = vec!["bt".to_string()];
    let base = ["wind_u", "wind_v", "moisture", "pressure"];
    for ci in 0..n_condition_channels {
        if ci < base.len() {
            channel_names.push(base[ci].to_string());
        } else {
            channel_names.push(format!("extra_{}", ci - base.len()));
        }
    }
    Ok(SequenceSample { values, start_hour: (seed as i64) << 8, channel_names, grid: *grid })
}

/// Generate `n_episodes` episodes with per-episode derived seeds.
pub fn generate_episodes(
    base_seed: u64,
    grid: &GridSpec,
    n_episodes: usize,
    episode_len: usize,
    n_condition_channels: usize,
    opts: &WorldOptions,
) -> Result<Vec<SequenceSample>> {
    (0..n_episodes)
        .map(|i| {
            generate_episode_with(
                base_seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(i as u64),
                grid,
                episode_len,
                n_condition_channels,
                opts,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    fn static_opts() -> WorldOptions {
        WorldOptions {
            wind: WindMode::Constant { u: 0.0, v: 0.0 },
            wind_rotation_max_deg: 0.0,
            growth_rate: 0.0,
            noise_sigma: 0.0,
            latent_evolution: 0.0,
            ..WorldOptions::default()
        }
    }

    #[test]
    fn shape_and_bt_range() {
        let grid = GridSpec::default_region(16, 24).unwrap();
        let s = generate_episode(7, &grid, 12, 4).unwrap();
        assert_eq!(s.shape(), (12, 5, 16, 24));
        for t in 0..12 {
            for &v in s.values.slice(s![t, 0, .., ..]).iter() {
                assert!((190.0..=300.0).contains(&v), "BT {v} out of range");
            }
        }
    }

    #[test]
    fn static_world_freezes_every_frame() {
        let grid = GridSpec::default_region(8, 10).unwrap();
        let s = generate_episode_with(3, &grid, 6, 4, &static_opts()).unwrap();
        let f0 = s.values.slice(s![0, .., .., ..]).to_owned();
        for t in 1..6 {
            let ft = s.values.slice(s![t, .., .., ..]).to_owned();
            assert_eq!(f0, ft, "frame {t} differs from frame 0");
        }
    }

    #[test]
    fn constant_wind_is_circular_shift() {
        let grid = GridSpec::default_region(8, 12).unwrap();
        let opts = WorldOptions {
            wind: WindMode::Constant { u: 1.0, v: 0.0 },
            wind_rotation_max_deg: 0.0,
            growth_rate: 0.0,
            noise_sigma: 0.0,
            latent_evolution: 0.0,
            boundary: Boundary::Periodic,
            ..WorldOptions::default()
        };
        let s = generate_episode_with(11, &grid, 5, 2, &opts).unwrap();
        let f0 = s.values.slice(s![0, 0, .., ..]).to_owned();
        for t in 1..5usize {
            let ft = s.values.slice(s![t, 0, .., ..]).to_owned();
            // Oracle: explicit circular shift by t cells in +lon.
            for i in 0..8 {
                for j in 0..12 {
                    let shifted = f0[[i, (j + 12 - t % 12) % 12]];
                    assert_eq!(ft[[i, j]], shifted, "t={t} i={i} j={j}");
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let grid = GridSpec::default_region(8, 10).unwrap();
        let a = generate_episode(42, &grid, 6, 4).unwrap();
        let b = generate_episode(42, &grid, 6, 4).unwrap();
        assert_eq!(a.values, b.values);
        let c = generate_episode(43, &grid, 6, 4).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn rejects_bad_arguments() {
        let grid = GridSpec::default_region(8, 10).unwrap();
        assert!(generate_episode(1, &grid, 1, 4).is_err());
        assert!(generate_episode(1, &grid, 5, 0).is_err());
    }

    #[test]
    fn extra_channels_are_named() {
        let grid = GridSpec::default_region(8, 10).unwrap();
        let s = generate_episode(1, &grid, 4, 6).unwrap();
        assert_eq!(
            s.channel_names,
            vec!["bt", "wind_u", "wind_v", "moisture", "pressure", "extra_0", "extra_1"]
        );
    }
}
