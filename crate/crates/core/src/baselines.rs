//! Persistence and Lucas-Kanade optical-flow extrapolation baselines.
//! Both emit forecast archives in the same schema as model rollouts.

use ndarray::{s, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::cascade::rollout::ForecastArchive;
use crate::data::synthetic::{advect, Boundary};
use crate::data::{SequenceSample, SAT_CHANNEL};
use crate::error::{CoreError, Result};

/// Dense displacement field in grid-cells per hour.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Array2<f32>,
    pub v: Array2<f32>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlowOptions {
    /// Half-width of the local least-squares window.
    pub window_radius: usize,
    /// Gate on the smaller structure-tensor eigenvalue (per-pixel average,
    /// computed on intensities normalized to the joint frame range).
    pub min_eigen: f64,
    /// Warp-and-refine iterations of the least-squares solve.
    pub iterations: usize,
    /// Magnitude cap in cells/hour.
    pub magnitude_cap: f32,
    pub boundary: Boundary,
    /// Fill gated pixels with the eigenvalue-weighted mean of valid flows
    /// before extrapolating.
    pub fill_gated: bool,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            window_radius: 3,
            min_eigen: 1e-4,
            iterations: 5,
            magnitude_cap: 5.0,
            boundary: Boundary::Periodic,
            fill_gated: true,
        }
    }
}

fn wrap(i: isize, n: usize, boundary: Boundary) -> usize {
    match boundary {
        Boundary::Periodic => i.rem_euclid(n as isize) as usize,
        Boundary::Clamped => i.clamp(0, n as isize - 1) as usize,
    }
}

/// Per-pixel Lucas-Kanade: least-squares solution of the local
/// brightness-constancy system; pixels whose structure tensor is
/// near-singular (smaller eigenvalue below the gate) get zero flow.
pub fn estimate_flow(
    frame_prev: &Array2<f32>,
    frame_curr: &Array2<f32>,
    opts: &FlowOptions,
) -> Result<FlowField> {
    if frame_prev.dim() != frame_curr.dim() {
        return Err(CoreError::shape(format!(
            "{:?} vs {:?}",
            frame_prev.dim(),
            frame_curr.dim()
        )));
    }
    let (h, w) = frame_prev.dim();
    // Normalize intensities so the eigenvalue gate is unit-independent.
    let lo = frame_prev
        .iter()
        .chain(frame_curr.iter())
        .copied()
        .fold(f32::INFINITY, f32::min);
    let hi = frame_prev
        .iter()
        .chain(frame_curr.iter())
        .copied()
        .fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    if span <= 0.0 {
        // Featureless pair: every pixel is gated.
        return Ok(FlowField { u: Array2::zeros((h, w)), v: Array2::zeros((h, w)) });
    }
    let norm = |x: &Array2<f32>| x.mapv(|v| (v - lo) / span);
    let prev_n = norm(frame_prev);
    let curr_n = norm(frame_curr);

    let mut u = Array2::<f32>::zeros((h, w));
    let mut v = Array2::<f32>::zeros((h, w));
    let r = opts.window_radius as isize;
    let n_window = ((2 * r + 1) * (2 * r + 1)) as f64;

    for iter in 0..opts.iterations.max(1) {
        // Warp the earlier frame forward by the current flow estimate and
        // solve for the residual displacement.
        let warped = if iter == 0 {
            prev_n.clone()
        } else {
            advect(&prev_n, &u, &v, 1.0, opts.boundary)
        };
        // Spatial gradients averaged between the frames, temporal residual.
        let mut gx = Array2::<f32>::zeros((h, w));
        let mut gy = Array2::<f32>::zeros((h, w));
        let mut gt = Array2::<f32>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let ii = i as isize;
                let jj = j as isize;
                let (im, ip) = (wrap(ii - 1, h, opts.boundary), wrap(ii + 1, h, opts.boundary));
                let (jm, jp) = (wrap(jj - 1, w, opts.boundary), wrap(jj + 1, w, opts.boundary));
                let avg = |a: &Array2<f32>, b: &Array2<f32>, x: usize, y: usize| {
                    0.5 * (a[[x, y]] + b[[x, y]])
                };
                gx[[i, j]] = 0.5 * (avg(&warped, &curr_n, i, jp) - avg(&warped, &curr_n, i, jm));
                gy[[i, j]] = 0.5 * (avg(&warped, &curr_n, ip, j) - avg(&warped, &curr_n, im, j));
                gt[[i, j]] = curr_n[[i, j]] - warped[[i, j]];
            }
        }
        let mut du = Array2::<f32>::zeros((h, w));
        let mut dv = Array2::<f32>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let (mut sxx, mut sxy, mut syy, mut sxt, mut syt) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
                for di in -r..=r {
                    for dj in -r..=r {
                        let pi = wrap(i as isize + di, h, opts.boundary);
                        let pj = wrap(j as isize + dj, w, opts.boundary);
                        let x = gx[[pi, pj]] as f64;
                        let y = gy[[pi, pj]] as f64;
                        let t = gt[[pi, pj]] as f64;
                        sxx += x * x;
                        sxy += x * y;
                        syy += y * y;
                        sxt += x * t;
                        syt += y * t;
                    }
                }
                let (axx, axy, ayy) = (sxx / n_window, sxy / n_window, syy / n_window);
                let tr = axx + ayy;
                let det_part = ((axx - ayy).powi(2) + 4.0 * axy * axy).sqrt();
                let lambda_min = 0.5 * (tr - det_part);
                if lambda_min < opts.min_eigen {
                    continue;
                }
                let det = sxx * syy - sxy * sxy;
                if det.abs() < 1e-18 {
                    continue;
                }
                // G [u v]^T = -b
                du[[i, j]] = ((-sxt * syy + syt * sxy) / det) as f32;
                dv[[i, j]] = ((-syt * sxx + sxt * sxy) / det) as f32;
            }
        }
        let mut moved = 0.0f32;
        for i in 0..h {
            for j in 0..w {
                u[[i, j]] = (u[[i, j]] + du[[i, j]]).clamp(-opts.magnitude_cap, opts.magnitude_cap);
                v[[i, j]] = (v[[i, j]] + dv[[i, j]]).clamp(-opts.magnitude_cap, opts.magnitude_cap);
                moved = moved.max(du[[i, j]].abs().max(dv[[i, j]].abs()));
            }
        }
        if moved < 1e-3 {
            break;
        }
    }
    Ok(FlowField { u, v })
}

/// Replace gated (exactly zero) flow with the mean of non-zero estimates so
/// advection does not tear fields at feature boundaries. No-op when every
/// pixel is gated.
fn fill_gated_flow(flow: &mut FlowField) {
    let mut su = 0.0f64;
    let mut sv = 0.0f64;
    let mut n = 0usize;
    for (uv, vv) in flow.u.iter().zip(flow.v.iter()) {
        if *uv != 0.0 || *vv != 0.0 {
            su += *uv as f64;
            sv += *vv as f64;
            n += 1;
        }
    }
    if n == 0 {
        return;
    }
    let (mu, mv) = ((su / n as f64) as f32, (sv / n as f64) as f32);
    for (uv, vv) in flow.u.iter_mut().zip(flow.v.iter_mut()) {
        if *uv == 0.0 && *vv == 0.0 {
            *uv = mu;
            *vv = mv;
        }
    }
}

/// Every lead frame equals the last observed frame.
pub fn persistence_forecast(last_frame: &Array2<f32>, horizon: usize) -> Result<Vec<Array2<f32>>> {
    if horizon == 0 {
        return Err(CoreError::config("horizon must be >= 1"));
    }
    Ok((0..horizon).map(|_| last_frame.clone()).collect())
}

/// Estimate flow from the last two frames, hold it constant, and advect
/// semi-Lagrangian per lead hour.
pub fn flow_extrapolate(
    frames: &[Array2<f32>],
    horizon: usize,
    opts: &FlowOptions,
) -> Result<Vec<Array2<f32>>> {
    if frames.len() < 2 {
        return Err(CoreError::config("flow extrapolation needs at least 2 frames"));
    }
    if horizon == 0 {
        return Err(CoreError::config("horizon must be >= 1"));
    }
    let prev = &frames[frames.len() - 2];
    let curr = &frames[frames.len() - 1];
    let mut flow = estimate_flow(prev, curr, opts)?;
    if opts.fill_gated {
        fill_gated_flow(&mut flow);
    }
    let zero_flow = flow.u.iter().all(|v| *v == 0.0) && flow.v.iter().all(|v| *v == 0.0);
    let mut out = Vec::with_capacity(horizon);
    let mut state = curr.clone();
    for _ in 0..horizon {
        if !zero_flow {
            state = advect(&state, &flow.u, &flow.v, 1.0, opts.boundary);
        }
        out.push(state.clone());
    }
    Ok(out)
}

fn archive_from(
    windows: &[SequenceSample],
    t_in: usize,
    horizon: usize,
    name: &str,
    frames_for: impl Fn(&SequenceSample) -> Result<Vec<Array2<f32>>>,
) -> Result<ForecastArchive> {
    let first = windows.first().ok_or_else(|| CoreError::config("no windows"))?;
    let (_, _, h, w) = first.shape();
    let mut fields = Array4::<f32>::zeros((windows.len(), horizon, h, w));
    for (bi, sample) in windows.iter().enumerate() {
        let frames = frames_for(sample)?;
        for (lead, f) in frames.iter().enumerate() {
            fields.slice_mut(s![bi, lead, .., ..]).assign(f);
        }
    }
    Ok(ForecastArchive {
        grid: first.grid,
        init_hours: windows.iter().map(|s| s.start_hour + t_in as i64 - 1).collect(),
        fields,
        provenance: vec![name.to_string(); horizon],
        variant: name.to_string(),
        policy: "baseline".to_string(),
        checkpoint_hashes: Vec::new(),
        seed: 0,
    })
}

/// Persistence archive over test windows (kelvin fields).
pub fn persistence_archive(
    windows: &[SequenceSample],
    t_in: usize,
    horizon: usize,
) -> Result<ForecastArchive> {
    archive_from(windows, t_in, horizon, "persistence", |sample| {
        let last = sample.values.slice(s![t_in - 1, SAT_CHANNEL, .., ..]).to_owned();
        persistence_forecast(&last, horizon)
    })
}

/// Optical-flow extrapolation archive over test windows (kelvin fields).
pub fn flow_archive(
    windows: &[SequenceSample],
    t_in: usize,
    horizon: usize,
    opts: &FlowOptions,
) -> Result<ForecastArchive> {
    archive_from(windows, t_in, horizon, "optical-flow", |sample| {
        let frames: Vec<Array2<f32>> = (0..t_in)
            .map(|f| sample.values.slice(s![f, SAT_CHANNEL, .., ..]).to_owned())
            .collect();
        flow_extrapolate(&frames, horizon, opts)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth periodic blob centered at (ci, cj).
    fn blob(h: usize, w: usize, ci: f32, cj: f32, sigma: f32, amp: f32) -> Array2<f32> {
        Array2::from_shape_fn((h, w), |(i, j)| {
            // Periodic squared distance.
            let di = {
                let d = (i as f32 - ci).abs();
                d.min(h as f32 - d)
            };
            let dj = {
                let d = (j as f32 - cj).abs();
                d.min(w as f32 - d)
            };
            amp * (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
        })
    }

    fn bt_scene(cloud: &Array2<f32>) -> Array2<f32> {
        cloud.mapv(|c| 300.0 - 110.0 * c.clamp(0.0, 1.0))
    }

    #[test]
    fn persistence_repeats_frames() {
        let f = blob(8, 8, 4.0, 4.0, 2.0, 1.0);
        let out = persistence_forecast(&f, 24).unwrap();
        assert_eq!(out.len(), 24);
        for lead in &out {
            assert_eq!(lead, &f);
        }
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let f = bt_scene(&blob(16, 16, 8.0, 8.0, 3.0, 0.8));
        let flow = estimate_flow(&f, &f, &FlowOptions::default()).unwrap();
        assert!(flow.u.iter().all(|v| *v == 0.0));
        assert!(flow.v.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_images_are_fully_gated() {
        let f = Array2::from_elem((12, 12), 250.0f32);
        let flow = estimate_flow(&f, &f.clone(), &FlowOptions::default()).unwrap();
        assert!(flow.u.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_cell_translation_recovers_unit_flow() {
        let h = 24;
        let w = 32;
        let a = bt_scene(&blob(h, w, 12.0, 14.0, 4.0, 0.9));
        // Shift by exactly one cell in +lon.
        let b = Array2::from_shape_fn((h, w), |(i, j)| a[[i, (j + w - 1) % w]]);
        let flow = estimate_flow(&a, &b, &FlowOptions::default()).unwrap();
        // Average over the blob support (where flow was not gated).
        let mut sum = 0.0;
        let mut n = 0;
        for (uv, vv) in flow.u.iter().zip(flow.v.iter()) {
            if *uv != 0.0 || *vv != 0.0 {
                sum += *uv as f64;
                n += 1;
            }
        }
        assert!(n > 20, "too few valid flow pixels: {n}");
        let mean_u = sum / n as f64;
        assert!((mean_u - 1.0).abs() <= 0.2, "mean u = {mean_u}");
    }

    #[test]
    fn translation_consistency_of_flow() {
        let h = 16;
        let w = 20;
        let a = bt_scene(&blob(h, w, 8.0, 9.0, 3.0, 0.8));
        let b = Array2::from_shape_fn((h, w), |(i, j)| a[[i, (j + w - 1) % w]]);
        let flow = estimate_flow(&a, &b, &FlowOptions::default()).unwrap();
        // Shift both inputs by (2, 3); flow must shift identically.
        let shift =
            |x: &Array2<f32>| Array2::from_shape_fn((h, w), |(i, j)| x[[(i + h - 2) % h, (j + w - 3) % w]]);
        let flow_s = estimate_flow(&shift(&a), &shift(&b), &FlowOptions::default()).unwrap();
        let expect_u = shift(&flow.u);
        let expect_v = shift(&flow.v);
        for (x, y) in flow_s.u.iter().zip(expect_u.iter()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
        for (x, y) in flow_s.v.iter().zip(expect_v.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_flow_extrapolation_is_persistence() {
        let f = Array2::from_elem((10, 10), 260.0f32);
        let frames = vec![f.clone(), f.clone()];
        let out = flow_extrapolate(&frames, 6, &FlowOptions::default()).unwrap();
        for lead in &out {
            assert_eq!(lead, &f, "zero flow must reduce to persistence bit-exactly");
        }
    }

    #[test]
    fn uniform_translation_extrapolates_within_2k() {
        let h = 24;
        let w = 32;
        let cloud0 = blob(h, w, 12.0, 10.0, 4.0, 0.9);
        let frame = |t: usize| {
            bt_scene(&Array2::from_shape_fn((h, w), |(i, j)| cloud0[[i, (j + w - (t % w)) % w]]))
        };
        let frames = vec![frame(0), frame(1)];
        let horizon = 4;
        let out = flow_extrapolate(&frames, horizon, &FlowOptions::default()).unwrap();
        for (lead, pred) in out.iter().enumerate() {
            let truth = frame(2 + lead);
            let max_err = pred
                .iter()
                .zip(truth.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_err <= 2.0, "lead {}: max abs err {max_err} K", lead + 1);
        }
    }

    #[test]
    fn growth_underestimated_by_flow() {
        // Stationary blob whose amplitude grows each hour: advection cannot
        // represent the intensity change, and the outward apparent motion
        // distorts the shape, so the flow forecast ends up worse than
        // persisting the last observation.
        let h = 24;
        let w = 24;
        let amp = |t: usize| 0.35 * 1.3f32.powi(t as i32);
        let frame = |t: usize| bt_scene(&blob(h, w, 12.0, 12.0, 4.0, amp(t)));
        let frames = vec![frame(0), frame(1)];
        let horizon = 6;
        let flow_frames = flow_extrapolate(&frames, horizon, &FlowOptions::default()).unwrap();
        let truth = frame(1 + horizon);
        let rmse = |a: &Array2<f32>, b: &Array2<f32>| {
            (a.iter().zip(b.iter()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>()
                / a.len() as f64)
                .sqrt()
        };
        let flow_rmse = rmse(&flow_frames[horizon - 1], &truth);
        let persist_rmse = rmse(&frames[1], &truth);
        assert!(
            flow_rmse > persist_rmse,
            "flow {flow_rmse} should exceed persistence {persist_rmse} on a growth scene"
        );
    }

    #[test]
    fn persistence_error_grows_on_translating_scene() {
        let h = 16;
        let w = 24;
        let cloud0 = blob(h, w, 8.0, 6.0, 3.0, 0.9);
        let frame = |t: usize| {
            bt_scene(&Array2::from_shape_fn((h, w), |(i, j)| cloud0[[i, (j + w - (t % w)) % w]]))
        };
        let last = frame(0);
        let rmse = |a: &Array2<f32>, b: &Array2<f32>| {
            (a.iter().zip(b.iter()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>()
                / a.len() as f64)
                .sqrt()
        };
        let mut prev = 0.0;
        for lead in 1..=8 {
            let e = rmse(&last, &frame(lead));
            assert!(e > prev, "lead {lead}: rmse {e} should exceed {prev}");
            prev = e;
        }
    }
}
