//! Latitude-weighted verification metrics and multi-scale structural
//! similarity, aggregated per lead time with across-init-time spread.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::GridSpec;

/// Per-row latitude weights, `a[i] = cos(lat_i) / mean_j(cos(lat_j))`.
///
/// The weights always average to 1 over the grid rows.
#[derive(Debug, Clone)]
pub struct LatWeights {
    pub a: Array1<f64>,
}

/// Weights for the rows of `grid`.
pub fn lat_weights(grid: &GridSpec) -> LatWeights {
    let h = grid.n_lat;
    let cos: Vec<f64> = (0..h).map(|i| grid.lat(i).to_radians().cos()).collect();
    let mean = cos.iter().sum::<f64>() / h as f64;
    LatWeights { a: Array1::from_iter(cos.into_iter().map(|c| c / mean)) }
}

fn check_same_shape(pred: &ArrayView2<f64>, truth: &ArrayView2<f64>, w: &LatWeights) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(CoreError::shape(format!(
            "pred {:?} vs truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    if pred.dim().0 != w.a.len() {
        return Err(CoreError::shape(format!(
            "field has {} rows but weights have {}",
            pred.dim().0,
            w.a.len()
        )));
    }
    Ok(())
}

/// Latitude-weighted root-mean-square error over one (H, W) field pair.
pub fn rmse_w(pred: &ArrayView2<f64>, truth: &ArrayView2<f64>, w: &LatWeights) -> Result<f64> {
    check_same_shape(pred, truth, w)?;
    let (h, wd) = pred.dim();
    let mut acc = 0.0;
    for i in 0..h {
        let ai = w.a[i];
        for j in 0..wd {
            let d = pred[[i, j]] - truth[[i, j]];
            acc += ai * d * d;
        }
    }
    Ok((acc / (h * wd) as f64).sqrt())
}

/// Latitude-weighted spatial anomaly correlation.
///
/// Weighted spatial means are removed from both fields; the result is the
/// weighted covariance divided by the product of weighted standard
/// deviations. Returns NaN when either field has zero weighted variance;
/// callers exclude such values from aggregation.
pub fn corr_w(pred: &ArrayView2<f64>, truth: &ArrayView2<f64>, w: &LatWeights) -> Result<f64> {
    check_same_shape(pred, truth, w)?;
    let (h, wd) = pred.dim();
    let n = (h * wd) as f64;
    let (mut mp, mut mt) = (0.0, 0.0);
    for i in 0..h {
        let ai = w.a[i];
        for j in 0..wd {
            mp += ai * pred[[i, j]];
            mt += ai * truth[[i, j]];
        }
    }
    mp /= n;
    mt /= n;
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for i in 0..h {
        let ai = w.a[i];
        for j in 0..wd {
            let dp = pred[[i, j]] - mp;
            let dt = truth[[i, j]] - mt;
            cov += ai * dp * dt;
            vp += ai * dp * dp;
            vt += ai * dt * dt;
        }
    }
    if vp <= 0.0 || vt <= 0.0 {
        return Ok(f64::NAN);
    }
    Ok(cov / (vp.sqrt() * vt.sqrt()))
}

/// Event convention for the critical success index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventSide {
    /// Event where the field is at or below the threshold (cold cloud tops).
    BelowThreshold,
    /// Event where the field is at or above the threshold.
    AboveThreshold,
}

/// Latitude-weighted critical success index, TP / (TP + FN + FP).
///
/// Convective cloud is cold in brightness temperature, so the default event
/// is `value <= threshold`. When neither field contains any event the score
/// is defined as 1 (vacuously perfect) so all-clear scenes do not poison
/// averages.
pub fn csi_w(
    pred: &ArrayView2<f64>,
    truth: &ArrayView2<f64>,
    w: &LatWeights,
    threshold: f64,
    side: EventSide,
) -> Result<f64> {
    check_same_shape(pred, truth, w)?;
    let event = |v: f64| match side {
        EventSide::BelowThreshold => v <= threshold,
        EventSide::AboveThreshold => v >= threshold,
    };
    let (h, wd) = pred.dim();
    let (mut tp, mut fp, mut fne) = (0.0, 0.0, 0.0);
    for i in 0..h {
        let ai = w.a[i];
        for j in 0..wd {
            match (event(pred[[i, j]]), event(truth[[i, j]])) {
                (true, true) => tp += ai,
                (true, false) => fp += ai,
                (false, true) => fne += ai,
                (false, false) => {}
            }
        }
    }
    let denom = tp + fp + fne;
    if denom == 0.0 {
        log::debug!("csi_w: no events in either field, returning vacuous 1.0");
        return Ok(1.0);
    }
    Ok(tp / denom)
}

/// Fixed display range for structural similarity on brightness temperature.
pub const BT_RANGE: (f64, f64) = (190.0, 300.0);

/// Standard five-scale exponent weights; truncated and renormalized when
/// fewer scales are requested.
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Array2<f64> {
    let n = SSIM_WINDOW;
    let c = (n / 2) as f64;
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            w[[i, j]] = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let s = w.sum();
    w.mapv_inplace(|v| v / s);
    w
}

/// Valid (no padding) windowed means under the Gaussian kernel.
fn filter_valid(img: &ArrayView2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = kernel.dim().0;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = Array2::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for a in 0..k {
                for b in 0..k {
                    acc += kernel[[a, b]] * img[[i + a, j + b]];
                }
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// 2x2 average-pool downsampling (truncating odd trailing rows/columns).
fn downsample2(img: &ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array2::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[[i, j]] = 0.25
                * (img[[2 * i, 2 * j]]
                    + img[[2 * i + 1, 2 * j]]
                    + img[[2 * i, 2 * j + 1]]
                    + img[[2 * i + 1, 2 * j + 1]]);
        }
    }
    out
}

/// Per-scale luminance, contrast and structure comparisons.
///
/// Exposed for the scale-recursion consistency test.
pub fn ssim_components(pred: &ArrayView2<f64>, truth: &ArrayView2<f64>) -> Result<(f64, f64, f64)> {
    let (h, w) = pred.dim();
    if pred.dim() != truth.dim() {
        return Err(CoreError::shape(format!("pred {:?} vs truth {:?}", pred.dim(), truth.dim())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::config(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let range = BT_RANGE.1 - BT_RANGE.0;
    let x = pred.mapv(|v| (v - BT_RANGE.0) / range);
    let y = truth.mapv(|v| (v - BT_RANGE.0) / range);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let c3 = c2 / 2.0;

    let kernel = gaussian_window();
    let mu_x = filter_valid(&x.view(), &kernel);
    let mu_y = filter_valid(&y.view(), &kernel);
    let xx = filter_valid(&(&x * &x).view(), &kernel);
    let yy = filter_valid(&(&y * &y).view(), &kernel);
    let xy = filter_valid(&(&x * &y).view(), &kernel);

    let n = mu_x.len() as f64;
    let (mut lum, mut con, mut stru) = (0.0, 0.0, 0.0);
    for ((&mx, &my), ((&sxx, &syy), &sxy)) in
        mu_x.iter().zip(mu_y.iter()).zip(xx.iter().zip(yy.iter()).zip(xy.iter()))
    {
        let vx = (sxx - mx * mx).max(0.0);
        let vy = (syy - my * my).max(0.0);
        let cxy = sxy - mx * my;
        let (sx, sy) = (vx.sqrt(), vy.sqrt());
        lum += (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        con += (2.0 * sx * sy + c2) / (vx + vy + c2);
        stru += (cxy + c3) / (sx * sy + c3);
    }
    Ok((lum / n, con / n, stru / n))
}

/// Largest number of scales the image shape supports under the 11x11 window.
pub fn max_feasible_scales(h: usize, w: usize) -> usize {
    let mut scales = 0;
    let (mut h, mut w) = (h, w);
    while h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        scales += 1;
        h /= 2;
        w /= 2;
    }
    scales
}

/// Multi-scale structural similarity over brightness-temperature fields.
///
/// Product over scales of contrast and structure terms, with the luminance
/// term applied at the coarsest scale only. Inputs are mapped to the fixed
/// [190, 300] K display range; no latitude weighting.
pub fn msssim(pred: &ArrayView2<f64>, truth: &ArrayView2<f64>, n_scales: usize) -> Result<f64> {
    if n_scales == 0 || n_scales > MSSSIM_WEIGHTS.len() {
        return Err(CoreError::config(format!(
            "n_scales must be in 1..={}, got {n_scales}",
            MSSSIM_WEIGHTS.len()
        )));
    }
    let (h, w) = pred.dim();
    let feasible = max_feasible_scales(h, w);
    if n_scales > feasible {
        return Err(CoreError::config(format!(
            "image {h}x{w} supports at most {feasible} scales, requested {n_scales}"
        )));
    }
    let wsum: f64 = MSSSIM_WEIGHTS[..n_scales].iter().sum();
    let weights: Vec<f64> = MSSSIM_WEIGHTS[..n_scales].iter().map(|v| v / wsum).collect();

    let mut p = pred.to_owned();
    let mut t = truth.to_owned();
    let mut score = 1.0f64;
    for (scale, &wj) in weights.iter().enumerate() {
        let (lum, con, stru) = ssim_components(&p.view(), &t.view())?;
        // Clamp tiny negative structure values before the fractional power.
        let con = con.max(0.0);
        let stru = stru.max(0.0);
        score *= con.powf(wj) * stru.powf(wj);
        if scale + 1 == weights.len() {
            score *= lum.max(0.0).powf(wj);
        } else {
            p = downsample2(&p.view());
            t = downsample2(&t.view());
        }
    }
    Ok(score)
}

/// Per-lead verification scores with across-init-time spread.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Lead times, 1-based, contiguous.
    pub leads: Vec<usize>,
    pub rmse: Vec<MeanStd>,
    pub corr: Vec<MeanStd>,
    pub csi: Vec<MeanStd>,
    pub msssim: Vec<MeanStd>,
    /// CSI threshold in kelvin.
    pub csi_threshold: f64,
    /// Scales actually used for the structural-similarity column.
    pub msssim_scales: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    /// Number of init times that produced a defined value.
    pub n: usize,
}

/// Mean and population standard deviation over defined (non-NaN) values.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let defined: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let n = defined.len();
    if n == 0 {
        return MeanStd { mean: f64::NAN, std: f64::NAN, n: 0 };
    }
    let mean = defined.iter().sum::<f64>() / n as f64;
    let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    MeanStd { mean, std: var.sqrt(), n }
}

impl MetricReport {
    /// Mean of per-lead mean RMSE over an inclusive 1-based lead range.
    pub fn mean_rmse_over(&self, lead_lo: usize, lead_hi: usize) -> f64 {
        let vals: Vec<f64> = self
            .leads
            .iter()
            .zip(self.rmse.iter())
            .filter(|(l, _)| **l >= lead_lo && **l <= lead_hi)
            .map(|(_, m)| m.mean)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// Delimited text table: `lead,metric,mean,std,n`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lead,metric,mean,std,n\n");
        for (k, &lead) in self.leads.iter().enumerate() {
            for (name, col) in [
                ("rmse", &self.rmse),
                ("corr", &self.corr),
                ("csi", &self.csi),
                ("msssim", &self.msssim),
            ] {
                let m = col[k];
                out.push_str(&format!("{lead},{name},{},{},{}\n", m.mean, m.std, m.n));
            }
        }
        out
    }
}

/// Evaluate predicted lead fields against truth, per lead time.
///
/// `pred` and `truth` are indexed `[init_time][lead]` as (H, W) kelvin
/// fields. Entries must agree in count and shape. The structural-similarity
/// scale count is clamped to what the grid supports (logged when reduced).
pub fn evaluate_fields(
    pred: &[Vec<Array2<f64>>],
    truth: &[Vec<Array2<f64>>],
    grid: &GridSpec,
    csi_threshold: f64,
    n_scales: usize,
) -> Result<MetricReport> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(CoreError::shape(format!(
            "pred has {} init times, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    let horizon = pred[0].len();
    for (p, t) in pred.iter().zip(truth.iter()) {
        if p.len() != horizon || t.len() != horizon {
            return Err(CoreError::shape("lead/time misalignment between archive and truth"));
        }
    }
    let w = lat_weights(grid);
    let feasible = max_feasible_scales(grid.n_lat, grid.n_lon).max(1).min(MSSSIM_WEIGHTS.len());
    let scales = n_scales.min(feasible);
    if scales < n_scales {
        log::info!("msssim scales reduced from {n_scales} to {scales} for grid {}x{}", grid.n_lat, grid.n_lon);
    }

    let mut report = MetricReport {
        leads: (1..=horizon).collect(),
        rmse: Vec::with_capacity(horizon),
        corr: Vec::with_capacity(horizon),
        csi: Vec::with_capacity(horizon),
        msssim: Vec::with_capacity(horizon),
        csi_threshold,
        msssim_scales: scales,
    };
    for lead in 0..horizon {
        let mut rmses = Vec::new();
        let mut corrs = Vec::new();
        let mut csis = Vec::new();
        let mut sims = Vec::new();
        for (p, t) in pred.iter().zip(truth.iter()) {
            let (pf, tf) = (&p[lead].view(), &t[lead].view());
            rmses.push(rmse_w(pf, tf, &w)?);
            corrs.push(corr_w(pf, tf, &w)?);
            csis.push(csi_w(pf, tf, &w, csi_threshold, EventSide::BelowThreshold)?);
            sims.push(msssim(pf, tf, scales)?);
        }
        report.rmse.push(mean_std(&rmses));
        report.corr.push(mean_std(&corrs));
        report.csi.push(mean_std(&csis));
        report.msssim.push(mean_std(&sims));
    }
    Ok(report)
}
