//! Image-quality and depth-error metrics, the 1-D earth mover's distance and
//! the evaluation driver that produces CSV/JSON reports.
//!
//! Images are channel-major planes (`C x S x S`); masks are `S x S` with `1`
//! for known and `0` for hole pixels.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{rect_masks, sample_mask, Dataset};
use crate::error::{Error, Result};
use crate::models::{composite, GeneratorModel, MaskRect};
use crate::tensor::{no_grad, Tensor};

pub const PSNR_CAP: f64 = 99.0;
pub const DEPTH_EPS: f64 = 1e-3;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// RNG stream for evaluation masks.
pub const EVAL_STREAM: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Full,
    HoleOnly,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Full => "full",
            Region::HoleOnly => "hole_only",
        })
    }
}

fn check_lengths(op: &'static str, pred: &[f64], gt: &[f64], plane: usize, mask: Option<&[f64]>) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape(op, &[pred.len()], &[gt.len()]));
    }
    if plane == 0 || pred.len() % plane != 0 {
        return Err(Error::invalid(format!("{op}: {} values do not split into planes of {plane}", pred.len())));
    }
    if let Some(m) = mask {
        if m.len() != plane {
            return Err(Error::shape(op, &[m.len()], &[plane]));
        }
    }
    Ok(())
}

/// Indices of selected values: all of them, or those whose pixel is a hole.
fn selected(len: usize, plane: usize, mask: Option<&[f64]>) -> impl Iterator<Item = usize> + '_ {
    (0..len).filter(move |i| mask.is_none_or(|m| m[i % plane] == 0.0))
}

/// Mean absolute error. `plane` is `S * S`; with a mask only hole pixels
/// (of every channel) count.
pub fn l1_metric(pred: &[f64], gt: &[f64], plane: usize, mask: Option<&[f64]>) -> Result<f64> {
    check_lengths("l1_metric", pred, gt, plane, mask)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in selected(pred.len(), plane, mask) {
        sum += (pred[i] - gt[i]).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyRegion("l1 over an empty selection".into()));
    }
    Ok(sum / n as f64)
}

pub fn mse(pred: &[f64], gt: &[f64], plane: usize, mask: Option<&[f64]>) -> Result<f64> {
    check_lengths("mse", pred, gt, plane, mask)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in selected(pred.len(), plane, mask) {
        let d = pred[i] - gt[i];
        sum += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyRegion("mse over an empty selection".into()));
    }
    Ok(sum / n as f64)
}

/// `10 log10(max_val^2 / mse)`, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(Error::invalid(format!("psnr max_val must be positive, got {max_val}")));
    }
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP))
}

pub fn psnr(pred: &[f64], gt: &[f64], plane: usize, max_val: f64, mask: Option<&[f64]>) -> Result<f64> {
    psnr_from_mse(mse(pred, gt, plane, mask)?, max_val)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-mode separable filtering of one `size x size` plane.
fn filter_valid(x: &[f64], size: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let out = size + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; size * out];
    for y in 0..size {
        for ox in 0..out {
            let src = &x[y * size + ox..y * size + ox + SSIM_WINDOW];
            rows[y * out + ox] = src.iter().zip(w).map(|(a, b)| a * b).sum();
        }
    }
    let mut res = vec![0.0; out * out];
    for oy in 0..out {
        for ox in 0..out {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += rows[(oy + k) * out + ox] * wk;
            }
            res[oy * out + ox] = acc;
        }
    }
    res
}

/// Local SSIM values of one plane pair, one per valid window position.
pub fn ssim_map(a: &[f64], b: &[f64], size: usize) -> Result<Vec<f64>> {
    if size < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {size}")));
    }
    if a.len() != size * size || b.len() != size * size {
        return Err(Error::shape("ssim_map", &[a.len(), b.len()], &[size * size]));
    }
    let w = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, size, &w);
    let mu_b = filter_valid(b, size, &w);
    let e_aa = filter_valid(&prod(a, a), size, &w);
    let e_bb = filter_valid(&prod(b, b), size, &w);
    let e_ab = filter_valid(&prod(a, b), size, &w);
    Ok((0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .collect())
}

/// Mean SSIM per channel, averaged over channels. With a mask only windows
/// that contain at least one hole pixel are averaged.
pub fn ssim(pred: &[f64], gt: &[f64], size: usize, mask: Option<&[f64]>) -> Result<f64> {
    let plane = size * size;
    check_lengths("ssim", pred, gt, plane, mask)?;
    let keep = match mask {
        Some(m) => Some(windows_touching_holes(m, size)?),
        None => None,
    };
    let channels = pred.len() / plane;
    let mut total = 0.0;
    for c in 0..channels {
        let map = ssim_map(&pred[c * plane..(c + 1) * plane], &gt[c * plane..(c + 1) * plane], size)?;
        let (sum, n) = match &keep {
            Some(k) => map.iter().zip(k).filter(|(_, k)| **k).fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1)),
            None => (map.iter().sum(), map.len()),
        };
        if n == 0 {
            return Err(Error::EmptyRegion("ssim over a mask without holes".into()));
        }
        total += sum / n as f64;
    }
    Ok(total / channels as f64)
}

fn windows_touching_holes(mask: &[f64], size: usize) -> Result<Vec<bool>> {
    if size < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {size}")));
    }
    // summed-area table of hole indicators
    let mut sat = vec![0usize; (size + 1) * (size + 1)];
    for y in 0..size {
        for x in 0..size {
            let hole = usize::from(mask[y * size + x] == 0.0);
            sat[(y + 1) * (size + 1) + x + 1] = hole + sat[y * (size + 1) + x + 1] + sat[(y + 1) * (size + 1) + x] - sat[y * (size + 1) + x];
        }
    }
    let out = size + 1 - SSIM_WINDOW;
    let at = |y: usize, x: usize| sat[y * (size + 1) + x];
    Ok((0..out * out)
        .map(|i| {
            let (y, x) = (i / out, i % out);
            let (y1, x1) = (y + SSIM_WINDOW, x + SSIM_WINDOW);
            at(y1, x1) + at(y, x) > at(y, x1) + at(y1, x)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthErrors {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
}

/// Monocular-depth error battery over pixels with `gt > eps` (and, with a
/// mask, inside the hole). Predictions are clamped to `eps` for the log.
pub fn depth_metrics(pred: &[f64], gt: &[f64], eps: f64, mask: Option<&[f64]>) -> Result<DepthErrors> {
    check_lengths("depth_metrics", pred, gt, gt.len().max(1), mask)?;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for i in selected(gt.len(), gt.len(), mask) {
        let (p, g) = (pred[i], gt[i]);
        if g <= eps {
            continue;
        }
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        sq += d * d;
        let dl = p.max(eps).ln() - g.ln();
        sq_log += dl * dl;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyRegion("no valid depth pixels".into()));
    }
    let n = n as f64;
    Ok(DepthErrors {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: (sq_log / n).sqrt(),
    })
}

/// Exact Wasserstein-1 distance between two equal-size empirical
/// distributions on the real line.
pub fn emd_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!("emd_1d needs equal non-empty sets, got {} and {}", a.len(), b.len())));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

// ---------------------------------------------------------------------------
// evaluation

/// The eight per-image metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub rgb_l1: f64,
    pub rgb_psnr: f64,
    pub rgb_ssim: f64,
    pub depth_l1: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
}

pub const METRIC_NAMES: [&str; 8] = ["rgb_l1", "rgb_psnr", "rgb_ssim", "depth_l1", "abs_rel", "sq_rel", "rmse", "rmse_log"];

impl SampleMetrics {
    pub fn values(&self) -> [f64; 8] {
        [
            self.rgb_l1,
            self.rgb_psnr,
            self.rgb_ssim,
            self.depth_l1,
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
        ]
    }

    fn from_values(id: &str, v: [f64; 8]) -> Self {
        SampleMetrics {
            id: id.to_string(),
            rgb_l1: v[0],
            rgb_psnr: v[1],
            rgb_ssim: v[2],
            depth_l1: v[3],
            abs_rel: v[4],
            sq_rel: v[5],
            rmse: v[6],
            rmse_log: v[7],
        }
    }

    /// All metrics for one image. RGB planes are in `[0, 1]`, depth in raw
    /// units; `mask` restricts to the hole.
    pub fn compute(id: &str, pred_rgb: &[f64], gt_rgb: &[f64], pred_depth: &[f64], gt_depth: &[f64], size: usize, mask: Option<&[f64]>) -> Result<Self> {
        let plane = size * size;
        let d = depth_metrics(pred_depth, gt_depth, DEPTH_EPS, mask)?;
        Ok(SampleMetrics {
            id: id.to_string(),
            rgb_l1: l1_metric(pred_rgb, gt_rgb, plane, mask)?,
            rgb_psnr: psnr(pred_rgb, gt_rgb, plane, 1.0, mask)?,
            rgb_ssim: ssim(pred_rgb, gt_rgb, size, mask)?,
            depth_l1: l1_metric(pred_depth, gt_depth, plane, mask)?,
            abs_rel: d.abs_rel,
            sq_rel: d.sq_rel,
            rmse: d.rmse,
            rmse_log: d.rmse_log,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub region: Region,
    pub samples: Vec<SampleMetrics>,
    pub mean: SampleMetrics,
}

impl RegionReport {
    pub fn new(region: Region, samples: Vec<SampleMetrics>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Dataset("no samples to report".into()));
        }
        let mut acc = [0.0; 8];
        for s in &samples {
            for (a, v) in acc.iter_mut().zip(s.values()) {
                *a += v;
            }
        }
        let n = samples.len() as f64;
        let mean = SampleMetrics::from_values("MEAN", acc.map(|v| v / n));
        Ok(RegionReport { region, samples, mean })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub full: RegionReport,
    pub hole_only: RegionReport,
}

impl MetricsReport {
    /// One row per sample and region plus a `MEAN` row per region.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(std::iter::once("region").chain(std::iter::once("id")).chain(METRIC_NAMES))
            .map_err(csv_err)?;
        for r in [&self.full, &self.hole_only] {
            for m in r.samples.iter().chain(std::iter::once(&r.mean)) {
                let mut rec = vec![r.region.to_string(), m.id.clone()];
                rec.extend(m.values().iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        csv_string(w)
    }

    /// Nested as `region -> metric -> {mean, per_sample: {id: value}}`.
    pub fn to_json(&self) -> serde_json::Value {
        let region = |r: &RegionReport| {
            let mut out = serde_json::Map::new();
            for (k, name) in METRIC_NAMES.iter().enumerate() {
                let per: serde_json::Map<String, serde_json::Value> =
                    r.samples.iter().map(|s| (s.id.clone(), serde_json::json!(s.values()[k]))).collect();
                out.insert(name.to_string(), serde_json::json!({ "mean": r.mean.values()[k], "per_sample": per }));
            }
            serde_json::Value::Object(out)
        };
        serde_json::json!({ "full": region(&self.full), "hole_only": region(&self.hole_only) })
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&self.to_json())?)?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub(crate) fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// What an inpainter sees for one image. `x_c`/`x_d` are the ground truth and
/// exist only so oracle inpainters can be expressed; models must not use them.
pub struct InpaintInput<'a> {
    pub z_c: &'a Tensor<f64>,
    pub z_d: &'a Tensor<f64>,
    pub m: &'a Tensor<f64>,
    pub rect: MaskRect,
    pub x_c: &'a Tensor<f64>,
    pub x_d: &'a Tensor<f64>,
}

/// Produces raw normalized RGB `(1, 3, S, S)` and depth `(1, 1, S, S)`
/// predictions for a masked input.
pub trait Inpainter {
    fn inpaint(&self, input: &InpaintInput<'_>) -> Result<(Tensor<f64>, Tensor<f64>)>;
}

/// Returns the ground truth; bounds every metric at its ideal value.
pub struct IdentityOracle;

impl Inpainter for IdentityOracle {
    fn inpaint(&self, input: &InpaintInput<'_>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        Ok((input.x_c.clone(), input.x_d.clone()))
    }
}

impl Inpainter for GeneratorModel<f64> {
    fn inpaint(&self, input: &InpaintInput<'_>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        self.forward(input.z_c, input.z_d, input.m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
}

/// Masks used by [`evaluate`] for a dataset of `count` images of side `size`.
pub fn evaluation_masks(seed: u64, count: usize, size: usize) -> Result<Vec<MaskRect>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    (0..count).map(|_| sample_mask(&mut rng, size)).collect()
}

/// Masks every image with a seeded rectangle, inpaints, composites, maps back
/// to RGB `[0, 1]` and raw depth, and scores full-image and hole-only regions.
pub fn evaluate(model: &dyn Inpainter, dataset: &Dataset, config: &EvalConfig) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let s = dataset.size;
    let rects = evaluation_masks(config.seed, dataset.len(), s)?;
    let mut full = Vec::with_capacity(dataset.len());
    let mut hole = Vec::with_capacity(dataset.len());
    for (i, rect) in rects.iter().enumerate() {
        let (x_c, x_d) = dataset.batch::<f64>(&[i])?;
        let m = rect_masks::<f64>(&[*rect], s)?;
        let (out_c, out_d) = no_grad(|| -> Result<_> {
            let z_c = x_c.mul(&m)?;
            let z_d = x_d.mul(&m)?;
            let input = InpaintInput { z_c: &z_c, z_d: &z_d, m: &m, rect: *rect, x_c: &x_c, x_d: &x_d };
            let (raw_c, raw_d) = model.inpaint(&input)?;
            Ok((composite(&raw_c, &z_c, &m)?, composite(&raw_d, &z_d, &m)?))
        })?;
        let to_unit = |t: &Tensor<f64>| t.data().iter().map(|v| (v + 1.0) / 2.0).collect::<Vec<_>>();
        let to_depth = |t: &Tensor<f64>| t.data().iter().map(|v| (v + 1.0) * dataset.d_max / 2.0).collect::<Vec<_>>();
        let (pc, gc) = (to_unit(&out_c), to_unit(&x_c));
        let (pd, gd) = (to_depth(&out_d), to_depth(&x_d));
        let id = &dataset.ids[i];
        full.push(SampleMetrics::compute(id, &pc, &gc, &pd, &gd, s, None)?);
        hole.push(SampleMetrics::compute(id, &pc, &gc, &pd, &gd, s, Some(m.data()))?);
    }
    Ok(MetricsReport {
        full: RegionReport::new(Region::Full, full)?,
        hole_only: RegionReport::new(Region::HoleOnly, hole)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn l1_cases() {
        let a = [0.2, 0.4, 0.6, 0.8];
        assert_eq!(l1_metric(&a, &a, 4, None).unwrap(), 0.0);
        let b = a.map(|v| v + 0.5);
        assert!((l1_metric(&b, &a, 4, None).unwrap() - 0.5).abs() < 1e-12);
        let mask = [1.0, 0.0, 1.0, 1.0];
        let mut c = a;
        c[1] = 1.4;
        assert!((l1_metric(&c, &a, 4, Some(&mask)).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(l1_metric(&a, &a, 4, Some(&[1.0; 4])), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn psnr_cases() {
        assert!((psnr_from_mse(0.01, 1.0).unwrap() - 20.0).abs() <= 1e-9);
        let a = vec![0.3; 16];
        assert_eq!(psnr(&a, &a, 16, 1.0, None).unwrap(), PSNR_CAP);
        let mut prev = f64::INFINITY;
        for k in 1..20 {
            let p = psnr_from_mse(k as f64 * 1e-3, 1.0).unwrap();
            assert!(p < prev);
            prev = p;
        }
        assert!(psnr_from_mse(0.1, 0.0).is_err());
    }

    #[test]
    fn psnr_random_pairs_match_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a: Vec<f64> = (0..64).map(|_| rng.gen()).collect();
            let b: Vec<f64> = (0..64).map(|_| rng.gen()).collect();
            let mut m = 0.0;
            for i in 0..64 {
                m += (a[i] - b[i]) * (a[i] - b[i]);
            }
            m /= 64.0;
            let expected = 10.0 * (1.0 / m).log10();
            assert!((psnr(&a, &b, 64, 1.0, None).unwrap() - expected).abs() <= 1e-9);
        }
    }

    /// Direct windowed SSIM without separable filtering.
    fn ssim_direct(a: &[f64], b: &[f64], size: usize) -> f64 {
        let mut w = [[0.0; 11]; 11];
        let mut total = 0.0;
        for i in 0..11 {
            for j in 0..11 {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                w[i][j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                total += w[i][j];
            }
        }
        let mut acc = 0.0;
        let n = size - 10;
        for y in 0..n {
            for x in 0..n {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = (y + i) * size + x + j;
                        ma += w[i][j] / total * a[k];
                        mb += w[i][j] / total * b[k];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = (y + i) * size + x + j;
                        let wk = w[i][j] / total;
                        va += wk * (a[k] - ma) * (a[k] - ma);
                        vb += wk * (b[k] - mb) * (b[k] - mb);
                        cov += wk * (a[k] - ma) * (b[k] - mb);
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        acc / (n * n) as f64
    }

    fn fixture16(seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..256).map(|i| (i % 16) as f64 / 15.0 * 0.7 + rng.gen::<f64>() * 0.3).collect();
        let b: Vec<f64> = a.iter().map(|v| (v + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)).collect();
        (a, b)
    }

    #[test]
    fn ssim_matches_direct_formula() {
        for seed in 0..3 {
            let (a, b) = fixture16(seed);
            let got = ssim(&a, &b, 16, None).unwrap();
            assert!((got - ssim_direct(&a, &b, 16)).abs() <= 1e-6, "{got}");
            assert!((-1.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_size() {
        let (a, b) = fixture16(9);
        assert_eq!(ssim(&a, &a, 16, None).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b, 16, None).unwrap(), ssim(&b, &a, 16, None).unwrap());
        assert!(ssim(&a[..100], &b[..100], 10, None).is_err());
        let three: Vec<f64> = a.iter().chain(&b).chain(&a).copied().collect();
        let three_b: Vec<f64> = b.iter().chain(&b).chain(&b).copied().collect();
        let per = (ssim(&a, &b, 16, None).unwrap() + 1.0 + ssim(&a, &b, 16, None).unwrap()) / 3.0;
        assert!((ssim(&three, &three_b, 16, None).unwrap() - per).abs() < 1e-12);
    }

    #[test]
    fn hole_only_ssim_uses_windows_over_the_hole() {
        let (a, b) = fixture16(4);
        let mut mask = vec![1.0; 256];
        mask[0] = 0.0;
        let map = ssim_map(&a, &b, 16).unwrap();
        // only window (0, 0) covers pixel (0, 0)
        assert!((ssim(&a, &b, 16, Some(&mask)).unwrap() - map[0]).abs() < 1e-15);
        let all_hole = vec![0.0; 256];
        assert!((ssim(&a, &b, 16, Some(&all_hole)).unwrap() - ssim(&a, &b, 16, None).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn depth_metric_cases() {
        let g = vec![2.0; 9];
        let z = depth_metrics(&g, &g, DEPTH_EPS, None).unwrap();
        assert_eq!(z, DepthErrors { abs_rel: 0.0, sq_rel: 0.0, rmse: 0.0, rmse_log: 0.0 });
        let d = depth_metrics(&[4.0; 9], &g, DEPTH_EPS, None).unwrap();
        assert!((d.abs_rel - 1.0).abs() <= 1e-9);
        assert!((d.sq_rel - 2.0).abs() <= 1e-9);
        assert!((d.rmse - 2.0).abs() <= 1e-9);
        assert!((d.rmse_log - 2f64.ln()).abs() <= 1e-9);
        assert!(depth_metrics(&[1.0], &[0.0], DEPTH_EPS, None).is_err());
    }

    #[test]
    fn depth_metrics_match_direct_loop_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g: Vec<f64> = (0..50).map(|i| if i % 7 == 0 { 0.0 } else { rng.gen_range(0.5..9.0) }).collect();
        let p: Vec<f64> = (0..50).map(|i| if i % 11 == 0 { 0.0 } else { rng.gen_range(0.5..9.0) }).collect();
        let (mut a, mut s, mut r, mut l, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..50 {
            if g[i] > 1e-3 {
                a += (p[i] - g[i]).abs() / g[i];
                s += (p[i] - g[i]).powi(2) / g[i];
                r += (p[i] - g[i]).powi(2);
                l += (p[i].max(1e-3).ln() - g[i].ln()).powi(2);
                n += 1.0;
            }
        }
        let d = depth_metrics(&p, &g, DEPTH_EPS, None).unwrap();
        assert!((d.abs_rel - a / n).abs() <= 1e-9);
        assert!((d.sq_rel - s / n).abs() <= 1e-9);
        assert!((d.rmse - (r / n).sqrt()).abs() <= 1e-9);
        assert!((d.rmse_log - (l / n).sqrt()).abs() <= 1e-9);

        let c = 3.0;
        let g2: Vec<f64> = g.iter().map(|v| v * c).collect();
        let p2: Vec<f64> = p.iter().map(|v| v.max(1e-3) * c).collect();
        let p1: Vec<f64> = p.iter().map(|v| v.max(1e-3)).collect();
        let d1 = depth_metrics(&p1, &g, 1e-9, None).unwrap();
        let d2 = depth_metrics(&p2, &g2, 1e-9, None).unwrap();
        assert!((d1.abs_rel - d2.abs_rel).abs() < 1e-12);
        assert!((d1.rmse_log - d2.rmse_log).abs() < 1e-12);
        assert!((d2.rmse - c * d1.rmse).abs() < 1e-9);
        assert!((d2.sq_rel - c * d1.sq_rel).abs() < 1e-9);
    }

    #[test]
    fn emd_cases() {
        assert_eq!(emd_1d(&[0.0], &[3.5]).unwrap(), 3.5);
        assert_eq!(emd_1d(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap(), 0.0);
        assert!(emd_1d(&[1.0], &[1.0, 2.0]).is_err());
        assert!(emd_1d(&[], &[]).is_err());
    }

    #[test]
    fn report_means_match_recomputation() {
        let s = |id: &str, k: f64| SampleMetrics::from_values(id, [k, 2.0 * k, 0.5, k + 1.0, 0.1 * k, 0.2, k * k, 0.3]);
        let r = RegionReport::new(Region::Full, vec![s("a", 1.0), s("b", 2.0), s("c", 4.0)]).unwrap();
        assert!((r.mean.rgb_l1 - 7.0 / 3.0).abs() < 1e-12);
        assert!((r.mean.rmse - 21.0 / 3.0).abs() < 1e-12);
        let report = MetricsReport { full: r.clone(), hole_only: r };
        let csv = report.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 4);
        assert!(csv.lines().next().unwrap().starts_with("region,id,rgb_l1"));
        let json = report.to_json();
        assert_eq!(json["full"]["rmse"]["per_sample"]["b"], 4.0);
    }

    #[test]
    fn identity_oracle_scores_perfectly() {
        let ds = Dataset::synthetic(3, 32, 5).unwrap();
        let r = evaluate(&IdentityOracle, &ds, &EvalConfig { seed: 1 }).unwrap();
        for region in [&r.full, &r.hole_only] {
            for m in region.samples.iter().chain(std::iter::once(&region.mean)) {
                assert_eq!(m.rgb_l1, 0.0);
                assert_eq!(m.rgb_psnr, PSNR_CAP);
                assert_eq!(m.rgb_ssim, 1.0);
                assert_eq!([m.depth_l1, m.abs_rel, m.sq_rel, m.rmse, m.rmse_log], [0.0; 5]);
            }
        }
        let again = evaluate(&IdentityOracle, &ds, &EvalConfig { seed: 1 }).unwrap();
        assert_eq!(r, again);
    }
}
