//! Fidelity and perceptual evaluation.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Manifest;
use crate::data::PairedPatch;
use crate::error::{domain, shape_err, Result};
use crate::inference::SrModel;
use crate::perceptual::{ExtractorSource, FeatureExtractor, MAP_TAP_DEPTHS};
use crate::raster::{quantize, Image};
use crate::resample::downsample;

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 100.0;
/// Samples per image in the diversity protocol.
pub const DIVERSITY_SAMPLES: usize = 11;
/// Added to channel norms before unit normalization.
pub const NORM_EPS: f64 = 1e-10;
pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PLOT_FILE: &str = "pd_curve.svg";
/// Channel weighting used by [`perceptual_map`].
pub const CHANNEL_WEIGHTS: &str = "uniform";

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-0.5 * (i * i) as f64 / (SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let ow = w + 1 - n;
    let oh = h + 1 - n;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM on BT.601 luma with an 11x11 Gaussian window (sigma 1.5), data range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let (h, w) = a.dims();
    let win = 2 * SSIM_RADIUS + 1;
    if h < win || w < win {
        return Err(domain!("SSIM needs at least {win}x{win} pixels, got {h}x{w}"));
    }
    let (la, lb) = (a.luma(), b.luma());
    let (x, y) = (la.data(), lb.data());
    let k = gaussian_window();
    let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<f64>>();
    let (mx, ..) = filter_valid(x, h, w, &k);
    let (my, ..) = filter_valid(y, h, w, &k);
    let (mxx, ..) = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &k);
    let (myy, ..) = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &k);
    let (mxy, ..) = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// PSNR between the bicubically downsampled SR image and the LR input.
pub fn lr_psnr(sr: &Image, lr: &Image, scale: usize) -> Result<f64> {
    if sr.dims() != (lr.height() * scale, lr.width() * scale) {
        return Err(shape_err!(
            "SR is {}x{} but LR {}x{} at scale {scale} needs {}x{}",
            sr.height(),
            sr.width(),
            lr.height(),
            lr.width(),
            lr.height() * scale,
            lr.width() * scale
        ));
    }
    psnr(&downsample(sr, scale)?, lr)
}

/// Per-pixel distance field between two RGB images, shape `(H, W)` row-major.
///
/// Five feature taps are unit-normalized along channels, compared by squared
/// difference summed over channels, bilinearly resized to the image and averaged.
pub fn perceptual_map(ex: &FeatureExtractor, a: &Image, b: &Image) -> Result<Vec<f64>> {
    a.same_shape(b)?;
    let fa = normalized_taps(ex, a)?;
    let fb = normalized_taps(ex, b)?;
    Ok(map_from_taps(&fa, &fb, a.dims()))
}

pub fn perceptual_score(ex: &FeatureExtractor, a: &Image, b: &Image) -> Result<f64> {
    Ok(mean(&perceptual_map(ex, a, b)?))
}

/// Unit-normalized activations at every map tap: `(channels, h, w, values)`.
pub struct Taps(Vec<(usize, usize, usize, Vec<f64>)>);

pub fn normalized_taps(ex: &FeatureExtractor, img: &Image) -> Result<Taps> {
    if img.channels() != 3 {
        return Err(shape_err!("perceptual map needs RGB input, got {} channels", img.channels()));
    }
    let feats = ex.taps(&img.to_tensor(ex.dtype())?, &MAP_TAP_DEPTHS)?;
    let mut out = Vec::with_capacity(feats.len());
    for f in feats {
        let (_, c, h, w) = f.dims4()?;
        let mut v: Vec<f64> = f.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let n = h * w;
        for p in 0..n {
            let norm = (0..c).map(|k| v[k * n + p] * v[k * n + p]).sum::<f64>().sqrt();
            for k in 0..c {
                v[k * n + p] /= norm + NORM_EPS;
            }
        }
        out.push((c, h, w, v));
    }
    Ok(Taps(out))
}

fn map_from_taps(fa: &Taps, fb: &Taps, (oh, ow): (usize, usize)) -> Vec<f64> {
    let mut acc = vec![0.0; oh * ow];
    let levels = fa.0.len();
    for ((c, h, w, va), (_, _, _, vb)) in fa.0.iter().zip(&fb.0) {
        let n = h * w;
        let d: Vec<f64> = (0..n)
            .map(|p| (0..*c).map(|k| (va[k * n + p] - vb[k * n + p]).powi(2)).sum())
            .collect();
        for (o, v) in acc.iter_mut().zip(bilinear(&d, *h, *w, oh, ow)) {
            *o += v / levels as f64;
        }
    }
    acc
}

fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize with half-pixel centres (`align_corners = False`).
fn bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let xs: Vec<_> = (0..ow).map(|x| source_coord(x, w, ow)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, ty) = source_coord(y, h, oh);
        for &(x0, x1, tx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub mean_perceptual: f64,
    pub g_best: f64,
    pub l_best: f64,
    /// Percentage.
    pub score: f64,
}

/// `(g_best - l_best) / g_best * 100`, zero when `g_best` is zero.
pub fn diversity_score(g_best: f64, l_best: f64) -> f64 {
    if g_best == 0.0 {
        0.0
    } else {
        (g_best - l_best) / g_best * 100.0
    }
}

/// Diversity statistics from precomputed per-sample perceptual maps of equal size.
pub fn diversity_from_maps(maps: &[Vec<f64>]) -> Result<DiversityReport> {
    let Some(first) = maps.first() else {
        return Err(domain!("diversity needs at least one sample"));
    };
    let n = first.len();
    if n == 0 || maps.iter().any(|m| m.len() != n) {
        return Err(shape_err!("perceptual maps must be non-empty and equally sized"));
    }
    let means: Vec<f64> = maps.iter().map(|m| mean(m)).collect();
    let g_best = means.iter().copied().fold(f64::INFINITY, f64::min);
    let l_best = (0..n)
        .map(|p| maps.iter().map(|m| m[p]).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / n as f64;
    Ok(DiversityReport {
        mean_perceptual: mean(&means),
        g_best,
        l_best,
        score: diversity_score(g_best, l_best),
    })
}

/// Diversity of exactly [`DIVERSITY_SAMPLES`] outputs against the ground truth.
pub fn diversity(ex: &FeatureExtractor, samples: &[Image], hr: &Image) -> Result<DiversityReport> {
    if samples.len() != DIVERSITY_SAMPLES {
        return Err(domain!(
            "diversity protocol expects {DIVERSITY_SAMPLES} samples, got {}",
            samples.len()
        ));
    }
    diversity_any(ex, samples, hr)
}

/// Like [`diversity`] with any positive number of samples.
pub fn diversity_any(ex: &FeatureExtractor, samples: &[Image], hr: &Image) -> Result<DiversityReport> {
    let fh = normalized_taps(ex, hr)?;
    let maps = samples
        .iter()
        .map(|s| {
            s.same_shape(hr)?;
            Ok(map_from_taps(&normalized_taps(ex, s)?, &fh, hr.dims()))
        })
        .collect::<Result<Vec<_>>>()?;
    diversity_from_maps(&maps)
}

/// The metric feature network for a checkpoint: the one it was trained with
/// when recorded, else the default resolution (cache, then seeded width 64).
pub fn extractor_for(manifest: &Manifest) -> Result<FeatureExtractor> {
    let source = match &manifest.train {
        Some(cfg) => cfg.extractor.source(),
        None => ExtractorSource::resolve(0, 64),
    };
    FeatureExtractor::new(source, DType::F32)
}

/// The exported 8-bit image as seen by a viewer.
pub fn as_exported(img: &Image) -> Image {
    img.map(|v| quantize(v) as f64 / 255.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub dataset: String,
    pub image: String,
    pub t: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub lr_psnr: f64,
    pub perceptual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdPoint {
    pub t: f64,
    /// Mean PSNR in dB.
    pub distortion: f64,
    /// Mean perceptual score.
    pub perception: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    /// `None` for the aggregate row.
    pub t: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
    pub lr_psnr: f64,
    pub perceptual: f64,
    pub g_best: Option<f64>,
    pub l_best: Option<f64>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub extractor: String,
    pub channel_weights: String,
    pub records: Vec<ImageRecord>,
    /// Per-image diversity over the evaluated `t` values.
    pub diversity: Vec<DiversityReport>,
    pub summary: Vec<SummaryRow>,
}

impl EvalReport {
    pub fn points(&self) -> Vec<PdPoint> {
        self.summary
            .iter()
            .filter_map(|r| {
                r.t.map(|t| PdPoint {
                    t,
                    distortion: r.psnr,
                    perception: r.perceptual,
                })
            })
            .collect()
    }

    pub fn records_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("dataset,t,PSNR,SSIM,LR-PSNR,perceptual,g_best,l_best,score\n");
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.summary {
            let t = r.t.map(|t| format!("{t:.3}")).unwrap_or_else(|| "all".into());
            let _ = writeln!(
                s,
                "{},{t},{:.6},{:.6},{:.6},{:.6},{},{},{}",
                r.dataset,
                r.psnr,
                r.ssim,
                r.lr_psnr,
                r.perceptual,
                opt(r.g_best),
                opt(r.l_best),
                opt(r.score)
            );
        }
        s
    }

    /// Writes records, summary and optionally the PD plot into `dir`.
    pub fn write(&self, dir: &Path, plot: bool) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        crate::io::write_atomic(&dir.join(RECORDS_FILE), self.records_jsonl().as_bytes())?;
        crate::io::write_atomic(&dir.join(SUMMARY_FILE), self.summary_csv().as_bytes())?;
        if plot {
            crate::io::write_atomic(&dir.join(PLOT_FILE), pd_plot_svg(&self.points()).as_bytes())?;
        }
        Ok(())
    }
}

/// Flat-map inference over `pairs` for every `t`, scored on the exported 8-bit outputs.
pub fn evaluate(
    model: &SrModel,
    ex: &FeatureExtractor,
    dataset: &str,
    pairs: &[PairedPatch],
    ts: &[f64],
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(crate::Error::Data(format!("dataset {dataset:?} has no images")));
    }
    if ts.is_empty() {
        return Err(domain!("no t values to evaluate"));
    }
    let scale = model.scale();
    let mut records = Vec::with_capacity(pairs.len() * ts.len());
    let mut diversity = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        if pair.scale() != scale {
            return Err(shape_err!(
                "dataset scale {} does not match model scale {scale}",
                pair.scale()
            ));
        }
        let name = format!("{}#{i}", pair.provenance.source);
        let fh = normalized_taps(ex, &pair.hr)?;
        let mut maps = Vec::with_capacity(ts.len());
        for (&t, sr) in ts.iter().zip(model.sweep(&pair.lr, ts)?) {
            let sr = as_exported(&sr);
            let map = map_from_taps(&normalized_taps(ex, &sr)?, &fh, sr.dims());
            records.push(ImageRecord {
                dataset: dataset.to_string(),
                image: name.clone(),
                t,
                psnr: psnr(&sr, &pair.hr)?,
                ssim: ssim(&sr, &pair.hr)?,
                lr_psnr: lr_psnr(&sr, &pair.lr, scale)?,
                perceptual: mean(&map),
            });
            maps.push(map);
        }
        diversity.push(diversity_from_maps(&maps)?);
    }

    let avg = |rs: &[&ImageRecord], f: fn(&ImageRecord) -> f64| {
        rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64
    };
    let row = |rs: &[&ImageRecord], t: Option<f64>| SummaryRow {
        dataset: dataset.to_string(),
        t,
        psnr: avg(rs, |r| r.psnr),
        ssim: avg(rs, |r| r.ssim),
        lr_psnr: avg(rs, |r| r.lr_psnr),
        perceptual: avg(rs, |r| r.perceptual),
        g_best: None,
        l_best: None,
        score: None,
    };
    let mut summary: Vec<SummaryRow> = ts
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let rs: Vec<&ImageRecord> = records.iter().skip(k).step_by(ts.len()).collect();
            row(&rs, Some(t))
        })
        .collect();
    let all: Vec<&ImageRecord> = records.iter().collect();
    let mut total = row(&all, None);
    let n = diversity.len() as f64;
    total.g_best = Some(diversity.iter().map(|d| d.g_best).sum::<f64>() / n);
    total.l_best = Some(diversity.iter().map(|d| d.l_best).sum::<f64>() / n);
    total.score = Some(diversity.iter().map(|d| d.score).sum::<f64>() / n);
    summary.push(total);

    Ok(EvalReport {
        model: model.id().to_string(),
        extractor: ex.source().label(),
        channel_weights: CHANNEL_WEIGHTS.into(),
        records,
        diversity,
        summary,
    })
}

/// Mean PSNR and perceptual score per `t`.
pub fn pd_curve(
    model: &SrModel,
    ex: &FeatureExtractor,
    pairs: &[PairedPatch],
    ts: &[f64],
) -> Result<Vec<PdPoint>> {
    Ok(evaluate(model, ex, "dataset", pairs, ts)?.points())
}

/// Perception (x) against distortion (y) as a standalone SVG document.
pub fn pd_plot_svg(points: &[PdPoint]) -> String {
    let (w, h, m) = (480.0, 360.0, 56.0);
    let range = |f: fn(&PdPoint) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = (hi - lo) * 0.08;
            (lo - pad, hi + pad)
        }
    };
    let (x0, x1) = range(|p| p.perception);
    let (y0, y1) = range(|p| p.distortion);
    let px = |v: f64| m + (v - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |v: f64| h - m - (v - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">perceptual distance (lower is better)</text>"#,
        w / 2.0,
        h - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">PSNR (dB)</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (v, label) in [(x0, x0), (x1, x1)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{label:.4}</text>"#,
            px(v),
            h - m + 14.0
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            m - 4.0,
            py(v) + 4.0
        );
    }
    if !points.is_empty() {
        let path: Vec<String> = points
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.perception), py(p.distortion)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#3366aa"/>"##,
            path.join(" ")
        );
    }
    for p in points {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#3366aa"><title>t={:.2}</title></circle>"##,
            px(p.perception),
            py(p.distortion),
            p.t
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resample::{upsample, upsample_nearest};
    use crate::synth::synth_image;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, c: usize, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(c, h, w, |_, _, _| rng.random())
    }

    #[test]
    fn psnr_examples() {
        let x = noise(1, 3, 8, 8);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
        let a = Image::filled(3, 5, 7, 0.5);
        let b = a.map(|v| v + 16.0 / 255.0);
        let expected = 10.0 * (255.0f64 * 255.0 / (16.0 * 16.0)).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 24.048).abs() < 1e-3);
        assert!(psnr(&a, &Image::filled(3, 5, 6, 0.5)).is_err());
    }

    #[test]
    fn psnr_matches_scalar_loop() {
        let (a, b) = (noise(2, 3, 9, 11), noise(3, 3, 9, 11));
        let mut se = 0.0;
        for c in 0..3 {
            for y in 0..9 {
                for x in 0..11 {
                    se += (a.get(c, y, x) - b.get(c, y, x)).powi(2);
                }
            }
        }
        let oracle = 10.0 * (1.0 / (se / (3.0 * 9.0 * 11.0))).log10();
        assert!((psnr(&a, &b).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let x = synth_image(4, 32, 32);
        let n = noise(5, 3, 32, 32);
        let v: Vec<f64> = [0.01, 0.03, 0.1]
            .iter()
            .map(|amp| {
                let y = Image::from_fn(3, 32, 32, |c, yy, xx| {
                    x.get(c, yy, xx) + amp * (n.get(c, yy, xx) - 0.5)
                });
                psnr(&x, &y).unwrap()
            })
            .collect();
        assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
    }

    fn hash01(k: u64, c: u64, y: u64, x: u64) -> f64 {
        let mut v = (x * 73856093) ^ (y * 19349663) ^ (c * 83492791) ^ (k * 2654435761);
        v &= 0xFFFF_FFFF;
        v = ((v ^ (v >> 13)) * 1274126177) & 0xFFFF_FFFF;
        ((v ^ (v >> 16)) % 1000) as f64 / 1000.0
    }

    fn fixture_pair(k: usize) -> (Image, Image) {
        let (h, w) = (48, 40);
        let base = |c: usize, y: usize, x: usize| {
            let (kf, yf, xf) = (k as f64, y as f64, x as f64);
            0.5 + 0.3 * (0.21 * (kf + 1.0) * xf + 0.13 * yf + c as f64).sin()
                * (0.17 * yf - 0.05 * kf * xf).cos()
        };
        let (k64, kf) = (k as u64, k as f64);
        let a = Image::from_fn(3, h, w, |c, y, x| {
            (base(c, y, x) + 0.15 * (hash01(k64, c as u64, y as u64, x as u64) - 0.5)).clamp(0.0, 1.0)
        });
        let b = Image::from_fn(3, h, w, |c, y, x| {
            (0.9 * base(c, y, x) + 0.04 + 0.1 * kf * (hash01(k64 + 7, c as u64, y as u64, x as u64) - 0.5))
                .clamp(0.0, 1.0)
        });
        (a, b)
    }

    #[test]
    fn ssim_matches_reference_implementation() {
        // structural_similarity(luma601(a), luma601(b), gaussian_weights=True,
        // sigma=1.5, use_sample_covariance=False, data_range=1.0)
        let reference = [
            0.860969242464623,
            0.885935287730594,
            0.851350513974749,
            0.804126705894794,
            0.756813861304046,
        ];
        for (k, r) in reference.iter().enumerate() {
            let (a, b) = fixture_pair(k);
            let s = ssim(&a, &b).unwrap();
            assert!((s - r).abs() < 1e-4, "pair {k}: {s} vs {r}");
        }
    }

    #[test]
    fn ssim_examples() {
        let x = synth_image(6, 24, 24);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let board = Image::from_fn(1, 24, 24, |_, y, x| ((y + x) % 2) as f64);
        let inv = board.map(|v| 1.0 - v);
        assert!(ssim(&board, &inv).unwrap() < 0.0);
        assert!(ssim(&x, &synth_image(6, 24, 23)).is_err());
        assert!(ssim(&Image::filled(1, 8, 8, 0.0), &Image::filled(1, 8, 8, 0.0)).is_err());
    }

    /// Anti-aliased bicubic shrink as a direct 2D weighted sum with mirrored borders.
    fn downsample_oracle(img: &Image, s: usize) -> Image {
        let (h, w) = img.dims();
        let sf = s as f64;
        let mirror = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let mut m = i.rem_euclid(2 * n);
            if m >= n {
                m = 2 * n - 1 - m;
            }
            m as usize
        };
        Image::from_fn(img.channels(), h / s, w / s, |c, y, x| {
            let uy = (y as f64 + 0.5) * sf - 0.5;
            let ux = (x as f64 + 0.5) * sf - 0.5;
            let r = 2 * s as isize + 2;
            let (mut acc, mut total) = (0.0, 0.0);
            for j in (uy.floor() as isize - r)..=(uy.floor() as isize + r) {
                for i in (ux.floor() as isize - r)..=(ux.floor() as isize + r) {
                    let k = crate::resample::cubic((uy - j as f64) / sf)
                        * crate::resample::cubic((ux - i as f64) / sf);
                    acc += k * img.get(c, mirror(j, h), mirror(i, w));
                    total += k;
                }
            }
            acc / total
        })
    }

    #[test]
    fn lr_psnr_matches_scalar_pipeline() {
        let lr = synth_image(7, 16, 12);
        let sr = upsample(&lr, 4).unwrap();
        let oracle = psnr(&downsample_oracle(&sr, 4), &lr).unwrap();
        let got = lr_psnr(&sr, &lr, 4).unwrap();
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        assert!(lr_psnr(&sr, &lr, 2).is_err());
    }

    #[test]
    fn nearest_upsampling_survives_antialiased_shrink_better_than_bicubic() {
        // The stretched shrink kernel nearly averages each constant block back
        // to its source pixel, while bicubic enlargement adds a second blur.
        let hr = synth_image(12, 128, 128);
        for s in [2, 4] {
            let lr = downsample(&hr, s).unwrap();
            let bicubic = lr_psnr(&upsample(&lr, s).unwrap(), &lr, s).unwrap();
            let nearest = lr_psnr(&upsample_nearest(&lr, s), &lr, s).unwrap();
            assert!(nearest > bicubic, "x{s}: nearest {nearest} bicubic {bicubic}");
        }
    }

    #[test]
    fn bicubic_round_trip_is_consistent_on_smooth_content() {
        let lr = Image::from_fn(3, 24, 24, |c, y, x| {
            0.5 + 0.3 * (0.2 * x as f64 + 0.1 * y as f64 + c as f64).sin()
        });
        for s in [2, 4] {
            let v = lr_psnr(&upsample(&lr, s).unwrap(), &lr, s).unwrap();
            assert!(v > 40.0, "x{s}: {v}");
        }
    }

    fn ex() -> FeatureExtractor {
        FeatureExtractor::seeded(0, 4, DType::F32).unwrap()
    }

    #[test]
    fn perceptual_map_properties() {
        let ex = ex();
        let (a, b) = (synth_image(9, 32, 40), synth_image(10, 32, 40));
        let zero = perceptual_map(&ex, &a, &a).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert_eq!(perceptual_score(&ex, &a, &a).unwrap(), 0.0);
        let ab = perceptual_map(&ex, &a, &b).unwrap();
        let ba = perceptual_map(&ex, &b, &a).unwrap();
        assert_eq!(ab.len(), 32 * 40);
        for (x, y) in ab.iter().zip(&ba) {
            assert!((x - y).abs() < 1e-9);
        }
        let score = perceptual_score(&ex, &a, &b).unwrap();
        assert!((score - mean(&ab)).abs() < 1e-12);
        assert!(score > 0.0);
        assert!(ab.iter().all(|&v| (0.0..=4.0).contains(&v)));
        assert!(perceptual_map(&ex, &a, &synth_image(9, 32, 41)).is_err());
    }

    #[test]
    fn bilinear_matches_half_pixel_convention() {
        // 2 -> 4 with half-pixel centres: sources -0.25 (clamped), 0.25, 0.75, 1.25.
        let out = bilinear(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
        let same = bilinear(&[1.0, 2.0, 3.0, 4.0], 2, 2, 2, 2);
        assert_eq!(same, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn diversity_examples() {
        assert!((diversity_score(0.1355, 0.1289) - 4.87).abs() < 0.005);
        let same = vec![vec![0.2, 0.4, 0.1, 0.3]; DIVERSITY_SAMPLES];
        let r = diversity_from_maps(&same).unwrap();
        assert_eq!(r.g_best, r.l_best);
        assert_eq!(r.score, 0.0);
        assert_eq!(diversity_score(0.0, 0.0), 0.0);

        // Sample A is better on the left, B on the right.
        let a = vec![0.1, 0.1, 0.5, 0.5];
        let b = vec![0.4, 0.4, 0.2, 0.2];
        let r = diversity_from_maps(&[a, b]).unwrap();
        assert_eq!(r.g_best, 0.3);
        assert!((r.l_best - 0.15).abs() < 1e-12);
        assert!((r.score - 50.0).abs() < 1e-12);
        assert!((r.mean_perceptual - 0.3).abs() < 1e-12);
        assert!(diversity_from_maps(&[]).is_err());
        assert!(diversity_from_maps(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn diversity_on_images() {
        let ex = ex();
        let hr = synth_image(11, 32, 32);
        let samples: Vec<Image> = (0..DIVERSITY_SAMPLES as u64)
            .map(|k| synth_image(100 + k, 32, 32))
            .collect();
        let r = diversity(&ex, &samples, &hr).unwrap();
        assert!(r.l_best <= r.g_best && r.g_best <= r.mean_perceptual);
        assert!(diversity(&ex, &samples[..3], &hr).is_err());
        let same = vec![samples[0].clone(); DIVERSITY_SAMPLES];
        assert_eq!(diversity(&ex, &same, &hr).unwrap().score, 0.0);
    }

    proptest! {
        #[test]
        fn best_scores_are_ordered(seed in any::<u64>(), k in 1usize..12, n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let maps: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
            let r = diversity_from_maps(&maps).unwrap();
            prop_assert!(r.l_best <= r.g_best + 1e-15);
            prop_assert!(r.g_best <= r.mean_perceptual + 1e-15);
        }

        #[test]
        fn score_is_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let maps: Vec<Vec<f64>> = (0..5).map(|_| (0..16).map(|_| rng.random::<f64>() + 0.01).collect()).collect();
            let scaled: Vec<Vec<f64>> = maps.iter().map(|m| m.iter().map(|v| v * c).collect()).collect();
            let (a, b) = (diversity_from_maps(&maps).unwrap(), diversity_from_maps(&scaled).unwrap());
            prop_assert!((a.score - b.score).abs() < 1e-9);
        }
    }

    #[test]
    fn plot_and_tables_render() {
        let pts = vec![
            PdPoint { t: 0.0, distortion: 28.0, perception: 0.3 },
            PdPoint { t: 1.0, distortion: 26.5, perception: 0.2 },
        ];
        let svg = pd_plot_svg(&pts);
        assert!(svg.starts_with("<svg") && svg.matches("<circle").count() == 2);
        assert!(pd_plot_svg(&[]).contains("</svg>"));
    }
}
