//! Preprocessing, exam pairing and affine-registration ground truth for
//! longitudinal image pairs. Clinical cohorts are user-supplied; every
//! operation here is exercised with synthetic warps in the tests.

use crate::error::{Error, Result};
use crate::raster::ImageRaster;
use chrono::NaiveDate;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Ratio below which an exam counts as the affected class.
pub const COPD_RATIO_THRESHOLD: f64 = 0.7;

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

/// One pulmonary function test; `ratio` is the regression target y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PftRecord {
    pub subject_id: String,
    pub exam_date: NaiveDate,
    /// Liters.
    pub fev1: f64,
    /// Liters.
    pub fvc: f64,
    pub ratio: f64,
}

impl PftRecord {
    pub fn new(subject_id: &str, exam_date: NaiveDate, fev1: f64, fvc: f64) -> Result<Self> {
        let r = PftRecord {
            subject_id: subject_id.to_string(),
            exam_date,
            fev1,
            fvc,
            ratio: fev1 / fvc,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fvc > 0.0) {
            return Err(Error::InvalidInput(format!(
                "fvc must be positive, got {}",
                self.fvc
            )));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.2) {
            return Err(Error::InvalidInput(format!(
                "ratio {} outside the physiological range (0, 1.2]",
                self.ratio
            )));
        }
        if (self.ratio - self.fev1 / self.fvc).abs() > 1e-6 {
            return Err(Error::InvalidInput(
                "ratio is inconsistent with fev1/fvc".into(),
            ));
        }
        Ok(())
    }
}

/// A preprocessed exam image with its associated regression target.
#[derive(Clone, Debug)]
pub struct XraySample {
    pub subject_id: String,
    pub exam_date: NaiveDate,
    /// Preprocessed, in [-1, 1], crop_size square.
    pub image: ImageRaster,
    pub y: f64,
    pub days_to_pft: i64,
}

/// 2x3 matrix mapping output pixel coordinates to input coordinates, both
/// expressed relative to the image center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    /// Row-major [a11, a12, tx, a21, a22, ty].
    pub p: [f64; 6],
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            p: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    /// (u, v) = (column, row) relative to the image center.
    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        (
            self.p[0] * u + self.p[1] * v + self.p[2],
            self.p[3] * u + self.p[4] * v + self.p[5],
        )
    }

    /// self after `inner`: (self o inner)(x) = self(inner(x)).
    pub fn compose(&self, inner: &AffineTransform) -> AffineTransform {
        let a = &self.p;
        let b = &inner.p;
        AffineTransform {
            p: [
                a[0] * b[0] + a[1] * b[3],
                a[0] * b[1] + a[1] * b[4],
                a[0] * b[2] + a[1] * b[5] + a[2],
                a[3] * b[0] + a[4] * b[3],
                a[3] * b[1] + a[4] * b[4],
                a[3] * b[2] + a[4] * b[5] + a[5],
            ],
        }
    }

    pub fn determinant(&self) -> f64 {
        self.p[0] * self.p[4] - self.p[1] * self.p[3]
    }

    /// Registration sanity bound on the linear part.
    pub fn is_sane(&self) -> bool {
        let d = self.determinant();
        (0.5..=2.0).contains(&d)
    }

    pub fn rotation_scale_shift(angle_deg: f64, scale: f64, tx: f64, ty: f64) -> Self {
        let a = angle_deg.to_radians();
        AffineTransform {
            p: [
                scale * a.cos(),
                -scale * a.sin(),
                tx,
                scale * a.sin(),
                scale * a.cos(),
                ty,
            ],
        }
    }
}

/// A registered longitudinal pair with its subtraction ground truth.
#[derive(Clone, Debug)]
pub struct PairedStudy {
    /// Unaffected side, y >= threshold.
    pub x_sample: XraySample,
    /// Affected side, y < threshold.
    pub target_sample: XraySample,
    pub aligned_target: ImageRaster,
    /// aligned_target - x_sample.image.
    pub gt_map: ImageRaster,
    pub transform: AffineTransform,
    pub registration_converged: bool,
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

fn bilinear(img: &Array2<f32>, row: f32, col: f32) -> f32 {
    let (h, w) = img.dim();
    let r = row.clamp(0.0, (h - 1) as f32);
    let c = col.clamp(0.0, (w - 1) as f32);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as f32;
    let fc = c - c0 as f32;
    img[(r0, c0)] * (1.0 - fr) * (1.0 - fc)
        + img[(r0, c1)] * (1.0 - fr) * fc
        + img[(r1, c0)] * fr * (1.0 - fc)
        + img[(r1, c1)] * fr * fc
}

fn resize_bilinear(img: &Array2<f32>, out: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    let sr = h as f32 / out as f32;
    let sc = w as f32 / out as f32;
    Array2::from_shape_fn((out, out), |(i, j)| {
        // sample at the source-space center of the destination pixel
        bilinear(
            img,
            (i as f32 + 0.5) * sr - 0.5,
            (j as f32 + 0.5) * sc - 0.5,
        )
    })
}

/// Global 256-bin histogram equalization. Monotone transfer function, so
/// pixel rank ordering is preserved.
fn hist_equalize(img: &Array2<f32>) -> Result<Array2<f32>> {
    let lo = img.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = img.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if hi <= lo {
        return Err(Error::DegenerateImage(
            "constant image: histogram equalization undefined".into(),
        ));
    }
    let n = img.len();
    let mut hist = [0usize; 256];
    let bin_of = |v: f32| (((v - lo) / (hi - lo) * 255.0).round() as usize).min(255);
    for &v in img.iter() {
        hist[bin_of(v)] += 1;
    }
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for b in 0..256 {
        acc += hist[b];
        cdf[b] = acc;
    }
    let cdf_min = cdf.iter().cloned().find(|&c| c > 0).unwrap_or(0);
    let denom = (n - cdf_min).max(1) as f32;
    Ok(img.mapv(|v| (cdf[bin_of(v)] - cdf_min) as f32 / denom))
}

/// Raw raster -> [-1, 1] network input: largest centered square crop,
/// bilinear resize, crop (random offset for training augmentation, centered
/// otherwise), 256-level histogram equalization, exact [-1, 1] rescale.
pub fn preprocess(
    image: &ImageRaster,
    crop_size: usize,
    resize_size: usize,
    random_crop: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ImageRaster> {
    let (h, w) = image.data.dim();
    if h < 32 || w < 32 {
        return Err(Error::InvalidInput(format!(
            "image {h}x{w} too small; both sides must be at least 32"
        )));
    }
    if resize_size < crop_size || crop_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize_size {resize_size} must be at least crop_size {crop_size} (> 0)"
        )));
    }
    if !image.is_finite() {
        return Err(Error::InvalidInput("non-finite pixels in input".into()));
    }
    let side = h.min(w);
    let r0 = (h - side) / 2;
    let c0 = (w - side) / 2;
    let square = image
        .data
        .slice(ndarray::s![r0..r0 + side, c0..c0 + side])
        .to_owned();
    let resized = resize_bilinear(&square, resize_size);
    let slack = resize_size - crop_size;
    let (or, oc) = if random_crop && slack > 0 {
        (rng.gen_range(0..=slack), rng.gen_range(0..=slack))
    } else {
        (slack / 2, slack / 2)
    };
    let cropped = resized
        .slice(ndarray::s![or..or + crop_size, oc..oc + crop_size])
        .to_owned();
    let eq = hist_equalize(&cropped)?;
    let lo = eq.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = eq.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if hi <= lo {
        return Err(Error::DegenerateImage(
            "image collapsed to a constant during preprocessing".into(),
        ));
    }
    Ok(ImageRaster::new(
        eq.mapv(|v| (v - lo) / (hi - lo) * 2.0 - 1.0),
    ))
}

// ---------------------------------------------------------------------------
// Exam pairing
// ---------------------------------------------------------------------------

/// One exam occurrence to match against PFTs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExamRef {
    pub subject_id: String,
    pub exam_date: NaiveDate,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairingResult {
    /// (pft index, x-ray index) matches.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_pfts: Vec<usize>,
    pub unmatched_xrays: Vec<usize>,
}

/// Candidate order: smallest gap first, then earlier exam date, then input
/// order (the deterministic stand-in for an exam identifier).
fn nearest(
    from_subject: &str,
    from_date: NaiveDate,
    pool: &[(usize, &str, NaiveDate)],
    max_gap_days: i64,
) -> Option<usize> {
    pool.iter()
        .filter(|(_, sid, _)| *sid == from_subject)
        .map(|&(i, _, d)| {
            let gap = (d - from_date).num_days().abs();
            (gap, d, i)
        })
        .filter(|&(gap, _, _)| gap <= max_gap_days)
        .min_by(|a, b| a.cmp(b))
        .map(|(_, _, i)| i)
}

/// Mutual-nearest-neighbor matching in time, per subject, within
/// `max_gap_days`. A PFT and an x-ray pair up iff each is the other's
/// closest; everything else lands in the leftover lists.
pub fn pair_exams(
    pfts: &[PftRecord],
    xrays: &[ExamRef],
    max_gap_days: i64,
) -> PairingResult {
    let pft_pool: Vec<(usize, &str, NaiveDate)> = pfts
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p.subject_id.as_str(), p.exam_date))
        .collect();
    let xray_pool: Vec<(usize, &str, NaiveDate)> = xrays
        .iter()
        .enumerate()
        .map(|(i, x)| (i, x.subject_id.as_str(), x.exam_date))
        .collect();
    let mut pairs = Vec::new();
    let mut xray_matched = vec![false; xrays.len()];
    let mut pft_matched = vec![false; pfts.len()];
    for (pi, pft) in pfts.iter().enumerate() {
        let Some(xi) = nearest(&pft.subject_id, pft.exam_date, &xray_pool, max_gap_days)
        else {
            continue;
        };
        let back = nearest(
            &xrays[xi].subject_id,
            xrays[xi].exam_date,
            &pft_pool,
            max_gap_days,
        );
        if back == Some(pi) {
            pairs.push((pi, xi));
            pft_matched[pi] = true;
            xray_matched[xi] = true;
        }
    }
    PairingResult {
        pairs,
        unmatched_pfts: (0..pfts.len()).filter(|&i| !pft_matched[i]).collect(),
        unmatched_xrays: (0..xrays.len()).filter(|&i| !xray_matched[i]).collect(),
    }
}

// ---------------------------------------------------------------------------
// Affine registration
// ---------------------------------------------------------------------------

/// Resample `moving` through `t` into the output frame (replicate-border
/// bilinear sampling).
pub fn warp_affine(moving: &ImageRaster, t: &AffineTransform) -> ImageRaster {
    let (h, w) = moving.data.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    ImageRaster::new(Array2::from_shape_fn((h, w), |(i, j)| {
        let (u, v) = t.apply(j as f64 - cx, i as f64 - cy);
        bilinear(&moving.data, (v + cy) as f32, (u + cx) as f32)
    }))
}

fn downsample2(img: &Array2<f32>) -> Array2<f32> {
    let (h, w) = img.dim();
    let (oh, ow) = (h / 2, w / 2);
    Array2::from_shape_fn((oh, ow), |(i, j)| {
        0.25 * (img[(2 * i, 2 * j)]
            + img[(2 * i, 2 * j + 1)]
            + img[(2 * i + 1, 2 * j)]
            + img[(2 * i + 1, 2 * j + 1)])
    })
}

/// Border margin excluded from the registration cost: replicate-border
/// resampling corrupts the outer frame, which would otherwise bias the fit.
fn reg_margin(h: usize, w: usize) -> usize {
    (h.min(w) / 8).clamp(1, 16)
}

fn mse_warp(reference: &Array2<f32>, moving: &ImageRaster, t: &AffineTransform) -> f64 {
    let warped = warp_affine(moving, t);
    let (h, w) = reference.dim();
    let m = reg_margin(h, w);
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for i in m..h - m {
        for j in m..w - m {
            let d = (warped.data[(i, j)] - reference[(i, j)]) as f64;
            acc += d * d;
            count += 1;
        }
    }
    acc / count.max(1) as f64
}

/// Solve a symmetric 6x6 system by Gaussian elimination with partial
/// pivoting. Returns None when singular.
fn solve6(mut a: [[f64; 6]; 6], mut b: [f64; 6]) -> Option<[f64; 6]> {
    for k in 0..6 {
        let piv = (k..6).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))?;
        if a[piv][k].abs() < 1e-12 {
            return None;
        }
        a.swap(k, piv);
        b.swap(k, piv);
        for i in k + 1..6 {
            let f = a[i][k] / a[k][k];
            for j in k..6 {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = [0.0; 6];
    for k in (0..6).rev() {
        let mut s = b[k];
        for j in k + 1..6 {
            s -= a[k][j] * x[j];
        }
        x[k] = s / a[k][k];
    }
    Some(x)
}

/// One Levenberg-Marquardt refinement pass at a single pyramid level.
fn lm_level(
    reference: &Array2<f32>,
    moving: &ImageRaster,
    t0: AffineTransform,
    iters: usize,
) -> (AffineTransform, f64, bool) {
    let (h, w) = reference.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    // precomputed moving-image gradients, sampled along with the image
    let (mh, mw) = moving.data.dim();
    let mut gx = Array2::<f32>::zeros((mh, mw));
    let mut gy = Array2::<f32>::zeros((mh, mw));
    for i in 0..mh {
        for j in 0..mw {
            let jm = j.saturating_sub(1);
            let jp = (j + 1).min(mw - 1);
            let im = i.saturating_sub(1);
            let ip = (i + 1).min(mh - 1);
            gx[(i, j)] = (moving.data[(i, jp)] - moving.data[(i, jm)]) / (jp - jm).max(1) as f32;
            gy[(i, j)] = (moving.data[(ip, j)] - moving.data[(im, j)]) / (ip - im).max(1) as f32;
        }
    }
    let mcy = (mh as f64 - 1.0) / 2.0;
    let mcx = (mw as f64 - 1.0) / 2.0;
    let mut t = t0;
    let mut mse = mse_warp(reference, moving, &t);
    let mut lambda = 1e-3;
    let mut improved_any = false;
    for _ in 0..iters {
        // accumulate J^T J and J^T r over the grid
        let mut jtj = [[0.0f64; 6]; 6];
        let mut jtr = [0.0f64; 6];
        let m = reg_margin(h, w);
        for i in m..h - m {
            for j in m..w - m {
                let u = j as f64 - cx;
                let v = i as f64 - cy;
                let (su, sv) = t.apply(u, v);
                let m = bilinear(&moving.data, (sv + mcy) as f32, (su + mcx) as f32) as f64;
                let r = m - reference[(i, j)] as f64;
                let dx = bilinear(&gx, (sv + mcy) as f32, (su + mcx) as f32) as f64;
                let dy = bilinear(&gy, (sv + mcy) as f32, (su + mcx) as f32) as f64;
                let jrow = [dx * u, dx * v, dx, dy * u, dy * v, dy];
                for a in 0..6 {
                    jtr[a] += jrow[a] * r;
                    for b in 0..6 {
                        jtj[a][b] += jrow[a] * jrow[b];
                    }
                }
            }
        }
        let n = (h * w) as f64;
        let mut stepped = false;
        for _try in 0..6 {
            let mut a = jtj;
            for d in 0..6 {
                a[d][d] += lambda * (jtj[d][d].max(1e-9));
            }
            let Some(delta) = solve6(a, jtr) else {
                lambda *= 5.0;
                continue;
            };
            let mut cand = t;
            for k in 0..6 {
                cand.p[k] -= delta[k] / 1.0;
            }
            let cand_mse = mse_warp(reference, moving, &cand);
            if cand_mse < mse {
                let rel = (mse - cand_mse) / mse.max(1e-30);
                t = cand;
                mse = cand_mse;
                lambda = (lambda / 3.0).max(1e-9);
                stepped = true;
                improved_any = true;
                if rel < 1e-9 {
                    return (t, mse, improved_any);
                }
                break;
            }
            lambda *= 5.0;
        }
        let _ = n;
        if !stepped {
            break;
        }
    }
    (t, mse, improved_any)
}

#[derive(Clone, Debug)]
pub struct Registration {
    pub transform: AffineTransform,
    pub aligned: ImageRaster,
    pub final_mse: f64,
    /// False when optimization stalled with a gross misfit; flagged, never
    /// thrown.
    pub converged: bool,
}

/// One coarse-to-fine pass over the pyramid, starting from identity.
/// Returns the fitted transform and whether the coarsest level improved.
fn pyramid_fit(ref_ms: &Array2<f32>, mov_ms: &ImageRaster, levels: usize) -> (AffineTransform, bool) {
    // build pyramids, keeping the coarsest level at >= 16 px
    let mut refs = vec![ref_ms.clone()];
    let mut movs = vec![mov_ms.data.clone()];
    for _ in 1..levels.max(1) {
        let last = refs.last().unwrap();
        if last.dim().0 / 2 < 16 || last.dim().1 / 2 < 16 {
            break;
        }
        refs.push(downsample2(refs.last().unwrap()));
        movs.push(downsample2(movs.last().unwrap()));
    }
    let mut t = AffineTransform::identity();
    let mut coarsest_improved = true;
    for lvl in (0..refs.len()).rev() {
        if lvl < refs.len() - 1 {
            // finer grid: center-relative translations double
            t.p[2] *= 2.0;
            t.p[5] *= 2.0;
        }
        let mov_level = ImageRaster::new(movs[lvl].clone());
        let (tn, _mse, improved) = lm_level(&refs[lvl], &mov_level, t, 120);
        t = tn;
        if lvl == refs.len() - 1 {
            coarsest_improved = improved;
        }
    }
    (t, coarsest_improved)
}

/// Coarse-to-fine affine MSE registration of `moving` onto `reference`,
/// initialized at identity.
pub fn register_affine(
    reference: &ImageRaster,
    moving: &ImageRaster,
    levels: usize,
) -> Result<Registration> {
    if reference.data.dim() != moving.data.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", reference.data.dim()),
            got: format!("{:?}", moving.data.dim()),
        });
    }
    if !reference.is_finite() || !moving.is_finite() {
        return Err(Error::InvalidInput(
            "non-finite values in registration input".into(),
        ));
    }
    // Fit on mean-subtracted intensities: a global brightness offset is not
    // geometry and must not pull the warp off identity.
    let ref_mean = reference.mean();
    let mov_mean = moving.mean();
    let ref_ms = reference.data.mapv(|v| v - ref_mean);
    let mov_ms = ImageRaster::new(moving.data.mapv(|v| v - mov_mean));
    let (mut t, coarsest_improved) = pyramid_fit(&ref_ms, &mov_ms, levels);
    // Compositional refinement: the LM linearization samples gradients of
    // the raw moving image, which biases the fit for large warps. Fitting a
    // small correction against the already-aligned image removes that bias.
    let (h, w) = reference.data.dim();
    for _ in 0..2 {
        let aligned_raw = warp_affine(&mov_ms, &t);
        // re-center: replicate-border resampling shifts the mean slightly,
        // and any constant offset biases the fit
        let am = aligned_raw.mean();
        let aligned_ms = ImageRaster::new(aligned_raw.data.mapv(|v| v - am));
        let (dt, _) = pyramid_fit(&ref_ms, &aligned_ms, levels);
        t = t.compose(&dt);
        if max_displacement(&dt, h.min(w)) < 0.05 {
            break;
        }
    }
    let aligned = warp_affine(moving, &t);
    // offset-invariant residual, consistent with the fitting metric
    let final_mse = {
        let mut acc = 0.0f64;
        for (a, b) in aligned.data.iter().zip(reference.data.iter()) {
            let d = ((*a - mov_mean) - (*b - ref_mean)) as f64;
            acc += d * d;
        }
        acc / reference.data.len() as f64
    };
    let spread = (reference.std() as f64).max(1e-6);
    let gross_misfit = final_mse > spread * spread;
    let converged = t.is_sane() && !(gross_misfit && !coarsest_improved);
    Ok(Registration {
        transform: t,
        aligned,
        final_mse,
        converged,
    })
}

/// Register the affected exam onto the unaffected one and subtract.
pub fn build_gt_map(x_sample: XraySample, target_sample: XraySample) -> Result<PairedStudy> {
    if x_sample.subject_id != target_sample.subject_id {
        return Err(Error::InvalidInput(format!(
            "pair crosses subjects {} / {}",
            x_sample.subject_id, target_sample.subject_id
        )));
    }
    if x_sample.y < COPD_RATIO_THRESHOLD || target_sample.y >= COPD_RATIO_THRESHOLD {
        return Err(Error::InvalidInput(format!(
            "class labels violate the {COPD_RATIO_THRESHOLD} ratio rule: x y={}, target y={}",
            x_sample.y, target_sample.y
        )));
    }
    let reg = register_affine(&x_sample.image, &target_sample.image, 4)?;
    let gt = ImageRaster::new(
        (&reg.aligned.data - &x_sample.image.data).mapv(|v| v.clamp(-2.0, 2.0)),
    );
    Ok(PairedStudy {
        x_sample,
        target_sample,
        aligned_target: reg.aligned,
        gt_map: gt,
        transform: reg.transform,
        registration_converged: reg.converged,
    })
}

// ---------------------------------------------------------------------------
// Cohort metadata
// ---------------------------------------------------------------------------

/// One parsed row of the cohort CSV (columns: subject_id, exam_date, kind,
/// fev1, fvc, path; kind is `xray` or `pft`).
#[derive(Clone, Debug)]
pub enum CohortRow {
    Pft(PftRecord),
    Xray { exam: ExamRef, path: String },
}

pub fn parse_cohort_csv(text: &str) -> Result<Vec<CohortRow>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            if line.trim() != "subject_id,exam_date,kind,fev1,fvc,path" {
                return Err(Error::InvalidInput(format!(
                    "unexpected cohort CSV header: {line}"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::InvalidInput(format!(
                "cohort CSV line {} has {} columns, expected 6",
                ln + 1,
                cols.len()
            )));
        }
        let date = NaiveDate::parse_from_str(cols[1], "%Y-%m-%d")
            .map_err(|e| Error::InvalidInput(format!("bad exam_date {}: {e}", cols[1])))?;
        match cols[2] {
            "pft" => {
                let fev1: f64 = cols[3]
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad fev1: {}", cols[3])))?;
                let fvc: f64 = cols[4]
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad fvc: {}", cols[4])))?;
                rows.push(CohortRow::Pft(PftRecord::new(cols[0], date, fev1, fvc)?));
            }
            "xray" => rows.push(CohortRow::Xray {
                exam: ExamRef {
                    subject_id: cols[0].to_string(),
                    exam_date: date,
                },
                path: cols[5].to_string(),
            }),
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown cohort record kind: {other}"
                )))
            }
        }
    }
    Ok(rows)
}

pub fn load_cohort_csv(path: &Path) -> Result<Vec<CohortRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cohort_csv(&text)
}

/// Write PairedStudy directories mirroring the synthetic-benchmark layout:
/// per-pair PNGs plus a metadata CSV carrying the six transform floats.
pub fn save_paired_studies(studies: &[PairedStudy], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut meta = String::from(
        "index,subject_id,x_date,target_date,y,y_target,a11,a12,tx,a21,a22,ty,converged\n",
    );
    for (i, s) in studies.iter().enumerate() {
        s.x_sample.image.save_png(&dir.join(format!("{i:06}.png")))?;
        s.aligned_target
            .save_png(&dir.join(format!("aligned_{i:06}.png")))?;
        s.gt_map.save_png(&dir.join(format!("gt_{i:06}.png")))?;
        let p = &s.transform.p;
        meta.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{}\n",
            i,
            s.x_sample.subject_id,
            s.x_sample.exam_date,
            s.target_sample.exam_date,
            s.x_sample.y,
            s.target_sample.y,
            p[0],
            p[1],
            p[2],
            p[3],
            p[4],
            p[5],
            s.registration_converged
        ));
    }
    std::fs::write(dir.join("meta.csv"), meta).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Max pixel displacement of a transform over an n x n grid; the metric for
/// "composition is near identity".
pub fn max_displacement(t: &AffineTransform, n: usize) -> f64 {
    let c = (n as f64 - 1.0) / 2.0;
    let mut worst = 0.0f64;
    for &u in &[-c, 0.0, c] {
        for &v in &[-c, 0.0, c] {
            let (x, y) = t.apply(u, v);
            worst = worst.max(((x - u).powi(2) + (y - v).powi(2)).sqrt());
        }
    }
    worst
}

/// Smooth synthetic test image: a few fixed-frequency bumps, used to give
/// the registration meaningful gradients everywhere.
pub fn smooth_test_image(n: usize, seed: u64) -> ImageRaster {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut terms = Vec::new();
    for _ in 0..6 {
        let fx = rng.gen_range(0.5..2.5) * std::f32::consts::PI * 2.0 / n as f32;
        let fy = rng.gen_range(0.5..2.5) * std::f32::consts::PI * 2.0 / n as f32;
        let phase = rng.gen_range(0.0..std::f32::consts::PI * 2.0);
        let amp = rng.gen_range(0.2..1.0);
        terms.push((fx, fy, phase, amp));
    }
    ImageRaster::new(Array2::from_shape_fn((n, n), |(i, j)| {
        terms
            .iter()
            .map(|&(fx, fy, ph, a)| a * (fx * j as f32 + fy * i as f32 + ph).sin())
            .sum()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn pft_validation() {
        let ok = PftRecord::new("s1", d(2020, 1, 1), 2.1, 3.0).unwrap();
        assert!((ok.ratio - 0.7).abs() < 1e-12);
        assert!(PftRecord::new("s1", d(2020, 1, 1), 2.0, 0.0).is_err());
        assert!(PftRecord::new("s1", d(2020, 1, 1), 4.0, 3.0).is_err()); // ratio 1.33
        assert!(PftRecord::new("s1", d(2020, 1, 1), -1.0, 3.0).is_err());
        let mut tampered = ok;
        tampered.ratio = 0.5;
        assert!(tampered.validate().is_err());
    }

    fn ramp(h: usize, w: usize) -> ImageRaster {
        ImageRaster::new(Array2::from_shape_fn((h, w), |(i, j)| {
            (i * w + j) as f32 / (h * w) as f32
        }))
    }

    #[test]
    fn preprocess_center_square_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = ramp(512, 400);
        let out = preprocess(&img, 224, 256, false, &mut rng).unwrap();
        assert_eq!(out.data.dim(), (224, 224));
        assert_eq!(out.min(), -1.0);
        assert_eq!(out.max(), 1.0);
        // the 512x400 input crops to the centered 400x400 square: rows 56..456.
        // top-left of the output must therefore sit well above the global min.
        let raw_first = img.data[(56, 0)];
        assert!(raw_first > img.data[(0, 0)]);
    }

    #[test]
    fn preprocess_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flat = ImageRaster::new(Array2::from_elem((64, 64), 0.25));
        match preprocess(&flat, 32, 48, false, &mut rng) {
            Err(Error::DegenerateImage(_)) => {}
            other => panic!("expected degenerate-image error, got {other:?}"),
        }
        let mut bad = ramp(64, 64);
        bad.data[(3, 3)] = f32::NAN;
        assert!(preprocess(&bad, 32, 48, false, &mut rng).is_err());
        let tiny = ramp(16, 64);
        assert!(preprocess(&tiny, 8, 16, false, &mut rng).is_err());
        assert!(preprocess(&ramp(64, 64), 48, 32, false, &mut rng).is_err());
    }

    #[test]
    fn preprocess_random_crop_is_seed_stable() {
        let img = smooth_test_image(300, 1);
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = preprocess(&img, 224, 256, true, &mut r1).unwrap();
        let b = preprocess(&img, 224, 256, true, &mut r2).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn equalization_preserves_ranks() {
        // brute-force rank oracle: sort pixel values before and after, the
        // permutation induced by sorting must agree
        let img = smooth_test_image(48, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = preprocess(&img, 48, 48, false, &mut rng).unwrap();
        let rank = |a: &Array2<f32>| {
            let mut idx: Vec<usize> = (0..a.len()).collect();
            let flat: Vec<f32> = a.iter().cloned().collect();
            idx.sort_by(|&i, &j| flat[i].total_cmp(&flat[j]).then(i.cmp(&j)));
            idx
        };
        // identical sort order modulo ties: compare via monotone agreement
        let before: Vec<f32> = img.data.iter().cloned().collect();
        let after: Vec<f32> = out.data.iter().cloned().collect();
        for w in rank(&img.data).windows(2) {
            let (i, j) = (w[0], w[1]);
            if before[i] < before[j] {
                assert!(after[i] <= after[j], "rank inversion at {i},{j}");
            }
        }
    }

    #[test]
    fn pairing_unique_candidate() {
        let pfts = vec![PftRecord::new("s", d(2020, 1, 1), 2.1, 3.0).unwrap()];
        let xrays = vec![
            ExamRef {
                subject_id: "s".into(),
                exam_date: d(2020, 1, 6),
            },
            ExamRef {
                subject_id: "s".into(),
                exam_date: d(2020, 2, 10),
            },
        ];
        let r = pair_exams(&pfts, &xrays, 30);
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.unmatched_xrays, vec![1]);
        assert!(r.unmatched_pfts.is_empty());
    }

    #[test]
    fn pairing_mutual_nearest_excludes_runner_up() {
        // PFTs at days 0 and 10, one x-ray at day 6: x-ray belongs to the
        // day-10 PFT; the day-0 PFT stays unmatched.
        let pfts = vec![
            PftRecord::new("s", d(2020, 1, 1), 2.1, 3.0).unwrap(),
            PftRecord::new("s", d(2020, 1, 11), 2.1, 3.0).unwrap(),
        ];
        let xrays = vec![ExamRef {
            subject_id: "s".into(),
            exam_date: d(2020, 1, 7),
        }];
        let r = pair_exams(&pfts, &xrays, 30);
        assert_eq!(r.pairs, vec![(1, 0)]);
        assert_eq!(r.unmatched_pfts, vec![0]);
    }

    #[test]
    fn pairing_empty_and_cross_subject() {
        assert_eq!(pair_exams(&[], &[], 30), PairingResult::default());
        let pfts = vec![PftRecord::new("a", d(2020, 1, 1), 2.1, 3.0).unwrap()];
        let xrays = vec![ExamRef {
            subject_id: "b".into(),
            exam_date: d(2020, 1, 1),
        }];
        let r = pair_exams(&pfts, &xrays, 30);
        assert!(r.pairs.is_empty());
        assert_eq!(r.unmatched_pfts, vec![0]);
        assert_eq!(r.unmatched_xrays, vec![0]);
    }

    #[test]
    fn pairing_matches_brute_force_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let n_p = rng.gen_range(0..6);
            let n_x = rng.gen_range(0..6);
            let subj = |r: &mut ChaCha8Rng| {
                if r.gen_bool(0.5) { "a" } else { "b" }.to_string()
            };
            let pfts: Vec<PftRecord> = (0..n_p)
                .map(|_| {
                    let day = rng.gen_range(1..58);
                    PftRecord::new(&subj(&mut rng), d(2020, 1, 1) + chrono::Duration::days(day), 2.1, 3.0)
                        .unwrap()
                })
                .collect();
            let xrays: Vec<ExamRef> = (0..n_x)
                .map(|_| ExamRef {
                    subject_id: subj(&mut rng),
                    exam_date: d(2020, 1, 1) + chrono::Duration::days(rng.gen_range(1..58)),
                })
                .collect();
            let got = pair_exams(&pfts, &xrays, 30);
            // oracle: enumerate all candidate pairs, keep mutual NNs
            let key_x = |pi: usize, xi: usize| {
                let gap = (xrays[xi].exam_date - pfts[pi].exam_date).num_days().abs();
                (gap, xrays[xi].exam_date, xi)
            };
            let key_p = |xi: usize, pi: usize| {
                let gap = (xrays[xi].exam_date - pfts[pi].exam_date).num_days().abs();
                (gap, pfts[pi].exam_date, pi)
            };
            let mut expect = Vec::new();
            for pi in 0..n_p {
                let best_x = (0..n_x)
                    .filter(|&xi| {
                        xrays[xi].subject_id == pfts[pi].subject_id
                            && key_x(pi, xi).0 <= 30
                    })
                    .min_by_key(|&xi| key_x(pi, xi));
                if let Some(xi) = best_x {
                    let best_p = (0..n_p)
                        .filter(|&pj| {
                            pfts[pj].subject_id == xrays[xi].subject_id
                                && key_p(xi, pj).0 <= 30
                        })
                        .min_by_key(|&pj| key_p(xi, pj));
                    if best_p == Some(pi) {
                        expect.push((pi, xi));
                    }
                }
            }
            assert_eq!(got.pairs, expect);
        }
    }

    #[test]
    fn pairing_is_symmetric() {
        // swapping list roles yields the same pair set (indices transposed)
        let pfts: Vec<PftRecord> = (0..4)
            .map(|i| {
                PftRecord::new("s", d(2020, 1, 1) + chrono::Duration::days(i * 9), 2.1, 3.0)
                    .unwrap()
            })
            .collect();
        let xrays: Vec<ExamRef> = (0..3)
            .map(|i| ExamRef {
                subject_id: "s".into(),
                exam_date: d(2020, 1, 3) + chrono::Duration::days(i * 11),
            })
            .collect();
        let fwd = pair_exams(&pfts, &xrays, 30);
        // mirrored instance: promote x-rays to "pft" role
        let pfts_m: Vec<PftRecord> = xrays
            .iter()
            .map(|x| PftRecord::new(&x.subject_id, x.exam_date, 2.1, 3.0).unwrap())
            .collect();
        let xrays_m: Vec<ExamRef> = pfts
            .iter()
            .map(|p| ExamRef {
                subject_id: p.subject_id.clone(),
                exam_date: p.exam_date,
            })
            .collect();
        let rev = pair_exams(&pfts_m, &xrays_m, 30);
        let mut transposed: Vec<(usize, usize)> =
            rev.pairs.iter().map(|&(a, b)| (b, a)).collect();
        transposed.sort_unstable();
        let mut fwd_pairs = fwd.pairs.clone();
        fwd_pairs.sort_unstable();
        assert_eq!(fwd_pairs, transposed);
    }

    #[test]
    fn self_registration_is_identity() {
        let img = smooth_test_image(64, 3);
        let reg = register_affine(&img, &img, 4).unwrap();
        assert!(reg.converged);
        let id = AffineTransform::identity();
        for k in 0..6 {
            assert!(
                (reg.transform.p[k] - id.p[k]).abs() < 1e-3,
                "param {k}: {}",
                reg.transform.p[k]
            );
        }
        assert!(reg.final_mse <= 1e-6);
    }

    #[test]
    fn known_warp_recovery_on_224_grid() {
        let reference = smooth_test_image(224, 4);
        let warp = AffineTransform::rotation_scale_shift(3.0, 1.05, 4.0, 4.0);
        let moving = warp_affine(&reference, &warp);
        let reg = register_affine(&reference, &moving, 4).unwrap();
        let comp = warp.compose(&reg.transform);
        let disp = max_displacement(&comp, 224);
        assert!(disp < 1.0, "composition displacement {disp}");
    }

    #[test]
    fn registration_is_idempotent() {
        let reference = smooth_test_image(64, 5);
        let warp = AffineTransform::rotation_scale_shift(-2.0, 0.97, 3.0, -2.0);
        let moving = warp_affine(&reference, &warp);
        let first = register_affine(&reference, &moving, 4).unwrap();
        let second = register_affine(&reference, &first.aligned, 4).unwrap();
        let disp = max_displacement(&second.transform, 64);
        assert!(disp < 0.5, "second-pass displacement {disp}");
    }

    fn sample(id: &str, y: f64, image: ImageRaster) -> XraySample {
        XraySample {
            subject_id: id.into(),
            exam_date: d(2020, 1, 1),
            image,
            y,
            days_to_pft: 0,
        }
    }

    #[test]
    fn gt_map_identical_pair_is_zero() {
        let img = smooth_test_image(64, 6);
        let study =
            build_gt_map(sample("s", 0.8, img.clone()), sample("s", 0.6, img)).unwrap();
        assert!(study.gt_map.data.iter().all(|v| v.abs() < 1e-5));
        assert!(study.registration_converged);
    }

    #[test]
    fn gt_map_keeps_pure_intensity_offset() {
        let img = smooth_test_image(64, 7);
        let brighter = ImageRaster::new(img.data.mapv(|v| v + 0.5));
        let study = build_gt_map(sample("s", 0.8, img), sample("s", 0.6, brighter)).unwrap();
        // interior median approximately the injected offset
        let mut interior: Vec<f32> = Vec::new();
        for i in 8..56 {
            for j in 8..56 {
                interior.push(study.gt_map.data[(i, j)]);
            }
        }
        interior.sort_by(f32::total_cmp);
        let median = interior[interior.len() / 2];
        assert!((median - 0.5).abs() < 0.05, "median {median}");
    }

    #[test]
    fn gt_map_rejects_bad_pairs() {
        let img = smooth_test_image(64, 8);
        assert!(build_gt_map(
            sample("s", 0.6, img.clone()),
            sample("s", 0.5, img.clone())
        )
        .is_err());
        assert!(build_gt_map(
            sample("a", 0.8, img.clone()),
            sample("b", 0.5, img)
        )
        .is_err());
    }

    #[test]
    fn cohort_csv_roundtrip() {
        let text = "subject_id,exam_date,kind,fev1,fvc,path\n\
                    s1,2020-01-05,pft,2.1,3.0,\n\
                    s1,2020-01-07,xray,,,imgs/s1_a.png\n";
        let rows = parse_cohort_csv(text).unwrap();
        assert_eq!(rows.len(), 2);
        match &rows[0] {
            CohortRow::Pft(p) => {
                assert_eq!(p.subject_id, "s1");
                assert!((p.ratio - 0.7).abs() < 1e-9);
            }
            _ => panic!("expected pft row"),
        }
        match &rows[1] {
            CohortRow::Xray { exam, path } => {
                assert_eq!(exam.exam_date, d(2020, 1, 7));
                assert_eq!(path, "imgs/s1_a.png");
            }
            _ => panic!("expected xray row"),
        }
        assert!(parse_cohort_csv("bad,header\n").is_err());
        assert!(parse_cohort_csv(
            "subject_id,exam_date,kind,fev1,fvc,path\ns1,2020-01-05,scan,,,x\n"
        )
        .is_err());
    }

    #[test]
    fn affine_compose_and_sanity() {
        let a = AffineTransform::rotation_scale_shift(10.0, 1.1, 2.0, -1.0);
        let b = AffineTransform::rotation_scale_shift(-10.0, 1.0 / 1.1, 0.0, 0.0);
        let c = a.compose(&b);
        assert!((c.determinant() - 1.0).abs() < 1e-9);
        assert!(AffineTransform::identity().is_sane());
        let squash = AffineTransform {
            p: [0.3, 0.0, 0.0, 0.0, 1.0, 0.0],
        };
        assert!(!squash.is_sane());
    }
}
