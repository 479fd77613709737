//! Loss terms and their gradients w.r.t. the images they consume.
//!
//! Every function returns the scalar together with the gradient on each
//! differentiable input. Quantities passed as `reference` or `target` are
//! treated as constants (stop-gradient).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Minimum fraction of valid pixels for a stereo term to be evaluated.
pub const MIN_MASK_COVERAGE: f64 = 0.1;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Regularized L1: mean over valid pixel-channels of
/// `|I1 − I2| / (reference + eps)`. Returns the value and the gradient
/// w.r.t. `i1` (the gradient w.r.t. `i2` is its negation).
pub fn r_l1(i1: &Image, i2: &Image, reference: &Image, eps: f64, mask: Option<&Mask>) -> Result<(f64, Image)> {
    i1.ensure_same_shape(i2, "r_l1 inputs")?;
    i1.ensure_same_shape(reference, "r_l1 reference")?;
    let (w, h, nc) = (i1.width(), i1.height(), i1.channels());
    let valid = |x: usize, y: usize| mask.is_none_or(|m| m.get(x, y));
    let count = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| valid(x, y))
        .count()
        * nc;
    let mut grad = Image::new(w, h, nc);
    if count == 0 {
        log::warn!("regularized L1 over an empty mask");
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            if !valid(x, y) {
                continue;
            }
            for c in 0..nc {
                let den = reference.get(x, y, c) + eps;
                let diff = i1.get(x, y, c) - i2.get(x, y, c);
                sum += diff.abs() / den;
                grad.set(x, y, c, sign(diff) / den * inv);
            }
        }
    }
    Ok((sum * inv, grad))
}

/// Border handling of the SSIM window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsimPadding {
    /// Only windows fully inside the image; output shrinks by `window − 1`.
    Valid,
    /// Zero padding; output has the input size.
    Same,
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

fn output_dims(w: usize, h: usize, pad: SsimPadding) -> (usize, usize) {
    match pad {
        SsimPadding::Same => (w, h),
        SsimPadding::Valid => (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW),
    }
}

/// Offset of the first input sample under output index 0.
fn start_offset(pad: SsimPadding) -> isize {
    match pad {
        SsimPadding::Same => -((SSIM_WINDOW / 2) as isize),
        SsimPadding::Valid => 0,
    }
}

/// Separable Gaussian filter over all channels.
fn gauss_filter(img: &Image, pad: SsimPadding) -> Image {
    let k = gaussian_kernel();
    let (w, h, nc) = (img.width(), img.height(), img.channels());
    let (ow, oh) = output_dims(w, h, pad);
    let off = start_offset(pad);
    let horiz = Image::from_fn(ow, h, nc, |x, y, c| {
        let mut acc = 0.0;
        for (j, kv) in k.iter().enumerate() {
            let sx = x as isize + off + j as isize;
            if sx >= 0 && (sx as usize) < w {
                acc += kv * img.get(sx as usize, y, c);
            }
        }
        acc
    });
    Image::from_fn(ow, oh, nc, |x, y, c| {
        let mut acc = 0.0;
        for (j, kv) in k.iter().enumerate() {
            let sy = y as isize + off + j as isize;
            if sy >= 0 && (sy as usize) < h {
                acc += kv * horiz.get(x, sy as usize, c);
            }
        }
        acc
    })
}

/// Adjoint of [`gauss_filter`] for an input of size `w × h`.
fn gauss_filter_adjoint(grad: &Image, w: usize, h: usize, pad: SsimPadding) -> Image {
    let k = gaussian_kernel();
    let (ow, oh, nc) = (grad.width(), grad.height(), grad.channels());
    let off = start_offset(pad);
    let mut mid = Image::new(ow, h, nc);
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..nc {
                let g = grad.get(x, y, c);
                for (j, kv) in k.iter().enumerate() {
                    let sy = y as isize + off + j as isize;
                    if sy >= 0 && (sy as usize) < h {
                        mid.add_at(x, sy as usize, c, kv * g);
                    }
                }
            }
        }
    }
    let mut out = Image::new(w, h, nc);
    for y in 0..h {
        for x in 0..ow {
            for c in 0..nc {
                let g = mid.get(x, y, c);
                for (j, kv) in k.iter().enumerate() {
                    let sx = x as isize + off + j as isize;
                    if sx >= 0 && (sx as usize) < w {
                        out.add_at(sx as usize, y, c, kv * g);
                    }
                }
            }
        }
    }
    out
}

fn check_ssim_inputs(x: &Image, y: &Image, pad: SsimPadding) -> Result<()> {
    x.ensure_same_shape(y, "ssim inputs")?;
    if pad == SsimPadding::Valid && (x.width() < SSIM_WINDOW || x.height() < SSIM_WINDOW) {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            x.width(),
            x.height()
        )));
    }
    Ok(())
}

struct SsimMoments {
    mu_x: Image,
    mu_y: Image,
    xx: Image,
    yy: Image,
    xy: Image,
}

fn moments(x: &Image, y: &Image, pad: SsimPadding) -> SsimMoments {
    let prod = |a: &Image, b: &Image| {
        Image::from_vec(
            a.width(),
            a.height(),
            a.channels(),
            a.data().iter().zip(b.data()).map(|(p, q)| p * q).collect(),
        )
        .expect("same shape")
    };
    SsimMoments {
        mu_x: gauss_filter(x, pad),
        mu_y: gauss_filter(y, pad),
        xx: gauss_filter(&prod(x, x), pad),
        yy: gauss_filter(&prod(y, y), pad),
        xy: gauss_filter(&prod(x, y), pad),
    }
}

/// Mean local SSIM over the map and all channels.
pub fn ssim(x: &Image, y: &Image, pad: SsimPadding) -> Result<f64> {
    Ok(ssim_with_grad(x, y, pad, false)?.0)
}

/// Mean SSIM and, when `want_grad`, its gradient w.r.t. `x`.
pub fn ssim_with_grad(x: &Image, y: &Image, pad: SsimPadding, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check_ssim_inputs(x, y, pad)?;
    let m = moments(x, y, pad);
    let n = m.mu_x.data().len();
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    let mut d_mu = Image::new(m.mu_x.width(), m.mu_x.height(), m.mu_x.channels());
    let mut d_xx = d_mu.clone();
    let mut d_xy = d_mu.clone();
    for i in 0..n {
        let (mx, my) = (m.mu_x.data()[i], m.mu_y.data()[i]);
        let sxx = m.xx.data()[i] - mx * mx;
        let syy = m.yy.data()[i] - my * my;
        let sxy = m.xy.data()[i] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * sxy + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = sxx + syy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            // Partials in terms of (μx, E[x²], E[xy]).
            let bb = b1 * b2;
            let d_a1 = 2.0 * my;
            let d_a2 = -2.0 * my;
            let d_b1 = 2.0 * mx;
            let d_b2 = -2.0 * mx;
            d_mu.data_mut()[i] = ((d_a1 * a2 + a1 * d_a2) - s * (d_b1 * b2 + b1 * d_b2)) / bb * inv;
            d_xx.data_mut()[i] = -s / b2 * inv;
            d_xy.data_mut()[i] = 2.0 * a1 / bb * inv;
        }
    }
    if !want_grad {
        return Ok((total * inv, None));
    }
    let (w, h) = (x.width(), x.height());
    let g_mu = gauss_filter_adjoint(&d_mu, w, h, pad);
    let g_xx = gauss_filter_adjoint(&d_xx, w, h, pad);
    let g_xy = gauss_filter_adjoint(&d_xy, w, h, pad);
    let grad = Image::from_vec(
        w,
        h,
        x.channels(),
        (0..x.data().len())
            .map(|i| g_mu.data()[i] + 2.0 * x.data()[i] * g_xx.data()[i] + y.data()[i] * g_xy.data()[i])
            .collect(),
    )?;
    Ok((total * inv, Some(grad)))
}

fn regularize(img: &Image, reference: &Image, eps: f64) -> Image {
    Image::from_vec(
        img.width(),
        img.height(),
        img.channels(),
        img.data().iter().zip(reference.data()).map(|(v, r)| v / (r + eps)).collect(),
    )
    .expect("same shape")
}

/// `1 − SSIM(I/(sg(ref)+ε), gt/(sg(ref)+ε))` with zero-padded windows, and
/// its gradient w.r.t. `img`.
pub fn r_ssim(img: &Image, gt: &Image, reference: &Image, eps: f64) -> Result<(f64, Image)> {
    img.ensure_same_shape(gt, "r_ssim inputs")?;
    img.ensure_same_shape(reference, "r_ssim reference")?;
    let x = regularize(img, reference, eps);
    let y = regularize(gt, reference, eps);
    let (s, g) = ssim_with_grad(&x, &y, SsimPadding::Same, true)?;
    let mut g = g.expect("gradient requested");
    for (v, r) in g.data_mut().iter_mut().zip(reference.data()) {
        *v = -*v / (r + eps);
    }
    Ok((1.0 - s, g))
}

#[derive(Clone, Debug)]
pub struct PhotometricLoss {
    pub value: f64,
    pub r_l1: f64,
    pub r_ssim: f64,
    /// Gradient w.r.t. the rendered image.
    pub grad: Image,
}

/// `(1 − λ_s)·R-L1(I, gt) + λ_s·R-SSIM(I, gt)`.
pub fn photometric_loss(img: &Image, gt: &Image, reference: &Image, lambda_s: f64, eps: f64) -> Result<PhotometricLoss> {
    if !(0.0..=1.0).contains(&lambda_s) {
        return Err(Error::InvalidArgument(format!("lambda_s must lie in [0, 1], got {lambda_s}")));
    }
    let (l1, g1) = r_l1(img, gt, reference, eps, None)?;
    let (value, grad) = if lambda_s == 0.0 {
        (l1, g1)
    } else {
        let (ls, gs) = r_ssim(img, gt, reference, eps)?;
        let mut g = g1;
        for (a, b) in g.data_mut().iter_mut().zip(gs.data()) {
            *a = (1.0 - lambda_s) * *a + lambda_s * b;
        }
        return Ok(PhotometricLoss {
            value: (1.0 - lambda_s) * l1 + lambda_s * ls,
            r_l1: l1,
            r_ssim: ls,
            grad: g,
        });
    };
    Ok(PhotometricLoss {
        value,
        r_l1: l1,
        r_ssim: 0.0,
        grad,
    })
}

/// Channel-mean absolute forward difference of `img` at `(x, y)` along
/// `axis` (0 = horizontal, 1 = vertical); zero on the last column/row.
fn edge(img: &Image, x: usize, y: usize, axis: usize) -> f64 {
    let Some((nx, ny)) = neighbour(img, x, y, axis) else { return 0.0 };
    let nc = img.channels();
    (0..nc).map(|c| (img.get(nx, ny, c) - img.get(x, y, c)).abs()).sum::<f64>() / nc as f64
}

fn neighbour(img: &Image, x: usize, y: usize, axis: usize) -> Option<(usize, usize)> {
    match axis {
        0 if x + 1 < img.width() => Some((x + 1, y)),
        1 if y + 1 < img.height() => Some((x, y + 1)),
        _ => None,
    }
}

/// Adds `scale · ∂edge/∂img` at `(x, y)`.
fn edge_backward(img: &Image, x: usize, y: usize, axis: usize, scale: f64, grad: &mut Image) {
    let Some((nx, ny)) = neighbour(img, x, y, axis) else { return };
    let nc = img.channels();
    for c in 0..nc {
        let s = sign(img.get(nx, ny, c) - img.get(x, y, c)) * scale / nc as f64;
        grad.add_at(nx, ny, c, s);
        grad.add_at(x, y, c, -s);
    }
}

/// Edge-aware disparity smoothness:
/// `(1/HW) Σ_{d ∈ {d_h, d_v}} Σ_{x,y} Σ_k |∇_k d|·exp(−γ|∇_k I_gt|)`, with
/// forward differences. Differences touching a pixel outside `valid` are
/// dropped. Returns the value and gradients on both disparity maps.
pub fn smoothness_loss(d_h: &Image, d_v: &Image, gt: &Image, gamma: f64, valid: &Mask) -> (f64, Image, Image) {
    let (w, h) = (gt.width(), gt.height());
    let inv = 1.0 / (w * h) as f64;
    let mut total = 0.0;
    let mut grads = [Image::new(w, h, 1), Image::new(w, h, 1)];
    for (d, g) in [d_h, d_v].into_iter().zip(grads.iter_mut()) {
        for y in 0..h {
            for x in 0..w {
                if !valid.get(x, y) {
                    continue;
                }
                for axis in 0..2 {
                    let Some((nx, ny)) = neighbour(gt, x, y, axis) else { continue };
                    if !valid.get(nx, ny) {
                        continue;
                    }
                    let weight = (-gamma * edge(gt, x, y, axis)).exp();
                    let diff = d.get(nx, ny, 0) - d.get(x, y, 0);
                    total += diff.abs() * weight;
                    let s = sign(diff) * weight * inv;
                    g.add_at(nx, ny, 0, s);
                    g.add_at(x, y, 0, -s);
                }
            }
        }
    }
    let [gh, gv] = grads;
    (total * inv, gh, gv)
}

/// Inputs of the trinocular consistency terms, all aligned to the central view.
pub struct TrinocularInputs<'a> {
    pub object_c: &'a Image,
    pub medium_c: &'a Image,
    pub warped_h: &'a Image,
    pub mask_h: &'a Mask,
    pub warped_v: &'a Image,
    pub mask_v: &'a Mask,
    pub gt: &'a Image,
    pub d_h: &'a Image,
    pub d_v: &'a Image,
    /// Pixels with a usable rendered depth.
    pub depth_valid: &'a Mask,
    /// Stop-gradient denominator of the regularized L1.
    pub reference: &'a Image,
    pub eps: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug)]
pub struct TrinocularOutput {
    pub obj_stereo: f64,
    pub full_stereo: f64,
    pub smooth: f64,
    pub tri: f64,
    /// Whether the horizontal / vertical stereo terms had enough coverage.
    pub axis_active: [bool; 2],
    pub grad_object_c: Image,
    pub grad_medium_c: Image,
    pub grad_warped_h: Image,
    pub grad_warped_v: Image,
    pub grad_d_h: Image,
    pub grad_d_v: Image,
}

pub fn trinocular_losses(inp: &TrinocularInputs<'_>) -> Result<TrinocularOutput> {
    let (w, h) = (inp.gt.width(), inp.gt.height());
    let mut out = TrinocularOutput {
        obj_stereo: 0.0,
        full_stereo: 0.0,
        smooth: 0.0,
        tri: 0.0,
        axis_active: [false; 2],
        grad_object_c: Image::new(w, h, 3),
        grad_medium_c: Image::new(w, h, 3),
        grad_warped_h: Image::new(w, h, 3),
        grad_warped_v: Image::new(w, h, 3),
        grad_d_h: Image::new(w, h, 1),
        grad_d_v: Image::new(w, h, 1),
    };
    for axis in 0..2 {
        let (warped, mask) = if axis == 0 {
            (inp.warped_h, inp.mask_h)
        } else {
            (inp.warped_v, inp.mask_v)
        };
        if mask.coverage() < MIN_MASK_COVERAGE {
            log::debug!("stereo axis {axis} skipped: coverage {:.3}", mask.coverage());
            continue;
        }
        out.axis_active[axis] = true;
        let (lo, go) = r_l1(warped, inp.object_c, inp.reference, inp.eps, Some(mask))?;
        let full = warped.add(inp.medium_c)?;
        let (lf, gf) = r_l1(&full, inp.gt, inp.reference, inp.eps, Some(mask))?;
        out.obj_stereo += lo;
        out.full_stereo += lf;
        let gw = if axis == 0 {
            &mut out.grad_warped_h
        } else {
            &mut out.grad_warped_v
        };
        gw.add_assign(&go);
        gw.add_assign(&gf);
        out.grad_medium_c.add_assign(&gf);
        for (a, b) in out.grad_object_c.data_mut().iter_mut().zip(go.data()) {
            *a -= b;
        }
    }
    let (ls, gh, gv) = smoothness_loss(inp.d_h, inp.d_v, inp.gt, inp.gamma, inp.depth_valid);
    out.smooth = ls;
    out.grad_d_h = gh;
    out.grad_d_v = gv;
    out.tri = out.obj_stereo + out.full_stereo + out.smooth;
    Ok(out)
}

/// A depth prior at one central-view pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpiSample {
    pub x: usize,
    pub y: usize,
    pub target: f64,
}

/// Edge-aware Log-L1 between rendered depth and detached depth priors:
/// mean over samples and both axes of
/// `log(1 + |D(x,y) − target|)·exp(−|∇_k I_c(x,y)|)`.
/// Returns the value and gradients w.r.t. `depth` and `image`.
pub fn epipolar_loss(depth: &Image, samples: &[EpiSample], image: &Image) -> (f64, Image, Image) {
    let mut gd = Image::new(depth.width(), depth.height(), 1);
    let mut gi = Image::new(image.width(), image.height(), image.channels());
    if samples.is_empty() {
        log::debug!("epipolar loss without candidates");
        return (0.0, gd, gi);
    }
    let inv = 1.0 / (2 * samples.len()) as f64;
    let mut total = 0.0;
    for s in samples {
        let diff = depth.get(s.x, s.y, 0) - s.target;
        let log_term = diff.abs().ln_1p();
        for axis in 0..2 {
            let wgt = (-edge(image, s.x, s.y, axis)).exp();
            total += log_term * wgt;
            gd.add_at(s.x, s.y, 0, sign(diff) / (1.0 + diff.abs()) * wgt * inv);
            edge_backward(image, s.x, s.y, axis, -log_term * wgt * inv, &mut gi);
        }
    }
    (total * inv, gd, gi)
}

/// One primitive's center pixel and camera depth for the depth residual.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualSample {
    pub index: usize,
    pub x: usize,
    pub y: usize,
    pub z: f64,
}

/// `(1/N′)·Σ |D(x_i) − z_i|`; returns the value, the gradient on the depth
/// map and the gradient on each sample's `z`.
pub fn residual_loss(depth: &Image, samples: &[ResidualSample]) -> (f64, Image, Vec<f64>) {
    let mut gd = Image::new(depth.width(), depth.height(), 1);
    if samples.is_empty() {
        return (0.0, gd, Vec::new());
    }
    let inv = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    let mut gz = Vec::with_capacity(samples.len());
    for s in samples {
        let diff = depth.get(s.x, s.y, 0) - s.z;
        total += diff.abs();
        gd.add_at(s.x, s.y, 0, sign(diff) * inv);
        gz.push(-sign(diff) * inv);
    }
    (total * inv, gd, gz)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_tri: f64,
    pub lambda_res: f64,
    /// Stabilizer of the regularized losses.
    pub eps: f64,
    /// Edge sensitivity of the smoothness weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: 0.2,
            lambda_tri: 0.1,
            lambda_res: 0.01,
            eps: 1e-3,
            gamma: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActiveTerms {
    pub tri: bool,
    pub epi: bool,
    pub res: bool,
}

/// Raw (unweighted) values of every term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub photo: f64,
    pub r_l1: f64,
    pub r_ssim: f64,
    pub obj_stereo: f64,
    pub full_stereo: f64,
    pub smooth: f64,
    pub tri: f64,
    pub epi: f64,
    pub res: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(flatten)]
    pub terms: LossTerms,
    pub total: f64,
    pub active: ActiveTerms,
    pub lambda_s: f64,
    pub lambda_tri: f64,
    pub lambda_epi: f64,
    pub lambda_res: f64,
}

impl LossReport {
    /// Effective multiplier of each regularizer (zero when inactive).
    pub fn multipliers(&self) -> (f64, f64, f64) {
        (
            if self.active.tri { self.lambda_tri } else { 0.0 },
            if self.active.epi { self.lambda_epi } else { 0.0 },
            if self.active.res { self.lambda_res } else { 0.0 },
        )
    }
}

/// `photo + λ_tri·tri + λ_epi·epi + λ_res·res`, inactive terms dropped.
pub fn total_loss(terms: &LossTerms, active: ActiveTerms, weights: &LossWeights, lambda_epi: f64) -> LossReport {
    let mut report = LossReport {
        terms: *terms,
        total: 0.0,
        active,
        lambda_s: weights.lambda_s,
        lambda_tri: weights.lambda_tri,
        lambda_epi,
        lambda_res: weights.lambda_res,
    };
    let (mt, me, mr) = report.multipliers();
    let mut total = terms.photo;
    if active.tri {
        total += mt * terms.tri;
    }
    if active.epi {
        total += me * terms.epi;
    }
    if active.res {
        total += mr * terms.res;
    }
    report.total = total;
    report
}
