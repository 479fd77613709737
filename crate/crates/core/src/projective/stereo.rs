//! Disparity from rendered depth and disparity-driven inverse warping.

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

use super::camera::{CameraView, DEPTH_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMaps {
    /// Horizontal disparity `f_h·b_h / D`, in pixels (one channel).
    pub horizontal: Image,
    /// Vertical disparity `f_v·b_v / D`, in pixels (one channel).
    pub vertical: Image,
    /// Pixels with a usable depth; disparities are zero elsewhere.
    pub valid: Mask,
}

pub fn disparity_maps(depth: &Image, cam: &CameraView, b_h: f64, b_v: f64) -> Result<DisparityMaps> {
    if depth.channels() != 1 {
        return Err(Error::Shape(format!("depth must have one channel, got {}", depth.channels())));
    }
    let (w, h) = (depth.width(), depth.height());
    let mut horizontal = Image::new(w, h, 1);
    let mut vertical = Image::new(w, h, 1);
    let mut valid = Mask::new(w, h, false);
    let num_h = cam.fx() * b_h;
    let num_v = cam.fy() * b_v;
    for y in 0..h {
        for x in 0..w {
            let d = depth.get(x, y, 0);
            if d > DEPTH_EPS && d.is_finite() {
                horizontal.set(x, y, 0, num_h / d);
                vertical.set(x, y, 0, num_v / d);
                valid.set(x, y, true);
            }
        }
    }
    Ok(DisparityMaps {
        horizontal,
        vertical,
        valid,
    })
}

/// Gradient of [`disparity_maps`] w.r.t. depth given gradients on both maps.
pub fn disparity_maps_backward(
    depth: &Image,
    cam: &CameraView,
    b_h: f64,
    b_v: f64,
    maps: &DisparityMaps,
    grad_h: &Image,
    grad_v: &Image,
) -> Image {
    let mut g = Image::new(depth.width(), depth.height(), 1);
    let num_h = cam.fx() * b_h;
    let num_v = cam.fy() * b_v;
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            if !maps.valid.get(x, y) {
                continue;
            }
            let d = depth.get(x, y, 0);
            let inv2 = 1.0 / (d * d);
            g.set(
                x,
                y,
                0,
                -(grad_h.get(x, y, 0) * num_h + grad_v.get(x, y, 0) * num_v) * inv2,
            );
        }
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarpAxis {
    Horizontal,
    Vertical,
}

/// Bilinear lookup geometry along one axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

#[inline]
fn tap(source: f64, len: usize) -> Option<Tap> {
    if !(source >= 0.0 && source <= (len - 1) as f64) {
        return None;
    }
    if len == 1 {
        return Some(Tap { lo: 0, hi: 0, frac: 0.0 });
    }
    let lo = (source.floor() as usize).min(len - 2);
    Some(Tap {
        lo,
        hi: lo + 1,
        frac: source - lo as f64,
    })
}

/// Resamples `img` at the disparity-displaced coordinates
/// `out(x, y) = img(x − d(x, y), y)` (horizontal) or `img(x, y − d(x, y))`
/// (vertical), with bilinear interpolation. Samples outside the image are
/// zero and masked out.
pub fn inverse_warp(img: &Image, disparity: &Image, axis: WarpAxis) -> Result<(Image, Mask)> {
    if img.width() != disparity.width() || img.height() != disparity.height() || disparity.channels() != 1 {
        return Err(Error::Shape("disparity must be a single-channel map of the image size".into()));
    }
    let (w, h, nc) = (img.width(), img.height(), img.channels());
    let mut out = Image::new(w, h, nc);
    let mut mask = Mask::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let d = disparity.get(x, y, 0);
            let t = match axis {
                WarpAxis::Horizontal => tap(x as f64 - d, w),
                WarpAxis::Vertical => tap(y as f64 - d, h),
            };
            let Some(t) = t else { continue };
            mask.set(x, y, true);
            let (p0, p1) = match axis {
                WarpAxis::Horizontal => ((t.lo, y), (t.hi, y)),
                WarpAxis::Vertical => ((x, t.lo), (x, t.hi)),
            };
            for c in 0..nc {
                let a = img.get(p0.0, p0.1, c);
                let b = img.get(p1.0, p1.1, c);
                out.set(x, y, c, a + t.frac * (b - a));
            }
        }
    }
    Ok((out, mask))
}

/// Adjoint of [`inverse_warp`]: returns gradients w.r.t. the source image
/// and the disparity map. Only pixels set in `mask` propagate.
pub fn inverse_warp_backward(
    img: &Image,
    disparity: &Image,
    axis: WarpAxis,
    mask: &Mask,
    grad_out: &Image,
) -> (Image, Image) {
    let (w, h, nc) = (img.width(), img.height(), img.channels());
    let mut g_img = Image::new(w, h, nc);
    let mut g_disp = Image::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let d = disparity.get(x, y, 0);
            let t = match axis {
                WarpAxis::Horizontal => tap(x as f64 - d, w),
                WarpAxis::Vertical => tap(y as f64 - d, h),
            };
            let Some(t) = t else { continue };
            let (p0, p1) = match axis {
                WarpAxis::Horizontal => ((t.lo, y), (t.hi, y)),
                WarpAxis::Vertical => ((x, t.lo), (x, t.hi)),
            };
            let mut gd = 0.0;
            for c in 0..nc {
                let go = grad_out.get(x, y, c);
                if go == 0.0 {
                    continue;
                }
                g_img.add_at(p0.0, p0.1, c, (1.0 - t.frac) * go);
                g_img.add_at(p1.0, p1.1, c, t.frac * go);
                // d(source)/d(disparity) = -1
                gd -= go * (img.get(p1.0, p1.1, c) - img.get(p0.0, p0.1, c));
            }
            g_disp.set(x, y, 0, gd);
        }
    }
    (g_img, g_disp)
}
