//! Depth-sorted splat compositing with a per-ray scattering medium, and its
//! adjoint.
//!
//! Per pixel, with `α_i = min(0.999, o_i·G_i)` (splats below 1/255 skipped)
//! and `T_i = Π_{j<i}(1 − α_j)`:
//!
//! ```text
//! I_obj = Σ T_i α_i c_i exp(−σ_attn z_i)
//! I_med = Σ T_i c_med (exp(−σ_bs z_{i−1}) − exp(−σ_bs z_i)) + T_N c_med exp(−σ_bs z_N),  z_0 = 0
//! D     = Σ T_i α_i z_i / (Σ T_i α_i + 1e−8)
//! ```
//!
//! Splats are binned into square tiles; a splat is listed in every tile its
//! cutoff circle touches. The circle radius is where `o·G` falls to 1/255 along
//! the major axis, so binning drops nothing the threshold would keep.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::medium::{alpha_adjust, alpha_adjust_backward, MediumField, MediumMap, MediumSample};
use crate::projective::{perspective_jacobian, CameraView, DEPTH_EPS, SCREEN_COV_FLOOR};
use crate::scene::{covariance_of, quat_to_matrix_backward, GaussianCloud};

pub const ALPHA_MAX: f64 = 0.999;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const DEPTH_NORM_EPS: f64 = 1e-8;
pub const TILE: usize = 16;

/// Per-Gaussian gradient: `[μ(3), log_scale(3), rotation(4), opacity_logit, color(3)]`.
pub type GaussianGrad = [f64; 14];

#[derive(Clone, Copy, Debug)]
pub enum AlphaMode<'a> {
    Raw,
    /// Opacities replaced by the depth-aware blend with weight `w`.
    /// `w == 0` is treated exactly as `Raw`.
    Adjusted { field: &'a MediumField, w: f64 },
}

impl AlphaMode<'_> {
    fn weight(&self) -> Option<(&MediumField, f64)> {
        match *self {
            AlphaMode::Adjusted { field, w } if w != 0.0 => Some((field, w)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderBundle {
    pub object: Image,
    pub medium: Image,
    pub color: Image,
    pub depth: Image,
    pub transmittance: Image,
    /// Accumulated weight `Σ T_i α_i`.
    pub alpha: Image,
}

/// A primitive projected into one view.
#[derive(Clone, Debug)]
pub struct Splat {
    pub index: usize,
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    pub radius: f64,
    p_cam: Vector3<f64>,
    view_dir: Vector3<f64>,
    base_opacity: f64,
}

/// Visible splats sorted by camera depth (ties by primitive index) and their
/// tile lists.
#[derive(Clone, Debug)]
pub struct SplatList {
    pub splats: Vec<Splat>,
    tiles_x: usize,
    tiles: Vec<Vec<u32>>,
}

impl SplatList {
    pub fn build(cloud: &GaussianCloud, cam: &CameraView, alpha_mode: AlphaMode<'_>) -> Result<Self> {
        let adjust = alpha_mode.weight();
        let center = cam.center();
        let mut splats: Vec<Splat> = Vec::new();
        for (index, g) in cloud.primitives().iter().enumerate() {
            let p_cam = cam.to_camera(&g.mu);
            if p_cam.z <= DEPTH_EPS {
                continue;
            }
            let j = perspective_jacobian(cam.fx(), cam.fy(), &p_cam);
            let t = j * cam.rotation;
            let c = t * covariance_of(g) * t.transpose();
            let cov = (c + c.transpose()) * 0.5 + Matrix2::identity() * SCREEN_COV_FLOOR;
            let det = cov.determinant();
            if !(det > 0.0) {
                continue;
            }
            let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
            let base_opacity = g.opacity();
            let view_dir = (g.mu - center).normalize();
            let opacity = match adjust {
                Some((field, w)) => alpha_adjust(field, base_opacity, p_cam.z, &view_dir, w),
                None => base_opacity,
            };
            if !opacity.is_finite() {
                return Err(Error::NonFinite(format!("opacity of primitive {index}")));
            }
            if opacity < ALPHA_MIN {
                continue;
            }
            let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
            let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
            let radius = (2.0 * (255.0 * opacity).ln()).max(0.0).sqrt() * lambda_max.sqrt();
            let mean = Vector2::new(
                cam.fx() * p_cam.x / p_cam.z + cam.cx(),
                cam.fy() * p_cam.y / p_cam.z + cam.cy(),
            );
            if mean.x + radius < 0.0
                || mean.y + radius < 0.0
                || mean.x - radius > (cam.width - 1) as f64
                || mean.y - radius > (cam.height - 1) as f64
            {
                continue;
            }
            splats.push(Splat {
                index,
                mean,
                cov,
                conic,
                depth: p_cam.z,
                opacity,
                color: [g.color.x, g.color.y, g.color.z],
                radius,
                p_cam,
                view_dir,
                base_opacity,
            });
        }
        splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

        let tiles_x = cam.width.div_ceil(TILE);
        let tiles_y = cam.height.div_ceil(TILE);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for (k, s) in splats.iter().enumerate() {
            let x0 = (s.mean.x - s.radius).ceil().max(0.0) as usize / TILE;
            let y0 = (s.mean.y - s.radius).ceil().max(0.0) as usize / TILE;
            let x1 = ((s.mean.x + s.radius).floor().min((cam.width - 1) as f64) as usize) / TILE;
            let y1 = ((s.mean.y + s.radius).floor().min((cam.height - 1) as f64) as usize) / TILE;
            for ty in y0..=y1 {
                for tx in x0..=x1 {
                    tiles[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
        Ok(Self {
            splats,
            tiles_x,
            tiles,
        })
    }

    fn tile_pixels(&self, t: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let xs = tx * TILE..((tx + 1) * TILE).min(width);
        let ys = ty * TILE..((ty + 1) * TILE).min(height);
        ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct PixelOut {
    obj: [f64; 3],
    med: [f64; 3],
    depth: f64,
    weight: f64,
    transmittance: f64,
}

#[derive(Clone, Copy, Debug)]
struct Contribution {
    /// Position in the tile list.
    slot: usize,
    alpha: f64,
    clipped: bool,
    t: f64,
    d: Vector2<f64>,
}

#[inline]
fn splat_alpha(s: &Splat, px: f64, py: f64) -> Option<(f64, bool, Vector2<f64>)> {
    let d = Vector2::new(px - s.mean.x, py - s.mean.y);
    let power = -0.5 * (s.conic[(0, 0)] * d.x * d.x + 2.0 * s.conic[(0, 1)] * d.x * d.y + s.conic[(1, 1)] * d.y * d.y);
    if power > 0.0 {
        return None;
    }
    let a = s.opacity * power.exp();
    if a < ALPHA_MIN {
        return None;
    }
    Some(if a > ALPHA_MAX { (ALPHA_MAX, true, d) } else { (a, false, d) })
}

fn composite_pixel(
    splats: &[Splat],
    list: &[u32],
    x: usize,
    y: usize,
    medium: Option<&MediumSample>,
    mut record: Option<&mut Vec<Contribution>>,
) -> PixelOut {
    let (px, py) = (x as f64, y as f64);
    let mut out = PixelOut::default();
    let mut t = 1.0;
    let mut z_acc = 0.0;
    let mut e_prev = [1.0; 3];
    for (slot, &k) in list.iter().enumerate() {
        let s = &splats[k as usize];
        let Some((alpha, clipped, d)) = splat_alpha(s, px, py) else { continue };
        let w = t * alpha;
        match medium {
            Some(m) => {
                for c in 0..3 {
                    let ea = (-m.sigma_attn[c] * s.depth).exp();
                    let eb = (-m.sigma_bs[c] * s.depth).exp();
                    out.obj[c] += w * s.color[c] * ea;
                    out.med[c] += t * m.c_med[c] * (e_prev[c] - eb);
                    e_prev[c] = eb;
                }
            }
            None => {
                for c in 0..3 {
                    out.obj[c] += w * s.color[c];
                }
            }
        }
        out.weight += w;
        z_acc += w * s.depth;
        if let Some(r) = record.as_deref_mut() {
            r.push(Contribution { slot, alpha, clipped, t, d });
        }
        t *= 1.0 - alpha;
    }
    if let Some(m) = medium {
        for c in 0..3 {
            out.med[c] += t * m.c_med[c] * e_prev[c];
        }
    }
    out.depth = z_acc / (out.weight + DEPTH_NORM_EPS);
    out.transmittance = t;
    out
}

pub fn render(
    cloud: &GaussianCloud,
    cam: &CameraView,
    medium: Option<&MediumMap>,
    alpha_mode: AlphaMode<'_>,
) -> Result<RenderBundle> {
    Ok(render_with_splats(cloud, cam, medium, alpha_mode)?.0)
}

/// Renders and also returns the projected splats needed by [`render_backward`].
pub fn render_with_splats(
    cloud: &GaussianCloud,
    cam: &CameraView,
    medium: Option<&MediumMap>,
    alpha_mode: AlphaMode<'_>,
) -> Result<(RenderBundle, SplatList)> {
    let (w, h) = (cam.width, cam.height);
    if let Some(m) = medium {
        if m.width != w || m.height != h {
            return Err(Error::Shape(format!(
                "medium map {}x{} does not match camera {w}x{h}",
                m.width, m.height
            )));
        }
        if let Some(i) = m.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("medium at pixel ({}, {})", i % w, i / w)));
        }
    }
    let list = SplatList::build(cloud, cam, alpha_mode)?;
    let tiles: Vec<Vec<(usize, usize, PixelOut)>> = (0..list.tiles.len())
        .into_par_iter()
        .map(|t| {
            list.tile_pixels(t, w, h)
                .map(|(x, y)| {
                    let m = medium.map(|m| m.at(x, y));
                    (x, y, composite_pixel(&list.splats, &list.tiles[t], x, y, m, None))
                })
                .collect()
        })
        .collect();
    let mut bundle = RenderBundle {
        object: Image::new(w, h, 3),
        medium: Image::new(w, h, 3),
        color: Image::new(w, h, 3),
        depth: Image::new(w, h, 1),
        transmittance: Image::new(w, h, 1),
        alpha: Image::new(w, h, 1),
    };
    for tile in tiles {
        for (x, y, p) in tile {
            for c in 0..3 {
                bundle.object.set(x, y, c, p.obj[c]);
                bundle.medium.set(x, y, c, p.med[c]);
                bundle.color.set(x, y, c, p.obj[c] + p.med[c]);
            }
            bundle.depth.set(x, y, 0, p.depth);
            bundle.transmittance.set(x, y, 0, p.transmittance);
            bundle.alpha.set(x, y, 0, p.weight);
        }
    }
    if !bundle.color.is_finite() || !bundle.depth.is_finite() {
        return Err(Error::NonFinite("rendered image".into()));
    }
    Ok((bundle, list))
}

/// Elementwise `I_obj + I_med`.
pub fn composite_full(object: &Image, medium: &Image) -> Result<Image> {
    object.add(medium)
}

/// Upstream gradients on the outputs of one render. Each field is optional;
/// a gradient on the composite must be added to both `object` and `medium`.
#[derive(Clone, Debug, Default)]
pub struct BundleGrad {
    pub object: Option<Image>,
    pub medium: Option<Image>,
    pub depth: Option<Image>,
    pub alpha: Option<Image>,
    pub transmittance: Option<Image>,
}

impl BundleGrad {
    pub fn is_empty(&self) -> bool {
        self.object.is_none()
            && self.medium.is_none()
            && self.depth.is_none()
            && self.alpha.is_none()
            && self.transmittance.is_none()
    }

    fn add_slot(slot: &mut Option<Image>, g: &Image) {
        match slot {
            Some(s) => s.add_assign(g),
            None => *slot = Some(g.clone()),
        }
    }

    pub fn add_object(&mut self, g: &Image) {
        Self::add_slot(&mut self.object, g);
    }

    pub fn add_medium(&mut self, g: &Image) {
        Self::add_slot(&mut self.medium, g);
    }

    /// Gradient on the composite `I_obj + I_med`.
    pub fn add_color(&mut self, g: &Image) {
        self.add_object(g);
        self.add_medium(g);
    }

    pub fn add_depth(&mut self, g: &Image) {
        Self::add_slot(&mut self.depth, g);
    }

    pub fn add_alpha(&mut self, g: &Image) {
        Self::add_slot(&mut self.alpha, g);
    }

    pub fn add_transmittance(&mut self, g: &Image) {
        Self::add_slot(&mut self.transmittance, g);
    }
}

/// Gradients produced by [`render_backward`].
#[derive(Clone, Debug)]
pub struct RenderGrad {
    /// Indexed like the cloud; zero for primitives outside the view.
    pub gaussians: Vec<GaussianGrad>,
    pub phi_alpha: Vec<f64>,
    /// Per-pixel gradients on the medium parameters (empty without a medium).
    pub medium: Vec<MediumSample>,
    /// Norm of the gradient on each primitive's projected center, in
    /// normalized device units.
    pub screen_grad: Vec<f64>,
    /// Whether the primitive was projected into the view.
    pub visible: Vec<bool>,
}

/// Screen-space gradient of one splat.
#[derive(Clone, Copy, Debug, Default)]
struct SplatGrad {
    opacity: f64,
    mean: [f64; 2],
    /// Gradient on conic entries `(q00, q01, q11)`, `q01` counted once.
    conic: [f64; 3],
    depth: f64,
    color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.opacity += o.opacity;
        self.depth += o.depth;
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
    }
}

fn image_or_zero(img: &Option<Image>, x: usize, y: usize, c: usize) -> f64 {
    img.as_ref().map_or(0.0, |i| i.get(x, y, c))
}

#[allow(clippy::too_many_arguments)]
fn backward_pixel(
    list: &SplatList,
    tile: &[u32],
    x: usize,
    y: usize,
    medium: Option<&MediumSample>,
    out: &PixelOut,
    g: &BundleGrad,
    scratch: &mut Vec<Contribution>,
    local: &mut [SplatGrad],
) -> MediumSample {
    scratch.clear();
    let fwd = composite_pixel(&list.splats, tile, x, y, medium, Some(scratch));
    debug_assert_eq!(fwd.transmittance, out.transmittance);
    let g_obj = [0, 1, 2].map(|c| image_or_zero(&g.object, x, y, c));
    let g_med = [0, 1, 2].map(|c| image_or_zero(&g.medium, x, y, c));
    let g_depth = image_or_zero(&g.depth, x, y, 0);
    let inv_w = 1.0 / (fwd.weight + DEPTH_NORM_EPS);
    let g_z = g_depth * inv_w;
    let g_w = image_or_zero(&g.alpha, x, y, 0) - g_depth * fwd.depth * inv_w;
    let mut adj_t = image_or_zero(&g.transmittance, x, y, 0);
    let mut dm = MediumSample::default();
    let mut weighted_eb = [0.0; 3];
    for con in scratch.iter().rev() {
        let s = &list.splats[tile[con.slot] as usize];
        let z = s.depth;
        let wk = con.t * con.alpha;
        let sg = &mut local[con.slot];
        let mut direct = g_w + g_z * z;
        let mut dz = g_z * wk;
        match medium {
            Some(m) => {
                for c in 0..3 {
                    let ea = (-m.sigma_attn[c] * z).exp();
                    let eb = (-m.sigma_bs[c] * z).exp();
                    let obj_term = g_obj[c] * s.color[c] * ea;
                    let med_term = g_med[c] * m.c_med[c] * eb;
                    direct += obj_term - med_term;
                    sg.color[c] += g_obj[c] * wk * ea;
                    dz += -obj_term * wk * m.sigma_attn[c] + med_term * wk * m.sigma_bs[c];
                    dm.sigma_attn[c] -= obj_term * wk * z;
                    dm.sigma_bs[c] += med_term * wk * z;
                    weighted_eb[c] += wk * eb;
                }
            }
            None => {
                for c in 0..3 {
                    direct += g_obj[c] * s.color[c];
                    sg.color[c] += g_obj[c] * wk;
                }
            }
        }
        let d_alpha = con.t * (direct - adj_t);
        adj_t = direct * con.alpha + adj_t * (1.0 - con.alpha);
        sg.depth += dz;
        if con.clipped {
            continue;
        }
        // α = o·exp(power), power = −½ dᵀQd.
        let gauss = con.alpha / s.opacity;
        sg.opacity += d_alpha * gauss;
        let dp = d_alpha * con.alpha;
        let (dx, dy) = (con.d.x, con.d.y);
        let q = &s.conic;
        sg.mean[0] += dp * (q[(0, 0)] * dx + q[(0, 1)] * dy);
        sg.mean[1] += dp * (q[(0, 1)] * dx + q[(1, 1)] * dy);
        sg.conic[0] -= 0.5 * dp * dx * dx;
        sg.conic[1] -= dp * dx * dy;
        sg.conic[2] -= 0.5 * dp * dy * dy;
    }
    if medium.is_some() {
        for c in 0..3 {
            dm.c_med[c] = g_med[c] * (1.0 - weighted_eb[c]);
        }
    }
    dm
}

/// Adjoint of [`render_with_splats`]. `bundle` and `list` must come from the
/// forward call with the same inputs.
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &CameraView,
    medium: Option<&MediumMap>,
    alpha_mode: AlphaMode<'_>,
    list: &SplatList,
    bundle: &RenderBundle,
    grad: &BundleGrad,
) -> RenderGrad {
    let (w, h) = (cam.width, cam.height);
    let n = cloud.len();
    let phi_len = match alpha_mode {
        AlphaMode::Adjusted { field, .. } => field.phi_alpha.param_count(),
        AlphaMode::Raw => 0,
    };
    let mut result = RenderGrad {
        gaussians: vec![[0.0; 14]; n],
        phi_alpha: vec![0.0; phi_len],
        medium: if medium.is_some() {
            vec![MediumSample::default(); w * h]
        } else {
            Vec::new()
        },
        screen_grad: vec![0.0; n],
        visible: vec![false; n],
    };
    for s in &list.splats {
        result.visible[s.index] = true;
    }
    if grad.is_empty() {
        return result;
    }

    type TileGrad = (Vec<SplatGrad>, Vec<(usize, MediumSample)>);
    let per_tile: Vec<TileGrad> = (0..list.tiles.len())
        .into_par_iter()
        .map(|t| {
            let tile = &list.tiles[t];
            let mut local = vec![SplatGrad::default(); tile.len()];
            let mut med = Vec::new();
            let mut scratch = Vec::new();
            if tile.is_empty() && medium.is_none() {
                return (local, med);
            }
            for (x, y) in list.tile_pixels(t, w, h) {
                let m = medium.map(|m| m.at(x, y));
                let out = PixelOut {
                    transmittance: bundle.transmittance.get(x, y, 0),
                    ..Default::default()
                };
                let dm = backward_pixel(list, tile, x, y, m, &out, grad, &mut scratch, &mut local);
                if medium.is_some() {
                    med.push((y * w + x, dm));
                }
            }
            (local, med)
        })
        .collect();

    let mut splat_grads = vec![SplatGrad::default(); list.splats.len()];
    for (t, (local, med)) in per_tile.into_iter().enumerate() {
        for (slot, sg) in local.iter().enumerate() {
            splat_grads[list.tiles[t][slot] as usize].add(sg);
        }
        for (i, dm) in med {
            result.medium[i] = dm;
        }
    }

    let adjust = alpha_mode.weight();
    let center = cam.center();
    for (s, sg) in list.splats.iter().zip(&splat_grads) {
        let g = cloud.get(s.index);
        let out = &mut result.gaussians[s.index];
        let p = s.p_cam;
        let (fx, fy) = (cam.fx(), cam.fy());
        let iz = 1.0 / p.z;

        // Screen covariance through the conic: dΣ' = −Q dQ Q.
        let dq = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
        let dcov2 = -(s.conic * dq * s.conic);
        let j = perspective_jacobian(fx, fy, &p);
        let t = j * cam.rotation;
        let sigma = covariance_of(g);
        let dsigma: Matrix3<f64> = t.transpose() * dcov2 * t;
        let dt = 2.0 * dcov2 * t * sigma;
        let dj = dt * cam.rotation.transpose();

        let mut dp = Vector3::zeros();
        // Jacobian entries: J00 = fx/z, J02 = −fx x/z², J11 = fy/z, J12 = −fy y/z².
        dp.x += dj[(0, 2)] * (-fx * iz * iz);
        dp.y += dj[(1, 2)] * (-fy * iz * iz);
        dp.z += dj[(0, 0)] * (-fx * iz * iz)
            + dj[(0, 2)] * (2.0 * fx * p.x * iz * iz * iz)
            + dj[(1, 1)] * (-fy * iz * iz)
            + dj[(1, 2)] * (2.0 * fy * p.y * iz * iz * iz);
        // Projected center.
        dp.x += sg.mean[0] * fx * iz;
        dp.y += sg.mean[1] * fy * iz;
        dp.z += -sg.mean[0] * fx * p.x * iz * iz - sg.mean[1] * fy * p.y * iz * iz;
        dp.z += sg.depth;

        let mut d_base = sg.opacity;
        let mut dmu = Vector3::zeros();
        if let Some((field, wt)) = adjust {
            let (da, dz, dv) =
                alpha_adjust_backward(field, s.base_opacity, p.z, &s.view_dir, wt, sg.opacity, &mut result.phi_alpha);
            d_base = da;
            dp.z += dz;
            let r = (g.mu - center).norm();
            let v = s.view_dir;
            dmu += (dv - v * v.dot(&dv)) / r;
        }
        dmu += cam.rotation.transpose() * dp;

        // Σ = M Mᵀ, M = R_q S.
        let rq = g.rotation_matrix();
        let scale = g.scale();
        let m = rq * Matrix3::from_diagonal(&scale);
        let dm = 2.0 * dsigma * m;
        let drq = dm * Matrix3::from_diagonal(&scale);
        let ds = rq.transpose() * dm;
        let dq = quat_to_matrix_backward(&g.rotation, &drq);

        out[0] = dmu.x;
        out[1] = dmu.y;
        out[2] = dmu.z;
        for i in 0..3 {
            out[3 + i] = ds[(i, i)] * scale[i];
        }
        out[6..10].copy_from_slice(&dq);
        out[10] = d_base * s.base_opacity * (1.0 - s.base_opacity);
        out[11..14].copy_from_slice(&sg.color);

        let ndc = Vector2::new(sg.mean[0] * 0.5 * w as f64, sg.mean[1] * 0.5 * h as f64);
        result.screen_grad[s.index] = ndc.norm();
    }
    result
}

/// Object image with attenuation removed and the medium discarded.
pub fn render_restored(cloud: &GaussianCloud, cam: &CameraView, medium: &MediumMap) -> Result<Image> {
    let mut clear = medium.clone();
    for s in &mut clear.samples {
        s.sigma_attn = [0.0; 3];
    }
    Ok(render(cloud, cam, Some(&clear), AlphaMode::Raw)?.object)
}
