//! Forward and adjoint evaluation of the full training objective, the flat
//! parameter layout, and central-difference gradient checking.

use nalgebra::{Matrix3x4, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{
    epipolar_loss, photometric_loss, residual_loss, total_loss, trinocular_losses, ActiveTerms, EpiSample,
    LossReport, LossTerms, LossWeights, ResidualSample, TrinocularInputs,
};
use crate::medium::{medium_map_backward, MediumField, MediumMap, MediumSample};
use crate::projective::{
    disparity_maps, disparity_maps_backward, inverse_warp, inverse_warp_backward, make_virtual_poses,
    project_point, select_candidates, triangulate_point, CameraView, WarpAxis,
};
use crate::render::{
    render_backward, render_with_splats, AlphaMode, BundleGrad, RenderBundle, RenderGrad, SplatList, ALPHA_MAX,
    ALPHA_MIN,
};
use crate::scene::{GaussianCloud, GaussianPrimitive};

/// Parameters per primitive: `μ(3), log_scale(3), rotation(4), opacity_logit, color(3)`.
pub const GAUSSIAN_PARAMS: usize = 14;

/// Opacity above which a primitive may seed a triangulated depth prior.
pub const DEFAULT_TAU_ALPHA: f64 = 0.8;
/// Maximum number of triangulated depth priors per step.
pub const DEFAULT_CANDIDATE_CAP: usize = 4096;

/// Everything that is optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cloud: GaussianCloud,
    pub field: MediumField,
}

/// Offsets of the flat parameter vector: all primitives first, then the
/// medium network, then the opacity network (each network layer by layer,
/// weights row-major followed by biases).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub gaussians: usize,
    pub phi_med: usize,
    pub phi_alpha: usize,
}

impl ParamLayout {
    pub fn total(&self) -> usize {
        self.gaussians * GAUSSIAN_PARAMS + self.phi_med + self.phi_alpha
    }

    pub fn phi_med_offset(&self) -> usize {
        self.gaussians * GAUSSIAN_PARAMS
    }

    pub fn phi_alpha_offset(&self) -> usize {
        self.phi_med_offset() + self.phi_med
    }

    /// Primitive owning flat index `k`, if any.
    pub fn gaussian_of(&self, k: usize) -> Option<usize> {
        (k < self.phi_med_offset()).then_some(k / GAUSSIAN_PARAMS)
    }

    /// Human-readable name of flat index `k`.
    pub fn describe(&self, k: usize) -> String {
        const NAMES: [&str; GAUSSIAN_PARAMS] = [
            "mu.x", "mu.y", "mu.z", "log_scale.x", "log_scale.y", "log_scale.z", "rot.w", "rot.x", "rot.y",
            "rot.z", "opacity_logit", "color.r", "color.g", "color.b",
        ];
        if let Some(i) = self.gaussian_of(k) {
            format!("gaussian[{i}].{}", NAMES[k % GAUSSIAN_PARAMS])
        } else if k < self.phi_alpha_offset() {
            format!("phi_med[{}]", k - self.phi_med_offset())
        } else {
            format!("phi_alpha[{}]", k - self.phi_alpha_offset())
        }
    }
}

impl Model {
    pub fn new(cloud: GaussianCloud, field: MediumField) -> Self {
        Self { cloud, field }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            gaussians: self.cloud.len(),
            phi_med: self.field.phi_med.param_count(),
            phi_alpha: self.field.phi_alpha.param_count(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.layout().total());
        for g in self.cloud.primitives() {
            p.extend(g.mu.iter());
            p.extend(g.log_scale.iter());
            p.extend(g.rotation);
            p.push(g.opacity_logit);
            p.extend(g.color.iter());
        }
        p.extend(self.field.phi_med.params());
        p.extend(self.field.phi_alpha.params());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        let layout = self.layout();
        if p.len() != layout.total() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, model needs {}",
                p.len(),
                layout.total()
            )));
        }
        for (g, c) in self.cloud.primitives_mut().iter_mut().zip(p.chunks_exact(GAUSSIAN_PARAMS)) {
            g.mu = Vector3::new(c[0], c[1], c[2]);
            g.log_scale = Vector3::new(c[3], c[4], c[5]);
            g.rotation = [c[6], c[7], c[8], c[9]];
            g.opacity_logit = c[10];
            g.color = Vector3::new(c[11], c[12], c[13]);
        }
        let (a, b) = (layout.phi_med_offset(), layout.phi_alpha_offset());
        self.field.phi_med.set_params(&p[a..b]);
        self.field.phi_alpha.set_params(&p[b..]);
        Ok(())
    }
}

/// Virtual horizontal and vertical cameras for sampled baselines. The rig
/// centers sit at `+b_h` along the camera x axis and `+b_v` along its y
/// axis, so a point at depth `D` appears `f·b/D` pixels toward negative
/// coordinates and the warp samples the virtual image at `x − d`.
pub fn stereo_rig(cam: &CameraView, b_h: f64, b_v: f64) -> (CameraView, CameraView) {
    make_virtual_poses(cam, -b_h, -b_v)
}

/// Which scalar to evaluate and differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// The weighted sum of active terms.
    Total,
    Photo,
    Tri,
    Epi,
    Res,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Total,
        Objective::Photo,
        Objective::Tri,
        Objective::Epi,
        Objective::Res,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Total => "total",
            Objective::Photo => "photo",
            Objective::Tri => "tri",
            Objective::Epi => "epi",
            Objective::Res => "res",
        }
    }
}

/// Per-step inputs that do not depend on the parameters.
#[derive(Clone, Debug)]
pub struct StepInputs<'a> {
    /// Camera at the current training resolution.
    pub camera: &'a CameraView,
    pub gt: &'a Image,
    pub baselines: (f64, f64),
    /// Blend weight of the depth-aware opacity (0 disables it).
    pub alpha_w: f64,
    pub active: ActiveTerms,
    pub weights: LossWeights,
    pub lambda_epi: f64,
    pub tau_alpha: f64,
    pub candidate_cap: usize,
    /// Seeds the candidate subsampling when more than `candidate_cap` qualify.
    pub sample_seed: u64,
    /// Reported in divergence errors.
    pub step: usize,
}

impl<'a> StepInputs<'a> {
    pub fn new(camera: &'a CameraView, gt: &'a Image) -> Self {
        Self {
            camera,
            gt,
            baselines: (0.0, 0.0),
            alpha_w: 0.0,
            active: ActiveTerms::default(),
            weights: LossWeights::default(),
            lambda_epi: 0.0,
            tau_alpha: DEFAULT_TAU_ALPHA,
            candidate_cap: DEFAULT_CANDIDATE_CAP,
            sample_seed: 0,
            step: 0,
        }
    }
}

/// Quantities treated as constants during one step: the stop-gradient image,
/// the triangulated depth priors and the residual pixel assignments.
/// Reusing them makes the objective a smooth function of the parameters,
/// which finite differences require.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrozenRefs {
    pub reference: Option<Image>,
    pub epi: Option<Vec<EpiSample>>,
    /// `(primitive, x, y)`; the sampled depth `z` is recomputed.
    pub residual: Option<Vec<(usize, usize, usize)>>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub report: LossReport,
    /// Value of the requested objective.
    pub value: f64,
    /// Flat gradient of `value` in [`ParamLayout`] order; empty when not requested.
    pub grad: Vec<f64>,
    /// Central-view screen-space gradient norms, for densification.
    pub screen_grad: Vec<f64>,
    pub visible: Vec<bool>,
    /// Stereo axes with enough warp coverage.
    pub stereo_axes: [bool; 2],
    pub refs: FrozenRefs,
    pub bundle: RenderBundle,
}

fn check(step: usize, term: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            term: term.to_string(),
        })
    }
}

/// Non-finite values raised inside a renderer become a divergence of `term`.
fn tag(step: usize, term: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged {
            step,
            term: term.to_string(),
        },
        e => e,
    }
}

fn scaled(img: &Image, s: f64) -> Image {
    img.map(|v| v * s)
}

fn nearest_pixel(cam: &CameraView, p: &Vector2<f64>) -> Option<(usize, usize)> {
    let (x, y) = (p.x.round(), p.y.round());
    (x >= 0.0 && y >= 0.0 && (x as usize) < cam.width && (y as usize) < cam.height).then(|| (x as usize, y as usize))
}

/// Triangulated depth priors for candidate primitives seen by all three views.
pub fn epipolar_samples(
    cloud: &GaussianCloud,
    cam: &CameraView,
    rig: (&CameraView, &CameraView),
    tau_alpha: f64,
    cap: usize,
    seed: u64,
) -> Vec<EpiSample> {
    let mut cand = select_candidates(cloud, &[cam, rig.0, rig.1], tau_alpha);
    if cand.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, cand.len(), cap).into_vec();
        picked.sort_unstable();
        cand = picked.into_iter().map(|k| cand[k]).collect();
    }
    let (m_h, m_v): (Matrix3x4<f64>, Matrix3x4<f64>) = (rig.0.projection_matrix(), rig.1.projection_matrix());
    let mut out = Vec::with_capacity(cand.len());
    for i in cand {
        let mu = cloud.get(i).mu;
        let (xh, xv) = (project_point(rig.0, &mu).pixel, project_point(rig.1, &mu).pixel);
        let Ok(x) = triangulate_point(&xh, &xv, &m_h, &m_v) else {
            continue;
        };
        let p = project_point(cam, &x);
        if !p.in_front {
            continue;
        }
        if let Some((px, py)) = nearest_pixel(cam, &p.pixel) {
            out.push(EpiSample {
                x: px,
                y: py,
                target: p.depth,
            });
        }
    }
    out
}

/// Central-view pixel assignments of every primitive whose center projects
/// into the image.
pub fn residual_assignments(cloud: &GaussianCloud, cam: &CameraView) -> Vec<(usize, usize, usize)> {
    cloud
        .primitives()
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let p = project_point(cam, &g.mu);
            if !p.in_front {
                return None;
            }
            nearest_pixel(cam, &p.pixel).map(|(x, y)| (i, x, y))
        })
        .collect()
}

struct ViewRender<'a> {
    cam: &'a CameraView,
    bundle: RenderBundle,
    list: SplatList,
    grad: BundleGrad,
}

/// Evaluates the objective and, when `want_grad`, its gradient with respect
/// to every model parameter. Inactive terms are skipped unless they are the
/// requested objective.
pub fn evaluate_step(
    model: &Model,
    inputs: &StepInputs<'_>,
    refs: Option<&FrozenRefs>,
    objective: Objective,
    want_grad: bool,
) -> Result<StepOutput> {
    let cam = inputs.camera;
    let step = inputs.step;
    if inputs.gt.width() != cam.width || inputs.gt.height() != cam.height || inputs.gt.channels() != 3 {
        return Err(Error::Shape("ground truth does not match the camera".into()));
    }
    let field = &model.field;
    let cloud = &model.cloud;
    let weights = &inputs.weights;
    let mode = if inputs.alpha_w != 0.0 {
        AlphaMode::Adjusted {
            field,
            w: inputs.alpha_w,
        }
    } else {
        AlphaMode::Raw
    };
    let coef = |o: Objective, active: bool, lambda: f64| match objective {
        Objective::Total => {
            if active {
                lambda
            } else {
                0.0
            }
        }
        _ if objective == o => 1.0,
        _ => 0.0,
    };
    let c_photo = coef(Objective::Photo, true, 1.0);
    let c_tri = coef(Objective::Tri, inputs.active.tri, weights.lambda_tri);
    let c_epi = coef(Objective::Epi, inputs.active.epi, inputs.lambda_epi);
    let c_res = coef(Objective::Res, inputs.active.res, weights.lambda_res);
    let do_tri = inputs.active.tri || c_tri != 0.0;
    let do_epi = inputs.active.epi || c_epi != 0.0;
    let do_res = inputs.active.res || c_res != 0.0;

    let map = MediumMap::from_field(field, cam).map_err(|_| Error::Diverged {
        step,
        term: "medium".into(),
    })?;
    let (bundle_c, list_c) = render_with_splats(cloud, cam, Some(&map), mode).map_err(tag(step, "render"))?;
    check(step, "render", bundle_c.color.data())?;
    check(step, "render depth", bundle_c.depth.data())?;
    let mut central = ViewRender {
        cam,
        bundle: bundle_c,
        list: list_c,
        grad: BundleGrad::default(),
    };
    let reference = match refs.and_then(|r| r.reference.clone()) {
        Some(r) => r,
        None => central.bundle.color.clone(),
    };
    let mut terms = LossTerms::default();
    let mut new_refs = FrozenRefs {
        reference: Some(reference.clone()),
        ..Default::default()
    };

    let photo = photometric_loss(&central.bundle.color, inputs.gt, &reference, weights.lambda_s, weights.eps)?;
    check(step, "photo", &[photo.value])?;
    terms.photo = photo.value;
    terms.r_l1 = photo.r_l1;
    terms.r_ssim = photo.r_ssim;
    if c_photo != 0.0 {
        check(step, "photo gradient", photo.grad.data())?;
        central.grad.add_color(&scaled(&photo.grad, c_photo));
    }

    let (b_h, b_v) = inputs.baselines;
    let rig = (do_tri || do_epi).then(|| stereo_rig(cam, b_h, b_v));
    let mut side: Vec<ViewRender> = Vec::new();
    let mut stereo_axes = [false; 2];
    if do_tri {
        let (cam_h, cam_v) = rig.as_ref().expect("rig built");
        let (bh, lh) = render_with_splats(cloud, cam_h, Some(&map), mode).map_err(tag(step, "tri render"))?;
        let (bv, lv) = render_with_splats(cloud, cam_v, Some(&map), mode).map_err(tag(step, "tri render"))?;
        check(step, "tri render", bh.object.data())?;
        check(step, "tri render", bv.object.data())?;
        let depth = &central.bundle.depth;
        let maps = disparity_maps(depth, cam, b_h, b_v)?;
        let (wh, mh) = inverse_warp(&bh.object, &maps.horizontal, WarpAxis::Horizontal)?;
        let (wv, mv) = inverse_warp(&bv.object, &maps.vertical, WarpAxis::Vertical)?;
        let (mh, mv) = (mh.and(&maps.valid), mv.and(&maps.valid));
        let tri = trinocular_losses(&TrinocularInputs {
            object_c: &central.bundle.object,
            medium_c: &central.bundle.medium,
            warped_h: &wh,
            mask_h: &mh,
            warped_v: &wv,
            mask_v: &mv,
            gt: inputs.gt,
            d_h: &maps.horizontal,
            d_v: &maps.vertical,
            depth_valid: &maps.valid,
            reference: &reference,
            eps: weights.eps,
            gamma: weights.gamma,
        })?;
        check(step, "tri", &[tri.tri])?;
        stereo_axes = tri.axis_active;
        terms.obj_stereo = tri.obj_stereo;
        terms.full_stereo = tri.full_stereo;
        terms.smooth = tri.smooth;
        terms.tri = tri.tri;
        let mut gh_view = BundleGrad::default();
        let mut gv_view = BundleGrad::default();
        if c_tri != 0.0 {
            for g in [
                &tri.grad_object_c,
                &tri.grad_medium_c,
                &tri.grad_warped_h,
                &tri.grad_warped_v,
                &tri.grad_d_h,
                &tri.grad_d_v,
            ] {
                check(step, "tri gradient", g.data())?;
            }
            let (g_src_h, g_dh) =
                inverse_warp_backward(&bh.object, &maps.horizontal, WarpAxis::Horizontal, &mh, &tri.grad_warped_h);
            let (g_src_v, g_dv) =
                inverse_warp_backward(&bv.object, &maps.vertical, WarpAxis::Vertical, &mv, &tri.grad_warped_v);
            let mut g_disp_h = tri.grad_d_h.clone();
            g_disp_h.add_assign(&g_dh);
            let mut g_disp_v = tri.grad_d_v.clone();
            g_disp_v.add_assign(&g_dv);
            let g_depth = disparity_maps_backward(depth, cam, b_h, b_v, &maps, &g_disp_h, &g_disp_v);
            central.grad.add_object(&scaled(&tri.grad_object_c, c_tri));
            central.grad.add_medium(&scaled(&tri.grad_medium_c, c_tri));
            central.grad.add_depth(&scaled(&g_depth, c_tri));
            gh_view.add_object(&scaled(&g_src_h, c_tri));
            gv_view.add_object(&scaled(&g_src_v, c_tri));
        }
        side.push(ViewRender {
            cam: cam_h,
            bundle: bh,
            list: lh,
            grad: gh_view,
        });
        side.push(ViewRender {
            cam: cam_v,
            bundle: bv,
            list: lv,
            grad: gv_view,
        });
    }

    if do_epi {
        let samples = match refs.and_then(|r| r.epi.clone()) {
            Some(s) => s,
            None => {
                let (cam_h, cam_v) = rig.as_ref().expect("rig built");
                epipolar_samples(
                    cloud,
                    cam,
                    (cam_h, cam_v),
                    inputs.tau_alpha,
                    inputs.candidate_cap,
                    inputs.sample_seed,
                )
            }
        };
        let (le, gd, gi) = epipolar_loss(&central.bundle.depth, &samples, &central.bundle.color);
        check(step, "epi", &[le])?;
        terms.epi = le;
        if c_epi != 0.0 {
            check(step, "epi gradient", gd.data())?;
            check(step, "epi gradient", gi.data())?;
            central.grad.add_depth(&scaled(&gd, c_epi));
            central.grad.add_color(&scaled(&gi, c_epi));
        }
        new_refs.epi = Some(samples);
    }

    let mut z_grads: Vec<(usize, f64)> = Vec::new();
    if do_res {
        let assign = match refs.and_then(|r| r.residual.clone()) {
            Some(a) => a,
            None => residual_assignments(cloud, cam),
        };
        let samples: Vec<ResidualSample> = assign
            .iter()
            .map(|&(index, x, y)| ResidualSample {
                index,
                x,
                y,
                z: cam.to_camera(&cloud.get(index).mu).z,
            })
            .collect();
        let (lr, gd, gz) = residual_loss(&central.bundle.depth, &samples);
        check(step, "res", &[lr])?;
        terms.res = lr;
        if c_res != 0.0 {
            central.grad.add_depth(&scaled(&gd, c_res));
            z_grads = samples.iter().zip(&gz).map(|(s, g)| (s.index, g * c_res)).collect();
        }
        new_refs.residual = Some(assign);
    }

    let report = total_loss(&terms, inputs.active, weights, inputs.lambda_epi);
    check(step, "total", &[report.total])?;
    let value = match objective {
        Objective::Total => report.total,
        Objective::Photo => terms.photo,
        Objective::Tri => terms.tri,
        Objective::Epi => terms.epi,
        Objective::Res => terms.res,
    };

    let layout = model.layout();
    let n = cloud.len();
    let mut grad = Vec::new();
    let mut screen_grad = vec![0.0; n];
    let mut visible = vec![false; n];
    if want_grad {
        grad = vec![0.0; layout.total()];
        let mut medium_px = vec![MediumSample::default(); cam.width * cam.height];
        let mut views = vec![central];
        views.extend(side);
        for (k, v) in views.iter().enumerate() {
            if v.grad.is_empty() {
                continue;
            }
            let rg: RenderGrad = render_backward(cloud, v.cam, Some(&map), mode, &v.list, &v.bundle, &v.grad);
            for (i, g) in rg.gaussians.iter().enumerate() {
                let dst = &mut grad[i * GAUSSIAN_PARAMS..(i + 1) * GAUSSIAN_PARAMS];
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
            let off = layout.phi_alpha_offset();
            for (d, s) in grad[off..].iter_mut().zip(&rg.phi_alpha) {
                *d += s;
            }
            for (acc, s) in medium_px.iter_mut().zip(&rg.medium) {
                for c in 0..3 {
                    acc.sigma_attn[c] += s.sigma_attn[c];
                    acc.sigma_bs[c] += s.sigma_bs[c];
                    acc.c_med[c] += s.c_med[c];
                }
            }
            if k == 0 {
                screen_grad = rg.screen_grad;
                visible = rg.visible;
            }
        }
        let g_med = medium_map_backward(field, cam, &medium_px);
        let off = layout.phi_med_offset();
        for (d, s) in grad[off..off + layout.phi_med].iter_mut().zip(&g_med) {
            *d += s;
        }
        let r2 = cam.rotation.row(2).transpose();
        for (i, gz) in z_grads {
            for a in 0..3 {
                grad[i * GAUSSIAN_PARAMS + a] += gz * r2[a];
            }
        }
        check(step, "gradient", &grad)?;
        // Restore the central bundle for the caller.
        central = views.swap_remove(0);
    }
    Ok(StepOutput {
        report,
        value,
        grad,
        screen_grad,
        visible,
        stereo_axes,
        refs: new_refs,
        bundle: central.bundle,
    })
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub objective: Objective,
    /// Parameters compared under the strict tolerance.
    pub checked: usize,
    /// Parameters next to an opacity clipping threshold, compared loosely.
    pub near_kink: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub max_rel_error_near_kink: f64,
    pub worst_parameter: String,
    pub tolerance: f64,
    pub kink_tolerance: f64,
    pub passed: bool,
}

/// Relative error with a `1e-8` floor on the denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Primitives whose opacity at some pixel of `cams` lies within `margin` of
/// the skip threshold or the clip level, where the objective has kinks.
pub fn primitives_near_kinks(model: &Model, cams: &[&CameraView], alpha_w: f64, margin: f64) -> Vec<bool> {
    let mut flags = vec![false; model.cloud.len()];
    let mode = if alpha_w != 0.0 {
        AlphaMode::Adjusted {
            field: &model.field,
            w: alpha_w,
        }
    } else {
        AlphaMode::Raw
    };
    for cam in cams {
        let Ok(list) = SplatList::build(&model.cloud, cam, mode) else {
            continue;
        };
        for s in &list.splats {
            if flags[s.index] {
                continue;
            }
            'px: for y in 0..cam.height {
                for x in 0..cam.width {
                    let d = Vector2::new(x as f64, y as f64) - s.mean;
                    let q = s.conic;
                    let e = 0.5 * (q[(0, 0)] * d.x * d.x + 2.0 * q[(0, 1)] * d.x * d.y + q[(1, 1)] * d.y * d.y);
                    let a = s.opacity * (-e).exp();
                    if (a - ALPHA_MIN).abs() < margin || (a - ALPHA_MAX).abs() < margin {
                        flags[s.index] = true;
                        break 'px;
                    }
                }
            }
        }
    }
    flags
}

pub struct FdOptions {
    pub step: f64,
    pub tolerance: f64,
    pub kink_tolerance: f64,
    /// Opacity distance from a threshold that flags a primitive.
    pub kink_margin: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            kink_tolerance: 1e-3,
            kink_margin: 1e-4,
        }
    }
}

/// Smallest step the finite-difference check refines to.
pub const MIN_FD_STEP: f64 = 1e-7;

/// Compares the analytic gradient with central differences
/// `(f(θ+h) − f(θ−h)) / 2h` on the flat indices `subset`, holding the
/// step's frozen references fixed.
///
/// Each entry starts at `opts.step`. When the estimate at `h/2` disagrees
/// with the one at `h` beyond rounding error, the stencil straddles a
/// non-smooth point (skip threshold, opacity clip, an L1 residual crossing
/// zero, a bilinear cell edge) and the step is halved, down to
/// [`MIN_FD_STEP`]. The analytic gradient plays no part in choosing `h`.
pub fn fd_check(
    model: &Model,
    inputs: &StepInputs<'_>,
    objective: Objective,
    subset: &[usize],
    opts: &FdOptions,
) -> Result<FdReport> {
    let base = evaluate_step(model, inputs, None, objective, true)?;
    let refs = base.refs.clone();
    let layout = model.layout();
    let mut cams = vec![inputs.camera.clone()];
    if inputs.active.tri || inputs.active.epi || matches!(objective, Objective::Tri | Objective::Epi) {
        let (h, v) = stereo_rig(inputs.camera, inputs.baselines.0, inputs.baselines.1);
        cams.push(h);
        cams.push(v);
    }
    let cam_refs: Vec<&CameraView> = cams.iter().collect();
    let kinks = primitives_near_kinks(model, &cam_refs, inputs.alpha_w, opts.kink_margin);
    let theta = model.params();
    let mut work = model.clone();
    let mut report = FdReport {
        objective,
        checked: 0,
        near_kink: 0,
        max_rel_error: 0.0,
        mean_rel_error: 0.0,
        max_rel_error_near_kink: 0.0,
        worst_parameter: String::new(),
        tolerance: opts.tolerance,
        kink_tolerance: opts.kink_tolerance,
        passed: true,
    };
    let mut sum = 0.0;
    for &k in subset {
        if k >= theta.len() {
            return Err(Error::InvalidArgument(format!("parameter index {k} out of range")));
        }
        let mut eval = |delta: f64| -> Result<f64> {
            let mut p = theta.clone();
            p[k] += delta;
            work.set_params(&p)?;
            Ok(evaluate_step(&work, inputs, Some(&refs), objective, false)?.value)
        };
        // Central difference plus a bound on its rounding error.
        let mut central = |h: f64| -> Result<(f64, f64)> {
            let (fp, fm) = (eval(h)?, eval(-h)?);
            Ok(((fp - fm) / (2.0 * h), 4.0 * f64::EPSILON * fp.abs().max(fm.abs()) / h))
        };
        let near = layout.gaussian_of(k).is_some_and(|i| kinks[i]);
        let tol = if near { opts.kink_tolerance } else { opts.tolerance };
        let mut h = opts.step;
        let (mut fd, _) = central(h)?;
        while h / 2.0 >= MIN_FD_STEP {
            let (half, noise) = central(h / 2.0)?;
            if (fd - half).abs() <= noise + 0.25 * tol * fd.abs().max(half.abs()).max(1e-8) {
                break;
            }
            h /= 2.0;
            fd = half;
        }
        let err = relative_error(base.grad[k], fd);
        log::trace!(
            "{}: analytic {:.6e} fd {:.6e} (h {:.1e}) rel {:.2e}",
            layout.describe(k),
            base.grad[k],
            fd,
            h,
            err
        );
        if near {
            report.near_kink += 1;
            report.max_rel_error_near_kink = report.max_rel_error_near_kink.max(err);
        } else {
            report.checked += 1;
            sum += err;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst_parameter = layout.describe(k);
            }
        }
    }
    report.mean_rel_error = if report.checked > 0 { sum / report.checked as f64 } else { 0.0 };
    report.passed =
        report.max_rel_error < opts.tolerance && report.max_rel_error_near_kink < opts.kink_tolerance;
    Ok(report)
}

/// Random medium field with small networks and non-zero weights.
fn random_field(rng: &mut ChaCha8Rng) -> Result<MediumField> {
    let mut f = MediumField::new(
        &crate::medium::MediumConfig {
            hidden_width: 6,
            hidden_layers: 1,
            direction_freqs: 1,
        },
        5.0,
        3,
    )?;
    let p: Vec<f64> = (0..f.phi_med.param_count()).map(|_| rng.random_range(-0.6..0.6)).collect();
    f.phi_med.set_params(&p);
    let p: Vec<f64> = (0..f.phi_alpha.param_count()).map(|_| rng.random_range(-0.6..0.6)).collect();
    f.phi_alpha.set_params(&p);
    Ok(f)
}

/// A small random scene for gradient checks: `gaussians` primitives near
/// the origin seen by a `size`×`size` camera, random networks and a
/// textured target image.
pub fn micro_scene(seed: u64, gaussians: usize, size: usize) -> Result<(Model, CameraView, Image)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = (0..gaussians)
        .map(|_| {
            let mut g = GaussianPrimitive::new(
                Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.3..0.3),
                ),
                Vector3::from_fn(|_, _| rng.random_range(0.25f64..0.5).ln()),
                rng.random_range(0.5..0.95),
                Vector3::from_fn(|_, _| rng.random_range(0.1..0.9)),
            );
            g.rotation = [1.0, rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.2];
            g
        })
        .collect();
    let field = random_field(&mut rng)?;
    let cam = CameraView::look_at(
        Vector3::new(0.1, 0.05, -3.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        (9.0 * size as f64 / 8.0, 9.0 * size as f64 / 8.0),
        size,
        size,
    )?;
    let gt = Image::from_fn(size, size, 3, |x, y, c| 0.2 + 0.6 * (((x * 3 + y * 5 + c) % 7) as f64 / 7.0));
    Ok((Model::new(GaussianCloud::new(prims), field), cam, gt))
}

/// Step inputs with every term and the opacity blend switched on.
pub fn micro_inputs<'a>(cam: &'a CameraView, gt: &'a Image) -> StepInputs<'a> {
    let mut inp = StepInputs::new(cam, gt);
    inp.baselines = (0.3, 0.2);
    inp.alpha_w = 0.5;
    inp.active = ActiveTerms {
        tri: true,
        epi: true,
        res: true,
    };
    inp.lambda_epi = 0.3;
    inp.tau_alpha = 0.5;
    inp
}
