//! Optimization loop: schedules, stereo baselines, density control, Adam,
//! checkpoints and the training log.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{evaluate_step, Model, Objective, StepInputs, GAUSSIAN_PARAMS};
use crate::hydrosim::SyntheticFixture;
use crate::image::Image;
use crate::io;
use crate::loss::{ActiveTerms, LossReport, LossWeights};
use crate::medium::{MediumConfig, MediumField, MediumMap, MediumSample};
use crate::metrics::{MetricReport, Task};
use crate::projective::CameraView;
use crate::render::{render, render_restored, AlphaMode};
use crate::scene::{init_cloud, GaussianCloud, GaussianPrimitive, InitOptions, InitSpec, SeedPoint};

/// Training configuration. Serialized as flat TOML; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub seed: u64,

    /// Stereo and epipolar terms are active on `[reg_start, reg_end)·S`.
    pub reg_start: f64,
    pub reg_end: f64,
    /// Depth-aware opacity is blended in for `t < alpha_adjust_end·S`.
    pub alpha_adjust_end: f64,
    pub alpha_adjust_w: f64,
    /// Resolution divisor drops to 2 at `res_half_at·S` and to 1 at `res_full_at·S`.
    pub res_half_at: f64,
    pub res_full_at: f64,
    pub initial_divisor: usize,

    pub tri_enabled: bool,
    pub epi_enabled: bool,
    pub res_enabled: bool,
    pub alpha_adjust_enabled: bool,

    pub lambda_s: f64,
    pub lambda_tri: f64,
    pub lambda_res: f64,
    pub lambda_epi_start: f64,
    pub lambda_epi_end: f64,
    pub loss_eps: f64,
    pub smooth_gamma: f64,

    pub tau_alpha: f64,
    pub candidate_cap: usize,
    pub baseline_v_max: f64,
    pub baseline_h_ratio: f64,

    pub densify_until: f64,
    pub densify_from: usize,
    pub densify_interval: usize,
    pub densify_grad_threshold: f64,
    pub prune_opacity: f64,
    pub split_factor: f64,
    /// Primitives larger than this fraction of the spatial extent are split
    /// rather than cloned.
    pub percent_dense: f64,
    pub max_gaussians: usize,

    pub lr_position: f64,
    pub lr_position_final: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_color: f64,
    pub lr_network: f64,

    pub init_opacity: f64,
    /// Random primitives when the dataset carries no seed points.
    pub init_random_count: usize,
    /// Initial optical depth of the medium across the depth extent.
    pub medium_init_density: f64,
    pub medium_init_color: f64,
    pub medium_hidden_width: usize,
    pub medium_hidden_layers: usize,
    pub medium_direction_freqs: usize,

    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let m = MediumConfig::default();
        Self {
            total_steps: 2000,
            seed: 0,
            reg_start: 0.4,
            reg_end: 0.8,
            alpha_adjust_end: 0.4,
            alpha_adjust_w: 0.5,
            res_half_at: 0.2,
            res_full_at: 0.4,
            initial_divisor: 4,
            tri_enabled: true,
            epi_enabled: true,
            res_enabled: true,
            alpha_adjust_enabled: true,
            lambda_s: w.lambda_s,
            lambda_tri: w.lambda_tri,
            lambda_res: w.lambda_res,
            lambda_epi_start: 0.4,
            lambda_epi_end: 0.2,
            loss_eps: w.eps,
            smooth_gamma: w.gamma,
            tau_alpha: crate::grad::DEFAULT_TAU_ALPHA,
            candidate_cap: crate::grad::DEFAULT_CANDIDATE_CAP,
            baseline_v_max: 0.4,
            baseline_h_ratio: 1.5,
            densify_until: 0.7,
            densify_from: 100,
            densify_interval: 100,
            densify_grad_threshold: 2e-4,
            prune_opacity: 0.005,
            split_factor: 1.6,
            percent_dense: 0.01,
            max_gaussians: 20_000,
            lr_position: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_opacity: 5e-2,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_color: 2.5e-3,
            lr_network: 1e-3,
            init_opacity: 0.1,
            init_random_count: 1000,
            medium_init_density: 0.5,
            medium_init_color: 0.5,
            medium_hidden_width: m.hidden_width,
            medium_hidden_layers: m.hidden_layers,
            medium_direction_freqs: m.direction_freqs,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    /// `"10k"` (the default proportions) or `"15k"`: regularizers on 6K–12K,
    /// opacity adjustment and densification until 10K of 15K steps.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "10k" => Ok(Self {
                total_steps: 10_000,
                ..Self::default()
            }),
            "15k" => Ok(Self {
                total_steps: 15_000,
                reg_start: 0.4,
                reg_end: 0.8,
                alpha_adjust_end: 10.0 / 15.0,
                densify_until: 10.0 / 15.0,
                ..Self::default()
            }),
            "desk" => Ok(Self::default()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (expected 10k, 15k or desk)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        let fracs = [
            ("reg_start", self.reg_start),
            ("reg_end", self.reg_end),
            ("alpha_adjust_end", self.alpha_adjust_end),
            ("res_half_at", self.res_half_at),
            ("res_full_at", self.res_full_at),
            ("densify_until", self.densify_until),
        ];
        for (name, f) in fracs {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} = {f} is not a fraction in [0, 1]"));
            }
        }
        if self.reg_start > self.reg_end {
            return bad("reg_start must not exceed reg_end".into());
        }
        if self.res_half_at > self.res_full_at {
            return bad("res_half_at must not exceed res_full_at".into());
        }
        let nonneg = [
            ("lambda_s", self.lambda_s),
            ("lambda_tri", self.lambda_tri),
            ("lambda_res", self.lambda_res),
            ("lambda_epi_start", self.lambda_epi_start),
            ("lambda_epi_end", self.lambda_epi_end),
            ("alpha_adjust_w", self.alpha_adjust_w),
            ("baseline_v_max", self.baseline_v_max),
            ("densify_grad_threshold", self.densify_grad_threshold),
            ("prune_opacity", self.prune_opacity),
            ("percent_dense", self.percent_dense),
            ("medium_init_density", self.medium_init_density),
            ("lr_position", self.lr_position),
            ("lr_position_final", self.lr_position_final),
            ("lr_opacity", self.lr_opacity),
            ("lr_scale", self.lr_scale),
            ("lr_rotation", self.lr_rotation),
            ("lr_color", self.lr_color),
            ("lr_network", self.lr_network),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if self.lambda_s > 1.0 {
            return bad("lambda_s must lie in [0, 1]".into());
        }
        if self.alpha_adjust_w > 1.0 {
            return bad("alpha_adjust_w must lie in [0, 1]".into());
        }
        if !(self.loss_eps > 0.0) {
            return bad("loss_eps must be positive".into());
        }
        if !(self.split_factor > 1.0) {
            return bad("split_factor must exceed 1".into());
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad("init_opacity must lie in (0, 1)".into());
        }
        if !(self.medium_init_color > 0.0 && self.medium_init_color < 1.0) {
            return bad("medium_init_color must lie in (0, 1)".into());
        }
        if !matches!(self.initial_divisor, 1 | 2 | 4) {
            return bad("initial_divisor must be 1, 2 or 4".into());
        }
        if self.densify_interval == 0 {
            return bad("densify_interval must be positive".into());
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_s: self.lambda_s,
            lambda_tri: self.lambda_tri,
            lambda_res: self.lambda_res,
            eps: self.loss_eps,
            gamma: self.smooth_gamma,
        }
    }

    pub fn medium_config(&self) -> MediumConfig {
        MediumConfig {
            hidden_width: self.medium_hidden_width,
            hidden_layers: self.medium_hidden_layers,
            direction_freqs: self.medium_direction_freqs,
        }
    }

    fn step_at(&self, frac: f64) -> usize {
        (frac * self.total_steps as f64).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScheduleState {
    pub step: usize,
    pub divisor: usize,
    pub tri_active: bool,
    pub epi_active: bool,
    pub res_active: bool,
    /// Blend weight of the depth-aware opacity; 0 renders raw opacities.
    pub alpha_w: f64,
    pub lambda_epi: f64,
    pub densify: bool,
}

pub fn schedule_at(t: usize, cfg: &TrainConfig) -> Result<ScheduleState> {
    if t >= cfg.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {t} outside [0, {})",
            cfg.total_steps
        )));
    }
    let divisor = if t < cfg.step_at(cfg.res_half_at) {
        cfg.initial_divisor
    } else if t < cfg.step_at(cfg.res_full_at) {
        cfg.initial_divisor.min(2)
    } else {
        1
    };
    let (a, b) = (cfg.step_at(cfg.reg_start), cfg.step_at(cfg.reg_end));
    let in_window = t >= a && t < b;
    let lambda_epi = if b > a + 1 {
        let s = ((t as f64 - a as f64) / (b - 1 - a) as f64).clamp(0.0, 1.0);
        cfg.lambda_epi_start + (cfg.lambda_epi_end - cfg.lambda_epi_start) * s
    } else {
        cfg.lambda_epi_start
    };
    let alpha_w = if cfg.alpha_adjust_enabled && t < cfg.step_at(cfg.alpha_adjust_end) {
        cfg.alpha_adjust_w
    } else {
        0.0
    };
    Ok(ScheduleState {
        step: t,
        divisor,
        tri_active: cfg.tri_enabled && in_window,
        epi_active: cfg.epi_enabled && in_window,
        res_active: cfg.res_enabled,
        alpha_w,
        lambda_epi,
        densify: t < cfg.step_at(cfg.densify_until),
    })
}

/// `b_v ~ U[−max, max]`, `b_h = ratio·b_v`.
pub fn sample_baselines(rng: &mut impl Rng, v_max: f64, h_ratio: f64) -> (f64, f64) {
    let b_v = if v_max > 0.0 { rng.random_range(-v_max..=v_max) } else { 0.0 };
    (h_ratio * b_v, b_v)
}

/// Where each primitive after density control came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    /// Survivor of the primitive with this index; its optimizer state carries over.
    Kept(usize),
    /// Clone or split child; optimizer state starts at zero.
    New,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DensifyStats {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small and splits large primitives whose mean screen-space gradient
/// reaches the threshold, then prunes low-opacity primitives. Gradient
/// statistics are reset. Returns the origin of every resulting primitive.
pub fn densify_prune(
    cloud: &mut GaussianCloud,
    cfg: &TrainConfig,
    spatial_extent: f64,
    rng: &mut impl Rng,
) -> (Vec<Origin>, DensifyStats) {
    let mut stats = DensifyStats::default();
    let size_limit = cfg.percent_dense * spatial_extent;
    let mut budget = cfg.max_gaussians.saturating_sub(cloud.len());
    let mut prims: Vec<(GaussianPrimitive, Origin)> = Vec::with_capacity(cloud.len());
    let mut children: Vec<GaussianPrimitive> = Vec::new();
    for (i, (g, s)) in cloud.primitives().iter().zip(cloud.grad_stats()).enumerate() {
        let avg = if s.count > 0 { s.sum / s.count as f64 } else { 0.0 };
        let hot = avg >= cfg.densify_grad_threshold && budget > 0;
        let scale = g.scale();
        if hot && scale.max() <= size_limit {
            prims.push((g.clone(), Origin::Kept(i)));
            children.push(g.clone());
            stats.cloned += 1;
            budget -= 1;
        } else if hot {
            let r = g.rotation_matrix();
            for _ in 0..2 {
                let eps = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
                let mut c = g.clone();
                c.mu = g.mu + r * scale.component_mul(&eps);
                c.log_scale = g.log_scale.map(|v| v - cfg.split_factor.ln());
                children.push(c);
            }
            stats.split += 1;
            budget = budget.saturating_sub(1);
        } else {
            prims.push((g.clone(), Origin::Kept(i)));
        }
    }
    prims.extend(children.into_iter().map(|c| (c, Origin::New)));
    let before = prims.len();
    prims.retain(|(g, _)| g.opacity() >= cfg.prune_opacity && g.is_finite());
    stats.pruned = before - prims.len();
    let origins = prims.iter().map(|(_, o)| *o).collect();
    *cloud = GaussianCloud::new(prims.into_iter().map(|(g, _)| g).collect());
    (origins, stats)
}

/// Adam with one learning rate per parameter and a shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: impl Fn(usize) -> f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let mh = self.m[k] / bc1;
            let vh = self.v[k] / bc2;
            params[k] -= lr(k) * mh / (vh.sqrt() + self.eps);
        }
    }

    /// Rebuilds the per-primitive state after density control; network state
    /// (the tail after `old_gaussians·14` entries) is kept.
    pub fn remap(&mut self, origins: &[Origin], old_gaussians: usize) {
        let tail = old_gaussians * GAUSSIAN_PARAMS;
        let remap = |old: &[f64]| {
            let mut out = Vec::with_capacity(origins.len() * GAUSSIAN_PARAMS + old.len() - tail);
            for o in origins {
                match o {
                    Origin::Kept(i) => out.extend_from_slice(&old[i * GAUSSIAN_PARAMS..(i + 1) * GAUSSIAN_PARAMS]),
                    Origin::New => out.extend([0.0; GAUSSIAN_PARAMS]),
                }
            }
            out.extend_from_slice(&old[tail..]);
            out
        };
        self.m = remap(&self.m);
        self.v = remap(&self.v);
    }
}

/// A posed image.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: CameraView,
    pub image: Image,
}

/// Training and held-out views. Held-out clean images and depths are
/// optional and enable the restoration and depth metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<View>,
    pub test: Vec<View>,
    pub test_clean: Vec<Image>,
    pub test_depth: Vec<Image>,
    pub init_points: Vec<SeedPoint>,
    /// Depth normalizer of the opacity network and scale of the initial medium.
    pub depth_extent: f64,
}

fn named(prefix: &str, k: usize) -> String {
    format!("{prefix}_{k:03}")
}

impl Dataset {
    /// Degraded fixture images as targets, with noisy ground-truth centers
    /// (neutral color) as seed points.
    pub fn from_fixture(fix: &SyntheticFixture, init_noise: f64, seed: u64) -> Self {
        let views = |vs: &[crate::hydrosim::FixtureView], p: &str| {
            vs.iter()
                .enumerate()
                .map(|(k, v)| View {
                    name: named(p, k),
                    camera: v.camera.clone(),
                    image: v.degraded.clone(),
                })
                .collect()
        };
        Self {
            train: views(&fix.train, "train"),
            test: views(&fix.test, "test"),
            test_clean: fix.test.iter().map(|v| v.clean.clone()).collect(),
            test_depth: fix.test.iter().map(|v| v.depth.clone()).collect(),
            init_points: fix.init_points(init_noise, seed),
            depth_extent: fix.scene_extent(),
        }
    }

    /// 1.1 × the largest distance of a training camera from their centroid.
    pub fn spatial_extent(&self) -> f64 {
        let centers: Vec<Vector3<f64>> = self.train.iter().map(|v| v.camera.center()).collect();
        if centers.is_empty() {
            return 1.0;
        }
        let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
        let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
        if r > 0.0 {
            1.1 * r
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.len() < 2 {
            return Err(Error::InvalidArgument("training needs at least two views".into()));
        }
        for v in self.train.iter().chain(&self.test) {
            v.camera.validate()?;
            if v.image.width() != v.camera.width || v.image.height() != v.camera.height || v.image.channels() != 3 {
                return Err(Error::Shape(format!("view {} does not match its camera", v.name)));
            }
        }
        if !self.test_clean.is_empty() && self.test_clean.len() != self.test.len() {
            return Err(Error::Shape("clean held-out images do not match held-out views".into()));
        }
        if !self.test_depth.is_empty() && self.test_depth.len() != self.test.len() {
            return Err(Error::Shape("held-out depths do not match held-out views".into()));
        }
        if !(self.depth_extent > 0.0 && self.depth_extent.is_finite()) {
            return Err(Error::InvalidArgument("depth extent must be positive".into()));
        }
        Ok(())
    }

    /// Directory layout:
    ///
    /// ```text
    /// meta.toml            depth_extent = <f64>
    /// points.txt           optional seed points, `x y z r g b` per line
    /// train/cameras.txt    train/images/*.{raw,png}
    /// test/cameras.txt     test/images/  [test/clean/]  [test/depth/]
    /// ```
    pub fn save(&self, dir: &Path) -> Result<()> {
        let split = |name: &str, views: &[View], extra: &[(&str, &[Image])]| -> Result<()> {
            let d = dir.join(name);
            io::create_dir(&d.join("images"))?;
            let cams: Vec<CameraView> = views.iter().map(|v| v.camera.clone()).collect();
            io::save_cameras(&d.join("cameras.txt"), &cams)?;
            for v in views {
                io::write_image(&d.join("images").join(format!("{}.raw", v.name)), &v.image)?;
            }
            for (sub, imgs) in extra {
                if imgs.is_empty() {
                    continue;
                }
                io::create_dir(&d.join(sub))?;
                for (v, img) in views.iter().zip(imgs.iter()) {
                    io::write_image(&d.join(sub).join(format!("{}.raw", v.name)), img)?;
                }
            }
            Ok(())
        };
        io::create_dir(dir)?;
        split("train", &self.train, &[])?;
        split("test", &self.test, &[("clean", &self.test_clean), ("depth", &self.test_depth)])?;
        io::write_text(&dir.join("meta.toml"), &format!("depth_extent = {:?}\n", self.depth_extent))?;
        if !self.init_points.is_empty() {
            let mut s = String::new();
            for p in &self.init_points {
                let (a, c) = (p.position, p.color);
                s += &format!("{:?} {:?} {:?} {:?} {:?} {:?}\n", a.x, a.y, a.z, c.x, c.y, c.z);
            }
            io::write_text(&dir.join("points.txt"), &s)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load_split = |name: &str| -> Result<(Vec<View>, Vec<Image>, Vec<Image>)> {
            let d = dir.join(name);
            if !d.exists() {
                return Ok(Default::default());
            }
            let cams = io::load_cameras(&d.join("cameras.txt"))?;
            let paths = io::list_images(&d.join("images"))?;
            if paths.len() != cams.len() {
                return Err(Error::Shape(format!(
                    "{}: {} cameras but {} images",
                    d.display(),
                    cams.len(),
                    paths.len()
                )));
            }
            let views = cams
                .into_iter()
                .zip(&paths)
                .map(|(camera, p)| {
                    Ok(View {
                        name: p.file_stem().and_then(|s| s.to_str()).unwrap_or("view").to_string(),
                        camera,
                        image: io::read_image(p)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let opt = |sub: &str| -> Result<Vec<Image>> {
                let p = d.join(sub);
                if p.is_dir() {
                    io::read_images(&p)
                } else {
                    Ok(Vec::new())
                }
            };
            Ok((views, opt("clean")?, opt("depth")?))
        };
        let (train, _, _) = load_split("train")?;
        let (test, test_clean, test_depth) = load_split("test")?;
        let points_path = dir.join("points.txt");
        let mut init_points = Vec::new();
        if points_path.exists() {
            for (i, line) in io::read_text(&points_path)?.lines().enumerate() {
                let t = line.trim();
                if t.is_empty() || t.starts_with('#') {
                    continue;
                }
                let v: Vec<f64> = t
                    .split_whitespace()
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::parse("points.txt", i + 1, e.to_string()))?;
                if v.len() != 6 {
                    return Err(Error::parse("points.txt", i + 1, "expected `x y z r g b`"));
                }
                init_points.push(SeedPoint {
                    position: Vector3::new(v[0], v[1], v[2]),
                    color: Vector3::new(v[3], v[4], v[5]),
                });
            }
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Meta {
            depth_extent: Option<f64>,
        }
        let meta_path = dir.join("meta.toml");
        let meta: Meta = if meta_path.exists() {
            toml::from_str(&io::read_text(&meta_path)?).map_err(|e| Error::Config(e.to_string()))?
        } else {
            Meta { depth_extent: None }
        };
        let mut data = Self {
            train,
            test,
            test_clean,
            test_depth,
            init_points,
            depth_extent: 1.0,
        };
        data.depth_extent = match meta.depth_extent {
            Some(d) => d,
            None => data.estimate_depth_extent(),
        };
        data.validate()?;
        Ok(data)
    }

    /// Largest camera-to-seed-point distance, or ten spatial extents without seeds.
    fn estimate_depth_extent(&self) -> f64 {
        let far = self
            .train
            .iter()
            .flat_map(|v| self.init_points.iter().map(move |p| (p.position - v.camera.center()).norm()))
            .fold(0.0, f64::max);
        if far > 0.0 {
            far
        } else {
            10.0 * self.spatial_extent()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub record: &'static str,
    pub step: usize,
    pub view: usize,
    pub divisor: usize,
    pub alpha_w: f64,
    pub baseline_h: f64,
    pub baseline_v: f64,
    pub gaussians: usize,
    pub stereo_axes: [bool; 2],
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationRecord {
    pub record: &'static str,
    pub step: usize,
    pub novel_view: Option<MetricReport>,
    pub restoration: Option<MetricReport>,
    /// Degraded-vs-clean metrics: restoration by doing nothing.
    pub degraded_baseline: Option<MetricReport>,
    pub depth_mae: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepRecord>,
    pub validation: ValidationRecord,
    pub densify: Vec<DensifyStats>,
}

/// Everything needed to render from a trained state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: usize,
}

impl Checkpoint {
    /// Opacity blend weight in effect after `step` completed steps.
    pub fn alpha_w(&self) -> f64 {
        if self.step == 0 || self.step > self.config.total_steps {
            return 0.0;
        }
        schedule_at(self.step - 1, &self.config).map(|s| s.alpha_w).unwrap_or(0.0)
    }

    pub fn dir_name(step: usize) -> String {
        format!("checkpoint_{step:06}")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        io::save_scene(&dir.join("scene.txt"), &self.model.cloud)?;
        io::save_medium(&dir.join("medium.txt"), &self.model.field)?;
        io::write_text(&dir.join("config.toml"), &self.config.to_toml())?;
        io::write_text(&dir.join("step"), &format!("{}\n", self.step))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cloud = io::load_scene(&dir.join("scene.txt"))?;
        let field = io::load_medium(&dir.join("medium.txt"))?;
        let config = TrainConfig::from_toml(&io::read_text(&dir.join("config.toml"))?)?;
        let step = io::read_text(&dir.join("step"))?
            .trim()
            .parse()
            .map_err(|_| Error::parse("checkpoint step", 1, "not an integer"))?;
        Ok(Self {
            model: Model::new(cloud, field),
            config,
            step,
        })
    }
}

fn alpha_mode(field: &MediumField, w: f64) -> AlphaMode<'_> {
    if w != 0.0 {
        AlphaMode::Adjusted { field, w }
    } else {
        AlphaMode::Raw
    }
}

/// Renders held-out views and scores them: composite against the degraded
/// targets, restoration against clean images, and depth error.
pub fn validate(model: &Model, data: &Dataset, alpha_w: f64, step: usize) -> Result<ValidationRecord> {
    let mode = alpha_mode(&model.field, alpha_w);
    let mut composites = Vec::new();
    let mut restored = Vec::new();
    let mut depths = Vec::new();
    for v in &data.test {
        let map = MediumMap::from_field(&model.field, &v.camera)?;
        let b = render(&model.cloud, &v.camera, Some(&map), mode)?;
        composites.push(b.color.clamp01());
        depths.push(b.depth);
        if !data.test_clean.is_empty() {
            restored.push(render_restored(&model.cloud, &v.camera, &map)?.clamp01());
        }
    }
    let names = || data.test.iter().map(|v| v.name.clone());
    let big_enough = data
        .test
        .iter()
        .all(|v| v.camera.width >= crate::loss::SSIM_WINDOW && v.camera.height >= crate::loss::SSIM_WINDOW);
    let report = |task, a: &[Image], b: Vec<&Image>| -> Result<Option<MetricReport>> {
        if a.is_empty() || !big_enough {
            return Ok(None);
        }
        MetricReport::compute(task, names().zip(a.iter()).zip(b).map(|((n, x), y)| (n, x, y))).map(Some)
    };
    let novel_view = report(Task::NovelView, &composites, data.test.iter().map(|v| &v.image).collect())?;
    let restoration = report(Task::Restoration, &restored, data.test_clean.iter().collect())?;
    let degraded: Vec<Image> = if data.test_clean.is_empty() {
        Vec::new()
    } else {
        data.test.iter().map(|v| v.image.clone()).collect()
    };
    let degraded_baseline = report(Task::Restoration, &degraded, data.test_clean.iter().collect())?;
    let depth_mae = (!data.test_depth.is_empty() && !depths.is_empty()).then(|| depth_mae(&depths, &data.test_depth));
    Ok(ValidationRecord {
        record: "validation",
        step,
        novel_view,
        restoration,
        degraded_baseline,
        depth_mae,
    })
}

/// Mean absolute depth error over pixels where the reference has depth.
pub fn depth_mae(rendered: &[Image], reference: &[Image]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (r, g) in rendered.iter().zip(reference) {
        for (a, b) in r.data().iter().zip(g.data()) {
            if *b > 0.0 {
                sum += (a - b).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Initial primitives and medium field for a dataset.
pub fn initial_model(cfg: &TrainConfig, data: &Dataset) -> Result<Model> {
    let opts = InitOptions {
        opacity: cfg.init_opacity,
        log_scale: None,
    };
    let spec = if data.init_points.is_empty() {
        let centers: Vec<Vector3<f64>> = data.train.iter().map(|v| v.camera.center()).collect();
        let mean = centers.iter().sum::<Vector3<f64>>() / centers.len().max(1) as f64;
        let r = Vector3::repeat(data.depth_extent);
        InitSpec::Random {
            count: cfg.init_random_count,
            min: mean - r,
            max: mean + r,
        }
    } else {
        InitSpec::Points(data.init_points.clone())
    };
    let cloud = init_cloud(&spec, &opts, cfg.seed)?;
    let mut field = MediumField::new(&cfg.medium_config(), data.depth_extent, cfg.seed.wrapping_add(1))?;
    let sigma = (cfg.medium_init_density / data.depth_extent).max(1e-12);
    field.set_output_bias(&MediumSample {
        sigma_attn: [sigma; 3],
        sigma_bs: [sigma; 3],
        c_med: [cfg.medium_init_color; 3],
    })?;
    Ok(Model::new(cloud, field))
}

struct Pyramid {
    levels: Vec<(usize, CameraView, Image)>,
}

impl Pyramid {
    fn new(view: &View) -> Self {
        let levels = [1, 2, 4]
            .into_iter()
            .map(|d| (d, view.camera.scaled(d), view.image.downsample(d)))
            .collect();
        Self { levels }
    }

    fn level(&self, d: usize) -> (&CameraView, &Image) {
        let l = self.levels.iter().find(|l| l.0 == d).expect("divisor in pyramid");
        (&l.1, &l.2)
    }
}

fn lr_table(cfg: &TrainConfig, t: usize, spatial_extent: f64) -> [f64; GAUSSIAN_PARAMS] {
    let s = (t as f64 / cfg.total_steps.max(1) as f64).clamp(0.0, 1.0);
    let pos = if cfg.lr_position > 0.0 && cfg.lr_position_final > 0.0 {
        (cfg.lr_position.ln() * (1.0 - s) + cfg.lr_position_final.ln() * s).exp()
    } else {
        cfg.lr_position
    } * spatial_extent;
    let mut lr = [0.0; GAUSSIAN_PARAMS];
    lr[0..3].fill(pos);
    lr[3..6].fill(cfg.lr_scale);
    lr[6..10].fill(cfg.lr_rotation);
    lr[10] = cfg.lr_opacity;
    lr[11..14].fill(cfg.lr_color);
    lr
}

/// Writes the training log and checkpoints when `out_dir` is given.
pub struct TrainSink {
    dir: PathBuf,
    log: std::io::BufWriter<std::fs::File>,
}

impl TrainSink {
    pub fn create(dir: &Path) -> Result<Self> {
        io::create_dir(dir)?;
        let path = dir.join("train_log.jsonl");
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log: std::io::BufWriter::new(f),
        })
    }

    fn write<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.dir.join("train_log.jsonl"), e))
    }

    fn flush(&mut self) -> Result<()> {
        self.log.flush().map_err(|e| Error::io(self.dir.join("train_log.jsonl"), e))
    }
}

/// Runs the full optimization. With `out_dir`, the per-step log, interval
/// checkpoints and the final checkpoint are written there; on divergence the
/// last good state is saved as `checkpoint_last_good` before the error is
/// returned.
pub fn train(cfg: &TrainConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let mut sink = out_dir.map(TrainSink::create).transpose()?;
    let extent = data.spatial_extent();
    let mut model = initial_model(cfg, data)?;
    let mut adam = Adam::new(model.layout().total());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pyramids: Vec<Pyramid> = data.train.iter().map(Pyramid::new).collect();
    let weights = cfg.loss_weights();
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.total_steps);
    let mut densify_log = Vec::new();

    for t in 0..cfg.total_steps {
        let sched = schedule_at(t, cfg)?;
        if order.is_empty() {
            order = (0..data.train.len()).collect();
            order.shuffle(&mut rng);
        }
        let view = order.pop().expect("non-empty order");
        let (b_h, b_v) = sample_baselines(&mut rng, cfg.baseline_v_max, cfg.baseline_h_ratio);
        let sample_seed: u64 = rng.random();
        let (cam, gt) = pyramids[view].level(sched.divisor);
        let inputs = StepInputs {
            camera: cam,
            gt,
            baselines: (b_h, b_v),
            alpha_w: sched.alpha_w,
            active: ActiveTerms {
                tri: sched.tri_active,
                epi: sched.epi_active,
                res: sched.res_active,
            },
            weights,
            lambda_epi: sched.lambda_epi,
            tau_alpha: cfg.tau_alpha,
            candidate_cap: cfg.candidate_cap,
            sample_seed,
            step: t,
        };
        let out = match evaluate_step(&model, &inputs, None, Objective::Total, true) {
            Ok(o) => o,
            Err(e) => {
                if let Some(s) = sink.as_mut() {
                    s.flush()?;
                    Checkpoint {
                        model: model.clone(),
                        config: cfg.clone(),
                        step: t,
                    }
                    .save(&s.dir.join("checkpoint_last_good"))?;
                }
                return Err(e);
            }
        };
        let rec = StepRecord {
            record: "step",
            step: t,
            view,
            divisor: sched.divisor,
            alpha_w: sched.alpha_w,
            baseline_h: b_h,
            baseline_v: b_v,
            gaussians: model.cloud.len(),
            stereo_axes: out.stereo_axes,
            loss: out.report,
        };
        if let Some(s) = sink.as_mut() {
            s.write(&rec)?;
        }
        if t % 100 == 0 {
            log::info!(
                "step {t}: total {:.5} photo {:.5} gaussians {}",
                rec.loss.total,
                rec.loss.terms.photo,
                rec.gaussians
            );
        }
        log.push(rec);

        let mut params = model.params();
        let lr = lr_table(cfg, t, extent);
        let net_start = model.layout().phi_med_offset();
        adam.step(&mut params, &out.grad, |k| {
            if k < net_start {
                lr[k % GAUSSIAN_PARAMS]
            } else {
                cfg.lr_network
            }
        });
        let previous = model.clone();
        model.set_params(&params)?;
        if !model.cloud.is_finite() || !model.field.is_finite() {
            if let Some(s) = sink.as_mut() {
                s.flush()?;
                Checkpoint {
                    model: previous,
                    config: cfg.clone(),
                    step: t,
                }
                .save(&s.dir.join("checkpoint_last_good"))?;
            }
            return Err(Error::Diverged {
                step: t,
                term: "parameters".into(),
            });
        }
        for (i, (&g, &vis)) in out.screen_grad.iter().zip(&out.visible).enumerate() {
            if vis {
                model.cloud.accumulate_grad(i, g);
            }
        }
        if sched.densify && t >= cfg.densify_from && (t + 1) % cfg.densify_interval == 0 {
            let n_old = model.cloud.len();
            let (origins, stats) = densify_prune(&mut model.cloud, cfg, extent, &mut rng);
            adam.remap(&origins, n_old);
            log::debug!("step {t}: densify {stats:?} -> {} primitives", model.cloud.len());
            densify_log.push(stats);
        }
        if let Some(s) = sink.as_mut() {
            let done = t + 1;
            if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < cfg.total_steps {
                Checkpoint {
                    model: model.clone(),
                    config: cfg.clone(),
                    step: done,
                }
                .save(&s.dir.join(Checkpoint::dir_name(done)))?;
            }
        }
    }

    let final_w = schedule_at(cfg.total_steps - 1, cfg)?.alpha_w;
    let validation = validate(&model, data, final_w, cfg.total_steps)?;
    if let Some(s) = sink.as_mut() {
        s.write(&validation)?;
        s.flush()?;
        Checkpoint {
            model: model.clone(),
            config: cfg.clone(),
            step: cfg.total_steps,
        }
        .save(&s.dir.join(Checkpoint::dir_name(cfg.total_steps)))?;
    }
    Ok(TrainOutcome {
        model,
        log,
        validation,
        densify: densify_log,
    })
}
