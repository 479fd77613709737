//! Scattering-medium image degradation and fully known synthetic scenes.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::medium::MediumSample;
use crate::projective::CameraView;
use crate::render::{render, AlphaMode};
use crate::scene::{GaussianCloud, GaussianPrimitive, SeedPoint};

/// Per-channel coefficients of the image formation model
/// `I = J·exp(−β_D z) + β_∞·(1 − exp(−β_B z))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumPreset {
    pub beta_d: [f64; 3],
    pub beta_b: [f64; 3],
    pub beta_inf: [f64; 3],
}

impl MediumPreset {
    pub fn underwater() -> Self {
        Self {
            beta_d: [1.3, 1.2, 0.9],
            beta_b: [0.95, 0.85, 0.7],
            beta_inf: [0.07, 0.2, 0.39],
        }
    }

    /// Veiling color above one is kept as given; outputs are clamped.
    pub fn fog() -> Self {
        Self {
            beta_d: [0.5; 3],
            beta_b: [1.2; 3],
            beta_inf: [1.2; 3],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "underwater" => Ok(Self::underwater()),
            "fog" => Ok(Self::fog()),
            _ => Err(Error::InvalidArgument(format!(
                "unknown medium preset `{name}` (expected underwater or fog)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.beta_d.iter().chain(&self.beta_b).chain(&self.beta_inf);
        if !all.clone().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("medium coefficients must be finite".into()));
        }
        if self.beta_d.iter().chain(&self.beta_b).any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("attenuation and backscatter must be non-negative".into()));
        }
        Ok(())
    }

    /// Constant medium that reproduces this preset on raw depth `z`
    /// when the simulator sees `z / depth_scale`.
    pub fn as_medium(&self, depth_scale: f64) -> MediumSample {
        MediumSample {
            sigma_attn: self.beta_d.map(|b| b / depth_scale),
            sigma_bs: self.beta_b.map(|b| b / depth_scale),
            c_med: self.beta_inf,
        }
    }
}

/// Applies the medium to a clean image given depth normalized to `[0, 1]`.
pub fn degrade(clean: &Image, depth: &Image, preset: &MediumPreset) -> Result<Image> {
    preset.validate()?;
    if clean.channels() != 3 || depth.channels() != 1 {
        return Err(Error::Shape("degrade expects an RGB image and a one-channel depth map".into()));
    }
    if clean.width() != depth.width() || clean.height() != depth.height() {
        return Err(Error::Shape("image and depth sizes differ".into()));
    }
    if let Some(z) = depth.data().iter().find(|z| !(0.0..=1.0).contains(*z)) {
        return Err(Error::InvalidArgument(format!("depth {z} outside [0, 1]; normalize first")));
    }
    Ok(Image::from_fn(clean.width(), clean.height(), 3, |x, y, c| {
        let z = depth.get(x, y, 0);
        let v = clean.get(x, y, c) * (-preset.beta_d[c] * z).exp()
            + preset.beta_inf[c] * (1.0 - (-preset.beta_b[c] * z).exp());
        v.clamp(0.0, 1.0)
    }))
}

/// Min-max normalization to `[0, 1]`; a constant map becomes zero.
pub fn normalize_depth(depth: &Image) -> Image {
    let lo = depth.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = depth.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return depth.map(|_| 0.0);
    }
    depth.map(|z| ((z - lo) / span).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    pub gaussians: usize,
    pub train_views: usize,
    pub test_views: usize,
    pub width: usize,
    pub height: usize,
    pub preset: MediumPreset,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            gaussians: 200,
            train_views: 12,
            test_views: 3,
            width: 64,
            height: 48,
            preset: MediumPreset::fog(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureView {
    pub camera: CameraView,
    pub clean: Image,
    pub degraded: Image,
    /// Rendered camera depth.
    pub depth: Image,
    /// `depth / depth_scale`, the simulator input.
    pub depth_normalized: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFixture {
    pub cloud: GaussianCloud,
    pub train: Vec<FixtureView>,
    pub test: Vec<FixtureView>,
    pub preset: MediumPreset,
    /// Largest rendered depth over all views; depths are divided by it.
    pub depth_scale: f64,
}

/// Camera distance from the scene origin.
pub const FIXTURE_DISTANCE: f64 = 3.5;
/// World z of the backdrop plane.
const BACKDROP_Z: f64 = 1.2;

fn fixture_cloud(n: usize, rng: &mut ChaCha8Rng) -> GaussianCloud {
    if n == 1 {
        return GaussianCloud::new(vec![GaussianPrimitive::new(
            Vector3::zeros(),
            Vector3::repeat(0.3f64.ln()),
            0.9,
            Vector3::new(0.8, 0.5, 0.3),
        )]);
    }
    let mut prims = Vec::with_capacity(n);
    let n_back = (n * 2) / 5;
    if n_back > 0 {
        // Grid on the backdrop plane, sized to cover every fixture view.
        let (half_w, half_h) = (3.6, 2.8);
        let cols = ((n_back as f64 * half_w / half_h).sqrt().ceil() as usize).max(1);
        let rows = n_back.div_ceil(cols);
        let (sx, sy) = (2.0 * half_w / cols as f64, 2.0 * half_h / rows as f64);
        for k in 0..n_back {
            let (i, j) = (k % cols, k / cols);
            let x = -half_w + (i as f64 + 0.5) * sx;
            let y = -half_h + (j as f64 + 0.5) * sy;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let color = Vector3::new(
                0.45 + 0.35 * (0.9 * x + phase).sin(),
                0.5 + 0.3 * (1.1 * y - 0.5 * x).cos(),
                0.4 + 0.3 * (0.7 * (x + y) + phase).sin(),
            );
            let log_scale = Vector3::new((0.75 * sx).ln(), (0.75 * sy).ln(), 0.05f64.ln());
            prims.push(GaussianPrimitive::new(Vector3::new(x, y, BACKDROP_Z), log_scale, 0.97, color));
        }
    }
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    for _ in n_back..n {
        let mu = Vector3::new(
            rng.random_range(-1.3..1.3),
            rng.random_range(-0.9..0.9),
            rng.random_range(-0.8..0.8),
        );
        let log_scale = Vector3::from_fn(|_, _| rng.random_range(0.08f64..0.3).ln());
        let mut g = GaussianPrimitive::new(
            mu,
            log_scale,
            rng.random_range(0.6..0.98),
            Vector3::from_fn(|_, _| rng.random_range(0.05..0.95)),
        );
        g.rotation = [
            normal.sample(rng),
            normal.sample(rng),
            normal.sample(rng),
            normal.sample(rng),
        ];
        g.normalize_rotation();
        prims.push(g);
    }
    GaussianCloud::new(prims)
}

/// Ring of cameras looking at the origin; held-out views interleave with
/// the training views.
fn fixture_cameras(spec: &FixtureSpec) -> Result<(Vec<CameraView>, Vec<CameraView>)> {
    let total = spec.train_views + spec.test_views;
    let focal = 0.85 * spec.width as f64;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let stride = if spec.test_views > 0 {
        (total / spec.test_views).max(2)
    } else {
        usize::MAX
    };
    for k in 0..total {
        let t = if total > 1 { k as f64 / (total - 1) as f64 } else { 0.5 };
        let yaw = (-0.45 + 0.9 * t) * 0.6;
        let pitch = 0.12 * (k as f64 * 2.3).sin();
        let eye = Vector3::new(
            FIXTURE_DISTANCE * yaw.sin() * pitch.cos(),
            FIXTURE_DISTANCE * pitch.sin(),
            -FIXTURE_DISTANCE * yaw.cos() * pitch.cos(),
        );
        let cam = CameraView::look_at(
            eye,
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            (focal, focal),
            spec.width,
            spec.height,
        )?;
        if test.len() < spec.test_views && k % stride == stride / 2 {
            test.push(cam);
        } else {
            train.push(cam);
        }
    }
    while test.len() < spec.test_views {
        test.push(train.pop().expect("enough views"));
    }
    Ok((train, test))
}

pub fn make_fixture(spec: &FixtureSpec) -> Result<SyntheticFixture> {
    if spec.gaussians == 0 || spec.width == 0 || spec.height == 0 {
        return Err(Error::InvalidArgument("fixture needs primitives and a non-empty image".into()));
    }
    if spec.train_views == 0 {
        return Err(Error::InvalidArgument("fixture needs at least one training view".into()));
    }
    spec.preset.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cloud = fixture_cloud(spec.gaussians, &mut rng);
    let (train_cams, test_cams) = fixture_cameras(spec)?;
    let render_clean = |cam: &CameraView| render(&cloud, cam, None, AlphaMode::Raw);
    let train_r = train_cams.iter().map(render_clean).collect::<Result<Vec<_>>>()?;
    let test_r = test_cams.iter().map(render_clean).collect::<Result<Vec<_>>>()?;
    let depth_scale = train_r
        .iter()
        .chain(&test_r)
        .flat_map(|b| b.depth.data().iter().copied())
        .fold(0.0, f64::max);
    if !(depth_scale > 0.0) {
        return Err(Error::InvalidArgument("fixture scene is not visible from its cameras".into()));
    }
    let build = |cams: Vec<CameraView>, renders: Vec<crate::render::RenderBundle>| -> Result<Vec<FixtureView>> {
        cams.into_iter()
            .zip(renders)
            .map(|(camera, b)| {
                let clean = b.object.clamp01();
                let depth_normalized = b.depth.map(|z| (z / depth_scale).clamp(0.0, 1.0));
                let degraded = degrade(&clean, &depth_normalized, &spec.preset)?;
                Ok(FixtureView {
                    camera,
                    clean,
                    degraded,
                    depth: b.depth,
                    depth_normalized,
                })
            })
            .collect()
    };
    Ok(SyntheticFixture {
        train: build(train_cams, train_r)?,
        test: build(test_cams, test_r)?,
        cloud,
        preset: spec.preset,
        depth_scale,
    })
}

impl SyntheticFixture {
    /// Scene extent used to normalize depths fed to the opacity network.
    pub fn scene_extent(&self) -> f64 {
        self.depth_scale
    }

    /// Noisy copies of the ground-truth centers with neutral color, standing
    /// in for a structure-from-motion point cloud.
    pub fn init_points(&self, noise: f64, seed: u64) -> Vec<SeedPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise.max(0.0)).expect("valid normal");
        self.cloud
            .primitives()
            .iter()
            .map(|g| SeedPoint {
                position: g.mu + Vector3::from_fn(|_, _| if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 }),
                color: Vector3::repeat(0.5),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_depth_is_identity() {
        let clean = Image::from_fn(5, 4, 3, |x, y, c| ((x + y + c) % 7) as f64 / 7.0);
        let out = degrade(&clean, &Image::new(5, 4, 1), &MediumPreset::underwater()).unwrap();
        assert_eq!(out, clean);
    }

    #[test]
    fn underwater_unit_depth() {
        let out = degrade(&Image::filled(2, 2, 3, 1.0), &Image::filled(2, 2, 1, 1.0), &MediumPreset::underwater())
            .unwrap();
        let expect = (-1.3f64).exp() + 0.07 * (1.0 - (-0.95f64).exp());
        assert!((out.get(0, 0, 0) - expect).abs() < 1e-15);
    }

    #[test]
    fn fog_is_monotone_and_clamped() {
        let p = MediumPreset::fog();
        for v in [0.0, 0.3, 0.9] {
            let clean = Image::filled(1, 1, 3, v);
            let mut prev = -1.0;
            for k in 0..=100 {
                let z = k as f64 / 100.0;
                let o = degrade(&clean, &Image::filled(1, 1, 1, z), &p).unwrap().get(0, 0, 0);
                assert!(o >= prev - 1e-15 && o <= 1.0);
                prev = o;
            }
        }
    }

    #[test]
    fn out_of_range_depth_rejected() {
        let e = degrade(&Image::new(1, 1, 3), &Image::filled(1, 1, 1, 1.5), &MediumPreset::fog());
        assert!(matches!(e, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn channel_symmetric_preset_commutes_with_permutation() {
        let clean = Image::from_fn(4, 3, 3, |x, y, c| ((x * 3 + y * 5 + c * 7) % 11) as f64 / 11.0);
        let depth = Image::from_fn(4, 3, 1, |x, y, _| (x + y) as f64 / 6.0);
        let perm = |img: &Image| Image::from_fn(4, 3, 3, |x, y, c| img.get(x, y, [2, 0, 1][c]));
        let p = MediumPreset::fog();
        assert_eq!(
            degrade(&perm(&clean), &depth, &p).unwrap(),
            perm(&degrade(&clean, &depth, &p).unwrap())
        );
    }

    #[test]
    fn normalize_depth_range() {
        let d = Image::from_fn(3, 1, 1, |x, _, _| 2.0 + x as f64);
        assert_eq!(normalize_depth(&d).data(), &[0.0, 0.5, 1.0]);
        assert_eq!(normalize_depth(&Image::filled(2, 2, 1, 3.0)).data(), &[0.0; 4]);
    }

    #[test]
    fn fixture_is_deterministic_and_consistent() {
        let spec = FixtureSpec {
            gaussians: 30,
            train_views: 4,
            test_views: 2,
            width: 32,
            height: 24,
            ..Default::default()
        };
        let a = make_fixture(&spec).unwrap();
        let b = make_fixture(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 4);
        assert_eq!(a.test.len(), 2);
        for v in a.train.iter().chain(&a.test) {
            assert_eq!(degrade(&v.clean, &v.depth_normalized, &a.preset).unwrap(), v.degraded);
        }
        for t in &a.test {
            assert!(a.train.iter().all(|v| v.camera != t.camera));
        }
    }

    #[test]
    fn backdrop_fills_every_view() {
        let f = make_fixture(&FixtureSpec::default()).unwrap();
        for v in f.train.iter().chain(&f.test) {
            assert!(v.depth.data().iter().all(|&z| z > 1.0), "empty pixels in a fixture view");
        }
    }

    #[test]
    fn single_splat_fixture() {
        let spec = FixtureSpec {
            gaussians: 1,
            train_views: 2,
            test_views: 1,
            ..Default::default()
        };
        let f = make_fixture(&spec).unwrap();
        assert_eq!(f.cloud.len(), 1);
    }
}
