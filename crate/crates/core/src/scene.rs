//! Gaussian primitives and the scene container.
//!
//! A primitive stores log standard deviations and an opacity logit so the
//! optimizer works on unconstrained values. Rotations are quaternions in
//! `(w, x, y, z)` order; the rotation matrix is always built from the
//! normalized quaternion.

use std::io::{BufRead, Write};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SCENE_FORMAT_VERSION: u32 = 1;
const SCENE_MAGIC: &str = "mediasplat-scene";

/// Relative eigenvalue floor for near-singular covariances, in units of the
/// squared scene extent.
pub const EIGEN_FLOOR_REL: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl GaussianPrimitive {
    pub fn new(mu: Vector3<f64>, log_scale: Vector3<f64>, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            mu,
            log_scale,
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    pub fn normalize_rotation(&mut self) {
        let n = quat_norm(&self.rotation);
        if n > 0.0 && n.is_finite() {
            self.rotation.iter_mut().for_each(|v| *v /= n);
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }
}

fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rotation matrix of the normalized quaternion `q`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = quat_norm(q);
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back to the raw (unnormalized)
/// quaternion.
pub fn quat_to_matrix_backward(q: &[f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let n = quat_norm(q);
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let g = |r: usize, c: usize| d_r[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    // Through the normalization q / |q|.
    let dn = [dw, dx, dy, dz];
    let qn = [w, x, y, z];
    let proj: f64 = dn.iter().zip(&qn).map(|(a, b)| a * b).sum();
    [
        (dn[0] - qn[0] * proj) / n,
        (dn[1] - qn[1] * proj) / n,
        (dn[2] - qn[2] * proj) / n,
        (dn[3] - qn[3] * proj) / n,
    ]
}

/// `Σ = R · diag(exp(2·log_scale)) · Rᵀ`.
pub fn covariance_of(g: &GaussianPrimitive) -> Matrix3<f64> {
    let m = g.rotation_matrix() * Matrix3::from_diagonal(&g.scale());
    let cov = m * m.transpose();
    // Exact symmetry regardless of rounding in the product.
    (cov + cov.transpose()) * 0.5
}

pub fn eigen_floor(scene_extent: f64) -> f64 {
    EIGEN_FLOOR_REL * scene_extent * scene_extent
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianWeight {
    pub value: f64,
    /// Set when an eigenvalue of Σ was raised to the floor.
    pub clamped: bool,
}

/// Evaluates `G(X) = exp(-½ (X-μ)ᵀ Σ⁻¹ (X-μ))`.
pub fn eval_gaussian(g: &GaussianPrimitive, x: &Vector3<f64>, eigen_floor: f64) -> GaussianWeight {
    let eig = SymmetricEigen::new(covariance_of(g));
    let mut clamped = false;
    let inv_vals = eig.eigenvalues.map(|l| {
        if l < eigen_floor {
            clamped = true;
            1.0 / eigen_floor
        } else {
            1.0 / l
        }
    });
    let d = x - g.mu;
    let local = eig.eigenvectors.transpose() * d;
    let maha: f64 = local.iter().zip(inv_vals.iter()).map(|(v, il)| v * v * il).sum();
    GaussianWeight {
        value: (-0.5 * maha).exp(),
        clamped,
    }
}

/// Running statistics of screen-space positional gradient magnitudes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradStat {
    pub sum: f64,
    pub count: u32,
}

impl GradStat {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Ordered primitives plus their densification statistics. The two lists
/// always have the same length.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    primitives: Vec<GaussianPrimitive>,
    grad_accum: Vec<GradStat>,
}

impl GaussianCloud {
    pub fn new(primitives: Vec<GaussianPrimitive>) -> Self {
        let grad_accum = vec![GradStat::default(); primitives.len()];
        Self {
            primitives,
            grad_accum,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn primitives(&self) -> &[GaussianPrimitive] {
        &self.primitives
    }

    pub fn primitives_mut(&mut self) -> &mut [GaussianPrimitive] {
        &mut self.primitives
    }

    pub fn get(&self, i: usize) -> &GaussianPrimitive {
        &self.primitives[i]
    }

    pub fn push(&mut self, g: GaussianPrimitive) {
        self.primitives.push(g);
        self.grad_accum.push(GradStat::default());
    }

    pub fn grad_stats(&self) -> &[GradStat] {
        &self.grad_accum
    }

    pub fn accumulate_grad(&mut self, i: usize, magnitude: f64) {
        let s = &mut self.grad_accum[i];
        s.sum += magnitude;
        s.count += 1;
    }

    pub fn reset_grad_stats(&mut self) {
        self.grad_accum.iter_mut().for_each(|s| *s = GradStat::default());
    }

    /// Keeps the primitives whose flag is set, preserving order.
    pub fn retain(&mut self, keep: &[bool]) {
        debug_assert_eq!(keep.len(), self.len());
        let mut k = keep.iter();
        self.primitives.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.grad_accum.retain(|_| *k.next().unwrap());
    }

    /// Axis-aligned bounds of the centers, or `None` when empty.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = self.primitives.first()?.mu;
        Some(self.primitives.iter().fold((first, first), |(lo, hi), g| {
            (lo.inf(&g.mu), hi.sup(&g.mu))
        }))
    }

    pub fn is_finite(&self) -> bool {
        self.primitives.iter().all(GaussianPrimitive::is_finite)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedPoint {
    pub position: Vector3<f64>,
    pub color: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitSpec {
    /// Uniformly random centers and colors inside an axis-aligned box.
    Random {
        count: usize,
        min: Vector3<f64>,
        max: Vector3<f64>,
    },
    /// One primitive per point.
    Points(Vec<SeedPoint>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitOptions {
    pub opacity: f64,
    /// Fixed log standard deviation; `None` derives it from the mean
    /// distance to the three nearest neighbours.
    pub log_scale: Option<f64>,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            opacity: 0.1,
            log_scale: None,
        }
    }
}

pub fn init_cloud(spec: &InitSpec, options: &InitOptions, seed: u64) -> Result<GaussianCloud> {
    if !(options.opacity > 0.0 && options.opacity < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "initial opacity {} outside (0, 1)",
            options.opacity
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<SeedPoint> = match spec {
        InitSpec::Random { count, min, max } => {
            if (0..3).any(|k| !(max[k] > min[k])) {
                return Err(Error::InvalidArgument(format!(
                    "empty bounds {min:?} .. {max:?}"
                )));
            }
            (0..*count)
                .map(|_| {
                    let position = Vector3::from_fn(|k, _| rng.random_range(min[k]..max[k]));
                    let color = Vector3::from_fn(|_, _| rng.random::<f64>());
                    SeedPoint { position, color }
                })
                .collect()
        }
        InitSpec::Points(points) => points.clone(),
    };
    let scales = match options.log_scale {
        Some(s) => vec![s; points.len()],
        None => knn_log_scales(&points),
    };
    let primitives = points
        .iter()
        .zip(scales)
        .map(|(p, s)| GaussianPrimitive::new(p.position, Vector3::repeat(s), options.opacity, p.color))
        .collect();
    Ok(GaussianCloud::new(primitives))
}

/// Log of the mean distance to the three nearest neighbours, floored.
fn knn_log_scales(points: &[SeedPoint]) -> Vec<f64> {
    const K: usize = 3;
    const FALLBACK: f64 = 0.01;
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (q.position - p.position).norm())
                .collect();
            if d.is_empty() {
                return FALLBACK.ln();
            }
            d.sort_by(f64::total_cmp);
            let k = d.len().min(K);
            let mean = d[..k].iter().sum::<f64>() / k as f64;
            mean.max(1e-7).ln()
        })
        .collect()
}

/// Writes the plain-text scene format:
///
/// ```text
/// mediasplat-scene 1
/// count <n>
/// <mu x y z> <log_scale x y z> <q w x y z> <opacity_logit> <r g b>   (n rows)
/// ```
///
/// Values use the shortest decimal form that parses back to the same `f64`.
pub fn write_scene<W: Write>(cloud: &GaussianCloud, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{SCENE_MAGIC} {SCENE_FORMAT_VERSION}")?;
    writeln!(w, "count {}", cloud.len())?;
    for g in cloud.primitives() {
        let vals = [
            g.mu.x,
            g.mu.y,
            g.mu.z,
            g.log_scale.x,
            g.log_scale.y,
            g.log_scale.z,
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
            g.opacity_logit,
            g.color.x,
            g.color.y,
            g.color.z,
        ];
        let row: Vec<String> = vals.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

pub fn read_scene<R: BufRead>(r: R) -> Result<GaussianCloud> {
    const WHAT: &str = "scene file";
    let mut lines = r.lines().enumerate();
    let mut next_line = || -> Result<Option<(usize, String)>> {
        for (i, line) in lines.by_ref() {
            let line = line.map_err(|e| Error::parse(WHAT, i + 1, e.to_string()))?;
            let t = line.trim();
            if !t.is_empty() && !t.starts_with('#') {
                return Ok(Some((i + 1, t.to_string())));
            }
        }
        Ok(None)
    };
    let (ln, header) = next_line()?.ok_or_else(|| Error::parse(WHAT, 1, "empty file"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(SCENE_MAGIC) {
        return Err(Error::parse(WHAT, ln, "missing header"));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(WHAT, ln, "missing version"))?;
    if version != SCENE_FORMAT_VERSION {
        return Err(Error::parse(WHAT, ln, format!("unsupported version {version}")));
    }
    let (ln, count_line) = next_line()?.ok_or_else(|| Error::parse(WHAT, ln, "missing count"))?;
    let count: usize = count_line
        .strip_prefix("count")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::parse(WHAT, ln, "bad count line"))?;
    let mut prims = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, row) = next_line()?.ok_or_else(|| Error::parse(WHAT, ln, "truncated"))?;
        let v: Vec<f64> = row
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(WHAT, ln, e.to_string()))?;
        if v.len() != 14 {
            return Err(Error::parse(WHAT, ln, format!("expected 14 values, got {}", v.len())));
        }
        prims.push(GaussianPrimitive {
            mu: Vector3::new(v[0], v[1], v[2]),
            log_scale: Vector3::new(v[3], v[4], v[5]),
            rotation: [v[6], v[7], v[8], v[9]],
            opacity_logit: v[10],
            color: Vector3::new(v[11], v[12], v[13]),
        });
    }
    if let Some((ln, _)) = next_line()? {
        return Err(Error::parse(WHAT, ln, "trailing rows after declared count"));
    }
    Ok(GaussianCloud::new(prims))
}
