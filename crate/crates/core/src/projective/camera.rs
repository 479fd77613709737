use std::io::{BufRead, Write};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix3x4, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::scene::{covariance_of, GaussianPrimitive};

/// Points at or closer than this camera depth count as behind the camera.
pub const DEPTH_EPS: f64 = 1e-6;

/// Isotropic screen-space variance added to every projected footprint, px².
pub const SCREEN_COV_FLOOR: f64 = 0.3;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Pinhole camera. `rotation`/`translation` map world to camera coordinates
/// (`x_cam = R·x_world + t`); the camera looks down +z with +y pointing down
/// the image. Pixel `(u, v)` is the image-plane sample at column `u`, row `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl CameraView {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// should appear upward in the image.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: (f64, f64),
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let z = (target - eye).normalize();
        let x = (-up).cross(&z);
        if x.norm() < 1e-12 {
            return Err(Error::InvalidCamera("up vector parallel to view direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        let k = Matrix3::new(
            focal.0,
            0.0,
            (width as f64 - 1.0) / 2.0,
            0.0,
            focal.1,
            (height as f64 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self::new(k, rotation, translation, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got {} and {}",
                k[(0, 0)],
                k[(1, 1)]
            )));
        }
        if k[(0, 1)] != 0.0 || k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::InvalidCamera("intrinsics must be [fx 0 cx; 0 fy cy; 0 0 1]".into()));
        }
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidCamera(format!("rotation not orthonormal (error {err:.3e})")));
        }
        if self.rotation.determinant() < 0.0 {
            return Err(Error::InvalidCamera("rotation is a reflection".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("empty image".into()));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite translation".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    #[inline]
    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    #[inline]
    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }

    #[inline]
    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    #[inline]
    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `K·[R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.set_column(3, &self.translation);
        self.intrinsics * rt
    }

    /// Unit world-space direction of the ray through pixel `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let d = Vector3::new((u - self.cx()) / self.fx(), (v - self.cy()) / self.fy(), 1.0);
        (self.rotation.transpose() * d).normalize()
    }

    /// Same camera rendered at `1/divisor` resolution.
    pub fn scaled(&self, divisor: usize) -> CameraView {
        if divisor <= 1 {
            return self.clone();
        }
        let s = divisor as f64;
        let mut k = self.intrinsics;
        k[(0, 0)] /= s;
        k[(1, 1)] /= s;
        k[(0, 2)] = (self.cx() + 0.5) / s - 0.5;
        k[(1, 2)] = (self.cy() + 0.5) / s - 0.5;
        CameraView {
            intrinsics: k,
            rotation: self.rotation,
            translation: self.translation,
            width: self.width / divisor,
            height: self.height / divisor,
        }
    }

    /// Whether a continuous pixel coordinate lies on the sampled image domain.
    #[inline]
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    /// `false` when `depth <= DEPTH_EPS`; `pixel` is then meaningless.
    pub in_front: bool,
}

pub fn project_point(cam: &CameraView, x: &Vector3<f64>) -> Projection {
    let p = cam.to_camera(x);
    let in_front = p.z > DEPTH_EPS;
    let pixel = if in_front {
        Vector2::new(cam.fx() * p.x / p.z + cam.cx(), cam.fy() * p.y / p.z + cam.cy())
    } else {
        Vector2::new(f64::NAN, f64::NAN)
    };
    Projection {
        pixel,
        depth: p.z,
        in_front,
    }
}

/// World point on the ray through `pixel` at camera depth `depth`.
pub fn unproject(cam: &CameraView, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
    let p = Vector3::new(
        (pixel.x - cam.cx()) / cam.fx() * depth,
        (pixel.y - cam.cy()) / cam.fy() * depth,
        depth,
    );
    cam.rotation.transpose() * (p - cam.translation)
}

/// Jacobian of the perspective division at camera-space point `p`.
#[inline]
pub fn perspective_jacobian(fx: f64, fy: f64, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(fx * iz, 0.0, -fx * p.x * iz2, 0.0, fy * iz, -fy * p.y * iz2)
}

/// First-order screen covariance `J·R·Σ·Rᵀ·Jᵀ` without the anti-aliasing floor.
pub fn screen_covariance(cam: &CameraView, p_cam: &Vector3<f64>, cov_world: &Matrix3<f64>) -> Matrix2<f64> {
    let t = perspective_jacobian(cam.fx(), cam.fy(), p_cam) * cam.rotation;
    let c = t * cov_world * t.transpose();
    (c + c.transpose()) * 0.5
}

/// Screen-space covariance of a primitive, including the isotropic floor.
pub fn project_covariance(cam: &CameraView, g: &GaussianPrimitive) -> Result<Matrix2<f64>> {
    let p = cam.to_camera(&g.mu);
    if p.z <= DEPTH_EPS {
        return Err(Error::BehindCamera(p.z));
    }
    let mut c = screen_covariance(cam, &p, &covariance_of(g));
    c[(0, 0)] += SCREEN_COV_FLOOR;
    c[(1, 1)] += SCREEN_COV_FLOOR;
    Ok(c)
}

/// Virtual cameras for the trinocular rig: the world→camera transform is
/// left-composed with the translations `(b_h, 0, 0)` and `(0, b_v, 0)`.
/// Intrinsics, rotation and image size are shared with `cam`.
pub fn make_virtual_poses(cam: &CameraView, b_h: f64, b_v: f64) -> (CameraView, CameraView) {
    let mut h = cam.clone();
    h.translation += Vector3::new(b_h, 0.0, 0.0);
    let mut v = cam.clone();
    v.translation += Vector3::new(0.0, b_v, 0.0);
    (h, v)
}

/// Reads cameras from the plain-text camera format. Each camera is 23
/// whitespace-separated numbers: `K` row-major (9), `R` row-major (9), `t`
/// (3), width, height. Line breaks are free; `#` starts a comment.
pub fn read_cameras<R: BufRead>(r: R) -> Result<Vec<CameraView>> {
    const WHAT: &str = "camera file";
    let mut tokens: Vec<(usize, String)> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(WHAT, i + 1, e.to_string()))?;
        let body = line.split('#').next().unwrap_or("");
        tokens.extend(body.split_whitespace().map(|t| (i + 1, t.to_string())));
    }
    if tokens.len() % 23 != 0 {
        let line = tokens.last().map(|t| t.0).unwrap_or(1);
        return Err(Error::parse(WHAT, line, format!("{} values is not a whole number of cameras", tokens.len())));
    }
    tokens
        .chunks(23)
        .map(|chunk| {
            let line = chunk[0].0;
            let v: Vec<f64> = chunk[..21]
                .iter()
                .map(|(l, s)| s.parse::<f64>().map_err(|e| Error::parse(WHAT, *l, e.to_string())))
                .collect::<Result<_>>()?;
            let dim = |(l, s): &(usize, String)| {
                s.parse::<usize>().map_err(|e| Error::parse(WHAT, *l, e.to_string()))
            };
            let k = Matrix3::from_row_slice(&v[0..9]);
            let rot = Matrix3::from_row_slice(&v[9..18]);
            let t = Vector3::new(v[18], v[19], v[20]);
            CameraView::new(k, rot, t, dim(&chunk[21])?, dim(&chunk[22])?)
                .map_err(|e| Error::parse(WHAT, line, e.to_string()))
        })
        .collect()
}

pub fn write_cameras<W: Write>(cams: &[CameraView], mut w: W) -> std::io::Result<()> {
    writeln!(w, "# K (row-major) / R (row-major) / t / width height")?;
    for cam in cams {
        let row = |m: &Matrix3<f64>| -> String {
            (0..3)
                .flat_map(|r| (0..3).map(move |c| (r, c)))
                .map(|(r, c)| format!("{:?}", m[(r, c)]))
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(w, "{}", row(&cam.intrinsics))?;
        writeln!(w, "{}", row(&cam.rotation))?;
        writeln!(
            w,
            "{:?} {:?} {:?}",
            cam.translation.x, cam.translation.y, cam.translation.z
        )?;
        writeln!(w, "{} {}", cam.width, cam.height)?;
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_camera(rng: &mut ChaCha8Rng) -> CameraView {
        let eye = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)) + Vector3::new(0.0, 0.0, -4.0);
        let target = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
        let f = rng.random_range(40.0..120.0);
        CameraView::look_at(eye, target, Vector3::new(0.0, -1.0, 0.0), (f, f * 1.1), 64, 48).unwrap()
    }

    fn axis_camera() -> CameraView {
        let k = Matrix3::new(100.0, 0.0, 31.5, 0.0, 100.0, 23.5, 0.0, 0.0, 1.0);
        CameraView::new(k, Matrix3::identity(), Vector3::zeros(), 64, 48).unwrap()
    }

    #[test]
    fn on_axis_point_hits_principal_point() {
        let cam = axis_camera();
        let p = project_point(&cam, &Vector3::new(0.0, 0.0, 5.0));
        assert!(p.in_front);
        assert_eq!(p.depth, 5.0);
        assert_eq!(p.pixel, Vector2::new(31.5, 23.5));
    }

    #[test]
    fn unit_focal_offset() {
        let k = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let cam = CameraView::new(k, Matrix3::identity(), Vector3::zeros(), 4, 4).unwrap();
        let p = project_point(&cam, &Vector3::new(1.0, 0.0, 1.0));
        assert_eq!(p.pixel, Vector2::new(1.0, 0.0));
    }

    #[test]
    fn behind_camera_is_flagged() {
        let cam = axis_camera();
        assert!(!project_point(&cam, &Vector3::new(0.0, 0.0, -1.0)).in_front);
        assert!(!project_point(&cam, &Vector3::new(0.0, 0.0, 1e-7)).in_front);
        let g = GaussianPrimitive::new(Vector3::new(0.0, 0.0, -2.0), Vector3::zeros(), 0.5, Vector3::zeros());
        assert!(matches!(project_covariance(&cam, &g), Err(Error::BehindCamera(_))));
    }

    #[test]
    fn unproject_project_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let cam = random_camera(&mut rng);
            let x = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let p = project_point(&cam, &x);
            assert!(p.in_front);
            let back = unproject(&cam, &p.pixel, p.depth);
            assert!((back - x).norm() < 1e-9);
        }
    }

    #[test]
    fn isotropic_covariance_on_axis() {
        let cam = axis_camera();
        let s: f64 = 0.2;
        let z = 4.0;
        let g = GaussianPrimitive::new(Vector3::new(0.0, 0.0, z), Vector3::repeat(s.ln()), 0.5, Vector3::zeros());
        let c = project_covariance(&cam, &g).unwrap();
        let expect = (100.0 * s / z).powi(2) + SCREEN_COV_FLOOR;
        assert!((c[(0, 0)] - expect).abs() < 1e-10);
        assert!((c[(1, 1)] - expect).abs() < 1e-10);
        assert!(c[(0, 1)].abs() < 1e-12);
        // Doubling the depth halves the projected standard deviation.
        let far = GaussianPrimitive { mu: Vector3::new(0.0, 0.0, 2.0 * z), ..g.clone() };
        let c2 = project_covariance(&cam, &far).unwrap();
        let sd1 = (c[(0, 0)] - SCREEN_COV_FLOOR).sqrt();
        let sd2 = (c2[(0, 0)] - SCREEN_COV_FLOOR).sqrt();
        assert!((sd1 / sd2 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn covariance_matches_finite_difference_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let cam = random_camera(&mut rng);
            let mut g = GaussianPrimitive::new(
                Vector3::from_fn(|_, _| rng.random_range(-0.8..0.8)),
                Vector3::from_fn(|_, _| rng.random_range(-2.5..-1.0)),
                0.5,
                Vector3::zeros(),
            );
            g.rotation = [0.8, 0.3, -0.4, 0.2];
            let h = 1e-6;
            let mut jac = Matrix2x3::zeros();
            for k in 0..3 {
                let mut dp = Vector3::zeros();
                dp[k] = h;
                let a = project_point(&cam, &(g.mu + dp)).pixel;
                let b = project_point(&cam, &(g.mu - dp)).pixel;
                jac.set_column(k, &((a - b) / (2.0 * h)));
            }
            let want = jac * covariance_of(&g) * jac.transpose();
            let got = project_covariance(&cam, &g).unwrap() - Matrix2::identity() * SCREEN_COV_FLOOR;
            let rel = (got - want).abs().max() / want.abs().max();
            assert!(rel < 1e-4, "relative error {rel}");
        }
    }

    #[test]
    fn virtual_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = random_camera(&mut rng);
        let (h, v) = make_virtual_poses(&cam, 0.0, 0.0);
        assert_eq!(h, cam);
        assert_eq!(v, cam);
        let (h, v) = make_virtual_poses(&cam, 0.3, -0.2);
        assert_eq!(h.rotation, cam.rotation);
        assert_eq!(v.rotation, cam.rotation);
        assert_eq!(h.intrinsics, cam.intrinsics);

        let id = axis_camera();
        let (h, _) = make_virtual_poses(&id, 0.5, 0.0);
        assert_eq!(h.center(), Vector3::new(-0.5, 0.0, 0.0));
    }

    #[test]
    fn invalid_cameras_rejected() {
        let k = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraView::new(k, Matrix3::identity(), Vector3::zeros(), 4, 4).is_err());
        let k = Matrix3::identity();
        let skewed = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraView::new(k, skewed, Vector3::zeros(), 4, 4).is_err());
    }

    #[test]
    fn camera_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cams: Vec<CameraView> = (0..3).map(|_| random_camera(&mut rng)).collect();
        let mut buf = Vec::new();
        write_cameras(&cams, &mut buf).unwrap();
        let back = read_cameras(buf.as_slice()).unwrap();
        assert_eq!(cams, back);
        assert!(read_cameras("1 2 3".as_bytes()).is_err());
    }

    #[test]
    fn scaled_camera_keeps_pixel_footprints_aligned() {
        let cam = axis_camera();
        let half = cam.scaled(2);
        assert_eq!((half.width, half.height), (32, 24));
        // Principal point stays at the image center.
        assert_eq!(half.cx(), 15.5);
        assert_eq!(half.cy(), 11.5);
    }
}
