//! Two-view linear triangulation and frustum-intersection candidate selection.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::scene::GaussianCloud;

use super::camera::{project_point, CameraView};

/// Normal-equation systems above this condition number are rejected.
pub const MAX_CONDITION: f64 = 1e10;

/// Least-squares point from two pixel observations and their 3×4 projection
/// matrices. Builds the 4×4 DLT system, moves its last column to the right
/// hand side and solves the 3×3 normal equations.
pub fn triangulate_point(
    x_h: &Vector2<f64>,
    x_v: &Vector2<f64>,
    m_h: &Matrix3x4<f64>,
    m_v: &Matrix3x4<f64>,
) -> Result<Vector3<f64>> {
    let mut a = Matrix4::zeros();
    for (k, (x, m)) in [(x_h, m_h), (x_v, m_v)].into_iter().enumerate() {
        a.set_row(2 * k, &(m.row(2) * x.x - m.row(0)));
        a.set_row(2 * k + 1, &(m.row(2) * x.y - m.row(1)));
    }
    let a3 = a.fixed_view::<4, 3>(0, 0).into_owned();
    let b = a.column(3).into_owned();
    let ata: Matrix3<f64> = a3.transpose() * a3;
    let atb = a3.transpose() * b;
    let eig = ata.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllConditioned(cond));
    }
    let chol = ata.cholesky().ok_or(Error::IllConditioned(cond))?;
    let x = -chol.solve(&atb);
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("triangulated point".into()));
    }
    Ok(x)
}

/// Depth of the triangulated point in the central camera.
pub fn triangulate_depth(
    x_h: &Vector2<f64>,
    x_v: &Vector2<f64>,
    m_h: &Matrix3x4<f64>,
    m_v: &Matrix3x4<f64>,
    cam_c: &CameraView,
) -> Result<f64> {
    let x = triangulate_point(x_h, x_v, m_h, m_v)?;
    Ok(cam_c.to_camera(&x).z)
}

/// Indices of primitives with opacity above `tau_alpha` whose centers project
/// in front of and inside every camera in `cams`.
pub fn select_candidates(cloud: &GaussianCloud, cams: &[&CameraView], tau_alpha: f64) -> Vec<usize> {
    cloud
        .primitives()
        .iter()
        .enumerate()
        .filter(|(_, g)| g.opacity() > tau_alpha)
        .filter(|(_, g)| {
            cams.iter().all(|cam| {
                let p = project_point(cam, &g.mu);
                p.in_front && cam.contains(&p.pixel)
            })
        })
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projective::make_virtual_poses;
    use crate::scene::GaussianPrimitive;

    fn cam() -> CameraView {
        CameraView::look_at(
            Vector3::new(0.0, 0.0, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            (60.0, 60.0),
            64,
            48,
        )
        .unwrap()
    }

    #[test]
    fn on_axis_symmetric_case() {
        let c = cam();
        let (h, v) = make_virtual_poses(&c, 0.3, 0.2);
        let x = Vector3::new(0.0, 0.0, 1.0);
        let ph = project_point(&h, &x).pixel;
        let pv = project_point(&v, &x).pixel;
        let d = triangulate_depth(&ph, &pv, &h.projection_matrix(), &v.projection_matrix(), &c).unwrap();
        assert!((d - 5.0).abs() < 1e-10);
    }

    #[test]
    fn parallel_rays_rejected() {
        let c = cam();
        let m = c.projection_matrix();
        let p = project_point(&c, &Vector3::new(0.2, 0.1, 0.0)).pixel;
        assert!(matches!(
            triangulate_depth(&p, &p, &m, &m, &c),
            Err(Error::IllConditioned(_))
        ));
    }

    #[test]
    fn candidate_rules() {
        let c = cam();
        let (h, v) = make_virtual_poses(&c, -0.3, -0.2);
        let mk = |x: f64, y: f64, z: f64, a: f64| {
            GaussianPrimitive::new(Vector3::new(x, y, z), Vector3::zeros(), a, Vector3::zeros())
        };
        let cloud = GaussianCloud::new(vec![
            mk(0.0, 0.0, 0.0, 0.9),   // visible everywhere
            mk(0.0, 0.0, -6.0, 0.9),  // behind
            mk(0.0, 0.0, 0.0, 0.7),   // below threshold
            mk(2.13, 0.0, 0.0, 0.9),  // near the right edge: inside P_c only after shift
        ]);
        let sel = select_candidates(&cloud, &[&c, &h, &v], 0.8);
        assert_eq!(sel[0], 0);
        assert!(!sel.contains(&1));
        assert!(!sel.contains(&2));
        let edge = project_point(&c, &cloud.get(3).mu).pixel;
        let edge_h = project_point(&h, &cloud.get(3).mu).pixel;
        assert_eq!(c.contains(&edge) && h.contains(&edge_h) && v.contains(&project_point(&v, &cloud.get(3).mu).pixel), sel.contains(&3));
    }
}
