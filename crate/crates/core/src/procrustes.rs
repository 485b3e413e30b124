//! Closed-form weighted rigid alignment of paired point clouds.

use crate::eqfeatures::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{Mat3, RigidTransform, Vec3};

const JACOBI_SWEEPS: usize = 30;
const JACOBI_TOLERANCE: f64 = 1e-12;
const DEGENERACY_RATIO: f64 = 1e-9;

/// `m = u · diag(sigma) · vᵀ` with `sigma` sorted descending.
#[derive(Debug, Clone, Copy)]
pub struct Svd3 {
    pub u: Mat3,
    pub sigma: Vec3,
    pub v: Mat3,
}

/// Singular value decomposition of a 3x3 matrix.
///
/// Cyclic Jacobi diagonalization of `mᵀm` gives `V`; the columns of `mV`
/// then give the singular values (their norms) and `U` (their directions),
/// with Gram-Schmidt completing `U` when singular values vanish.
pub fn svd3(m: &Mat3) -> Svd3 {
    let mut a = m.transpose() * m;
    let mut v = Mat3::identity();
    let scale = a.amax().max(f64::MIN_POSITIVE);

    for _ in 0..JACOBI_SWEEPS {
        let off = a[(0, 1)].abs() + a[(0, 2)].abs() + a[(1, 2)].abs();
        if off <= JACOBI_TOLERANCE * scale {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let apq = a[(p, q)];
            if apq.abs() <= f64::MIN_POSITIVE {
                continue;
            }
            let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut rot = Mat3::identity();
            rot[(p, p)] = c;
            rot[(q, q)] = c;
            rot[(p, q)] = s;
            rot[(q, p)] = -s;
            a = rot.transpose() * a * rot;
            a[(p, q)] = 0.0;
            a[(q, p)] = 0.0;
            v *= rot;
        }
    }

    let w = m * v;
    let mut order = [0usize, 1, 2];
    let norms = [w.column(0).norm(), w.column(1).norm(), w.column(2).norm()];
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut v_sorted = Mat3::zeros();
    let mut w_sorted = Mat3::zeros();
    let mut sigma = Vec3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        v_sorted.set_column(dst, &v.column(src));
        w_sorted.set_column(dst, &w.column(src));
        sigma[dst] = norms[src];
    }

    let tiny = sigma[0].max(f64::MIN_POSITIVE) * 1e-13;
    let mut u = Mat3::zeros();
    for i in 0..3 {
        let mut col: Vec3 = if sigma[i] > tiny {
            w_sorted.column(i) / sigma[i]
        } else {
            fallback_direction(&u, i)
        };
        for j in 0..i {
            let prev: Vec3 = u.column(j).into();
            col -= prev * prev.dot(&col);
        }
        let n = col.norm();
        col = if n > 1e-6 { col / n } else { fallback_direction(&u, i) };
        u.set_column(i, &col);
    }

    Svd3 {
        u,
        sigma,
        v: v_sorted,
    }
}

/// A unit vector orthogonal to the first `i` columns of `u`.
fn fallback_direction(u: &Mat3, i: usize) -> Vec3 {
    match i {
        0 => Vec3::x(),
        1 => {
            let a: Vec3 = u.column(0).into();
            let probe = if a.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            let c = probe - a * a.dot(&probe);
            c / c.norm()
        }
        _ => {
            let a: Vec3 = u.column(0).into();
            let b: Vec3 = u.column(1).into();
            a.cross(&b).normalize()
        }
    }
}

/// Outcome of [`estimate_rigid`].
#[derive(Debug, Clone, Copy)]
pub struct AlignmentResult {
    /// Maps source points onto target points.
    pub transform: RigidTransform,
    /// Weighted RMS of `R s + T − t`, in mm.
    pub residual_rms: f64,
    /// Smallest-to-largest singular value ratio of the cross-covariance.
    pub condition: f64,
}

/// Weighted least-squares rigid fit `t_k ≈ R s_k + T` between paired clouds.
///
/// Pair weights are `min(source.mass, target.mass)` normalized to unit sum;
/// pairs where either mass is zero are skipped. The cross-covariance is
/// taken about the weighted centroids and the rotation is constrained to
/// `det R = +1`.
pub fn estimate_rigid(source: &PointCloud, target: &PointCloud) -> Result<AlignmentResult> {
    if source.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "source has {} points, target has {}",
            source.len(),
            target.len()
        )));
    }
    for cloud in [source, target] {
        let finite = cloud.points.iter().all(|p| p.iter().all(|x| x.is_finite()))
            && cloud.masses.iter().all(|m| m.is_finite());
        if !finite {
            return Err(Error::NonFiniteInput("point cloud contains NaN or Inf".into()));
        }
    }

    let pairs: Vec<(Vec3, Vec3, f64)> = source
        .points
        .iter()
        .zip(&target.points)
        .zip(source.masses.iter().zip(&target.masses))
        .filter(|(_, (ms, mt))| **ms > 0.0 && **mt > 0.0)
        .map(|((s, t), (ms, mt))| (*s, *t, ms.min(*mt)))
        .collect();
    if pairs.len() < 3 {
        return Err(Error::DegenerateGeometry {
            frame: None,
            reason: format!("only {} valid point pairs, need at least 3", pairs.len()),
        });
    }
    let total: f64 = pairs.iter().map(|p| p.2).sum();

    let mut cs = Vec3::zeros();
    let mut ct = Vec3::zeros();
    for (s, t, w) in &pairs {
        let w = w / total;
        cs += s * w;
        ct += t * w;
    }
    let mut h = Mat3::zeros();
    for (s, t, w) in &pairs {
        h += ((s - cs) * (w / total)) * (t - ct).transpose();
    }

    let svd = svd3(&h);
    let largest = svd.sigma[0];
    if !(largest > 0.0) || (svd.sigma[1] < DEGENERACY_RATIO * largest && svd.sigma[2] < DEGENERACY_RATIO * largest) {
        return Err(Error::DegenerateGeometry {
            frame: None,
            reason: "point cloud is collinear; rotation about its axis is unobservable".into(),
        });
    }

    let d = (svd.v * svd.u.transpose()).determinant().signum();
    let correction = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let rotation = svd.v * correction * svd.u.transpose();
    let translation = ct - rotation * cs;

    let sq: f64 = pairs
        .iter()
        .map(|(s, t, w)| (w / total) * (rotation * s + translation - t).norm_squared())
        .sum();

    Ok(AlignmentResult {
        transform: RigidTransform::new(rotation, translation),
        residual_rms: sq.sqrt(),
        condition: svd.sigma[2] / largest,
    })
}
