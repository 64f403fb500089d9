use nalgebra::Matrix3x2;

use super::{CameraPose, CorrespondenceSet, EssentialMatrix, Mat3, Vec3};
use crate::error::{Error, Result};

/// Number of highest-weighted correspondences used for the cheirality vote.
pub const CHEIRALITY_POINTS: usize = 20;

/// The four `(R, t)` factorizations of an essential matrix.
pub fn decompose_essential(e: &EssentialMatrix) -> Result<[(Mat3, Vec3); 4]> {
    let svd = e.matrix().svd(true, true);
    let s = svd.singular_values;
    if !(s[1] > 1e-12 * s[0].max(1e-300)) {
        return Err(Error::Degenerate("essential matrix has rank below 2".into()));
    }
    let mut u = svd.u.expect("u requested");
    let mut vt = svd.v_t.expect("v requested");
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t = u.column(2).into_owned();
    Ok([(r1, t), (r1, -t), (r2, t), (r2, -t)])
}

/// Depths `(z1, z2)` with `z2 x2 = z1 R x1 + t` in the least-squares sense.
fn triangulate_depths(r: &Mat3, t: &Vec3, x1: [f64; 2], x2: [f64; 2]) -> Option<(f64, f64)> {
    let a = r * Vec3::new(x1[0], x1[1], 1.0);
    let b = Vec3::new(x2[0], x2[1], 1.0);
    let m = Matrix3x2::from_columns(&[a, -b]);
    let mtm = m.transpose() * m;
    let z = mtm.try_inverse()? * (m.transpose() * -t);
    Some((z[0], z[1]))
}

/// Indices of the `k` largest weights, ties broken by lower index.
fn top_weighted(weights: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Picks the factorization placing the most of the top-weighted
/// correspondences in front of both cameras.
pub fn recover_pose(e: &EssentialMatrix, set: &CorrespondenceSet, weights: &[f64]) -> Result<CameraPose> {
    if weights.len() != set.len() {
        return Err(Error::Shape {
            op: "recover_pose",
            detail: format!("{} weights for {} correspondences", weights.len(), set.len()),
        });
    }
    let chosen = top_weighted(weights, CHEIRALITY_POINTS);
    let candidates = decompose_essential(e)?;
    let mut best = (0usize, None);
    for (r, t) in candidates {
        let votes = chosen
            .iter()
            .filter(|&&i| {
                triangulate_depths(&r, &t, set.first(i), set.second(i))
                    .is_some_and(|(z1, z2)| z1 > 0.0 && z2 > 0.0)
            })
            .count();
        if best.1.is_none() || votes > best.0 {
            best = (votes, Some((r, t)));
        }
    }
    let (r, t) = best.1.expect("four candidates");
    CameraPose::new(r, t)
}

/// Angle of `R_estᵀ R_gt` in degrees.
pub fn rotation_error_deg(r_est: &Mat3, r_gt: &Mat3) -> f64 {
    let d = r_est.transpose() * r_gt;
    let cos = (d.trace() - 1.0) / 2.0;
    let axis = Vec3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)]);
    let sin = axis.norm() / 2.0;
    sin.atan2(cos).to_degrees()
}

/// Angle between translation directions in degrees, ignoring sign.
pub fn translation_error_deg(t_est: &Vec3, t_gt: &Vec3) -> f64 {
    let angle = t_est.cross(t_gt).norm().atan2(t_est.dot(t_gt)).to_degrees();
    angle.min(180.0 - angle)
}

/// `(rotation error, translation error)` in degrees of the pose recovered
/// from `e_est` against the ground truth.
pub fn pose_error(
    e_est: &EssentialMatrix,
    pose_gt: &CameraPose,
    set: &CorrespondenceSet,
    weights: &[f64],
) -> Result<(f64, f64)> {
    let pose = recover_pose(e_est, set, weights)?;
    Ok((
        rotation_error_deg(&pose.rotation, &pose_gt.rotation),
        translation_error_deg(&pose.translation, &pose_gt.translation),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};

    #[test]
    fn ten_degree_offset_about_any_axis() {
        let base = Rotation3::from_euler_angles(0.3, -0.1, 0.7).into_inner();
        for axis in [Vec3::x(), Vec3::new(1.0, 2.0, -0.5), Vec3::new(-0.2, 0.1, 1.0)] {
            let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), 10f64.to_radians());
            let err = rotation_error_deg(&(rot.into_inner() * base), &base);
            assert!((err - 10.0).abs() < 1e-6, "{err}");
        }
    }

    #[test]
    fn translation_error_ignores_sign() {
        let t = Vec3::new(0.2, -0.4, 0.9);
        assert_eq!(translation_error_deg(&-t, &t), 0.0);
        assert!((translation_error_deg(&Vec3::x(), &Vec3::y()) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn top_weighted_breaks_ties_by_index() {
        assert_eq!(top_weighted(&[0.5, 1.0, 0.5, 1.0], 3), vec![1, 3, 0]);
    }
}
