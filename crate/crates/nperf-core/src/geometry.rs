//! Ray/point transformations, mask lifting, and point registration.
//!
//! Rigid edits move rays and points through the same rotation+translation;
//! deformable edits (scale/shear about a pivot) generate per-point offsets.
//! Masks travel from 2D pixel sets to 3D index sets by depth unprojection and
//! nearest-neighbor registration.

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};
use crate::scene::{Camera, DepthMap, Mask2D, Mask3D, NeuralPointCloud, Ray};
use crate::spatial::PointIndex;

/// Rotation + translation, applied as `p' = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if rotation.orthonormality_error() > 1e-9 || (rotation.det() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("rigid rotation must be orthonormal with det +1"));
        }
        if !translation.is_finite() {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(RigidTransform { rotation, translation })
    }

    pub fn identity() -> Self {
        RigidTransform { rotation: Mat3::IDENTITY, translation: Vec3::ZERO }
    }

    pub fn rotation_about(axis: Vec3, angle_rad: f64, pivot: Vec3) -> Result<Self> {
        let axis = axis
            .normalized()
            .ok_or_else(|| Error::invalid("rotation axis must be nonzero"))?;
        let r = Mat3::rot_axis_angle(axis, angle_rad);
        // Rotate about the pivot: p' = R (p - c) + c = R p + (c - R c).
        let t = pivot - r.mul_vec(pivot);
        RigidTransform::new(r, t)
    }

    pub fn translation_by(offset: Vec3) -> Result<Self> {
        RigidTransform::new(Mat3::IDENTITY, offset)
    }
}

/// Per-point offset generator for non-rigid edits: per-axis scale or a shear
/// matrix, both about a pivot.
#[derive(Debug, Clone, PartialEq)]
pub enum DeformSpec {
    Scale { pivot: Vec3, factors: Vec3 },
    Shear { pivot: Vec3, matrix: Mat3 },
}

impl DeformSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DeformSpec::Scale { factors, .. } => {
                if factors.x <= 0.0 || factors.y <= 0.0 || factors.z <= 0.0 {
                    return Err(Error::invalid("scale factors must be positive"));
                }
            }
            DeformSpec::Shear { matrix, .. } => {
                for i in 0..3 {
                    if (matrix.m[i][i] - 1.0).abs() > 1e-12 {
                        return Err(Error::invalid("shear matrix must have unit diagonal"));
                    }
                }
                if matrix.det().abs() < 1e-12 {
                    return Err(Error::invalid("shear matrix must be invertible"));
                }
            }
        }
        Ok(())
    }
}

/// `p' = R p + t`.
pub fn apply_rigid_point(t: &RigidTransform, p: Vec3) -> Vec3 {
    t.rotation.mul_vec(p) + t.translation
}

/// Transformed ray: origin moves rigidly, direction rotates (and stays unit),
/// the sampling interval is unchanged.
///
/// The direction deliberately receives no translation: translating a
/// direction vector would break the transformed ray's geometry, and with
/// rotation-only directions the ray transform is pointwise equivalent to
/// transforming every sample `o + s d`.
pub fn apply_rigid_ray(t: &RigidTransform, r: &Ray) -> Ray {
    let origin = apply_rigid_point(t, r.origin);
    let direction = t.rotation.mul_vec(r.direction).normalized().unwrap();
    Ray { origin, direction, t_near: r.t_near, t_far: r.t_far }
}

/// Deformed point. Scale: `c + s ⊙ (p − c)`; shear: `c + S (p − c)`.
pub fn apply_deform_point(d: &DeformSpec, p: Vec3) -> Vec3 {
    match d {
        DeformSpec::Scale { pivot, factors } => *pivot + (p - *pivot).hadamard(*factors),
        DeformSpec::Shear { pivot, matrix } => *pivot + matrix.mul_vec(p - *pivot),
    }
}

/// Edit applied to the masked subset of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub enum EditOp {
    Remove,
    Rigid(RigidTransform),
    Deform(DeformSpec),
}

/// Applies `op` to the masked points. Returns the edited cloud and the
/// original positions of every masked point — the vacated region that
/// resampling must fill. Unmasked points are bit-identical in the output.
pub fn edit_masked_points(
    cloud: &NeuralPointCloud,
    mask: &Mask3D,
    op: &EditOp,
) -> Result<(NeuralPointCloud, Vec<Vec3>)> {
    if let Some(&max) = mask.indices().last() {
        if max >= cloud.len() {
            return Err(Error::invalid("mask index out of bounds for cloud"));
        }
    }
    if let EditOp::Deform(d) = op {
        d.validate()?;
    }
    let vacated: Vec<Vec3> = mask.indices().iter().map(|&i| cloud.position(i)).collect();
    let f = cloud.feature_dim();

    let edited = match op {
        EditOp::Remove => {
            let keep = mask.to_bitmap(cloud.len());
            let mut positions = Vec::with_capacity(cloud.len() - mask.len());
            let mut confidences = Vec::with_capacity(cloud.len() - mask.len());
            let mut features = Vec::with_capacity((cloud.len() - mask.len()) * f);
            for i in 0..cloud.len() {
                if !keep[i] {
                    positions.push(cloud.position(i));
                    confidences.push(cloud.confidence(i));
                    features.extend_from_slice(cloud.feature(i));
                }
            }
            NeuralPointCloud::new(positions, confidences, features, f)?
        }
        EditOp::Rigid(t) => {
            let mut positions = cloud.positions().to_vec();
            for &i in mask.indices() {
                positions[i] = apply_rigid_point(t, positions[i]);
            }
            NeuralPointCloud::new(
                positions,
                cloud.confidences().to_vec(),
                cloud.features_flat().to_vec(),
                f,
            )?
        }
        EditOp::Deform(d) => {
            let mut positions = cloud.positions().to_vec();
            for &i in mask.indices() {
                positions[i] = apply_deform_point(d, positions[i]);
            }
            NeuralPointCloud::new(
                positions,
                cloud.confidences().to_vec(),
                cloud.features_flat().to_vec(),
                f,
            )?
        }
    };
    Ok((edited, vacated))
}

/// Unprojects every finite-depth pixel to a world point. The result carries
/// unit confidence and zero features (geometry only).
pub fn unproject_depth(cam: &Camera, depth: &DepthMap) -> Result<NeuralPointCloud> {
    unproject_masked(cam, depth, None).map(|(cloud, _)| cloud)
}

/// Unprojection restricted to masked pixels. Returns the lifted point set and
/// the number of masked pixels skipped for missing depth.
pub fn lift_mask(cam: &Camera, depth: &DepthMap, mask: &Mask2D) -> Result<(Vec<Vec3>, usize)> {
    if mask.width != cam.width || mask.height != cam.height {
        return Err(Error::invalid("mask raster does not match camera"));
    }
    let (cloud, skipped) = unproject_masked(cam, depth, Some(mask))?;
    Ok((cloud.positions().to_vec(), skipped))
}

fn unproject_masked(
    cam: &Camera,
    depth: &DepthMap,
    mask: Option<&Mask2D>,
) -> Result<(NeuralPointCloud, usize)> {
    if depth.width != cam.width || depth.height != cam.height {
        return Err(Error::invalid("depth raster does not match camera"));
    }
    let mut positions = Vec::new();
    let mut skipped = 0usize;
    for v in 0..cam.height {
        for u in 0..cam.width {
            if let Some(m) = mask {
                if !m.contains(u, v) {
                    continue;
                }
            }
            match depth.get(u, v) {
                Some(d) => {
                    positions.push(cam.unproject(u as f64 + 0.5, v as f64 + 0.5, d));
                }
                None => skipped += 1,
            }
        }
    }
    let n = positions.len();
    let cloud = NeuralPointCloud::new(positions, vec![1.0; n], vec![0.0; n], 1)?;
    Ok((cloud, skipped))
}

/// Registers a lifted point set onto a cloud: a cloud point joins the mask
/// iff its nearest lifted point lies within `radius`.
pub fn register_mask(
    lifted: &[Vec3],
    cloud: &NeuralPointCloud,
    radius: f64,
) -> Result<Mask3D> {
    if radius <= 0.0 {
        return Err(Error::invalid("registration radius must be positive"));
    }
    if lifted.is_empty() {
        return Ok(Mask3D::empty());
    }
    let index = PointIndex::build(lifted);
    let mut hits = Vec::new();
    let mut out = Vec::new();
    for (i, &p) in cloud.positions().iter().enumerate() {
        index.knn_into(p, 1, radius, None, &mut hits);
        if !hits.is_empty() {
            out.push(i);
        }
    }
    Mask3D::new(out, cloud.len())
}

/// Median nearest-neighbor spacing of a point set; the scale-free unit used
/// for default radii. Zero for fewer than two points.
pub fn median_nn_spacing(positions: &[Vec3]) -> f64 {
    if positions.len() < 2 {
        return 0.0;
    }
    let index = PointIndex::build(positions);
    let mut dists: Vec<f64> = Vec::with_capacity(positions.len());
    let mut hits = Vec::new();
    for (i, &p) in positions.iter().enumerate() {
        let mut exclude = vec![false; positions.len()];
        exclude[i] = true;
        index.knn_into(p, 1, f64::INFINITY, Some(&exclude), &mut hits);
        if let Some(h) = hits.first() {
            dists.push(h.dist);
        }
    }
    dists.sort_by(f64::total_cmp);
    dists[dists.len() / 2]
}
