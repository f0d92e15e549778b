//! Differentiable neural-point resampling: filling vacated or empty regions
//! with features aggregated from surrounding unmasked points.
//!
//! Three strategies of increasing sophistication:
//! - NI: uniform average of the existing feature and its K neighbors,
//!   `f' = (f + sum_k f_k) / (K+1)`.
//! - KWA: confidence-weighted, `f' = ((1 - mean(w)) f + sum_k w_k f_k) / (K+1)`.
//!   The coefficients deliberately do not sum to one; formula fidelity wins
//!   over normalization.
//! - GWFA: neighbors weighted by a Gaussian in feature space centered on the
//!   neighborhood mean, `f' = sum_k g_k f_k / sum_k g_k`. Identical neighbor
//!   features collapse the Gaussian, so below `sigma_floor` the uniform mean
//!   is returned instead.
//!
//! Resampling never moves or mutates existing points; it only appends new
//! ones at planned target positions.

use crate::error::{Error, Result};
use crate::geometry::median_nn_spacing;
use crate::math::Vec3;
use crate::scene::{Camera, DepthMap, Mask2D, Mask3D, NeuralPointCloud};
use crate::spatial::{Neighbor, PointIndex};
use std::collections::BTreeSet;

/// Unmasked-pixel count used for inverse-distance depth inpainting.
const IDW_PIXEL_NEIGHBORS: usize = 8;

/// Resampling strategy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DnrStrategy {
    /// Append targets with zero features and confidence 0.5 (the ablation
    /// baseline: geometry without feature initialization).
    None,
    Ni,
    Kwa,
    Gwfa,
}

impl DnrStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DnrStrategy::None),
            "ni" => Ok(DnrStrategy::Ni),
            "kwa" => Ok(DnrStrategy::Kwa),
            "gwfa" => Ok(DnrStrategy::Gwfa),
            other => Err(Error::invalid(format!("unknown DNR strategy '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DnrStrategy::None => "none",
            DnrStrategy::Ni => "ni",
            DnrStrategy::Kwa => "kwa",
            DnrStrategy::Gwfa => "gwfa",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnrConfig {
    pub strategy: DnrStrategy,
    /// Neighbor count K.
    pub k: usize,
    /// Fallback threshold for GWFA's feature-space deviation.
    pub sigma_floor: f64,
}

impl Default for DnrConfig {
    fn default() -> Self {
        DnrConfig { strategy: DnrStrategy::Gwfa, k: 8, sigma_floor: 1e-8 }
    }
}

impl DnrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::invalid("neighbor count k must be >= 1"));
        }
        if self.sigma_floor <= 0.0 {
            return Err(Error::invalid("sigma_floor must be positive"));
        }
        Ok(())
    }
}

/// `f' = (f + sum_k f_k) / (K + 1)`.
pub fn ni(feature: &[f64], neighbors: &[&[f64]]) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(Error::invalid("NI needs at least one neighbor"));
    }
    let k = neighbors.len() as f64;
    let mut out = feature.to_vec();
    for nf in neighbors {
        if nf.len() != feature.len() {
            return Err(Error::invalid("neighbor feature dimension mismatch"));
        }
        for (acc, v) in out.iter_mut().zip(*nf) {
            *acc += v;
        }
    }
    for v in out.iter_mut() {
        *v /= k + 1.0;
    }
    Ok(out)
}

/// `f' = ((1 - mean(omega)) f + sum_k omega_k f_k) / (K + 1)`.
pub fn kwa(feature: &[f64], neighbors: &[(&[f64], f64)]) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(Error::invalid("KWA needs at least one neighbor"));
    }
    let k = neighbors.len() as f64;
    let mut omega_sum = 0.0;
    for (nf, omega) in neighbors {
        if nf.len() != feature.len() {
            return Err(Error::invalid("neighbor feature dimension mismatch"));
        }
        if !(0.0..=1.0).contains(omega) {
            return Err(Error::invalid("confidence outside [0, 1]"));
        }
        omega_sum += omega;
    }
    let self_coeff = 1.0 - omega_sum / k;
    let mut out: Vec<f64> = feature.iter().map(|v| self_coeff * v).collect();
    for (nf, omega) in neighbors {
        for (acc, v) in out.iter_mut().zip(*nf) {
            *acc += omega * v;
        }
    }
    for v in out.iter_mut() {
        *v /= k + 1.0;
    }
    Ok(out)
}

/// Gaussian-weighted aggregation over the neighbor features alone.
/// `mu = mean(f_k)`, `sigma^2 = mean(||f_k - mu||^2)`,
/// `g_k = exp(-||f_k - mu||^2 / (2 sigma^2)) / (sqrt(2 pi) sigma)`,
/// `f' = sum g_k f_k / sum g_k`; below `sigma_floor` the result is `mu`.
pub fn gwfa(neighbors: &[&[f64]], sigma_floor: f64) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(Error::invalid("GWFA needs at least one neighbor"));
    }
    let dim = neighbors[0].len();
    if neighbors.iter().any(|nf| nf.len() != dim) {
        return Err(Error::invalid("neighbor feature dimension mismatch"));
    }
    let k = neighbors.len() as f64;
    let mut mu = vec![0.0; dim];
    for nf in neighbors {
        for (acc, v) in mu.iter_mut().zip(*nf) {
            *acc += v;
        }
    }
    for v in mu.iter_mut() {
        *v /= k;
    }
    let dev_sq: Vec<f64> = neighbors
        .iter()
        .map(|nf| nf.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let sigma_sq = dev_sq.iter().sum::<f64>() / k;
    let sigma = sigma_sq.sqrt();
    if sigma < sigma_floor {
        return Ok(mu);
    }
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
    let weights: Vec<f64> = dev_sq.iter().map(|d| norm * (-d / (2.0 * sigma_sq)).exp()).collect();
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 || !wsum.is_finite() {
        return Ok(mu);
    }
    let mut out = vec![0.0; dim];
    for (nf, w) in neighbors.iter().zip(&weights) {
        for (acc, v) in out.iter_mut().zip(*nf) {
            *acc += (w / wsum) * v;
        }
    }
    Ok(out)
}

/// One view's depth/mask context for planning background fill positions.
#[derive(Debug, Clone, Copy)]
pub struct ResampleView<'a> {
    pub camera: &'a Camera,
    pub depth: &'a DepthMap,
    pub mask: &'a Mask2D,
}

/// Positions to fill plus, for each, its K nearest unmasked source points.
#[derive(Debug, Clone, PartialEq)]
pub struct ResamplePlan {
    pub targets: Vec<Vec3>,
    /// Per target: up to K (index, distance) pairs into the planning cloud,
    /// ascending by distance. Nonempty for every target.
    pub neighbors: Vec<Vec<Neighbor>>,
    /// Masked pixels skipped during depth inpainting for lack of any
    /// unmasked depth (reported, not fatal).
    pub skipped_pixels: usize,
}

impl ResamplePlan {
    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Plans resample targets for a post-edit cloud: the vacated positions plus
/// depth-inpainted background positions behind each view's mask. Neighbor
/// lists draw only from points outside `exclude`.
pub fn plan_resample(
    cloud_after_edit: &NeuralPointCloud,
    vacated: &[Vec3],
    views: &[ResampleView],
    cfg: &DnrConfig,
    exclude: Option<&Mask3D>,
) -> Result<ResamplePlan> {
    cfg.validate()?;
    if cloud_after_edit.is_empty() {
        return Err(Error::invalid("cannot plan resampling over an empty cloud"));
    }
    let exclude_bits = exclude.map(|m| m.to_bitmap(cloud_after_edit.len()));
    let n_excluded = exclude.map(|m| m.len()).unwrap_or(0);
    if n_excluded >= cloud_after_edit.len() {
        return Err(Error::invalid("nothing to aggregate from: no unmasked points"));
    }

    // Deduplicate targets on a voxel grid at half the median point spacing.
    // Vacated positions always survive; background fills are dropped when
    // their voxel is already claimed.
    let spacing = median_nn_spacing(cloud_after_edit.positions());
    let voxel = (spacing * 0.5).max(1e-9);
    let key = |p: Vec3| -> (i64, i64, i64) {
        (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        )
    };
    let mut seen: BTreeSet<(i64, i64, i64)> = BTreeSet::new();
    let mut targets: Vec<Vec3> = Vec::new();
    for &p in vacated {
        seen.insert(key(p));
        targets.push(p);
    }

    let mut skipped_pixels = 0usize;
    for view in views {
        let (fills, skipped) = inpaint_mask_depth(view)?;
        skipped_pixels += skipped;
        for p in fills {
            if seen.insert(key(p)) {
                targets.push(p);
            }
        }
    }

    let index = PointIndex::build(cloud_after_edit.positions());
    let mut neighbors = Vec::with_capacity(targets.len());
    for &t in &targets {
        let hits = index.knn(t, cfg.k, exclude_bits.as_deref());
        debug_assert!(!hits.is_empty());
        neighbors.push(hits);
    }
    Ok(ResamplePlan { targets, neighbors, skipped_pixels })
}

/// For each masked pixel with unmasked depth nearby: inverse-distance mean of
/// the nearest unmasked finite depths, unprojected to a world position.
fn inpaint_mask_depth(view: &ResampleView) -> Result<(Vec<Vec3>, usize)> {
    let cam = view.camera;
    let mask = view.mask;
    let depth = view.depth;
    if mask.width != cam.width || mask.height != cam.height {
        return Err(Error::invalid("mask raster does not match camera"));
    }
    if depth.width != cam.width || depth.height != cam.height {
        return Err(Error::invalid("depth raster does not match camera"));
    }
    // Unmasked pixels that carry depth, as candidates for interpolation.
    let mut sources: Vec<(f64, f64, f64)> = Vec::new();
    for v in 0..cam.height {
        for u in 0..cam.width {
            if !mask.contains(u, v) {
                if let Some(d) = depth.get(u, v) {
                    sources.push((u as f64, v as f64, d));
                }
            }
        }
    }
    let mut fills = Vec::new();
    let mut skipped = 0usize;
    if sources.is_empty() {
        return Ok((fills, mask.count()));
    }
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(IDW_PIXEL_NEIGHBORS + 1);
    for (u, v) in mask.pixels() {
        best.clear();
        for (i, &(su, sv, _)) in sources.iter().enumerate() {
            let du = su - u as f64;
            let dv = sv - v as f64;
            let d_sq = du * du + dv * dv;
            let kkey = (d_sq, i);
            if best.len() == IDW_PIXEL_NEIGHBORS && kkey >= *best.last().unwrap() {
                continue;
            }
            let pos = best.partition_point(|&b| b < kkey);
            best.insert(pos, kkey);
            if best.len() > IDW_PIXEL_NEIGHBORS {
                best.pop();
            }
        }
        if best.is_empty() {
            skipped += 1;
            continue;
        }
        let mut wsum = 0.0;
        let mut dsum = 0.0;
        for &(d_sq, i) in &best {
            let w = 1.0 / d_sq.sqrt().max(1.0);
            wsum += w;
            dsum += w * sources[i].2;
        }
        let fill_depth = dsum / wsum;
        fills.push(cam.unproject(u as f64 + 0.5, v as f64 + 0.5, fill_depth));
    }
    Ok((fills, skipped))
}

/// Appends one point per plan target, with the feature produced by the
/// configured strategy and confidence equal to the mean neighbor confidence
/// (0.5 for strategy `None`). Existing points are untouched; target positions
/// are appended exactly as planned.
pub fn apply_dnr(
    cloud: &NeuralPointCloud,
    plan: &ResamplePlan,
    cfg: &DnrConfig,
) -> Result<NeuralPointCloud> {
    cfg.validate()?;
    let f_dim = cloud.feature_dim();
    let mut out = cloud.clone();
    for (target, hits) in plan.targets.iter().zip(&plan.neighbors) {
        if hits.is_empty() {
            return Err(Error::invalid("resample target with empty neighbor list"));
        }
        if hits.iter().any(|h| h.index >= cloud.len()) {
            return Err(Error::invalid("resample plan references points beyond the cloud"));
        }
        let (feature, confidence) = match cfg.strategy {
            DnrStrategy::None => (vec![0.0; f_dim], 0.5),
            strategy => {
                let feats: Vec<&[f64]> = hits.iter().map(|h| cloud.feature(h.index)).collect();
                let mean_conf = hits.iter().map(|h| cloud.confidence(h.index)).sum::<f64>()
                    / hits.len() as f64;
                let f = match strategy {
                    // Fresh targets have no feature of their own; the nearest
                    // unmasked neighbor's feature stands in for f(p_ij).
                    DnrStrategy::Ni => ni(feats[0], &feats)?,
                    DnrStrategy::Kwa => {
                        let pairs: Vec<(&[f64], f64)> = hits
                            .iter()
                            .map(|h| (cloud.feature(h.index), cloud.confidence(h.index)))
                            .collect();
                        kwa(feats[0], &pairs)?
                    }
                    DnrStrategy::Gwfa => gwfa(&feats, cfg.sigma_floor)?,
                    DnrStrategy::None => unreachable!(),
                };
                (f, mean_conf)
            }
        };
        out.push(*target, confidence.clamp(0.0, 1.0), &feature)?;
    }
    Ok(out)
}
