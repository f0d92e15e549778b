//! Reverse accumulation through compositing, decoder activations, and
//! shading weights.
//!
//! Gradients land on point features and confidences; positions are frozen.
//! The compositing reverse scan uses the suffix recurrence
//! `Q_m = (1 - a_{m+1}) Q_{m+1} + dL/dw_{m+1} * a_{m+1}` so that
//! `dL/da_m = T_m (dL/dw_m - Q_m)` never divides by `1 - a`, which stays
//! stable when a sample saturates.

use super::{Decoder, RayRecords, RenderConfig, WEIGHT_EPS};
use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::parallel::{map_chunks, worker_count};
use crate::scene::NeuralPointCloud;

/// Upstream loss gradients for one rendered ray.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RayGradient {
    pub d_color: [f64; 3],
    /// Ignored for rays that accumulated zero weight (sentinel depth).
    pub d_depth: f64,
}

/// Dense per-point gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffers {
    /// Flat N x F, same layout as `NeuralPointCloud::features_flat`.
    pub d_features: Vec<f64>,
    pub d_confidences: Vec<f64>,
    feature_dim: usize,
}

impl GradientBuffers {
    pub fn zeros(n_points: usize, feature_dim: usize) -> Self {
        GradientBuffers {
            d_features: vec![0.0; n_points * feature_dim],
            d_confidences: vec![0.0; n_points],
            feature_dim,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn d_feature(&self, i: usize) -> &[f64] {
        &self.d_features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    fn add_assign(&mut self, other: &GradientBuffers) {
        for (a, b) in self.d_features.iter_mut().zip(&other.d_features) {
            *a += b;
        }
        for (a, b) in self.d_confidences.iter_mut().zip(&other.d_confidences) {
            *a += b;
        }
    }
}

/// Backpropagates per-ray loss gradients through recorded forward passes.
///
/// Rays are processed in fixed chunks with per-chunk buffers merged in chunk
/// order, so the result is bit-identical for any worker count. Records carry
/// the cloud revision they were rendered from; a mismatch is rejected as
/// stale.
pub fn backward_rays(
    cloud: &NeuralPointCloud,
    cfg: &RenderConfig,
    decoder: &Decoder,
    rays: &[(&RayRecords, RayGradient)],
) -> Result<GradientBuffers> {
    backward_rays_threads(cloud, cfg, decoder, rays, worker_count())
}

/// `backward_rays` with an explicit worker count; the public entry point
/// resolves the count from the environment.
pub fn backward_rays_threads(
    cloud: &NeuralPointCloud,
    cfg: &RenderConfig,
    decoder: &Decoder,
    rays: &[(&RayRecords, RayGradient)],
    threads: usize,
) -> Result<GradientBuffers> {
    let revision = cloud.revision();
    for (rec, _) in rays {
        if rec.revision != revision {
            return Err(Error::invalid(
                "stale ray records: cloud changed since the forward pass",
            ));
        }
    }
    let n = cloud.len();
    let f_dim = cloud.feature_dim();
    let partials = map_chunks(rays.len(), 64, threads, |range| {
        let mut buf = GradientBuffers::zeros(n, f_dim);
        for i in range {
            let (rec, grad) = &rays[i];
            backward_one_ray(cloud, cfg, decoder, rec, *grad, &mut buf);
        }
        buf
    });
    let mut total = GradientBuffers::zeros(n, f_dim);
    for p in &partials {
        total.add_assign(p);
    }
    Ok(total)
}

fn backward_one_ray(
    cloud: &NeuralPointCloud,
    cfg: &RenderConfig,
    decoder: &Decoder,
    rec: &RayRecords,
    grad: RayGradient,
    buf: &mut GradientBuffers,
) {
    let samples = &rec.samples;
    if samples.is_empty() {
        return;
    }
    let f_dim = cloud.feature_dim();

    // Recompute the composited weight sum and depth from the records.
    let mut weight_sum = 0.0;
    let mut depth_acc = 0.0;
    for s in samples {
        let w = s.trans * s.alpha;
        weight_sum += w;
        depth_acc += w * s.t;
    }
    let w_floor = weight_sum.max(WEIGHT_EPS);
    let depth = depth_acc / w_floor;
    let use_depth = weight_sum > 0.0;

    // dL/dw_m for each recorded sample.
    let mut dldw = vec![0.0f64; samples.len()];
    for (m, s) in samples.iter().enumerate() {
        let rgb = [
            sigmoid(s.color_pre[0]),
            sigmoid(s.color_pre[1]),
            sigmoid(s.color_pre[2]),
        ];
        let mut v = 0.0;
        for c in 0..3 {
            v += grad.d_color[c] * (rgb[c] - cfg.background[c]);
        }
        if use_depth {
            // depth = depth_acc / max(weight_sum, eps); the max picks the
            // branch, matching forward exactly.
            let d_depth_d_w = if weight_sum > WEIGHT_EPS {
                (s.t - depth) / w_floor
            } else {
                s.t / WEIGHT_EPS
            };
            v += grad.d_depth * d_depth_d_w;
        }
        dldw[m] = v;
    }

    // Reverse scan for dL/dalpha_m, then down to parameters.
    let mut suffix_q = 0.0f64;
    let mut d_feat = vec![0.0f64; f_dim];
    for m in (0..samples.len()).rev() {
        let s = &samples[m];
        let dlda = s.trans * (dldw[m] - suffix_q);
        suffix_q = (1.0 - s.alpha) * suffix_q + dldw[m] * s.alpha;

        // alpha = 1 - exp(-min(sigma*delta, clamp)).
        let d_sigma = if s.clamped { 0.0 } else { dlda * s.delta * (1.0 - s.alpha) };
        let d_density_pre = d_sigma * sigmoid(s.density_pre);

        let w_m = s.trans * s.alpha;
        let mut d_color_pre = [0.0f64; 3];
        for c in 0..3 {
            let col = sigmoid(s.color_pre[c]);
            d_color_pre[c] = grad.d_color[c] * w_m * col * (1.0 - col);
        }

        // Through the fixed linear decoder onto the aggregated feature.
        for k in 0..f_dim {
            let mut g = decoder.density_row()[k] * d_density_pre;
            for c in 0..3 {
                g += decoder.color_row(c)[k] * d_color_pre[c];
            }
            d_feat[k] = g;
        }

        // Through the normalized shading weights onto points.
        let wsum = s.weight_sum;
        for nb in &s.neighbors {
            let p = nb.point as usize;
            let frac = nb.weight / wsum;
            let pf = cloud.feature(p);
            let mut d_w_scalar = 0.0;
            for k in 0..f_dim {
                buf.d_features[p * f_dim + k] += frac * d_feat[k];
                d_w_scalar += d_feat[k] * (pf[k] - s.feature[k]);
            }
            d_w_scalar /= wsum;
            buf.d_confidences[p] += d_w_scalar * nb.inv_dist;
        }
    }
}
