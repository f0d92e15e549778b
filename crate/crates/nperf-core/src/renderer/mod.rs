//! Point-based differentiable volume renderer.
//!
//! Shading aggregates neighboring point features with inverse-distance times
//! confidence weights; a fixed linear-before-activation decoder maps features
//! to density (softplus) and color (sigmoid); alpha compositing accumulates
//! color and depth along stratified ray samples. The backward pass
//! (`backward.rs`) reverses the whole chain analytically for point features
//! and confidences; point positions receive no gradients and stay frozen.

mod backward;

pub use backward::{backward_rays, backward_rays_threads, GradientBuffers, RayGradient};

use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus, softplus_inv, logit, solve_dense, Vec3};
use crate::parallel::{map_chunks, worker_count};
use crate::scene::{camera_ray, Camera, DepthMap, NeuralPointCloud, Ray};
use crate::spatial::PointIndex;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Distance clamp in shading weights; avoids the 1/0 singularity when a
/// shading point coincides with a cloud point.
pub const DIST_CLAMP: f64 = 1e-6;
/// Floor in the depth normalization `depth = sum(w t) / max(sum w, EPS)`.
pub const WEIGHT_EPS: f64 = 1e-6;
/// sigma * delta is clamped here before exponentiation; the clamp also zeroes
/// the density gradient, which the gradient tests exercise.
pub const SIGMA_DELTA_CLAMP: f64 = 80.0;

/// Forward-rendering configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    /// Samples per ray (N_s).
    pub samples_per_ray: usize,
    /// Shading aggregation radius, world units.
    pub aggregation_radius: f64,
    /// Max neighbors aggregated per shading point.
    pub max_neighbors: usize,
    /// Composited behind the scene when transmittance remains.
    pub background: [f64; 3],
    /// `None`: samples at stratum midpoints (bit-reproducible). `Some(seed)`:
    /// stratified jitter keyed on (seed, ray, sample).
    pub jitter: Option<u64>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_ray: 64,
            aggregation_radius: 0.15,
            max_neighbors: 8,
            background: [0.0, 0.0, 0.0],
            jitter: None,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(Error::invalid("samples_per_ray must be >= 2"));
        }
        if self.aggregation_radius <= 0.0 {
            return Err(Error::invalid("aggregation_radius must be positive"));
        }
        if self.max_neighbors < 1 {
            return Err(Error::invalid("max_neighbors must be >= 1"));
        }
        if !self.background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::invalid("background color must be in [0,1]"));
        }
        Ok(())
    }
}

/// Fixed feature decoder: one linear row for density pre-activation, three for
/// color pre-activations. Softplus/sigmoid activations keep gradients simple
/// and exact. Parameters derive deterministically from a seed, so a scene
/// manifest's seed fully reproduces its renders.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    feature_dim: usize,
    w_density: Vec<f64>,
    b_density: f64,
    w_color: [Vec<f64>; 3],
    b_color: [f64; 3],
}

impl Decoder {
    pub fn from_seed(seed: u64, feature_dim: usize) -> Result<Self> {
        if feature_dim < 4 {
            return Err(Error::invalid("decoder needs feature_dim >= 4"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ec0defeed);
        let scale = 1.0 / (feature_dim as f64).sqrt();
        let mut row = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()
        };
        let w_density = row(feature_dim);
        let w_color = [row(feature_dim), row(feature_dim), row(feature_dim)];
        // Zero features decode to a nearly transparent mist (softplus(-1.5)
        // density) and mid-range colors. Un-initialized resampled points
        // should barely occlude until fine-tuning gives them substance.
        let b_density = -1.5;
        let b_color = [
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
        ];
        let d = Decoder { feature_dim, w_density, b_density, w_color, b_color };
        // Reject the (measure-zero) degenerate draw where the four rows do not
        // span rank 4; feature fitting needs the full span.
        d.fit_feature(1.0, [0.5, 0.5, 0.5])?;
        Ok(d)
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn density_row(&self) -> &[f64] {
        &self.w_density
    }

    pub fn color_row(&self, channel: usize) -> &[f64] {
        &self.w_color[channel]
    }

    /// Pre-activation outputs (density_pre, color_pre).
    pub fn decode_pre(&self, feature: &[f64]) -> (f64, [f64; 3]) {
        debug_assert_eq!(feature.len(), self.feature_dim);
        let dot = |w: &[f64]| -> f64 { w.iter().zip(feature).map(|(a, b)| a * b).sum() };
        let density_pre = dot(&self.w_density) + self.b_density;
        let color_pre = [
            dot(&self.w_color[0]) + self.b_color[0],
            dot(&self.w_color[1]) + self.b_color[1],
            dot(&self.w_color[2]) + self.b_color[2],
        ];
        (density_pre, color_pre)
    }

    /// Activated outputs (sigma, rgb).
    pub fn decode(&self, feature: &[f64]) -> (f64, [f64; 3]) {
        let (dp, cp) = self.decode_pre(feature);
        (softplus(dp), [sigmoid(cp[0]), sigmoid(cp[1]), sigmoid(cp[2])])
    }

    /// Minimum-norm feature vector that decodes exactly to the requested
    /// density and color. Ground-truth scene features come from here, which
    /// makes supervision renderer-consistent by construction.
    pub fn fit_feature(&self, sigma: f64, rgb: [f64; 3]) -> Result<Vec<f64>> {
        if sigma <= 0.0 || !rgb.iter().all(|c| (0.0..1.0).contains(c) && *c > 0.0) {
            return Err(Error::invalid("fit_feature needs sigma > 0 and rgb in (0,1)"));
        }
        let targets = [
            softplus_inv(sigma) - self.b_density,
            logit(rgb[0]) - self.b_color[0],
            logit(rgb[1]) - self.b_color[1],
            logit(rgb[2]) - self.b_color[2],
        ];
        let rows: [&[f64]; 4] =
            [&self.w_density, &self.w_color[0], &self.w_color[1], &self.w_color[2]];
        // Min-norm solution f = A^T (A A^T)^{-1} y for the underdetermined
        // 4 x F system A f = y.
        let mut gram = vec![vec![0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                gram[i][j] = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
            }
        }
        let mut y = targets;
        let lambda = solve_dense(&mut gram, &mut y)
            .ok_or_else(|| Error::numerical("decoder rows are rank-deficient"))?;
        let mut f = vec![0.0; self.feature_dim];
        for (i, row) in rows.iter().enumerate() {
            for (k, fv) in f.iter_mut().enumerate() {
                *fv += lambda[i] * row[k];
            }
        }
        Ok(f)
    }
}

/// One aggregated neighbor inside a shading sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadeNeighbor {
    pub point: u32,
    /// Aggregation weight w_k = omega_k * inv_dist_k.
    pub weight: f64,
    /// 1 / max(dist, DIST_CLAMP), kept for the backward pass.
    pub inv_dist: f64,
}

/// Aggregated feature at a shading point, plus everything the backward pass
/// needs to redistribute gradients onto the contributing points.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadeSample {
    pub feature: Vec<f64>,
    pub neighbors: Vec<ShadeNeighbor>,
    pub weight_sum: f64,
    /// No points in range (or zero total weight): the sample is empty space.
    pub vacuum: bool,
}

/// Inverse-distance, confidence-scaled feature aggregation at `x`.
pub fn shade_point(
    cloud: &NeuralPointCloud,
    index: &PointIndex,
    x: Vec3,
    cfg: &RenderConfig,
) -> ShadeSample {
    let mut scratch = Vec::with_capacity(cfg.max_neighbors);
    shade_point_into(cloud, index, x, cfg, &mut scratch)
}

fn shade_point_into(
    cloud: &NeuralPointCloud,
    index: &PointIndex,
    x: Vec3,
    cfg: &RenderConfig,
    scratch: &mut Vec<crate::spatial::Neighbor>,
) -> ShadeSample {
    index.knn_into(x, cfg.max_neighbors, cfg.aggregation_radius, None, scratch);
    let f_dim = cloud.feature_dim();
    let mut neighbors = Vec::with_capacity(scratch.len());
    let mut weight_sum = 0.0;
    for h in scratch.iter() {
        let inv_dist = 1.0 / h.dist.max(DIST_CLAMP);
        let weight = cloud.confidence(h.index) * inv_dist;
        weight_sum += weight;
        neighbors.push(ShadeNeighbor { point: h.index as u32, weight, inv_dist });
    }
    if neighbors.is_empty() || weight_sum <= 0.0 {
        return ShadeSample {
            feature: vec![0.0; f_dim],
            neighbors,
            weight_sum,
            vacuum: true,
        };
    }
    let mut feature = vec![0.0; f_dim];
    for n in &neighbors {
        let pf = cloud.feature(n.point as usize);
        let w = n.weight / weight_sum;
        for (acc, v) in feature.iter_mut().zip(pf) {
            *acc += w * v;
        }
    }
    ShadeSample { feature, neighbors, weight_sum, vacuum: false }
}

/// Per-sample record kept for reverse accumulation. Vacuum samples contribute
/// nothing to compositing or gradients and are not recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// Stratum index m in [0, samples_per_ray).
    pub stratum: u32,
    pub t: f64,
    pub delta: f64,
    pub alpha: f64,
    /// Transmittance in front of this sample.
    pub trans: f64,
    pub density_pre: f64,
    pub color_pre: [f64; 3],
    /// True when sigma*delta hit the overflow clamp (gradient is zero there).
    pub clamped: bool,
    pub feature: Vec<f64>,
    pub neighbors: Vec<ShadeNeighbor>,
    pub weight_sum: f64,
}

/// Everything backward needs from one ray's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RayRecords {
    pub samples: Vec<SampleRecord>,
    /// Cloud revision stamp taken at forward time; backward rejects records
    /// that do not match the cloud it is given.
    pub revision: u64,
}

/// Forward result for a single ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayRender {
    pub color: [f64; 3],
    /// `None` when the ray accumulated exactly zero weight.
    pub depth: Option<f64>,
    pub weight_sum: f64,
    pub records: Option<RayRecords>,
}

/// Renders one ray. `with_records` controls whether backward-pass state is
/// retained. `revision` is the cloud's stamp (pass `cloud.revision()`, or a
/// cached copy when rendering many rays).
pub fn render_ray(
    cloud: &NeuralPointCloud,
    index: &PointIndex,
    ray: &Ray,
    cfg: &RenderConfig,
    decoder: &Decoder,
    with_records: bool,
    revision: u64,
) -> RayRender {
    let mut scratch = Vec::with_capacity(cfg.max_neighbors);
    render_ray_into(cloud, index, ray, cfg, decoder, with_records, revision, &mut scratch)
}

#[allow(clippy::too_many_arguments)]
fn render_ray_into(
    cloud: &NeuralPointCloud,
    index: &PointIndex,
    ray: &Ray,
    cfg: &RenderConfig,
    decoder: &Decoder,
    with_records: bool,
    revision: u64,
    scratch: &mut Vec<crate::spatial::Neighbor>,
) -> RayRender {
    let n = cfg.samples_per_ray;
    let stratum = (ray.t_far - ray.t_near) / n as f64;
    let mut ts = Vec::with_capacity(n);
    for m in 0..n {
        let u = match cfg.jitter {
            None => 0.5,
            Some(seed) => jitter_unit(seed, ray, m),
        };
        ts.push(ray.t_near + (m as f64 + u) * stratum);
    }

    let mut trans = 1.0f64;
    let mut color = [0.0f64; 3];
    let mut weight_sum = 0.0f64;
    let mut depth_acc = 0.0f64;
    let mut samples = Vec::new();
    for m in 0..n {
        let delta = if m + 1 < n { ts[m + 1] - ts[m] } else { ray.t_far - ts[m] };
        let shade = shade_point_into(cloud, index, ray.at(ts[m]), cfg, scratch);
        if shade.vacuum {
            continue;
        }
        let (density_pre, color_pre) = decoder.decode_pre(&shade.feature);
        let sigma = softplus(density_pre);
        let z = sigma * delta;
        let clamped = z >= SIGMA_DELTA_CLAMP;
        let alpha = -(-z.min(SIGMA_DELTA_CLAMP)).exp_m1();
        let rgb = [sigmoid(color_pre[0]), sigmoid(color_pre[1]), sigmoid(color_pre[2])];
        let w = trans * alpha;
        for c in 0..3 {
            color[c] += w * rgb[c];
        }
        weight_sum += w;
        depth_acc += w * ts[m];
        if with_records {
            samples.push(SampleRecord {
                stratum: m as u32,
                t: ts[m],
                delta,
                alpha,
                trans,
                density_pre,
                color_pre,
                clamped,
                feature: shade.feature,
                neighbors: shade.neighbors,
                weight_sum: shade.weight_sum,
            });
        }
        trans *= 1.0 - alpha;
        if trans < 1e-12 && !with_records {
            break; // fully occluded; forward-only path may stop early
        }
    }
    for c in 0..3 {
        color[c] += (1.0 - weight_sum) * cfg.background[c];
    }
    let depth = if weight_sum > 0.0 {
        Some(depth_acc / weight_sum.max(WEIGHT_EPS))
    } else {
        None
    };
    RayRender {
        color,
        depth,
        weight_sum,
        records: with_records.then_some(RayRecords { samples, revision }),
    }
}

/// Deterministic per-(ray, sample) jitter in [0, 1), keyed on the ray's bit
/// pattern so it is independent of evaluation order.
fn jitter_unit(seed: u64, ray: &Ray, m: usize) -> f64 {
    use crate::scene::texture_hash;
    let mut h = seed;
    for bits in [
        ray.origin.x.to_bits(),
        ray.origin.y.to_bits(),
        ray.origin.z.to_bits(),
        ray.direction.x.to_bits(),
        ray.direction.y.to_bits(),
        ray.direction.z.to_bits(),
        m as u64,
    ] {
        h = texture_hash(h ^ bits);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Full-frame render product.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB in [0, 1].
    pub color: Vec<[f64; 3]>,
    pub depth: DepthMap,
    /// Row-major per-pixel compositing weight sums, each in [0, 1].
    pub weight: Vec<f64>,
}

impl RenderOutput {
    pub fn pixel(&self, u: u32, v: u32) -> [f64; 3] {
        self.color[(v as usize) * (self.width as usize) + u as usize]
    }
}

/// Renders every pixel of `cam`. Deterministic when jitter is off, for any
/// worker count: pixels are independent and chunk boundaries are fixed.
pub fn render_view(
    cloud: &NeuralPointCloud,
    index: &PointIndex,
    cam: &Camera,
    cfg: &RenderConfig,
    decoder: &Decoder,
) -> Result<RenderOutput> {
    render_view_threads(cloud, index, cam, cfg, decoder, worker_count())
}

/// `render_view` with an explicit worker count.
pub fn render_view_threads(
    cloud: &NeuralPointCloud,
    index: &PointIndex,
    cam: &Camera,
    cfg: &RenderConfig,
    decoder: &Decoder,
    threads: usize,
) -> Result<RenderOutput> {
    cfg.validate()?;
    let (w, h) = (cam.width as usize, cam.height as usize);
    let revision = cloud.revision();
    // Per-ray depth is a t-distance along the ray; the depth raster stores
    // camera-z depth so it unprojects with the pinhole model.
    let forward = cam.rotation().transpose().mul_vec(crate::math::Vec3::new(0.0, 0.0, 1.0));
    let chunks = map_chunks(w * h, 256, threads, |range| {
        let mut scratch = Vec::with_capacity(cfg.max_neighbors);
        let mut out = Vec::with_capacity(range.len());
        for i in range {
            let (u, v) = ((i % w) as u32, (i / w) as u32);
            let ray = camera_ray(cam, u, v).expect("pixel in raster");
            let r = render_ray_into(cloud, index, &ray, cfg, decoder, false, revision, &mut scratch);
            let z_depth = r.depth.map(|t| t * ray.direction.dot(forward));
            out.push((r.color, z_depth, r.weight_sum));
        }
        out
    });
    let mut color = Vec::with_capacity(w * h);
    let mut depth = DepthMap::empty(cam.width, cam.height);
    let mut weight = Vec::with_capacity(w * h);
    let mut i = 0usize;
    for chunk in chunks {
        for (c, d, ws) in chunk {
            let (u, v) = ((i % w) as u32, (i / w) as u32);
            color.push(c);
            depth.set(u, v, d);
            weight.push(ws);
            i += 1;
        }
    }
    Ok(RenderOutput { width: cam.width, height: cam.height, color, depth, weight })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Mat3;

    fn lone_point_cloud(feature: &[f64]) -> NeuralPointCloud {
        NeuralPointCloud::new(
            vec![Vec3::new(0.0, 0.0, 2.0)],
            vec![1.0],
            feature.to_vec(),
            feature.len(),
        )
        .unwrap()
    }

    fn decoder() -> Decoder {
        Decoder::from_seed(11, 8).unwrap()
    }

    #[test]
    fn fit_feature_round_trips_through_decoder() {
        let dec = decoder();
        for (sigma, rgb) in [
            (25.0, [0.3, 0.6, 0.9]),
            (1.0, [0.05, 0.5, 0.95]),
            (60.0, [0.5, 0.5, 0.5]),
        ] {
            let f = dec.fit_feature(sigma, rgb).unwrap();
            let (s, c) = dec.decode(&f);
            assert!((s - sigma).abs() < 1e-9 * sigma.max(1.0));
            for i in 0..3 {
                assert!((c[i] - rgb[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shade_lone_point_returns_its_feature() {
        let dec = decoder();
        let f = dec.fit_feature(10.0, [0.2, 0.4, 0.6]).unwrap();
        let cloud = lone_point_cloud(&f);
        let index = PointIndex::build(cloud.positions());
        let cfg = RenderConfig { aggregation_radius: 0.5, ..Default::default() };
        // Exactly on the point: distance clamps to DIST_CLAMP, weights cancel.
        let s = shade_point(&cloud, &index, Vec3::new(0.0, 0.0, 2.0), &cfg);
        assert!(!s.vacuum);
        for (a, b) in s.feature.iter().zip(&f) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shade_two_equidistant_points_averages() {
        let dec = decoder();
        let fa = dec.fit_feature(5.0, [0.2, 0.2, 0.2]).unwrap();
        let fb = dec.fit_feature(9.0, [0.8, 0.8, 0.8]).unwrap();
        let mut features = fa.clone();
        features.extend_from_slice(&fb);
        let cloud = NeuralPointCloud::new(
            vec![Vec3::new(-0.1, 0.0, 0.0), Vec3::new(0.1, 0.0, 0.0)],
            vec![0.7, 0.7],
            features,
            8,
        )
        .unwrap();
        let index = PointIndex::build(cloud.positions());
        let cfg = RenderConfig { aggregation_radius: 0.5, ..Default::default() };
        let s = shade_point(&cloud, &index, Vec3::ZERO, &cfg);
        for k in 0..8 {
            assert!((s.feature[k] - 0.5 * (fa[k] + fb[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn shade_matches_direct_weighted_sum() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let n = 40;
        let positions: Vec<Vec3> = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                )
            })
            .collect();
        let confidences: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let features: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cloud = NeuralPointCloud::new(positions.clone(), confidences.clone(), features.clone(), 4)
            .unwrap();
        let index = PointIndex::build(cloud.positions());
        let cfg = RenderConfig { aggregation_radius: 0.3, max_neighbors: 8, ..Default::default() };
        let q = Vec3::new(0.05, -0.02, 0.01);
        let s = shade_point(&cloud, &index, q, &cfg);

        // Direct-sum oracle over the nearest <= 8 points within the radius.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            q.dist_sq(positions[a])
                .partial_cmp(&q.dist_sq(positions[b]))
                .unwrap()
                .then(a.cmp(&b))
        });
        let picked: Vec<usize> = order
            .into_iter()
            .filter(|&i| q.dist(positions[i]) <= 0.3)
            .take(8)
            .collect();
        let mut wsum = 0.0;
        let mut want = vec![0.0; 4];
        for &i in &picked {
            let w = confidences[i] / q.dist(positions[i]).max(DIST_CLAMP);
            wsum += w;
            for k in 0..4 {
                want[k] += w * features[i * 4 + k];
            }
        }
        for v in want.iter_mut() {
            *v /= wsum;
        }
        for k in 0..4 {
            assert!((s.feature[k] - want[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_cloud_renders_background() {
        let dec = decoder();
        let cloud = NeuralPointCloud::empty(8);
        let index = PointIndex::build(cloud.positions());
        let cfg = RenderConfig { background: [0.1, 0.2, 0.3], ..Default::default() };
        let ray = Ray::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), 0.1, 5.0).unwrap();
        let r = render_ray(&cloud, &index, &ray, &cfg, &dec, false, cloud.revision());
        assert_eq!(r.color, [0.1, 0.2, 0.3]);
        assert_eq!(r.weight_sum, 0.0);
        assert_eq!(r.depth, None);
    }

    #[test]
    fn opaque_sample_dominates() {
        // A lone very dense point: color comes out as its decoded color and
        // depth as the sample position that hits it.
        let dec = decoder();
        let f = dec.fit_feature(5000.0, [0.25, 0.5, 0.75]).unwrap();
        let cloud = lone_point_cloud(&f);
        let index = PointIndex::build(cloud.positions());
        let cfg = RenderConfig {
            samples_per_ray: 64,
            aggregation_radius: 0.2,
            ..Default::default()
        };
        let ray = Ray::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), 0.0, 4.0).unwrap();
        let r = render_ray(&cloud, &index, &ray, &cfg, &dec, false, cloud.revision());
        assert!(r.weight_sum > 0.999);
        for (got, want) in r.color.iter().zip([0.25, 0.5, 0.75]) {
            assert!((got - want).abs() < 1e-3);
        }
        assert!((r.depth.unwrap() - 2.0).abs() < 0.2001);
    }

    #[test]
    fn two_sample_hand_quadrature() {
        // Hand-computed compositing for two known (sigma, color, delta).
        let dec = decoder();
        let f1 = dec.fit_feature(3.0, [0.9, 0.1, 0.1]).unwrap();
        let f2 = dec.fit_feature(7.0, [0.1, 0.9, 0.1]).unwrap();
        let mut features = f1.clone();
        features.extend_from_slice(&f2);
        // Two points spaced so each of two strata shades exactly one point.
        let cloud = NeuralPointCloud::new(
            vec![Vec3::new(0.0, 0.0, 0.5), Vec3::new(0.0, 0.0, 1.5)],
            vec![1.0, 1.0],
            features,
            8,
        )
        .unwrap();
        let index = PointIndex::build(cloud.positions());
        let cfg = RenderConfig {
            samples_per_ray: 2,
            aggregation_radius: 0.45,
            background: [0.0, 0.0, 0.0],
            ..Default::default()
        };
        let ray = Ray::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), 0.0, 2.0).unwrap();
        let r = render_ray(&cloud, &index, &ray, &cfg, &dec, false, cloud.revision());
        // Samples at t=0.5 and t=1.5; delta_0 = 1.0, delta_1 = 0.5.
        let a1 = 1.0 - (-3.0f64 * 1.0).exp();
        let a2 = 1.0 - (-7.0f64 * 0.5).exp();
        let t2 = 1.0 - a1;
        let expect_r = a1 * 0.9 + t2 * a2 * 0.1;
        let expect_g = a1 * 0.1 + t2 * a2 * 0.9;
        let expect_w = a1 + t2 * a2;
        let expect_d = (a1 * 0.5 + t2 * a2 * 1.5) / expect_w;
        assert!((r.color[0] - expect_r).abs() < 1e-9);
        assert!((r.color[1] - expect_g).abs() < 1e-9);
        assert!((r.weight_sum - expect_w).abs() < 1e-9);
        assert!((r.depth.unwrap() - expect_d).abs() < 1e-9);
    }

    #[test]
    fn occlusion_depth_is_near_surface() {
        // Two opaque walls: rendered depth matches the nearer one within a
        // sample spacing.
        let dec = decoder();
        let f = dec.fit_feature(800.0, [0.5, 0.5, 0.5]).unwrap();
        let mut features = f.clone();
        features.extend_from_slice(&f);
        let cloud = NeuralPointCloud::new(
            vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 3.0)],
            vec![1.0, 1.0],
            features,
            8,
        )
        .unwrap();
        let index = PointIndex::build(cloud.positions());
        let cfg = RenderConfig {
            samples_per_ray: 64,
            aggregation_radius: 0.12,
            ..Default::default()
        };
        let ray = Ray::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), 0.0, 4.0).unwrap();
        let r = render_ray(&cloud, &index, &ray, &cfg, &dec, false, cloud.revision());
        let spacing = 4.0 / 64.0;
        assert!((r.depth.unwrap() - 1.0).abs() <= spacing + 0.12);
    }

    #[test]
    fn weight_sums_conserved_in_unit_interval() {
        let dec = decoder();
        let f = dec.fit_feature(40.0, [0.4, 0.5, 0.6]).unwrap();
        let cloud = lone_point_cloud(&f);
        let index = PointIndex::build(cloud.positions());
        let cam = Camera::from_pinhole(
            20.0,
            20.0,
            8.0,
            8.0,
            Mat3::IDENTITY,
            Vec3::ZERO,
            16,
            16,
            0.1,
            6.0,
        )
        .unwrap();
        let cfg = RenderConfig { aggregation_radius: 0.3, ..Default::default() };
        let out = render_view(&cloud, &index, &cam, &cfg, &dec).unwrap();
        for &w in &out.weight {
            assert!((0.0..=1.0).contains(&w));
        }
        for px in &out.color {
            for c in px {
                assert!((0.0..=1.0).contains(c));
            }
        }
    }

    #[test]
    fn weight_sum_monotone_in_density() {
        // Raising a point's density never lowers a pixel's weight sum.
        let dec = decoder();
        let cfg = RenderConfig { samples_per_ray: 16, aggregation_radius: 0.4, ..Default::default() };
        let ray = Ray::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), 0.0, 4.0).unwrap();
        let mut prev = 0.0;
        for sigma in [0.5, 2.0, 8.0, 40.0, 200.0] {
            let f = dec.fit_feature(sigma, [0.5, 0.5, 0.5]).unwrap();
            let cloud = lone_point_cloud(&f);
            let index = PointIndex::build(cloud.positions());
            let r = render_ray(&cloud, &index, &ray, &cfg, &dec, false, cloud.revision());
            assert!(r.weight_sum >= prev);
            assert!((0.0..=1.0).contains(&r.weight_sum));
            prev = r.weight_sum;
        }
    }

    #[test]
    fn jitter_off_render_is_bit_reproducible() {
        let dec = decoder();
        let f = dec.fit_feature(40.0, [0.4, 0.5, 0.6]).unwrap();
        let cloud = lone_point_cloud(&f);
        let index = PointIndex::build(cloud.positions());
        let cam = Camera::from_pinhole(
            20.0,
            20.0,
            8.0,
            8.0,
            Mat3::IDENTITY,
            Vec3::ZERO,
            16,
            16,
            0.1,
            6.0,
        )
        .unwrap();
        let cfg = RenderConfig { aggregation_radius: 0.3, ..Default::default() };
        let a = render_view(&cloud, &index, &cam, &cfg, &dec).unwrap();
        let b = render_view(&cloud, &index, &cam, &cfg, &dec).unwrap();
        assert_eq!(a, b);
    }
}
