//! Discrete entropy and mutual-information estimators over ray sample
//! distributions.
//!
//! A ray's per-sample compositing weights, normalized, act as the probability
//! that "the feature at sample m is what the ray transmits". Features are
//! quantized through a shared projection + binning codebook so that
//! before/after-resampling comparisons use identical codes. The MI between
//! two rays pairs sample m with sample m (shared stratification), accumulates
//! `p_i[m] * p_j[m]` into the code-pair cell, normalizes, and evaluates the
//! standard discrete MI. All entropies are in nats.

use crate::error::{Error, Result};
use crate::renderer::{render_ray, Decoder, RayRecords, RenderConfig};
use crate::scene::{camera_ray, Camera, Mask2D, NeuralPointCloud};
use crate::spatial::PointIndex;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Quantization codebook plus pairing policy for scene-level MI.
#[derive(Debug, Clone, PartialEq)]
pub struct MiConfig {
    /// Number of feature code bins B.
    pub bins: usize,
    /// Projection vector mapping a feature to a scalar (first principal
    /// direction of the reference feature set).
    pub projection: Vec<f64>,
    /// Observed projection range used for uniform binning.
    pub lo: f64,
    pub hi: f64,
    /// Ray pairs sampled per adjacent camera pair.
    pub pairs_per_view: usize,
    pub seed: u64,
}

impl MiConfig {
    /// Fits the codebook on a reference feature set: features are first
    /// normalized to unit length (resampling strategies can rescale whole
    /// feature populations, and a linear projection must not spend its bins
    /// on that scale gap), then the first principal direction is found by
    /// seeded power iteration and uniform bins cover the 1%..99% projection
    /// quantiles.
    pub fn fit(
        features_flat: &[f64],
        feature_dim: usize,
        bins: usize,
        pairs_per_view: usize,
        seed: u64,
    ) -> Result<Self> {
        if bins < 2 {
            return Err(Error::invalid("need at least 2 bins"));
        }
        if feature_dim == 0 || features_flat.len() % feature_dim != 0 {
            return Err(Error::invalid("feature buffer does not match dimension"));
        }
        let n = features_flat.len() / feature_dim;
        if n == 0 {
            return Err(Error::invalid("cannot fit a codebook on zero features"));
        }
        let unit = |i: usize| -> Vec<f64> {
            let mut f = features_flat[i * feature_dim..(i + 1) * feature_dim].to_vec();
            normalize(&mut f);
            f
        };
        let mut mean = vec![0.0; feature_dim];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(unit(i)) {
                *m += v / n as f64;
            }
        }
        // Power iteration on the covariance, applied without materializing it:
        // C v = mean_i (f_i - mu) <f_i - mu, v>.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9147);
        let mut v: Vec<f64> = (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize(&mut v);
        for _ in 0..64 {
            let mut next = vec![0.0; feature_dim];
            for i in 0..n {
                let f = unit(i);
                let dot: f64 =
                    f.iter().zip(&mean).zip(&v).map(|((a, m), b)| (a - m) * b).sum();
                for ((acc, a), m) in next.iter_mut().zip(&f).zip(&mean) {
                    *acc += (a - m) * dot / n as f64;
                }
            }
            if !normalize(&mut next) {
                // Zero variance: any direction works; keep the current one.
                break;
            }
            v = next;
        }
        // Canonical sign: largest-magnitude component positive.
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[lead] < 0.0 {
            for c in v.iter_mut() {
                *c = -*c;
            }
        }
        // Robust range: 1%..99% projection quantiles. Outliers (a handful of
        // extreme feature fits) would otherwise stretch the range and
        // collapse the bulk of the codes into one or two bins.
        let mut projections: Vec<f64> = (0..n)
            .map(|i| unit(i).iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        projections.sort_by(f64::total_cmp);
        let q = |f: f64| projections[((f * (n - 1) as f64).round() as usize).min(n - 1)];
        let lo = q(0.01);
        let mut hi = q(0.99);
        if !(hi - lo).is_finite() || hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        Ok(MiConfig { bins, projection: v, lo, hi, pairs_per_view, seed })
    }

    /// Quantized code for a feature vector: the unit-normalized feature is
    /// projected and binned; out-of-range projections clamp to the edge bins.
    pub fn code(&self, feature: &[f64]) -> u16 {
        let norm: f64 = feature.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = if norm < 1e-300 { 0.0 } else { 1.0 / norm };
        let p: f64 = feature
            .iter()
            .zip(&self.projection)
            .map(|(a, b)| a * scale * b)
            .sum();
        let t = (p - self.lo) / (self.hi - self.lo);
        let b = (t * self.bins as f64).floor();
        (b.clamp(0.0, self.bins as f64 - 1.0)) as u16
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let n: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n < 1e-300 {
        return false;
    }
    for a in v.iter_mut() {
        *a /= n;
    }
    true
}

/// Normalized per-sample probability and quantized feature code along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayDistribution {
    probs: Vec<f64>,
    codes: Vec<u16>,
    bins: usize,
    /// Total compositing weight of the ray in [0, 1]: the probability that
    /// the ray transmits any feature event at all. 1 for hand-built
    /// distributions unless set explicitly.
    event_mass: f64,
}

impl RayDistribution {
    pub fn new(probs: Vec<f64>, codes: Vec<u16>, bins: usize) -> Result<Self> {
        Self::with_event_mass(probs, codes, bins, 1.0)
    }

    pub fn with_event_mass(
        probs: Vec<f64>,
        codes: Vec<u16>,
        bins: usize,
        event_mass: f64,
    ) -> Result<Self> {
        if probs.len() != codes.len() || probs.is_empty() {
            return Err(Error::invalid("distribution shape mismatch"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || probs.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) {
            return Err(Error::invalid("probabilities must be nonnegative and sum to 1"));
        }
        if codes.iter().any(|&c| (c as usize) >= bins) {
            return Err(Error::invalid("code out of bin range"));
        }
        if !(0.0..=1.0 + 1e-12).contains(&event_mass) {
            return Err(Error::invalid("event mass must be in [0, 1]"));
        }
        Ok(RayDistribution { probs, codes, bins, event_mass })
    }

    pub fn event_mass(&self) -> f64 {
        self.event_mass
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Builds a ray's distribution from its forward records: `p_m` proportional
/// to the compositing weight `T_m a_m`; a fully empty ray falls back to
/// uniform. Codes quantize the aggregated feature per sample; strata the ray
/// never shaded carry the zero-feature code and zero probability.
pub fn ray_distribution(
    records: &RayRecords,
    samples_per_ray: usize,
    cfg: &MiConfig,
) -> Result<RayDistribution> {
    if samples_per_ray == 0 {
        return Err(Error::invalid("ray must have at least one sample"));
    }
    let zero_code = cfg.code(&vec![0.0; cfg.projection.len()]);
    let mut probs = vec![0.0f64; samples_per_ray];
    let mut codes = vec![zero_code; samples_per_ray];
    let mut total = 0.0;
    for s in &records.samples {
        let m = s.stratum as usize;
        if m >= samples_per_ray {
            return Err(Error::invalid("record stratum beyond samples_per_ray"));
        }
        let w = s.trans * s.alpha;
        probs[m] = w;
        codes[m] = cfg.code(&s.feature);
        total += w;
    }
    if total > 0.0 {
        for p in probs.iter_mut() {
            *p /= total;
        }
    } else {
        let u = 1.0 / samples_per_ray as f64;
        probs.fill(u);
    }
    RayDistribution::with_event_mass(probs, codes, cfg.bins, total.clamp(0.0, 1.0))
}

/// Shannon entropy over the per-sample distribution, in nats.
pub fn entropy(d: &RayDistribution) -> f64 {
    d.probs
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

/// Discrete MI between two rays under index-aligned sample pairing: mass
/// `p_i[m] * p_j[m]` lands in cell `(code_i[m], code_j[m])`, the table is
/// normalized, and MI is evaluated against its own marginals. Rays whose
/// supports never overlap share no mass and score 0.
pub fn mutual_information(di: &RayDistribution, dj: &RayDistribution) -> Result<f64> {
    if di.bins != dj.bins {
        return Err(Error::invalid("bin count mismatch between distributions"));
    }
    if di.len() != dj.len() {
        return Err(Error::invalid("sample count mismatch between rays"));
    }
    let b = di.bins;
    let mut joint = vec![0.0f64; b * b];
    let mut z = 0.0;
    for m in 0..di.len() {
        let mass = di.probs[m] * dj.probs[m];
        if mass > 0.0 {
            joint[di.codes[m] as usize * b + dj.codes[m] as usize] += mass;
            z += mass;
        }
    }
    if z <= 0.0 {
        return Ok(0.0);
    }
    for cell in joint.iter_mut() {
        *cell /= z;
    }
    let mut pa = vec![0.0f64; b];
    let mut pb = vec![0.0f64; b];
    for a in 0..b {
        for bb in 0..b {
            pa[a] += joint[a * b + bb];
            pb[bb] += joint[a * b + bb];
        }
    }
    let mut mi = 0.0;
    for a in 0..b {
        for bb in 0..b {
            let p = joint[a * b + bb];
            if p > 0.0 {
                mi += p * (p / (pa[a] * pb[bb])).ln();
            }
        }
    }
    Ok(mi)
}

/// MI between the code variables of two corresponding-ray populations: the
/// joint is the event-mass-weighted mean over pairs of `outer(Q_i, Q_j)`,
/// where `Q_r` is ray r's transmittance-weighted code distribution. This is
/// the mutual information between "code transmitted by a ray of view A" and
/// "code transmitted by its corresponding ray of view B" with the pixel
/// marginalized. Weighting by the pair's joint event mass keeps rays that
/// transmit almost nothing (holes, thin mist) from fabricating dependence,
/// and the estimator stays informative for opaque scenes where individual
/// rays are nearly deterministic.
pub fn ensemble_mi(pairs: &[(RayDistribution, RayDistribution)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("ensemble MI needs at least one ray pair"));
    }
    let b = pairs[0].0.bins;
    if pairs.iter().any(|(di, dj)| di.bins != b || dj.bins != b) {
        return Err(Error::invalid("bin count mismatch in ray pair ensemble"));
    }
    let mut joint = vec![0.0f64; b * b];
    let total_mass: f64 = pairs.iter().map(|(di, dj)| di.event_mass * dj.event_mass).sum();
    if total_mass <= 0.0 {
        return Ok(0.0);
    }
    let mut qa = vec![0.0f64; b];
    let mut qb = vec![0.0f64; b];
    for (di, dj) in pairs {
        let w = di.event_mass * dj.event_mass / total_mass;
        if w == 0.0 {
            continue;
        }
        qa.fill(0.0);
        qb.fill(0.0);
        for m in 0..di.len() {
            qa[di.codes[m] as usize] += di.probs[m];
        }
        for m in 0..dj.len() {
            qb[dj.codes[m] as usize] += dj.probs[m];
        }
        for a in 0..b {
            if qa[a] == 0.0 {
                continue;
            }
            for bb in 0..b {
                joint[a * b + bb] += w * qa[a] * qb[bb];
            }
        }
    }
    let mut pa = vec![0.0f64; b];
    let mut pb = vec![0.0f64; b];
    for a in 0..b {
        for bb in 0..b {
            pa[a] += joint[a * b + bb];
            pb[bb] += joint[a * b + bb];
        }
    }
    let mut mi = 0.0;
    for a in 0..b {
        for bb in 0..b {
            let p = joint[a * b + bb];
            if p > 0.0 {
                mi += p * (p / (pa[a] * pb[bb])).ln();
            }
        }
    }
    Ok(mi)
}

/// Scene-level MI: for every adjacent camera pair, the [`ensemble_mi`] of
/// seeded ray pairs, averaged over camera pairs. A pair couples a pixel of
/// the first view with the same pixel of the second view. When masks are
/// given, pixels are drawn from the first view's mask — the diagnostic asks
/// how much the (resampled) masked region's rays share with their
/// cross-view counterparts — and from the full raster otherwise. Jitter is
/// forced off so the result is deterministic for a fixed seed.
pub fn scene_mi(
    cloud: &NeuralPointCloud,
    cameras: &[Camera],
    masks: Option<&[Mask2D]>,
    render_cfg: &RenderConfig,
    decoder: &Decoder,
    cfg: &MiConfig,
) -> Result<f64> {
    if cameras.len() < 2 {
        return Err(Error::invalid("scene MI needs at least 2 cameras"));
    }
    if let Some(ms) = masks {
        if ms.len() != cameras.len() {
            return Err(Error::invalid("mask count must match camera count"));
        }
    }
    let mut render_cfg = render_cfg.clone();
    render_cfg.jitter = None;
    let index = PointIndex::build(cloud.positions());
    let revision = cloud.revision();
    let mut total = 0.0;
    for pair in 0..cameras.len() - 1 {
        let ca = &cameras[pair];
        let cb = &cameras[pair + 1];
        if ca.width != cb.width || ca.height != cb.height {
            return Err(Error::invalid("adjacent cameras must share raster size"));
        }
        // Candidate pixels in row-major order, then a seeded subsample.
        let candidates: Vec<(u32, u32)> = match masks {
            Some(ms) if !ms[pair].is_clear() => ms[pair].pixels().collect(),
            _ => (0..ca.height)
                .flat_map(|v| (0..ca.width).map(move |u| (u, v)))
                .collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (pair as u64).wrapping_mul(0x9e37));
        let take = cfg.pairs_per_view.min(candidates.len()).max(1);
        let mut dists = Vec::with_capacity(take);
        for _ in 0..take {
            let (u, v) = candidates[rng.random_range(0..candidates.len())];
            let ra = camera_ray(ca, u, v)?;
            let rb = camera_ray(cb, u, v)?;
            let out_a = render_ray(cloud, &index, &ra, &render_cfg, decoder, true, revision);
            let out_b = render_ray(cloud, &index, &rb, &render_cfg, decoder, true, revision);
            let da = ray_distribution(
                out_a.records.as_ref().unwrap(),
                render_cfg.samples_per_ray,
                cfg,
            )?;
            let db = ray_distribution(
                out_b.records.as_ref().unwrap(),
                render_cfg.samples_per_ray,
                cfg,
            )?;
            dists.push((da, db));
        }
        total += ensemble_mi(&dists)?;
    }
    Ok(total / (cameras.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_cfg(bins: usize) -> MiConfig {
        MiConfig {
            bins,
            projection: vec![1.0],
            lo: 0.0,
            hi: 1.0,
            pairs_per_view: 16,
            seed: 0,
        }
    }

    fn dist(probs: Vec<f64>, codes: Vec<u16>, bins: usize) -> RayDistribution {
        RayDistribution::new(probs, codes, bins).unwrap()
    }

    #[test]
    fn entropy_point_mass_is_zero() {
        let d = dist(vec![0.0, 1.0, 0.0], vec![0, 1, 2], 4);
        assert_eq!(entropy(&d), 0.0);
    }

    #[test]
    fn entropy_uniform_64() {
        let d = dist(vec![1.0 / 64.0; 64], vec![0; 64], 4);
        assert!((entropy(&d) - 64.0f64.ln()).abs() < 1e-12);
        assert!((entropy(&d) - 4.1589).abs() < 1e-4);
    }

    #[test]
    fn entropy_two_point_half() {
        let mut p = vec![0.0; 8];
        p[0] = 0.5;
        p[3] = 0.5;
        let d = dist(p, vec![0; 8], 4);
        assert!((entropy(&d) - 2.0f64.ln()).abs() < 1e-12);
        assert!((entropy(&d) - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn entropy_bounds() {
        let d = dist(vec![0.7, 0.2, 0.1], vec![0, 1, 2], 4);
        let h = entropy(&d);
        assert!(h >= 0.0 && h <= 3.0f64.ln() + 1e-12);
    }

    #[test]
    fn identical_rays_mi_equals_joint_marginal_entropy() {
        // Bijective sample->code map: the joint is diagonal and MI reduces to
        // the entropy of the (squared-renormalized) code distribution.
        let p = vec![0.5, 0.3, 0.2];
        let codes = vec![0u16, 1, 2];
        let d = dist(p.clone(), codes, 4);
        let mi = mutual_information(&d, &d).unwrap();
        let z: f64 = p.iter().map(|x| x * x).sum();
        let want: f64 = p.iter().map(|x| {
            let q = x * x / z;
            -q * q.ln()
        })
        .sum();
        assert!((mi - want).abs() < 1e-12);
    }

    #[test]
    fn constant_code_partner_gives_zero_mi() {
        // Ray j always shows the same code: knowing it reveals nothing.
        let di = dist(vec![0.25; 4], vec![0, 1, 2, 3], 4);
        let dj = dist(vec![0.25; 4], vec![2, 2, 2, 2], 4);
        let mi = mutual_information(&di, &dj).unwrap();
        assert!(mi.abs() < 1e-9);
    }

    #[test]
    fn hand_built_two_bin_joint_table() {
        // Two samples, two bins. p_i = (0.6, 0.4) with codes (0, 1);
        // p_j = (0.5, 0.5) with codes (1, 1).
        // Mass: m0 -> (0,1): 0.3; m1 -> (1,1): 0.2. Z = 0.5.
        // Joint: P(0,1)=0.6, P(1,1)=0.4. Marginals a=(0.6,0.4), b=(0,1).
        // MI = 0.6 ln(0.6/0.6) + 0.4 ln(0.4/0.4) = 0.
        let di = dist(vec![0.6, 0.4], vec![0, 1], 2);
        let dj = dist(vec![0.5, 0.5], vec![1, 1], 2);
        let mi = mutual_information(&di, &dj).unwrap();
        assert!(mi.abs() < 1e-12);

        // Correlated case: p_i = p_j = (0.5, 0.5), codes i = (0,1), j = (0,1).
        // Mass: (0,0) 0.25, (1,1) 0.25 -> normalized 0.5/0.5 diagonal.
        // MI = ln 2.
        let di = dist(vec![0.5, 0.5], vec![0, 1], 2);
        let dj = dist(vec![0.5, 0.5], vec![0, 1], 2);
        let mi = mutual_information(&di, &dj).unwrap();
        assert!((mi - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mi_symmetry_and_bounds() {
        use rand::{RngExt, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = 12;
            let bins = 5;
            let mut pa: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut pb: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let sa: f64 = pa.iter().sum();
            let sb: f64 = pb.iter().sum();
            pa.iter_mut().for_each(|p| *p /= sa);
            pb.iter_mut().for_each(|p| *p /= sb);
            let ca: Vec<u16> = (0..n).map(|_| rng.random_range(0..bins) as u16).collect();
            let cb: Vec<u16> = (0..n).map(|_| rng.random_range(0..bins) as u16).collect();
            let da = dist(pa, ca, bins);
            let db = dist(pb, cb, bins);
            let mij = mutual_information(&da, &db).unwrap();
            let mji = mutual_information(&db, &da).unwrap();
            assert!((mij - mji).abs() <= 1e-9);
            assert!(mij >= -1e-9);
            // Bound against the joint's own marginal entropies.
            let b = bins;
            let mut joint = vec![0.0f64; b * b];
            let mut z = 0.0;
            for m in 0..n {
                let mass = da.probs[m] * db.probs[m];
                joint[da.codes[m] as usize * b + db.codes[m] as usize] += mass;
                z += mass;
            }
            if z > 0.0 {
                let mut ha = 0.0;
                let mut hb = 0.0;
                let mut pa2 = vec![0.0; b];
                let mut pb2 = vec![0.0; b];
                for a in 0..b {
                    for bb in 0..b {
                        pa2[a] += joint[a * b + bb] / z;
                        pb2[bb] += joint[a * b + bb] / z;
                    }
                }
                for a in 0..b {
                    if pa2[a] > 0.0 {
                        ha -= pa2[a] * pa2[a].ln();
                    }
                    if pb2[a] > 0.0 {
                        hb -= pb2[a] * pb2[a].ln();
                    }
                }
                assert!(mij <= ha.min(hb) + 1e-9);
            }
        }
    }

    #[test]
    fn codebook_fit_is_deterministic_and_scale_invariant() {
        // Unit-circle directions spanning a quarter turn; after the internal
        // normalization the variance lives along axis 1.
        let features = vec![
            1.0, 0.0, //
            0.9, 0.2, //
            0.9, -0.2, //
            0.8, 0.6, //
            0.8, -0.6,
        ];
        let a = MiConfig::fit(&features, 2, 4, 8, 7).unwrap();
        let b = MiConfig::fit(&features, 2, 4, 8, 7).unwrap();
        assert_eq!(a, b);
        // Scale must not matter: a feature and any positive multiple of it
        // share a code.
        for f in [[1.0, 0.0], [0.8, 0.6], [0.9, -0.2]] {
            let scaled = [f[0] * 37.5, f[1] * 37.5];
            assert_eq!(a.code(&f), a.code(&scaled));
        }
        // Out-of-range projections clamp to edge bins.
        let lead = if a.projection[1].abs() > a.projection[0].abs() { 1 } else { 0 };
        let mut hi_f = [0.0, 0.0];
        hi_f[lead] = a.projection[lead].signum() * 100.0;
        assert_eq!(a.code(&hi_f), 3);
        let mut lo_f = [0.0, 0.0];
        lo_f[lead] = -a.projection[lead].signum() * 100.0;
        assert_eq!(a.code(&lo_f), 0);
    }

    #[test]
    fn ray_distribution_normalizes_and_falls_back() {
        use crate::math::Vec3;
        use crate::renderer::{render_ray, Decoder, RenderConfig};
        use crate::scene::Ray;
        use crate::spatial::PointIndex;

        let dec = Decoder::from_seed(3, 4).unwrap();
        let f = dec.fit_feature(30.0, [0.4, 0.4, 0.4]).unwrap();
        let cloud =
            NeuralPointCloud::new(vec![Vec3::new(0.0, 0.0, 1.0)], vec![1.0], f, 4).unwrap();
        let index = PointIndex::build(cloud.positions());
        let rcfg = RenderConfig { samples_per_ray: 8, aggregation_radius: 0.3, ..Default::default() };
        let mi_cfg = flat_cfg(4);

        let hit = Ray::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), 0.0, 2.0).unwrap();
        let out = render_ray(&cloud, &index, &hit, &rcfg, &dec, true, cloud.revision());
        let mi_cfg_full = MiConfig {
            projection: vec![1.0, 0.0, 0.0, 0.0],
            ..mi_cfg
        };
        let d = ray_distribution(out.records.as_ref().unwrap(), 8, &mi_cfg_full).unwrap();
        let sum: f64 = d.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        // A ray that misses everything: uniform fallback.
        let miss = Ray::new(Vec3::new(50.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 1.0), 0.0, 2.0).unwrap();
        let out = render_ray(&cloud, &index, &miss, &rcfg, &dec, true, cloud.revision());
        let d = ray_distribution(out.records.as_ref().unwrap(), 8, &mi_cfg_full).unwrap();
        for &p in d.probs() {
            assert!((p - 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn bin_mismatch_rejected() {
        let a = dist(vec![1.0], vec![0], 2);
        let b = dist(vec![1.0], vec![0], 3);
        assert!(mutual_information(&a, &b).is_err());
        assert!(ensemble_mi(&[(a, b)]).is_err());
    }

    #[test]
    fn ensemble_mi_of_matched_deterministic_pairs() {
        // Four pairs, each ray a point mass; codes match within a pair and
        // vary across pairs: the joint is diagonal with mass 1/4 per cell,
        // so MI = ln 4. A shuffled pairing destroys the dependence.
        let pm = |code: u16| dist(vec![1.0], vec![code], 4);
        let matched: Vec<_> = (0..4u16).map(|c| (pm(c), pm(c))).collect();
        let mi = ensemble_mi(&matched).unwrap();
        assert!((mi - 4.0f64.ln()).abs() < 1e-12);

        // Independent: second marginal constant.
        let constant: Vec<_> = (0..4u16).map(|c| (pm(c), pm(1))).collect();
        let mi = ensemble_mi(&constant).unwrap();
        assert!(mi.abs() < 1e-12);
    }

    #[test]
    fn duplicate_cameras_maximize_scene_mi() {
        // Degenerate pairing: a view paired with itself shares everything,
        // so scene MI with a duplicated camera dominates the distinct-view
        // pairing on the same scene.
        use crate::renderer::{Decoder, RenderConfig};
        use crate::scene::{generate_scene, BackdropSpec, ObjectSpec, SceneSpec, TrajectorySpec};
        use crate::math::Vec3;

        let spec = SceneSpec {
            seed: 11,
            backdrop: BackdropSpec { wall_z: 4.0, half_extent: 3.0, floor_y: None, spacing: 0.15 },
            object: Some(ObjectSpec::Sphere { center: Vec3::new(0.0, 0.0, 2.7), radius: 0.5 }),
            object_spacing: 0.08,
            trajectory: TrajectorySpec {
                count: 2,
                radius: 5.0,
                look_at: Vec3::new(0.0, 0.0, 2.0),
                span_deg: 30.0,
                image_size: (24, 24),
            },
            feature_dim: 8,
        };
        let rcfg = RenderConfig {
            samples_per_ray: 32,
            aggregation_radius: 0.26,
            ..Default::default()
        };
        let scene = generate_scene(&spec, &rcfg).unwrap();
        let _ = Decoder::from_seed(spec.seed, 8).unwrap();
        let cfg = MiConfig::fit(
            scene.cloud.features_flat(),
            scene.cloud.feature_dim(),
            16,
            128,
            13,
        )
        .unwrap();
        let distinct = scene_mi(
            &scene.cloud,
            &scene.cameras,
            Some(&scene.masks),
            &rcfg,
            &scene.decoder,
            &cfg,
        )
        .unwrap();
        let dup_cams = vec![scene.cameras[0].clone(), scene.cameras[0].clone()];
        let dup_masks = vec![scene.masks[0].clone(), scene.masks[0].clone()];
        let duplicated = scene_mi(
            &scene.cloud,
            &dup_cams,
            Some(&dup_masks),
            &rcfg,
            &scene.decoder,
            &cfg,
        )
        .unwrap();
        assert!(duplicated > 0.0);
        assert!(duplicated >= distinct - 1e-12, "{duplicated} < {distinct}");
        // Fewer than 2 cameras is rejected.
        assert!(scene_mi(
            &scene.cloud,
            &scene.cameras[..1],
            None,
            &rcfg,
            &scene.decoder,
            &cfg
        )
        .is_err());
    }

    #[test]
    fn ensemble_mi_symmetric_and_nonnegative() {
        use rand::{RngExt, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rand_dist = |rng: &mut ChaCha8Rng| {
            let n = 6;
            let bins = 5;
            let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= s);
            let c: Vec<u16> = (0..n).map(|_| rng.random_range(0..bins) as u16).collect();
            dist(p, c, bins)
        };
        let pairs: Vec<_> = (0..20).map(|_| (rand_dist(&mut rng), rand_dist(&mut rng))).collect();
        let swapped: Vec<_> = pairs.iter().map(|(a, b)| (b.clone(), a.clone())).collect();
        let mij = ensemble_mi(&pairs).unwrap();
        let mji = ensemble_mi(&swapped).unwrap();
        assert!((mij - mji).abs() < 1e-9);
        assert!(mij >= -1e-9);
    }
}
