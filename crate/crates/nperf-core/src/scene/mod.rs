//! Domain types for the neural point cloud, cameras, masks, and depth, plus
//! the deterministic synthetic-scene generator.

mod generate;
mod texture;

pub use generate::{analytic_first_hit, generate_scene, GeneratedScene, GT_DENSITY};
pub use texture::SurfaceTexture;
pub(crate) use texture::splitmix64 as texture_hash;

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};

/// Point set where each point carries a feature vector and a confidence
/// scalar. The scene representation every other module operates on.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralPointCloud {
    positions: Vec<Vec3>,
    confidences: Vec<f64>,
    /// Flat row-major N x F feature storage.
    features: Vec<f64>,
    feature_dim: usize,
}

impl NeuralPointCloud {
    pub fn new(
        positions: Vec<Vec3>,
        confidences: Vec<f64>,
        features: Vec<f64>,
        feature_dim: usize,
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be >= 1"));
        }
        let n = positions.len();
        if confidences.len() != n || features.len() != n * feature_dim {
            return Err(Error::invalid(format!(
                "cloud size mismatch: {} positions, {} confidences, {} feature values (F={})",
                n,
                confidences.len(),
                features.len(),
                feature_dim
            )));
        }
        if !positions.iter().all(|p| p.is_finite()) {
            return Err(Error::invalid("non-finite point position"));
        }
        if !confidences.iter().all(|&w| (0.0..=1.0).contains(&w)) {
            return Err(Error::invalid("confidence outside [0, 1]"));
        }
        if !features.iter().all(|f| f.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(NeuralPointCloud { positions, confidences, features, feature_dim })
    }

    /// Empty cloud with the given feature dimensionality.
    pub fn empty(feature_dim: usize) -> Self {
        NeuralPointCloud {
            positions: Vec::new(),
            confidences: Vec::new(),
            features: Vec::new(),
            feature_dim: feature_dim.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    pub fn features_flat(&self) -> &[f64] {
        &self.features
    }

    pub fn position(&self, i: usize) -> Vec3 {
        self.positions[i]
    }

    pub fn confidence(&self, i: usize) -> f64 {
        self.confidences[i]
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Appends one point. Used by resampling; validation matches `new`.
    pub fn push(&mut self, position: Vec3, confidence: f64, feature: &[f64]) -> Result<()> {
        if feature.len() != self.feature_dim {
            return Err(Error::invalid("feature length mismatch on push"));
        }
        if !position.is_finite() || !(0.0..=1.0).contains(&confidence) {
            return Err(Error::invalid("invalid point on push"));
        }
        if !feature.iter().all(|f| f.is_finite()) {
            return Err(Error::invalid("non-finite feature on push"));
        }
        self.positions.push(position);
        self.confidences.push(confidence);
        self.features.extend_from_slice(feature);
        Ok(())
    }

    /// Rebuilds the cloud with replaced features/confidences, keeping
    /// geometry. The training loop's output path.
    pub fn with_parameters(&self, confidences: Vec<f64>, features: Vec<f64>) -> Result<Self> {
        NeuralPointCloud::new(self.positions.clone(), confidences, features, self.feature_dim)
    }

    /// Cheap structural stamp used to detect stale gradient records. Hashes
    /// every parameter bit, so any feature/confidence/position change is
    /// visible.
    pub fn revision(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64; // FNV-1a
        let mut eat = |bits: u64| {
            h ^= bits;
            h = h.wrapping_mul(0x100000001b3);
        };
        eat(self.positions.len() as u64);
        eat(self.feature_dim as u64);
        for p in &self.positions {
            eat(p.x.to_bits());
            eat(p.y.to_bits());
            eat(p.z.to_bits());
        }
        for w in &self.confidences {
            eat(w.to_bits());
        }
        for f in &self.features {
            eat(f.to_bits());
        }
        h
    }
}

/// Pinhole camera: intrinsics `K`, world-to-camera extrinsics `[R|t]`, raster
/// size, and the sampling range along its rays.
///
/// Conventions (used end-to-end): camera looks down +z in camera frame,
/// `x_cam = R * x_world + t`, pixel `(u, v)` covers `[u, u+1) x [v, v+1)`
/// with its center at `(u + 0.5, v + 0.5)`, rasters are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    intrinsics: Mat3,
    rotation: Mat3,
    translation: Vec3,
    pub width: u32,
    pub height: u32,
    pub t_near: f64,
    pub t_far: f64,
}

impl Camera {
    pub fn new(
        intrinsics: Mat3,
        rotation: Mat3,
        translation: Vec3,
        width: u32,
        height: u32,
        t_near: f64,
        t_far: f64,
    ) -> Result<Self> {
        if !intrinsics.is_finite() || !rotation.is_finite() || !translation.is_finite() {
            return Err(Error::invalid("non-finite camera parameter"));
        }
        if rotation.orthonormality_error() > 1e-9 {
            return Err(Error::invalid("camera rotation is not orthonormal"));
        }
        if (rotation.det() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("camera rotation must have det +1"));
        }
        let k = intrinsics.m;
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 || k[0][1] != 0.0 || k[2][2] != 1.0 {
            return Err(Error::invalid("intrinsics must be [[fx,0,cx],[0,fy,cy],[0,0,1]]"));
        }
        let (fx, fy, cx, cy) = (k[0][0], k[1][1], k[0][2], k[1][2]);
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("raster must be nonempty"));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::invalid("principal point outside raster"));
        }
        if !(0.0 <= t_near && t_near < t_far) {
            return Err(Error::invalid("need 0 <= t_near < t_far"));
        }
        Ok(Camera { intrinsics, rotation, translation, width, height, t_near, t_far })
    }

    /// Convenience constructor from focal lengths and principal point.
    #[allow(clippy::too_many_arguments)]
    pub fn from_pinhole(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        width: u32,
        height: u32,
        t_near: f64,
        t_far: f64,
    ) -> Result<Self> {
        let k = Mat3::from_rows([fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]);
        Camera::new(k, rotation, translation, width, height, t_near, t_far)
    }

    pub fn intrinsics(&self) -> Mat3 {
        self.intrinsics
    }

    pub fn rotation(&self) -> Mat3 {
        self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics.m[0][0]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics.m[1][1]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics.m[0][2]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics.m[1][2]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.rotation.transpose().mul_vec(-self.translation)
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn camera_to_world(&self, p: Vec3) -> Vec3 {
        self.rotation.transpose().mul_vec(p - self.translation)
    }

    /// Projects a world point to continuous raster coordinates and camera
    /// depth. `None` when the point is at or behind the camera plane.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if c.z <= 1e-12 {
            return None;
        }
        let u = self.fx() * c.x / c.z + self.cx();
        let v = self.fy() * c.y / c.z + self.cy();
        Some((u, v, c.z))
    }

    /// World point at camera depth `depth` along the ray through continuous
    /// raster coordinates `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let x_cam = Vec3::new(
            depth * (u - self.cx()) / self.fx(),
            depth * (v - self.cy()) / self.fy(),
            depth,
        );
        self.camera_to_world(x_cam)
    }

    /// World-space ray through continuous raster coordinates.
    pub fn ray_through(&self, u: f64, v: f64) -> Ray {
        let dir_cam = Vec3::new((u - self.cx()) / self.fx(), (v - self.cy()) / self.fy(), 1.0);
        let dir_world = self.rotation.transpose().mul_vec(dir_cam).normalized().unwrap();
        Ray::new(self.center(), dir_world, self.t_near, self.t_far).unwrap()
    }

    pub fn contains_pixel(&self, u: u32, v: u32) -> bool {
        u < self.width && v < self.height
    }
}

/// World-space ray through the center of pixel `(u, v)`.
pub fn camera_ray(cam: &Camera, u: u32, v: u32) -> Result<Ray> {
    if !cam.contains_pixel(u, v) {
        return Err(Error::invalid(format!(
            "pixel ({u}, {v}) outside {}x{} raster",
            cam.width, cam.height
        )));
    }
    Ok(cam.ray_through(u as f64 + 0.5, v as f64 + 0.5))
}

/// Ray with unit direction and a sampling interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        if !origin.is_finite() || !direction.is_finite() {
            return Err(Error::invalid("non-finite ray"));
        }
        if (direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("ray direction must be unit length"));
        }
        if !(0.0 <= t_near && t_near < t_far) {
            return Err(Error::invalid("need 0 <= t_near < t_far"));
        }
        Ok(Ray { origin, direction, t_near, t_far })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Pixel-set mask over a raster, with optional prompt points.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask2D {
    pub width: u32,
    pub height: u32,
    bits: Vec<bool>,
    pub prompts: Option<Vec<(u32, u32)>>,
}

impl Mask2D {
    pub fn empty(width: u32, height: u32) -> Self {
        Mask2D {
            width,
            height,
            bits: vec![false; (width as usize) * (height as usize)],
            prompts: None,
        }
    }

    /// Builds from an explicit pixel list; rejects out-of-bounds pixels.
    /// Duplicates collapse into the set.
    pub fn from_pixels(
        width: u32,
        height: u32,
        pixels: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Self> {
        let mut m = Mask2D::empty(width, height);
        for (u, v) in pixels {
            if u >= width || v >= height {
                return Err(Error::invalid(format!("mask pixel ({u}, {v}) out of bounds")));
            }
            m.set(u, v, true);
        }
        Ok(m)
    }

    pub fn with_prompts(mut self, prompts: Vec<(u32, u32)>) -> Result<Self> {
        for &(u, v) in &prompts {
            if u >= self.width || v >= self.height {
                return Err(Error::invalid("prompt point out of bounds"));
            }
        }
        self.prompts = Some(prompts);
        Ok(self)
    }

    pub fn set(&mut self, u: u32, v: u32, masked: bool) {
        let idx = (v as usize) * (self.width as usize) + u as usize;
        self.bits[idx] = masked;
    }

    pub fn contains(&self, u: u32, v: u32) -> bool {
        u < self.width
            && v < self.height
            && self.bits[(v as usize) * (self.width as usize) + u as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_clear(&self) -> bool {
        self.count() == 0
    }

    /// Masked pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| ((i as u32) % w, (i as u32) / w))
    }
}

/// Index set of masked points in a `NeuralPointCloud`. Stored sorted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mask3D {
    indices: Vec<usize>,
}

impl Mask3D {
    pub fn new(mut indices: Vec<usize>, cloud_len: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&max) = indices.last() {
            if max >= cloud_len {
                return Err(Error::invalid(format!(
                    "mask index {max} out of bounds for cloud of {cloud_len}"
                )));
            }
        }
        Ok(Mask3D { indices })
    }

    pub fn empty() -> Self {
        Mask3D { indices: Vec::new() }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// Membership bitmap of length `cloud_len`.
    pub fn to_bitmap(&self, cloud_len: usize) -> Vec<bool> {
        let mut bits = vec![false; cloud_len];
        for &i in &self.indices {
            bits[i] = true;
        }
        bits
    }
}

/// Per-pixel positive depth in world units; 0 encodes "no depth".
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    values: Vec<f64>,
}

pub const NO_DEPTH: f64 = 0.0;

impl DepthMap {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self> {
        if values.len() != (width as usize) * (height as usize) {
            return Err(Error::invalid("depth raster size mismatch"));
        }
        if !values.iter().all(|&d| d == NO_DEPTH || (d.is_finite() && d > 0.0)) {
            return Err(Error::invalid("depth values must be positive or the no-depth sentinel"));
        }
        Ok(DepthMap { width, height, values })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        DepthMap { width, height, values: vec![NO_DEPTH; (width as usize) * (height as usize)] }
    }

    pub fn get(&self, u: u32, v: u32) -> Option<f64> {
        let d = self.values[(v as usize) * (self.width as usize) + u as usize];
        if d == NO_DEPTH {
            None
        } else {
            Some(d)
        }
    }

    pub fn set(&mut self, u: u32, v: u32, depth: Option<f64>) {
        let idx = (v as usize) * (self.width as usize) + u as usize;
        self.values[idx] = depth.unwrap_or(NO_DEPTH);
    }

    pub fn raw(&self) -> &[f64] {
        &self.values
    }
}

/// Foreground object of a synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub enum ObjectSpec {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half_extents: Vec3 },
}

/// Textured backdrop: a wall plane at `z = wall_z` spanning
/// `[-half_extent, half_extent]` in x and y, optionally with a floor plane at
/// `y = floor_y` of the same x/z footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct BackdropSpec {
    pub wall_z: f64,
    pub half_extent: f64,
    pub floor_y: Option<f64>,
    /// Approximate spacing between backdrop points, world units.
    pub spacing: f64,
}

/// Camera arc: `count` cameras on a circle of `radius` around `look_at`,
/// spanning `span_deg` degrees, all looking at `look_at`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub count: usize,
    pub radius: f64,
    pub look_at: Vec3,
    pub span_deg: f64,
    pub image_size: (u32, u32),
}

/// Fully seeded description of a synthetic scene. The seed determines every
/// generated byte.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub backdrop: BackdropSpec,
    pub object: Option<ObjectSpec>,
    /// Approximate spacing between object surface points.
    pub object_spacing: f64,
    pub trajectory: TrajectorySpec,
    pub feature_dim: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 4 {
            return Err(Error::invalid("feature_dim must be >= 4 to carry density and color"));
        }
        if self.trajectory.count < 2 {
            return Err(Error::invalid("need at least 2 cameras"));
        }
        if self.trajectory.radius <= 0.0 {
            return Err(Error::invalid("camera trajectory radius must be positive"));
        }
        if self.backdrop.spacing <= 0.0 || self.object_spacing <= 0.0 {
            return Err(Error::invalid("point spacings must be positive"));
        }
        if self.backdrop.half_extent <= 0.0 {
            return Err(Error::invalid("backdrop extent must be positive"));
        }
        match self.object {
            Some(ObjectSpec::Sphere { radius, .. }) if radius <= 0.0 => {
                Err(Error::invalid("sphere object must have positive radius"))
            }
            Some(ObjectSpec::Box { half_extents, .. })
                if half_extents.x <= 0.0 || half_extents.y <= 0.0 || half_extents.z <= 0.0 =>
            {
                Err(Error::invalid("box object must have positive extents"))
            }
            _ => Ok(()),
        }
    }
}
