//! Flat key-value configuration with section prefixes.
//!
//! One config file drives the whole pipeline; each command reads its own
//! sections. Lines are `section.key = value`, `#` starts a comment, unknown
//! keys are hard errors so typos cannot silently disable anything. Scene
//! manifests are configs too: `generate` writes back every effective value
//! plus the derived cameras, and re-running any command from that manifest
//! reproduces its outputs byte for byte.

use crate::error::{CliError, Result};
use nperf_core::dnr::{DnrConfig, DnrStrategy};
use nperf_core::geometry::{DeformSpec, EditOp, RigidTransform};
use nperf_core::math::{Mat3, Vec3};
use nperf_core::renderer::RenderConfig;
use nperf_core::scene::{BackdropSpec, Camera, ObjectSpec, SceneSpec, TrajectorySpec};
use nperf_core::train::{LossWeights, TrainConfig};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

/// Every accepted key. `camera.*` blocks are validated by prefix since their
/// count depends on the scene.
const SCHEMA: &[&str] = &[
    "scene.seed",
    "scene.feature_dim",
    "scene.image_width",
    "scene.image_height",
    "scene.cameras",
    "scene.arc_radius",
    "scene.span_deg",
    "scene.look_at",
    "scene.wall_z",
    "scene.half_extent",
    "scene.floor_y",
    "scene.backdrop_spacing",
    "scene.object",
    "scene.object_center",
    "scene.object_radius",
    "scene.object_half_extents",
    "scene.object_spacing",
    "render.samples_per_ray",
    "render.aggregation_radius",
    "render.max_neighbors",
    "render.background",
    "render.jitter",
    "render.cloud",
    "dnr.strategy",
    "dnr.k",
    "dnr.sigma_floor",
    "dnr.cloud",
    "train.step_size",
    "train.rays_per_step",
    "train.max_steps",
    "train.window",
    "train.threshold",
    "train.seed",
    "train.cloud",
    "loss.lambda_per",
    "loss.lambda_depth",
    "loss.alpha_sparse",
    "segment.camera",
    "segment.radius",
    "segment.mask",
    "segment.out",
    "edit.op",
    "edit.axis",
    "edit.degrees",
    "edit.pivot",
    "edit.translation",
    "edit.factors",
    "edit.shear",
    "edit.mask",
    "mi.bins",
    "mi.pairs_per_view",
    "mi.seed",
    "mi.cloud",
    "mi.fit_cloud",
    "metrics.mode",
    "metrics.a",
    "metrics.b",
    "metrics.cloud",
    "out.dir",
];

fn key_known(key: &str) -> bool {
    if SCHEMA.contains(&key) {
        return true;
    }
    // camera.count and camera.<index>.<field>
    if key == "camera.count" {
        return true;
    }
    if let Some(rest) = key.strip_prefix("camera.") {
        let mut parts = rest.splitn(2, '.');
        let idx = parts.next().unwrap_or("");
        let field = parts.next().unwrap_or("");
        return idx.chars().all(|c| c.is_ascii_digit())
            && matches!(
                field,
                "fx" | "fy" | "cx" | "cy" | "width" | "height" | "t_near" | "t_far" | "r" | "t"
            );
    }
    false
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !key_known(&key) {
                return Err(CliError::Usage(format!("line {}: unknown key '{key}'", lineno + 1)));
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(CliError::Usage(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
        }
        Ok(Config { values })
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Config::parse(&text)
    }

    pub fn set_override(&mut self, spec: &str) -> Result<()> {
        let Some((key, value)) = spec.split_once('=') else {
            return Err(CliError::Usage(format!("override '{spec}' is not key=value")));
        };
        let key = key.trim();
        if !key_known(key) {
            return Err(CliError::Usage(format!("unknown override key '{key}'")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: String) {
        debug_assert!(key_known(key), "internal write of unknown key {key}");
        self.values.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| CliError::Usage(format!("{key}: '{s}' is not a number"))),
        }
    }

    fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| CliError::Usage(format!("{key}: '{s}' is not an integer"))),
        }
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.u64_or(key, default as u64)? as usize)
    }

    fn vec3_or(&self, key: &str, default: Vec3) -> Result<Vec3> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => parse_vec3(s)
                .ok_or_else(|| CliError::Usage(format!("{key}: '{s}' is not 'x,y,z'"))),
        }
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| CliError::Usage(format!("missing required key '{key}'")))
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require("out.dir")?))
    }

    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let object = match self.str_or("scene.object", "sphere") {
            "none" => None,
            "sphere" => Some(ObjectSpec::Sphere {
                center: self.vec3_or("scene.object_center", Vec3::new(0.0, 0.0, 1.0))?,
                radius: self.f64_or("scene.object_radius", 0.5)?,
            }),
            "box" => Some(ObjectSpec::Box {
                center: self.vec3_or("scene.object_center", Vec3::new(0.0, 0.0, 1.0))?,
                half_extents: self
                    .vec3_or("scene.object_half_extents", Vec3::new(0.4, 0.4, 0.4))?,
            }),
            other => {
                return Err(CliError::Usage(format!(
                    "scene.object must be none|sphere|box, got '{other}'"
                )))
            }
        };
        let floor_y = match self.str_or("scene.floor_y", "none") {
            "none" => None,
            s => Some(
                s.parse()
                    .map_err(|_| CliError::Usage(format!("scene.floor_y: '{s}'")))?,
            ),
        };
        Ok(SceneSpec {
            seed: self.u64_or("scene.seed", 1)?,
            backdrop: BackdropSpec {
                wall_z: self.f64_or("scene.wall_z", 4.0)?,
                half_extent: self.f64_or("scene.half_extent", 3.0)?,
                floor_y,
                spacing: self.f64_or("scene.backdrop_spacing", 0.08)?,
            },
            object,
            object_spacing: self.f64_or("scene.object_spacing", 0.05)?,
            trajectory: TrajectorySpec {
                count: self.usize_or("scene.cameras", 6)?,
                radius: self.f64_or("scene.arc_radius", 4.5)?,
                look_at: self.vec3_or("scene.look_at", Vec3::new(0.0, 0.0, 0.8))?,
                span_deg: self.f64_or("scene.span_deg", 40.0)?,
                image_size: (
                    self.u64_or("scene.image_width", 64)? as u32,
                    self.u64_or("scene.image_height", 64)? as u32,
                ),
            },
            feature_dim: self.usize_or("scene.feature_dim", 8)?,
        })
    }

    pub fn render_config(&self) -> Result<RenderConfig> {
        let jitter = match self.str_or("render.jitter", "off") {
            "off" => None,
            s => Some(
                s.parse()
                    .map_err(|_| CliError::Usage(format!("render.jitter must be off|<seed>, got '{s}'")))?,
            ),
        };
        let background = match self.get("render.background") {
            None => [0.0, 0.0, 0.0],
            Some(s) => {
                let v = parse_vec3(s)
                    .ok_or_else(|| CliError::Usage(format!("render.background: '{s}'")))?;
                [v.x, v.y, v.z]
            }
        };
        Ok(RenderConfig {
            samples_per_ray: self.usize_or("render.samples_per_ray", 64)?,
            aggregation_radius: self.f64_or("render.aggregation_radius", 0.15)?,
            max_neighbors: self.usize_or("render.max_neighbors", 8)?,
            background,
            jitter,
        })
    }

    pub fn dnr_config(&self) -> Result<DnrConfig> {
        Ok(DnrConfig {
            strategy: DnrStrategy::parse(self.str_or("dnr.strategy", "gwfa"))?,
            k: self.usize_or("dnr.k", 8)?,
            sigma_floor: self.f64_or("dnr.sigma_floor", 1e-8)?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            step_size: self.f64_or("train.step_size", 5e-4)?,
            rays_per_step: self.usize_or("train.rays_per_step", 1024)?,
            max_steps: self.usize_or("train.max_steps", 1000)?,
            window: self.usize_or("train.window", 100)?,
            threshold: self.f64_or("train.threshold", 1e-3)?,
            seed: self.u64_or("train.seed", 7)?,
            ..TrainConfig::default()
        })
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        Ok(LossWeights {
            lambda_per: self.f64_or("loss.lambda_per", 1e-2)?,
            lambda_depth: self.f64_or("loss.lambda_depth", 1e-3)?,
            alpha_sparse: self.f64_or("loss.alpha_sparse", 1e-4)?,
        })
    }

    pub fn edit_op(&self) -> Result<EditOp> {
        match self.require("edit.op")? {
            "remove" => Ok(EditOp::Remove),
            "rotate" => {
                let axis = self.vec3_or("edit.axis", Vec3::new(0.0, 1.0, 0.0))?;
                let degrees = self.f64_or("edit.degrees", 0.0)?;
                let pivot = self.vec3_or("edit.pivot", Vec3::ZERO)?;
                let t = RigidTransform::rotation_about(axis, degrees.to_radians(), pivot)
                    .map_err(|e| CliError::Usage(e.to_string()))?;
                Ok(EditOp::Rigid(t))
            }
            "translate" => {
                let v = self.vec3_or("edit.translation", Vec3::ZERO)?;
                Ok(EditOp::Rigid(
                    RigidTransform::translation_by(v).map_err(|e| CliError::Usage(e.to_string()))?,
                ))
            }
            "scale" => Ok(EditOp::Deform(DeformSpec::Scale {
                pivot: self.vec3_or("edit.pivot", Vec3::ZERO)?,
                factors: self.vec3_or("edit.factors", Vec3::splat(1.0))?,
            })),
            "shear" => {
                let s = self.require("edit.shear")?;
                let nums: Vec<f64> = s
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| CliError::Usage(format!("edit.shear: '{s}'")))?;
                if nums.len() != 9 {
                    return Err(CliError::Usage("edit.shear needs 9 comma-separated values".into()));
                }
                let matrix = Mat3::from_rows(
                    [nums[0], nums[1], nums[2]],
                    [nums[3], nums[4], nums[5]],
                    [nums[6], nums[7], nums[8]],
                );
                Ok(EditOp::Deform(DeformSpec::Shear {
                    pivot: self.vec3_or("edit.pivot", Vec3::ZERO)?,
                    matrix,
                }))
            }
            other => Err(CliError::Usage(format!(
                "edit.op must be remove|rotate|translate|scale|shear, got '{other}'"
            ))),
        }
    }

    pub fn mi_params(&self) -> Result<(usize, usize, u64)> {
        Ok((
            self.usize_or("mi.bins", 16)?,
            self.usize_or("mi.pairs_per_view", 1024)?,
            self.u64_or("mi.seed", 13)?,
        ))
    }

    pub fn segment_camera(&self) -> Result<usize> {
        self.usize_or("segment.camera", 0)
    }

    /// Registration radius: a number, or "auto" for 2x the cloud's median
    /// nearest-neighbor spacing.
    pub fn segment_radius(&self) -> Result<Option<f64>> {
        match self.str_or("segment.radius", "auto") {
            "auto" => Ok(None),
            s => Ok(Some(s.parse().map_err(|_| {
                CliError::Usage(format!("segment.radius must be auto|<number>, got '{s}'"))
            })?)),
        }
    }

    /// Serializes cameras into manifest keys, replacing any existing block.
    pub fn set_cameras(&mut self, cameras: &[Camera]) {
        self.values.retain(|k, _| !k.starts_with("camera."));
        self.values
            .insert("camera.count".into(), cameras.len().to_string());
        for (i, cam) in cameras.iter().enumerate() {
            let mut put = |field: &str, value: String| {
                self.values.insert(format!("camera.{i}.{field}"), value);
            };
            put("fx", fmt_f64(cam.fx()));
            put("fy", fmt_f64(cam.fy()));
            put("cx", fmt_f64(cam.cx()));
            put("cy", fmt_f64(cam.cy()));
            put("width", cam.width.to_string());
            put("height", cam.height.to_string());
            put("t_near", fmt_f64(cam.t_near));
            put("t_far", fmt_f64(cam.t_far));
            let r = cam.rotation().m;
            put(
                "r",
                r.iter()
                    .flatten()
                    .map(|v| fmt_f64(*v))
                    .collect::<Vec<_>>()
                    .join(","),
            );
            let t = cam.translation();
            put("t", format!("{},{},{}", fmt_f64(t.x), fmt_f64(t.y), fmt_f64(t.z)));
        }
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let count = self.usize_or("camera.count", 0)?;
        if count == 0 {
            return Err(CliError::Data(
                "manifest has no cameras; run `generate` first".into(),
            ));
        }
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let get = |field: &str| -> Result<&str> {
                self.require(&format!("camera.{i}.{field}"))
            };
            let fx: f64 = parse_num(get("fx")?)?;
            let fy: f64 = parse_num(get("fy")?)?;
            let cx: f64 = parse_num(get("cx")?)?;
            let cy: f64 = parse_num(get("cy")?)?;
            let width: u32 = parse_num(get("width")?)?;
            let height: u32 = parse_num(get("height")?)?;
            let t_near: f64 = parse_num(get("t_near")?)?;
            let t_far: f64 = parse_num(get("t_far")?)?;
            let r_nums: Vec<f64> = get("r")?
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| CliError::Data(format!("camera.{i}.r malformed")))?;
            if r_nums.len() != 9 {
                return Err(CliError::Data(format!("camera.{i}.r needs 9 values")));
            }
            let rotation = Mat3::from_rows(
                [r_nums[0], r_nums[1], r_nums[2]],
                [r_nums[3], r_nums[4], r_nums[5]],
                [r_nums[6], r_nums[7], r_nums[8]],
            );
            let t = parse_vec3(get("t")?)
                .ok_or_else(|| CliError::Data(format!("camera.{i}.t malformed")))?;
            out.push(
                Camera::from_pinhole(fx, fy, cx, cy, rotation, t, width, height, t_near, t_far)
                    .map_err(|e| CliError::Data(format!("camera.{i}: {e}")))?,
            );
        }
        Ok(out)
    }

    /// Renders the config back to text: sorted keys, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(&mut out, "{k} = {v}").unwrap();
        }
        out
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| CliError::Data(format!("malformed number '{s}'")))
}

fn parse_vec3(s: &str) -> Option<Vec3> {
    let parts: Vec<&str> = s.split(',').map(|p| p.trim()).collect();
    if parts.len() != 3 {
        return None;
    }
    let x = parts[0].parse().ok()?;
    let y = parts[1].parse().ok()?;
    let z = parts[2].parse().ok()?;
    Some(Vec3::new(x, y, z))
}

/// Shortest representation that round-trips through `str::parse::<f64>`.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_defaults() {
        let cfg = Config::parse("scene.seed = 42\nrender.samples_per_ray = 32\n").unwrap();
        let spec = cfg.scene_spec().unwrap();
        assert_eq!(spec.seed, 42);
        assert_eq!(spec.trajectory.count, 6);
        let r = cfg.render_config().unwrap();
        assert_eq!(r.samples_per_ray, 32);
        assert_eq!(r.jitter, None);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::parse("scene.sed = 42\n").is_err());
        assert!(Config::parse("bogus.key = 1\n").is_err());
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(Config::parse("scene.seed = 1\nscene.seed = 2\n").is_err());
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = Config::parse("# hello\n\nscene.seed = 3 # trailing\n").unwrap();
        assert_eq!(cfg.get("scene.seed"), Some("3"));
    }

    #[test]
    fn overrides_validate_keys() {
        let mut cfg = Config::default();
        cfg.set_override("dnr.strategy=ni").unwrap();
        assert_eq!(cfg.dnr_config().unwrap().strategy, DnrStrategy::Ni);
        assert!(cfg.set_override("dnr.strtegy=ni").is_err());
        assert!(cfg.set_override("nonsense").is_err());
    }

    #[test]
    fn loss_weights_have_documented_defaults() {
        let cfg = Config::default();
        let w = cfg.loss_weights().unwrap();
        assert_eq!(w.lambda_per, 1e-2);
        assert_eq!(w.lambda_depth, 1e-3);
        assert_eq!(w.alpha_sparse, 1e-4);
    }

    #[test]
    fn edit_ops_parse() {
        let mut cfg = Config::default();
        cfg.set("edit.op", "rotate".into());
        cfg.set("edit.axis", "0,0,1".into());
        cfg.set("edit.degrees", "90".into());
        assert!(matches!(cfg.edit_op().unwrap(), EditOp::Rigid(_)));

        cfg.set("edit.op", "scale".into());
        cfg.set("edit.factors", "2,2,2".into());
        assert!(matches!(cfg.edit_op().unwrap(), EditOp::Deform(DeformSpec::Scale { .. })));

        cfg.set("edit.op", "rotate".into());
        cfg.set("edit.axis", "0,0,0".into());
        assert!(cfg.edit_op().is_err());
    }

    #[test]
    fn camera_block_round_trips_bit_exact() {
        let spec = Config::default().scene_spec().unwrap();
        // Synthesize a camera with awkward floats.
        let cam = Camera::from_pinhole(
            123.456789012345,
            98.7654321,
            31.5,
            32.5,
            Mat3::rot_y(0.7071067811865476),
            Vec3::new(0.1, -0.2, 4.9999999999),
            64,
            64,
            0.05,
            11.113,
        )
        .unwrap();
        let mut cfg = Config::default();
        cfg.set("scene.seed", spec.seed.to_string());
        cfg.set_cameras(&[cam.clone()]);
        let text = cfg.to_text();
        let reparsed = Config::parse(&text).unwrap();
        let cams = reparsed.cameras().unwrap();
        assert_eq!(cams.len(), 1);
        assert_eq!(cams[0], cam);
    }

    #[test]
    fn to_text_is_sorted_and_reparseable() {
        let mut cfg = Config::default();
        cfg.set("scene.seed", "9".into());
        cfg.set("dnr.k", "4".into());
        cfg.set("out.dir", "/tmp/x".into());
        let text = cfg.to_text();
        let again = Config::parse(&text).unwrap().to_text();
        assert_eq!(text, again);
    }
}
