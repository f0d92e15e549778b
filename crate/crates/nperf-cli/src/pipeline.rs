//! Command implementations over a scene directory.
//!
//! `generate` creates the directory: a manifest (the full effective config
//! plus derived cameras), the full and background-only point clouds, and one
//! image/depth/mask triple per camera. Every later command reads the manifest
//! for scene-pinned parameters (scene.*, render.*, camera.*) and takes its
//! own section from the invoking config, so a single config file can drive
//! the whole pipeline end to end.

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::formats;
use nperf_core::dnr::{apply_dnr, plan_resample, ResampleView};
use nperf_core::geometry::{edit_masked_points, lift_mask, median_nn_spacing, register_mask};
use nperf_core::infotheory::{scene_mi, MiConfig};
use nperf_core::math::Vec3;
use nperf_core::metrics::image_metrics;
use nperf_core::renderer::{render_view, Decoder, RenderConfig, RenderOutput};
use nperf_core::scene::{generate_scene, Camera, DepthMap, Mask2D, NeuralPointCloud};
use nperf_core::spatial::PointIndex;
use nperf_core::train::{finetune, Supervision};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const MANIFEST: &str = "manifest.cfg";
pub const FULL_CLOUD: &str = "full.npc1";
pub const BG_CLOUD: &str = "background.npc1";
pub const EDITED_CLOUD: &str = "edited.npc1";
pub const VACATED_CLOUD: &str = "vacated.npc1";
pub const RESAMPLED_CLOUD: &str = "resampled.npc1";
pub const FINETUNED_CLOUD: &str = "finetuned.npc1";
pub const DEFAULT_MASK3: &str = "mask3.msk3";
pub const LOSS_CSV: &str = "loss.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const MI_CSV: &str = "mi.csv";

pub fn image_name(i: usize) -> String {
    format!("cam{i:03}.ppm")
}

pub fn depth_name(i: usize) -> String {
    format!("cam{i:03}.dpth")
}

pub fn mask_name(i: usize) -> String {
    format!("cam{i:03}.pgm")
}

pub fn render_image_name(i: usize) -> String {
    format!("render_cam{i:03}.ppm")
}

pub fn render_depth_name(i: usize) -> String {
    format!("render_cam{i:03}.dpth")
}

/// Manifest as base, with the invoking config's command sections overlaid.
/// Scene geometry, render parameters, and cameras stay pinned to generation:
/// stored images were produced under those, so commands must not drift.
fn effective_config(invoking: &Config) -> Result<(Config, PathBuf)> {
    let dir = invoking.out_dir()?;
    let manifest_path = dir.join(MANIFEST);
    let mut merged = Config::load(&manifest_path)
        .map_err(|_| CliError::Data(format!("{}: missing manifest; run `generate`", dir.display())))?;
    // to_text/parse gives us the full key set of the invoking config.
    for line in invoking.to_text().lines() {
        let (key, value) = line.split_once(" = ").expect("well-formed config line");
        let pinned = key.starts_with("scene.")
            || key.starts_with("render.")
            || key.starts_with("camera.");
        if !pinned {
            merged.set(key, value.to_string());
        }
    }
    Ok((merged, dir))
}

fn update_manifest(dir: &Path, updates: &[(String, String)]) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut manifest = Config::load(&path)?;
    for (k, v) in updates {
        manifest.set(k, v.clone());
    }
    std::fs::write(&path, manifest.to_text())
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn read_cloud(dir: &Path, name: &str) -> Result<NeuralPointCloud> {
    formats::read_npc1(&dir.join(name))
}

fn decoder_for(merged: &Config, cloud: &NeuralPointCloud) -> Result<Decoder> {
    let spec = merged.scene_spec()?;
    if cloud.feature_dim() != spec.feature_dim {
        return Err(CliError::Data(format!(
            "cloud feature dim {} does not match scene.feature_dim {}",
            cloud.feature_dim(),
            spec.feature_dim
        )));
    }
    Decoder::from_seed(spec.seed, spec.feature_dim).map_err(CliError::from)
}

/// `generate`: build the synthetic scene and write the directory.
pub fn cmd_generate(cfg: &Config) -> Result<()> {
    let dir = cfg.out_dir()?;
    let spec = cfg.scene_spec()?;
    let rcfg = cfg.render_config()?;
    let scene = generate_scene(&spec, &rcfg)?;

    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    formats::write_npc1(&dir.join(FULL_CLOUD), &scene.cloud)?;
    formats::write_npc1(&dir.join(BG_CLOUD), &scene.background)?;
    for (i, render) in scene.renders.iter().enumerate() {
        formats::write_ppm(&dir.join(image_name(i)), &render.color, render.width, render.height)?;
        formats::write_dpth(&dir.join(depth_name(i)), &render.depth)?;
        formats::write_pgm_mask(&dir.join(mask_name(i)), &scene.masks[i])?;
    }

    // Manifest: the invoking config with scene/render defaults materialized
    // plus the derived camera block. Re-running any command from it
    // reproduces outputs byte for byte.
    let mut manifest = cfg.clone();
    materialize_scene_keys(&mut manifest, &spec, &rcfg);
    manifest.set_cameras(&scene.cameras);
    std::fs::write(dir.join(MANIFEST), manifest.to_text())
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;

    println!(
        "generated scene: {} points ({} object), {} cameras -> {}",
        scene.cloud.len(),
        scene.object_indices.len(),
        scene.cameras.len(),
        dir.display()
    );
    Ok(())
}

fn materialize_scene_keys(manifest: &mut Config, spec: &nperf_core::SceneSpec, rcfg: &RenderConfig) {
    let fmt = |v: f64| format!("{v:?}");
    manifest.set("scene.seed", spec.seed.to_string());
    manifest.set("scene.feature_dim", spec.feature_dim.to_string());
    manifest.set("scene.image_width", spec.trajectory.image_size.0.to_string());
    manifest.set("scene.image_height", spec.trajectory.image_size.1.to_string());
    manifest.set("scene.cameras", spec.trajectory.count.to_string());
    manifest.set("scene.arc_radius", fmt(spec.trajectory.radius));
    manifest.set("scene.span_deg", fmt(spec.trajectory.span_deg));
    let la = spec.trajectory.look_at;
    manifest.set("scene.look_at", format!("{:?},{:?},{:?}", la.x, la.y, la.z));
    manifest.set("scene.wall_z", fmt(spec.backdrop.wall_z));
    manifest.set("scene.half_extent", fmt(spec.backdrop.half_extent));
    manifest.set(
        "scene.floor_y",
        spec.backdrop.floor_y.map_or("none".into(), |v| format!("{v:?}")),
    );
    manifest.set("scene.backdrop_spacing", fmt(spec.backdrop.spacing));
    manifest.set("scene.object_spacing", fmt(spec.object_spacing));
    match &spec.object {
        None => manifest.set("scene.object", "none".into()),
        Some(nperf_core::scene::ObjectSpec::Sphere { center, radius }) => {
            manifest.set("scene.object", "sphere".into());
            manifest.set(
                "scene.object_center",
                format!("{:?},{:?},{:?}", center.x, center.y, center.z),
            );
            manifest.set("scene.object_radius", fmt(*radius));
        }
        Some(nperf_core::scene::ObjectSpec::Box { center, half_extents }) => {
            manifest.set("scene.object", "box".into());
            manifest.set(
                "scene.object_center",
                format!("{:?},{:?},{:?}", center.x, center.y, center.z),
            );
            manifest.set(
                "scene.object_half_extents",
                format!("{:?},{:?},{:?}", half_extents.x, half_extents.y, half_extents.z),
            );
        }
    }
    manifest.set("render.samples_per_ray", rcfg.samples_per_ray.to_string());
    manifest.set("render.aggregation_radius", fmt(rcfg.aggregation_radius));
    manifest.set("render.max_neighbors", rcfg.max_neighbors.to_string());
    manifest.set(
        "render.background",
        format!("{:?},{:?},{:?}", rcfg.background[0], rcfg.background[1], rcfg.background[2]),
    );
    manifest.set(
        "render.jitter",
        rcfg.jitter.map_or("off".into(), |s| s.to_string()),
    );
}

/// `segment`: lift a 2D mask through depth and register it onto the cloud.
pub fn cmd_segment(cfg: &Config) -> Result<()> {
    let (merged, dir) = effective_config(cfg)?;
    let cameras = merged.cameras()?;
    let cam_idx = merged.segment_camera()?;
    if cam_idx >= cameras.len() {
        return Err(CliError::Usage(format!(
            "segment.camera {cam_idx} out of range ({} cameras)",
            cameras.len()
        )));
    }
    let cam = &cameras[cam_idx];
    let cloud = read_cloud(&dir, FULL_CLOUD)?;
    let depth = formats::read_dpth(&dir.join(depth_name(cam_idx)))?;
    let mask_src = merged.get("segment.mask").unwrap_or("gt");
    let mask = if mask_src == "gt" {
        formats::read_pgm_mask(&dir.join(mask_name(cam_idx)))?
    } else {
        let p = PathBuf::from(mask_src);
        let p = if p.exists() { p } else { dir.join(mask_src) };
        formats::read_pgm_mask(&p)?
    };
    let (lifted, skipped) = lift_mask(cam, &depth, &mask)?;
    let radius = match merged.segment_radius()? {
        Some(r) => r,
        None => 2.0 * median_nn_spacing(cloud.positions()),
    };
    let mask3 = register_mask(&lifted, &cloud, radius)?;
    let out_name = merged.get("segment.out").unwrap_or(DEFAULT_MASK3);
    formats::write_msk3(&dir.join(out_name), &mask3)?;
    println!(
        "segment: |lifted| = {} (skipped {} maskless-depth pixels), |registered| = {}, |remainder| = {}, radius = {radius}",
        lifted.len(),
        skipped,
        mask3.len(),
        cloud.len() - mask3.len()
    );
    Ok(())
}

/// `edit`: apply remove/rigid/deform to the masked points.
pub fn cmd_edit(cfg: &Config) -> Result<()> {
    let (merged, dir) = effective_config(cfg)?;
    let cloud = read_cloud(&dir, FULL_CLOUD)?;
    let mask_name3 = merged.get("edit.mask").unwrap_or(DEFAULT_MASK3);
    let mask = formats::read_msk3(&dir.join(mask_name3), cloud.len())?;
    let op = merged.edit_op()?;
    let (edited, vacated) = edit_masked_points(&cloud, &mask, &op)?;
    formats::write_npc1(&dir.join(EDITED_CLOUD), &edited)?;
    formats::write_npc1(&dir.join(VACATED_CLOUD), &positions_cloud(&vacated)?)?;

    let mut updates: Vec<(String, String)> =
        vec![("edit.op".into(), merged.get("edit.op").unwrap_or("remove").to_string())];
    for key in ["edit.axis", "edit.degrees", "edit.pivot", "edit.translation", "edit.factors", "edit.shear", "edit.mask"] {
        if let Some(v) = merged.get(key) {
            updates.push((key.into(), v.to_string()));
        }
    }
    update_manifest(&dir, &updates)?;
    println!(
        "edit: {} -> {} points, vacated {}",
        cloud.len(),
        edited.len(),
        vacated.len()
    );
    Ok(())
}

/// Positions-only cloud (F = 1) used to persist vacated locations as NPC1.
fn positions_cloud(positions: &[Vec3]) -> Result<NeuralPointCloud> {
    let n = positions.len();
    NeuralPointCloud::new(positions.to_vec(), vec![1.0; n], vec![0.0; n], 1)
        .map_err(CliError::from)
}

/// `dnr`: plan resample targets and append strategy-initialized points.
pub fn cmd_dnr(cfg: &Config) -> Result<()> {
    let (merged, dir) = effective_config(cfg)?;
    let dnr_cfg = merged.dnr_config()?;
    let in_name = merged.get("dnr.cloud").unwrap_or(EDITED_CLOUD);
    let cloud = read_cloud(&dir, in_name)?;
    let vacated: Vec<Vec3> = read_cloud(&dir, VACATED_CLOUD)?.positions().to_vec();
    let cameras = merged.cameras()?;
    let mut depths = Vec::with_capacity(cameras.len());
    let mut masks = Vec::with_capacity(cameras.len());
    for i in 0..cameras.len() {
        depths.push(formats::read_dpth(&dir.join(depth_name(i)))?);
        masks.push(formats::read_pgm_mask(&dir.join(mask_name(i)))?);
    }
    let views: Vec<ResampleView> = cameras
        .iter()
        .zip(depths.iter().zip(&masks))
        .map(|(camera, (depth, mask))| ResampleView { camera, depth, mask })
        .collect();
    // After a remove the masked points are gone from the cloud; after an
    // in-place transform they persist and must not serve as sources.
    let exclusion = if merged.get("edit.op").unwrap_or("remove") == "remove" {
        None
    } else {
        let mask_name3 = merged.get("edit.mask").unwrap_or(DEFAULT_MASK3);
        Some(formats::read_msk3(&dir.join(mask_name3), cloud.len())?)
    };
    let plan = plan_resample(&cloud, &vacated, &views, &dnr_cfg, exclusion.as_ref())?;
    let out = apply_dnr(&cloud, &plan, &dnr_cfg)?;
    formats::write_npc1(&dir.join(RESAMPLED_CLOUD), &out)?;
    update_manifest(
        &dir,
        &[
            ("dnr.strategy".into(), dnr_cfg.strategy.name().to_string()),
            ("dnr.k".into(), dnr_cfg.k.to_string()),
        ],
    )?;
    println!(
        "dnr[{}]: {} targets ({} vacated, {} backfill; {} pixels skipped), cloud {} -> {}",
        dnr_cfg.strategy.name(),
        plan.targets.len(),
        vacated.len(),
        plan.targets.len() - vacated.len(),
        plan.skipped_pixels,
        cloud.len(),
        out.len()
    );
    Ok(())
}

/// Loads everything `train`/`metrics` need: observed views and analytic
/// background truth (rendered on demand from the background cloud).
struct SupervisionData {
    cameras: Vec<Camera>,
    images: Vec<Vec<[f64; 3]>>,
    depths: Vec<DepthMap>,
    masks: Vec<Mask2D>,
    bg_images: Vec<Vec<[f64; 3]>>,
    bg_depths: Vec<DepthMap>,
}

fn load_supervision(merged: &Config, dir: &Path) -> Result<SupervisionData> {
    let cameras = merged.cameras()?;
    let rcfg = merged.render_config()?;
    let bg = read_cloud(dir, BG_CLOUD)?;
    let decoder = decoder_for(merged, &bg)?;
    let index = PointIndex::build(bg.positions());
    let mut images = Vec::new();
    let mut depths = Vec::new();
    let mut masks = Vec::new();
    let mut bg_images = Vec::new();
    let mut bg_depths = Vec::new();
    for (i, cam) in cameras.iter().enumerate() {
        let (img, w, h) = formats::read_ppm(&dir.join(image_name(i)))?;
        if (w, h) != (cam.width, cam.height) {
            return Err(CliError::Data(format!("{} raster mismatch", image_name(i))));
        }
        images.push(img);
        depths.push(formats::read_dpth(&dir.join(depth_name(i)))?);
        masks.push(formats::read_pgm_mask(&dir.join(mask_name(i)))?);
        let bg_render = render_view(&bg, &index, cam, &rcfg, &decoder)?;
        bg_images.push(bg_render.color);
        bg_depths.push(bg_render.depth);
    }
    Ok(SupervisionData { cameras, images, depths, masks, bg_images, bg_depths })
}

/// `train`: fine-tune features/confidences and write the loss trace.
pub fn cmd_train(cfg: &Config) -> Result<()> {
    let (merged, dir) = effective_config(cfg)?;
    let in_name = merged.get("train.cloud").unwrap_or(RESAMPLED_CLOUD);
    let cloud = read_cloud(&dir, in_name)?;
    let decoder = decoder_for(&merged, &cloud)?;
    let rcfg = merged.render_config()?;
    let tcfg = merged.train_config()?;
    let weights = merged.loss_weights()?;
    let sup_data = load_supervision(&merged, &dir)?;
    let sup = Supervision {
        cameras: &sup_data.cameras,
        images: &sup_data.images,
        depths: &sup_data.depths,
        masks: &sup_data.masks,
        bg_images: &sup_data.bg_images,
        bg_depths: &sup_data.bg_depths,
    };
    let result = finetune(&cloud, &sup, &rcfg, &decoder, &tcfg, &weights)?;
    formats::write_npc1(&dir.join(FINETUNED_CLOUD), &result.cloud)?;

    let mut csv = String::from("step,total,color,per,depth,sparse\n");
    for (i, b) in result.trace.iter().enumerate() {
        writeln!(
            &mut csv,
            "{},{:?},{:?},{:?},{:?},{:?}",
            i + 1,
            b.total,
            b.color,
            b.per,
            b.depth,
            b.sparse
        )
        .unwrap();
    }
    std::fs::write(dir.join(LOSS_CSV), csv)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let final_loss = result.trace.last().map(|b| b.total);
    println!(
        "train: {} steps, convergence step {}, final loss {:?}",
        result.trace.len(),
        result.convergence_step,
        final_loss
    );
    Ok(())
}

/// `render`: render a cloud from every camera to PPM + DPTH.
pub fn cmd_render(cfg: &Config) -> Result<()> {
    let (merged, dir) = effective_config(cfg)?;
    let name = merged.get("render.cloud").unwrap_or(FINETUNED_CLOUD);
    let cloud = read_cloud(&dir, name)?;
    let decoder = decoder_for(&merged, &cloud)?;
    let rcfg = merged.render_config()?;
    let cameras = merged.cameras()?;
    let index = PointIndex::build(cloud.positions());
    for (i, cam) in cameras.iter().enumerate() {
        let out: RenderOutput = render_view(&cloud, &index, cam, &rcfg, &decoder)?;
        formats::write_ppm(&dir.join(render_image_name(i)), &out.color, out.width, out.height)?;
        formats::write_dpth(&dir.join(render_depth_name(i)), &out.depth)?;
    }
    println!("render[{}]: {} views -> {}", name, cameras.len(), dir.display());
    Ok(())
}

/// `metrics`: PSNR/SSIM. In scene mode the named cloud is rendered in float
/// and scored against the analytic background truth (full image + masked
/// region); in files mode two PPMs are compared directly.
pub fn cmd_metrics(cfg: &Config) -> Result<()> {
    match cfg.get("metrics.mode").unwrap_or("scene") {
        "files" => {
            let (a, wa, ha) = formats::read_ppm(&PathBuf::from(cfg.require("metrics.a")?))?;
            let (b, wb, hb) = formats::read_ppm(&PathBuf::from(cfg.require("metrics.b")?))?;
            if (wa, ha) != (wb, hb) {
                return Err(CliError::Data("metrics: raster mismatch".into()));
            }
            let m = image_metrics(&a, &b, wa, ha, None)?;
            println!("psnr = {}", fmt_metric(m.psnr));
            println!("ssim = {:.6}", m.ssim);
            Ok(())
        }
        "scene" => {
            let (merged, dir) = effective_config(cfg)?;
            let name = merged.get("metrics.cloud").unwrap_or(FINETUNED_CLOUD);
            let cloud = read_cloud(&dir, name)?;
            let decoder = decoder_for(&merged, &cloud)?;
            let rcfg = merged.render_config()?;
            let sup = load_supervision(&merged, &dir)?;
            let index = PointIndex::build(cloud.positions());
            let mut csv = String::from("camera,psnr,ssim,psnr_masked,ssim_masked\n");
            let mut mean_psnr = 0.0;
            let mut mean_masked = 0.0;
            let mut masked_count = 0usize;
            for (i, cam) in sup.cameras.iter().enumerate() {
                let out = render_view(&cloud, &index, cam, &rcfg, &decoder)?;
                let m = image_metrics(
                    &out.color,
                    &sup.bg_images[i],
                    cam.width,
                    cam.height,
                    Some(&sup.masks[i]),
                )?;
                writeln!(
                    &mut csv,
                    "{i},{},{:.6},{},{}",
                    fmt_metric(m.psnr),
                    m.ssim,
                    m.psnr_masked.map_or("na".into(), fmt_metric),
                    m.ssim_masked.map_or("na".into(), |v| format!("{v:.6}")),
                )
                .unwrap();
                mean_psnr += m.psnr / sup.cameras.len() as f64;
                if let Some(pm) = m.psnr_masked {
                    mean_masked += pm;
                    masked_count += 1;
                }
            }
            std::fs::write(dir.join(METRICS_CSV), &csv)
                .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
            print!("{csv}");
            if masked_count > 0 {
                println!(
                    "mean psnr = {mean_psnr:.4}, mean masked psnr = {:.4}",
                    mean_masked / masked_count as f64
                );
            } else {
                println!("mean psnr = {mean_psnr:.4}");
            }
            Ok(())
        }
        other => Err(CliError::Usage(format!(
            "metrics.mode must be scene|files, got '{other}'"
        ))),
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

/// `mi`: masked-region adjacent-view ray mutual information for a cloud. The
/// quantization codebook is fitted per measured cloud (or on `mi.fit_cloud`)
/// and pair pixels come from each view's object mask.
pub fn cmd_mi(cfg: &Config) -> Result<()> {
    let (merged, dir) = effective_config(cfg)?;
    let name = merged.get("mi.cloud").unwrap_or(RESAMPLED_CLOUD);
    let cloud = read_cloud(&dir, name)?;
    // By default the codebook is fitted on the measured cloud itself: every
    // strategy gets the same 16-bin quantization capacity over its own
    // feature population. A fixed external reference can leave a strategy's
    // systematically scaled features clamped into one bin.
    let fit_name = merged.get("mi.fit_cloud").unwrap_or("self");
    let reference = if fit_name == "self" { cloud.clone() } else { read_cloud(&dir, fit_name)? };
    let decoder = decoder_for(&merged, &cloud)?;
    let rcfg = merged.render_config()?;
    let cameras = merged.cameras()?;
    let (bins, pairs_per_view, seed) = merged.mi_params()?;
    let mi_cfg = MiConfig::fit(
        reference.features_flat(),
        reference.feature_dim(),
        bins,
        pairs_per_view,
        seed,
    )?;
    let mut masks = Vec::with_capacity(cameras.len());
    for i in 0..cameras.len() {
        masks.push(formats::read_pgm_mask(&dir.join(mask_name(i)))?);
    }
    let value = scene_mi(&cloud, &cameras, Some(&masks), &rcfg, &decoder, &mi_cfg)?;
    let csv = format!(
        "cloud,bins,pairs_per_view,seed,scene_mi\n{name},{bins},{pairs_per_view},{seed},{value:?}\n"
    );
    std::fs::write(dir.join(MI_CSV), &csv)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    println!("scene_mi[{name}] = {value:.6}");
    Ok(())
}
