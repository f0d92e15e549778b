use nperf_cli::pipeline;
use nperf_cli::{CliError, Config};

const USAGE: &str = "\
nperf <command> --config <path> [--override key=value]...

commands:
  generate   build a synthetic scene directory from scene.*/render.* config
  segment    lift a 2D mask through depth and register it as a 3D point mask
  edit       remove or transform the masked points (edit.*)
  dnr        resample vacated/empty regions with a DNR strategy (dnr.*)
  train      fine-tune point features and confidences (train.*, loss.*)
  render     render a cloud from every scene camera (render.cloud)
  metrics    PSNR/SSIM against the analytic background truth (metrics.*)
  mi         adjacent-view ray mutual information (mi.*)

The environment variable NPERF_THREADS caps the worker count.";

fn run() -> Result<(), CliError> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        return Err(CliError::Usage(format!("missing command\n\n{USAGE}")));
    };
    let mut config_path: Option<String> = None;
    let mut overrides: Vec<String> = Vec::new();
    let mut i = 1;
    while i < args.len() {
        match args[i].as_str() {
            "--config" => {
                i += 1;
                config_path =
                    Some(args.get(i).cloned().ok_or_else(|| {
                        CliError::Usage("--config needs a path".into())
                    })?);
            }
            "--override" => {
                i += 1;
                overrides.push(args.get(i).cloned().ok_or_else(|| {
                    CliError::Usage("--override needs key=value".into())
                })?);
            }
            other => {
                return Err(CliError::Usage(format!("unknown argument '{other}'\n\n{USAGE}")));
            }
        }
        i += 1;
    }
    let path = config_path
        .ok_or_else(|| CliError::Usage(format!("--config is required\n\n{USAGE}")))?;
    let mut cfg = Config::load(std::path::Path::new(&path))?;
    for o in &overrides {
        cfg.set_override(o)?;
    }
    match command.as_str() {
        "generate" => pipeline::cmd_generate(&cfg),
        "segment" => pipeline::cmd_segment(&cfg),
        "edit" => pipeline::cmd_edit(&cfg),
        "dnr" => pipeline::cmd_dnr(&cfg),
        "train" => pipeline::cmd_train(&cfg),
        "render" => pipeline::cmd_render(&cfg),
        "metrics" => pipeline::cmd_metrics(&cfg),
        "mi" => pipeline::cmd_mi(&cfg),
        other => Err(CliError::Usage(format!("unknown command '{other}'\n\n{USAGE}"))),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("nperf: {e}");
        std::process::exit(e.exit_code());
    }
}
