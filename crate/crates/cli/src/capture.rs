//! `capture`: a full two-stage sweep from a TOML config.

use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;

use capkernel::harness::{run_capture, CaptureConfig, Checkpoint, RunOutcome};
use capkernel::Exec;

use crate::error::CliError;
use crate::manifest::{output_path, sha256_hex, write_atomic, RunManifest};

#[derive(Args, Debug)]
pub struct CaptureArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for curve.csv, fit.json, manifest.json and the
    /// checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/checkpoint.json` if present.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many completed grid points, leaving a checkpoint.
    #[arg(long, hide = true)]
    pub stop_after: Option<usize>,
}

/// Parses a config, reporting schema violations with their field path.
pub fn parse_config(text: &str) -> Result<CaptureConfig, CliError> {
    let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string()))?;
    let cfg: CaptureConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("at `{path}`: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn read_checkpoint(path: &Path) -> Result<Option<Checkpoint>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn run(args: &CaptureArgs, exec: Exec) -> Result<(), CliError> {
    let bytes = std::fs::read(&args.config).map_err(|e| CliError::io(&args.config, e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| CliError::Config(format!("config is not UTF-8: {e}")))?;
    let cfg = parse_config(&text)?;
    let hash = sha256_hex(&bytes);
    let out = output_path(&args.out);
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let ckpt_path = out.join("checkpoint.json");
    let resume = if args.resume { read_checkpoint(&ckpt_path)? } else { None };
    let mut manifest = RunManifest::new(
        "capture",
        hash.clone(),
        cfg.seed,
        json!({ "config_path": args.config.display().to_string(), "resumed": resume.is_some() }),
    );

    let mut write_error = None;
    let mut on_point = |c: &Checkpoint| {
        let text = serde_json::to_string_pretty(c).expect("checkpoint serializes");
        if let Err(e) = write_atomic(&ckpt_path, text.as_bytes()) {
            write_error = Some(e);
            return false;
        }
        eprintln!("grid point T={} done: {} samples", c.points.last().map_or(0, |p| p.t), c.points.last().map_or(0, |p| p.samples));
        args.stop_after.is_none_or(|k| c.points.len() < k)
    };
    let outcome = run_capture(&cfg, &hash, exec, resume, &mut on_point)?;
    if let Some(e) = write_error {
        return Err(e);
    }
    let curve = match outcome {
        RunOutcome::Stopped(c) => {
            eprintln!("stopped after {} grid points; checkpoint at {}", c.points.len(), ckpt_path.display());
            return Ok(());
        }
        RunOutcome::Complete(curve) => curve,
    };

    let csv = out.join("curve.csv");
    write_atomic(&csv, curve.to_csv().as_bytes())?;
    let fit = out.join("fit.json");
    let fit_doc = json!({
        "config_hash": hash,
        "t0": curve.t0,
        "verdict": curve.verdict,
        "fit": curve.fit,
        "stage1": curve.stage1,
    });
    write_atomic(&fit, format!("{}\n", serde_json::to_string_pretty(&fit_doc).expect("fit serializes")).as_bytes())?;
    manifest.add_output(&csv)?;
    manifest.add_output(&fit)?;
    manifest.write(&out.join("manifest.json"))?;
    let summary = match &curve.fit {
        Some(f) => format!("verdict {:?}, C = {:.3}, r2 = {:.3}, kappa = {:.3}", curve.verdict, f.c, f.r2, f.kappa),
        None => format!("verdict {:?} (too few points to fit)", curve.verdict),
    };
    println!("{summary}");
    Ok(())
}
