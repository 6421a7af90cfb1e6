//! `kernel`: transformer NNGP/NTK between two dataset records.

use std::path::PathBuf;

use clap::Args;
use serde_json::{json, Value};

use capkernel::finite_width::{empirical_covariance, flop_count, FiniteDims, Tap, TapSpec};
use capkernel::harness::{input_rows, left_pad};
use capkernel::io::write_container;
use capkernel::kernel::{propagate_transformer, BlockParams, KernelMode, McConfig};
use capkernel::{linalg, Exec};

use crate::error::CliError;
use crate::gen::{read_instance, EmbedArgs};
use crate::manifest::{output_path, write_atomic};

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeArg {
    Nngp,
    Ntk,
}

#[derive(Args, Debug)]
pub struct KernelArgs {
    /// Dataset file holding the first input.
    #[arg(long)]
    pub a: PathBuf,
    /// Dataset file holding the second input.
    #[arg(long)]
    pub b: PathBuf,
    /// 1-based record index in `--a`.
    #[arg(long, default_value_t = 1)]
    pub line_a: usize,
    /// 1-based record index in `--b`.
    #[arg(long, default_value_t = 1)]
    pub line_b: usize,
    #[arg(long, default_value_t = 1)]
    pub depth: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Nngp)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1024)]
    pub n_mc: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub antithetic: bool,
    #[command(flatten)]
    pub embed: EmbedArgs,
    /// Where the final cross block and its standard errors are written.
    #[arg(long, default_value = "kernel.kmc")]
    pub matrix_out: PathBuf,
    /// Also report the forward-pass FLOP count of the finite network.
    #[arg(long)]
    pub flops: bool,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Key width; defaults to `d_model / heads`.
    #[arg(long)]
    pub d_k: Option<usize>,
    /// Compare with the empirical covariance of finite networks (NNGP only).
    #[arg(long)]
    pub validate_finite: bool,
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
}

/// JSON has no infinities or NaNs; those are written as strings.
fn number(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

pub fn run_kernel(args: &KernelArgs, exec: Exec) -> Result<(), CliError> {
    let ia = read_instance(&args.a, args.line_a)?;
    let ib = read_instance(&args.b, args.line_b)?;
    if ia.kind != ib.kind {
        return Err(CliError::Config(format!("inputs are {} and {} instances", ia.kind, ib.kind)));
    }
    let rows = input_rows(ia.kind, ia.size.max(ib.size));
    let x1 = left_pad(&args.embed.embed(&ia)?, rows);
    let x2 = left_pad(&args.embed.embed(&ib)?, rows);
    if x1.shape() != x2.shape() {
        return Err(CliError::Config(format!("embedded shapes differ: {:?} vs {:?}", x1.shape(), x2.shape())));
    }
    let mode = match args.mode {
        ModeArg::Nngp => KernelMode::Nngp,
        ModeArg::Ntk => KernelMode::Ntk,
    };
    let params = BlockParams::default();
    let mc = McConfig {
        antithetic: args.antithetic,
        exec,
        ..McConfig::new(args.n_mc, args.seed)
    };
    let out = propagate_transformer(&x1, &x2, args.depth, &params, &mc, mode)?;

    let path = output_path(&args.matrix_out);
    let mut bytes = Vec::new();
    write_container(&mut bytes, &[out.matrix.clone(), out.matrix_se.clone()])?;
    write_atomic(&path, &bytes)?;

    let sym = linalg::symmetrize(&out.matrix);
    let mut report = json!({
        "mode": format!("{:?}", args.mode).to_lowercase(),
        "t": rows,
        "n_mc": args.n_mc,
        "value": number(out.value),
        "stderr": number(out.stderr),
        "max_stderr": number(linalg::max_norm(&out.matrix_se)),
        "amplification": number(out.amplification),
        "asymmetry": linalg::max_asymmetry(&out.matrix),
        "min_eigenvalue": linalg::min_eigenvalue(&sym),
        "matrix_path": path.display().to_string(),
    });
    let d_k = args.d_k.unwrap_or((args.d_model / args.heads.max(1)).max(1));
    if args.flops {
        report["flops"] = json!(flop_count(
            args.depth as u64,
            args.heads as u64,
            args.d_model as u64,
            d_k as u64,
            rows as u64
        ));
    }
    if args.validate_finite {
        if mode != KernelMode::Nngp {
            return Err(CliError::Config("--validate-finite needs --mode nngp".into()));
        }
        let dims = FiniteDims {
            d_k,
            block: params,
            ..FiniteDims::new(x1.ncols(), args.d_model, args.heads, args.depth)
        };
        let spec = TapSpec {
            exec,
            ..TapSpec::new(Tap::PostMlp, args.depth - 1, args.draws, args.seed)
        };
        let emp = empirical_covariance(&x1, &x2, &dims, &spec).map_err(|e| CliError::Config(e.to_string()))?;
        let (m, se) = emp.cross();
        let worst_se = m
            .iter()
            .zip(se.iter())
            .zip(out.matrix.iter().zip(out.matrix_se.iter()))
            .map(|((e, es), (k, ks))| (e - k).abs() / (es * es + ks * ks).sqrt().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        report["finite_max_gap"] = json!(linalg::max_abs_diff(m, &out.matrix));
        report["finite_worst_se"] = json!(worst_se);
        report["finite_draws"] = json!(args.draws);
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
