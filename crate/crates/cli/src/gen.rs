//! `gen` and `verify`: task datasets as JSON lines plus an embedding sidecar.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use capkernel::io::{read_container, write_container};
use capkernel::tasks::cfg::GrammarSpec;
use capkernel::tasks::embed::{embed_instance, PeMode};
use capkernel::tasks::{Generator, TaskInstance, TaskKind, TaskParams};
use capkernel::{Exec, Matrix};

use crate::error::CliError;
use crate::manifest::{output_path, sha256_hex, sibling, write_atomic, RunManifest};

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub task: TaskKind,
    /// Instance size T.
    #[arg(long)]
    pub t: usize,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset path; the embedding container and manifest are written next
    /// to it as `<out>.kmc` and `<out>.manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub vocab: Option<u32>,
    #[arg(long)]
    pub value_range: Option<u32>,
    /// Fixed three-letter pattern for string matching.
    #[arg(long)]
    pub pattern: Option<String>,
    /// Expected degree of the random geometric graph.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Dimension of the random geometric graph.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub grammar_seed: u64,
    /// JSON grammar replacing the random one.
    #[arg(long)]
    pub grammar: Option<PathBuf>,
    #[command(flatten)]
    pub embed: EmbedArgs,
    /// Re-read the written files and re-check every label.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Args, Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EmbedArgs {
    /// Embedding width.
    #[arg(long = "embed-dim", default_value_t = 16)]
    pub d: usize,
    #[arg(long, value_enum, default_value_t = PeArg::Rotary)]
    pub pe: PeArg,
    #[arg(long, default_value_t = 0)]
    pub codebook_seed: u64,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeArg {
    Rotary,
    Sinusoidal,
    SpecialOnly,
}

impl From<PeArg> for PeMode {
    fn from(p: PeArg) -> Self {
        match p {
            PeArg::Rotary => PeMode::Rotary,
            PeArg::Sinusoidal => PeMode::Sinusoidal,
            PeArg::SpecialOnly => PeMode::SpecialOnly,
        }
    }
}

impl EmbedArgs {
    pub fn embed(&self, inst: &TaskInstance) -> Result<Matrix, CliError> {
        Ok(embed_instance(inst, self.d, self.pe.into(), self.codebook_seed)?)
    }
}

/// What `verify` needs to regenerate labels and embeddings.
#[derive(Debug, Serialize, Deserialize)]
struct GenSettings {
    task: TaskParams,
    t: usize,
    count: usize,
    embedding: EmbedArgs,
}

fn read_grammar(path: &Path) -> Result<GrammarSpec, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn params(args: &GenArgs) -> Result<TaskParams, CliError> {
    let mut p = TaskParams::new(args.task);
    if let Some(v) = args.vocab {
        p.vocab = v;
    }
    if let Some(v) = args.value_range {
        p.value_range = v;
    }
    p.pattern = args.pattern.clone();
    if let Some(a) = args.alpha {
        p.alpha = a;
    }
    if let Some(d) = args.dim {
        p.dim = d;
    }
    p.grammar_seed = args.grammar_seed;
    if let Some(path) = &args.grammar {
        p.grammar = Some(read_grammar(path)?);
    }
    Ok(p)
}

pub fn run_gen(args: &GenArgs, exec: Exec) -> Result<(), CliError> {
    let task = params(args)?;
    let generator = Generator::new(task.clone(), args.t)?;
    let instances = generator.dataset(args.t, args.count, args.seed, exec)?;
    let embeddings = exec
        .map(instances.len(), |i| args.embed.embed(&instances[i]))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let out = output_path(&args.out);
    let mut jsonl = String::new();
    for inst in &instances {
        jsonl.push_str(&serde_json::to_string(inst).expect("instances serialize"));
        jsonl.push('\n');
    }
    write_atomic(&out, jsonl.as_bytes())?;
    let kmc = sibling(&out, "kmc");
    let mut bytes = Vec::new();
    write_container(&mut bytes, &embeddings)?;
    write_atomic(&kmc, &bytes)?;

    let settings = GenSettings {
        task,
        t: args.t,
        count: args.count,
        embedding: args.embed,
    };
    let settings = serde_json::to_value(&settings).expect("settings serialize");
    let hash = sha256_hex(settings.to_string().as_bytes());
    let mut manifest = RunManifest::new("gen", hash, args.seed, settings);
    manifest.add_output(&out)?;
    manifest.add_output(&kmc)?;
    manifest.write(&sibling(&out, "manifest.json"))?;
    eprintln!("wrote {} {} instances to {}", instances.len(), args.task, out.display());
    if args.verify {
        verify(&out, exec)?;
    }
    Ok(())
}

/// Re-parses a dataset, recomputes every label with the exact oracles and,
/// when the sidecar exists, every embedding. Errors name the first bad line
/// (1-based).
pub fn verify(path: &Path, exec: Exec) -> Result<usize, CliError> {
    let manifest = RunManifest::read(&sibling(path, "manifest.json"))?;
    let settings: GenSettings = serde_json::from_value(manifest.settings)
        .map_err(|e| CliError::Config(format!("manifest settings: {e}")))?;
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut instances = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        let inst: TaskInstance = serde_json::from_str(&line).map_err(|e| CliError::Verify {
            line: i + 1,
            message: format!("unparseable record: {e}"),
        })?;
        instances.push(inst);
    }
    let max_t = instances.iter().map(|x| x.size).max().unwrap_or(settings.t);
    let generator = Generator::new(settings.task, max_t)?;
    let checks = exec.map(instances.len(), |i| {
        let inst = &instances[i];
        match generator.oracle_label(inst) {
            Ok(label) if label == inst.label => Ok(()),
            Ok(label) => Err(format!("stored label {:?} but the oracle gives {label:?}", inst.label)),
            Err(e) => Err(format!("oracle rejected the payload: {e}")),
        }
    });
    if let Some((i, Err(message))) = checks.into_iter().enumerate().find(|(_, c)| c.is_err()) {
        return Err(CliError::Verify { line: i + 1, message });
    }
    let kmc = sibling(path, "kmc");
    if kmc.exists() {
        let file = File::open(&kmc).map_err(|e| CliError::io(&kmc, e))?;
        let stored = read_container(BufReader::new(file))?;
        if stored.len() != instances.len() {
            return Err(CliError::Verify {
                line: stored.len().min(instances.len()) + 1,
                message: format!("sidecar holds {} matrices for {} records", stored.len(), instances.len()),
            });
        }
        for (i, (inst, m)) in instances.iter().zip(&stored).enumerate() {
            if settings.embedding.embed(inst)? != *m {
                return Err(CliError::Verify {
                    line: i + 1,
                    message: "embedding differs from the sidecar".into(),
                });
            }
        }
    }
    let mut stdout = BufWriter::new(std::io::stdout());
    writeln!(stdout, "verified {} records in {}", instances.len(), path.display()).map_err(|e| CliError::io(path, e))?;
    Ok(instances.len())
}

/// Reads record `line` (1-based) of a dataset file.
pub fn read_instance(path: &Path, line: usize) -> Result<TaskInstance, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let text = BufReader::new(file)
        .lines()
        .nth(line.saturating_sub(1))
        .ok_or_else(|| CliError::Config(format!("{} has no line {line}", path.display())))?
        .map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}:{line}: {e}", path.display())))
}
