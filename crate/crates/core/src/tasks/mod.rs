//! Task generators, labels and exact oracles.
//!
//! Size conventions: induction and CFG count sequence tokens, sorting and
//! string matching count the random list or text (the separator and suffix
//! come on top), and graph tasks count nodes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::rng;

pub mod cfg;
pub mod embed;
pub mod graph;
pub mod induction;
pub mod sort;
pub mod string_match;

pub use cfg::{build_grammar, cyk_oracle, gen_cfg, CfgSampler, GrammarSpec};
pub use embed::{embed_instance, PeMode};
pub use graph::{gen_rgg, mincut_oracle, spp_oracle, GeoGraph};
pub use induction::gen_induction;
pub use sort::{gen_sort, sort_score};
pub use string_match::gen_string_match;

/// Generator version stored in every dataset record.
pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("task size {got} is below the minimum {min}")]
    TooShort { min: usize, got: usize },
    #[error("invalid task parameters: {0}")]
    InvalidParams(String),
    #[error("sequence is not a permutation of the input")]
    NotPermutation,
    #[error("degenerate grammar: {0}")]
    DegenerateGrammar(String),
    #[error("invalid grammar: {0}")]
    InvalidGrammar(String),
    #[error("no derivation of length {t} exists")]
    UnsatisfiableLength { t: usize },
    #[error("radius {radius} exceeds the box diameter {diameter}")]
    RadiusOverflow { radius: f64, diameter: f64 },
    #[error("embedding width {got} is below the required {needed}")]
    CapacityExceeded { needed: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Induction,
    Sort,
    StringMatch,
    Cfg,
    Spp,
    Mincut,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Induction,
        TaskKind::Sort,
        TaskKind::StringMatch,
        TaskKind::Cfg,
        TaskKind::Spp,
        TaskKind::Mincut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Induction => "induction",
            TaskKind::Sort => "sort",
            TaskKind::StringMatch => "string_match",
            TaskKind::Cfg => "cfg",
            TaskKind::Spp => "spp",
            TaskKind::Mincut => "mincut",
        }
    }

    pub fn is_graph(self) -> bool {
        matches!(self, TaskKind::Spp | TaskKind::Mincut)
    }

    /// Binary tasks alternate positives and negatives by instance index.
    pub fn is_binary(self) -> bool {
        matches!(self, TaskKind::StringMatch | TaskKind::Cfg)
    }

    pub fn min_size(self) -> usize {
        match self {
            TaskKind::Induction => 4,
            TaskKind::StringMatch => string_match::PATTERN_LEN,
            TaskKind::Spp | TaskKind::Mincut => 2,
            TaskKind::Sort | TaskKind::Cfg => 1,
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TaskError::InvalidParams(format!("unknown task {s:?}")))
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Generator settings. Fields that do not apply to `kind` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskParams {
    pub kind: TaskKind,
    #[serde(default = "default_vocab")]
    pub vocab: u32,
    #[serde(default = "default_value_range")]
    pub value_range: u32,
    /// Fixed three-letter pattern; random per instance when absent.
    #[serde(default)]
    pub pattern: Option<String>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub grammar_seed: u64,
    /// Replaces the random grammar when present.
    #[serde(default)]
    pub grammar: Option<GrammarSpec>,
}

fn default_vocab() -> u32 {
    induction::DEFAULT_VOCAB
}
fn default_value_range() -> u32 {
    100
}
fn default_alpha() -> f64 {
    graph::DEFAULT_ALPHA
}
fn default_dim() -> usize {
    graph::DEFAULT_DIM
}

impl TaskParams {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            vocab: default_vocab(),
            value_range: default_value_range(),
            pattern: None,
            alpha: default_alpha(),
            dim: default_dim(),
            grammar_seed: 0,
            grammar: None,
        }
    }

    /// Number of classes for classification tasks; `None` for the graph
    /// tasks, which regress a count.
    pub fn classes(&self) -> Option<usize> {
        match self.kind {
            TaskKind::Induction => Some(self.vocab as usize),
            TaskKind::Sort => Some(self.value_range as usize),
            TaskKind::StringMatch | TaskKind::Cfg => Some(2),
            TaskKind::Spp | TaskKind::Mincut => None,
        }
    }

    pub fn resolve_grammar(&self) -> Result<GrammarSpec, TaskError> {
        match &self.grammar {
            Some(g) => {
                g.validate()?;
                Ok(g.clone())
            }
            None => build_grammar(self.grammar_seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Sequence {
        tokens: Vec<u32>,
        special: Vec<bool>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        loss_mask: Option<Vec<bool>>,
    },
    Graph(GeoGraph),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Label {
    Class(u32),
    Sequence(Vec<u32>),
    Count(u64),
    /// Source and target are disconnected.
    Unreachable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub size: usize,
    pub seed: u64,
    pub generator_version: u32,
    pub payload: Payload,
    pub label: Label,
}

/// What a model sees of an instance.
pub enum ModelInput<'a> {
    Tokens { tokens: Vec<u32>, special: Vec<bool> },
    Graph(&'a GeoGraph),
}

impl TaskInstance {
    pub fn tokens(&self) -> Option<&[u32]> {
        match &self.payload {
            Payload::Sequence { tokens, .. } => Some(tokens),
            Payload::Graph(_) => None,
        }
    }

    pub fn graph(&self) -> Option<&GeoGraph> {
        match &self.payload {
            Payload::Graph(g) => Some(g),
            Payload::Sequence { .. } => None,
        }
    }

    /// The full sequence for most tasks; sorting shows only the unsorted
    /// list and the separator, and is scored on the first sorted token.
    pub fn model_input(&self) -> ModelInput<'_> {
        match &self.payload {
            Payload::Graph(g) => ModelInput::Graph(g),
            Payload::Sequence { tokens, special, .. } => {
                let n = if self.kind == TaskKind::Sort { self.size + 1 } else { tokens.len() };
                ModelInput::Tokens {
                    tokens: tokens[..n].to_vec(),
                    special: special[..n].to_vec(),
                }
            }
        }
    }

    /// Regression target. Disconnected graphs map to `2T`.
    pub fn scalar_target(&self) -> f64 {
        match &self.label {
            Label::Class(c) => f64::from(*c),
            Label::Sequence(s) => s.first().map_or(0.0, |&v| f64::from(v)),
            Label::Count(n) => *n as f64,
            Label::Unreachable => 2.0 * self.size as f64,
        }
    }

    /// Classification target; disconnected graphs get the reserved class `T`.
    pub fn class_target(&self) -> usize {
        match &self.label {
            Label::Class(c) => *c as usize,
            Label::Sequence(s) => s.first().map_or(0, |&v| v as usize),
            Label::Count(n) => *n as usize,
            Label::Unreachable => self.size,
        }
    }
}

/// Generator with per-task precomputation (the grammar and its inside
/// table).
#[derive(Clone, Debug)]
pub struct Generator {
    params: TaskParams,
    pattern: Option<[u32; 3]>,
    cfg: Option<CfgSampler>,
}

impl Generator {
    /// `max_t` bounds the sizes this generator will be asked for; only the
    /// CFG task uses it.
    pub fn new(params: TaskParams, max_t: usize) -> Result<Self, TaskError> {
        let pattern = params.pattern.as_deref().map(string_match::parse_pattern).transpose()?;
        let cfg = if params.kind == TaskKind::Cfg {
            Some(CfgSampler::new(&params.resolve_grammar()?, max_t.max(1))?)
        } else {
            None
        };
        Ok(Self { params, pattern, cfg })
    }

    pub fn params(&self) -> &TaskParams {
        &self.params
    }

    pub fn grammar(&self) -> Option<&GrammarSpec> {
        self.cfg.as_ref().map(CfgSampler::spec)
    }

    /// Seed of instance `index` under `master_seed`.
    pub fn instance_seed(master_seed: u64, index: u64) -> u64 {
        rng::derive(master_seed, &[rng::domain::INSTANCE, index])
    }

    /// Instance `index` of the dataset with `master_seed`.
    pub fn instance(&self, t: usize, master_seed: u64, index: u64) -> Result<TaskInstance, TaskError> {
        let seed = Self::instance_seed(master_seed, index);
        self.instance_from_seed(t, seed, index.is_multiple_of(2))
    }

    pub fn instance_from_seed(&self, t: usize, seed: u64, positive: bool) -> Result<TaskInstance, TaskError> {
        let kind = self.params.kind;
        if t < kind.min_size() {
            return Err(TaskError::TooShort { min: kind.min_size(), got: t });
        }
        let mut r = rng::stream(seed, &[]);
        let (payload, label) = match kind {
            TaskKind::Induction => {
                let s = gen_induction(t, self.params.vocab, None, &mut r)?;
                (plain(s.tokens), Label::Class(s.label))
            }
            TaskKind::Sort => {
                let s = gen_sort(t, self.params.value_range, &mut r)?;
                let tokens = s.tokens();
                let special = (0..tokens.len()).map(|i| i == t).collect();
                let payload = Payload::Sequence {
                    tokens,
                    special,
                    loss_mask: Some(s.loss_mask()),
                };
                (payload, Label::Sequence(s.sorted))
            }
            TaskKind::StringMatch => {
                let pattern = self.pattern.unwrap_or_else(|| string_match::random_pattern(&mut r));
                let s = gen_string_match(t, pattern, positive, &mut r)?;
                let tokens = s.tokens();
                let special = tokens.iter().map(|&x| x == string_match::SEP).collect();
                let label = Label::Class(s.target());
                (Payload::Sequence { tokens, special, loss_mask: None }, label)
            }
            TaskKind::Cfg => {
                let sampler = self.cfg.as_ref().expect("cfg generator has a sampler");
                if t > sampler.max_len() {
                    return Err(TaskError::InvalidParams(format!(
                        "size {t} exceeds the generator bound {}",
                        sampler.max_len()
                    )));
                }
                let s = sampler.sample(t, positive, &mut r)?;
                (plain(s.tokens), Label::Class(u32::from(s.positive)))
            }
            TaskKind::Spp | TaskKind::Mincut => {
                let directed = kind == TaskKind::Mincut;
                let g = gen_rgg(t, self.params.alpha, self.params.dim, directed, &mut r)?;
                let label = graph_label(kind, &g);
                (Payload::Graph(g), label)
            }
        };
        Ok(TaskInstance {
            kind,
            size: t,
            seed,
            generator_version: GENERATOR_VERSION,
            payload,
            label,
        })
    }

    /// `count` instances in index order; generation runs under `exec`.
    pub fn dataset(&self, t: usize, count: usize, master_seed: u64, exec: Exec) -> Result<Vec<TaskInstance>, TaskError> {
        exec.map(count, |i| self.instance(t, master_seed, i as u64))
            .into_iter()
            .collect()
    }

    /// Recomputes the label of `inst` from its payload with the exact oracle.
    pub fn oracle_label(&self, inst: &TaskInstance) -> Result<Label, TaskError> {
        oracle_label(inst, self.grammar())
    }
}

fn plain(tokens: Vec<u32>) -> Payload {
    let special = vec![false; tokens.len()];
    Payload::Sequence { tokens, special, loss_mask: None }
}

fn graph_label(kind: TaskKind, g: &GeoGraph) -> Label {
    if kind == TaskKind::Spp {
        spp_oracle(g).map_or(Label::Unreachable, |d| Label::Count(d as u64))
    } else {
        Label::Count(mincut_oracle(g) as u64)
    }
}

fn layout_error(what: &str) -> TaskError {
    TaskError::InvalidParams(format!("payload layout: {what}"))
}

/// Recomputes a label from the payload. The CFG task needs its grammar.
pub fn oracle_label(inst: &TaskInstance, grammar: Option<&GrammarSpec>) -> Result<Label, TaskError> {
    let t = inst.size;
    match (&inst.payload, inst.kind) {
        (Payload::Graph(g), TaskKind::Spp | TaskKind::Mincut) => {
            if g.len() != t || (inst.kind == TaskKind::Mincut) != g.directed {
                return Err(layout_error("graph size or orientation"));
            }
            Ok(graph_label(inst.kind, g))
        }
        (Payload::Sequence { tokens, .. }, TaskKind::Induction) => {
            if tokens.len() != t {
                return Err(layout_error("induction length"));
            }
            induction::induction_oracle(tokens)
                .map(Label::Class)
                .ok_or_else(|| layout_error("trigger must occur exactly once before the end"))
        }
        (Payload::Sequence { tokens, .. }, TaskKind::Sort) => {
            if tokens.len() != 2 * t + 1 {
                return Err(layout_error("sort length"));
            }
            let sep = tokens[t];
            let s = sort::from_unsorted(tokens[..t].to_vec(), sep);
            if tokens[t + 1..] != s.sorted[..] {
                return Err(layout_error("suffix is not the sorted prefix"));
            }
            Ok(Label::Sequence(s.sorted))
        }
        (Payload::Sequence { tokens, .. }, TaskKind::StringMatch) => {
            let p = string_match::PATTERN_LEN;
            if tokens.len() != t + 1 + p || tokens[t] != string_match::SEP {
                return Err(layout_error("string match layout"));
            }
            let hit = string_match::contains(&tokens[..t], &tokens[t + 1..]);
            Ok(Label::Class(u32::from(hit)))
        }
        (Payload::Sequence { tokens, .. }, TaskKind::Cfg) => {
            let g = grammar.ok_or_else(|| TaskError::InvalidParams("cfg check needs the grammar".into()))?;
            if tokens.len() != t {
                return Err(layout_error("cfg length"));
            }
            Ok(Label::Class(u32::from(cyk_oracle(g, tokens))))
        }
        _ => Err(layout_error("payload type does not match the task")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_task_passes_its_own_oracle() {
        for kind in TaskKind::ALL {
            let t = match kind {
                TaskKind::Cfg => 24,
                TaskKind::Spp | TaskKind::Mincut => 20,
                _ => 16,
            };
            let gen = Generator::new(TaskParams::new(kind), t).unwrap();
            let data = gen.dataset(t, 200, 42, Exec::Parallel).unwrap();
            for inst in &data {
                assert_eq!(inst.size, t);
                assert_eq!(gen.oracle_label(inst).unwrap(), inst.label, "{kind}");
            }
            if kind.is_binary() {
                let pos = data.iter().filter(|i| i.label == Label::Class(1)).count();
                assert_eq!(pos, 100);
            }
        }
    }

    #[test]
    fn datasets_are_deterministic_across_executors() {
        let gen = Generator::new(TaskParams::new(TaskKind::Spp), 16).unwrap();
        let a = gen.dataset(16, 50, 1, Exec::Parallel).unwrap();
        let b = gen.dataset(16, 50, 1, Exec::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn instances_round_trip_through_json() {
        for kind in TaskKind::ALL {
            let gen = Generator::new(TaskParams::new(kind), 8).unwrap();
            let inst = gen.instance(8, 3, 0).unwrap();
            let json = serde_json::to_string(&inst).unwrap();
            assert_eq!(serde_json::from_str::<TaskInstance>(&json).unwrap(), inst);
        }
    }

    #[test]
    fn sort_model_input_stops_at_the_separator() {
        let gen = Generator::new(TaskParams::new(TaskKind::Sort), 5).unwrap();
        let inst = gen.instance(5, 0, 0).unwrap();
        match inst.model_input() {
            ModelInput::Tokens { tokens, special } => {
                assert_eq!(tokens.len(), 6);
                assert_eq!(tokens[5], 100);
                assert!(special[5]);
            }
            ModelInput::Graph(_) => unreachable!(),
        }
    }

    #[test]
    fn corrupted_label_is_detected() {
        let gen = Generator::new(TaskParams::new(TaskKind::Mincut), 12).unwrap();
        let mut inst = gen.instance(12, 9, 4).unwrap();
        let truth = gen.oracle_label(&inst).unwrap();
        inst.label = Label::Count(99);
        assert_ne!(gen.oracle_label(&inst).unwrap(), inst.label);
        assert_ne!(truth, inst.label);
    }
}
