//! Random critical CNF grammars, exact-length string sampling and CYK
//! recognition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TaskError;
use crate::rng;

const POWER_ITERATIONS: usize = 1000;
const RADIUS_TOL: f64 = 1e-6;
const NEGATIVE_ATTEMPTS: usize = 200;
pub const MAX_VARIABLES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryRule {
    pub lhs: usize,
    pub left: usize,
    pub right: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminalRule {
    pub lhs: usize,
    pub terminal: u32,
    pub weight: f64,
}

/// CNF grammar. Weights are rule probabilities per left-hand side; the
/// sampler renormalises them, so hand-written grammars may use any positive
/// weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub variables: usize,
    pub terminals: u32,
    pub start: usize,
    /// Variable that never appears on a right-hand side; used to build
    /// negatives.
    pub adversarial: Option<usize>,
    pub binary: Vec<BinaryRule>,
    pub lexical: Vec<TerminalRule>,
    /// Informational; recomputed by the builder, ignored by the sampler.
    #[serde(default)]
    pub spectral_radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrammarConfig {
    pub variables: usize,
    pub terminals: u32,
    pub binary_per_variable: usize,
    pub max_terminal_per_variable: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            variables: 20,
            terminals: 16,
            binary_per_variable: 2,
            max_terminal_per_variable: 2,
        }
    }
}

pub fn build_grammar(seed: u64) -> Result<GrammarSpec, TaskError> {
    build_grammar_with(&GrammarConfig::default(), seed)
}

pub fn build_grammar_with(cfg: &GrammarConfig, seed: u64) -> Result<GrammarSpec, TaskError> {
    if cfg.variables < 2
        || cfg.variables > MAX_VARIABLES
        || cfg.terminals == 0
        || cfg.binary_per_variable == 0
        || cfg.max_terminal_per_variable == 0
    {
        return Err(TaskError::DegenerateGrammar("every variable needs binary and terminal rules".into()));
    }
    let mut r = rng::stream(seed, &[rng::domain::GRAMMAR]);
    let adversarial = cfg.variables - 1;
    let regular = adversarial;
    let mut binary = Vec::new();
    for lhs in 0..cfg.variables {
        let total: f64 = r.random_range(0.8..1.2);
        let raw: Vec<f64> = (0..cfg.binary_per_variable)
            .map(|_| r.random_range(0.5..1.5))
            .collect();
        let norm: f64 = raw.iter().sum();
        let mut seen = Vec::new();
        for w in raw {
            let (left, right) = loop {
                let pair = (r.random_range(0..regular), r.random_range(0..regular));
                if !seen.contains(&pair) || seen.len() >= regular * regular {
                    break pair;
                }
            };
            seen.push((left, right));
            binary.push(BinaryRule {
                lhs,
                left,
                right,
                weight: total * w / norm,
            });
        }
    }
    for _ in 0..3 {
        let rho = spectral_radius(cfg.variables, &binary);
        if !(rho.is_finite() && rho > 0.0) {
            return Err(TaskError::DegenerateGrammar("branching matrix has zero spectral radius".into()));
        }
        for rule in &mut binary {
            rule.weight /= rho;
        }
    }
    let rho = spectral_radius(cfg.variables, &binary);
    if (rho - 1.0).abs() > RADIUS_TOL {
        return Err(TaskError::DegenerateGrammar(format!("normalised spectral radius {rho}")));
    }

    let mut lexical = Vec::new();
    for lhs in 0..cfg.variables {
        let branching: f64 = binary.iter().filter(|b| b.lhs == lhs).map(|b| b.weight).sum();
        if branching >= 1.0 {
            return Err(TaskError::DegenerateGrammar(format!(
                "variable {lhs} has no terminal probability left"
            )));
        }
        let n = r.random_range(1..=cfg.max_terminal_per_variable.min(cfg.terminals as usize));
        let mut terms: Vec<u32> = Vec::with_capacity(n);
        while terms.len() < n {
            let a = r.random_range(0..cfg.terminals);
            if !terms.contains(&a) {
                terms.push(a);
            }
        }
        for &terminal in &terms {
            lexical.push(TerminalRule {
                lhs,
                terminal,
                weight: (1.0 - branching) / n as f64,
            });
        }
    }
    let spec = GrammarSpec {
        variables: cfg.variables,
        terminals: cfg.terminals,
        start: 0,
        adversarial: Some(adversarial),
        binary,
        lexical,
        spectral_radius: rho,
    };
    spec.validate()?;
    Ok(spec)
}

/// `M[A,B]` = total weight of rules `A -> BC` and `A -> CB`, counted once per
/// occurrence of `B`.
pub fn transition_matrix(variables: usize, binary: &[BinaryRule]) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; variables]; variables];
    for rule in binary {
        m[rule.lhs][rule.left] += rule.weight;
        m[rule.lhs][rule.right] += rule.weight;
    }
    m
}

/// Perron root by power iteration on `M + I`, which is primitive on every
/// strongly connected block even when `M` is periodic.
pub fn spectral_radius(variables: usize, binary: &[BinaryRule]) -> f64 {
    let m = transition_matrix(variables, binary);
    let mut v = vec![1.0 / variables as f64; variables];
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let w: Vec<f64> = (0..variables)
            .map(|i| v[i] + m[i].iter().zip(&v).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let s: f64 = w.iter().sum();
        let prev: f64 = v.iter().sum();
        lambda = s / prev;
        v = w.into_iter().map(|x| x / s).collect();
    }
    lambda - 1.0
}

impl GrammarSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |msg: String| Err(TaskError::InvalidGrammar(msg));
        if self.variables == 0 || self.variables > MAX_VARIABLES {
            return bad(format!("variable count must be in 1..={MAX_VARIABLES}"));
        }
        if self.start >= self.variables {
            return bad("start symbol out of range".into());
        }
        for b in &self.binary {
            if b.lhs >= self.variables || b.left >= self.variables || b.right >= self.variables {
                return bad(format!("binary rule {b:?} out of range"));
            }
            if !(b.weight.is_finite() && b.weight > 0.0) {
                return bad(format!("binary rule {b:?} has a non-positive weight"));
            }
        }
        for t in &self.lexical {
            if t.lhs >= self.variables || t.terminal >= self.terminals {
                return bad(format!("terminal rule {t:?} out of range"));
            }
            if !(t.weight.is_finite() && t.weight > 0.0) {
                return bad(format!("terminal rule {t:?} has a non-positive weight"));
            }
        }
        if let Some(adv) = self.adversarial {
            if adv >= self.variables || adv == self.start {
                return bad("adversarial variable out of range".into());
            }
            if self.binary.iter().any(|b| b.left == adv || b.right == adv) {
                return bad("adversarial variable appears on a right-hand side".into());
            }
        }
        Ok(())
    }
}

/// Node of a retained derivation. Leaves carry their terminal.
#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub var: usize,
    pub start: usize,
    pub len: usize,
    pub kind: NodeKind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NodeKind {
    Leaf(u32),
    Branch(usize, usize),
    Pending,
}

/// Derivation tree; node 0 is the root.
#[derive(Clone, Debug, PartialEq)]
pub struct Derivation {
    pub nodes: Vec<Node>,
}

impl Derivation {
    pub fn yield_tokens(&self) -> Vec<u32> {
        let mut out = vec![0; self.nodes[0].len];
        for node in &self.nodes {
            if let NodeKind::Leaf(a) = node.kind {
                out[node.start - self.nodes[0].start] = a;
            }
        }
        out
    }

    /// Longest root-to-leaf path, counted in edges.
    pub fn height(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        let mut best = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            if let NodeKind::Branch(l, r) = node.kind {
                depth[l] = depth[i] + 1;
                depth[r] = depth[i] + 1;
            }
            best = best.max(depth[i]);
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CfgSample {
    pub tokens: Vec<u32>,
    pub positive: bool,
    /// Derivation from the start symbol, kept for positives.
    pub derivation: Option<Derivation>,
    /// `(start, len)` of the substituted span for negatives.
    pub substituted: Option<(usize, usize)>,
}

/// Exact-length sampler. Splits are drawn in proportion to their inside
/// probabilities, so a sampled tree is distributed as a derivation of the
/// grammar conditioned on its yield length.
#[derive(Clone, Debug)]
pub struct CfgSampler {
    spec: GrammarSpec,
    max_len: usize,
    bin_by_lhs: Vec<Vec<(usize, usize, f64)>>,
    lex_by_lhs: Vec<Vec<(u32, f64)>>,
    /// `inside[l][A]` scaled by `exp(-log_scale[l])`.
    inside: Vec<Vec<f64>>,
    log_scale: Vec<f64>,
}

impl CfgSampler {
    pub fn new(spec: &GrammarSpec, max_len: usize) -> Result<Self, TaskError> {
        spec.validate()?;
        let v = spec.variables;
        let mut bin_by_lhs = vec![Vec::new(); v];
        let mut lex_by_lhs = vec![Vec::new(); v];
        let mut totals = vec![0.0; v];
        for b in &spec.binary {
            totals[b.lhs] += b.weight;
        }
        for t in &spec.lexical {
            totals[t.lhs] += t.weight;
        }
        for b in &spec.binary {
            bin_by_lhs[b.lhs].push((b.left, b.right, b.weight / totals[b.lhs]));
        }
        for t in &spec.lexical {
            lex_by_lhs[t.lhs].push((t.terminal, t.weight / totals[t.lhs]));
        }
        let mut inside = vec![vec![0.0; v]; max_len + 1];
        let mut log_scale = vec![f64::NEG_INFINITY; max_len + 1];
        for l in 1..=max_len {
            let (raw, m) = if l == 1 {
                let raw: Vec<f64> = lex_by_lhs.iter().map(|rs| rs.iter().map(|r| r.1).sum()).collect();
                (raw, 0.0)
            } else {
                let m = (1..l)
                    .map(|k| log_scale[k] + log_scale[l - k])
                    .fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    continue;
                }
                let factors: Vec<f64> = (1..l).map(|k| (log_scale[k] + log_scale[l - k] - m).exp()).collect();
                let raw: Vec<f64> = bin_by_lhs
                    .iter()
                    .map(|rules| {
                        rules
                            .iter()
                            .map(|&(b, c, p)| {
                                p * (1..l)
                                    .map(|k| factors[k - 1] * inside[k][b] * inside[l - k][c])
                                    .sum::<f64>()
                            })
                            .sum()
                    })
                    .collect();
                (raw, m)
            };
            let s = raw.iter().cloned().fold(0.0, f64::max);
            if s > 0.0 {
                inside[l] = raw.into_iter().map(|x| x / s).collect();
                log_scale[l] = m + s.ln();
            }
        }
        Ok(Self {
            spec: spec.clone(),
            max_len,
            bin_by_lhs,
            lex_by_lhs,
            inside,
            log_scale,
        })
    }

    pub fn spec(&self) -> &GrammarSpec {
        &self.spec
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn can_derive(&self, var: usize, len: usize) -> bool {
        len >= 1 && len <= self.max_len && self.inside[len][var] > 0.0
    }

    /// Derivation of exact yield length `len` rooted at `var`.
    pub fn derive<R: Rng + ?Sized>(&self, var: usize, len: usize, rng: &mut R) -> Result<Derivation, TaskError> {
        if !self.can_derive(var, len) {
            return Err(TaskError::UnsatisfiableLength { t: len });
        }
        let mut nodes = vec![Node {
            var,
            start: 0,
            len,
            kind: NodeKind::Pending,
        }];
        let mut stack = vec![0usize];
        let mut weights = Vec::new();
        while let Some(id) = stack.pop() {
            let Node { var, start, len, .. } = nodes[id];
            if len == 1 {
                let rules = &self.lex_by_lhs[var];
                weights.clear();
                weights.extend(rules.iter().map(|r| r.1));
                let pick = choose(&weights, rng);
                nodes[id].kind = NodeKind::Leaf(rules[pick].0);
                continue;
            }
            let rules = &self.bin_by_lhs[var];
            weights.clear();
            let m = (1..len)
                .map(|k| self.log_scale[k] + self.log_scale[len - k])
                .fold(f64::NEG_INFINITY, f64::max);
            for &(b, c, p) in rules {
                for k in 1..len {
                    let f = (self.log_scale[k] + self.log_scale[len - k] - m).exp();
                    weights.push(p * f * self.inside[k][b] * self.inside[len - k][c]);
                }
            }
            let pick = choose(&weights, rng);
            let (b, c, _) = rules[pick / (len - 1)];
            let k = pick % (len - 1) + 1;
            let left = nodes.len();
            nodes.push(Node { var: b, start, len: k, kind: NodeKind::Pending });
            nodes.push(Node { var: c, start: start + k, len: len - k, kind: NodeKind::Pending });
            nodes[id].kind = NodeKind::Branch(left, left + 1);
            stack.push(left + 1);
            stack.push(left);
        }
        Ok(Derivation { nodes })
    }

    pub fn sample<R: Rng + ?Sized>(&self, t: usize, positive: bool, rng: &mut R) -> Result<CfgSample, TaskError> {
        if positive {
            let d = self.derive(self.spec.start, t, rng)?;
            return Ok(CfgSample {
                tokens: d.yield_tokens(),
                positive: true,
                derivation: Some(d),
                substituted: None,
            });
        }
        let adv = self.spec.adversarial.ok_or_else(|| {
            TaskError::InvalidParams("negatives need a grammar with an adversarial variable".into())
        })?;
        if !self.can_derive(self.spec.start, t) {
            return Err(TaskError::UnsatisfiableLength { t });
        }
        for _ in 0..NEGATIVE_ATTEMPTS {
            let d = self.derive(self.spec.start, t, rng)?;
            let scale = ((t as f64).ln() * rng.random::<f64>()).exp();
            let feasible: Vec<&Node> = d.nodes.iter().filter(|n| self.can_derive(adv, n.len)).collect();
            if feasible.is_empty() {
                break;
            }
            let dist = |n: &Node| ((n.len as f64).ln() - scale.ln()).abs();
            let best = feasible.iter().map(|n| dist(n)).fold(f64::INFINITY, f64::min);
            let ties: Vec<&&Node> = feasible.iter().filter(|n| dist(n) <= best + 1e-12).collect();
            let node = ties[rng.random_range(0..ties.len())];
            let sub = self.derive(adv, node.len, rng)?;
            let mut tokens = d.yield_tokens();
            tokens[node.start..node.start + node.len].copy_from_slice(&sub.yield_tokens());
            if !cyk_oracle(&self.spec, &tokens) {
                return Ok(CfgSample {
                    tokens,
                    positive: false,
                    derivation: None,
                    substituted: Some((node.start, node.len)),
                });
            }
        }
        Err(TaskError::UnsatisfiableLength { t })
    }
}

fn choose<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

pub fn gen_cfg<R: Rng + ?Sized>(spec: &GrammarSpec, t: usize, positive: bool, rng: &mut R) -> Result<CfgSample, TaskError> {
    if t == 0 {
        return Err(TaskError::TooShort { min: 1, got: 0 });
    }
    CfgSampler::new(spec, t)?.sample(t, positive, rng)
}

/// CYK membership test, `O(T^3 |R|)`, variable sets as bitmasks.
pub fn cyk_oracle(spec: &GrammarSpec, string: &[u32]) -> bool {
    let n = string.len();
    if n == 0 || spec.variables > MAX_VARIABLES {
        return false;
    }
    let mut lex = vec![0u64; spec.terminals as usize];
    for r in &spec.lexical {
        lex[r.terminal as usize] |= 1 << r.lhs;
    }
    let mut by_left: Vec<Vec<(usize, usize)>> = vec![Vec::new(); spec.variables];
    for r in &spec.binary {
        by_left[r.left].push((r.right, r.lhs));
    }
    // table[(len - 1) * n + start]
    let mut table = vec![0u64; n * n];
    for (i, &a) in string.iter().enumerate() {
        if a >= spec.terminals {
            return false;
        }
        table[i] = lex[a as usize];
    }
    for len in 2..=n {
        for start in 0..=n - len {
            let mut mask = 0u64;
            for k in 1..len {
                let left = table[(k - 1) * n + start];
                let right = table[(len - k - 1) * n + start + k];
                if left == 0 || right == 0 {
                    continue;
                }
                let mut bits = left;
                while bits != 0 {
                    let b = bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    for &(c, a) in &by_left[b] {
                        if right >> c & 1 == 1 {
                            mask |= 1 << a;
                        }
                    }
                }
            }
            table[(len - 1) * n + start] = mask;
        }
    }
    table[(n - 1) * n] >> spec.start & 1 == 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    /// All yields of length `1..=max_len` for each variable, by explicit
    /// enumeration of derivations.
    fn enumerate_language(spec: &GrammarSpec, max_len: usize) -> Vec<Vec<HashSet<Vec<u32>>>> {
        let mut lang = vec![vec![HashSet::new(); max_len + 1]; spec.variables];
        for r in &spec.lexical {
            lang[r.lhs][1].insert(vec![r.terminal]);
        }
        for len in 2..=max_len {
            for r in &spec.binary {
                let mut found = HashSet::new();
                for k in 1..len {
                    for a in &lang[r.left][k] {
                        for b in &lang[r.right][len - k] {
                            let mut s = a.clone();
                            s.extend(b);
                            found.insert(s);
                        }
                    }
                }
                lang[r.lhs][len].extend(found);
            }
        }
        lang
    }

    fn all_strings(alphabet: u32, len: usize) -> Vec<Vec<u32>> {
        let mut out = vec![vec![]];
        for _ in 0..len {
            out = out
                .into_iter()
                .flat_map(|s| {
                    (0..alphabet).map(move |a| {
                        let mut t = s.clone();
                        t.push(a);
                        t
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn default_grammar_is_critical_and_well_formed() {
        let g = build_grammar(7).unwrap();
        assert_eq!(g.variables, 20);
        assert_eq!(g.terminals, 16);
        assert!((g.spectral_radius - 1.0).abs() <= 1e-6);
        for a in 0..g.variables {
            assert!(g.binary.iter().any(|r| r.lhs == a));
            assert!(g.lexical.iter().any(|r| r.lhs == a));
        }
        let adv = g.adversarial.unwrap();
        assert!(g.binary.iter().all(|r| r.left != adv && r.right != adv));
    }

    #[test]
    fn power_iteration_matches_dense_eigenvalues() {
        for seed in 0..5 {
            let g = build_grammar(seed).unwrap();
            let m = transition_matrix(g.variables, &g.binary);
            let dense = nalgebra::DMatrix::from_fn(g.variables, g.variables, |i, j| m[i][j]);
            let rho = dense
                .complex_eigenvalues()
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max);
            assert!((rho - 1.0).abs() < 1e-6, "seed {seed}: {rho}");
        }
    }

    #[test]
    fn empty_string_is_rejected() {
        let g = build_grammar(1).unwrap();
        assert!(!cyk_oracle(&g, &[]));
    }

    #[test]
    fn small_grammar_matches_exhaustive_enumeration_to_length_eight() {
        let cfg = GrammarConfig {
            variables: 4,
            terminals: 2,
            binary_per_variable: 2,
            max_terminal_per_variable: 1,
        };
        for seed in 0..4 {
            let g = build_grammar_with(&cfg, seed).unwrap();
            let lang = enumerate_language(&g, 8);
            for len in 1..=8 {
                for s in all_strings(2, len) {
                    assert_eq!(cyk_oracle(&g, &s), lang[g.start][len].contains(&s), "{s:?}");
                }
            }
        }
    }

    #[test]
    fn default_grammar_matches_enumeration_on_short_strings() {
        let g = build_grammar(3).unwrap();
        let lang = enumerate_language(&g, 4);
        let mut r = rng::stream(9, &[]);
        for _ in 0..3000 {
            let len = r.random_range(1..=4);
            let s: Vec<u32> = (0..len).map(|_| r.random_range(0..16)).collect();
            assert_eq!(cyk_oracle(&g, &s), lang[g.start][len].contains(&s));
        }
        for s in lang[g.start][3].iter().take(50) {
            assert!(cyk_oracle(&g, s));
        }
    }

    #[test]
    fn inside_probabilities_match_enumerated_counts() {
        // Rescaled table against the plain recursion, which is safe at this length.
        let g = build_grammar(11).unwrap();
        let s = CfgSampler::new(&g, 12).unwrap();
        let mut plain = vec![vec![0.0; g.variables]; 13];
        for a in 0..g.variables {
            plain[1][a] = s.lex_by_lhs[a].iter().map(|r| r.1).sum();
        }
        for l in 2..=12 {
            for a in 0..g.variables {
                plain[l][a] = s.bin_by_lhs[a]
                    .iter()
                    .map(|&(b, c, p)| p * (1..l).map(|k| plain[k][b] * plain[l - k][c]).sum::<f64>())
                    .sum();
            }
        }
        for l in 1..=12 {
            for a in 0..g.variables {
                let scaled = s.inside[l][a] * s.log_scale[l].exp();
                approx::assert_relative_eq!(scaled, plain[l][a], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn positives_parse_and_negatives_do_not() {
        let g = build_grammar(2).unwrap();
        let sampler = CfgSampler::new(&g, 40).unwrap();
        let mut r = rng::stream(4, &[]);
        for i in 0..300 {
            let t = 1 + i % 40;
            let pos = sampler.sample(t, true, &mut r).unwrap();
            assert_eq!(pos.tokens.len(), t);
            assert!(cyk_oracle(&g, &pos.tokens));
            let neg = sampler.sample(t.max(2), false, &mut r).unwrap();
            assert_eq!(neg.tokens.len(), t.max(2));
            assert!(!cyk_oracle(&g, &neg.tokens));
        }
    }

    #[test]
    fn length_one_needs_a_terminal_rule_on_the_start_symbol() {
        let mut g = build_grammar(5).unwrap();
        g.lexical.retain(|r| r.lhs != g.start);
        let mut r = rng::stream(0, &[]);
        assert_eq!(
            gen_cfg(&g, 1, true, &mut r).unwrap_err(),
            TaskError::UnsatisfiableLength { t: 1 }
        );
        assert!(gen_cfg(&g, 6, true, &mut r).is_ok());
    }

    #[test]
    fn derivation_depth_grows_like_square_root() {
        let g = build_grammar(0).unwrap();
        let sampler = CfgSampler::new(&g, 256).unwrap();
        let mut r = rng::stream(8, &[]);
        let mut mean = |t: usize| {
            (0..1000)
                .map(|_| sampler.derive(g.start, t, &mut r).unwrap().height() as f64)
                .sum::<f64>()
                / 1000.0
        };
        let (h64, h256) = (mean(64), mean(256));
        let slope = (h256 / h64).ln() / 4f64.ln();
        assert!((slope - 0.5).abs() <= 0.15, "slope {slope}");
    }
}
