//! Fixed embeddings of task instances as `T x d` matrices.
//!
//! Sequence rows are a seeded unit-norm codebook vector per token id, mixed
//! with a positional code, in the first `d - 1` channels; the last channel
//! flags special tokens. Graph rows are node coordinates followed by source
//! and target indicator channels.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::graph::GeoGraph;
use super::{ModelInput, TaskError, TaskInstance};
use crate::linalg::Matrix;
use crate::rng;

pub const MIN_SEQUENCE_DIM: usize = 4;
const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    #[default]
    Rotary,
    Sinusoidal,
    /// No position information beyond the special-token channel.
    SpecialOnly,
}

/// Unit-norm Gaussian direction for token `id`.
pub fn codebook_row(id: u32, width: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, &[rng::domain::CODEBOOK, u64::from(id)]);
    loop {
        let v: Vec<f64> = (0..width).map(|_| StandardNormal.sample(&mut r)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn frequency(i: usize, width: usize) -> f64 {
    ROPE_BASE.powf(-2.0 * i as f64 / width as f64)
}

pub fn embed_tokens(tokens: &[u32], special: &[bool], d: usize, pe: PeMode, seed: u64) -> Result<Matrix, TaskError> {
    if d < MIN_SEQUENCE_DIM {
        return Err(TaskError::CapacityExceeded { needed: MIN_SEQUENCE_DIM, got: d });
    }
    if special.len() != tokens.len() {
        return Err(TaskError::InvalidParams("special flags do not match the tokens".into()));
    }
    let w = d - 1;
    let scale = (w as f64).sqrt();
    let mut out = Matrix::zeros(tokens.len(), d);
    for (pos, (&tok, &flag)) in tokens.iter().zip(special).enumerate() {
        let mut v = codebook_row(tok, w, seed);
        let p = pos as f64;
        match pe {
            PeMode::Rotary => {
                for i in 0..w / 2 {
                    let (s, c) = (p * frequency(i, w)).sin_cos();
                    let (a, b) = (v[2 * i], v[2 * i + 1]);
                    v[2 * i] = c * a - s * b;
                    v[2 * i + 1] = s * a + c * b;
                }
            }
            PeMode::Sinusoidal => {
                let mut code: Vec<f64> = (0..w)
                    .map(|j| {
                        let angle = p * frequency(j / 2, w);
                        if j % 2 == 0 { angle.sin() } else { angle.cos() }
                    })
                    .collect();
                let n = code.iter().map(|x| x * x).sum::<f64>().sqrt();
                for (x, c) in v.iter_mut().zip(&mut code) {
                    *x += *c / n;
                }
                let m = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if m > 0.0 {
                    v.iter_mut().for_each(|x| *x /= m);
                } else {
                    v = code.iter().map(|c| c / n).collect();
                }
            }
            PeMode::SpecialOnly => {}
        }
        for (j, x) in v.iter().enumerate() {
            out[(pos, j)] = scale * x;
        }
        out[(pos, w)] = if flag { 1.0 } else { 0.0 };
    }
    Ok(out)
}

pub fn graph_min_dim(g: &GeoGraph) -> usize {
    g.dim() + 2
}

pub fn embed_graph(g: &GeoGraph, d: usize) -> Result<Matrix, TaskError> {
    let need = graph_min_dim(g);
    if d < need {
        return Err(TaskError::CapacityExceeded { needed: need, got: d });
    }
    let dim = g.dim();
    let mut out = Matrix::zeros(g.len(), d);
    for (a, x) in g.points.iter().enumerate() {
        for (j, &c) in x.iter().enumerate() {
            out[(a, j)] = c;
        }
    }
    out[(g.source(), dim)] = 1.0;
    out[(g.target(), dim + 1)] = 1.0;
    Ok(out)
}

/// Embeds the model-visible part of `inst`.
pub fn embed_instance(inst: &TaskInstance, d: usize, pe: PeMode, codebook_seed: u64) -> Result<Matrix, TaskError> {
    match inst.model_input() {
        ModelInput::Tokens { tokens, special } => embed_tokens(&tokens, &special, d, pe, codebook_seed),
        ModelInput::Graph(g) => embed_graph(g, d),
    }
}
