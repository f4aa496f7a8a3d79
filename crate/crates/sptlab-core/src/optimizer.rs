//! AdamW with named parameter groups, block freezing, and hybrid
//! checkpoint initialization.
//!
//! Parameter subsets are addressed by selector expressions over the
//! canonical block names: the atoms `attention`, `qk`, `mlp`, `norm`,
//! `encoder`, `heads`, `all`, `none` (or any literal block name), combined
//! left-to-right with `+` (union) and `\` (difference), with parentheses.
//! Example: the protocol that trains only encoder, norms, and heads freezes
//! `all \ (encoder + norm + heads)`.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{block_registry, BlockSpec, Gradients, ModelParams};
use crate::model::ModelConfig;
use crate::numeric::Matrix;

/// A resolved, sorted set of canonical block names.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamSelection {
    names: BTreeSet<String>,
}

impl ParamSelection {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }
}

fn atom_members(atom: &str, registry: &[BlockSpec]) -> Option<BTreeSet<String>> {
    let by_pred = |pred: &dyn Fn(&str) -> bool| -> BTreeSet<String> {
        registry
            .iter()
            .filter(|b| b.trainable && pred(&b.name))
            .map(|b| b.name.clone())
            .collect()
    };
    let is_layer_proj = |name: &str, suffixes: &[&str]| {
        name.starts_with("layer") && suffixes.iter().any(|s| name.ends_with(s))
    };
    match atom {
        "attention" => Some(by_pred(&|n| is_layer_proj(n, &[".WQ", ".WK", ".WV", ".WO"]))),
        "qk" => Some(by_pred(&|n| is_layer_proj(n, &[".WQ", ".WK"]))),
        "mlp" => Some(by_pred(&|n| n.starts_with("layer") && n.contains(".mlp."))),
        "norm" => Some(by_pred(&|n| {
            n.starts_with("final_norm.") || (n.starts_with("layer") && n.contains(".ln"))
        })),
        "encoder" => Some(by_pred(&|n| n.starts_with("encoder."))),
        "heads" => Some(by_pred(&|n| n.starts_with("head."))),
        "all" => Some(by_pred(&|_| true)),
        "none" => Some(BTreeSet::new()),
        name if registry.iter().any(|b| b.name == name) => {
            Some(std::iter::once(name.to_string()).collect())
        }
        _ => None,
    }
}

/// Resolve a selector expression against a config's block registry.
pub fn select_params(expr: &str, registry: &[BlockSpec]) -> Result<ParamSelection> {
    let tokens = tokenize(expr)?;
    let mut pos = 0;
    let set = parse_expr(&tokens, &mut pos, registry)?;
    if pos != tokens.len() {
        return Err(Error::InvalidArgument(format!(
            "trailing input in selector expression at '{}'",
            tokens[pos]
        )));
    }
    Ok(ParamSelection { names: set })
}

/// Convenience: resolve a selector for a config.
pub fn select_for_config(expr: &str, cfg: &ModelConfig) -> Result<ParamSelection> {
    select_params(expr, &block_registry(cfg)?)
}

fn tokenize(expr: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for c in expr.chars() {
        match c {
            '+' | '\\' | '(' | ')' => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                tokens.push(c.to_string());
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty selector expression".into()));
    }
    Ok(tokens)
}

fn parse_expr(
    tokens: &[String],
    pos: &mut usize,
    registry: &[BlockSpec],
) -> Result<BTreeSet<String>> {
    let mut acc = parse_term(tokens, pos, registry)?;
    while *pos < tokens.len() {
        match tokens[*pos].as_str() {
            "+" => {
                *pos += 1;
                let rhs = parse_term(tokens, pos, registry)?;
                acc.extend(rhs);
            }
            "\\" => {
                *pos += 1;
                let rhs = parse_term(tokens, pos, registry)?;
                acc.retain(|n| !rhs.contains(n));
            }
            ")" => break,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "expected '+' or '\\' in selector expression, found '{}'",
                    other
                )))
            }
        }
    }
    Ok(acc)
}

fn parse_term(
    tokens: &[String],
    pos: &mut usize,
    registry: &[BlockSpec],
) -> Result<BTreeSet<String>> {
    let tok = tokens.get(*pos).ok_or_else(|| {
        Error::InvalidArgument("selector expression ends unexpectedly".into())
    })?;
    if tok == "(" {
        *pos += 1;
        let inner = parse_expr(tokens, pos, registry)?;
        if tokens.get(*pos).map(String::as_str) != Some(")") {
            return Err(Error::InvalidArgument(
                "unclosed parenthesis in selector expression".into(),
            ));
        }
        *pos += 1;
        return Ok(inner);
    }
    let members = atom_members(tok, registry).ok_or_else(|| {
        Error::InvalidArgument(format!("unknown selector or block '{}'", tok))
    })?;
    *pos += 1;
    Ok(members)
}

/// AdamW hyperparameters. Defaults: β₁=0.9, β₂=0.999, ε=1e-8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamWHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates per block, plus the shared step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
    pub step: u64,
}

impl AdamWState {
    /// Zero-moment state covering every trainable block of the config.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for spec in block_registry(cfg)?.iter().filter(|b| b.trainable) {
            m.insert(spec.name.clone(), Matrix::zeros(spec.rows, spec.cols));
            v.insert(spec.name.clone(), Matrix::zeros(spec.rows, spec.cols));
        }
        Ok(AdamWState { m, v, step: 0 })
    }
}

/// One decoupled-weight-decay Adam step over all trainable, unfrozen blocks:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`, bias-corrected `m̂`, `v̂`, then
/// `θ ← θ − lr·(m̂/(√v̂+ε) + λθ)`. Frozen blocks are untouched, including
/// their moments. A non-finite gradient aborts before any mutation.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamWState,
    hp: &AdamWHyper,
    frozen: &ParamSelection,
) -> Result<()> {
    let active: Vec<String> = state
        .m
        .keys()
        .filter(|n| !frozen.contains(n))
        .cloned()
        .collect();
    for name in &active {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing gradient for '{}'", name)))?;
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient for block '{}'",
                name
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for name in &active {
        let g = &grads[name.as_str()];
        let m = state.m.get_mut(name).unwrap();
        let v = state.v.get_mut(name).unwrap();
        let theta = params.get_mut(name)?;
        for ((th, gi), (mi, vi)) in theta
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
            *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *th -= hp.lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * *th);
        }
    }
    Ok(())
}

/// Build finetune-start parameters: blocks in `selection` are copied
/// bit-exact from the checkpointed parameters, everything else is drawn
/// fresh from the uniform initializer for `seed`.
pub fn hybrid_init(
    cfg: &ModelConfig,
    ckpt_params: &ModelParams,
    seed: u64,
    selection: &ParamSelection,
) -> Result<ModelParams> {
    let mut fresh = ModelParams::init(cfg, seed)?;
    for name in selection.names() {
        let src = ckpt_params.get(name).map_err(|_| {
            Error::Config(format!(
                "checkpoint lacks block '{}' required by the init selection",
                name
            ))
        })?;
        let dst = fresh.get_mut(name)?;
        if src.shape() != dst.shape() {
            return Err(Error::Config(format!(
                "checkpoint block '{}' has shape {:?}, config wants {:?}",
                name,
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src.clone();
    }
    Ok(fresh)
}
