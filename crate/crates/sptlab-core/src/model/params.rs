//! Named parameter blocks, their canonical registry, and initialization.
//!
//! Every parameter lives in a flat map from a canonical block name to a
//! matrix. Names are the addressing scheme for freezing, hybrid
//! initialization, displacement reports, and checkpoints, so their format is
//! stable: `encoder.E`, `encoder.mask_embed`, `layer{N}.WQ|WK|WV|WO`,
//! `layer{N}.ln1.scale|offset`, `layer{N}.ln2.scale|offset`,
//! `layer{N}.mlp.W1|b1|W2|b2`, `final_norm.scale|offset`, `head.cls.W|b`,
//! `head.spt.W|b`, and the non-trainable `pe.alibi_slopes`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::{InputKind, ModelConfig};
use crate::numeric::{streams, Matrix, SeededRng};

/// How a block is filled at random initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockInit {
    /// `U(−1/√fan_in, +1/√fan_in)` elementwise.
    Uniform { fan_in: usize },
    Zero,
    One,
    /// The fixed ALiBi slope schedule; never trained.
    AlibiSlopes,
}

/// One entry of the parameter registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: BlockInit,
    pub trainable: bool,
}

/// Canonical block list for a config, sorted by name. The sorted order is
/// the contract for checkpoint payload layout and per-block init streams.
pub fn block_registry(cfg: &ModelConfig) -> Result<Vec<BlockSpec>> {
    cfg.validate()?;
    let d = cfg.width;
    let mut blocks: Vec<BlockSpec> = Vec::new();
    let mut push = |name: String, rows: usize, cols: usize, init: BlockInit, trainable: bool| {
        blocks.push(BlockSpec {
            name,
            rows,
            cols,
            init,
            trainable,
        });
    };

    match cfg.input_kind {
        InputKind::Continuous { dim } => push(
            "encoder.E".into(),
            d,
            dim,
            BlockInit::Uniform { fan_in: dim },
            true,
        ),
        InputKind::Token { vocab } => push(
            "encoder.E".into(),
            vocab,
            d,
            BlockInit::Uniform { fan_in: vocab },
            true,
        ),
    }
    // Added to encoded rows, so scale it like a width-d projection output.
    push(
        "encoder.mask_embed".into(),
        1,
        d,
        BlockInit::Uniform { fan_in: d },
        true,
    );

    for layer in 0..cfg.depth {
        let p = format!("layer{}", layer);
        for w in ["WQ", "WK", "WV", "WO"] {
            push(
                format!("{}.{}", p, w),
                d,
                d,
                BlockInit::Uniform { fan_in: d },
                true,
            );
        }
        if !cfg.toy_mode {
            push(format!("{}.ln1.scale", p), 1, d, BlockInit::One, true);
            push(format!("{}.ln1.offset", p), 1, d, BlockInit::Zero, true);
            push(format!("{}.ln2.scale", p), 1, d, BlockInit::One, true);
            push(format!("{}.ln2.offset", p), 1, d, BlockInit::Zero, true);
            let f = cfg.mlp_hidden;
            push(
                format!("{}.mlp.W1", p),
                f,
                d,
                BlockInit::Uniform { fan_in: d },
                true,
            );
            push(format!("{}.mlp.b1", p), 1, f, BlockInit::Zero, true);
            push(
                format!("{}.mlp.W2", p),
                d,
                f,
                BlockInit::Uniform { fan_in: f },
                true,
            );
            push(format!("{}.mlp.b2", p), 1, d, BlockInit::Zero, true);
        }
    }

    if !cfg.toy_mode {
        push("final_norm.scale".into(), 1, d, BlockInit::One, true);
        push("final_norm.offset".into(), 1, d, BlockInit::Zero, true);
    }

    let k = cfg.num_classes;
    push(
        "head.cls.W".into(),
        k,
        d,
        BlockInit::Uniform { fan_in: d },
        true,
    );
    let r = cfg.input_kind.recon_dim();
    push(
        "head.spt.W".into(),
        r,
        d,
        BlockInit::Uniform { fan_in: d },
        true,
    );
    if !cfg.toy_mode {
        push("head.cls.b".into(), 1, k, BlockInit::Zero, true);
        push("head.spt.b".into(), 1, r, BlockInit::Zero, true);
    }

    if cfg.pe_variant.has_alibi() {
        push(
            "pe.alibi_slopes".into(),
            1,
            cfg.heads,
            BlockInit::AlibiSlopes,
            false,
        );
    }

    blocks.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(blocks)
}

/// All parameters of one model, keyed by canonical block name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    blocks: BTreeMap<String, Matrix>,
}

impl ModelParams {
    /// Fresh random initialization. Each block draws from its own RNG stream
    /// keyed by the block's rank in the sorted registry, so adding or
    /// removing unrelated blocks (e.g. switching PE variant) does not
    /// reshuffle the values of the others within one config family.
    pub fn init(cfg: &ModelConfig, master_seed: u64) -> Result<Self> {
        let registry = block_registry(cfg)?;
        let mut blocks = BTreeMap::new();
        for (rank, spec) in registry.iter().enumerate() {
            let mut rng = SeededRng::from_stream(master_seed, streams::param_init(rank as u64));
            let m = match spec.init {
                BlockInit::Uniform { fan_in } => {
                    let a = 1.0 / (fan_in as f64).sqrt();
                    let mut m = Matrix::zeros(spec.rows, spec.cols);
                    for v in m.data_mut() {
                        *v = rng.uniform(-a, a);
                    }
                    m
                }
                BlockInit::Zero => Matrix::zeros(spec.rows, spec.cols),
                BlockInit::One => {
                    Matrix::from_vec(spec.rows, spec.cols, vec![1.0; spec.rows * spec.cols])?
                }
                BlockInit::AlibiSlopes => alibi_slopes(spec.cols),
            };
            blocks.insert(spec.name.clone(), m);
        }
        Ok(ModelParams { blocks })
    }

    /// Build from an existing name→matrix map, verifying it matches the
    /// config's registry exactly (names and shapes).
    pub fn from_blocks(cfg: &ModelConfig, blocks: BTreeMap<String, Matrix>) -> Result<Self> {
        let registry = block_registry(cfg)?;
        if blocks.len() != registry.len() {
            return Err(Error::Config(format!(
                "expected {} parameter blocks, got {}",
                registry.len(),
                blocks.len()
            )));
        }
        for spec in &registry {
            match blocks.get(&spec.name) {
                None => {
                    return Err(Error::Config(format!("missing block '{}'", spec.name)));
                }
                Some(m) if m.shape() != (spec.rows, spec.cols) => {
                    return Err(Error::Config(format!(
                        "block '{}' has shape {:?}, expected ({}, {})",
                        spec.name,
                        m.shape(),
                        spec.rows,
                        spec.cols
                    )));
                }
                _ => {}
            }
        }
        Ok(ModelParams { blocks })
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.blocks
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter block '{}'", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.blocks
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter block '{}'", name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.blocks.contains_key(name)
    }

    /// Block names in canonical (sorted) order.
    pub fn names(&self) -> Vec<&str> {
        self.blocks.keys().map(|s| s.as_str()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.blocks.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.blocks.iter_mut()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.blocks.values().map(|m| m.numel()).sum()
    }

    /// A same-shaped map of zero matrices (gradient accumulator).
    pub fn zeros_like(&self) -> BTreeMap<String, Matrix> {
        self.blocks
            .iter()
            .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols())))
            .collect()
    }
}

/// ALiBi slope schedule: `m = 1` for a single head, otherwise
/// `m_h = 2^(−8h/H)` for heads `h = 1..H`.
pub fn alibi_slopes(heads: usize) -> Matrix {
    if heads == 1 {
        return Matrix::from_vec(1, 1, vec![1.0]).unwrap();
    }
    Matrix::from_fn(1, heads, |_, h| {
        (2.0f64).powf(-8.0 * (h as f64 + 1.0) / heads as f64)
    })
}

/// Gradient container: same keys as the parameter map.
pub type Gradients = BTreeMap<String, Matrix>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::PeVariant;

    #[test]
    fn toy_registry_names() {
        let cfg = ModelConfig::toy(32);
        let names: Vec<String> = block_registry(&cfg)
            .unwrap()
            .into_iter()
            .map(|b| b.name)
            .collect();
        assert_eq!(
            names,
            vec![
                "encoder.E",
                "encoder.mask_embed",
                "head.cls.W",
                "head.spt.W",
                "layer0.WK",
                "layer0.WO",
                "layer0.WQ",
                "layer0.WV",
            ]
        );
    }

    #[test]
    fn full_model_registry_has_norms_biases_and_mlp() {
        let cfg = ModelConfig {
            depth: 2,
            width: 8,
            heads: 2,
            mlp_hidden: 16,
            num_classes: 3,
            pe_variant: PeVariant::AbsAlibi,
            dropout_rate: 0.1,
            toy_mode: false,
            input_kind: InputKind::Continuous { dim: 2 },
            mask_scheme: Default::default(),
        };
        let reg = block_registry(&cfg).unwrap();
        let names: Vec<&str> = reg.iter().map(|b| b.name.as_str()).collect();
        for expected in [
            "layer0.ln1.scale",
            "layer1.mlp.W2",
            "final_norm.offset",
            "head.cls.b",
            "pe.alibi_slopes",
        ] {
            assert!(names.contains(&expected), "missing {}", expected);
        }
        let slopes = reg.iter().find(|b| b.name == "pe.alibi_slopes").unwrap();
        assert!(!slopes.trainable);
        // Sorted order is the canonical order.
        let mut sorted = names.clone();
        sorted.sort_unstable();
        assert_eq!(names, sorted);
    }

    #[test]
    fn init_is_deterministic_and_in_range() {
        let cfg = ModelConfig::toy(32);
        let a = ModelParams::init(&cfg, 7).unwrap();
        let b = ModelParams::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&cfg, 8).unwrap();
        assert_ne!(a, c);

        let wq = a.get("layer0.WQ").unwrap();
        let bound = 1.0 / 32.0f64.sqrt();
        assert!(wq.data().iter().all(|v| v.abs() <= bound));
        // Encoder fan-in is the input dim (2).
        let e = a.get("encoder.E").unwrap();
        assert_eq!(e.shape(), (32, 2));
        assert!(e.data().iter().all(|v| v.abs() <= 1.0 / 2.0f64.sqrt()));
    }

    #[test]
    fn alibi_slope_schedule() {
        let single = alibi_slopes(1);
        assert_eq!(single.at(0, 0), 1.0);
        let four = alibi_slopes(4);
        let expect = [
            (2.0f64).powf(-2.0),
            (2.0f64).powf(-4.0),
            (2.0f64).powf(-6.0),
            (2.0f64).powf(-8.0),
        ];
        for (h, &e) in expect.iter().enumerate() {
            assert!((four.at(0, h) - e).abs() < 1e-15);
        }
    }

    #[test]
    fn from_blocks_validates_names_and_shapes() {
        let cfg = ModelConfig::toy(32);
        let good = ModelParams::init(&cfg, 1).unwrap();
        let mut map = good.blocks.clone();
        ModelParams::from_blocks(&cfg, map.clone()).unwrap();
        map.remove("layer0.WQ");
        assert!(ModelParams::from_blocks(&cfg, map.clone()).is_err());
        map.insert("layer0.WQ".into(), Matrix::zeros(3, 3));
        assert!(ModelParams::from_blocks(&cfg, map).is_err());
    }
}
