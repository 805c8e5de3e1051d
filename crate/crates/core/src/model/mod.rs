//! Post-norm encoder-decoder Transformer with an optional encoder-only
//! classification head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, StreamId, Tensor};

pub mod checkpoint;
mod forward;

pub use forward::{ForwardTrace, Probe, TrainRngs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Longest padded sequence (bos and eos included).
    pub max_len: usize,
    /// Dropout on every sublayer output before the residual add.
    pub residual_dropout: f64,
    pub share_embeddings: bool,
    pub ln_eps: f64,
    /// Classes of the encoder-only head; 0 disables it.
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 32,
            d_ff: 64,
            heads: 4,
            src_vocab: 64,
            tgt_vocab: 64,
            max_len: 64,
            residual_dropout: 0.1,
            share_embeddings: true,
            ln_eps: 1e-5,
            num_classes: 0,
        }
    }
}

impl ModelConfig {
    /// The reference IWSLT-sized configuration (6 + 6 blocks, 512/1024, 4 heads).
    pub fn iwslt(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            enc_layers: 6,
            dec_layers: 6,
            d_model: 512,
            d_ff: 1024,
            heads: 4,
            src_vocab,
            tgt_vocab,
            max_len: 256,
            residual_dropout: 0.3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.share_embeddings && self.src_vocab != self.tgt_vocab {
            return Err(Error::Config(
                "shared embeddings need equal source and target vocab sizes".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.residual_dropout) {
            return Err(Error::Config(format!(
                "residual dropout {} outside [0, 1)",
                self.residual_dropout
            )));
        }
        if self.ln_eps < 0.0 {
            return Err(Error::Config("ln_eps must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LnIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncLayerIdx {
    pub attn: AttnIdx,
    pub ln1: LnIdx,
    pub ffn: FfnIdx,
    pub ln2: LnIdx,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecLayerIdx {
    pub self_attn: AttnIdx,
    pub ln1: LnIdx,
    pub cross: AttnIdx,
    pub ln2: LnIdx,
    pub ffn: FfnIdx,
    pub ln3: LnIdx,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub src_embed: usize,
    pub tgt_embed: usize,
    pub enc: Vec<EncLayerIdx>,
    pub dec: Vec<DecLayerIdx>,
    pub out_w: usize,
    pub out_b: usize,
    pub cls: Option<(usize, usize)>,
}

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug)]
enum Init {
    Embedding,
    Xavier,
    Zeros,
    Ones,
}

struct LayoutBuilder<'a> {
    specs: Vec<(String, Vec<usize>, Init)>,
    cfg: &'a ModelConfig,
}

impl LayoutBuilder<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn attn(&mut self, prefix: &str) -> AttnIdx {
        let d = self.cfg.d_model;
        let mut pair = |n: &str| {
            let w = self.push(format!("{prefix}.w{n}"), vec![d, d], Init::Xavier);
            let b = self.push(format!("{prefix}.b{n}"), vec![1, d], Init::Zeros);
            (w, b)
        };
        let (wq, bq) = pair("q");
        let (wk, bk) = pair("k");
        let (wv, bv) = pair("v");
        let (wo, bo) = pair("o");
        AttnIdx {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ffn(&mut self, prefix: &str) -> FfnIdx {
        let (d, f) = (self.cfg.d_model, self.cfg.d_ff);
        FfnIdx {
            w1: self.push(format!("{prefix}.w1"), vec![d, f], Init::Xavier),
            b1: self.push(format!("{prefix}.b1"), vec![1, f], Init::Zeros),
            w2: self.push(format!("{prefix}.w2"), vec![f, d], Init::Xavier),
            b2: self.push(format!("{prefix}.b2"), vec![1, d], Init::Zeros),
        }
    }

    fn ln(&mut self, prefix: &str) -> LnIdx {
        let d = self.cfg.d_model;
        LnIdx {
            gain: self.push(format!("{prefix}.gain"), vec![1, d], Init::Ones),
            bias: self.push(format!("{prefix}.bias"), vec![1, d], Init::Zeros),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let mut b = LayoutBuilder { specs: Vec::new(), cfg };
    let d = cfg.d_model;
    let (src_embed, tgt_embed) = if cfg.share_embeddings {
        let e = b.push("embed".into(), vec![cfg.src_vocab, d], Init::Embedding);
        (e, e)
    } else {
        (
            b.push("src_embed".into(), vec![cfg.src_vocab, d], Init::Embedding),
            b.push("tgt_embed".into(), vec![cfg.tgt_vocab, d], Init::Embedding),
        )
    };
    let enc = (0..cfg.enc_layers)
        .map(|i| EncLayerIdx {
            attn: b.attn(&format!("enc.{i}.self")),
            ln1: b.ln(&format!("enc.{i}.ln1")),
            ffn: b.ffn(&format!("enc.{i}.ffn")),
            ln2: b.ln(&format!("enc.{i}.ln2")),
        })
        .collect();
    let dec = (0..cfg.dec_layers)
        .map(|i| DecLayerIdx {
            self_attn: b.attn(&format!("dec.{i}.self")),
            ln1: b.ln(&format!("dec.{i}.ln1")),
            cross: b.attn(&format!("dec.{i}.cross")),
            ln2: b.ln(&format!("dec.{i}.ln2")),
            ffn: b.ffn(&format!("dec.{i}.ffn")),
            ln3: b.ln(&format!("dec.{i}.ln3")),
        })
        .collect();
    let out_w = b.push("out.w".into(), vec![d, cfg.tgt_vocab], Init::Xavier);
    let out_b = b.push("out.b".into(), vec![1, cfg.tgt_vocab], Init::Zeros);
    let cls = (cfg.num_classes > 0).then(|| {
        (
            b.push("cls.w".into(), vec![d, cfg.num_classes], Init::Xavier),
            b.push("cls.b".into(), vec![1, cfg.num_classes], Init::Zeros),
        )
    });
    (
        Layout {
            src_embed,
            tgt_embed,
            enc,
            dec,
            out_w,
            out_b,
            cls,
        },
        b.specs,
    )
}

/// Named weights in a fixed order determined by the config.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl TransformerParams {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// `self += s * dir` for every tensor.
    pub fn axpy(&mut self, s: f64, dir: &[Tensor]) -> Result<()> {
        if dir.len() != self.tensors.len() {
            return Err(Error::shape(
                "params.axpy",
                format!("{} vs {}", dir.len(), self.tensors.len()),
            ));
        }
        for (t, d) in self.tensors.iter_mut().zip(dir) {
            t.axpy(s, d)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub params: TransformerParams,
    layout: Layout,
    positions: Tensor,
}

impl Model {
    /// Fresh weights from the `Weights` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut rng = RngStream::new(seed, StreamId::Weights);
        let d = config.d_model;
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Embedding => {
                    let std = (d as f64).powf(-0.5);
                    (0..n).map(|_| std * rng.normal()).collect()
                }
                Init::Xavier => {
                    let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| std * rng.normal()).collect()
                }
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        let positions = sinusoidal_positions(config.max_len, d);
        Ok(Self {
            config,
            params: TransformerParams { names, tensors },
            layout,
            positions,
        })
    }

    /// Wraps existing weights; names and shapes must match the config layout.
    pub fn from_params(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if named.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let slot = model
                .params
                .get_mut(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same weights with a different residual-path dropout rate.
    pub fn with_residual_dropout(mut self, rate: f64) -> Result<Self> {
        self.config.residual_dropout = rate;
        self.config.validate()?;
        Ok(self)
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn positions(&self) -> &Tensor {
        &self.positions
    }

    /// Every activation that can be injected, in forward order.
    pub fn slot_names(&self) -> Vec<String> {
        let mut out = vec!["src.embed".to_string()];
        for i in 0..self.config.enc_layers {
            for s in ["self_sum", "ffn_act", "ffn_sum", "out"] {
                out.push(format!("enc.{i}.{s}"));
            }
        }
        if self.config.num_classes > 0 {
            out.push("cls.features".into());
        }
        out.push("tgt.embed".into());
        for i in 0..self.config.dec_layers {
            for s in ["self_sum", "cross_sum", "ffn_act", "ffn_sum", "out"] {
                out.push(format!("dec.{i}.{s}"));
            }
        }
        out.push("dec.final".into());
        out
    }
}

/// Fixed sine/cosine position table, `[max_len, d]`.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![max_len, d], data).expect("position table shape")
}
