//! Post-norm Transformer encoder–decoder with one embedding table shared by
//! the encoder input, the decoder input, and (by default) the output softmax.

mod forward;
mod incremental;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use forward::{forward, score_sequence, Batch, ForwardMode, ForwardOutput};
pub use incremental::{DecoderState, SourceMemory};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub max_positions: usize,
    #[serde(default = "default_tie")]
    pub tie_softmax: bool,
}

fn default_tie() -> bool {
    true
}

impl TransformerConfig {
    /// CPU-friendly defaults: 64-dim model, 2 layers, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            dropout: 0.1,
            label_smoothing: 0.1,
            max_positions: 64,
            tie_softmax: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} is too small", self.vocab_size));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return fail(format!("d_model {} must be even", self.d_model));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("dropout and label_smoothing must lie in [0, 1)".into());
        }
        if self.max_positions == 0 || self.d_ff == 0 {
            return fail("max_positions and d_ff must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub(crate) struct AttnIds {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct NormIds {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct FfnIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderLayerIds {
    pub attn: AttnIds,
    pub ln_attn: NormIds,
    pub ffn: FfnIds,
    pub ln_ffn: NormIds,
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderLayerIds {
    pub self_attn: AttnIds,
    pub ln_self: NormIds,
    pub cross_attn: AttnIds,
    pub ln_cross: NormIds,
    pub ffn: FfnIds,
    pub ln_ffn: NormIds,
}

/// Indices into the flat parameter list.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embedding: usize,
    pub encoder: Vec<EncoderLayerIds>,
    pub decoder: Vec<DecoderLayerIds>,
    pub output: Option<usize>,
}

struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        let mut w = |n: &str| self.add(format!("{prefix}.{n}"), vec![d, d], Init::Xavier);
        AttnIds {
            q: w("q"),
            k: w("k"),
            v: w("v"),
            o: w("o"),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, ff: usize) -> FfnIds {
        FfnIds {
            w1: self.add(format!("{prefix}.w1"), vec![d, ff], Init::Xavier),
            b1: self.add(format!("{prefix}.b1"), vec![ff], Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), vec![ff, d], Init::Xavier),
            b2: self.add(format!("{prefix}.b2"), vec![d], Init::Zeros),
        }
    }
}

fn build_layout(c: &TransformerConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let mut b = LayoutBuilder { specs: Vec::new() };
    let d = c.d_model;
    let embedding = b.add("embedding".into(), vec![c.vocab_size, d], Init::Xavier);
    let encoder = (0..c.n_layers)
        .map(|l| {
            let p = format!("encoder.{l}");
            EncoderLayerIds {
                attn: b.attn(&format!("{p}.self_attn"), d),
                ln_attn: b.norm(&format!("{p}.ln_self"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, c.d_ff),
                ln_ffn: b.norm(&format!("{p}.ln_ffn"), d),
            }
        })
        .collect();
    let decoder = (0..c.n_layers)
        .map(|l| {
            let p = format!("decoder.{l}");
            DecoderLayerIds {
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                ln_self: b.norm(&format!("{p}.ln_self"), d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                ln_cross: b.norm(&format!("{p}.ln_cross"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, c.d_ff),
                ln_ffn: b.norm(&format!("{p}.ln_ffn"), d),
            }
        })
        .collect();
    let output = (!c.tie_softmax).then(|| b.add("output_projection".into(), vec![d, c.vocab_size], Init::Xavier));
    (
        Layout {
            embedding,
            encoder,
            decoder,
            output,
        },
        b.specs,
    )
}

/// Named parameter tensors plus the configuration they were built for.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: TransformerConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
    positions: Tensor,
}

impl PartialEq for TransformerModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.params == other.params
    }
}

impl TransformerModel {
    /// Xavier-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
                Init::Xavier => {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let n = shape[0] * shape[1];
                    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(&shape, data)?
                }
            };
            names.push(name);
            params.push(t);
        }
        let positions = positional_encoding(config.max_positions, config.d_model)?;
        Ok(Self {
            config,
            names,
            params,
            layout,
            positions,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: TransformerConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.into_iter().enumerate() {
            if name != model.names[i] || t.shape() != model.params[i].shape() {
                return Err(Error::Shape(format!(
                    "parameter {i}: expected {} {:?}, got {} {:?}",
                    model.names[i],
                    model.params[i].shape(),
                    name,
                    t.shape()
                )));
            }
            model.params[i] = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// The shared source/target embedding table `[vocab_size, d_model]`.
    pub fn embedding(&self) -> &Tensor {
        &self.params[self.layout.embedding]
    }

    pub fn embedding_mut(&mut self) -> &mut Tensor {
        let i = self.layout.embedding;
        &mut self.params[i]
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub(crate) fn p(&self, id: usize) -> &Tensor {
        &self.params[id]
    }

    pub(crate) fn check_ids(&self, ids: &[u32]) -> Result<()> {
        let v = self.config.vocab_size;
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::Range(format!("token id {bad} outside vocabulary of {v}")));
        }
        Ok(())
    }
}

/// Sinusoidal position table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `PE[pos, 2i+1] = cos(...)` with the same angle.
pub fn positional_encoding(max_positions: usize, d_model: usize) -> Result<Tensor> {
    if !d_model.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "positional encoding needs an even width, got {d_model}"
        )));
    }
    let mut t = Tensor::zeros(&[max_positions, d_model]);
    let data = t.data_mut();
    for pos in 0..max_positions {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(t)
}
