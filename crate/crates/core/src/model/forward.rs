use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{kernels, AttentionSpec, Graph, Tensor, Var};
use crate::subword::{EOS_ID, PAD_ID};

use super::{AttnIds, FfnIds, NormIds, TransformerModel, LAYER_NORM_EPS};

/// A padded teacher-forcing batch.
///
/// Source rows end in EOS. `tgt_out` is the gold sequence (ending in EOS) and
/// `tgt_in` is the same sequence shifted right behind a leading EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<u32>,
    pub src_lens: Vec<usize>,
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    /// Pads `(source, target)` id sequences; both are taken as given, so
    /// callers append EOS where they want one.
    pub fn from_pairs<S: AsRef<[u32]>, T: AsRef<[u32]>>(pairs: &[(S, T)]) -> Result<Batch> {
        if pairs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let rows = pairs.len();
        let src_lens: Vec<usize> = pairs.iter().map(|(s, _)| s.as_ref().len()).collect();
        let tgt_lens: Vec<usize> = pairs.iter().map(|(_, t)| t.as_ref().len()).collect();
        if src_lens.contains(&0) || tgt_lens.contains(&0) {
            return Err(Error::Input("empty sequence in batch".into()));
        }
        let src_len = *src_lens.iter().max().unwrap();
        let tgt_len = *tgt_lens.iter().max().unwrap();
        let mut src = vec![PAD_ID; rows * src_len];
        let mut tgt_in = vec![PAD_ID; rows * tgt_len];
        let mut tgt_out = vec![PAD_ID; rows * tgt_len];
        for (r, (s, t)) in pairs.iter().enumerate() {
            let (s, t) = (s.as_ref(), t.as_ref());
            src[r * src_len..r * src_len + s.len()].copy_from_slice(s);
            tgt_out[r * tgt_len..r * tgt_len + t.len()].copy_from_slice(t);
            tgt_in[r * tgt_len] = EOS_ID;
            tgt_in[r * tgt_len + 1..r * tgt_len + t.len()].copy_from_slice(&t[..t.len() - 1]);
        }
        Ok(Batch {
            rows,
            src_len,
            tgt_len,
            src,
            src_lens,
            tgt_in,
            tgt_out,
            tgt_lens,
        })
    }

    /// Padded footprint `(rows × src_len, rows × tgt_len)`.
    pub fn padded_tokens(&self) -> (usize, usize) {
        (self.rows * self.src_len, self.rows * self.tgt_len)
    }

    /// Non-pad target tokens.
    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }

    pub fn source_tokens(&self) -> usize {
        self.src_lens.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    /// Dropout active, masks drawn from this seed.
    Train {
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Flat logits `[rows * tgt_len, vocab_size]`; see [`ForwardOutput::logits_tensor`].
    pub logits: Var,
    pub loss: Var,
    pub rows: usize,
    pub tgt_len: usize,
}

impl ForwardOutput {
    /// Logits reshaped to `[rows, tgt_len, vocab_size]`.
    pub fn logits_tensor(&self, g: &Graph<'_>) -> Tensor {
        let t = g.value(self.logits).clone();
        let v = t.cols();
        t.reshape(&[self.rows, self.tgt_len, v])
            .expect("logit layout is fixed by construction")
    }
}

pub(crate) struct Ctx<'m, 'g> {
    pub g: &'g mut Graph<'m>,
    pub model: &'m TransformerModel,
    pub vars: Vec<Var>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'m, 'g> Ctx<'m, 'g> {
    pub fn new(model: &'m TransformerModel, g: &'g mut Graph<'m>, mode: ForwardMode) -> Self {
        let vars = model
            .names()
            .iter()
            .zip(model.params())
            .map(|(n, p)| g.param(n, p))
            .collect();
        let dropout = match mode {
            ForwardMode::Train { seed } if model.config().dropout > 0.0 => {
                Some((model.config().dropout, ChaCha8Rng::seed_from_u64(seed)))
            }
            _ => None,
        };
        Self {
            g,
            model,
            vars,
            dropout,
        }
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *rate;
        let n = self.g.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.g.mul_mask(x, mask)
    }

    fn embed(&mut self, ids: &[u32], rows: usize, len: usize) -> Result<Var> {
        let d = self.model.config().d_model;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let e = self.g.gather_rows(self.vars[self.model.layout().embedding], &idx)?;
        let e = self.g.scale(e, (d as f64).sqrt());
        let pos = self.model.positions();
        let mut tiled = Vec::with_capacity(rows * len * d);
        for _ in 0..rows {
            tiled.extend_from_slice(&pos.data()[..len * d]);
        }
        let pe = self.g.constant(Tensor::new(&[rows * len, d], tiled)?);
        let x = self.g.add(e, pe)?;
        self.dropout(x)
    }

    fn attention(&mut self, xq: Var, xkv: Var, ids: &AttnIds, spec: AttentionSpec) -> Result<Var> {
        let q = self.g.matmul(xq, self.vars[ids.q], false)?;
        let k = self.g.matmul(xkv, self.vars[ids.k], false)?;
        let v = self.g.matmul(xkv, self.vars[ids.v], false)?;
        let a = self.g.attention(q, k, v, spec)?;
        self.g.matmul(a, self.vars[ids.o], false)
    }

    fn ffn(&mut self, x: Var, ids: &FfnIds) -> Result<Var> {
        let h = self.g.matmul(x, self.vars[ids.w1], false)?;
        let h = self.g.add_row_bias(h, self.vars[ids.b1])?;
        let h = self.g.relu(h);
        let o = self.g.matmul(h, self.vars[ids.w2], false)?;
        self.g.add_row_bias(o, self.vars[ids.b2])
    }

    /// `LayerNorm(x + dropout(sublayer))`.
    fn residual(&mut self, x: Var, sub: Var, norm: &NormIds) -> Result<Var> {
        let sub = self.dropout(sub)?;
        let s = self.g.add(x, sub)?;
        self.g
            .layer_norm(s, self.vars[norm.gain], self.vars[norm.bias], LAYER_NORM_EPS)
    }

    /// Runs the encoder; returns the memory `[rows * src_len, d]`.
    pub fn encode(&mut self, batch: &Batch) -> Result<Var> {
        let mut x = self.embed(&batch.src, batch.rows, batch.src_len)?;
        let layers = self.model.layout().encoder.clone();
        for layer in &layers {
            let spec = AttentionSpec {
                batch: batch.rows,
                q_len: batch.src_len,
                k_len: batch.src_len,
                heads: self.model.config().n_heads,
                key_lens: batch.src_lens.clone(),
                causal: false,
            };
            let a = self.attention(x, x, &layer.attn, spec)?;
            x = self.residual(x, a, &layer.ln_attn)?;
            let f = self.ffn(x, &layer.ffn)?;
            x = self.residual(x, f, &layer.ln_ffn)?;
        }
        Ok(x)
    }

    pub fn decode(&mut self, batch: &Batch, memory: Var) -> Result<Var> {
        let heads = self.model.config().n_heads;
        let mut y = self.embed(&batch.tgt_in, batch.rows, batch.tgt_len)?;
        let layers = self.model.layout().decoder.clone();
        for layer in &layers {
            let self_spec = AttentionSpec {
                batch: batch.rows,
                q_len: batch.tgt_len,
                k_len: batch.tgt_len,
                heads,
                key_lens: batch.tgt_lens.clone(),
                causal: true,
            };
            let a = self.attention(y, y, &layer.self_attn, self_spec)?;
            y = self.residual(y, a, &layer.ln_self)?;
            let cross_spec = AttentionSpec {
                batch: batch.rows,
                q_len: batch.tgt_len,
                k_len: batch.src_len,
                heads,
                key_lens: batch.src_lens.clone(),
                causal: false,
            };
            let c = self.attention(y, memory, &layer.cross_attn, cross_spec)?;
            y = self.residual(y, c, &layer.ln_cross)?;
            let f = self.ffn(y, &layer.ffn)?;
            y = self.residual(y, f, &layer.ln_ffn)?;
        }
        match self.model.layout().output {
            Some(w) => self.g.matmul(y, self.vars[w], false),
            None => self.g.matmul(y, self.vars[self.model.layout().embedding], true),
        }
    }
}

fn check_batch(model: &TransformerModel, batch: &Batch) -> Result<()> {
    model.check_ids(&batch.src)?;
    model.check_ids(&batch.tgt_in)?;
    model.check_ids(&batch.tgt_out)?;
    let limit = model.config().max_positions;
    for len in [batch.src_len, batch.tgt_len] {
        if len > limit {
            return Err(Error::Length { len, limit });
        }
    }
    Ok(())
}

/// Teacher-forced forward pass with label-smoothed loss over non-pad target
/// positions.
pub fn forward<'m>(
    model: &'m TransformerModel,
    g: &mut Graph<'m>,
    batch: &Batch,
    mode: ForwardMode,
) -> Result<ForwardOutput> {
    check_batch(model, batch)?;
    let mut ctx = Ctx::new(model, g, mode);
    let memory = ctx.encode(batch)?;
    let logits = ctx.decode(batch, memory)?;
    let targets: Vec<usize> = batch.tgt_out.iter().map(|&t| t as usize).collect();
    let mask: Vec<bool> = (0..batch.rows * batch.tgt_len)
        .map(|i| i % batch.tgt_len < batch.tgt_lens[i / batch.tgt_len])
        .collect();
    let loss = ctx
        .g
        .cross_entropy(logits, &targets, &mask, model.config().label_smoothing)?;
    Ok(ForwardOutput {
        logits,
        loss,
        rows: batch.rows,
        tgt_len: batch.tgt_len,
    })
}

/// Total log-probability of `target` given `source`, without smoothing.
///
/// `source` is the encoder input (normally ending in EOS); `target` is scored
/// token by token, each conditioned on EOS followed by the preceding tokens.
pub fn score_sequence(model: &TransformerModel, source: &[u32], target: &[u32]) -> Result<f64> {
    if source.is_empty() {
        return Err(Error::Input("empty source".into()));
    }
    if target.is_empty() {
        return Ok(0.0);
    }
    let batch = Batch::from_pairs(&[(source, target)])?;
    let mut g = Graph::new();
    let out = forward(model, &mut g, &batch, ForwardMode::Eval)?;
    let logits = g.value(out.logits);
    let v = logits.cols();
    let mut lp = vec![0.0; v];
    let mut total = 0.0;
    for (t, &gold) in target.iter().enumerate() {
        kernels::log_softmax(logits.row(t), &mut lp);
        total += lp[gold as usize];
    }
    Ok(total)
}
