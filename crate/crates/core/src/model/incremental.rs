//! Cached step-by-step decoder used for search. It computes the same
//! function as the teacher-forced graph forward, one target position at a
//! time, reusing keys and values of earlier positions.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{kernels, Graph};

use super::forward::{Batch, Ctx, ForwardMode};
use super::{AttnIds, NormIds, TransformerModel, LAYER_NORM_EPS};

/// Encoder output for one source sentence, with the cross-attention keys and
/// values of every decoder layer precomputed.
#[derive(Debug, Clone)]
pub struct SourceMemory {
    len: usize,
    cross_kv: Vec<(Vec<f64>, Vec<f64>)>,
}

impl SourceMemory {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn encode(model: &TransformerModel, source: &[u32]) -> Result<Arc<SourceMemory>> {
        Ok(Self::encode_batch(model, &[source])?.remove(0))
    }

    /// Encodes several sources in one padded pass.
    pub fn encode_batch<S: AsRef<[u32]>>(model: &TransformerModel, sources: &[S]) -> Result<Vec<Arc<SourceMemory>>> {
        if sources.iter().any(|s| s.as_ref().is_empty()) {
            return Err(Error::Input("empty source".into()));
        }
        if sources.is_empty() {
            return Ok(Vec::new());
        }
        let limit = model.config().max_positions;
        for s in sources {
            model.check_ids(s.as_ref())?;
            if s.as_ref().len() > limit {
                return Err(Error::Length {
                    len: s.as_ref().len(),
                    limit,
                });
            }
        }
        let dummy = [crate::subword::EOS_ID];
        let pairs: Vec<(&[u32], &[u32])> = sources.iter().map(|s| (s.as_ref(), &dummy[..])).collect();
        let batch = Batch::from_pairs(&pairs)?;
        let mut g = Graph::new();
        let mut ctx = Ctx::new(model, &mut g, ForwardMode::Eval);
        let mem = ctx.encode(&batch)?;
        let mem = g.value(mem);
        let d = model.config().d_model;
        let mut out = Vec::with_capacity(sources.len());
        for (r, s) in sources.iter().enumerate() {
            let len = s.as_ref().len();
            let start = r * batch.src_len * d;
            let rows = &mem.data()[start..start + len * d];
            let cross_kv = model
                .layout()
                .decoder
                .iter()
                .map(|layer| {
                    let mut k = vec![0.0; len * d];
                    let mut v = vec![0.0; len * d];
                    let wk = model.p(layer.cross_attn.k).data();
                    let wv = model.p(layer.cross_attn.v).data();
                    kernels::gemm(len, d, d, rows, false, wk, false, &mut k, false);
                    kernels::gemm(len, d, d, rows, false, wv, false, &mut v, false);
                    (k, v)
                })
                .collect();
            out.push(Arc::new(SourceMemory { len, cross_kv }));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct RowState {
    memory: Arc<SourceMemory>,
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
}

/// Decoder state for a set of rows advancing in lock step.
#[derive(Debug, Clone)]
pub struct DecoderState<'m> {
    model: &'m TransformerModel,
    rows: Vec<RowState>,
    position: usize,
}

impl<'m> DecoderState<'m> {
    pub fn new(model: &'m TransformerModel, memories: Vec<Arc<SourceMemory>>) -> Self {
        let layers = model.config().n_layers;
        let rows = memories
            .into_iter()
            .map(|memory| RowState {
                memory,
                self_k: vec![Vec::new(); layers],
                self_v: vec![Vec::new(); layers],
            })
            .collect();
        Self {
            model,
            rows,
            position: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    /// Number of target positions already consumed.
    pub fn position(&self) -> usize {
        self.position
    }

    /// Keeps rows in the given order (duplicates allowed), e.g. beam parents.
    pub fn reorder(&mut self, parents: &[usize]) {
        self.rows = parents.iter().map(|&p| self.rows[p].clone()).collect();
    }

    /// Feeds one token per row and returns next-token log-probabilities,
    /// `rows × vocab_size` flattened.
    pub fn step(&mut self, tokens: &[u32]) -> Result<Vec<f64>> {
        let model = self.model;
        let cfg = model.config();
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        let r = self.rows.len();
        if tokens.len() != r {
            return Err(Error::Shape(format!("{} tokens for {r} rows", tokens.len())));
        }
        if self.position >= cfg.max_positions {
            return Err(Error::Length {
                len: self.position + 1,
                limit: cfg.max_positions,
            });
        }
        model.check_ids(tokens)?;
        let emb = model.embedding().data();
        let pos = &model.positions().data()[self.position * d..(self.position + 1) * d];
        let scale = (d as f64).sqrt();
        let mut x = vec![0.0; r * d];
        for (row, &t) in tokens.iter().enumerate() {
            let e = &emb[t as usize * d..(t as usize + 1) * d];
            for j in 0..d {
                x[row * d + j] = e[j] * scale + pos[j];
            }
        }
        let mut q = vec![0.0; r * d];
        let mut k = vec![0.0; r * d];
        let mut v = vec![0.0; r * d];
        let mut a = vec![0.0; r * d];
        let mut o = vec![0.0; r * d];
        let mut h = vec![0.0; r * cfg.d_ff];
        for (l, layer) in model.layout().decoder.iter().enumerate() {
            // causal self-attention over cached positions
            project(model, &layer.self_attn, &x, r, d, &mut q, &mut k, &mut v);
            for (row, state) in self.rows.iter_mut().enumerate() {
                state.self_k[l].extend_from_slice(&k[row * d..(row + 1) * d]);
                state.self_v[l].extend_from_slice(&v[row * d..(row + 1) * d]);
                attend(
                    &q[row * d..(row + 1) * d],
                    &state.self_k[l],
                    &state.self_v[l],
                    d,
                    heads,
                    &mut a[row * d..(row + 1) * d],
                );
            }
            kernels::gemm(
                r,
                d,
                d,
                &a,
                false,
                model.p(layer.self_attn.o).data(),
                false,
                &mut o,
                false,
            );
            add_norm(model, &mut x, &o, &layer.ln_self, d);

            // cross-attention over the source memory
            kernels::gemm(
                r,
                d,
                d,
                &x,
                false,
                model.p(layer.cross_attn.q).data(),
                false,
                &mut q,
                false,
            );
            for (row, state) in self.rows.iter().enumerate() {
                let (mk, mv) = &state.memory.cross_kv[l];
                attend(
                    &q[row * d..(row + 1) * d],
                    mk,
                    mv,
                    d,
                    heads,
                    &mut a[row * d..(row + 1) * d],
                );
            }
            kernels::gemm(
                r,
                d,
                d,
                &a,
                false,
                model.p(layer.cross_attn.o).data(),
                false,
                &mut o,
                false,
            );
            add_norm(model, &mut x, &o, &layer.ln_cross, d);

            // feed-forward
            let f = &layer.ffn;
            kernels::gemm(r, d, cfg.d_ff, &x, false, model.p(f.w1).data(), false, &mut h, false);
            kernels::add_row_bias(&mut h, model.p(f.b1).data());
            for v in h.iter_mut() {
                *v = v.max(0.0);
            }
            kernels::gemm(r, cfg.d_ff, d, &h, false, model.p(f.w2).data(), false, &mut o, false);
            kernels::add_row_bias(&mut o, model.p(f.b2).data());
            add_norm(model, &mut x, &o, &layer.ln_ffn, d);
        }
        let vocab = cfg.vocab_size;
        let mut logits = vec![0.0; r * vocab];
        match model.layout().output {
            Some(w) => kernels::gemm(r, d, vocab, &x, false, model.p(w).data(), false, &mut logits, false),
            None => kernels::gemm(r, d, vocab, &x, false, emb, true, &mut logits, false),
        }
        let mut out = vec![0.0; r * vocab];
        for (lr, or) in logits.chunks_exact(vocab).zip(out.chunks_exact_mut(vocab)) {
            kernels::log_softmax(lr, or);
        }
        self.position += 1;
        Ok(out)
    }
}

#[allow(clippy::too_many_arguments)]
fn project(
    model: &TransformerModel,
    ids: &AttnIds,
    x: &[f64],
    r: usize,
    d: usize,
    q: &mut [f64],
    k: &mut [f64],
    v: &mut [f64],
) {
    kernels::gemm(r, d, d, x, false, model.p(ids.q).data(), false, q, false);
    kernels::gemm(r, d, d, x, false, model.p(ids.k).data(), false, k, false);
    kernels::gemm(r, d, d, x, false, model.p(ids.v).data(), false, v, false);
}

/// Multi-head attention of one query row over `keys.len() / d` positions.
fn attend(query: &[f64], keys: &[f64], values: &[f64], d: usize, heads: usize, out: &mut [f64]) {
    let n = keys.len() / d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = vec![0.0; n];
    for h in 0..heads {
        let qh = &query[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
            *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        kernels::softmax_in_place(&mut scores);
        let oh = &mut out[h * dh..(h + 1) * dh];
        oh.fill(0.0);
        for (j, &p) in scores.iter().enumerate() {
            let vh = &values[j * d + h * dh..j * d + (h + 1) * dh];
            for (o, v) in oh.iter_mut().zip(vh) {
                *o += p * v;
            }
        }
    }
}

fn add_norm(model: &TransformerModel, x: &mut [f64], sub: &[f64], norm: &NormIds, d: usize) {
    for (a, b) in x.iter_mut().zip(sub) {
        *a += b;
    }
    let input = x.to_vec();
    kernels::layer_norm_rows(
        &input,
        d,
        model.p(norm.gain).data(),
        model.p(norm.bias).data(),
        LAYER_NORM_EPS,
        x,
        None,
        None,
    );
}
