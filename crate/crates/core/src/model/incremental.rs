//! Naive incremental decoding: per-layer, per-head K/V caches so online
//! evaluation appends tokens instead of re-running the whole context. Uses
//! exactly the same kernels as the batch forward, in the same accumulation
//! order, so the two paths agree bit-for-bit.

use super::{ModelConfig, ModelParams};
use crate::codec::Token;
use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::Real;

pub struct IncrementalState<F> {
    cfg: ModelConfig,
    /// `[layer][head]` rows of head_dim, one row per ingested token.
    k_cache: Vec<Vec<Vec<F>>>,
    v_cache: Vec<Vec<Vec<F>>>,
    len: usize,
    last_hidden: Vec<F>,
}

impl<F: Real> IncrementalState<F> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mk = || vec![vec![Vec::new(); cfg.n_heads]; cfg.n_layers];
        Self {
            cfg: cfg.clone(),
            k_cache: mk(),
            v_cache: mk(),
            len: 0,
            last_hidden: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn reset(&mut self) {
        for layer in self.k_cache.iter_mut().chain(self.v_cache.iter_mut()) {
            for head in layer.iter_mut() {
                head.clear();
            }
        }
        self.len = 0;
        self.last_hidden.clear();
    }

    /// Ingests a chunk of tokens at positions `len..len + chunk.len()`.
    pub fn append(&mut self, params: &ModelParams<F>, chunk: &[Token]) -> Result<()> {
        if chunk.is_empty() {
            return Ok(());
        }
        let d = self.cfg.d_model;
        let t = chunk.len();
        let base = self.len;
        if base + t > self.cfg.max_context {
            return Err(Error::Contract(format!(
                "incremental context would grow to {} tokens, max_context is {}",
                base + t,
                self.cfg.max_context
            )));
        }
        let n_heads = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let eps = F::from_f64(1e-5);

        // Embeddings for the new rows.
        let mut x = vec![F::zero(); t * d];
        for (i, &tok) in chunk.iter().enumerate() {
            if tok as usize >= self.cfg.vocab_size {
                return Err(Error::Validation(format!("token id {tok} out of vocab")));
            }
            let te = &params.tok_emb.data()[tok as usize * d..(tok as usize + 1) * d];
            let pe = &params.pos_emb.data()[(base + i) * d..(base + i + 1) * d];
            for j in 0..d {
                x[i * d + j] = te[j] + pe[j];
            }
        }

        let mut a = vec![F::zero(); t * d];
        for (layer_idx, layer) in params.layers.iter().enumerate() {
            kernels::layer_norm_rows(
                &x,
                layer.ln1_gain.data(),
                layer.ln1_bias.data(),
                &mut a,
                d,
                eps,
            );
            let project = |w: &[F], b: &[F]| {
                let mut out = kernels::matmul(&a, w, t, d, d);
                for row in out.chunks_exact_mut(d) {
                    for j in 0..d {
                        row[j] += b[j];
                    }
                }
                out
            };
            let q = project(layer.w_q.data(), layer.b_q.data());
            let k = project(layer.w_k.data(), layer.b_k.data());
            let v = project(layer.w_v.data(), layer.b_v.data());
            for i in 0..t {
                for h in 0..n_heads {
                    self.k_cache[layer_idx][h].extend_from_slice(&k[i * d + h * dh..i * d + (h + 1) * dh]);
                    self.v_cache[layer_idx][h].extend_from_slice(&v[i * d + h * dh..i * d + (h + 1) * dh]);
                }
            }

            let mut attn = vec![F::zero(); t * d];
            for i in 0..t {
                let g = base + i; // global row index: attend over 0..=g
                for h in 0..n_heads {
                    let kc = &self.k_cache[layer_idx][h];
                    let vc = &self.v_cache[layer_idx][h];
                    let qrow = &q[i * d + h * dh..i * d + (h + 1) * dh];
                    let mut scores = vec![F::zero(); g + 1];
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = kernels::dot(qrow, &kc[j * dh..(j + 1) * dh]) * scale;
                    }
                    kernels::softmax_row(&mut scores);
                    let out = &mut attn[i * d + h * dh..i * d + (h + 1) * dh];
                    kernels::weighted_rows_acc(&scores, &vc[..(g + 1) * dh], out, dh);
                }
            }
            // Output projection + residual.
            let mut proj = kernels::matmul(&attn, layer.w_o.data(), t, d, d);
            for (row, xrow) in proj.chunks_exact_mut(d).zip(x.chunks_exact_mut(d)) {
                let b = layer.b_o.data();
                for j in 0..d {
                    xrow[j] += row[j] + b[j];
                }
            }

            // MLP block.
            let mut m = vec![F::zero(); t * d];
            kernels::layer_norm_rows(
                &x,
                layer.ln2_gain.data(),
                layer.ln2_bias.data(),
                &mut m,
                d,
                eps,
            );
            let d_ff = self.cfg.d_ff;
            let mut fc = kernels::matmul(&m, layer.w_fc.data(), t, d, d_ff);
            for row in fc.chunks_exact_mut(d_ff) {
                let b = layer.b_fc.data();
                for j in 0..d_ff {
                    row[j] = kernels::relu(row[j] + b[j]);
                }
            }
            let out = kernels::matmul(&fc, layer.w_proj.data(), t, d_ff, d);
            for (row, xrow) in out.chunks_exact(d).zip(x.chunks_exact_mut(d)) {
                let b = layer.b_proj.data();
                for j in 0..d {
                    xrow[j] += row[j] + b[j];
                }
            }
        }

        self.last_hidden = x[(t - 1) * d..t * d].to_vec();
        self.len = base + t;
        Ok(())
    }

    /// Q-values at the most recently ingested position.
    pub fn q_last(&self, params: &ModelParams<F>) -> Result<[F; 4]> {
        if self.last_hidden.is_empty() {
            return Err(Error::Contract(
                "q_last called before any token was ingested".to_string(),
            ));
        }
        let d = self.cfg.d_model;
        let mut hf = vec![F::zero(); d];
        kernels::layer_norm_rows(
            &self.last_hidden,
            params.ln_f_gain.data(),
            params.ln_f_bias.data(),
            &mut hf,
            d,
            F::from_f64(1e-5),
        );
        let mut q = kernels::matmul(&hf, params.q_head_w.data(), 1, d, 4);
        for (x, &b) in q.iter_mut().zip(params.q_head_b.data()) {
            *x += b;
        }
        Ok([q[0], q[1], q[2], q[3]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Vocab;
    use crate::model::{infer_q, init};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: Vocab::SIZE,
            max_context: 48,
            dropout: 0.0,
        }
    }

    #[test]
    fn incremental_matches_batch_forward_bit_exactly() {
        let cfg = cfg();
        let mut params = init::<f32>(&cfg, 51).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for x in params.q_head_w.data_mut() {
            *x = rng.random_range(-0.3..0.3);
        }
        let tokens: Vec<Token> = (0..40)
            .map(|_| rng.random_range(0..Vocab::SIZE as Token))
            .collect();
        let mut inc = IncrementalState::new(&cfg);
        for (i, &tok) in tokens.iter().enumerate() {
            inc.append(&params, &[tok]).unwrap();
            let got = inc.q_last(&params).unwrap();
            let want = infer_q(&params, &cfg, &tokens[..=i], &[i]).unwrap()[0];
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.to_bits(), w.to_bits(), "mismatch at position {i}");
            }
        }
        // Chunked ingestion after reset gives the same answer.
        inc.reset();
        inc.append(&params, &tokens[..17]).unwrap();
        inc.append(&params, &tokens[17..]).unwrap();
        let got = inc.q_last(&params).unwrap();
        let want = infer_q(&params, &cfg, &tokens, &[tokens.len() - 1]).unwrap()[0];
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.to_bits(), w.to_bits());
        }
    }

    #[test]
    fn append_past_max_context_errors() {
        let cfg = cfg();
        let params = init::<f32>(&cfg, 53).unwrap();
        let mut inc = IncrementalState::new(&cfg);
        let chunk = vec![Vocab::BOT; cfg.max_context];
        inc.append(&params, &chunk).unwrap();
        assert!(inc.append(&params, &[Vocab::EOT]).is_err());
    }
}
