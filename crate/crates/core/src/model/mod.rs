//! Decoder-only causal transformer with learned positional embeddings and a
//! 4-way Q-value head. Pre-norm residual blocks, GELU MLP, no LM head: the
//! only output surface is Q(history, action) read at requested positions.

mod incremental;

pub use incremental::IncrementalState;

use crate::codec::{Token, Vocab};
use crate::error::{Error, Result};
use crate::numerics::{
    read_checkpoint, real, write_checkpoint, Checkpoint, Real, Tape, Tensor, TensorId,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

/// Q-values per requested position, ordered by [`crate::env::Action`] index.
pub type QOutput<F> = Vec<[F; 4]>;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: Vocab::SIZE,
            max_context: 1024,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Validation(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size != Vocab::SIZE {
            return Err(Error::Validation(format!(
                "vocab_size {} does not match codec vocabulary {}",
                self.vocab_size,
                Vocab::SIZE
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_context == 0 {
            return Err(Error::Validation(
                "n_layers, d_ff, max_context must be positive".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!(
                "dropout {} must be in [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        let per_layer = 2 * d            // ln1
            + 4 * (d * d + d)            // q,k,v,o projections
            + 2 * d                      // ln2
            + d * f + f + f * d + d; // mlp
        self.vocab_size * d + self.max_context * d + self.n_layers * per_layer + 2 * d + 4 * d + 4
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_layers = {}", self.n_layers);
        let _ = writeln!(s, "n_heads = {}", self.n_heads);
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "d_ff = {}", self.d_ff);
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "max_context = {}", self.max_context);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        s
    }

    pub fn from_text(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("model config line missing '=': {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let parse_usize = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad integer {v:?} for {k}")))
            };
            match k {
                "n_layers" => cfg.n_layers = parse_usize(v)?,
                "n_heads" => cfg.n_heads = parse_usize(v)?,
                "d_model" => cfg.d_model = parse_usize(v)?,
                "d_ff" => cfg.d_ff = parse_usize(v)?,
                "vocab_size" => cfg.vocab_size = parse_usize(v)?,
                "max_context" => cfg.max_context = parse_usize(v)?,
                "dropout" => {
                    cfg.dropout = v
                        .parse()
                        .map_err(|_| Error::Format(format!("bad float {v:?} for dropout")))?
                }
                other => return Err(Error::Format(format!("unknown model config key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_gain: Tensor<F>,
    pub ln1_bias: Tensor<F>,
    pub w_q: Tensor<F>,
    pub b_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub b_k: Tensor<F>,
    pub w_v: Tensor<F>,
    pub b_v: Tensor<F>,
    pub w_o: Tensor<F>,
    pub b_o: Tensor<F>,
    pub ln2_gain: Tensor<F>,
    pub ln2_bias: Tensor<F>,
    pub w_fc: Tensor<F>,
    pub b_fc: Tensor<F>,
    pub w_proj: Tensor<F>,
    pub b_proj: Tensor<F>,
}

/// The online parameters theta; the Polyak-averaged copy phi has the same
/// type. `clone()` is a deep copy with independent storage.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub tok_emb: Tensor<F>,
    pub pos_emb: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub ln_f_gain: Tensor<F>,
    pub ln_f_bias: Tensor<F>,
    pub q_head_w: Tensor<F>,
    pub q_head_b: Tensor<F>,
}

impl<F: Real> ModelParams<F> {
    /// Visits every tensor with its checkpoint name, in a fixed order.
    pub fn fields(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let named: [(&str, &Tensor<F>); 16] = [
                ("ln1.gain", &l.ln1_gain),
                ("ln1.bias", &l.ln1_bias),
                ("attn.w_q", &l.w_q),
                ("attn.b_q", &l.b_q),
                ("attn.w_k", &l.w_k),
                ("attn.b_k", &l.b_k),
                ("attn.w_v", &l.w_v),
                ("attn.b_v", &l.b_v),
                ("attn.w_o", &l.w_o),
                ("attn.b_o", &l.b_o),
                ("ln2.gain", &l.ln2_gain),
                ("ln2.bias", &l.ln2_bias),
                ("mlp.w_fc", &l.w_fc),
                ("mlp.b_fc", &l.b_fc),
                ("mlp.w_proj", &l.w_proj),
                ("mlp.b_proj", &l.b_proj),
            ];
            out.extend(named.map(|(n, t)| (format!("layer{i}.{n}"), t)));
        }
        out.push(("ln_f.gain".into(), &self.ln_f_gain));
        out.push(("ln_f.bias".into(), &self.ln_f_bias));
        out.push(("q_head.w".into(), &self.q_head_w));
        out.push(("q_head.b".into(), &self.q_head_b));
        out
    }

    pub fn fields_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.w_q,
                &mut l.b_q,
                &mut l.w_k,
                &mut l.b_k,
                &mut l.w_v,
                &mut l.b_v,
                &mut l.w_o,
                &mut l.b_o,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.w_fc,
                &mut l.b_fc,
                &mut l.w_proj,
                &mut l.b_proj,
            ]);
        }
        out.extend([
            &mut self.ln_f_gain,
            &mut self.ln_f_bias,
            &mut self.q_head_w,
            &mut self.q_head_b,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.fields().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.fields().iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    w_q: l.w_q.cast(),
                    b_q: l.b_q.cast(),
                    w_k: l.w_k.cast(),
                    b_k: l.b_k.cast(),
                    w_v: l.w_v.cast(),
                    b_v: l.b_v.cast(),
                    w_o: l.w_o.cast(),
                    b_o: l.b_o.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                    w_fc: l.w_fc.cast(),
                    b_fc: l.b_fc.cast(),
                    w_proj: l.w_proj.cast(),
                    b_proj: l.b_proj.cast(),
                })
                .collect(),
            ln_f_gain: self.ln_f_gain.cast(),
            ln_f_bias: self.ln_f_bias.cast(),
            q_head_w: self.q_head_w.cast(),
            q_head_b: self.q_head_b.cast(),
        }
    }
}

/// Scaled-normal init (std 0.02) for embeddings and projections, identity
/// layer norms, and a zero Q-head so initial targets are pure rewards.
pub fn init<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let std = 0.02;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let tok_emb = Tensor::randn(vec![cfg.vocab_size, d], std, &mut rng);
    let pos_emb = Tensor::randn(vec![cfg.max_context, d], std, &mut rng);
    for _ in 0..cfg.n_layers {
        layers.push(LayerParams {
            ln1_gain: Tensor::full(vec![d], F::one()),
            ln1_bias: Tensor::zeros(vec![d]),
            w_q: Tensor::randn(vec![d, d], std, &mut rng),
            b_q: Tensor::zeros(vec![d]),
            w_k: Tensor::randn(vec![d, d], std, &mut rng),
            b_k: Tensor::zeros(vec![d]),
            w_v: Tensor::randn(vec![d, d], std, &mut rng),
            b_v: Tensor::zeros(vec![d]),
            w_o: Tensor::randn(vec![d, d], std, &mut rng),
            b_o: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::full(vec![d], F::one()),
            ln2_bias: Tensor::zeros(vec![d]),
            w_fc: Tensor::randn(vec![d, cfg.d_ff], std, &mut rng),
            b_fc: Tensor::zeros(vec![cfg.d_ff]),
            w_proj: Tensor::randn(vec![cfg.d_ff, d], std, &mut rng),
            b_proj: Tensor::zeros(vec![d]),
        });
    }
    Ok(ModelParams {
        tok_emb,
        pos_emb,
        layers,
        ln_f_gain: Tensor::full(vec![d], F::one()),
        ln_f_bias: Tensor::zeros(vec![d]),
        q_head_w: Tensor::zeros(vec![d, 4]),
        q_head_b: Tensor::zeros(vec![4]),
    })
}

/// Deep copy with independent storage (phi from theta).
pub fn clone_params<F: Real>(params: &ModelParams<F>) -> ModelParams<F> {
    params.clone()
}

/// Tape-registered parameter handles, mirroring [`ModelParams::fields`]
/// order so gradients map back by position.
pub struct ParamIds {
    pub ids: Vec<TensorId>,
    pub trainable: bool,
}

/// Registers all parameters on a tape. `trainable` decides leaf vs constant.
pub fn register_params<F: Real>(
    tape: &mut Tape<F>,
    params: &ModelParams<F>,
    trainable: bool,
) -> ParamIds {
    let ids = params
        .fields()
        .into_iter()
        .map(|(_, t)| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    ParamIds { ids, trainable }
}

struct LayerIds {
    ln1_gain: TensorId,
    ln1_bias: TensorId,
    w_q: TensorId,
    b_q: TensorId,
    w_k: TensorId,
    b_k: TensorId,
    w_v: TensorId,
    b_v: TensorId,
    w_o: TensorId,
    b_o: TensorId,
    ln2_gain: TensorId,
    ln2_bias: TensorId,
    w_fc: TensorId,
    b_fc: TensorId,
    w_proj: TensorId,
    b_proj: TensorId,
}

impl ParamIds {
    fn layer(&self, i: usize) -> LayerIds {
        let b = 2 + i * 16;
        LayerIds {
            ln1_gain: self.ids[b],
            ln1_bias: self.ids[b + 1],
            w_q: self.ids[b + 2],
            b_q: self.ids[b + 3],
            w_k: self.ids[b + 4],
            b_k: self.ids[b + 5],
            w_v: self.ids[b + 6],
            b_v: self.ids[b + 7],
            w_o: self.ids[b + 8],
            b_o: self.ids[b + 9],
            ln2_gain: self.ids[b + 10],
            ln2_bias: self.ids[b + 11],
            w_fc: self.ids[b + 12],
            b_fc: self.ids[b + 13],
            w_proj: self.ids[b + 14],
            b_proj: self.ids[b + 15],
        }
    }

    fn tok_emb(&self) -> TensorId {
        self.ids[0]
    }
    fn pos_emb(&self) -> TensorId {
        self.ids[1]
    }
    fn tail(&self, n_layers: usize) -> (TensorId, TensorId, TensorId, TensorId) {
        let b = 2 + n_layers * 16;
        (self.ids[b], self.ids[b + 1], self.ids[b + 2], self.ids[b + 3])
    }
}

/// Optional dropout source for training-mode forward passes.
pub struct DropoutCtx<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub p: f64,
}

/// Full forward pass on a tape. Returns the Q-output node of shape
/// [positions.len(), 4]. Strictly causal: the value at position p only
/// depends on tokens at indices <= p.
pub fn forward_on_tape<F: Real>(
    tape: &mut Tape<F>,
    ids: &ParamIds,
    cfg: &ModelConfig,
    tokens: &[Token],
    positions: &[usize],
    mut dropout: Option<DropoutCtx<'_>>,
) -> Result<TensorId> {
    let len = tokens.len();
    if len == 0 {
        return Err(Error::Contract("empty token stream".to_string()));
    }
    if len > cfg.max_context {
        return Err(Error::Contract(format!(
            "stream of {len} tokens exceeds max_context {}",
            cfg.max_context
        )));
    }
    if let Some(&bad) = positions.iter().find(|&&p| p >= len) {
        return Err(Error::Contract(format!(
            "requested position {bad} beyond stream length {len}"
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Validation(format!("token id {bad} out of vocab")));
    }

    let tok_idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let pos_idx: Vec<usize> = (0..len).collect();
    let te = tape.gather_rows(ids.tok_emb(), tok_idx)?;
    let pe = tape.gather_rows(ids.pos_emb(), pos_idx)?;
    let mut h = tape.add(te, pe)?;
    h = apply_dropout(tape, h, &mut dropout)?;

    for i in 0..cfg.n_layers {
        let l = ids.layer(i);
        let a = tape.layer_norm(h, l.ln1_gain, l.ln1_bias)?;
        let q = {
            let m = tape.matmul(a, l.w_q)?;
            tape.add_bias(m, l.b_q)?
        };
        let k = {
            let m = tape.matmul(a, l.w_k)?;
            tape.add_bias(m, l.b_k)?
        };
        let v = {
            let m = tape.matmul(a, l.w_v)?;
            tape.add_bias(m, l.b_v)?
        };
        let attn = tape.causal_attention(q, k, v, cfg.n_heads)?;
        let proj = {
            let m = tape.matmul(attn, l.w_o)?;
            tape.add_bias(m, l.b_o)?
        };
        let proj = apply_dropout(tape, proj, &mut dropout)?;
        h = tape.add(h, proj)?;

        let m = tape.layer_norm(h, l.ln2_gain, l.ln2_bias)?;
        let fc = {
            let mm = tape.matmul(m, l.w_fc)?;
            let mm = tape.add_bias(mm, l.b_fc)?;
            tape.relu(mm)
        };
        let out = {
            let mm = tape.matmul(fc, l.w_proj)?;
            tape.add_bias(mm, l.b_proj)?
        };
        let out = apply_dropout(tape, out, &mut dropout)?;
        h = tape.add(h, out)?;
    }

    let (gf, bf, qw, qb) = ids.tail(cfg.n_layers);
    let hf = tape.layer_norm(h, gf, bf)?;
    let hp = tape.gather_rows(hf, positions.to_vec())?;
    let q = tape.matmul(hp, qw)?;
    tape.add_bias(q, qb)
}

fn apply_dropout<F: Real>(
    tape: &mut Tape<F>,
    x: TensorId,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> Result<TensorId> {
    let Some(ctx) = dropout else { return Ok(x) };
    if ctx.p <= 0.0 {
        return Ok(x);
    }
    use rand::Rng;
    let keep = 1.0 - ctx.p;
    let scale = real::<F>(1.0 / keep);
    let shape = tape.value(x).shape().to_vec();
    let numel: usize = shape.iter().product();
    let mask_data: Vec<F> = (0..numel)
        .map(|_| {
            if ctx.rng.random_bool(keep) {
                scale
            } else {
                F::zero()
            }
        })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask_data)?);
    tape.mul(x, mask)
}

/// No-grad batch forward. Mirrors [`forward_on_tape`] kernel for kernel and
/// in the same accumulation order, so the two paths agree bit-for-bit; this
/// one skips all tape bookkeeping (used for target-network passes and
/// evaluation).
pub fn infer_q<F: Real>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    tokens: &[Token],
    positions: &[usize],
) -> Result<QOutput<F>> {
    use crate::numerics::kernels;
    let len = tokens.len();
    if len == 0 {
        return Err(Error::Contract("empty token stream".to_string()));
    }
    if len > cfg.max_context {
        return Err(Error::Contract(format!(
            "stream of {len} tokens exceeds max_context {}",
            cfg.max_context
        )));
    }
    if let Some(&bad) = positions.iter().find(|&&p| p >= len) {
        return Err(Error::Contract(format!(
            "requested position {bad} beyond stream length {len}"
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Validation(format!("token id {bad} out of vocab")));
    }

    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let d_ff = cfg.d_ff;
    let eps = real::<F>(1e-5);
    let scale = real::<F>(1.0 / (dh as f64).sqrt());

    let mut x = vec![F::zero(); len * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let te = &params.tok_emb.data()[tok as usize * d..(tok as usize + 1) * d];
        let pe = &params.pos_emb.data()[i * d..(i + 1) * d];
        for j in 0..d {
            x[i * d + j] = te[j] + pe[j];
        }
    }

    let mut a = vec![F::zero(); len * d];
    let mut qh = vec![F::zero(); len * dh];
    let mut kh = vec![F::zero(); len * dh];
    let mut vh = vec![F::zero(); len * dh];
    for layer in &params.layers {
        kernels::layer_norm_rows(&x, layer.ln1_gain.data(), layer.ln1_bias.data(), &mut a, d, eps);
        let project = |w: &Tensor<F>, b: &Tensor<F>| {
            let mut out = kernels::matmul(&a, w.data(), len, d, d);
            for row in out.chunks_exact_mut(d) {
                for (v, &bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            out
        };
        let q = project(&layer.w_q, &layer.b_q);
        let k = project(&layer.w_k, &layer.b_k);
        let v = project(&layer.w_v, &layer.b_v);

        let mut attn = vec![F::zero(); len * d];
        for h in 0..cfg.n_heads {
            kernels::copy_head(&q, &mut qh, len, d, dh, h);
            kernels::copy_head(&k, &mut kh, len, d, dh, h);
            kernels::copy_head(&v, &mut vh, len, d, dh, h);
            let mut scores = vec![F::zero(); len];
            for i in 0..len {
                let qrow = &qh[i * dh..(i + 1) * dh];
                for j in 0..=i {
                    scores[j] = kernels::dot(qrow, &kh[j * dh..(j + 1) * dh]) * scale;
                }
                kernels::softmax_row(&mut scores[..=i]);
                kernels::weighted_rows_acc(
                    &scores[..=i],
                    &vh,
                    &mut attn[i * d + h * dh..i * d + (h + 1) * dh],
                    dh,
                );
            }
        }
        let proj = kernels::matmul(&attn, layer.w_o.data(), len, d, d);
        for (i, row) in proj.chunks_exact(d).enumerate() {
            let xrow = &mut x[i * d..(i + 1) * d];
            let b = layer.b_o.data();
            for j in 0..d {
                xrow[j] += row[j] + b[j];
            }
        }

        let mut m = vec![F::zero(); len * d];
        kernels::layer_norm_rows(&x, layer.ln2_gain.data(), layer.ln2_bias.data(), &mut m, d, eps);
        let mut fc = kernels::matmul(&m, layer.w_fc.data(), len, d, d_ff);
        for row in fc.chunks_exact_mut(d_ff) {
            let b = layer.b_fc.data();
            for j in 0..d_ff {
                row[j] = kernels::relu(row[j] + b[j]);
            }
        }
        let out = kernels::matmul(&fc, layer.w_proj.data(), len, d_ff, d);
        for (i, row) in out.chunks_exact(d).enumerate() {
            let xrow = &mut x[i * d..(i + 1) * d];
            let b = layer.b_proj.data();
            for j in 0..d {
                xrow[j] += row[j] + b[j];
            }
        }
    }

    let mut hf = vec![F::zero(); len * d];
    kernels::layer_norm_rows(
        &x,
        params.ln_f_gain.data(),
        params.ln_f_bias.data(),
        &mut hf,
        d,
        eps,
    );
    let mut out = Vec::with_capacity(positions.len());
    for &p in positions {
        let q = kernels::matmul(&hf[p * d..(p + 1) * d], params.q_head_w.data(), 1, d, 4);
        out.push([
            q[0] + params.q_head_b.data()[0],
            q[1] + params.q_head_b.data()[1],
            q[2] + params.q_head_b.data()[2],
            q[3] + params.q_head_b.data()[3],
        ]);
    }
    Ok(out)
}

/// Writes params + config into the flat binary checkpoint container.
pub fn save_model(path: &Path, params: &ModelParams<f32>, cfg: &ModelConfig) -> Result<()> {
    let ckpt = Checkpoint {
        metadata: cfg.to_text(),
        tensors: params
            .fields()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
    };
    write_checkpoint(path, &ckpt)
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelParams<f32>)> {
    let ckpt = read_checkpoint(path)?;
    let cfg = ModelConfig::from_text(&ckpt.metadata)?;
    let mut params = init::<f32>(&cfg, 0)?;
    let names: Vec<String> = params.fields().iter().map(|(n, _)| n.clone()).collect();
    if names.len() != ckpt.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, config implies {}",
            ckpt.tensors.len(),
            names.len()
        )));
    }
    for (slot, (name, (ckpt_name, tensor))) in params
        .fields_mut()
        .into_iter()
        .zip(names.iter().zip(ckpt.tensors))
        .map(|(s, n)| (s, n))
    {
        if *name != ckpt_name {
            return Err(Error::Format(format!(
                "checkpoint tensor {ckpt_name:?} where {name:?} expected"
            )));
        }
        if slot.shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor {ckpt_name:?} has shape {:?}, expected {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    Ok((cfg, params))
}
