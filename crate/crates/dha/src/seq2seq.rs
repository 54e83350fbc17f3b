//! LSTM encoder-decoder for token sequences.
//!
//! Sequential sources (e.g. a user's recent purchase genres) don't fit the
//! flat autoencoder mold, so they get a recurrent one: an LSTM encoder reads
//! the sequence and its final hidden state is mapped through a tanh affine
//! layer to a fixed-length *context vector*. That context plays the same role
//! as an autoencoder's middle code — it feeds the fusion layer — and the
//! training signal mirrors reconstruction: an LSTM decoder initialized from
//! the context re-predicts the input tokens under teacher forcing, scored by
//! next-token negative log-likelihood.
//!
//! Token id 0 is reserved for padding (masked out of the loss) and id 1 for
//! the decoder's start-of-sequence input.

use crate::error::{DhaError, Result};
use crate::math::{ActivationKind, DenseMatrix, DenseVector};
use crate::rng::SeededRng;

pub const PAD_TOKEN: u32 = 0;
pub const START_TOKEN: u32 = 1;

/// Architecture of one sequential component.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSpec {
    pub component_id: u32,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    /// Fixed sequence length; shorter inputs are left-padded.
    pub time_steps: usize,
}

impl SequenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.time_steps == 0 {
            return Err(DhaError::ConfigInvalid(format!(
                "component {}: time_steps must be >= 1",
                self.component_id
            )));
        }
        if self.vocab_size < 2 {
            return Err(DhaError::ConfigInvalid(format!(
                "component {}: vocab_size must be >= 2 (ids 0/1 are pad/start)",
                self.component_id
            )));
        }
        if self.embedding_dim == 0 || self.hidden_dim == 0 {
            return Err(DhaError::ConfigInvalid(format!(
                "component {}: embedding_dim and hidden_dim must be >= 1",
                self.component_id
            )));
        }
        Ok(())
    }
}

/// One entity's sequence, oldest token first, exactly `time_steps` long.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub entity_id: u32,
    pub tokens: Vec<u32>,
}

impl TokenSequence {
    /// Left-pad or truncate (keeping the most recent tokens) to length `t`.
    pub fn fit_to(entity_id: u32, tokens: &[u32], t: usize) -> Self {
        let mut fitted = Vec::with_capacity(t);
        if tokens.len() >= t {
            fitted.extend_from_slice(&tokens[tokens.len() - t..]);
        } else {
            fitted.resize(t - tokens.len(), PAD_TOKEN);
            fitted.extend_from_slice(tokens);
        }
        TokenSequence {
            entity_id,
            tokens: fitted,
        }
    }
}

/// Fixed-length summary of a sequence, fed to the fusion layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector {
    pub values: DenseVector,
}

/// Gate parameters of one LSTM cell. Each matrix is hidden_dim ×
/// (embedding_dim + hidden_dim) and acts on the concatenation [x_t; h_prev].
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub w_i: DenseMatrix,
    pub b_i: DenseVector,
    pub w_f: DenseMatrix,
    pub b_f: DenseVector,
    pub w_o: DenseMatrix,
    pub b_o: DenseVector,
    pub w_g: DenseMatrix,
    pub b_g: DenseVector,
}

impl LstmCell {
    fn zeros(hidden: usize, input: usize) -> Self {
        let z = || DenseMatrix::zeros(hidden, input + hidden);
        LstmCell {
            w_i: z(),
            b_i: DenseVector::zeros(hidden),
            w_f: z(),
            b_f: DenseVector::zeros(hidden),
            w_o: z(),
            b_o: DenseVector::zeros(hidden),
            w_g: z(),
            b_g: DenseVector::zeros(hidden),
        }
    }

    fn glorot(hidden: usize, input: usize, rng: &mut SeededRng) -> Self {
        let mut cell = LstmCell::zeros(hidden, input);
        // Draw order: i, f, o, g — row-major within each matrix.
        for w in [&mut cell.w_i, &mut cell.w_f, &mut cell.w_o, &mut cell.w_g] {
            let limit = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
            for v in w.as_mut_slice() {
                *v = rng.uniform(-limit, limit);
            }
        }
        cell
    }

    fn norm_sq(&self) -> f64 {
        self.w_i.frobenius_sq()
            + self.b_i.norm_sq()
            + self.w_f.frobenius_sq()
            + self.b_f.norm_sq()
            + self.w_o.frobenius_sq()
            + self.b_o.norm_sq()
            + self.w_g.frobenius_sq()
            + self.b_g.norm_sq()
    }

    fn add_scaled(&mut self, other: &LstmCell, s: f64) {
        self.w_i.add_scaled(&other.w_i, s);
        self.b_i.add_scaled(&other.b_i, s);
        self.w_f.add_scaled(&other.w_f, s);
        self.b_f.add_scaled(&other.b_f, s);
        self.w_o.add_scaled(&other.w_o, s);
        self.b_o.add_scaled(&other.b_o, s);
        self.w_g.add_scaled(&other.w_g, s);
        self.b_g.add_scaled(&other.b_g, s);
    }

    fn scale(&mut self, s: f64) {
        self.w_i.scale(s);
        self.b_i.scale(s);
        self.w_f.scale(s);
        self.b_f.scale(s);
        self.w_o.scale(s);
        self.b_o.scale(s);
        self.w_g.scale(s);
        self.b_g.scale(s);
    }

    fn is_finite(&self) -> bool {
        self.w_i.is_finite()
            && self.b_i.is_finite()
            && self.w_f.is_finite()
            && self.b_f.is_finite()
            && self.w_o.is_finite()
            && self.b_o.is_finite()
            && self.w_g.is_finite()
            && self.b_g.is_finite()
    }
}

/// All parameters of one sequential component. The same struct doubles as a
/// gradient buffer (identical shapes).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// vocab_size × embedding_dim lookup table.
    pub embedding: DenseMatrix,
    pub encoder: LstmCell,
    pub decoder: LstmCell,
    /// Context map: context = tanh(w_ctx · h_T + b_ctx), hidden × hidden.
    pub w_ctx: DenseMatrix,
    pub b_ctx: DenseVector,
    /// Output projection to token logits, vocab × hidden.
    pub w_proj: DenseMatrix,
    pub b_proj: DenseVector,
}

impl LstmParams {
    pub fn zeros(spec: &SequenceSpec) -> Result<Self> {
        spec.validate()?;
        Ok(LstmParams {
            embedding: DenseMatrix::zeros(spec.vocab_size, spec.embedding_dim),
            encoder: LstmCell::zeros(spec.hidden_dim, spec.embedding_dim),
            decoder: LstmCell::zeros(spec.hidden_dim, spec.embedding_dim),
            w_ctx: DenseMatrix::zeros(spec.hidden_dim, spec.hidden_dim),
            b_ctx: DenseVector::zeros(spec.hidden_dim),
            w_proj: DenseMatrix::zeros(spec.vocab_size, spec.hidden_dim),
            b_proj: DenseVector::zeros(spec.vocab_size),
        })
    }

    /// Uniform ±sqrt(6/(fan_in+fan_out)) on every matrix, zero biases.
    /// Draw order: embedding, encoder gates, decoder gates, context map,
    /// projection.
    pub fn init(spec: &SequenceSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let mut p = LstmParams::zeros(spec)?;
        let limit = (6.0 / (spec.vocab_size + spec.embedding_dim) as f64).sqrt();
        for v in p.embedding.as_mut_slice() {
            *v = rng.uniform(-limit, limit);
        }
        p.encoder = LstmCell::glorot(spec.hidden_dim, spec.embedding_dim, rng);
        p.decoder = LstmCell::glorot(spec.hidden_dim, spec.embedding_dim, rng);
        let limit = (6.0 / (2 * spec.hidden_dim) as f64).sqrt();
        for v in p.w_ctx.as_mut_slice() {
            *v = rng.uniform(-limit, limit);
        }
        let limit = (6.0 / (spec.vocab_size + spec.hidden_dim) as f64).sqrt();
        for v in p.w_proj.as_mut_slice() {
            *v = rng.uniform(-limit, limit);
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.embedding.scale(0.0);
        z.encoder.scale(0.0);
        z.decoder.scale(0.0);
        z.w_ctx.scale(0.0);
        z.b_ctx.scale(0.0);
        z.w_proj.scale(0.0);
        z.b_proj.scale(0.0);
        z
    }

    pub fn norm_sq(&self) -> f64 {
        self.embedding.frobenius_sq()
            + self.encoder.norm_sq()
            + self.decoder.norm_sq()
            + self.w_ctx.frobenius_sq()
            + self.b_ctx.norm_sq()
            + self.w_proj.frobenius_sq()
            + self.b_proj.norm_sq()
    }

    pub fn add_scaled(&mut self, other: &LstmParams, s: f64) {
        self.embedding.add_scaled(&other.embedding, s);
        self.encoder.add_scaled(&other.encoder, s);
        self.decoder.add_scaled(&other.decoder, s);
        self.w_ctx.add_scaled(&other.w_ctx, s);
        self.b_ctx.add_scaled(&other.b_ctx, s);
        self.w_proj.add_scaled(&other.w_proj, s);
        self.b_proj.add_scaled(&other.b_proj, s);
    }

    pub fn scale(&mut self, s: f64) {
        self.embedding.scale(s);
        self.encoder.scale(s);
        self.decoder.scale(s);
        self.w_ctx.scale(s);
        self.b_ctx.scale(s);
        self.w_proj.scale(s);
        self.b_proj.scale(s);
    }

    /// θ ← θ − lr · g
    pub fn apply_step(&mut self, grads: &LstmParams, lr: f64) {
        self.add_scaled(grads, -lr);
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.is_finite()
            && self.encoder.is_finite()
            && self.decoder.is_finite()
            && self.w_ctx.is_finite()
            && self.b_ctx.is_finite()
            && self.w_proj.is_finite()
            && self.b_proj.is_finite()
    }

    fn embed(&self, spec: &SequenceSpec, token: u32) -> Result<DenseVector> {
        if token as usize >= spec.vocab_size {
            return Err(DhaError::TokenOutOfVocab {
                token,
                vocab: spec.vocab_size,
            });
        }
        Ok(self.embedding.row_vector(token as usize))
    }
}

/// Everything one LSTM step produced, kept for backpropagation through time.
#[derive(Debug, Clone)]
pub struct StepCache {
    /// Concatenated [x_t; h_prev].
    z: DenseVector,
    i: DenseVector,
    f: DenseVector,
    o: DenseVector,
    g: DenseVector,
    c_prev: DenseVector,
    c: DenseVector,
    tanh_c: DenseVector,
    h: DenseVector,
}

fn step_full(
    cell: &LstmCell,
    x: &DenseVector,
    h_prev: &DenseVector,
    c_prev: &DenseVector,
) -> Result<StepCache> {
    let hidden = h_prev.dim();
    if cell.w_i.cols() != x.dim() + hidden {
        return Err(DhaError::DimensionMismatch(format!(
            "lstm step: gate width {} vs inputs {}+{}",
            cell.w_i.cols(),
            x.dim(),
            hidden
        )));
    }
    if c_prev.dim() != hidden {
        return Err(DhaError::DimensionMismatch(format!(
            "lstm step: c_prev dim {} vs hidden {}",
            c_prev.dim(),
            hidden
        )));
    }
    let mut z = Vec::with_capacity(x.dim() + hidden);
    z.extend_from_slice(x.as_slice());
    z.extend_from_slice(h_prev.as_slice());
    let z = DenseVector::from_vec(z);

    let gate = |w: &DenseMatrix, b: &DenseVector, act: ActivationKind| -> Result<DenseVector> {
        let mut pre = w.matvec(&z)?;
        pre.add_scaled(b, 1.0);
        Ok(DenseVector::from_vec(
            pre.as_slice()
                .iter()
                .map(|&v| act.apply_scalar(v))
                .collect(),
        ))
    };
    let i = gate(&cell.w_i, &cell.b_i, ActivationKind::Sigmoid)?;
    let f = gate(&cell.w_f, &cell.b_f, ActivationKind::Sigmoid)?;
    let o = gate(&cell.w_o, &cell.b_o, ActivationKind::Sigmoid)?;
    let g = gate(&cell.w_g, &cell.b_g, ActivationKind::Tanh)?;

    let mut c = DenseVector::zeros(hidden);
    for k in 0..hidden {
        c[k] = f[k] * c_prev[k] + i[k] * g[k];
    }
    let tanh_c = DenseVector::from_vec(c.as_slice().iter().map(|&v| v.tanh()).collect());
    let mut h = DenseVector::zeros(hidden);
    for k in 0..hidden {
        h[k] = o[k] * tanh_c[k];
    }
    Ok(StepCache {
        z,
        i,
        f,
        o,
        g,
        c_prev: c_prev.clone(),
        c,
        tanh_c,
        h,
    })
}

/// One LSTM cell update: gates i, f, o are sigmoid affines of [x; h_prev],
/// the candidate g is a tanh affine; c = f⊙c_prev + i⊙g, h = o⊙tanh(c).
pub fn lstm_step(
    cell: &LstmCell,
    x: &DenseVector,
    h_prev: &DenseVector,
    c_prev: &DenseVector,
) -> Result<(DenseVector, DenseVector)> {
    let cache = step_full(cell, x, h_prev, c_prev)?;
    Ok((cache.h, cache.c))
}

/// Backward through one step. `dh`/`dc` arrive from above and the future;
/// returns (dx, dh_prev, dc_prev) and accumulates parameter grads into `g`.
fn step_backward(
    cell: &LstmCell,
    cache: &StepCache,
    dh: &DenseVector,
    dc_in: &DenseVector,
    input_dim: usize,
    g: &mut LstmCell,
) -> (DenseVector, DenseVector, DenseVector) {
    let hidden = dh.dim();
    let mut dc = dc_in.clone();
    let mut d_o = DenseVector::zeros(hidden);
    for k in 0..hidden {
        d_o[k] = dh[k] * cache.tanh_c[k];
        dc[k] += dh[k] * cache.o[k] * (1.0 - cache.tanh_c[k] * cache.tanh_c[k]);
    }
    let mut d_i = DenseVector::zeros(hidden);
    let mut d_g = DenseVector::zeros(hidden);
    let mut d_f = DenseVector::zeros(hidden);
    let mut dc_prev = DenseVector::zeros(hidden);
    for k in 0..hidden {
        d_i[k] = dc[k] * cache.g[k];
        d_g[k] = dc[k] * cache.i[k];
        d_f[k] = dc[k] * cache.c_prev[k];
        dc_prev[k] = dc[k] * cache.f[k];
    }
    // Through the gate nonlinearities.
    let mut dz = DenseVector::zeros(cache.z.dim());
    let mut gate_back = |d_gate: &DenseVector,
                         gate_out: &DenseVector,
                         act: ActivationKind,
                         w: &DenseMatrix,
                         gw: &mut DenseMatrix,
                         gb: &mut DenseVector| {
        let delta = DenseVector::from_vec(
            d_gate
                .as_slice()
                .iter()
                .zip(gate_out.as_slice())
                .map(|(&d, &y)| d * act.derivative_from_output(y))
                .collect(),
        );
        gw.add_outer(1.0, &delta, &cache.z);
        gb.add_scaled(&delta, 1.0);
        let back = w.matvec_transpose(&delta).expect("shapes fixed by cell");
        dz.add_scaled(&back, 1.0);
    };
    gate_back(
        &d_i,
        &cache.i,
        ActivationKind::Sigmoid,
        &cell.w_i,
        &mut g.w_i,
        &mut g.b_i,
    );
    gate_back(
        &d_f,
        &cache.f,
        ActivationKind::Sigmoid,
        &cell.w_f,
        &mut g.w_f,
        &mut g.b_f,
    );
    gate_back(
        &d_o,
        &cache.o,
        ActivationKind::Sigmoid,
        &cell.w_o,
        &mut g.w_o,
        &mut g.b_o,
    );
    gate_back(
        &d_g,
        &cache.g,
        ActivationKind::Tanh,
        &cell.w_g,
        &mut g.w_g,
        &mut g.b_g,
    );

    let dx = DenseVector::from_vec(dz.as_slice()[..input_dim].to_vec());
    let dh_prev = DenseVector::from_vec(dz.as_slice()[input_dim..].to_vec());
    (dx, dh_prev, dc_prev)
}

/// Numerically stable softmax.
pub fn softmax(logits: &DenseVector) -> DenseVector {
    let max = logits
        .as_slice()
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.as_slice().iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    DenseVector::from_vec(exps.into_iter().map(|e| e / sum).collect())
}

/// Full forward state of one sequence pass (encode, project, decode, score).
#[derive(Debug, Clone)]
pub struct SeqCache {
    pub enc_steps: Vec<StepCache>,
    pub enc_tokens: Vec<u32>,
    pub h_t: DenseVector,
    /// Post-tanh context vector.
    pub context: DenseVector,
    pub dec_steps: Vec<StepCache>,
    /// Teacher-forced decoder input token per step (start token first).
    pub dec_inputs: Vec<u32>,
    pub probs: Vec<DenseVector>,
    pub targets: Vec<u32>,
    /// Mean negative log-likelihood over non-pad target positions.
    pub nll: f64,
}

fn check_len(spec: &SequenceSpec, seq: &TokenSequence) -> Result<()> {
    if seq.tokens.len() != spec.time_steps {
        return Err(DhaError::DimensionMismatch(format!(
            "sequence for entity {} has {} tokens, spec says {}",
            seq.entity_id,
            seq.tokens.len(),
            spec.time_steps
        )));
    }
    Ok(())
}

fn encode_full(
    params: &LstmParams,
    spec: &SequenceSpec,
    seq: &TokenSequence,
) -> Result<(Vec<StepCache>, DenseVector, DenseVector)> {
    check_len(spec, seq)?;
    let mut h = DenseVector::zeros(spec.hidden_dim);
    let mut c = DenseVector::zeros(spec.hidden_dim);
    let mut steps = Vec::with_capacity(spec.time_steps);
    for &tok in &seq.tokens {
        let x = params.embed(spec, tok)?;
        let cache = step_full(&params.encoder, &x, &h, &c)?;
        h = cache.h.clone();
        c = cache.c.clone();
        steps.push(cache);
    }
    let mut pre = params.w_ctx.matvec(&h)?;
    pre.add_scaled(&params.b_ctx, 1.0);
    let context = DenseVector::from_vec(pre.as_slice().iter().map(|&v| v.tanh()).collect());
    Ok((steps, h, context))
}

/// Run the encoder and context map; returns the final hidden state h_T and
/// the context vector tanh(W·h_T + b).
pub fn encode_sequence(
    params: &LstmParams,
    spec: &SequenceSpec,
    seq: &TokenSequence,
) -> Result<(DenseVector, ContextVector)> {
    let (_, h_t, context) = encode_full(params, spec, seq)?;
    Ok((h_t, ContextVector { values: context }))
}

struct DecodeOut {
    steps: Vec<StepCache>,
    inputs: Vec<u32>,
    probs: Vec<DenseVector>,
    nll: f64,
}

fn decode_full(
    params: &LstmParams,
    spec: &SequenceSpec,
    context: &DenseVector,
    targets: &[u32],
) -> Result<DecodeOut> {
    if context.dim() != spec.hidden_dim {
        return Err(DhaError::DimensionMismatch(format!(
            "context dim {} vs hidden_dim {}",
            context.dim(),
            spec.hidden_dim
        )));
    }
    let mut h = context.clone();
    let mut c = DenseVector::zeros(spec.hidden_dim);
    let mut steps = Vec::with_capacity(targets.len());
    let mut inputs = Vec::with_capacity(targets.len());
    let mut probs = Vec::with_capacity(targets.len());
    let mut total = 0.0;
    let mut counted = 0usize;
    for (t, &target) in targets.iter().enumerate() {
        if target as usize >= spec.vocab_size {
            return Err(DhaError::TokenOutOfVocab {
                token: target,
                vocab: spec.vocab_size,
            });
        }
        let input_tok = if t == 0 { START_TOKEN } else { targets[t - 1] };
        let x = params.embed(spec, input_tok)?;
        let cache = step_full(&params.decoder, &x, &h, &c)?;
        h = cache.h.clone();
        c = cache.c.clone();

        let mut logits = params.w_proj.matvec(&h)?;
        logits.add_scaled(&params.b_proj, 1.0);
        let p = softmax(&logits);
        if target != PAD_TOKEN {
            // -log p[target], computed from the stable softmax.
            total += -p[target as usize].max(f64::MIN_POSITIVE).ln();
            counted += 1;
        }
        steps.push(cache);
        inputs.push(input_tok);
        probs.push(p);
    }
    let nll = if counted == 0 {
        0.0
    } else {
        total / counted as f64
    };
    Ok(DecodeOut {
        steps,
        inputs,
        probs,
        nll,
    })
}

/// Teacher-forced decoding loss: the decoder starts from the context vector,
/// consumes the previous target token at each step (a reserved start token
/// first), and is scored by mean next-token negative log-likelihood over all
/// non-pad positions.
pub fn decode_nll(
    params: &LstmParams,
    spec: &SequenceSpec,
    context: &ContextVector,
    targets: &TokenSequence,
) -> Result<f64> {
    check_len(spec, targets)?;
    Ok(decode_full(params, spec, &context.values, &targets.tokens)?.nll)
}

/// Encode a sequence and decode it back onto itself (sequence autoencoding),
/// caching all state for [`sequence_backward`].
pub fn seq_forward(
    params: &LstmParams,
    spec: &SequenceSpec,
    seq: &TokenSequence,
) -> Result<SeqCache> {
    let (enc_steps, h_t, context) = encode_full(params, spec, seq)?;
    let dec = decode_full(params, spec, &context, &seq.tokens)?;
    Ok(SeqCache {
        enc_steps,
        enc_tokens: seq.tokens.clone(),
        h_t,
        context,
        dec_steps: dec.steps,
        dec_inputs: dec.inputs,
        probs: dec.probs,
        targets: seq.tokens.clone(),
        nll: dec.nll,
    })
}

/// Backpropagation through time over the whole pipeline.
///
/// Combines the NLL path (weighted by `nll_weight`, λ_m or λ_n) with an
/// externally supplied gradient arriving at the context vector (the fusion /
/// anchor path), exactly as the autoencoder backward combines its two paths.
/// `weight_decay` adds λ_w · θ across every tensor; batch-level callers pass
/// 0 and apply decay once per batch.
pub fn sequence_backward(
    params: &LstmParams,
    spec: &SequenceSpec,
    cache: &SeqCache,
    context_grad: Option<&DenseVector>,
    nll_weight: f64,
    weight_decay: f64,
) -> Result<LstmParams> {
    if cache.enc_steps.len() != spec.time_steps || cache.dec_steps.len() != spec.time_steps {
        return Err(DhaError::ShapeMismatch(format!(
            "cache has {} encoder / {} decoder steps, spec says {}",
            cache.enc_steps.len(),
            cache.dec_steps.len(),
            spec.time_steps
        )));
    }
    if let Some(gc) = context_grad {
        if gc.dim() != spec.hidden_dim {
            return Err(DhaError::ShapeMismatch(format!(
                "context gradient dim {} vs hidden_dim {}",
                gc.dim(),
                spec.hidden_dim
            )));
        }
    }
    let mut grads = params.zeros_like();
    let t_steps = spec.time_steps;
    let non_pad = cache.targets.iter().filter(|&&t| t != PAD_TOKEN).count();

    // ---- decoder BPTT ----
    let mut dh_next = DenseVector::zeros(spec.hidden_dim);
    let mut dc_next = DenseVector::zeros(spec.hidden_dim);
    for t in (0..t_steps).rev() {
        let mut dh = dh_next.clone();
        let target = cache.targets[t];
        if target != PAD_TOKEN && non_pad > 0 && nll_weight != 0.0 {
            let scale = nll_weight / non_pad as f64;
            let p = &cache.probs[t];
            let mut dlogits = DenseVector::zeros(spec.vocab_size);
            for k in 0..spec.vocab_size {
                let onehot = if k == target as usize { 1.0 } else { 0.0 };
                dlogits[k] = scale * (p[k] - onehot);
            }
            grads.w_proj.add_outer(1.0, &dlogits, &cache.dec_steps[t].h);
            grads.b_proj.add_scaled(&dlogits, 1.0);
            let dh_loss = params.w_proj.matvec_transpose(&dlogits)?;
            dh.add_scaled(&dh_loss, 1.0);
        }
        let (dx, dh_prev, dc_prev) = step_backward(
            &params.decoder,
            &cache.dec_steps[t],
            &dh,
            &dc_next,
            spec.embedding_dim,
            &mut grads.decoder,
        );
        let row = cache.dec_inputs[t] as usize;
        for (j, &v) in dx.as_slice().iter().enumerate() {
            let cur = grads.embedding.get(row, j);
            grads.embedding.set(row, j, cur + v);
        }
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    // dh_next now holds the gradient w.r.t. decoder h_0 = context.

    // ---- context map ----
    let mut g_ctx = dh_next;
    if let Some(gc) = context_grad {
        g_ctx.add_scaled(gc, 1.0);
    }
    let dpre = DenseVector::from_vec(
        g_ctx
            .as_slice()
            .iter()
            .zip(cache.context.as_slice())
            .map(|(&g, &y)| g * (1.0 - y * y))
            .collect(),
    );
    grads.w_ctx.add_outer(1.0, &dpre, &cache.h_t);
    grads.b_ctx.add_scaled(&dpre, 1.0);
    let dh_t = params.w_ctx.matvec_transpose(&dpre)?;

    // ---- encoder BPTT ----
    let mut dh_next = dh_t;
    let mut dc_next = DenseVector::zeros(spec.hidden_dim);
    for t in (0..t_steps).rev() {
        let (dx, dh_prev, dc_prev) = step_backward(
            &params.encoder,
            &cache.enc_steps[t],
            &dh_next,
            &dc_next,
            spec.embedding_dim,
            &mut grads.encoder,
        );
        let row = cache.enc_tokens[t] as usize;
        for (j, &v) in dx.as_slice().iter().enumerate() {
            let cur = grads.embedding.get(row, j);
            grads.embedding.set(row, j, cur + v);
        }
        dh_next = dh_prev;
        dc_next = dc_prev;
    }

    if weight_decay != 0.0 {
        grads.add_scaled(params, weight_decay);
    }
    Ok(grads)
}
