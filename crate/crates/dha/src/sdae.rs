//! Stacked denoising autoencoders for flat feature vectors.
//!
//! Each non-sequential information source gets one of these: an even stack of
//! affine+activation layers that narrows to a middle code of `mid_dim` units
//! and widens back out symmetrically. Layer widths follow a middle-outward
//! rule — starting at `mid_dim`, each step toward the data adds
//! `width_increment` units, clamped at `input_dim`.
//!
//! Denoising means the encoder sees a corrupted copy of the input (random
//! coordinates zeroed, never rescaled) while the reconstruction target stays
//! clean. The middle code is what the fusion layer consumes.

use crate::error::{DhaError, Result};
use crate::math::{ActivationKind, DenseMatrix, DenseVector};
use crate::rng::{mask_corrupt, SeededRng};

/// Architecture of one autoencoder component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSpec {
    pub component_id: u32,
    pub input_dim: usize,
    /// Total affine layers, encoder plus decoder. Must be even and ≥ 2.
    pub total_layers: usize,
    /// Units at the middle (code) layer.
    pub mid_dim: usize,
    /// Units added per layer moving from the middle toward the data.
    pub width_increment: usize,
    pub activation: ActivationKind,
    /// Activation of the final reconstruction layer.
    pub output_activation: ActivationKind,
    /// Probability of zeroing each input coordinate during denoising.
    pub corruption: f64,
}

impl ComponentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.total_layers < 2 || !self.total_layers.is_multiple_of(2) {
            return Err(DhaError::ConfigInvalid(format!(
                "component {}: total_layers must be even and >= 2, got {}",
                self.component_id, self.total_layers
            )));
        }
        if self.mid_dim == 0 {
            return Err(DhaError::ConfigInvalid(format!(
                "component {}: mid_dim must be >= 1",
                self.component_id
            )));
        }
        if self.input_dim == 0 {
            return Err(DhaError::ConfigInvalid(format!(
                "component {}: input_dim must be >= 1",
                self.component_id
            )));
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            return Err(DhaError::ConfigInvalid(format!(
                "component {}: corruption rate {} outside [0, 1]",
                self.component_id, self.corruption
            )));
        }
        Ok(())
    }

    pub fn encoder_layers(&self) -> usize {
        self.total_layers / 2
    }

    /// Full width chain, length total_layers + 1: input, every hidden width,
    /// output. The decoder mirrors the encoder.
    pub fn layer_widths(&self) -> Vec<usize> {
        let e = self.encoder_layers();
        let width_at = |steps_from_mid: usize| {
            (self.mid_dim + steps_from_mid * self.width_increment).min(self.input_dim)
        };
        let mut widths = Vec::with_capacity(self.total_layers + 1);
        widths.push(self.input_dim);
        for l in 1..=e {
            if l == e {
                widths.push(self.mid_dim);
            } else {
                widths.push(width_at(e - l));
            }
        }
        for l in 1..=e {
            if l == e {
                widths.push(self.input_dim);
            } else {
                widths.push(width_at(l));
            }
        }
        widths
    }

    fn layer_activation(&self, layer: usize) -> ActivationKind {
        if layer + 1 == self.total_layers {
            self.output_activation
        } else {
            self.activation
        }
    }
}

/// One affine layer: y = W x + b, with W stored out_dim × in_dim.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: DenseMatrix,
    pub b: DenseVector,
}

impl Affine {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Affine {
            w: DenseMatrix::zeros(out_dim, in_dim),
            b: DenseVector::zeros(out_dim),
        }
    }

    /// Uniform init on ±sqrt(6 / (fan_in + fan_out)), zero biases.
    /// Weight entries are drawn row-major so the stream layout is stable.
    pub fn glorot(out_dim: usize, in_dim: usize, rng: &mut SeededRng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut w = DenseMatrix::zeros(out_dim, in_dim);
        for v in w.as_mut_slice() {
            *v = rng.uniform(-limit, limit);
        }
        Affine {
            w,
            b: DenseVector::zeros(out_dim),
        }
    }

    pub fn apply(&self, x: &DenseVector) -> Result<DenseVector> {
        let mut y = self.w.matvec(x)?;
        y.add_scaled(&self.b, 1.0);
        Ok(y)
    }

    pub fn norm_sq(&self) -> f64 {
        self.w.frobenius_sq() + self.b.norm_sq()
    }
}

/// All layers of one autoencoder, encoder first then decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SdaeParams {
    pub layers: Vec<Affine>,
}

impl SdaeParams {
    pub fn init(spec: &ComponentSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let widths = spec.layer_widths();
        let layers = widths
            .windows(2)
            .map(|w| Affine::glorot(w[1], w[0], rng))
            .collect();
        Ok(SdaeParams { layers })
    }

    pub fn zeros(spec: &ComponentSpec) -> Result<Self> {
        spec.validate()?;
        let widths = spec.layer_widths();
        let layers = widths
            .windows(2)
            .map(|w| Affine::zeros(w[1], w[0]))
            .collect();
        Ok(SdaeParams { layers })
    }

    /// Sum of squared weights and biases, the weight-decay contribution.
    pub fn norm_sq(&self) -> f64 {
        self.layers.iter().map(Affine::norm_sq).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.is_finite() && l.b.is_finite())
    }

    /// θ ← θ − lr · g
    pub fn apply_step(&mut self, grads: &SdaeGrads, lr: f64) {
        debug_assert_eq!(self.layers.len(), grads.layers.len());
        for (layer, grad) in self.layers.iter_mut().zip(&grads.layers) {
            layer.w.add_scaled(&grad.w, -lr);
            layer.b.add_scaled(&grad.b, -lr);
        }
    }
}

/// Activations of one full forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// The input actually fed to layer 1 (corrupted or clean).
    pub input: DenseVector,
    /// Post-activation output of every layer, encoder then decoder.
    pub activations: Vec<DenseVector>,
}

impl ForwardCache {
    /// The middle code h_{c, L/2}.
    pub fn latent(&self) -> &DenseVector {
        &self.activations[self.activations.len() / 2 - 1]
    }

    pub fn reconstruction(&self) -> &DenseVector {
        self.activations.last().expect("non-empty network")
    }
}

/// Run all layers on `x` (already corrupted if the caller wants denoising),
/// caching every activation.
pub fn forward(params: &SdaeParams, spec: &ComponentSpec, x: &DenseVector) -> Result<ForwardCache> {
    if x.dim() != spec.input_dim {
        return Err(DhaError::DimensionMismatch(format!(
            "component {}: input dim {} vs spec.input_dim {}",
            spec.component_id,
            x.dim(),
            spec.input_dim
        )));
    }
    let mut activations = Vec::with_capacity(params.layers.len());
    let mut cur = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let pre = layer.apply(&cur)?;
        let act = spec.layer_activation(l);
        cur = DenseVector::from_vec(
            pre.as_slice()
                .iter()
                .map(|&v| act.apply_scalar(v))
                .collect(),
        );
        activations.push(cur.clone());
    }
    Ok(ForwardCache {
        input: x.clone(),
        activations,
    })
}

/// Encoder-only pass. When `rng` is given the input is first corrupted at
/// `spec.corruption`; without it the pass is deterministic. Returns every
/// encoder activation, middle code last.
pub fn encode(
    params: &SdaeParams,
    spec: &ComponentSpec,
    x: &DenseVector,
    rng: Option<&mut SeededRng>,
) -> Result<Vec<DenseVector>> {
    if x.dim() != spec.input_dim {
        return Err(DhaError::DimensionMismatch(format!(
            "component {}: input dim {} vs spec.input_dim {}",
            spec.component_id,
            x.dim(),
            spec.input_dim
        )));
    }
    let h0 = match rng {
        Some(r) => mask_corrupt(r, x, spec.corruption),
        None => x.clone(),
    };
    let e = spec.encoder_layers();
    let mut hs = Vec::with_capacity(e);
    let mut cur = h0;
    for (l, layer) in params.layers.iter().take(e).enumerate() {
        let pre = layer.apply(&cur)?;
        let act = spec.layer_activation(l);
        cur = DenseVector::from_vec(
            pre.as_slice()
                .iter()
                .map(|&v| act.apply_scalar(v))
                .collect(),
        );
        hs.push(cur.clone());
    }
    Ok(hs)
}

/// Decoder-only pass from a middle code to a reconstruction.
pub fn decode(params: &SdaeParams, spec: &ComponentSpec, mid: &DenseVector) -> Result<DenseVector> {
    if mid.dim() != spec.mid_dim {
        return Err(DhaError::DimensionMismatch(format!(
            "component {}: mid dim {} vs spec.mid_dim {}",
            spec.component_id,
            mid.dim(),
            spec.mid_dim
        )));
    }
    let e = spec.encoder_layers();
    let mut cur = mid.clone();
    for (l, layer) in params.layers.iter().enumerate().skip(e) {
        let pre = layer.apply(&cur)?;
        let act = spec.layer_activation(l);
        cur = DenseVector::from_vec(
            pre.as_slice()
                .iter()
                .map(|&v| act.apply_scalar(v))
                .collect(),
        );
    }
    Ok(cur)
}

/// Mean over coordinates of the squared difference. Averaging (rather than
/// summing) keeps the reconstruction weights comparable across components
/// with different input widths.
pub fn reconstruction_loss(s: &DenseVector, s_bar: &DenseVector) -> Result<f64> {
    if s.dim() != s_bar.dim() {
        return Err(DhaError::DimensionMismatch(format!(
            "reconstruction_loss: dims {} vs {}",
            s.dim(),
            s_bar.dim()
        )));
    }
    let d = s.dim() as f64;
    let sq: f64 = s
        .as_slice()
        .iter()
        .zip(s_bar.as_slice())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sq / d)
}

/// Per-layer parameter gradients, same shapes as the layers.
#[derive(Debug, Clone)]
pub struct SdaeGrads {
    pub layers: Vec<Affine>,
}

impl SdaeGrads {
    pub fn zeros_like(params: &SdaeParams) -> Self {
        SdaeGrads {
            layers: params
                .layers
                .iter()
                .map(|l| Affine::zeros(l.w.rows(), l.w.cols()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &SdaeGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.add_scaled(&b.w, 1.0);
            a.b.add_scaled(&b.b, 1.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.w.scale(s);
            l.b.scale(s);
        }
    }

    /// Add λ_w · θ to every layer gradient.
    pub fn add_decay(&mut self, params: &SdaeParams, weight_decay: f64) {
        if weight_decay == 0.0 {
            return;
        }
        for (g, p) in self.layers.iter_mut().zip(&params.layers) {
            g.w.add_scaled(&p.w, weight_decay);
            g.b.add_scaled(&p.b, weight_decay);
        }
    }
}

/// Backpropagate through a cached pass.
///
/// Two loss paths are combined: a weighted mean-squared reconstruction error
/// at the output (`recon` = clean target and its weight λ_m or λ_n), and an
/// externally computed gradient arriving at the middle code (`mid_grad`, the
/// anchor/fusion path). Either may be absent. `weight_decay` adds λ_w · θ;
/// batch-level callers pass 0 here and add decay once per batch instead.
pub fn backward(
    params: &SdaeParams,
    spec: &ComponentSpec,
    cache: &ForwardCache,
    mid_grad: Option<&DenseVector>,
    recon: Option<(&DenseVector, f64)>,
    weight_decay: f64,
) -> Result<SdaeGrads> {
    let n_layers = params.layers.len();
    if cache.activations.len() != n_layers {
        return Err(DhaError::ShapeMismatch(format!(
            "cache has {} activations for {} layers",
            cache.activations.len(),
            n_layers
        )));
    }
    let mid_idx = spec.encoder_layers() - 1;

    // Gradient w.r.t. the output activation.
    let out = cache.reconstruction();
    let mut g_act = match recon {
        Some((target, weight)) => {
            if target.dim() != out.dim() {
                return Err(DhaError::ShapeMismatch(format!(
                    "reconstruction target dim {} vs output dim {}",
                    target.dim(),
                    out.dim()
                )));
            }
            let scale = 2.0 * weight / out.dim() as f64;
            DenseVector::from_vec(
                out.as_slice()
                    .iter()
                    .zip(target.as_slice())
                    .map(|(&o, &t)| scale * (o - t))
                    .collect(),
            )
        }
        None => DenseVector::zeros(out.dim()),
    };

    let mut grads = SdaeGrads::zeros_like(params);
    for l in (0..n_layers).rev() {
        if l == mid_idx {
            if let Some(mg) = mid_grad {
                if mg.dim() != g_act.dim() {
                    return Err(DhaError::ShapeMismatch(format!(
                        "mid gradient dim {} vs code dim {}",
                        mg.dim(),
                        g_act.dim()
                    )));
                }
                g_act.add_scaled(mg, 1.0);
            }
        }
        let act = spec.layer_activation(l);
        let y = &cache.activations[l];
        // δ = dL/d(pre-activation)
        let delta = DenseVector::from_vec(
            g_act
                .as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(&g, &yv)| g * act.derivative_from_output(yv))
                .collect(),
        );
        let a_in = if l == 0 {
            &cache.input
        } else {
            &cache.activations[l - 1]
        };
        grads.layers[l].w.add_outer(1.0, &delta, a_in);
        grads.layers[l].b.add_scaled(&delta, 1.0);
        if l > 0 {
            g_act = params.layers[l].w.matvec_transpose(&delta)?;
        }
    }
    grads.add_decay(params, weight_decay);
    Ok(grads)
}

/// Feature rows for one component: one fixed-length vector per entity, in
/// entity order.
#[derive(Debug, Clone)]
pub struct ComponentInput {
    pub component_id: u32,
    pub rows: DenseMatrix,
}

impl ComponentInput {
    pub fn new(component_id: u32, rows: DenseMatrix, spec: &ComponentSpec) -> Result<Self> {
        if rows.cols() != spec.input_dim {
            return Err(DhaError::DimensionMismatch(format!(
                "component {}: data rows have dim {}, spec.input_dim is {}",
                component_id,
                rows.cols(),
                spec.input_dim
            )));
        }
        Ok(ComponentInput { component_id, rows })
    }
}

/// Greedy layerwise pretraining: each (encoder layer, mirrored decoder layer)
/// pair is trained bottom-up as a one-layer denoising autoencoder on the
/// codes produced by the already-trained layers below it. Corruption is
/// re-drawn per row per epoch; the reconstruction target is always clean.
pub fn pretrain_layerwise(
    spec: &ComponentSpec,
    data: &ComponentInput,
    epochs: usize,
    lr: f64,
    batch: usize,
    rng: &mut SeededRng,
) -> Result<SdaeParams> {
    if data.rows.rows() == 0 {
        return Err(DhaError::EmptyData(format!(
            "component {}: no rows to pretrain on",
            spec.component_id
        )));
    }
    if epochs == 0 {
        return Err(DhaError::ConfigInvalid(
            "pretrain epochs must be >= 1".into(),
        ));
    }
    let batch = batch.max(1);
    let mut params = SdaeParams::init(spec, rng)?;
    let e = spec.encoder_layers();
    let n = data.rows.rows();

    // Codes at the current depth, updated as layers finish training.
    let mut codes: Vec<DenseVector> = (0..n).map(|r| data.rows.row_vector(r)).collect();

    for l in 0..e {
        let dec = spec.total_layers - 1 - l;
        let hidden_act = spec.activation;
        let out_act = spec.layer_activation(dec);

        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(batch) {
                let mut g_enc = Affine::zeros(params.layers[l].w.rows(), params.layers[l].w.cols());
                let mut g_dec =
                    Affine::zeros(params.layers[dec].w.rows(), params.layers[dec].w.cols());
                for &row in chunk {
                    let clean = &codes[row];
                    let noisy = mask_corrupt(rng, clean, spec.corruption);

                    let h_pre = params.layers[l].apply(&noisy)?;
                    let h = DenseVector::from_vec(
                        h_pre
                            .as_slice()
                            .iter()
                            .map(|&v| hidden_act.apply_scalar(v))
                            .collect(),
                    );
                    let o_pre = params.layers[dec].apply(&h)?;
                    let o = DenseVector::from_vec(
                        o_pre
                            .as_slice()
                            .iter()
                            .map(|&v| out_act.apply_scalar(v))
                            .collect(),
                    );

                    // d mse / d o, then back through both layers.
                    let scale = 2.0 / o.dim() as f64;
                    let delta_o = DenseVector::from_vec(
                        o.as_slice()
                            .iter()
                            .zip(clean.as_slice())
                            .map(|(&ov, &cv)| {
                                scale * (ov - cv) * out_act.derivative_from_output(ov)
                            })
                            .collect(),
                    );
                    g_dec.w.add_outer(1.0, &delta_o, &h);
                    g_dec.b.add_scaled(&delta_o, 1.0);

                    let g_h = params.layers[dec].w.matvec_transpose(&delta_o)?;
                    let delta_h = DenseVector::from_vec(
                        g_h.as_slice()
                            .iter()
                            .zip(h.as_slice())
                            .map(|(&g, &hv)| g * hidden_act.derivative_from_output(hv))
                            .collect(),
                    );
                    g_enc.w.add_outer(1.0, &delta_h, &noisy);
                    g_enc.b.add_scaled(&delta_h, 1.0);
                }
                let inv = 1.0 / chunk.len() as f64;
                params.layers[l].w.add_scaled(&g_enc.w, -lr * inv);
                params.layers[l].b.add_scaled(&g_enc.b, -lr * inv);
                params.layers[dec].w.add_scaled(&g_dec.w, -lr * inv);
                params.layers[dec].b.add_scaled(&g_dec.b, -lr * inv);
            }
        }

        // Lift codes through the freshly trained layer (clean pass).
        for code in &mut codes {
            let pre = params.layers[l].apply(code)?;
            *code = DenseVector::from_vec(
                pre.as_slice()
                    .iter()
                    .map(|&v| hidden_act.apply_scalar(v))
                    .collect(),
            );
        }
    }
    Ok(params)
}
