//! Fusing per-component codes into one joint latent vector.
//!
//! Every component — an autoencoder's middle code or a sequence context —
//! gets its own projection into the shared d-dimensional space; the fusion
//! layer sums the projections, adds a shared bias, and applies an
//! activation. The result h_{+,0} is the representation the factorization
//! anchors to, and the door through which anchor gradients flow back into
//! every component network.
//!
//! Components are always summed in ascending component id, so the result is
//! bit-identical no matter how callers assembled the latent map.

use std::collections::BTreeMap;

use crate::error::{DhaError, Result};
use crate::math::{ActivationKind, DenseMatrix, DenseVector};
use crate::rng::SeededRng;
use crate::sdae::Affine;

/// The joint latent representation h_{+,0}, dimension d.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLatent {
    pub values: DenseVector,
}

/// Parameters of the fusion stage. The same struct doubles as a gradient
/// buffer. An optional second layer can be stacked on top of h_{+,0}; the
/// factorization always anchors to h_{+,0} itself, and the second layer is
/// trained purely by reconstructing h_{+,0} (treated as a constant target),
/// so it never routes gradient into the components. It is off by default.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// component_id → projection (d × that component's latent dim).
    pub projections: BTreeMap<u32, DenseMatrix>,
    pub bias: DenseVector,
    pub activation: ActivationKind,
    pub extra: Option<Affine>,
}

impl FusionParams {
    /// Glorot-initialize one projection per component (visited in ascending
    /// id order), zero bias, and optionally one extra d × d layer.
    pub fn init(
        component_dims: &BTreeMap<u32, usize>,
        d: usize,
        activation: ActivationKind,
        extra_layer: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if d == 0 {
            return Err(DhaError::ConfigInvalid("fusion dim must be >= 1".into()));
        }
        if component_dims.is_empty() {
            return Err(DhaError::ConfigInvalid(
                "fusion needs at least one component".into(),
            ));
        }
        let mut projections = BTreeMap::new();
        for (&id, &dim) in component_dims {
            projections.insert(id, Affine::glorot(d, dim, rng).w);
        }
        let extra = extra_layer.then(|| Affine::glorot(d, d, rng));
        Ok(FusionParams {
            projections,
            bias: DenseVector::zeros(d),
            activation,
            extra,
        })
    }

    pub fn dim(&self) -> usize {
        self.bias.dim()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for w in z.projections.values_mut() {
            w.scale(0.0);
        }
        z.bias.scale(0.0);
        if let Some(e) = &mut z.extra {
            e.w.scale(0.0);
            e.b.scale(0.0);
        }
        z
    }

    pub fn norm_sq(&self) -> f64 {
        let mut s: f64 = self
            .projections
            .values()
            .map(DenseMatrix::frobenius_sq)
            .sum();
        s += self.bias.norm_sq();
        if let Some(e) = &self.extra {
            s += e.norm_sq();
        }
        s
    }

    pub fn add_scaled(&mut self, other: &FusionParams, scale: f64) {
        for (id, w) in &mut self.projections {
            w.add_scaled(&other.projections[id], scale);
        }
        self.bias.add_scaled(&other.bias, scale);
        if let (Some(a), Some(b)) = (&mut self.extra, &other.extra) {
            a.w.add_scaled(&b.w, scale);
            a.b.add_scaled(&b.b, scale);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in self.projections.values_mut() {
            w.scale(s);
        }
        self.bias.scale(s);
        if let Some(e) = &mut self.extra {
            e.w.scale(s);
            e.b.scale(s);
        }
    }

    /// θ ← θ − lr · g
    pub fn apply_step(&mut self, grads: &FusionParams, lr: f64) {
        self.add_scaled(grads, -lr);
    }

    pub fn is_finite(&self) -> bool {
        self.projections.values().all(DenseMatrix::is_finite)
            && self.bias.is_finite()
            && self
                .extra
                .as_ref()
                .is_none_or(|e| e.w.is_finite() && e.b.is_finite())
    }
}

/// Saved forward state: the component latents that went in, the joint latent,
/// and the extra layer's output when present.
#[derive(Debug, Clone)]
pub struct FuseCache {
    pub inputs: BTreeMap<u32, DenseVector>,
    pub joint: JointLatent,
    pub extra_out: Option<DenseVector>,
}

/// h_{+,0} = f(Σ_c W_c h_c + b), summed over components in ascending id.
pub fn fuse(params: &FusionParams, latents: &BTreeMap<u32, DenseVector>) -> Result<FuseCache> {
    for id in latents.keys() {
        if !params.projections.contains_key(id) {
            return Err(DhaError::DimensionMismatch(format!(
                "latent supplied for unregistered component {id}"
            )));
        }
    }
    let mut pre = params.bias.clone();
    for (&id, w) in &params.projections {
        let h = latents.get(&id).ok_or(DhaError::MissingComponent(id))?;
        if h.dim() != w.cols() {
            return Err(DhaError::DimensionMismatch(format!(
                "component {} latent dim {} vs projection expecting {}",
                id,
                h.dim(),
                w.cols()
            )));
        }
        let proj = w.matvec(h)?;
        pre.add_scaled(&proj, 1.0);
    }
    let joint = DenseVector::from_vec(
        pre.as_slice()
            .iter()
            .map(|&v| params.activation.apply_scalar(v))
            .collect(),
    );
    let extra_out = match &params.extra {
        Some(layer) => {
            let mut p = layer.apply(&joint)?;
            for v in p.as_mut_slice() {
                *v = params.activation.apply_scalar(*v);
            }
            Some(p)
        }
        None => None,
    };
    Ok(FuseCache {
        inputs: latents.clone(),
        joint: JointLatent { values: joint },
        extra_out,
    })
}

/// Mean squared error of the extra layer reproducing h_{+,0}; None when the
/// extra layer is disabled.
pub fn aux_reconstruction_loss(cache: &FuseCache) -> Option<f64> {
    cache.extra_out.as_ref().map(|rec| {
        let h0 = &cache.joint.values;
        let d = h0.dim() as f64;
        rec.as_slice()
            .iter()
            .zip(h0.as_slice())
            .map(|(&r, &h)| (r - h) * (r - h))
            .sum::<f64>()
            / d
    })
}

/// Distribute an upstream gradient on h_{+,0} through the activation and
/// every projection. Returns parameter gradients and the gradient on each
/// component's latent. The extra layer (if any) receives its auxiliary
/// reconstruction gradient here too, against a detached h_{+,0} target.
pub fn fusion_backward(
    params: &FusionParams,
    cache: &FuseCache,
    upstream: &DenseVector,
    weight_decay: f64,
) -> Result<(FusionParams, BTreeMap<u32, DenseVector>)> {
    let d = params.dim();
    if upstream.dim() != d {
        return Err(DhaError::ShapeMismatch(format!(
            "upstream gradient dim {} vs fusion dim {}",
            upstream.dim(),
            d
        )));
    }
    if cache.inputs.len() != params.projections.len() {
        return Err(DhaError::ShapeMismatch(format!(
            "cache has {} component latents, params expect {}",
            cache.inputs.len(),
            params.projections.len()
        )));
    }
    let mut grads = params.zeros_like();
    let h0 = &cache.joint.values;
    let delta = DenseVector::from_vec(
        upstream
            .as_slice()
            .iter()
            .zip(h0.as_slice())
            .map(|(&g, &y)| g * params.activation.derivative_from_output(y))
            .collect(),
    );
    let mut latent_grads = BTreeMap::new();
    for (&id, w) in &params.projections {
        let h = cache
            .inputs
            .get(&id)
            .ok_or(DhaError::MissingComponent(id))?;
        grads
            .projections
            .get_mut(&id)
            .expect("zeros_like mirrors keys")
            .add_outer(1.0, &delta, h);
        latent_grads.insert(id, w.matvec_transpose(&delta)?);
    }
    grads.bias.add_scaled(&delta, 1.0);

    if let (Some(layer), Some(rec), Some(g_extra)) =
        (&params.extra, &cache.extra_out, &mut grads.extra)
    {
        // Auxiliary path: d/dθ₂ of mse(rec(θ₂), h0) with h0 held constant.
        let scale = 2.0 / d as f64;
        let drec = DenseVector::from_vec(
            rec.as_slice()
                .iter()
                .zip(h0.as_slice())
                .map(|(&r, &h)| scale * (r - h) * params.activation.derivative_from_output(r))
                .collect(),
        );
        g_extra.w.add_outer(1.0, &drec, h0);
        g_extra.b.add_scaled(&drec, 1.0);
        let _ = layer;
    }

    if weight_decay != 0.0 {
        grads.add_scaled(params, weight_decay);
    }
    Ok((grads, latent_grads))
}
