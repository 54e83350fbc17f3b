//! Central finite-difference verification of every analytic gradient path.
//!
//! For each component named in a run configuration this builds a shrunken
//! instance of the same network family (same activations and corruption, tiny
//! dimensions), evaluates a scalar probe loss, and compares the analytic
//! gradient of every parameter tensor against `(L(θ+ε) − L(θ−ε)) / 2ε`,
//! coordinate by coordinate. The probe loss exercises both gradient paths at
//! once: the task term (reconstruction error or sequence log-likelihood) plus
//! a random linear functional of the latent code standing in for whatever
//! arrives from the fusion and anchor layers, plus weight decay.

use std::collections::BTreeMap;

use crate::config::{ComponentPlan, RunConfig, SideName};
use crate::error::Result;
use crate::fusion::{aux_reconstruction_loss, fuse, fusion_backward, FusionParams};
use crate::math::DenseVector;
use crate::rng::{mask_corrupt, SeededRng};
use crate::sdae::{backward, forward, reconstruction_loss, ComponentSpec, SdaeParams};
use crate::seq2seq::{
    seq_forward, sequence_backward, LstmCell, LstmParams, SequenceSpec, TokenSequence,
};

/// Finite-difference step. Central differences make the truncation error
/// O(ε²); 1e-5 balances that against f64 rounding in the loss.
const EPS: f64 = 1e-5;
/// Weight decay used inside every probe loss, so decay gradients are checked.
const DECAY: f64 = 0.01;
/// Weight on the task term, distinct from 1 to catch dropped factors.
const TASK_WEIGHT: f64 = 0.7;
/// Tensors larger than this get a strided sample of coordinates instead of
/// an exhaustive sweep.
const MAX_COORDS: usize = 400;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct TensorReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Coordinates compared (all of them for small tensors).
    pub coords: usize,
}

impl TensorReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= tolerance
    }
}

/// Uniform flat access to the named tensors of a parameter container.
trait TensorSet: Clone {
    fn slot_count(&self) -> usize;
    fn slot_name(&self, k: usize) -> String;
    fn slot(&self, k: usize) -> &[f64];
    fn slot_mut(&mut self, k: usize) -> &mut [f64];
}

impl TensorSet for SdaeParams {
    fn slot_count(&self) -> usize {
        self.layers.len() * 2
    }

    fn slot_name(&self, k: usize) -> String {
        let part = if k.is_multiple_of(2) { "w" } else { "b" };
        format!("layer.{}.{part}", k / 2)
    }

    fn slot(&self, k: usize) -> &[f64] {
        let l = &self.layers[k / 2];
        if k.is_multiple_of(2) {
            l.w.as_slice()
        } else {
            l.b.as_slice()
        }
    }

    fn slot_mut(&mut self, k: usize) -> &mut [f64] {
        let l = &mut self.layers[k / 2];
        if k.is_multiple_of(2) {
            l.w.as_mut_slice()
        } else {
            l.b.as_mut_slice()
        }
    }
}

const CELL_SLOTS: [&str; 8] = ["w_i", "b_i", "w_f", "b_f", "w_o", "b_o", "w_g", "b_g"];

fn cell_slot(c: &LstmCell, k: usize) -> &[f64] {
    match k {
        0 => c.w_i.as_slice(),
        1 => c.b_i.as_slice(),
        2 => c.w_f.as_slice(),
        3 => c.b_f.as_slice(),
        4 => c.w_o.as_slice(),
        5 => c.b_o.as_slice(),
        6 => c.w_g.as_slice(),
        _ => c.b_g.as_slice(),
    }
}

fn cell_slot_mut(c: &mut LstmCell, k: usize) -> &mut [f64] {
    match k {
        0 => c.w_i.as_mut_slice(),
        1 => c.b_i.as_mut_slice(),
        2 => c.w_f.as_mut_slice(),
        3 => c.b_f.as_mut_slice(),
        4 => c.w_o.as_mut_slice(),
        5 => c.b_o.as_mut_slice(),
        6 => c.w_g.as_mut_slice(),
        _ => c.b_g.as_mut_slice(),
    }
}

impl TensorSet for LstmParams {
    fn slot_count(&self) -> usize {
        1 + 8 + 8 + 4
    }

    fn slot_name(&self, k: usize) -> String {
        match k {
            0 => "embedding".into(),
            1..=8 => format!("enc.{}", CELL_SLOTS[k - 1]),
            9..=16 => format!("dec.{}", CELL_SLOTS[k - 9]),
            17 => "ctx.w".into(),
            18 => "ctx.b".into(),
            19 => "proj.w".into(),
            _ => "proj.b".into(),
        }
    }

    fn slot(&self, k: usize) -> &[f64] {
        match k {
            0 => self.embedding.as_slice(),
            1..=8 => cell_slot(&self.encoder, k - 1),
            9..=16 => cell_slot(&self.decoder, k - 9),
            17 => self.w_ctx.as_slice(),
            18 => self.b_ctx.as_slice(),
            19 => self.w_proj.as_slice(),
            _ => self.b_proj.as_slice(),
        }
    }

    fn slot_mut(&mut self, k: usize) -> &mut [f64] {
        match k {
            0 => self.embedding.as_mut_slice(),
            1..=8 => cell_slot_mut(&mut self.encoder, k - 1),
            9..=16 => cell_slot_mut(&mut self.decoder, k - 9),
            17 => self.w_ctx.as_mut_slice(),
            18 => self.b_ctx.as_mut_slice(),
            19 => self.w_proj.as_mut_slice(),
            _ => self.b_proj.as_mut_slice(),
        }
    }
}

impl TensorSet for FusionParams {
    fn slot_count(&self) -> usize {
        self.projections.len() + 1 + if self.extra.is_some() { 2 } else { 0 }
    }

    fn slot_name(&self, k: usize) -> String {
        let n = self.projections.len();
        if k < n {
            let id = self.projections.keys().nth(k).expect("in range");
            format!("proj.{id}")
        } else if k == n {
            "bias".into()
        } else if k == n + 1 {
            "extra.w".into()
        } else {
            "extra.b".into()
        }
    }

    fn slot(&self, k: usize) -> &[f64] {
        let n = self.projections.len();
        if k < n {
            self.projections
                .values()
                .nth(k)
                .expect("in range")
                .as_slice()
        } else if k == n {
            self.bias.as_slice()
        } else if k == n + 1 {
            self.extra.as_ref().expect("extra layer").w.as_slice()
        } else {
            self.extra.as_ref().expect("extra layer").b.as_slice()
        }
    }

    fn slot_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.projections.len();
        if k < n {
            self.projections
                .values_mut()
                .nth(k)
                .expect("in range")
                .as_mut_slice()
        } else if k == n {
            self.bias.as_mut_slice()
        } else if k == n + 1 {
            self.extra.as_mut().expect("extra layer").w.as_mut_slice()
        } else {
            self.extra.as_mut().expect("extra layer").b.as_mut_slice()
        }
    }
}

/// Compare analytic gradients against central differences for the selected
/// slots of one parameter container, appending one report per tensor.
#[allow(clippy::too_many_arguments)]
fn check_tensors<P: TensorSet>(
    prefix: &str,
    params: &P,
    analytic: &P,
    slots: std::ops::Range<usize>,
    loss: impl Fn(&P) -> Result<f64>,
    corrupt: Option<&str>,
    reports: &mut Vec<TensorReport>,
) -> Result<()> {
    for k in slots {
        let name = format!("{prefix}.{}", params.slot_name(k));
        let len = params.slot(k).len();
        let stride = len.div_ceil(MAX_COORDS).max(1);
        let sabotage = corrupt == Some(name.as_str());
        let mut max_rel: f64 = 0.0;
        let mut coords = 0;
        let mut idx = 0;
        while idx < len {
            let mut plus = params.clone();
            plus.slot_mut(k)[idx] += EPS;
            let mut minus = params.clone();
            minus.slot_mut(k)[idx] -= EPS;
            let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * EPS);
            let mut an = analytic.slot(k)[idx];
            if sabotage {
                an += 0.5;
            }
            let denom = fd.abs().max(an.abs()).max(1e-6);
            max_rel = max_rel.max((fd - an).abs() / denom);
            coords += 1;
            idx += stride;
        }
        reports.push(TensorReport {
            name,
            max_rel_err: max_rel,
            coords,
        });
    }
    Ok(())
}

fn gaussian_vec(rng: &mut SeededRng, dim: usize, scale: f64) -> DenseVector {
    DenseVector::from_vec((0..dim).map(|_| scale * rng.next_gaussian()).collect())
}

fn check_static(
    prefix: &str,
    spec: &ComponentSpec,
    rng: &mut SeededRng,
    corrupt: Option<&str>,
    reports: &mut Vec<TensorReport>,
) -> Result<()> {
    let params = SdaeParams::init(spec, rng)?;
    let x = gaussian_vec(rng, spec.input_dim, 0.5);
    // The corruption mask is drawn once and frozen: parameter gradients are
    // taken at a fixed corrupted input, exactly as during a training step.
    let x_cor = mask_corrupt(rng, &x, spec.corruption);
    let inject = gaussian_vec(rng, spec.mid_dim, 1.0);
    let loss = |p: &SdaeParams| -> Result<f64> {
        let cache = forward(p, spec, &x_cor)?;
        let rec = TASK_WEIGHT * reconstruction_loss(&x, cache.reconstruction())?;
        let lat = inject.dot(cache.latent())?;
        Ok(rec + lat + 0.5 * DECAY * p.norm_sq())
    };
    let cache = forward(&params, spec, &x_cor)?;
    let grads = backward(
        &params,
        spec,
        &cache,
        Some(&inject),
        Some((&x, TASK_WEIGHT)),
        DECAY,
    )?;
    let analytic = SdaeParams {
        layers: grads.layers,
    };
    check_tensors(
        prefix,
        &params,
        &analytic,
        0..params.slot_count(),
        loss,
        corrupt,
        reports,
    )
}

fn check_sequential(
    prefix: &str,
    spec: &SequenceSpec,
    rng: &mut SeededRng,
    corrupt: Option<&str>,
    reports: &mut Vec<TensorReport>,
) -> Result<()> {
    let params = LstmParams::init(spec, rng)?;
    let tokens: Vec<u32> = (0..spec.time_steps)
        .map(|_| 2 + rng.next_below(spec.vocab_size as u64 - 2) as u32)
        .collect();
    let seq = TokenSequence::fit_to(0, &tokens, spec.time_steps);
    let inject = gaussian_vec(rng, spec.hidden_dim, 1.0);
    let loss = |p: &LstmParams| -> Result<f64> {
        let cache = seq_forward(p, spec, &seq)?;
        let lat = inject.dot(&cache.context)?;
        Ok(TASK_WEIGHT * cache.nll + lat + 0.5 * DECAY * p.norm_sq())
    };
    let cache = seq_forward(&params, spec, &seq)?;
    let analytic = sequence_backward(&params, spec, &cache, Some(&inject), TASK_WEIGHT, DECAY)?;
    check_tensors(
        prefix,
        &params,
        &analytic,
        0..params.slot_count(),
        loss,
        corrupt,
        reports,
    )
}

#[allow(clippy::too_many_arguments)]
fn check_fusion(
    prefix: &str,
    component_dims: &BTreeMap<u32, usize>,
    d: usize,
    activation: crate::math::ActivationKind,
    extra_layer: bool,
    rng: &mut SeededRng,
    corrupt: Option<&str>,
    reports: &mut Vec<TensorReport>,
) -> Result<()> {
    // Projections and bias: checked without the extra layer, because the
    // auxiliary reconstruction treats the joint latent as a constant target
    // and its finite difference would otherwise flow through it.
    let params = FusionParams::init(component_dims, d, activation, false, rng)?;
    let latents: BTreeMap<u32, DenseVector> = component_dims
        .iter()
        .map(|(&id, &dim)| (id, gaussian_vec(rng, dim, 0.7)))
        .collect();
    let inject = gaussian_vec(rng, d, 1.0);
    let loss = |p: &FusionParams| -> Result<f64> {
        let cache = fuse(p, &latents)?;
        let lat = inject.dot(&cache.joint.values)?;
        Ok(lat + 0.5 * DECAY * p.norm_sq())
    };
    let cache = fuse(&params, &latents)?;
    let (analytic, _) = fusion_backward(&params, &cache, &inject, DECAY)?;
    check_tensors(
        prefix,
        &params,
        &analytic,
        0..params.slot_count(),
        loss,
        corrupt,
        reports,
    )?;

    if extra_layer {
        let params = FusionParams::init(component_dims, d, activation, true, rng)?;
        let loss = |p: &FusionParams| -> Result<f64> {
            let cache = fuse(p, &latents)?;
            let lat = inject.dot(&cache.joint.values)?;
            let aux = aux_reconstruction_loss(&cache).expect("extra layer present");
            Ok(lat + aux + 0.5 * DECAY * p.norm_sq())
        };
        let cache = fuse(&params, &latents)?;
        let (analytic, _) = fusion_backward(&params, &cache, &inject, DECAY)?;
        let n = params.projections.len();
        check_tensors(
            prefix,
            &params,
            &analytic,
            n + 1..params.slot_count(),
            loss,
            corrupt,
            reports,
        )?;
    }
    Ok(())
}

/// Build a tiny instance per configured component (plus one fusion instance
/// per side) and finite-difference check every parameter tensor. `corrupt`
/// names a tensor whose analytic gradient is deliberately perturbed — a
/// negative control proving the check can fail.
pub fn run_gradcheck(
    cfg: &RunConfig,
    seed: u64,
    corrupt: Option<&str>,
) -> Result<Vec<TensorReport>> {
    let mut rng = SeededRng::labeled(seed, "gradcheck");
    let mut reports = Vec::new();
    let mut next_id = 0u32;
    for side in [SideName::User, SideName::Item] {
        let side_str = match side {
            SideName::User => "user",
            SideName::Item => "item",
        };
        let plans = cfg.component_plans(side)?;
        let mut dims = BTreeMap::new();
        for plan in &plans {
            let id = next_id;
            next_id += 1;
            let prefix = format!("{side_str}.{id}");
            match plan {
                ComponentPlan::Static {
                    layers,
                    activation,
                    output_activation,
                    corruption,
                    ..
                } => {
                    let spec = ComponentSpec {
                        component_id: id,
                        input_dim: 9,
                        total_layers: (*layers).clamp(2, 4) & !1,
                        mid_dim: 3,
                        width_increment: 2,
                        activation: *activation,
                        output_activation: *output_activation,
                        corruption: *corruption,
                    };
                    check_static(&prefix, &spec, &mut rng, corrupt, &mut reports)?;
                    dims.insert(id, spec.mid_dim);
                }
                ComponentPlan::Sequential { time_steps, .. } => {
                    let spec = SequenceSpec {
                        component_id: id,
                        vocab_size: 6,
                        embedding_dim: 3,
                        hidden_dim: 3,
                        time_steps: (*time_steps).clamp(1, 4),
                    };
                    check_sequential(&prefix, &spec, &mut rng, corrupt, &mut reports)?;
                    dims.insert(id, spec.hidden_dim);
                }
            }
        }
        check_fusion(
            &format!("{side_str}.fusion"),
            &dims,
            3,
            cfg.fusion_activation(),
            cfg.model.fusion_extra_layer,
            &mut rng,
            corrupt,
            &mut reports,
        )?;
    }
    Ok(reports)
}
