//! Joint alternating optimization: epochs of SGD on the per-side networks
//! (reconstruction + anchor paths) interleaved with closed-form factor
//! sweeps, plus layer-wise pretraining orchestration.
//!
//! One alternation = `epochs` passes of network updates over both sides,
//! then one user-factor sweep and one item-factor sweep. Networks always
//! update first so the factor sweeps immediately absorb fresh anchors.

use std::collections::BTreeMap;
use std::fmt;

use crate::cf::{
    cf_objective, init_factors, update_item_factors, update_user_factors, CfHyperparams,
    FactorMatrix, InteractionMatrix,
};
use crate::error::{DhaError, Result};
use crate::fusion::{aux_reconstruction_loss, fuse, fusion_backward, FuseCache, FusionParams};
use crate::math::{ActivationKind, DenseMatrix, DenseVector};
use crate::rng::{mask_corrupt, RngState, SeededRng};
use crate::sdae::{
    backward as sdae_backward, forward as sdae_forward, pretrain_layerwise, reconstruction_loss,
    ComponentInput, ComponentSpec, ForwardCache, SdaeGrads, SdaeParams,
};
use crate::seq2seq::{
    seq_forward, sequence_backward, LstmParams, SeqCache, SequenceSpec, TokenSequence,
};

/// A component is either a static autoencoder over fixed feature rows or a
/// sequence encoder-decoder over token histories.
#[derive(Debug, Clone, PartialEq)]
pub enum ComponentSpecKind {
    Static(ComponentSpec),
    Sequential(SequenceSpec),
}

impl ComponentSpecKind {
    pub fn component_id(&self) -> u32 {
        match self {
            ComponentSpecKind::Static(s) => s.component_id,
            ComponentSpecKind::Sequential(s) => s.component_id,
        }
    }

    /// Width of the latent this component feeds into the fusion layer.
    pub fn latent_dim(&self) -> usize {
        match self {
            ComponentSpecKind::Static(s) => s.mid_dim,
            ComponentSpecKind::Sequential(s) => s.hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ComponentSpecKind::Static(s) => s.validate(),
            ComponentSpecKind::Sequential(s) => s.validate(),
        }
    }
}

/// Trainable parameters for one component.
// LSTM params dwarf the autoencoder variant, but a model holds only a few of
// these, so boxing would buy nothing.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum ComponentParams {
    Static(SdaeParams),
    Sequential(LstmParams),
}

impl ComponentParams {
    pub fn norm_sq(&self) -> f64 {
        match self {
            ComponentParams::Static(p) => p.norm_sq(),
            ComponentParams::Sequential(p) => p.norm_sq(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            ComponentParams::Static(p) => p.is_finite(),
            ComponentParams::Sequential(p) => p.is_finite(),
        }
    }
}

/// Input data for one component, aligned so row/element `e` belongs to
/// entity index `e` on that side.
#[derive(Debug, Clone)]
pub enum ComponentInputData {
    Static(DenseMatrix),
    Sequential(Vec<TokenSequence>),
}

/// All component inputs for one side, parallel to the side's spec list.
#[derive(Debug, Clone)]
pub struct SideData {
    pub inputs: Vec<ComponentInputData>,
}

impl SideData {
    pub fn new(inputs: Vec<ComponentInputData>) -> Self {
        SideData { inputs }
    }
}

/// Full training schedule and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alternations: u32,
    /// Network epochs per alternation.
    pub epochs: u32,
    pub pretrain_epochs: u32,
    pub learning_rate: f64,
    pub user_batch: usize,
    pub item_batch: usize,
    pub seed: u64,
    pub hyper: CfHyperparams,
    pub user_components: Vec<ComponentSpecKind>,
    pub item_components: Vec<ComponentSpecKind>,
    pub fusion_activation: ActivationKind,
    pub fusion_extra_layer: bool,
}

impl TrainConfig {
    /// Paper-style defaults (5 alternations × 5 epochs, batch 50).
    pub fn new(
        hyper: CfHyperparams,
        user_components: Vec<ComponentSpecKind>,
        item_components: Vec<ComponentSpecKind>,
    ) -> Self {
        TrainConfig {
            alternations: 5,
            epochs: 5,
            pretrain_epochs: 5,
            learning_rate: 0.05,
            user_batch: 50,
            item_batch: 50,
            seed: 0,
            hyper,
            user_components,
            item_components,
            fusion_activation: ActivationKind::Sigmoid,
            fusion_extra_layer: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alternations == 0 {
            return Err(DhaError::ConfigInvalid("alternations must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DhaError::ConfigInvalid(
                "learning_rate must be positive and finite".into(),
            ));
        }
        if self.user_batch == 0 || self.item_batch == 0 {
            return Err(DhaError::ConfigInvalid("batch sizes must be >= 1".into()));
        }
        if self.user_components.is_empty() || self.item_components.is_empty() {
            return Err(DhaError::ConfigInvalid(
                "each side needs at least one component".into(),
            ));
        }
        self.hyper.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for spec in self.user_components.iter().chain(&self.item_components) {
            spec.validate()?;
            if !seen.insert(spec.component_id()) {
                return Err(DhaError::ConfigInvalid(format!(
                    "component id {} assigned more than once",
                    spec.component_id()
                )));
            }
        }
        Ok(())
    }
}

/// Everything the optimizer mutates: per-side network parameters, factor
/// matrices, the live rng position, and the alternation counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub user_specs: Vec<ComponentSpecKind>,
    pub item_specs: Vec<ComponentSpecKind>,
    pub user_params: Vec<ComponentParams>,
    pub item_params: Vec<ComponentParams>,
    pub user_fusion: FusionParams,
    pub item_fusion: FusionParams,
    pub u: FactorMatrix,
    pub v: FactorMatrix,
    pub rng: RngState,
    pub alternation: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    User,
    Item,
}

impl Side {
    fn label(self) -> &'static str {
        match self {
            Side::User => "user",
            Side::Item => "item",
        }
    }
}

/// Where in the schedule a logged loss value was measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Mean per-entity network loss (reconstruction + NLL + anchor terms)
    /// observed during one epoch of SGD.
    Epoch,
    TotalAfterPretrain,
    CfBeforeSweeps,
    CfAfterUserSweep,
    CfAfterItemSweep,
    TotalAfterAlternation,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Epoch => "epoch",
            Phase::TotalAfterPretrain => "total_after_pretrain",
            Phase::CfBeforeSweeps => "cf_before_sweeps",
            Phase::CfAfterUserSweep => "cf_after_user_sweep",
            Phase::CfAfterItemSweep => "cf_after_item_sweep",
            Phase::TotalAfterAlternation => "total_after_alternation",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub alternation: u32,
    pub epoch: u32,
    pub phase: Phase,
    pub value: f64,
}

/// Render the loss log as TSV with a header row.
pub fn loss_log_tsv(records: &[LossRecord]) -> String {
    let mut out = String::from("alternation\tepoch\tphase\tvalue\n");
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.9}\n",
            r.alternation, r.epoch, r.phase, r.value
        ));
    }
    out
}

fn check_finite(value: f64, term: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(DhaError::NonFinite {
            term: term.to_string(),
        })
    }
}

fn validate_side(specs: &[ComponentSpecKind], data: &SideData, entities: usize) -> Result<()> {
    if specs.len() != data.inputs.len() {
        return Err(DhaError::ConfigMismatch(format!(
            "{} component specs but {} data inputs",
            specs.len(),
            data.inputs.len()
        )));
    }
    for (spec, input) in specs.iter().zip(&data.inputs) {
        match (spec, input) {
            (ComponentSpecKind::Static(s), ComponentInputData::Static(rows)) => {
                if rows.rows() != entities {
                    return Err(DhaError::DimensionMismatch(format!(
                        "component {}: {} rows for {} entities",
                        s.component_id,
                        rows.rows(),
                        entities
                    )));
                }
                if rows.cols() != s.input_dim {
                    return Err(DhaError::DimensionMismatch(format!(
                        "component {}: rows have {} columns, spec says {}",
                        s.component_id,
                        rows.cols(),
                        s.input_dim
                    )));
                }
            }
            (ComponentSpecKind::Sequential(s), ComponentInputData::Sequential(seqs)) => {
                if seqs.len() != entities {
                    return Err(DhaError::DimensionMismatch(format!(
                        "component {}: {} sequences for {} entities",
                        s.component_id,
                        seqs.len(),
                        entities
                    )));
                }
                for seq in seqs {
                    if seq.tokens.len() != s.time_steps {
                        return Err(DhaError::DimensionMismatch(format!(
                            "component {}: sequence of length {} (expected {})",
                            s.component_id,
                            seq.tokens.len(),
                            s.time_steps
                        )));
                    }
                }
            }
            _ => {
                return Err(DhaError::ConfigMismatch(format!(
                    "component {}: spec kind does not match data kind",
                    spec.component_id()
                )));
            }
        }
    }
    Ok(())
}

/// Per-entity clean forward caches, one per component.
enum EntityCache {
    Static(ForwardCache),
    Sequential(SeqCache),
}

/// Run every component on entity `e` with uncorrupted input and fuse the
/// latents.
fn clean_entity_forward(
    specs: &[ComponentSpecKind],
    params: &[ComponentParams],
    fusion: &FusionParams,
    data: &SideData,
    e: usize,
) -> Result<(Vec<EntityCache>, FuseCache)> {
    let mut caches = Vec::with_capacity(specs.len());
    let mut latents = BTreeMap::new();
    for ((spec, pars), input) in specs.iter().zip(params).zip(&data.inputs) {
        match (spec, pars, input) {
            (
                ComponentSpecKind::Static(s),
                ComponentParams::Static(p),
                ComponentInputData::Static(rows),
            ) => {
                let cache = sdae_forward(p, s, &rows.row_vector(e))?;
                latents.insert(s.component_id, cache.latent().clone());
                caches.push(EntityCache::Static(cache));
            }
            (
                ComponentSpecKind::Sequential(s),
                ComponentParams::Sequential(p),
                ComponentInputData::Sequential(seqs),
            ) => {
                let cache = seq_forward(p, s, &seqs[e])?;
                latents.insert(s.component_id, cache.context.clone());
                caches.push(EntityCache::Sequential(cache));
            }
            _ => {
                return Err(DhaError::ConfigMismatch(format!(
                    "component {}: spec/params/data kinds disagree",
                    spec.component_id()
                )));
            }
        }
    }
    let fused = fuse(fusion, &latents)?;
    Ok((caches, fused))
}

/// Clean joint latents for every entity on a side, stacked as an
/// entities × d matrix — the anchor targets for the factor sweeps.
fn anchor_matrix(
    specs: &[ComponentSpecKind],
    params: &[ComponentParams],
    fusion: &FusionParams,
    data: &SideData,
    entities: usize,
) -> Result<DenseMatrix> {
    let mut anchors = DenseMatrix::zeros(entities, fusion.dim());
    for e in 0..entities {
        let (_, fused) = clean_entity_forward(specs, params, fusion, data, e)?;
        anchors
            .row_mut(e)
            .copy_from_slice(fused.joint.values.as_slice());
    }
    Ok(anchors)
}

/// The complete objective: factorization share (with anchors) + weighted
/// component reconstruction/NLL losses + auxiliary fusion reconstruction +
/// weight decay at λ_w/2 (so its gradient is exactly λ_w·θ).
///
/// Component losses are evaluated on uncorrupted forwards; input corruption
/// is a training-time regularizer, not part of the reported objective.
pub fn total_loss(
    state: &ModelState,
    user_data: &SideData,
    item_data: &SideData,
    interactions: &InteractionMatrix,
    hyper: &CfHyperparams,
) -> Result<f64> {
    let m = interactions.num_users();
    let n = interactions.num_items();
    validate_side(&state.user_specs, user_data, m)?;
    validate_side(&state.item_specs, item_data, n)?;

    let side_sum = |specs: &[ComponentSpecKind],
                    params: &[ComponentParams],
                    fusion: &FusionParams,
                    data: &SideData,
                    entities: usize,
                    label: &str|
     -> Result<(DenseMatrix, f64, f64)> {
        let mut anchors = DenseMatrix::zeros(entities, fusion.dim());
        let mut recon = 0.0;
        let mut aux = 0.0;
        for e in 0..entities {
            let (caches, fused) = clean_entity_forward(specs, params, fusion, data, e)?;
            anchors
                .row_mut(e)
                .copy_from_slice(fused.joint.values.as_slice());
            for (cache, input) in caches.iter().zip(&data.inputs) {
                match (cache, input) {
                    (EntityCache::Static(c), ComponentInputData::Static(rows)) => {
                        recon += reconstruction_loss(&rows.row_vector(e), c.reconstruction())?;
                    }
                    (EntityCache::Sequential(c), _) => recon += c.nll,
                    _ => unreachable!("validated above"),
                }
            }
            aux += aux_reconstruction_loss(&fused).unwrap_or(0.0);
        }
        check_finite(recon, &format!("{label} component loss"))?;
        Ok((anchors, recon, aux))
    };

    let (anchors_u, user_recon, user_aux) = side_sum(
        &state.user_specs,
        &state.user_params,
        &state.user_fusion,
        user_data,
        m,
        "user",
    )?;
    let (anchors_v, item_recon, item_aux) = side_sum(
        &state.item_specs,
        &state.item_params,
        &state.item_fusion,
        item_data,
        n,
        "item",
    )?;

    let cf = check_finite(
        cf_objective(
            &state.u,
            &state.v,
            interactions,
            Some(&anchors_u),
            Some(&anchors_v),
            hyper,
        )?,
        "factorization objective",
    )?;

    let mut params_norm = state.user_fusion.norm_sq() + state.item_fusion.norm_sq();
    for p in state.user_params.iter().chain(&state.item_params) {
        params_norm += p.norm_sq();
    }
    let decay = 0.5 * hyper.lambda_w * params_norm;
    check_finite(decay, "weight decay")?;

    let total = cf
        + hyper.lambda_m * user_recon
        + hyper.lambda_n * item_recon
        + user_aux
        + item_aux
        + decay;
    check_finite(total, "total loss")
}

#[allow(clippy::large_enum_variant)]
enum ComponentGrads {
    Static(SdaeGrads),
    Sequential(LstmParams),
}

/// One SGD step over a batch of entities on one side: two passes per static
/// component (corrupted input → reconstruction path, clean input → anchor
/// path through the fusion layer) and one pass per sequential component
/// (NLL + anchor paths share the forward). Batch gradient = mean over
/// entities + λ_w·θ applied once. Returns the mean per-entity loss.
pub fn network_step(
    state: &mut ModelState,
    data: &SideData,
    hyper: &CfHyperparams,
    lr: f64,
    side: Side,
    batch: &[usize],
    rng: &mut SeededRng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(DhaError::EmptyData("empty batch".into()));
    }
    let (specs, params, fusion, targets, lambda_recon, lambda_anchor) = match side {
        Side::User => (
            &state.user_specs,
            &mut state.user_params,
            &mut state.user_fusion,
            &state.u,
            hyper.lambda_m,
            hyper.lambda_u,
        ),
        Side::Item => (
            &state.item_specs,
            &mut state.item_params,
            &mut state.item_fusion,
            &state.v,
            hyper.lambda_n,
            hyper.lambda_v,
        ),
    };
    let d = fusion.dim();
    if targets.cols() != d {
        return Err(DhaError::DimensionMismatch(format!(
            "factor dim {} vs fusion dim {}",
            targets.cols(),
            d
        )));
    }

    let mut comp_grads: Vec<ComponentGrads> = params
        .iter()
        .map(|p| match p {
            ComponentParams::Static(p) => ComponentGrads::Static(SdaeGrads::zeros_like(p)),
            ComponentParams::Sequential(p) => ComponentGrads::Sequential(p.zeros_like()),
        })
        .collect();
    let mut fusion_grads = fusion.zeros_like();
    let mut batch_loss = 0.0;

    for &e in batch {
        if e >= targets.rows() {
            return Err(DhaError::IndexOutOfRange(format!(
                "entity {e} out of {}",
                targets.rows()
            )));
        }
        let (caches, fused) = clean_entity_forward(specs, params, fusion, data, e)?;
        let h = &fused.joint.values;

        // Anchor path: λ_anchor‖h − t‖² gives 2λ_anchor(h − t) at h.
        let target = targets.row(e);
        let mut upstream = DenseVector::zeros(d);
        let mut anchor_loss = 0.0;
        if lambda_anchor != 0.0 {
            for (k, (hv, tv)) in h.as_slice().iter().zip(target).enumerate() {
                let diff = hv - tv;
                upstream[k] = 2.0 * lambda_anchor * diff;
                anchor_loss += lambda_anchor * diff * diff;
            }
        }
        let (fg, latent_grads) = fusion_backward(fusion, &fused, &upstream, 0.0)?;
        fusion_grads.add_scaled(&fg, 1.0);
        batch_loss += anchor_loss + aux_reconstruction_loss(&fused).unwrap_or(0.0);

        for (((spec, pars), grads), (cache, input)) in specs
            .iter()
            .zip(params.iter())
            .zip(comp_grads.iter_mut())
            .zip(caches.iter().zip(&data.inputs))
        {
            let mid_grad = &latent_grads[&spec.component_id()];
            match (spec, pars, grads, cache, input) {
                (
                    ComponentSpecKind::Static(s),
                    ComponentParams::Static(p),
                    ComponentGrads::Static(g),
                    EntityCache::Static(clean_cache),
                    ComponentInputData::Static(rows),
                ) => {
                    g.add_assign(&sdae_backward(
                        p,
                        s,
                        clean_cache,
                        Some(mid_grad),
                        None,
                        0.0,
                    )?);
                    // Denoising pass: corrupt the input, reconstruct the
                    // clean target.
                    let x = rows.row_vector(e);
                    let corrupted = mask_corrupt(rng, &x, s.corruption);
                    let cache = sdae_forward(p, s, &corrupted)?;
                    g.add_assign(&sdae_backward(
                        p,
                        s,
                        &cache,
                        None,
                        Some((&x, lambda_recon)),
                        0.0,
                    )?);
                    batch_loss += lambda_recon * reconstruction_loss(&x, cache.reconstruction())?;
                }
                (
                    ComponentSpecKind::Sequential(s),
                    ComponentParams::Sequential(p),
                    ComponentGrads::Sequential(g),
                    EntityCache::Sequential(cache),
                    _,
                ) => {
                    g.add_scaled(
                        &sequence_backward(p, s, cache, Some(mid_grad), lambda_recon, 0.0)?,
                        1.0,
                    );
                    batch_loss += lambda_recon * cache.nll;
                }
                _ => unreachable!("validated against specs"),
            }
        }
    }

    // Mean over the batch, decay once, one step.
    let scale = 1.0 / batch.len() as f64;
    fusion_grads.scale(scale);
    fusion_grads.add_scaled(fusion, hyper.lambda_w);
    fusion.apply_step(&fusion_grads, lr);
    for (pars, grads) in params.iter_mut().zip(comp_grads.iter_mut()) {
        match (pars, grads) {
            (ComponentParams::Static(p), ComponentGrads::Static(g)) => {
                g.scale(scale);
                g.add_decay(p, hyper.lambda_w);
                p.apply_step(g, lr);
            }
            (ComponentParams::Sequential(p), ComponentGrads::Sequential(g)) => {
                g.scale(scale);
                g.add_scaled(p, hyper.lambda_w);
                p.apply_step(g, lr);
            }
            _ => unreachable!(),
        }
    }
    check_finite(batch_loss * scale, "batch loss")
}

/// Initialize every parameter block, running layer-wise pretraining for the
/// autoencoders and plain NLL pretraining for the sequence components; each
/// component draws from its own labeled stream so results don't shift when
/// other components are added or removed.
pub fn init_model(
    cfg: &TrainConfig,
    user_data: &SideData,
    item_data: &SideData,
    interactions: &InteractionMatrix,
) -> Result<ModelState> {
    cfg.validate()?;
    let m = interactions.num_users();
    let n = interactions.num_items();
    validate_side(&cfg.user_components, user_data, m)?;
    validate_side(&cfg.item_components, item_data, n)?;
    for spec in cfg.user_components.iter().chain(&cfg.item_components) {
        if spec.latent_dim() != cfg.hyper.d {
            return Err(DhaError::ConfigInvalid(format!(
                "component {}: latent width {} differs from factor dim {}",
                spec.component_id(),
                spec.latent_dim(),
                cfg.hyper.d
            )));
        }
    }

    let init_side = |specs: &[ComponentSpecKind],
                     data: &SideData,
                     side: Side,
                     batch: usize|
     -> Result<(Vec<ComponentParams>, FusionParams)> {
        let mut params = Vec::with_capacity(specs.len());
        for (i, (spec, input)) in specs.iter().zip(&data.inputs).enumerate() {
            let label = format!("pretrain.{}.{}", side.label(), i);
            let mut rng = SeededRng::labeled(cfg.seed, &label);
            let p = match (spec, input) {
                (ComponentSpecKind::Static(s), ComponentInputData::Static(rows)) => {
                    if cfg.pretrain_epochs == 0 {
                        ComponentParams::Static(SdaeParams::init(s, &mut rng)?)
                    } else {
                        let training = ComponentInput::new(s.component_id, rows.clone(), s)?;
                        ComponentParams::Static(pretrain_layerwise(
                            s,
                            &training,
                            cfg.pretrain_epochs as usize,
                            cfg.learning_rate,
                            batch,
                            &mut rng,
                        )?)
                    }
                }
                (ComponentSpecKind::Sequential(s), ComponentInputData::Sequential(seqs)) => {
                    let mut p = LstmParams::init(s, &mut rng)?;
                    pretrain_sequences(
                        s,
                        &mut p,
                        seqs,
                        cfg.pretrain_epochs,
                        cfg.learning_rate,
                        batch,
                        cfg.hyper.lambda_w,
                        &mut rng,
                    )?;
                    ComponentParams::Sequential(p)
                }
                _ => unreachable!("validated above"),
            };
            params.push(p);
        }
        let dims: BTreeMap<u32, usize> = specs
            .iter()
            .map(|s| (s.component_id(), s.latent_dim()))
            .collect();
        let mut rng = SeededRng::labeled(cfg.seed, &format!("init.{}.fusion", side.label()));
        let fusion = FusionParams::init(
            &dims,
            cfg.hyper.d,
            cfg.fusion_activation,
            cfg.fusion_extra_layer,
            &mut rng,
        )?;
        Ok((params, fusion))
    };

    let (user_params, user_fusion) =
        init_side(&cfg.user_components, user_data, Side::User, cfg.user_batch)?;
    let (item_params, item_fusion) =
        init_side(&cfg.item_components, item_data, Side::Item, cfg.item_batch)?;
    let (u, v) = init_factors(m, n, cfg.hyper.d, cfg.seed);

    Ok(ModelState {
        user_specs: cfg.user_components.clone(),
        item_specs: cfg.item_components.clone(),
        user_params,
        item_params,
        user_fusion,
        item_fusion,
        u,
        v,
        rng: SeededRng::labeled(cfg.seed, "train").state(),
        alternation: 0,
    })
}

/// Autoencoding warm-up for a sequence component: SGD on the plain NLL.
#[allow(clippy::too_many_arguments)]
fn pretrain_sequences(
    spec: &SequenceSpec,
    params: &mut LstmParams,
    seqs: &[TokenSequence],
    epochs: u32,
    lr: f64,
    batch: usize,
    lambda_w: f64,
    rng: &mut SeededRng,
) -> Result<()> {
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let mut grads = params.zeros_like();
            for &e in chunk {
                let cache = seq_forward(params, spec, &seqs[e])?;
                grads.add_scaled(
                    &sequence_backward(params, spec, &cache, None, 1.0, 0.0)?,
                    1.0,
                );
            }
            grads.scale(1.0 / chunk.len() as f64);
            grads.add_scaled(params, lambda_w);
            params.apply_step(&grads, lr);
        }
    }
    Ok(())
}

/// Run the full schedule and hand every end-of-alternation state to `sink`
/// (the checkpoint writer). Returns the final state and the loss log.
pub fn joint_train_with<F>(
    cfg: &TrainConfig,
    user_data: &SideData,
    item_data: &SideData,
    interactions: &InteractionMatrix,
    mut sink: F,
) -> Result<(ModelState, Vec<LossRecord>)>
where
    F: FnMut(&ModelState) -> Result<()>,
{
    let mut state = init_model(cfg, user_data, item_data, interactions)?;
    let mut rng = SeededRng::restore(state.rng);
    let mut records = Vec::new();
    let push = |records: &mut Vec<LossRecord>, alternation, epoch, phase, value| {
        records.push(LossRecord {
            alternation,
            epoch,
            phase,
            value: check_finite(value, &phase.to_string())?,
        });
        Ok::<(), DhaError>(())
    };

    let after_pretrain = total_loss(&state, user_data, item_data, interactions, &cfg.hyper)?;
    push(
        &mut records,
        0,
        0,
        Phase::TotalAfterPretrain,
        after_pretrain,
    )?;

    let m = interactions.num_users();
    let n = interactions.num_items();
    for a in 1..=cfg.alternations {
        for e in 1..=cfg.epochs {
            let mut loss_sum = 0.0;
            let mut entity_count = 0usize;
            let mut order: Vec<usize> = (0..m).collect();
            rng.shuffle(&mut order);
            for chunk in order.chunks(cfg.user_batch) {
                let mean = network_step(
                    &mut state,
                    user_data,
                    &cfg.hyper,
                    cfg.learning_rate,
                    Side::User,
                    chunk,
                    &mut rng,
                )?;
                loss_sum += mean * chunk.len() as f64;
                entity_count += chunk.len();
            }
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            for chunk in order.chunks(cfg.item_batch) {
                let mean = network_step(
                    &mut state,
                    item_data,
                    &cfg.hyper,
                    cfg.learning_rate,
                    Side::Item,
                    chunk,
                    &mut rng,
                )?;
                loss_sum += mean * chunk.len() as f64;
                entity_count += chunk.len();
            }
            push(
                &mut records,
                a,
                e,
                Phase::Epoch,
                loss_sum / entity_count as f64,
            )?;
        }

        // Anchors from the freshly trained networks, then closed-form sweeps.
        let anchors_u = anchor_matrix(
            &state.user_specs,
            &state.user_params,
            &state.user_fusion,
            user_data,
            m,
        )?;
        let anchors_v = anchor_matrix(
            &state.item_specs,
            &state.item_params,
            &state.item_fusion,
            item_data,
            n,
        )?;
        let cf_before = cf_objective(
            &state.u,
            &state.v,
            interactions,
            Some(&anchors_u),
            Some(&anchors_v),
            &cfg.hyper,
        )?;
        push(&mut records, a, 0, Phase::CfBeforeSweeps, cf_before)?;

        state.u = update_user_factors(&state.v, interactions, Some(&anchors_u), &cfg.hyper)?;
        let cf_mid = cf_objective(
            &state.u,
            &state.v,
            interactions,
            Some(&anchors_u),
            Some(&anchors_v),
            &cfg.hyper,
        )?;
        push(&mut records, a, 0, Phase::CfAfterUserSweep, cf_mid)?;

        state.v = update_item_factors(&state.u, interactions, Some(&anchors_v), &cfg.hyper)?;
        let cf_after = cf_objective(
            &state.u,
            &state.v,
            interactions,
            Some(&anchors_u),
            Some(&anchors_v),
            &cfg.hyper,
        )?;
        push(&mut records, a, 0, Phase::CfAfterItemSweep, cf_after)?;

        let total = total_loss(&state, user_data, item_data, interactions, &cfg.hyper)?;
        push(&mut records, a, 0, Phase::TotalAfterAlternation, total)?;

        state.alternation = a;
        state.rng = rng.state();
        sink(&state)?;
    }
    Ok((state, records))
}

/// [`joint_train_with`] without a checkpoint sink.
pub fn joint_train(
    cfg: &TrainConfig,
    user_data: &SideData,
    item_data: &SideData,
    interactions: &InteractionMatrix,
) -> Result<(ModelState, Vec<LossRecord>)> {
    joint_train_with(cfg, user_data, item_data, interactions, |_| Ok(()))
}
