//! End-to-end runs driven by a [`RunConfig`]: load or generate data, build
//! component specs, train with per-alternation checkpoints, evaluate a
//! checkpoint against the holdout, rank items for one user, and sweep
//! hyperparameter grids.

use std::path::{Path, PathBuf};

use crate::cf::InteractionMatrix;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ComponentPlan, ComponentSource, RunConfig, SideName};
use crate::data::{
    load_embeddings, load_movielens_100k, load_ratings, load_sequences, split_holdout,
    synth_generate, RatingsDataset, SequenceDataset, SideInfoTable,
};
use crate::error::{DhaError, Result};
use crate::eval::{evaluate, rank_candidates, MetricsReport};
use crate::math::DenseMatrix;
use crate::sdae::ComponentSpec;
use crate::seq2seq::{SequenceSpec, TokenSequence};
use crate::trainer::{
    joint_train, joint_train_with, loss_log_tsv, ComponentInputData, ComponentSpecKind, LossRecord,
    ModelState, SideData, TrainConfig,
};

/// Everything the commands need after data resolution: interaction matrices
/// in index space, per-side component specs and inputs, and the id maps back
/// to original identifiers.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: InteractionMatrix,
    pub test: InteractionMatrix,
    pub user_data: SideData,
    pub item_data: SideData,
    pub user_components: Vec<ComponentSpecKind>,
    pub item_components: Vec<ComponentSpecKind>,
    pub user_ids: Vec<u32>,
    pub item_ids: Vec<u32>,
}

impl PreparedData {
    pub fn user_index(&self, id: u32) -> Option<usize> {
        self.user_ids.binary_search(&id).ok()
    }
}

/// Side tables available for builtin sources under the configured format.
struct LoadedTables {
    user_side: Option<SideInfoTable>,
    item_side: Option<SideInfoTable>,
    user_seqs: Option<SequenceDataset>,
}

fn dense_from_interactions(inter: &InteractionMatrix) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(inter.num_users(), inter.num_items());
    for i in 0..inter.num_users() {
        for &(j, r) in inter.user_row(i) {
            m.set(i, j as usize, r);
        }
    }
    m
}

#[allow(clippy::too_many_arguments)]
fn resolve_component(
    plan: &ComponentPlan,
    id: u32,
    side: SideName,
    d: usize,
    ids: &[u32],
    train: &InteractionMatrix,
    tables: &LoadedTables,
) -> Result<(ComponentSpecKind, ComponentInputData)> {
    let side_str = match side {
        SideName::User => "user",
        SideName::Item => "item",
    };
    match plan {
        ComponentPlan::Static {
            source,
            layers,
            width_increment,
            activation,
            output_activation,
            corruption,
        } => {
            let rows: DenseMatrix = match source {
                ComponentSource::BuiltinDemographics => {
                    tables
                        .user_side
                        .as_ref()
                        .ok_or_else(|| {
                            DhaError::ConfigInvalid("dataset provides no demographics table".into())
                        })?
                        .align(ids)
                        .0
                }
                ComponentSource::BuiltinContent => {
                    tables
                        .item_side
                        .as_ref()
                        .ok_or_else(|| {
                            DhaError::ConfigInvalid("dataset provides no content table".into())
                        })?
                        .align(ids)
                        .0
                }
                ComponentSource::BuiltinRatings => match side {
                    SideName::User => dense_from_interactions(train),
                    SideName::Item => dense_from_interactions(&train.transposed()),
                },
                ComponentSource::Embeddings(path) => load_embeddings(path)?.align(ids).0,
                ComponentSource::SyntheticSide => {
                    let table = match side {
                        SideName::User => &tables.user_side,
                        SideName::Item => &tables.item_side,
                    };
                    table
                        .as_ref()
                        .ok_or_else(|| {
                            DhaError::ConfigInvalid("generator produced no side table".into())
                        })?
                        .align(ids)
                        .0
                }
                other => {
                    return Err(DhaError::ConfigInvalid(format!(
                        "components.{side_str}: {other:?} cannot feed a static component"
                    )));
                }
            };
            let spec = ComponentSpec {
                component_id: id,
                input_dim: rows.cols(),
                total_layers: *layers,
                mid_dim: d,
                width_increment: *width_increment,
                activation: *activation,
                output_activation: *output_activation,
                corruption: *corruption,
            };
            Ok((
                ComponentSpecKind::Static(spec),
                ComponentInputData::Static(rows),
            ))
        }
        ComponentPlan::Sequential {
            source,
            time_steps,
            embedding_dim,
            hidden_dim,
        } => {
            let (vocab_size, fitted): (usize, Vec<TokenSequence>) = match source {
                ComponentSource::Sequences(path) => {
                    let ds = load_sequences(path, *time_steps)?;
                    (ds.vocab_size(), ds.align(ids))
                }
                ComponentSource::SyntheticSequences => {
                    let ds = tables.user_seqs.as_ref().ok_or_else(|| {
                        DhaError::ConfigInvalid("generator produced no sequences".into())
                    })?;
                    let refit = ds
                        .align(ids)
                        .into_iter()
                        .map(|s| TokenSequence::fit_to(s.entity_id, &s.tokens, *time_steps))
                        .collect();
                    (ds.vocab_size(), refit)
                }
                other => {
                    return Err(DhaError::ConfigInvalid(format!(
                        "components.{side_str}: {other:?} cannot feed a sequential component"
                    )));
                }
            };
            let spec = SequenceSpec {
                component_id: id,
                vocab_size,
                embedding_dim: *embedding_dim,
                hidden_dim: *hidden_dim,
                time_steps: *time_steps,
            };
            Ok((
                ComponentSpecKind::Sequential(spec),
                ComponentInputData::Sequential(fitted),
            ))
        }
    }
}

/// Load (or generate) the configured dataset, split it, and build every
/// component's spec and input rows. `split_seed` overrides the configured
/// holdout seed when given.
pub fn prepare(cfg: &RunConfig, split_seed: Option<u64>) -> Result<PreparedData> {
    let (ratings, tables): (RatingsDataset, LoadedTables) = match cfg.data.format.as_str() {
        "synthetic" => {
            let synth_cfg = cfg
                .data
                .synthetic
                .as_ref()
                .expect("validated: synthetic table present");
            let synth = synth_generate(synth_cfg, cfg.seed)?;
            (
                synth.ratings,
                LoadedTables {
                    user_side: Some(synth.user_side),
                    item_side: Some(synth.item_side),
                    user_seqs: Some(synth.user_seqs),
                },
            )
        }
        "movielens-100k" => {
            let dir = cfg.data.path.as_ref().expect("validated: path present");
            let (ratings, user_side, item_side) = load_movielens_100k(dir)?;
            (
                ratings,
                LoadedTables {
                    user_side: Some(user_side),
                    item_side: Some(item_side),
                    user_seqs: None,
                },
            )
        }
        "triples" => {
            let path = cfg.data.path.as_ref().expect("validated: path present");
            (
                load_ratings(path)?,
                LoadedTables {
                    user_side: None,
                    item_side: None,
                    user_seqs: None,
                },
            )
        }
        other => {
            return Err(DhaError::ConfigInvalid(format!(
                "unknown data format '{other}'"
            )));
        }
    };

    let seed = split_seed.unwrap_or_else(|| cfg.split_seed());
    let split = split_holdout(&ratings, cfg.data.split_ratio, seed)?;
    let train = split.train.interactions()?;
    let test = split.test.interactions()?;

    let mut next_id = 0u32;
    let mut sides = Vec::with_capacity(2);
    for side in [SideName::User, SideName::Item] {
        let ids: &[u32] = match side {
            SideName::User => &ratings.user_ids,
            SideName::Item => &ratings.item_ids,
        };
        let mut specs = Vec::new();
        let mut inputs = Vec::new();
        for plan in cfg.component_plans(side)? {
            let (spec, input) =
                resolve_component(&plan, next_id, side, cfg.model.d, ids, &train, &tables)?;
            next_id += 1;
            specs.push(spec);
            inputs.push(input);
        }
        sides.push((specs, inputs));
    }
    let (item_specs, item_inputs) = sides.pop().expect("two sides");
    let (user_specs, user_inputs) = sides.pop().expect("two sides");

    Ok(PreparedData {
        train,
        test,
        user_data: SideData::new(user_inputs),
        item_data: SideData::new(item_inputs),
        user_components: user_specs,
        item_components: item_specs,
        user_ids: ratings.user_ids,
        item_ids: ratings.item_ids,
    })
}

/// Resolve the full training configuration (hyperparameters, component
/// specs, schedule) from a run config and its prepared data.
pub fn train_config(cfg: &RunConfig, prepared: &PreparedData) -> Result<TrainConfig> {
    let mut tc = TrainConfig::new(
        cfg.hyperparams()?,
        prepared.user_components.clone(),
        prepared.item_components.clone(),
    );
    tc.alternations = cfg.schedule.alternations;
    tc.epochs = cfg.schedule.epochs;
    tc.pretrain_epochs = cfg.schedule.pretrain_epochs;
    tc.learning_rate = cfg.schedule.learning_rate;
    tc.user_batch = cfg.schedule.user_batch;
    tc.item_batch = cfg.schedule.item_batch;
    tc.seed = cfg.seed;
    tc.fusion_activation = cfg.fusion_activation();
    tc.fusion_extra_layer = cfg.model.fusion_extra_layer;
    Ok(tc)
}

/// Artifacts written by a training run, all under the output directory.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub records: Vec<LossRecord>,
    /// checkpoint-NN.dha, one per alternation, in order.
    pub checkpoints: Vec<PathBuf>,
    /// Copy of the final checkpoint under a stable name.
    pub model_path: PathBuf,
    pub loss_log_path: PathBuf,
    pub config_snapshot_path: PathBuf,
}

/// Train per the config, writing one checkpoint per alternation plus a
/// stable `model.dha`, the loss log, and a snapshot of the resolved config.
pub fn train_run(cfg: &RunConfig, out_dir: &Path) -> Result<(TrainOutcome, PreparedData)> {
    let prepared = prepare(cfg, None)?;
    let tc = train_config(cfg, &prepared)?;
    std::fs::create_dir_all(out_dir)?;

    let snapshot = toml::to_string_pretty(cfg)
        .map_err(|e| DhaError::ConfigInvalid(format!("config snapshot failed: {e}")))?;
    let config_snapshot_path = out_dir.join("config.toml");
    std::fs::write(&config_snapshot_path, snapshot)?;

    let digest = cfg.digest();
    let mut checkpoints = Vec::new();
    let (state, records) = joint_train_with(
        &tc,
        &prepared.user_data,
        &prepared.item_data,
        &prepared.train,
        |s| {
            let path = out_dir.join(format!("checkpoint-{:02}.dha", s.alternation));
            save_checkpoint(s, &digest, &path)?;
            checkpoints.push(path);
            Ok(())
        },
    )?;

    let model_path = out_dir.join("model.dha");
    save_checkpoint(&state, &digest, &model_path)?;
    let loss_log_path = out_dir.join("loss_log.tsv");
    std::fs::write(&loss_log_path, loss_log_tsv(&records))?;

    Ok((
        TrainOutcome {
            state,
            records,
            checkpoints,
            model_path,
            loss_log_path,
            config_snapshot_path,
        },
        prepared,
    ))
}

/// Load a checkpoint and fail unless it was written under this exact
/// training configuration.
pub fn load_compatible(cfg: &RunConfig, checkpoint: &Path) -> Result<ModelState> {
    let (state, digest) = load_checkpoint(checkpoint)?;
    if digest != cfg.digest() {
        return Err(DhaError::ConfigMismatch(
            "checkpoint was written under a different training configuration".into(),
        ));
    }
    if state.u.cols() != cfg.model.d {
        return Err(DhaError::ConfigMismatch(format!(
            "checkpoint factors have width {}, config says d = {}",
            state.u.cols(),
            cfg.model.d
        )));
    }
    Ok(state)
}

/// Evaluate a checkpoint on the configured holdout. `split_seed` overrides
/// the split used to carve the test set.
pub fn eval_run(
    cfg: &RunConfig,
    checkpoint: &Path,
    split_seed: Option<u64>,
) -> Result<MetricsReport> {
    let state = load_compatible(cfg, checkpoint)?;
    let prepared = prepare(cfg, split_seed)?;
    if state.u.rows() != prepared.train.num_users() || state.v.rows() != prepared.train.num_items()
    {
        return Err(DhaError::ConfigMismatch(format!(
            "checkpoint covers {}x{} entities, dataset has {}x{}",
            state.u.rows(),
            state.v.rows(),
            prepared.train.num_users(),
            prepared.train.num_items()
        )));
    }
    evaluate(
        &state.u,
        &state.v,
        &prepared.train,
        &prepared.test,
        &cfg.eval.m_values,
    )
}

/// Top-M items for one user (by original id), training items excluded.
/// Returns (rank, original item id, score) with rank starting at 1.
pub fn recommend_run(
    cfg: &RunConfig,
    checkpoint: &Path,
    user_id: u32,
    top_m: usize,
) -> Result<Vec<(usize, u32, f64)>> {
    if top_m == 0 {
        return Err(DhaError::ConfigInvalid("top-m must be >= 1".into()));
    }
    let state = load_compatible(cfg, checkpoint)?;
    let prepared = prepare(cfg, None)?;
    let user = prepared
        .user_index(user_id)
        .ok_or(DhaError::UnknownUser(user_id))?;
    let ranked = rank_candidates(&state.u, &state.v, &prepared.train, user)?;
    Ok(ranked
        .items
        .iter()
        .zip(&ranked.scores)
        .take(top_m)
        .enumerate()
        .map(|(k, (&j, &score))| (k + 1, prepared.item_ids[j as usize], score))
        .collect())
}

/// Train and evaluate one grid cell per combination of the configured axes,
/// returning one TSV line per cell:
/// `lr<TAB>lambda_f<TAB>lambda_w<TAB>corruption<TAB>map@M<TAB>value`.
pub fn grid_run(cfg: &RunConfig) -> Result<Vec<String>> {
    let (lrs, lfs, lws, cors) = cfg.grid_axes();
    let report_m = *cfg.eval.m_values.last().expect("validated: non-empty");
    let mut lines = Vec::new();
    for &lr in &lrs {
        for &lf in &lfs {
            for &lw in &lws {
                for &cor in &cors {
                    let mut cell = cfg.clone();
                    cell.schedule.learning_rate = lr;
                    cell.hyperparams.lambda_f = lf;
                    cell.hyperparams.lambda_w = lw;
                    for c in cell
                        .components
                        .user
                        .iter_mut()
                        .chain(cell.components.item.iter_mut())
                    {
                        if c.kind == "static" {
                            c.corruption = Some(cor);
                        }
                    }
                    cell.grid = None;
                    cell.validate()?;
                    let prepared = prepare(&cell, None)?;
                    let tc = train_config(&cell, &prepared)?;
                    let (state, _) = joint_train(
                        &tc,
                        &prepared.user_data,
                        &prepared.item_data,
                        &prepared.train,
                    )?;
                    let report = evaluate(
                        &state.u,
                        &state.v,
                        &prepared.train,
                        &prepared.test,
                        &cell.eval.m_values,
                    )?;
                    let idx = report
                        .m_values
                        .iter()
                        .position(|&m| m == report_m)
                        .expect("requested M present");
                    let map = report.map[idx];
                    lines.push(format!("{lr}\t{lf}\t{lw}\t{cor}\tmap@{report_m}\t{map:.6}"));
                }
            }
        }
    }
    Ok(lines)
}
