//! Release acceptance suite. Each test checks one shipping criterion at its
//! stated tolerance and runtime budget and prints a single pass/fail line
//! (visible with `--nocapture`, or automatically on failure).

// The dense-solve oracle uses naive index loops on purpose: the indices must
// line up across separate matrices, and sharing nothing with the library's
// linear algebra is the point.
#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dha::cf::{
    cf_objective, update_item_factors, update_user_factors, wmf_train, CfHyperparams,
    ConfidenceMode, InteractionMatrix,
};
use dha::config::RunConfig;
use dha::eval::{average_precision_at_m, evaluate, recall_at_m, MetricsReport, RankedList};
use dha::gradcheck::{run_gradcheck, DEFAULT_TOLERANCE};
use dha::math::DenseMatrix;
use dha::pipeline::{prepare, train_config, train_run};
use dha::rng::SeededRng;
use dha::trainer::joint_train;

fn report(n: usize, label: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {n}/8 {label}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "acceptance {n} ({label}) failed: {detail}");
}

/// 1. Every parameter tensor of the autoencoders, the sequence network, and
///    the fusion layers passes central finite differences at rel err ≤ 1e-4,
///    in under 30 seconds.
#[test]
fn gradient_oracle_suite() {
    let start = Instant::now();
    let cfg = RunConfig::from_toml(
        r#"
seed = 7
[data]
format = "synthetic"
[data.synthetic]
users = 10
items = 10
[model]
d = 4
fusion_extra_layer = true
[[components.user]]
kind = "static"
source = "synthetic:side"
corruption = 0.2
activation = "sigmoid"
[[components.user]]
kind = "sequential"
source = "synthetic:sequences"
time_steps = 4
[[components.item]]
kind = "static"
source = "synthetic:side"
corruption = 0.0
activation = "tanh"
output_activation = "sigmoid"
[hyperparams]
lambda_f = 0.1
lambda_w = 0.01
[schedule]
learning_rate = 0.05
"#,
    )
    .unwrap();
    let reports = run_gradcheck(&cfg, 11, None).unwrap();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap();
    let elapsed = start.elapsed();
    let pass = reports.iter().all(|r| r.passes(DEFAULT_TOLERANCE)) && elapsed.as_secs() < 30;
    report(
        1,
        "gradient oracle suite",
        pass,
        &format!(
            "{} tensors, worst {} at {:.3e}, {:.2?}",
            reports.len(),
            worst.name,
            worst.max_rel_err,
            elapsed
        ),
    );
}

/// Dense Gauss-Jordan solve with partial pivoting, independent of the
/// library's Cholesky path.
fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, &rhs)| {
            let mut r = row.clone();
            r.push(rhs);
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        assert!(p.abs() > 1e-12, "singular oracle system");
        for k in col..=n {
            m[col][k] /= p;
        }
        for row in 0..n {
            if row != col {
                let f = m[row][col];
                for k in col..=n {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    (0..n).map(|i| m[i][n]).collect()
}

/// Fully materialized rating grid; 0.0 marks unobserved cells.
struct DenseInstance {
    r: Vec<Vec<f64>>,
}

impl DenseInstance {
    /// Brute-force refit of one row of the confidence-weighted ridge
    /// objective, by assembling the dense normal equations and solving them
    /// with Gauss-Jordan.
    fn oracle_row(
        &self,
        e: usize,
        fixed: &DenseMatrix,
        anchor: Option<&[f64]>,
        lambda_anchor: f64,
        hp: &CfHyperparams,
    ) -> Vec<f64> {
        let d = hp.d;
        let n = fixed.rows();
        let mut a = vec![vec![0.0; d]; d];
        let mut b = vec![0.0; d];
        for j in 0..n {
            let r = self.r[e][j];
            let observed = r > 0.0;
            let (c, t) = match hp.mode {
                ConfidenceMode::Implicit => (1.0 + hp.alpha * r, if observed { 1.0 } else { 0.0 }),
                ConfidenceMode::Explicit => {
                    if !observed {
                        continue;
                    }
                    (1.0, r)
                }
            };
            let f = fixed.row(j);
            for p in 0..d {
                for q in 0..d {
                    a[p][q] += c * f[p] * f[q];
                }
                b[p] += c * t * f[p];
            }
        }
        for p in 0..d {
            a[p][p] += hp.lambda_f + lambda_anchor;
            if let Some(anc) = anchor {
                b[p] += lambda_anchor * anc[p];
            }
        }
        dense_solve(&a, &b)
    }

    /// Gradient of the confidence-weighted square + ridge + anchor terms
    /// with respect to one row.
    fn row_gradient(
        &self,
        e: usize,
        row: &[f64],
        fixed: &DenseMatrix,
        anchor: Option<&[f64]>,
        lambda_anchor: f64,
        hp: &CfHyperparams,
    ) -> Vec<f64> {
        let d = hp.d;
        let mut g = vec![0.0; d];
        for j in 0..fixed.rows() {
            let r = self.r[e][j];
            let observed = r > 0.0;
            let (c, t) = match hp.mode {
                ConfidenceMode::Implicit => (1.0 + hp.alpha * r, if observed { 1.0 } else { 0.0 }),
                ConfidenceMode::Explicit => {
                    if !observed {
                        continue;
                    }
                    (1.0, r)
                }
            };
            let f = fixed.row(j);
            let pred: f64 = row.iter().zip(f).map(|(&a, &b)| a * b).sum();
            for p in 0..d {
                g[p] += -2.0 * c * (t - pred) * f[p];
            }
        }
        for p in 0..d {
            g[p] += 2.0 * hp.lambda_f * row[p];
            if let Some(anc) = anchor {
                g[p] += 2.0 * lambda_anchor * (row[p] - anc[p]);
            }
        }
        g
    }
}

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m.set(r, c, rng.next_gaussian());
        }
    }
    m
}

/// 2. Closed-form factor refits match a brute-force dense ridge oracle to
///    ‖Δ‖∞ ≤ 1e-8, and the refit rows are stationary points of the
///    factorization terms (scaled gradient ≤ 1e-8), in under 5 seconds.
#[test]
fn closed_form_matches_dense_ridge_oracle() {
    let start = Instant::now();
    let mut rng = SeededRng::labeled(99, "ridge-oracle");
    let mut worst_delta: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    let mut cases = 0;
    for trial in 0..24 {
        let m = 2 + (rng.next_below(9) as usize);
        let n = 2 + (rng.next_below(9) as usize);
        let d = 1 + (rng.next_below(5) as usize);
        let mode = if trial % 2 == 0 {
            ConfidenceMode::Implicit
        } else {
            ConfidenceMode::Explicit
        };
        let lambda_anchor = if trial % 3 == 0 { 0.0 } else { 0.4 };
        let hp = CfHyperparams {
            d,
            lambda_f: 0.3,
            lambda_u: lambda_anchor,
            lambda_v: lambda_anchor,
            lambda_m: 1.0,
            lambda_n: 1.0,
            lambda_w: 0.0,
            alpha: 8.0,
            mode,
        };
        let mut r = vec![vec![0.0; n]; m];
        let mut triples = Vec::new();
        for (i, row) in r.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                if rng.next_unit_f64() < 0.4 {
                    let rating = 1.0 + rng.next_below(5) as f64;
                    *cell = rating;
                    triples.push((i as u32, j as u32, rating));
                }
            }
        }
        if triples.is_empty() {
            triples.push((0, 0, 3.0));
            r[0][0] = 3.0;
        }
        let inter = InteractionMatrix::from_triples(m, n, &triples).unwrap();
        let u0 = random_matrix(&mut rng, m, d);
        let v0 = random_matrix(&mut rng, n, d);
        let au = random_matrix(&mut rng, m, d);
        let av = random_matrix(&mut rng, n, d);
        let instance = DenseInstance { r };
        let transposed = DenseInstance {
            r: (0..n)
                .map(|j| (0..m).map(|i| instance.r[i][j]).collect())
                .collect(),
        };

        let u1 = update_user_factors(&v0, &inter, Some(&au), &hp).unwrap();
        let v1 = update_item_factors(&u0, &inter, Some(&av), &hp).unwrap();

        for i in 0..m {
            let anchor = (lambda_anchor != 0.0).then(|| au.row(i));
            let want = instance.oracle_row(i, &v0, anchor, lambda_anchor, &hp);
            for (p, &w) in want.iter().enumerate() {
                worst_delta = worst_delta.max((u1.get(i, p) - w).abs());
            }
            let g = instance.row_gradient(i, u1.row(i), &v0, anchor, lambda_anchor, &hp);
            let norm = u1.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            let ginf = g.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()));
            worst_grad = worst_grad.max(ginf / (1.0 + norm));
            cases += 1;
        }
        for j in 0..n {
            let anchor = (lambda_anchor != 0.0).then(|| av.row(j));
            let want = transposed.oracle_row(j, &u0, anchor, lambda_anchor, &hp);
            for (p, &w) in want.iter().enumerate() {
                worst_delta = worst_delta.max((v1.get(j, p) - w).abs());
            }
            let g = transposed.row_gradient(j, v1.row(j), &u0, anchor, lambda_anchor, &hp);
            let norm = v1.row(j).iter().map(|x| x * x).sum::<f64>().sqrt();
            let ginf = g.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()));
            worst_grad = worst_grad.max(ginf / (1.0 + norm));
            cases += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_delta <= 1e-8 && worst_grad <= 1e-8 && elapsed.as_secs() < 5;
    report(
        2,
        "closed-form vs dense ridge oracle",
        pass,
        &format!(
            "{cases} rows, ‖Δ‖∞ = {worst_delta:.2e}, scaled stationarity = {worst_grad:.2e}, {elapsed:.2?}"
        ),
    );
}

fn standin_toml(users: usize, items: usize, positives: usize, ratio: f64) -> String {
    format!(
        r#"
seed = 42
[data]
format = "synthetic"
split_ratio = {ratio}
[data.synthetic]
users = {users}
items = {items}
d_true = 3
noise = 0.05
side_corr = 1.0
positives_per_user = {positives}
user_side_dim = 12
item_side_dim = 12
vocab_tokens = 8
seq_len = 6
[model]
d = 8
[[components.user]]
kind = "static"
source = "synthetic:side"
corruption = 0.1
[[components.user]]
kind = "sequential"
source = "synthetic:sequences"
time_steps = 6
embedding_dim = 8
[[components.item]]
kind = "static"
source = "synthetic:side"
corruption = 0.1
[hyperparams]
lambda_f = 0.1
lambda_u = 20.0
lambda_v = 20.0
lambda_w = 0.001
alpha = 10.0
[schedule]
alternations = 5
epochs = 5
pretrain_epochs = 5
learning_rate = 0.05
user_batch = 50
item_batch = 50
[eval]
m_values = [50, 100]
"#
    )
}

/// 3. With the anchor and reconstruction weights all zero, joint training
///    degenerates to the plain weighted factorization: identical bits.
#[test]
fn decoupled_training_reduces_to_wmf() {
    let toml = standin_toml(40, 30, 5, 0.3)
        .replace("lambda_u = 20.0", "lambda_u = 0.0")
        .replace("lambda_v = 20.0", "lambda_v = 0.0")
        .replace("alternations = 5", "alternations = 3")
        .replace(
            "lambda_w = 0.001",
            "lambda_w = 0.001\nlambda_m = 0.0\nlambda_n = 0.0",
        );
    let cfg = RunConfig::from_toml(&toml).unwrap();
    let prepared = prepare(&cfg, None).unwrap();
    let tc = train_config(&cfg, &prepared).unwrap();
    let (state, _) = joint_train(
        &tc,
        &prepared.user_data,
        &prepared.item_data,
        &prepared.train,
    )
    .unwrap();
    let (bu, bv) = wmf_train(
        &prepared.train,
        &tc.hyper,
        tc.alternations as usize,
        tc.seed,
    )
    .unwrap();
    let pass = state.u.as_slice() == bu.as_slice() && state.v.as_slice() == bv.as_slice();
    report(
        3,
        "decoupled training reduces to plain WMF",
        pass,
        &format!(
            "{}x{} factors bit-compared over {} sweeps",
            state.u.rows(),
            state.v.rows(),
            tc.alternations
        ),
    );
}

/// 4. Planted-factor recovery: perfect side channels, light rating noise —
///    held-out recall@10 ≥ 0.9 where random ranking sits near 0.1. Under 2 min.
#[test]
fn synthetic_recovery_beats_random() {
    let start = Instant::now();
    let toml = r#"
seed = 42
[data]
format = "synthetic"
split_ratio = 0.2
[data.synthetic]
users = 200
items = 100
d_true = 3
noise = 0.05
side_corr = 1.0
positives_per_user = 25
user_side_dim = 12
item_side_dim = 12
vocab_tokens = 8
seq_len = 6
[model]
d = 8
[[components.user]]
kind = "static"
source = "synthetic:side"
corruption = 0.1
[[components.user]]
kind = "sequential"
source = "synthetic:sequences"
time_steps = 6
embedding_dim = 8
[[components.item]]
kind = "static"
source = "synthetic:side"
corruption = 0.1
[hyperparams]
lambda_f = 0.1
lambda_u = 5.0
lambda_v = 5.0
lambda_w = 0.001
alpha = 10.0
[schedule]
alternations = 5
epochs = 5
pretrain_epochs = 5
learning_rate = 0.05
user_batch = 50
item_batch = 50
[eval]
m_values = [10]
"#;
    let cfg = RunConfig::from_toml(toml).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (out, prepared) = train_run(&cfg, dir.path()).unwrap();
    let learned = evaluate(
        &out.state.u,
        &out.state.v,
        &prepared.train,
        &prepared.test,
        &[10],
    )
    .unwrap();

    let mut rng = SeededRng::labeled(7, "random-baseline");
    let ru = random_matrix(&mut rng, prepared.train.num_users(), 8);
    let rv = random_matrix(&mut rng, prepared.train.num_items(), 8);
    let random = evaluate(&ru, &rv, &prepared.train, &prepared.test, &[10]).unwrap();

    let elapsed = start.elapsed();
    let pass = learned.recall[0] >= 0.9 && random.recall[0] < 0.3 && elapsed.as_secs() < 120;
    report(
        4,
        "synthetic recovery",
        pass,
        &format!(
            "recall@10 = {:.4} (random ranking {:.4}), {:.2?}",
            learned.recall[0], random.recall[0], elapsed
        ),
    );
}

fn naive_recall(items: &[u32], relevant: &BTreeSet<u32>, m: usize) -> f64 {
    let hits = items
        .iter()
        .take(m)
        .filter(|j| relevant.contains(j))
        .count();
    hits as f64 / relevant.len() as f64
}

fn naive_ap(items: &[u32], relevant: &BTreeSet<u32>, m: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, j) in items.iter().take(m).enumerate() {
        if relevant.contains(j) {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / relevant.len().min(m) as f64
}

/// 5. Ranking metrics agree exactly (bitwise) with an independent naive
///    implementation on 1,000 random cases, and the hand-worked example
///    AP = 0.833333 reproduces.
#[test]
fn metric_oracle_agreement() {
    let mut rng = SeededRng::labeled(123, "metric-oracle");
    let mut checked = 0;
    for _ in 0..1000 {
        let n = 3 + rng.next_below(50) as usize;
        let mut items: Vec<u32> = (0..n as u32).collect();
        rng.shuffle(&mut items);
        let mut relevant = BTreeSet::new();
        let rel_count = 1 + rng.next_below(n as u64 / 2 + 1) as usize;
        while relevant.len() < rel_count {
            relevant.insert(rng.next_below(n as u64) as u32);
        }
        let m = 1 + rng.next_below(n as u64 + 3) as usize;
        let ranked = RankedList {
            user: 0,
            items: items.clone(),
            scores: (0..n).map(|k| (n - k) as f64).collect(),
        };
        let lib_r = recall_at_m(&ranked, &relevant, m).unwrap();
        let lib_a = average_precision_at_m(&ranked, &relevant, m).unwrap();
        assert!(
            lib_r == naive_recall(&items, &relevant, m),
            "recall diverged: n={n} m={m}"
        );
        assert!(
            lib_a == naive_ap(&items, &relevant, m),
            "AP diverged: n={n} m={m}"
        );
        checked += 1;
    }

    // relevant {a, b}, ranked [a, x, b], M = 3 → (1/1 + 2/3)/2 = 0.833333.
    let (a, x, b) = (0u32, 1u32, 2u32);
    let ranked = RankedList {
        user: 0,
        items: vec![a, x, b],
        scores: vec![3.0, 2.0, 1.0],
    };
    let relevant: BTreeSet<u32> = [a, b].into_iter().collect();
    let ap = average_precision_at_m(&ranked, &relevant, 3).unwrap();
    let exact = (ap - 5.0 / 6.0).abs() < 1e-12 && format!("{ap:.6}") == "0.833333";
    report(
        5,
        "metric oracle",
        exact && checked == 1000,
        &format!("{checked} random cases bit-identical, hand AP = {ap:.6}"),
    );
}

fn ml100k_dir() -> Option<PathBuf> {
    if let Ok(p) = std::env::var("DHA_ML100K_DIR") {
        let p = PathBuf::from(p);
        if p.join("u.data").exists() {
            return Some(p);
        }
    }
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k");
    if p.join("u.data").exists() {
        return p.canonicalize().ok();
    }
    None
}

fn ml100k_toml(dir: &Path) -> String {
    format!(
        r#"
seed = 42
[data]
format = "movielens-100k"
path = "{}"
split_ratio = 0.2
[model]
d = 50
[[components.user]]
kind = "static"
source = "builtin:demographics"
corruption = 0.3
width_increment = 20
[[components.user]]
kind = "static"
source = "builtin:ratings"
corruption = 0.3
width_increment = 20
[[components.item]]
kind = "static"
source = "builtin:content"
corruption = 0.3
width_increment = 20
[[components.item]]
kind = "static"
source = "builtin:ratings"
corruption = 0.3
width_increment = 20
[hyperparams]
lambda_f = 1.0
lambda_u = 10.0
lambda_v = 10.0
lambda_w = 0.0001
alpha = 40.0
[schedule]
alternations = 3
epochs = 2
pretrain_epochs = 2
learning_rate = 0.02
user_batch = 64
item_batch = 64
[eval]
m_values = [50, 100]
"#,
        dir.display()
    )
}

/// Train the full model and the plain WMF baseline in the same harness on
/// the same split, and evaluate both at the config's M values.
fn side_info_vs_baseline(cfg: &RunConfig) -> (MetricsReport, MetricsReport) {
    let dir = tempfile::tempdir().unwrap();
    let (out, prepared) = train_run(cfg, dir.path()).unwrap();
    let m_values = &cfg.eval.m_values;
    let full = evaluate(
        &out.state.u,
        &out.state.v,
        &prepared.train,
        &prepared.test,
        m_values,
    )
    .unwrap();
    let hp = cfg.hyperparams().unwrap();
    let (bu, bv) = wmf_train(
        &prepared.train,
        &hp,
        cfg.schedule.alternations as usize,
        cfg.seed,
    )
    .unwrap();
    let base = evaluate(&bu, &bv, &prepared.train, &prepared.test, m_values).unwrap();
    (full, base)
}

/// 6. The full model clearly beats the no-side-info baseline trained in the
///    same harness: MAP@100 at least 20% higher (relative) and recall@50
///    strictly higher. Runs against ml-100k when the dataset is present (set
///    DHA_ML100K_DIR or place it at data/ml-100k); otherwise a sparse planted
///    stand-in with the same qualitative shape is used. Under 15 min.
#[test]
fn heterogeneous_model_beats_plain_wmf() {
    let start = Instant::now();
    let (label, cfg) = match ml100k_dir() {
        Some(dir) => (
            "ml-100k 80/20",
            RunConfig::from_toml(&ml100k_toml(&dir)).unwrap(),
        ),
        None => {
            println!(
                "ACCEPTANCE 6/8 note: ml-100k not found (set DHA_ML100K_DIR or place the \
                 dataset at data/ml-100k); using the sparse planted stand-in"
            );
            (
                "planted stand-in",
                RunConfig::from_toml(&standin_toml(300, 600, 3, 0.67)).unwrap(),
            )
        }
    };
    let (full, base) = side_info_vs_baseline(&cfg);
    let i50 = full.m_values.iter().position(|&m| m == 50).unwrap();
    let i100 = full.m_values.iter().position(|&m| m == 100).unwrap();
    let (full_map, full_rec) = (full.map[i100], full.recall[i50]);
    let (base_map, base_rec) = (base.map[i100], base.recall[i50]);
    let elapsed = start.elapsed();
    let ratio = full_map / base_map.max(1e-12);
    let soft = (0.12..=0.30).contains(&full_map);
    let pass = ratio >= 1.2 && full_rec > base_rec && elapsed.as_secs() < 900;
    report(
        6,
        "side information beats plain WMF",
        pass,
        &format!(
            "{label}: MAP@100 {full_map:.4} vs {base_map:.4} ({ratio:.2}x), recall@50 \
             {full_rec:.4} vs {base_rec:.4}, soft MAP window [0.12, 0.30] {}, {elapsed:.2?}",
            if soft { "met" } else { "not met (non-gating)" }
        ),
    );
}

/// 7. Two identically seeded runs produce byte-identical checkpoints and
///    identical metric lines.
#[test]
fn determinism_across_runs() {
    let cfg = match ml100k_dir() {
        Some(dir) => RunConfig::from_toml(&ml100k_toml(&dir)).unwrap(),
        None => RunConfig::from_toml(&standin_toml(120, 80, 4, 0.4)).unwrap(),
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (o1, p1) = train_run(&cfg, d1.path()).unwrap();
    let (o2, p2) = train_run(&cfg, d2.path()).unwrap();

    let mut identical =
        std::fs::read(&o1.model_path).unwrap() == std::fs::read(&o2.model_path).unwrap();
    assert_eq!(o1.checkpoints.len(), o2.checkpoints.len());
    for (a, b) in o1.checkpoints.iter().zip(&o2.checkpoints) {
        identical &= std::fs::read(a).unwrap() == std::fs::read(b).unwrap();
    }
    let m = &cfg.eval.m_values;
    let r1 = evaluate(&o1.state.u, &o1.state.v, &p1.train, &p1.test, m).unwrap();
    let r2 = evaluate(&o2.state.u, &o2.state.v, &p2.train, &p2.test, m).unwrap();
    let same_lines = r1.lines() == r2.lines();
    report(
        7,
        "byte-identical reruns",
        identical && same_lines,
        &format!(
            "{} checkpoint files compared, metric lines equal: {same_lines}",
            o1.checkpoints.len() + 1
        ),
    );
}

/// 8. Each closed-form half-sweep never increases the factorization part of
///    the objective (slack 1e-10), read back from the trainer's loss log.
#[test]
fn half_sweeps_never_increase_cf_loss() {
    let cfg = RunConfig::from_toml(&standin_toml(60, 40, 5, 0.3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (out, prepared) = train_run(&cfg, dir.path()).unwrap();
    let log = std::fs::read_to_string(&out.loss_log_path).unwrap();

    let mut per_alt: std::collections::BTreeMap<u32, [Option<f64>; 3]> = Default::default();
    for line in log.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let alt: u32 = f[0].parse().unwrap();
        let slot = match f[2] {
            "cf_before_sweeps" => 0,
            "cf_after_user_sweep" => 1,
            "cf_after_item_sweep" => 2,
            _ => continue,
        };
        per_alt.entry(alt).or_default()[slot] = Some(f[3].parse().unwrap());
    }
    let mut checked = 0u32;
    let mut ok = true;
    for (alt, vals) in &per_alt {
        let [before, after_u, after_v] = vals.map(|v| v.expect("phase missing from log"));
        if after_u > before + 1e-10 || after_v > after_u + 1e-10 {
            ok = false;
            println!("alternation {alt}: {before} → {after_u} → {after_v}");
        }
        checked += 1;
    }
    // The trained factors must evaluate to a finite anchor-free objective.
    let mut hp = cfg.hyperparams().unwrap();
    hp.lambda_u = 0.0;
    hp.lambda_v = 0.0;
    let fresh = cf_objective(&out.state.u, &out.state.v, &prepared.train, None, None, &hp);
    let finite = fresh.map(|v| v.is_finite()).unwrap_or(false);
    report(
        8,
        "half-sweeps never increase the factorization objective",
        ok && checked == cfg.schedule.alternations && finite,
        &format!("{checked} alternations × 2 half-sweeps, slack 1e-10"),
    );
}
