//! Confidence-weighted matrix factorization with latent anchors.
//!
//! Users and items get d-dimensional factor vectors whose dot product
//! predicts interaction strength. Two feedback conventions are supported:
//!
//! - **Implicit**: every (user, item) pair participates. Observed events get
//!   target 1 with confidence c = 1 + α·r; unobserved pairs get target 0
//!   with confidence 1. The α-heavy weighting is what lets a handful of
//!   positives outvote the ocean of zeros.
//! - **Explicit**: only observed ratings participate, target r, confidence 1.
//!
//! Factors are optionally *anchored*: a penalty λ_u‖u_i − h_i‖² pulls each
//! factor toward a latent vector h_i produced by the feature networks. Both
//! the ridge term and the anchor keep the per-row normal equations strictly
//! positive definite, so each row has an exact closed-form minimizer — no
//! learning rate, no iteration. Updates sweep rows coordinate-descent style.

use crate::error::{DhaError, Result};
use crate::math::{solve_spd, DenseMatrix, DenseVector};
use crate::rng::SeededRng;

/// Row-per-entity factor matrix (m×d for users, n×d for items).
pub type FactorMatrix = DenseMatrix;

/// How ratings translate into (target, confidence) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceMode {
    Implicit,
    Explicit,
}

/// Weights of every term in the joint objective, plus the factor dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct CfHyperparams {
    pub d: usize,
    /// Ridge on factor magnitudes.
    pub lambda_f: f64,
    /// Anchor strength pulling user factors toward their fused latents.
    pub lambda_u: f64,
    /// Anchor strength for item factors.
    pub lambda_v: f64,
    /// Reconstruction weight for user-side components.
    pub lambda_m: f64,
    /// Reconstruction weight for item-side components.
    pub lambda_n: f64,
    /// Weight decay on network parameters.
    pub lambda_w: f64,
    /// Confidence slope for implicit feedback: c = 1 + α·r.
    pub alpha: f64,
    pub mode: ConfidenceMode,
}

impl CfHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(DhaError::ConfigInvalid("latent_dim must be >= 1".into()));
        }
        for (name, v) in [
            ("lambda_f", self.lambda_f),
            ("lambda_u", self.lambda_u),
            ("lambda_v", self.lambda_v),
            ("lambda_m", self.lambda_m),
            ("lambda_n", self.lambda_n),
            ("lambda_w", self.lambda_w),
            ("confidence_alpha", self.alpha),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(DhaError::ConfigInvalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.lambda_f + self.lambda_u <= 0.0 || self.lambda_f + self.lambda_v <= 0.0 {
            return Err(DhaError::ConfigInvalid(
                "need lambda_f + lambda_u > 0 and lambda_f + lambda_v > 0 \
                 so the factor updates stay positive definite"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Confidence attached to an observed rating.
    pub fn confidence(&self, r: f64) -> Result<f64> {
        if r < 0.0 || !r.is_finite() {
            return Err(DhaError::NegativeRating(r));
        }
        Ok(match self.mode {
            ConfidenceMode::Implicit => 1.0 + self.alpha * r,
            ConfidenceMode::Explicit => 1.0,
        })
    }

    /// Regression target attached to an observed rating.
    pub fn target(&self, r: f64) -> f64 {
        match self.mode {
            ConfidenceMode::Implicit => {
                if r > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ConfidenceMode::Explicit => r,
        }
    }
}

/// Sparse user–item interactions with both row and column views.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    m: usize,
    n: usize,
    rows: Vec<Vec<(u32, f64)>>,
    cols: Vec<Vec<(u32, f64)>>,
    nnz: usize,
}

impl InteractionMatrix {
    pub fn from_triples(m: usize, n: usize, triples: &[(u32, u32, f64)]) -> Result<Self> {
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); m];
        let mut cols: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for &(i, j, r) in triples {
            if (i as usize) >= m || (j as usize) >= n {
                return Err(DhaError::IndexOutOfRange(format!(
                    "interaction ({i}, {j}) outside {m}x{n}"
                )));
            }
            if r < 0.0 || !r.is_finite() {
                return Err(DhaError::NegativeRating(r));
            }
            rows[i as usize].push((j, r));
            cols[j as usize].push((i, r));
        }
        for (i, row) in rows.iter_mut().enumerate() {
            row.sort_unstable_by_key(|&(j, _)| j);
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(DhaError::DuplicateEntry {
                        user: i as u32,
                        item: w[0].0,
                    });
                }
            }
        }
        for col in &mut cols {
            col.sort_unstable_by_key(|&(i, _)| i);
        }
        Ok(InteractionMatrix {
            m,
            n,
            rows,
            cols,
            nnz: triples.len(),
        })
    }

    pub fn num_users(&self) -> usize {
        self.m
    }

    pub fn num_items(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    /// Observed (item, rating) pairs of one user, ascending item id.
    pub fn user_row(&self, i: usize) -> &[(u32, f64)] {
        &self.rows[i]
    }

    /// Observed (user, rating) pairs of one item, ascending user id.
    pub fn item_col(&self, j: usize) -> &[(u32, f64)] {
        &self.cols[j]
    }

    /// All triples (user, item, rating) in row-major order.
    pub fn triples(&self) -> Vec<(u32, u32, f64)> {
        let mut out = Vec::with_capacity(self.nnz);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, r) in row {
                out.push((i as u32, j, r));
            }
        }
        out
    }

    /// The same interactions with users and items swapped.
    pub fn transposed(&self) -> InteractionMatrix {
        InteractionMatrix {
            m: self.n,
            n: self.m,
            rows: self.cols.clone(),
            cols: self.rows.clone(),
            nnz: self.nnz,
        }
    }
}

/// Initialize U (m×d) then V (n×d), i.i.d. uniform on [−0.05, 0.05], from the
/// dedicated "factors" stream of the master seed. Standalone baselines and
/// the full model share this exact draw order, which is what makes them
/// comparable bit-for-bit.
pub fn init_factors(m: usize, n: usize, d: usize, seed: u64) -> (FactorMatrix, FactorMatrix) {
    let mut rng = SeededRng::labeled(seed, "factors");
    let mut u = DenseMatrix::zeros(m, d);
    for v in u.as_mut_slice() {
        *v = rng.uniform(-0.05, 0.05);
    }
    let mut v = DenseMatrix::zeros(n, d);
    for x in v.as_mut_slice() {
        *x = rng.uniform(-0.05, 0.05);
    }
    (u, v)
}

/// Predicted affinity: the dot product u_i · v_j.
pub fn predict(u: &FactorMatrix, v: &FactorMatrix, i: usize, j: usize) -> Result<f64> {
    if i >= u.rows() || j >= v.rows() {
        return Err(DhaError::IndexOutOfRange(format!(
            "predict({i}, {j}) with {} users, {} items",
            u.rows(),
            v.rows()
        )));
    }
    Ok(crate::math::dot_slices(u.row(i), v.row(j)))
}

/// Shared machinery for both sides of the alternation. `lists[e]` holds the
/// observed (other_entity, rating) pairs of entity e; `fixed` is the factor
/// matrix of the other side.
fn update_side(
    fixed: &FactorMatrix,
    lists: &[Vec<(u32, f64)>],
    anchors: Option<&DenseMatrix>,
    lambda_anchor: f64,
    hp: &CfHyperparams,
) -> Result<FactorMatrix> {
    let d = hp.d;
    if fixed.cols() != d {
        return Err(DhaError::DimensionMismatch(format!(
            "fixed factors have dim {}, hyperparams say {}",
            fixed.cols(),
            d
        )));
    }
    let use_anchor = lambda_anchor != 0.0;
    if use_anchor {
        let a = anchors.ok_or_else(|| {
            DhaError::ConfigInvalid("anchor weight nonzero but no anchors supplied".into())
        })?;
        if a.rows() != lists.len() || a.cols() != d {
            return Err(DhaError::DimensionMismatch(format!(
                "anchors are {}x{}, expected {}x{}",
                a.rows(),
                a.cols(),
                lists.len(),
                d
            )));
        }
    }

    // Implicit mode: A_e = FᵀF + Fᵀ(C_e − I)F + (λ_f + λ_anchor)I, where the
    // first term is shared across entities and the correction touches only
    // observed pairs. Explicit mode sums observed pairs directly.
    let gram = match hp.mode {
        ConfidenceMode::Implicit => Some(fixed.gram()),
        ConfidenceMode::Explicit => None,
    };

    let mut out = DenseMatrix::zeros(lists.len(), d);
    let mut a = DenseMatrix::zeros(d, d);
    for (e, observed) in lists.iter().enumerate() {
        // Reset the normal matrix to the shared base.
        match &gram {
            Some(g) => a.as_mut_slice().copy_from_slice(g.as_slice()),
            None => a.as_mut_slice().fill(0.0),
        }
        let ridge = hp.lambda_f + lambda_anchor;
        for k in 0..d {
            a.set(k, k, a.get(k, k) + ridge);
        }
        let mut b = DenseVector::zeros(d);
        for &(other, r) in observed {
            let c = hp.confidence(r)?;
            let target = hp.target(r);
            let f_row = fixed.row_vector(other as usize);
            match hp.mode {
                ConfidenceMode::Implicit => {
                    if c != 1.0 {
                        a.add_outer(c - 1.0, &f_row, &f_row);
                    }
                }
                ConfidenceMode::Explicit => {
                    a.add_outer(c, &f_row, &f_row);
                }
            }
            if target != 0.0 {
                b.add_scaled(&f_row, c * target);
            }
        }
        if use_anchor {
            let anchor = anchors.expect("checked above").row_vector(e);
            b.add_scaled(&anchor, lambda_anchor);
        }
        let solved = solve_spd(&a, &b)?;
        out.row_mut(e).copy_from_slice(solved.as_slice());
    }
    Ok(out)
}

/// Closed-form refit of every user row against fixed item factors:
/// u_i = (VᵀC_iV + (λ_f + λ_u)I)⁻¹ (VᵀC_i t_i + λ_u h_i).
pub fn update_user_factors(
    v: &FactorMatrix,
    interactions: &InteractionMatrix,
    anchors: Option<&DenseMatrix>,
    hp: &CfHyperparams,
) -> Result<FactorMatrix> {
    if v.rows() != interactions.num_items() {
        return Err(DhaError::DimensionMismatch(format!(
            "item factors have {} rows, interactions have {} items",
            v.rows(),
            interactions.num_items()
        )));
    }
    update_side(v, &interactions.rows, anchors, hp.lambda_u, hp)
}

/// Closed-form refit of every item row against fixed user factors; the exact
/// mirror of [`update_user_factors`].
pub fn update_item_factors(
    u: &FactorMatrix,
    interactions: &InteractionMatrix,
    anchors: Option<&DenseMatrix>,
    hp: &CfHyperparams,
) -> Result<FactorMatrix> {
    if u.rows() != interactions.num_users() {
        return Err(DhaError::DimensionMismatch(format!(
            "user factors have {} rows, interactions have {} users",
            u.rows(),
            interactions.num_users()
        )));
    }
    update_side(u, &interactions.cols, anchors, hp.lambda_v, hp)
}

/// The factorization's share of the joint objective:
/// Σ c·(target − u·v)² + λ_f(‖U‖² + ‖V‖²) + λ_u Σ‖u_i − h_i‖² + λ_v Σ‖v_j − h_j‖².
/// Implicit mode sums over all m×n pairs via the Gram identity
/// Σ_ij (u_i·v_j)² = Σ_i u_iᵀ(VᵀV)u_i plus per-observation corrections.
pub fn cf_objective(
    u: &FactorMatrix,
    v: &FactorMatrix,
    interactions: &InteractionMatrix,
    anchors_u: Option<&DenseMatrix>,
    anchors_v: Option<&DenseMatrix>,
    hp: &CfHyperparams,
) -> Result<f64> {
    if u.rows() != interactions.num_users() || v.rows() != interactions.num_items() {
        return Err(DhaError::DimensionMismatch(format!(
            "factors {}x{} / {}x{} vs interactions {}x{}",
            u.rows(),
            u.cols(),
            v.rows(),
            v.cols(),
            interactions.num_users(),
            interactions.num_items()
        )));
    }
    let mut data_term = 0.0;
    match hp.mode {
        ConfidenceMode::Implicit => {
            let g = v.gram();
            for i in 0..u.rows() {
                let ui = u.row_vector(i);
                let gu = g.matvec(&ui)?;
                data_term += ui.dot(&gu)?;
            }
            for i in 0..interactions.num_users() {
                for &(j, r) in interactions.user_row(i) {
                    let s = predict(u, v, i, j as usize)?;
                    let c = hp.confidence(r)?;
                    let t = hp.target(r);
                    // Replace the background (c=1, target 0) term with the
                    // observed one.
                    data_term += c * (t - s) * (t - s) - s * s;
                }
            }
        }
        ConfidenceMode::Explicit => {
            for i in 0..interactions.num_users() {
                for &(j, r) in interactions.user_row(i) {
                    let s = predict(u, v, i, j as usize)?;
                    let c = hp.confidence(r)?;
                    data_term += c * (r - s) * (r - s);
                }
            }
        }
    }
    let mut obj = data_term + hp.lambda_f * (u.frobenius_sq() + v.frobenius_sq());
    if hp.lambda_u != 0.0 {
        let h = anchors_u.ok_or_else(|| {
            DhaError::ConfigInvalid("lambda_u > 0 but no user anchors supplied".into())
        })?;
        if h.rows() != u.rows() || h.cols() != u.cols() {
            return Err(DhaError::DimensionMismatch(format!(
                "user anchors are {}x{}, factors are {}x{}",
                h.rows(),
                h.cols(),
                u.rows(),
                u.cols()
            )));
        }
        for i in 0..u.rows() {
            for k in 0..u.cols() {
                let dlt = u.get(i, k) - h.get(i, k);
                obj += hp.lambda_u * dlt * dlt;
            }
        }
    }
    if hp.lambda_v != 0.0 {
        let h = anchors_v.ok_or_else(|| {
            DhaError::ConfigInvalid("lambda_v > 0 but no item anchors supplied".into())
        })?;
        if h.rows() != v.rows() || h.cols() != v.cols() {
            return Err(DhaError::DimensionMismatch(format!(
                "item anchors are {}x{}, factors are {}x{}",
                h.rows(),
                h.cols(),
                v.rows(),
                v.cols()
            )));
        }
        for j in 0..v.rows() {
            for k in 0..v.cols() {
                let dlt = v.get(j, k) - h.get(j, k);
                obj += hp.lambda_v * dlt * dlt;
            }
        }
    }
    Ok(obj)
}

/// Plain weighted matrix factorization: no networks, no anchors. Initializes
/// factors from the "factors" stream of `seed` and alternates closed-form
/// sweeps. This is the baseline the anchored model collapses to when every
/// anchor weight is zero.
pub fn wmf_train(
    interactions: &InteractionMatrix,
    hp: &CfHyperparams,
    sweeps: usize,
    seed: u64,
) -> Result<(FactorMatrix, FactorMatrix)> {
    let mut hp = hp.clone();
    hp.lambda_u = 0.0;
    hp.lambda_v = 0.0;
    hp.validate()?;
    let (mut u, mut v) = init_factors(
        interactions.num_users(),
        interactions.num_items(),
        hp.d,
        seed,
    );
    for _ in 0..sweeps {
        u = update_user_factors(&v, interactions, None, &hp)?;
        v = update_item_factors(&u, interactions, None, &hp)?;
    }
    Ok((u, v))
}
