//! Gradient calibration across tasks and modalities.
//!
//! Inter-task calibration solves for loss weights that give the aggregated
//! shared-layer gradient equal scalar projections onto every task's
//! gradient direction. Intra-modality calibration gates the
//! larger-gradient branch with a tanh factor, smoothed by a momentum
//! update. The diagnostic ratios `gamma_task` and `gamma_modal` quantify
//! both imbalances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::{GradientMap, RegionTag};
use crate::tensor::{dot, l2_norm};

/// Threshold on |cos| above which a set of gradients counts as pairwise
/// parallel and the equal-projection system is rank-deficient.
const PARALLEL_COS_TOL: f64 = 1e-12;

/// Per-task loss weights, normalized to sum to the task count so the fully
/// symmetric case reduces to plain loss summation.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskWeights(Vec<f64>);

impl TaskWeights {
    pub fn uniform(tasks: usize) -> Self {
        TaskWeights(vec![1.0; tasks])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Smoothed modality gates with their hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntraCalibState {
    pub w_lid: f64,
    pub w_img: f64,
    /// Sharpness of the tanh gate.
    pub alpha_gate: f64,
    /// Momentum coefficient of the smoothing update.
    pub m: f64,
    /// Update counter; both gates are exactly 1 before the first update.
    pub t: u64,
}

impl IntraCalibState {
    pub fn new(alpha_gate: f64, m: f64) -> Self {
        IntraCalibState {
            w_lid: 1.0,
            w_img: 1.0,
            alpha_gate,
            m,
            t: 0,
        }
    }
}

/// Ratio of task gradient norms at the shared layer; +inf when the
/// denominator vanishes (reported, never raised mid-training).
pub fn gamma_task(g_det: &[f64], g_seg: &[f64]) -> f64 {
    let num = l2_norm(g_det);
    let den = l2_norm(g_seg);
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Ratio of fusion-split gradient norms; +inf when the image split's norm
/// vanishes.
pub fn gamma_modal(norm_lid: f64, norm_img: f64) -> f64 {
    if norm_img == 0.0 {
        f64::INFINITY
    } else {
        norm_lid / norm_img
    }
}

/// Equal-projection task weights.
///
/// Returns weights `a` (sum = T) such that `g_agg = sum_i a_i g_i` has the
/// same scalar projection onto every unit direction `g_i / ||g_i||`. For
/// two tasks the condition collapses to inverse-norm weighting; for more
/// tasks the (T-1)-equation linear system in the weight ratios is solved
/// directly. Pairwise-parallel inputs fall back to uniform weights.
pub fn imtl_weights(task_grads: &[&[f64]]) -> Result<TaskWeights> {
    let t = task_grads.len();
    if t < 2 {
        return Err(Error::Usage("imtl_weights needs at least two tasks".into()));
    }
    let dim = task_grads[0].len();
    if task_grads.iter().any(|g| g.len() != dim) {
        return Err(Error::shape(
            "imtl_weights: gradient lengths",
            dim,
            "mismatched",
        ));
    }
    let norms: Vec<f64> = task_grads.iter().map(|g| l2_norm(g)).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Degenerate(format!("task {i} gradient is zero")));
    }

    if all_pairwise_parallel(task_grads, &norms) {
        return Ok(TaskWeights::uniform(t));
    }

    let raw = if t == 2 {
        // Equal projections for two tasks reduce to a_i proportional to
        // 1/||g_i||.
        vec![1.0 / norms[0], 1.0 / norms[1]]
    } else {
        match solve_projection_system(task_grads, &norms) {
            Some(raw) => raw,
            None => return Ok(TaskWeights::uniform(t)),
        }
    };

    // A non-positive solved weight means the geometry is too degenerate for
    // equal projections to define a sensible reweighting.
    if raw.iter().any(|&a| !a.is_finite() || a <= 0.0) {
        return Ok(TaskWeights::uniform(t));
    }
    let sum: f64 = raw.iter().sum();
    Ok(TaskWeights(
        raw.iter().map(|a| a * t as f64 / sum).collect(),
    ))
}

fn all_pairwise_parallel(task_grads: &[&[f64]], norms: &[f64]) -> bool {
    for i in 0..task_grads.len() {
        for j in (i + 1)..task_grads.len() {
            let cos = dot(task_grads[i], task_grads[j]) / (norms[i] * norms[j]);
            if cos.abs() <= 1.0 - PARALLEL_COS_TOL {
                return false;
            }
        }
    }
    true
}

/// Solves the (T-1)x(T-1) system for weights 2..T with the first weight
/// pinned to 1. Returns None when the system is numerically singular.
fn solve_projection_system(task_grads: &[&[f64]], norms: &[f64]) -> Option<Vec<f64>> {
    let t = task_grads.len();
    // p[j][i] = g_j . u_i
    let mut p = vec![vec![0.0; t]; t];
    for j in 0..t {
        for i in 0..t {
            p[j][i] = dot(task_grads[j], task_grads[i]) / norms[i];
        }
    }
    let n = t - 1;
    let mut a = vec![vec![0.0; n]; n];
    let mut rhs = vec![0.0; n];
    for (row, i) in (1..t).enumerate() {
        for (col, j) in (1..t).enumerate() {
            a[row][col] = p[j][0] - p[j][i];
        }
        rhs[row] = p[0][i] - p[0][0];
    }
    let solved = gaussian_solve(&mut a, &mut rhs)?;
    let mut raw = Vec::with_capacity(t);
    raw.push(1.0);
    raw.extend(solved);
    Some(raw)
}

/// Gaussian elimination with partial pivoting for small dense systems.
fn gaussian_solve(a: &mut [Vec<f64>], rhs: &mut [f64]) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .expect("finite pivots")
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in (col + 1)..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for col in (row + 1)..n {
            acc -= a[row][col] * x[col];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Gating factor: 1 when x/y <= 1, otherwise 1 - tanh(alpha_gate * x / y),
/// which lies in (0, 1). A zero denominator is treated as ratio <= 1.
pub fn sigma(x: f64, y: f64, alpha_gate: f64) -> f64 {
    debug_assert!(x >= 0.0 && y >= 0.0 && alpha_gate > 0.0);
    if y == 0.0 || x <= y {
        1.0
    } else {
        1.0 - (alpha_gate * x / y).tanh()
    }
}

/// One gate update: raw gates from the fusion-split norms, then the
/// momentum-smoothed gates `w <- m * w_prev + (1 - m) * raw`.
pub fn update_gates(state: &IntraCalibState, norm_lid: f64, norm_img: f64) -> IntraCalibState {
    let r_lid = sigma(norm_lid, norm_img, state.alpha_gate);
    let r_img = sigma(norm_img, norm_lid, state.alpha_gate);
    IntraCalibState {
        w_lid: state.m * state.w_lid + (1.0 - state.m) * r_lid,
        w_img: state.m * state.w_img + (1.0 - state.m) * r_img,
        alpha_gate: state.alpha_gate,
        m: state.m,
        t: state.t + 1,
    }
}

/// Scales the two modality-branch regions by their gates; the fusion
/// layer, trunk and heads are left untouched.
pub fn apply_gates(gm: &mut GradientMap, state: &IntraCalibState) -> Result<()> {
    gm.scale_region(RegionTag::LidarBranch, state.w_lid)?;
    gm.scale_region(RegionTag::ImageBranch, state.w_img)?;
    Ok(())
}

/// Norm-proportional comparison weighting: w_i = geomean(norms) / norm_i,
/// normalized to sum T, so the weighted gradient norms come out equal.
pub fn gradnorm_like_weights(task_grad_norms: &[f64]) -> TaskWeights {
    let t = task_grad_norms.len();
    if task_grad_norms.iter().any(|&n| n <= 0.0) {
        return TaskWeights::uniform(t);
    }
    let geomean = (task_grad_norms.iter().map(|n| n.ln()).sum::<f64>() / t as f64).exp();
    let raw: Vec<f64> = task_grad_norms.iter().map(|n| geomean / n).collect();
    let sum: f64 = raw.iter().sum();
    TaskWeights(raw.iter().map(|w| w * t as f64 / sum).collect())
}
