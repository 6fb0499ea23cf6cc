//! Empirical error-control probes over frozen checkpoints.
//!
//! Four probes drive the analysis:
//!   perturbation — inject Gaussian noise into the first block's operator
//!     state at step t₀ and track ratio_{i,t} = ‖e_{i,t}‖/‖e_{i,t₀}‖;
//!   separation — time-current centroids c_g(t), within-class spread R(t),
//!     between-class margin M(t), and the distinguishability ratio
//!     q(t) = R(t)/M(t) in readout and latent space;
//!   subspace — split the within-class deviation δ_{i,t} into its component
//!     inside 𝒰(t) (top |G|−1 right singular vectors of the centered centroid
//!     matrix) and the orthogonal remainder, RMS-aggregated;
//!   crossing — T_cross = min{t : q(t) ≥ τ} against downstream max-passing
//!     length, with a log–log Pearson correlation and a bootstrap CI of the
//!     median q at t = mp.
//! A return-word gain diagnostic reports the spectral radius of composed
//! per-token linear factors restricted to the empirical 𝒰.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::groups::{sample_batch, GroupSpec, TokenSampling, TokenSequence, TrajectoryLabels};
use crate::network::{forward_batch, forward_with_state_override, ModelStack, StateOverride};
use crate::operators::kernels::{self, Mat};
use crate::operators::{self, ActivationKind, GateKind, LAYERNORM_EPS};

// ── shared small statistics ─────────────────────────────────────────

/// Percentile with linear interpolation between order statistics
/// (values must be sorted ascending, p in [0, 100]).
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let idx = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = idx - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    percentile_sorted(values, 50.0)
}

/// Pearson correlation and two-sided p-value (Student t with n−2 dof).
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len();
    if n < 3 || n != ys.len() {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let p = if (1.0 - r * r) < 1e-15 {
        0.0
    } else {
        let t = r * ((nf - 2.0) / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, nf - 2.0).ok()?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Some((r, p))
}

/// Percentile-bootstrap 95% CI of the median (1000 resamples, seeded).
pub fn bootstrap_median_ci(values: &[f64], resamples: usize, seed: u64) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut medians = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut sample: Vec<f64> =
            (0..values.len()).map(|_| values[rng.random_range(0..values.len())]).collect();
        medians.push(median(&mut sample));
    }
    medians.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some((percentile_sorted(&medians, 2.5), percentile_sorted(&medians, 97.5)))
}

// ── perturbation probe ──────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationTrace {
    pub t0: usize,
    pub sigma: f64,
    pub horizon: usize,
    /// ratios[k]: per-rollout ‖e_{i,t0+k}‖/‖e_{i,t0}‖ (k = 0 is exactly 1).
    pub ratios: Vec<Vec<f64>>,
    pub median_ratio: Vec<f64>,
    pub iqr_lo: Vec<f64>,
    pub iqr_hi: Vec<f64>,
    /// (T−t0)-th root of the median final ratio.
    pub rho_step: f64,
    /// Per-rollout error trajectory projected on the two leading PCA
    /// directions of the errors at t0: pca[k][i] = (u1·e, u2·e).
    pub pca: Vec<Vec<(f64, f64)>>,
}

/// Clean-vs-perturbed rollout comparison on the first block's operator state.
/// Gaussian noise of scale `sigma` is injected once at step `t0`.
pub fn probe_perturbation(
    stack: &ModelStack,
    group: &GroupSpec,
    n: usize,
    t_len: usize,
    t0: usize,
    sigma: f64,
    seed: u64,
) -> Result<PerturbationTrace> {
    if sigma <= 0.0 {
        return Err(Error::config("perturbation probe needs σ > 0"));
    }
    if t0 == 0 || t0 >= t_len {
        return Err(Error::config("perturbation probe needs 0 < t0 < T"));
    }
    let batch = sample_batch(group, n, t_len, seed, TokenSampling::UniformAll);
    let seqs: Vec<TokenSequence> = batch.into_iter().map(|(s, _)| s).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1A6);
    let noise =
        Mat::from_fn(stack.config.d_state, n, |_, _| sigma * operators::standard_normal(&mut rng));
    let clean = forward_batch(stack, &seqs, None)?;
    let pert = forward_with_state_override(stack, &seqs, t0, &StateOverride::Additive(noise))?;

    let horizon = t_len - t0 + 1;
    let mut ratios: Vec<Vec<f64>> = Vec::with_capacity(horizon);
    let mut base = vec![0.0f64; n];
    // PCA basis from the centered errors at t0.
    let e0 = &pert.hidden[0][t0 - 1] - &clean.hidden[0][t0 - 1];
    let (u1, u2) = pca2_basis(&e0);
    let mut pca: Vec<Vec<(f64, f64)>> = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let t = t0 - 1 + k;
        let e = &pert.hidden[0][t] - &clean.hidden[0][t];
        let mut row = Vec::with_capacity(n);
        let mut proj = Vec::with_capacity(n);
        for i in 0..n {
            let col = e.column(i);
            let norm = col.norm();
            if k == 0 {
                base[i] = norm;
                if norm == 0.0 {
                    return Err(Error::numeric("zero injected perturbation"));
                }
            }
            row.push(norm / base[i]);
            proj.push((u1.dot(&col), u2.dot(&col)));
        }
        ratios.push(row);
        pca.push(proj);
    }
    let mut med = Vec::with_capacity(horizon);
    let mut lo = Vec::with_capacity(horizon);
    let mut hi = Vec::with_capacity(horizon);
    for row in &ratios {
        let mut sorted = row.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        med.push(percentile_sorted(&sorted, 50.0));
        lo.push(percentile_sorted(&sorted, 25.0));
        hi.push(percentile_sorted(&sorted, 75.0));
    }
    let final_ratio = *med.last().unwrap();
    let rho_step =
        if final_ratio > 0.0 { final_ratio.powf(1.0 / (t_len - t0) as f64) } else { 0.0 };
    Ok(PerturbationTrace {
        t0,
        sigma,
        horizon,
        ratios,
        median_ratio: med,
        iqr_lo: lo,
        iqr_hi: hi,
        rho_step,
        pca,
    })
}

fn pca2_basis(errors: &Mat) -> (DVector<f64>, DVector<f64>) {
    let (d, n) = errors.shape();
    let mean = errors.column_iter().fold(DVector::zeros(d), |a, c| a + c) / n as f64;
    let mut centered = errors.clone();
    for mut c in centered.column_iter_mut() {
        c -= &mean;
    }
    let svd = centered.svd(true, false);
    let u = svd.u.as_ref().expect("svd with u");
    let u1 = u.column(0).into_owned();
    let u2 = if u.ncols() > 1 { u.column(1).into_owned() } else { DVector::zeros(d) };
    (u1, u2)
}

// ── separation probe ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct SeparationStep {
    /// Latent centroids, d×n_classes; unpopulated classes hold zeros.
    #[serde(skip)]
    pub centroids: Mat,
    pub class_counts: Vec<usize>,
    pub r_readout: f64,
    pub m_readout: f64,
    pub q_readout: Option<f64>,
    pub r_latent: f64,
    pub m_latent: f64,
    pub q_latent: Option<f64>,
    /// Set when a class is under-populated or the margin collapsed; the step
    /// is excluded from q-based analyses.
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeparationTrace {
    pub steps: Vec<SeparationStep>,
    pub min_count: usize,
}

impl SeparationTrace {
    pub fn q_readout_series(&self) -> Vec<Option<f64>> {
        self.steps.iter().map(|s| s.q_readout).collect()
    }
}

/// Per-step centroids and distinguishability ratio from rollout states.
/// `states[t]` is d×N; `labels[i]` the oracle trajectory of rollout i;
/// readout-space quantities are measured through `w_out`.
pub fn probe_separation(
    states: &[Mat],
    labels: &[TrajectoryLabels],
    n_classes: usize,
    w_out: &Mat,
    min_count: usize,
) -> Result<SeparationTrace> {
    let n = labels.len();
    if states.is_empty() || n == 0 {
        return Err(Error::config("separation probe needs rollouts"));
    }
    let mut steps = Vec::with_capacity(states.len());
    for (t, h) in states.iter().enumerate() {
        if h.ncols() != n {
            return Err(Error::config("state/label rollout counts differ"));
        }
        let d = h.nrows();
        let mut sums = Mat::zeros(d, n_classes);
        let mut counts = vec![0usize; n_classes];
        for i in 0..n {
            let g = labels[i].0[t];
            counts[g] += 1;
            let mut col = sums.column_mut(g);
            col += h.column(i);
        }
        let mut centroids = Mat::zeros(d, n_classes);
        for g in 0..n_classes {
            if counts[g] > 0 {
                centroids.set_column(g, &(sums.column(g) / counts[g] as f64));
            }
        }
        let populated: Vec<usize> = (0..n_classes).filter(|&g| counts[g] > 0).collect();
        let under_populated = (0..n_classes).any(|g| counts[g] < min_count);

        let mapped = w_out * &centroids;
        let mut r_read = 0.0;
        let mut r_lat = 0.0;
        for i in 0..n {
            let g = labels[i].0[t];
            let dev = (h.column(i) - centroids.column(g)).into_owned();
            r_lat += dev.norm();
            r_read += (w_out * &dev).norm();
        }
        r_read /= n as f64;
        r_lat /= n as f64;

        let mut m_read = f64::INFINITY;
        let mut m_lat = f64::INFINITY;
        for (ai, &a) in populated.iter().enumerate() {
            for &b in populated.iter().skip(ai + 1) {
                m_read = m_read.min((mapped.column(a) - mapped.column(b)).norm());
                m_lat = m_lat.min((centroids.column(a) - centroids.column(b)).norm());
            }
        }
        if populated.len() < 2 {
            m_read = 0.0;
            m_lat = 0.0;
        }
        let collapse = m_read <= 0.0 || m_lat <= 0.0;
        let flagged = under_populated || collapse;
        steps.push(SeparationStep {
            centroids,
            class_counts: counts,
            r_readout: r_read,
            m_readout: m_read,
            q_readout: (!flagged).then(|| r_read / m_read),
            r_latent: r_lat,
            m_latent: m_lat,
            q_latent: (!flagged).then(|| r_lat / m_lat),
            flagged,
        });
    }
    Ok(SeparationTrace { steps, min_count })
}

/// Rollout states collected from a stack for probe consumption.
pub struct RolloutSet {
    /// states[t]: d×N.
    pub states: Vec<Mat>,
    pub labels: Vec<TrajectoryLabels>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateSpace {
    /// Final residual stream (what W_out reads).
    Residual,
    /// Operator state of one block.
    OperatorState(usize),
}

pub fn collect_rollouts(
    stack: &ModelStack,
    group: &GroupSpec,
    n: usize,
    t_len: usize,
    seed: u64,
    space: StateSpace,
) -> Result<RolloutSet> {
    let batch = sample_batch(group, n, t_len, seed, TokenSampling::UniformAll);
    let seqs: Vec<TokenSequence> = batch.iter().map(|(s, _)| s.clone()).collect();
    let labels: Vec<TrajectoryLabels> = batch.into_iter().map(|(_, l)| l).collect();
    let trace = forward_batch(stack, &seqs, None)?;
    let states = match space {
        StateSpace::Residual => trace.residual,
        StateSpace::OperatorState(l) => trace.hidden.into_iter().nth(l).ok_or_else(|| {
            Error::config(format!("stack has no block {l}"))
        })?,
    };
    Ok(RolloutSet { states, labels })
}

/// Separation probe on fresh rollouts of a stack (residual-stream states,
/// readout through the stack's W_out).
pub fn probe_separation_from_stack(
    stack: &ModelStack,
    group: &GroupSpec,
    n: usize,
    t_len: usize,
    min_count: usize,
    seed: u64,
) -> Result<(SeparationTrace, RolloutSet)> {
    let set = collect_rollouts(stack, group, n, t_len, seed, StateSpace::Residual)?;
    let trace = probe_separation(&set.states, &set.labels, group.order, &stack.w_out, min_count)?;
    Ok((trace, set))
}

// ── subspace probe ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct SubspaceStep {
    /// Orthonormal basis of 𝒰(t), d×k (k = min(|G|−1, d)).
    #[serde(skip)]
    pub basis: Mat,
    pub r_err_u: f64,
    pub r_err_perp: f64,
    /// Latent inter-centroid scale r_sep(t) = min pairwise centroid distance.
    pub r_sep: f64,
    pub q_u: Option<f64>,
    pub q_perp: Option<f64>,
    /// max_i |‖Pᵀδ‖² + res² − ‖δ‖²| at this step.
    pub pythagoras_defect: f64,
    pub rank_deficient: bool,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubspaceTrace {
    pub steps: Vec<SubspaceStep>,
}

/// Decompose within-class deviations into 𝒰(t) and its complement. Shares
/// centroids with a previously computed separation trace on the same states.
pub fn probe_subspace(
    states: &[Mat],
    labels: &[TrajectoryLabels],
    n_classes: usize,
    separation: &SeparationTrace,
) -> Result<SubspaceTrace> {
    if states.len() != separation.steps.len() {
        return Err(Error::config("separation trace does not match states"));
    }
    let n = labels.len();
    let mut steps = Vec::with_capacity(states.len());
    for (t, h) in states.iter().enumerate() {
        let sep = &separation.steps[t];
        let d = h.nrows();
        let k_target = n_classes.saturating_sub(1).min(d);
        let populated = sep.class_counts.iter().filter(|&&c| c > 0).count();
        if populated < 2 {
            steps.push(SubspaceStep {
                basis: Mat::zeros(d, 0),
                r_err_u: f64::NAN,
                r_err_perp: f64::NAN,
                r_sep: sep.m_latent,
                q_u: None,
                q_perp: None,
                pythagoras_defect: 0.0,
                rank_deficient: true,
                flagged: true,
            });
            continue;
        }
        // Centered centroid matrix (classes as rows), top k right singular
        // vectors; rank-deficient steps keep the fixed k and are flagged.
        let mean = sep.centroids.column_iter().fold(DVector::zeros(d), |a, c| a + c)
            / n_classes as f64;
        let mut rows = Mat::zeros(n_classes, d);
        for g in 0..n_classes {
            let c = (sep.centroids.column(g) - &mean).transpose();
            rows.set_row(g, &c.row(0));
        }
        let svd = rows.svd(false, true);
        let v_t = svd.v_t.as_ref().expect("svd with v_t");
        let k = k_target.min(v_t.nrows());
        let mut basis = Mat::zeros(d, k);
        for j in 0..k {
            basis.set_column(j, &v_t.row(j).transpose());
        }
        let smax = svd.singular_values.max();
        let rank = svd.singular_values.iter().filter(|&&s| s > 1e-12 * smax.max(1e-300)).count();
        let rank_deficient = rank < k;

        let mut sum_u = 0.0;
        let mut sum_perp = 0.0;
        let mut defect: f64 = 0.0;
        for i in 0..n {
            let g = labels[i].0[t];
            let delta = (h.column(i) - sep.centroids.column(g)).into_owned();
            let w = basis.transpose() * &delta;
            let full = delta.norm_squared();
            let inside = w.norm_squared();
            let residual = (full - inside).max(0.0);
            sum_u += inside;
            sum_perp += residual;
            defect = defect.max((inside + residual - full).abs());
        }
        let r_err_u = (sum_u / n as f64).sqrt();
        let r_err_perp = (sum_perp / n as f64).sqrt();
        let r_sep = sep.m_latent;
        let usable = !sep.flagged && r_sep > 0.0;
        steps.push(SubspaceStep {
            basis,
            r_err_u,
            r_err_perp,
            r_sep,
            q_u: usable.then(|| r_err_u / r_sep),
            q_perp: usable.then(|| r_err_perp / r_sep),
            pythagoras_defect: defect,
            rank_deficient,
            flagged: sep.flagged || rank_deficient,
        });
    }
    Ok(SubspaceTrace { steps })
}

// ── crossing analysis ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct CrossingEntry {
    pub label: String,
    /// q_readout(t), t = 1-based; None where the step was flagged.
    pub q_trace: Vec<Option<f64>>,
    /// Downstream max-passing length (0 = curriculum failure).
    pub mp: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossingModel {
    pub label: String,
    /// First t with q(t) ≥ τ; None = never crossed (sentinel "∞" in JSON).
    pub t_cross: Option<usize>,
    pub mp: usize,
    /// q at t = mp (linear interpolation between recorded steps if needed).
    pub q_at_mp: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossingReport {
    pub threshold: f64,
    pub per_model: Vec<CrossingModel>,
    /// Pearson on (log T_cross, log mp) over models with finite T_cross and
    /// mp ≥ min_mp; omitted (with notice) below 3 usable models.
    pub pearson_r: Option<f64>,
    pub pearson_p: Option<f64>,
    pub n_correlated: usize,
    pub notice: Option<String>,
    pub median_q_at_mp: Option<f64>,
    pub q_at_mp_ci: Option<(f64, f64)>,
}

pub fn t_cross(q_trace: &[Option<f64>], threshold: f64) -> Option<usize> {
    q_trace
        .iter()
        .enumerate()
        .find(|(_, q)| q.map(|v| v >= threshold).unwrap_or(false))
        .map(|(i, _)| i + 1)
}

fn q_at(q_trace: &[Option<f64>], t: usize) -> Option<f64> {
    if t == 0 || t > q_trace.len() {
        return None;
    }
    if let Some(v) = q_trace[t - 1] {
        return Some(v);
    }
    // Linear interpolation between the nearest recorded neighbours.
    let prev = (0..t - 1).rev().find_map(|i| q_trace[i].map(|v| (i + 1, v)));
    let next = (t..q_trace.len()).find_map(|i| q_trace[i].map(|v| (i + 1, v)));
    match (prev, next) {
        (Some((tp, vp)), Some((tn, vn))) => {
            let w = (t - tp) as f64 / (tn - tp) as f64;
            Some(vp + (vn - vp) * w)
        }
        (Some((_, vp)), None) => Some(vp),
        (None, Some((_, vn))) => Some(vn),
        (None, None) => None,
    }
}

/// Crossing/correlation analysis across trained models. `min_mp` is the
/// training cap L_max: only runs with mp ≥ min_mp and finite T_cross enter
/// the log–log regression.
pub fn analyze_crossings(
    entries: &[CrossingEntry],
    threshold: f64,
    min_mp: usize,
    bootstrap_seed: u64,
) -> CrossingReport {
    let per_model: Vec<CrossingModel> = entries
        .iter()
        .map(|e| CrossingModel {
            label: e.label.clone(),
            t_cross: t_cross(&e.q_trace, threshold),
            mp: e.mp,
            q_at_mp: if e.mp > 0 { q_at(&e.q_trace, e.mp) } else { None },
        })
        .collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for m in &per_model {
        if let Some(tc) = m.t_cross {
            if m.mp >= min_mp && m.mp > 0 {
                xs.push((tc as f64).ln());
                ys.push((m.mp as f64).ln());
            }
        }
    }
    let (pearson_r, pearson_p, notice) = match pearson(&xs, &ys) {
        Some((r, p)) => (Some(r), Some(p), None),
        None => (
            None,
            None,
            Some(format!(
                "correlation omitted: {} usable models (need ≥ 3 with finite T_cross, mp ≥ {min_mp}, and variance)",
                xs.len()
            )),
        ),
    };
    let q_vals: Vec<f64> = per_model.iter().filter_map(|m| m.q_at_mp).collect();
    let median_q_at_mp = (!q_vals.is_empty()).then(|| {
        let mut v = q_vals.clone();
        median(&mut v)
    });
    let q_at_mp_ci = bootstrap_median_ci(&q_vals, 1000, bootstrap_seed);
    CrossingReport {
        threshold,
        per_model,
        pearson_r,
        pearson_p,
        n_correlated: xs.len(),
        notice,
        median_q_at_mp,
        q_at_mp_ci,
    }
}

// ── return-word gain ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct ReturnWordGain {
    pub word: Vec<usize>,
    /// Spectral radius of the composed linear factor restricted to 𝒰;
    /// for linearized (non-affine) blocks, the max over start centroids.
    pub gain: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GainReport {
    pub gains: Vec<ReturnWordGain>,
    pub median_gain: Option<f64>,
    /// True when the first block is not affine in state and Jacobian
    /// linearization at centroids was used instead of exact factors.
    pub linearized: bool,
    pub rank_deficient: bool,
}

/// Spectral radius via complex eigenvalues (Schur form).
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Per-token block input x̃ for a bare token (LN of its embedding).
fn block_input(stack: &ModelStack, layer: usize, token: usize) -> Mat {
    let block = &stack.blocks[layer];
    let e = stack.embedding.column(token).into_owned();
    let em = Mat::from_column_slice(e.len(), 1, e.as_slice());
    let normed = kernels::layer_norm(&em, LAYERNORM_EPS).0;
    kernels::add_col_broadcast(&kernels::mul_col_broadcast(&normed, &block.ln_gamma), &block.ln_beta)
}

/// Spectral radius of A_s|_𝒰 for every return word of length ≤ max_word_len.
///
/// For first blocks that are affine in state (gate none/token, identity φ)
/// the per-token linear factor diag(g(x̃))·A(x̃) is exact and composed
/// directly; otherwise the state map is linearized along a rollout of the
/// word from each empirical class centroid and the report is flagged.
/// The empirical 𝒰 comes from block-0 state centroids at step `t_ref` over
/// `n` fresh rollouts.
pub fn return_word_gain(
    stack: &ModelStack,
    group: &GroupSpec,
    max_word_len: usize,
    n: usize,
    t_ref: usize,
    seed: u64,
) -> Result<GainReport> {
    let words = crate::groups::enumerate_return_words(group, max_word_len)?;
    if words.is_empty() {
        return Ok(GainReport {
            gains: Vec::new(),
            median_gain: None,
            linearized: false,
            rank_deficient: false,
        });
    }
    let d = stack.config.d_state;

    // Empirical centroids of the first block's operator state at t_ref.
    let set = collect_rollouts(stack, group, n, t_ref, seed, StateSpace::OperatorState(0))?;
    let last = &set.states[t_ref - 1];
    let mut sums = Mat::zeros(d, group.order);
    let mut counts = vec![0usize; group.order];
    for i in 0..set.labels.len() {
        let g = set.labels[i].0[t_ref - 1];
        counts[g] += 1;
        let mut col = sums.column_mut(g);
        col += last.column(i);
    }
    let mut centroids = Mat::zeros(d, group.order);
    for g in 0..group.order {
        if counts[g] > 0 {
            centroids.set_column(g, &(sums.column(g) / counts[g] as f64));
        }
    }
    // Top |G|−1 singular directions of the centered centroid matrix.
    let k_target = (group.order - 1).min(d);
    let mean = centroids.column_iter().fold(DVector::zeros(d), |a, c| a + c) / group.order as f64;
    let mut rows = Mat::zeros(group.order, d);
    for g in 0..group.order {
        rows.set_row(g, &(centroids.column(g) - &mean).transpose().row(0));
    }
    let svd = rows.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let k = k_target.min(v_t.nrows());
    let mut basis = Mat::zeros(d, k);
    for j in 0..k {
        basis.set_column(j, &v_t.row(j).transpose());
    }
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-12 * smax.max(1e-300)).count();
    let rank_deficient = rank < k;

    let block = &stack.blocks[0];
    let affine = matches!(block.gate.kind, GateKind::None | GateKind::Token)
        && stack.config.layer.activation == ActivationKind::Identity;

    let mut gains = Vec::with_capacity(words.len());
    for word in &words {
        let gain = if affine {
            let mut a_s = DMatrix::<f64>::identity(d, d);
            for &x in &word.0 {
                let x_tilde = block_input(stack, 0, x);
                let mut factor = block.transition.factor_matrix(&DVector::from_column_slice(
                    x_tilde.as_slice(),
                ))?;
                if block.gate.kind == GateKind::Token {
                    let gate = operators::gate_batch(&block.gate, &x_tilde, &Mat::zeros(d, 1));
                    for r in 0..d {
                        for c in 0..d {
                            factor[(r, c)] *= gate[(r, 0)];
                        }
                    }
                }
                a_s = factor * a_s;
            }
            let projected = basis.transpose() * &a_s * &basis;
            spectral_radius(&projected)
        } else {
            // Linearize along the word from each populated class centroid.
            let mut worst: f64 = 0.0;
            for g in 0..group.order {
                if counts[g] == 0 {
                    continue;
                }
                let mut h = centroids.column(g).into_owned();
                let mut j_s = DMatrix::<f64>::identity(d, d);
                for &x in &word.0 {
                    let x_tilde = block_input(stack, 0, x);
                    let (j_step, h_next) = state_jacobian(stack, &x_tilde, &h)?;
                    j_s = j_step * j_s;
                    h = h_next;
                }
                let projected = basis.transpose() * &j_s * &basis;
                worst = worst.max(spectral_radius(&projected));
            }
            worst
        };
        gains.push(ReturnWordGain { word: word.0.clone(), gain });
    }
    let mut vals: Vec<f64> = gains.iter().map(|g| g.gain).collect();
    let median_gain = (!vals.is_empty()).then(|| median(&mut vals));
    Ok(GainReport { gains, median_gain, linearized: !affine, rank_deficient })
}

/// Jacobian ∂h_t/∂h_{t-1} of the first block's state map at (x̃, h), plus the
/// next state. Covers all gate kinds and activations.
fn state_jacobian(stack: &ModelStack, x_tilde: &Mat, h: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let block = &stack.blocks[0];
    let d = stack.config.d_state;
    let xv = DVector::from_column_slice(x_tilde.as_slice());
    let a = block.transition.factor_matrix(&xv)?;
    let hm = Mat::from_column_slice(d, 1, h.as_slice());
    let transported = &a * h;
    let gate = operators::gate_batch(&block.gate, x_tilde, &hm);
    let gate_v = DVector::from_column_slice(gate.as_slice());
    let (factor, delta) = block.transition.factor_and_delta(x_tilde)?;
    let injected = operators::apply_injection_batch(
        &block.injection,
        x_tilde,
        &Mat::zeros(stack.config.d_model, 1),
        delta.as_ref(),
        Some(&factor),
    )?;
    let pre = DVector::from_fn(d, |i, _| gate_v[i] * transported[i] + injected[(i, 0)]);

    // d(pre)/dh = diag(g)·A + diag(A h)·dg/dh.
    let mut j_pre = DMatrix::zeros(d, d);
    for r in 0..d {
        for c in 0..d {
            j_pre[(r, c)] = gate_v[r] * a[(r, c)];
        }
    }
    if block.gate.kind == GateKind::State {
        let p = block.gate.params.as_ref().expect("state gate params");
        let u_g = p.u_g.as_ref().expect("state gate U_g");
        for r in 0..d {
            let gp = gate_v[r] * (1.0 - gate_v[r]);
            for c in 0..d {
                j_pre[(r, c)] += transported[r] * gp * u_g[(r, c)];
            }
        }
    }
    let j_phi = operators::activation_jacobian(stack.config.layer.activation, &pre)?;
    let h_next = operators::apply_activation(stack.config.layer.activation, &pre)?;
    Ok((j_phi * j_pre, h_next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::build_group;
    use crate::network::{ModelKind, ModelStack, StackConfig};
    use crate::theory::{tracker_rollout, ExactTracker};

    fn stack(kind: ModelKind, seed: u64) -> ModelStack {
        ModelStack::init(
            StackConfig {
                vocab: 6,
                d_model: 12,
                d_state: 8,
                depth: 1,
                layer: kind.layer_config(),
                readout_bias: false,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_sorted(&v, 0.0), 1.0);
        assert_eq!(percentile_sorted(&v, 100.0), 4.0);
        assert_eq!(percentile_sorted(&v, 50.0), 2.5);
    }

    #[test]
    fn pearson_perfect_line_and_pvalue() {
        let xs: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x + 1.0).collect();
        let (r, p) = pearson(&xs, &ys).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert!(p < 1e-10);
        let noisy: Vec<f64> = xs.iter().map(|x| if *x as usize % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let (r2, p2) = pearson(&xs, &noisy).unwrap();
        assert!(r2.abs() < 0.5);
        assert!(p2 > 0.05);
    }

    #[test]
    fn probe_rejects_zero_sigma() {
        let s = stack(ModelKind::TanhRnn, 1);
        let g = build_group("S3").unwrap();
        assert!(probe_perturbation(&s, &g, 8, 30, 5, 0.0, 0).is_err());
    }

    #[test]
    fn perturbation_ratio_is_one_at_injection() {
        let s = stack(ModelKind::TanhRnn, 2);
        let g = build_group("S3").unwrap();
        let tr = probe_perturbation(&s, &g, 16, 40, 10, 1e-2, 3).unwrap();
        for i in 0..16 {
            assert_eq!(tr.ratios[0][i], 1.0);
        }
        assert_eq!(tr.median_ratio[0], 1.0);
        assert_eq!(tr.horizon, 31);
        assert!(tr.rho_step > 0.0);
    }

    #[test]
    fn dense_half_identity_contracts_by_half_each_step() {
        // W_h = 0.5·I, no gate, identity activation: ratio at t0+k is 0.5^k.
        let mut s = stack(ModelKind::LinearRnn, 3);
        match &mut s.blocks[0].transition.params {
            crate::operators::TransitionParams::Dense { w_h } => {
                *w_h = Mat::identity(8, 8) * 0.5;
            }
            _ => unreachable!(),
        }
        let g = build_group("S3").unwrap();
        let tr = probe_perturbation(&s, &g, 8, 20, 5, 1e-2, 4).unwrap();
        for k in 0..tr.horizon {
            let expect = 0.5f64.powi(k as i32);
            assert!(
                (tr.median_ratio[k] - expect).abs() < 1e-9,
                "k={k}: {} vs {expect}",
                tr.median_ratio[k]
            );
        }
    }

    #[test]
    fn separation_hand_geometry() {
        // Two classes at ±1 (1-D readout), deviations of norm 0.1 → q = 0.05.
        let n = 40;
        let mut states = Mat::zeros(1, n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let dev = if i % 4 < 2 { 0.1 } else { -0.1 };
            states[(0, i)] = if class == 0 { 1.0 } else { -1.0 } + dev;
            labels.push(TrajectoryLabels(vec![class]));
        }
        let tr = probe_separation(&[states], &labels, 2, &Mat::identity(1, 1), 5).unwrap();
        let step = &tr.steps[0];
        assert!((step.m_readout - 2.0).abs() < 1e-12);
        assert!((step.r_readout - 0.1).abs() < 1e-12);
        assert!((step.q_readout.unwrap() - 0.05).abs() < 1e-12);
        assert!(!step.flagged);
    }

    #[test]
    fn identical_states_flag_centroid_collapse() {
        let n = 12;
        let states = Mat::from_element(3, n, 0.7);
        let labels: Vec<TrajectoryLabels> =
            (0..n).map(|i| TrajectoryLabels(vec![i % 2])).collect();
        let tr = probe_separation(&[states], &labels, 2, &Mat::identity(3, 3), 3).unwrap();
        assert!(tr.steps[0].flagged);
        assert!(tr.steps[0].q_readout.is_none());
    }

    #[test]
    fn exact_c2_tracker_keeps_q_constant() {
        // Each base sequence contributes a ±δ rollout pair, so every
        // time-current centroid stays exactly on the codebook and transported
        // perturbations keep their norm: q(t) is constant over t.
        let tracker = ExactTracker::build("C2").unwrap();
        let g = build_group("C2").unwrap();
        let pairs = 20;
        let t_len = 25;
        let batch = sample_batch(&g, pairs, t_len, 9, TokenSampling::UniformAll);
        let n = 2 * pairs;
        let mut states = vec![Mat::zeros(1, n); t_len];
        let mut labels = Vec::with_capacity(n);
        for (p, (seq, lab)) in batch.iter().enumerate() {
            for (side, sign) in [(0usize, 1.0f64), (1, -1.0)] {
                let delta = DVector::from_element(1, sign * 0.2);
                let roll = tracker_rollout(&tracker, 0, &delta, seq);
                for t in 0..t_len {
                    states[t][(0, 2 * p + side)] = roll[t][0];
                }
                labels.push(lab.clone());
            }
        }
        let tr = probe_separation(&states, &labels, 2, &Mat::identity(1, 1), 5).unwrap();
        let q0 = tr.steps[0].q_readout.unwrap();
        assert!((q0 - 0.1).abs() < 1e-12, "q0 = {q0}");
        for step in &tr.steps {
            assert!((step.q_readout.unwrap() - q0).abs() < 1e-12);
        }
    }

    #[test]
    fn subspace_splits_constructed_deviations() {
        // Centroids along e1: 𝒰 = span{e1}. Deviations are ±-balanced within
        // each class so the empirical centroids stay exactly on ±e1; then
        // e1 deviations land fully inside 𝒰 and e2 deviations fully outside.
        let n = 24;
        let d = 4;
        let mut labels = Vec::with_capacity(n);
        let mut inside = Mat::zeros(d, n);
        let mut outside = Mat::zeros(d, n);
        for i in 0..n {
            let class = i % 2;
            let sign = if (i / 2) % 2 == 0 { 1.0 } else { -1.0 };
            let c = if class == 0 { 1.0 } else { -1.0 };
            inside[(0, i)] = c + sign * 0.05;
            outside[(0, i)] = c;
            outside[(1, i)] = sign * 0.07;
            labels.push(TrajectoryLabels(vec![class, class]));
        }
        let states = vec![inside, outside];
        let sep = probe_separation(&states, &labels, 2, &Mat::identity(d, d), 3).unwrap();
        let sub = probe_subspace(&states, &labels, 2, &sep).unwrap();
        assert!(sub.steps[0].r_err_perp < 1e-9, "inside-𝒰 deviations leak: {}", sub.steps[0].r_err_perp);
        assert!(sub.steps[1].r_err_u < 1e-9, "orthogonal deviations leak: {}", sub.steps[1].r_err_u);
        for s in &sub.steps {
            assert!(s.pythagoras_defect < 1e-9);
        }
    }

    #[test]
    fn crossing_linear_q_and_sentinel() {
        let q: Vec<Option<f64>> = (1..=100).map(|t| Some(0.01 * t as f64)).collect();
        assert_eq!(t_cross(&q, 0.5), Some(50));
        let low: Vec<Option<f64>> = (1..=100).map(|_| Some(0.3)).collect();
        assert_eq!(t_cross(&low, 0.5), None);
    }

    #[test]
    fn crossing_report_on_exact_proportionality() {
        // mp = 4·T_cross exactly → Pearson r = 1 on log–log.
        let entries: Vec<CrossingEntry> = (1..=6)
            .map(|i| {
                let tc = 10 * i;
                let q: Vec<Option<f64>> =
                    (1..=200).map(|t| Some(if t >= tc { 0.6 } else { 0.1 })).collect();
                CrossingEntry { label: format!("m{i}"), q_trace: q, mp: 4 * tc }
            })
            .collect();
        let report = analyze_crossings(&entries, 0.5, 32, 7);
        assert_eq!(report.n_correlated, 6);
        assert!(report.pearson_r.unwrap() > 0.999);
        assert!(report.median_q_at_mp.is_some());
        assert!(report.q_at_mp_ci.is_some());
    }

    #[test]
    fn crossing_report_notices_insufficient_models() {
        let entries = vec![CrossingEntry {
            label: "only".into(),
            q_trace: vec![Some(0.6); 10],
            mp: 64,
        }];
        let report = analyze_crossings(&entries, 0.5, 32, 7);
        assert!(report.pearson_r.is_none());
        assert!(report.notice.is_some());
    }

    #[test]
    fn spectral_radius_matches_constructed_spectrum() {
        // Block-diagonal with a rotation of radius 0.8 and an eigenvalue 1.3.
        let mut m = DMatrix::zeros(3, 3);
        let (s, c) = (0.7f64.sin(), 0.7f64.cos());
        m[(0, 0)] = 0.8 * c;
        m[(0, 1)] = -0.8 * s;
        m[(1, 0)] = 0.8 * s;
        m[(1, 1)] = 0.8 * c;
        m[(2, 2)] = 1.3;
        assert!((spectral_radius(&m) - 1.3).abs() < 1e-9);
        // Conjugation by a random orthogonal matrix preserves the spectrum.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = crate::operators::orthogonal(3, &mut rng);
        let conj = &q * &m * q.transpose();
        assert!((spectral_radius(&conj) - 1.3).abs() < 1e-9);
    }

    #[test]
    fn contractive_gain_is_bounded_by_factor_power() {
        // All |α| ≤ 0.9 ⇒ gain of a length-ℓ word is ≤ 0.9^ℓ.
        let s = stack(ModelKind::Mamba, 21);
        let g = build_group("C2").unwrap();
        let report = return_word_gain(&s, &g, 2, 60, 20, 3).unwrap();
        assert!(!report.linearized);
        for gw in &report.gains {
            assert!(gw.gain <= 1.0, "{:?}", gw);
        }
    }

    #[test]
    fn tanh_block_gain_is_linearized_and_flagged() {
        let s = stack(ModelKind::TanhRnn, 22);
        let g = build_group("C2").unwrap();
        let report = return_word_gain(&s, &g, 2, 60, 20, 4).unwrap();
        assert!(report.linearized);
        assert!(report.median_gain.is_some());
    }
}
