//! Exact hand-built trackers and numerical verifiers for the affine
//! error-control results.
//!
//! The obstruction being verified: if an affine return map F_s(h) = A_s h + b_s
//! fixes every state representation c_g, then A_s acts as the identity on the
//! symbolic subspace 𝒰 = span{c_g − c_{g'}}, so it transports perturbations
//! δ ∈ 𝒰 unchanged. The finite-horizon consequence: projected residuals
//! accumulate additively, e_𝒰(t) = e_𝒰(0) + Σ η_j, and a coherent drift η̄
//! crosses the readability threshold τ at T_cross ≈ τM/‖W_out η̄‖.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::groups::{build_group, enumerate_return_words, GroupSpec, TokenSequence};
use crate::operators::kernels::Mat;

// ── exact trackers ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TrackerKind {
    /// 1-D sign tracker: A(x) = (−1)^x.
    C2,
    /// One complex lane: A(x) = rotation by 2πx/3.
    C3,
    /// Sign lane + conditional complex lane (two-layer construction).
    S3,
}

/// A closed-form tracker with codebook c_g and per-token affine maps. The S3
/// tracker is affine per (word, start state): its layer-2 rotation angles are
/// fixed by the tokens once the starting sign lane is known.
#[derive(Debug, Clone)]
pub struct ExactTracker {
    pub group: GroupSpec,
    /// Codebook columns c_g in element order, dim×|G|.
    pub codebook: Mat,
    kind: TrackerKind,
    /// S3 decomposition g = s^p r^q: (p, q) per element.
    indicators: Vec<(usize, usize)>,
}

impl ExactTracker {
    /// Supported groups: C2, C3, S3.
    pub fn build(group_name: &str) -> Result<ExactTracker> {
        let group = build_group(group_name)?;
        let tau = std::f64::consts::TAU;
        match group_name {
            "C2" => Ok(ExactTracker {
                codebook: Mat::from_row_slice(1, 2, &[1.0, -1.0]),
                group,
                kind: TrackerKind::C2,
                indicators: Vec::new(),
            }),
            "C3" => {
                let codebook = Mat::from_fn(2, 3, |i, k| {
                    let phase = tau / 3.0 * k as f64;
                    if i == 0 {
                        phase.cos()
                    } else {
                        phase.sin()
                    }
                });
                Ok(ExactTracker { codebook, group, kind: TrackerKind::C3, indicators: Vec::new() })
            }
            "S3" => {
                // Decompose each element as s^p · r^q with s = (12), r = (123).
                let s = 1usize;
                let r = 4usize;
                let mut indicators = vec![(0usize, 0usize); 6];
                for g in 0..6 {
                    let mut found = false;
                    for p in 0..2 {
                        for q in 0..3 {
                            let mut v = group.identity;
                            for _ in 0..p {
                                v = group.mul(v, s);
                            }
                            for _ in 0..q {
                                v = group.mul(v, r);
                            }
                            if v == g {
                                indicators[g] = (p, q);
                                found = true;
                            }
                        }
                    }
                    if !found {
                        return Err(Error::config("S3 decomposition failed"));
                    }
                }
                // c_g = (y, Re φ, Im φ) with y = (−1)^p and φ = e^{j·2πq·y/3}.
                let codebook = Mat::from_fn(3, 6, |i, g| {
                    let (p, q) = indicators[g];
                    let y = if p == 0 { 1.0 } else { -1.0 };
                    let phase = tau / 3.0 * q as f64 * y;
                    match i {
                        0 => y,
                        1 => phase.cos(),
                        _ => phase.sin(),
                    }
                });
                Ok(ExactTracker { codebook, group, kind: TrackerKind::S3, indicators })
            }
            other => Err(Error::config(format!("no exact tracker for group '{other}'"))),
        }
    }

    pub fn dim(&self) -> usize {
        self.codebook.nrows()
    }

    pub fn centroid(&self, g: usize) -> DVector<f64> {
        self.codebook.column(g).into_owned()
    }

    /// Composed affine word map (A_s, b_s) valid in a neighborhood of
    /// c_start. For C2/C3 the map is global and `start` is ignored; for S3
    /// the layer-2 angles follow the sign trajectory seeded by c_start.
    pub fn word_affine(&self, word: &[usize], start: usize) -> (DMatrix<f64>, DVector<f64>) {
        let tau = std::f64::consts::TAU;
        match self.kind {
            TrackerKind::C2 => {
                let mut a = 1.0;
                for &x in word {
                    a *= if x == 1 { -1.0 } else { 1.0 };
                }
                (DMatrix::from_element(1, 1, a), DVector::zeros(1))
            }
            TrackerKind::C3 => {
                let mut m = DMatrix::identity(2, 2);
                for &x in word {
                    m = rot2(tau / 3.0 * x as f64) * m;
                }
                (m, DVector::zeros(2))
            }
            TrackerKind::S3 => {
                let mut sign = if self.indicators[start].0 == 0 { 1.0 } else { -1.0 };
                let mut y_factor = 1.0;
                let mut rot = DMatrix::identity(2, 2);
                for &x in word {
                    let (p, q) = self.indicators[x];
                    let f = if p == 1 { -1.0 } else { 1.0 };
                    sign *= f;
                    y_factor *= f;
                    rot = rot2(tau / 3.0 * q as f64 * sign) * rot;
                }
                let mut a = DMatrix::zeros(3, 3);
                a[(0, 0)] = y_factor;
                for i in 0..2 {
                    for j in 0..2 {
                        a[(i + 1, j + 1)] = rot[(i, j)];
                    }
                }
                (a, DVector::zeros(3))
            }
        }
    }

    /// F_s(c_start + delta) through the word map anchored at c_start.
    pub fn apply_word_from(
        &self,
        start: usize,
        delta: &DVector<f64>,
        word: &[usize],
    ) -> DVector<f64> {
        let (a, b) = self.word_affine(word, start);
        &a * (self.centroid(start) + delta) + b
    }

    /// Exhaustively check F_x(c_g) = c_{g·x} for every (g, x) pair.
    pub fn validate(&self) -> Result<()> {
        for g in 0..self.group.order {
            for x in 0..self.group.order {
                let got = self.apply_word_from(g, &DVector::zeros(self.dim()), &[x]);
                let want = self.centroid(self.group.mul(g, x));
                if (got - want).amax() > 1e-12 {
                    return Err(Error::numeric(format!(
                        "tracker transition mismatch at (g={g}, x={x})"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn rot2(theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

// ── symbolic subspace ───────────────────────────────────────────────

/// Orthonormal basis of 𝒰 = span{c_g − c_{g'}}.
#[derive(Debug, Clone)]
pub struct SymbolicSubspace {
    /// dim×k with orthonormal columns.
    pub basis: Mat,
    pub dim: usize,
}

impl SymbolicSubspace {
    /// Build from a codebook (columns are centroids): SVD of the centered
    /// codebook, keeping singular directions above 1e-12 relative tolerance.
    pub fn from_codebook(codebook: &Mat) -> SymbolicSubspace {
        let (d, k) = codebook.shape();
        let mean = codebook.column_iter().fold(DVector::zeros(d), |acc, c| acc + c) / k as f64;
        let mut centered = codebook.clone();
        for mut col in centered.column_iter_mut() {
            col -= &mean;
        }
        let svd = centered.svd(true, false);
        let u = svd.u.as_ref().expect("svd with u");
        let smax = svd.singular_values.max();
        let rank =
            svd.singular_values.iter().filter(|&&s| smax > 0.0 && s > 1e-12 * smax).count();
        let mut basis = Mat::zeros(d, rank);
        for j in 0..rank {
            basis.set_column(j, &u.column(j));
        }
        SymbolicSubspace { basis, dim: rank }
    }

    /// Projection of v onto 𝒰 (as a full-dimension vector).
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.basis * (self.basis.transpose() * v)
    }

    /// Worst-case reconstruction error over all centroid differences.
    pub fn reconstruction_defect(&self, codebook: &Mat) -> f64 {
        let k = codebook.ncols();
        let mut worst: f64 = 0.0;
        for g in 0..k {
            for h in 0..k {
                let diff = (codebook.column(g) - codebook.column(h)).into_owned();
                let err = (&diff - self.project(&diff)).amax();
                worst = worst.max(err);
            }
        }
        worst
    }

    /// Random unit vector inside 𝒰.
    pub fn sample_unit<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        loop {
            let z = DVector::from_fn(self.dim, |_, _| crate::operators::standard_normal(rng));
            let n = z.norm();
            if n > 1e-9 {
                return &self.basis * (z / n);
            }
        }
    }
}

// ── theorem verifiers ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct NeutralityReport {
    pub group: String,
    pub words_checked: usize,
    /// max over (word, start) of ‖(A_s − I)·B_𝒰‖∞.
    pub max_neutrality_deviation: f64,
    /// max over (word, start) of ‖F_s(c_g) − c_g‖∞.
    pub max_fixpoint_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Verify A_s|_𝒰 = I for every state-preserving word up to `max_word_len`,
/// composing the tracker's per-token affine maps word-wise from every start.
pub fn verify_affine_neutrality(
    tracker: &ExactTracker,
    max_word_len: usize,
) -> Result<NeutralityReport> {
    let words = enumerate_return_words(&tracker.group, max_word_len)?;
    let subspace = SymbolicSubspace::from_codebook(&tracker.codebook);
    let dim = tracker.dim();
    let eye = DMatrix::identity(dim, dim);
    let mut max_neutrality: f64 = 0.0;
    let mut max_fix: f64 = 0.0;
    for word in &words {
        for g in 0..tracker.group.order {
            let (a, b) = tracker.word_affine(&word.0, g);
            let dev = ((&a - &eye) * &subspace.basis).amax();
            max_neutrality = max_neutrality.max(dev);
            let fix = (&a * tracker.centroid(g) + &b - tracker.centroid(g)).amax();
            max_fix = max_fix.max(fix);
        }
    }
    let tolerance = 1e-12;
    Ok(NeutralityReport {
        group: tracker.group.name.clone(),
        words_checked: words.len(),
        max_neutrality_deviation: max_neutrality,
        max_fixpoint_deviation: max_fix,
        tolerance,
        passed: max_neutrality <= tolerance && max_fix <= tolerance,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TransportReport {
    pub group: String,
    pub triples_checked: usize,
    /// max over triples of ‖(F_s(c_g+δ) − F_s(c_g)) − δ‖∞.
    pub max_transport_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Transport deviation for one (start, δ, word) triple.
pub fn transport_defect(
    tracker: &ExactTracker,
    g: usize,
    delta: &DVector<f64>,
    word: &[usize],
) -> f64 {
    let moved = tracker.apply_word_from(g, delta, word);
    let clean = tracker.apply_word_from(g, &DVector::zeros(tracker.dim()), word);
    ((moved - clean) - delta).amax()
}

/// Check F_s(c_g + δ) − F_s(c_g) = δ on `count` random triples of start
/// state, δ ∈ 𝒰 (‖δ‖ = 0.1), and return word of length ≤ max_word_len.
pub fn verify_perturbation_transport(
    tracker: &ExactTracker,
    count: usize,
    max_word_len: usize,
    seed: u64,
) -> Result<TransportReport> {
    let words = enumerate_return_words(&tracker.group, max_word_len)?;
    let subspace = SymbolicSubspace::from_codebook(&tracker.codebook);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let g = rng.random_range(0..tracker.group.order);
        let word = &words[rng.random_range(0..words.len())];
        let delta = subspace.sample_unit(&mut rng) * 0.1;
        worst = worst.max(transport_defect(tracker, g, &delta, &word.0));
    }
    let tolerance = 1e-12;
    Ok(TransportReport {
        group: tracker.group.name.clone(),
        triples_checked: count,
        max_transport_deviation: worst,
        tolerance,
        passed: worst <= tolerance,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct OscillationReport {
    /// ‖F_a²(h) − h‖∞ over probe states.
    pub involution_deviation: f64,
    /// ‖F_a(c_g+δ) − (c_{g·a} − δ)‖∞ over probe states.
    pub sign_flip_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// The C2 edge case: the affine involution swaps centroids, F_a² = id, and a
/// symbolic perturbation flips sign each step instead of decaying.
pub fn verify_c2_neutral_oscillation(seed: u64) -> Result<OscillationReport> {
    let tracker = ExactTracker::build("C2")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut invol: f64 = 0.0;
    let mut flip: f64 = 0.0;
    for _ in 0..100 {
        let g = rng.random_range(0..2);
        let delta = DVector::from_element(1, rng.random_range(-0.4..0.4));
        let back = tracker.apply_word_from(g, &delta, &[1, 1]);
        invol = invol.max((back - (tracker.centroid(g) + &delta)).amax());
        let once = tracker.apply_word_from(g, &delta, &[1]);
        let expect = tracker.centroid(tracker.group.mul(g, 1)) - &delta;
        flip = flip.max((once - expect).amax());
    }
    let tolerance = 1e-12;
    Ok(OscillationReport {
        involution_deviation: invol,
        sign_flip_deviation: flip,
        tolerance,
        passed: invol <= tolerance && flip <= tolerance,
    })
}

// ── finite-horizon error budget ─────────────────────────────────────

/// Configuration for the additive error-accumulation simulator. The state is
/// the projected error e_𝒰(t); each step adds η_t = η̄ + σ_η·ξ_t with ξ_t a
/// standard normal draw inside 𝒰.
#[derive(Debug, Clone)]
pub struct BudgetSimConfig {
    pub codebook: Mat,
    /// Readout applied before measuring spread and separation, K×d.
    pub w_out: Mat,
    /// Coherent drift η̄; must lie in 𝒰 (validated).
    pub drift: DVector<f64>,
    /// Scale of the i.i.d. noise component inside 𝒰.
    pub noise_scale: f64,
    /// Readability threshold τ.
    pub threshold: f64,
    pub horizon: usize,
    pub trials: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetSimResult {
    /// M = min pairwise readout centroid distance.
    pub separation: f64,
    pub drift_readout_norm: f64,
    /// τM / ‖W_out η̄‖ (infinite when the drift is zero).
    pub predicted_t_cross: f64,
    /// Per-trial first t with q(t) ≥ τ; None = horizon exhausted (sentinel).
    pub empirical_t_cross: Vec<Option<usize>>,
    pub median_empirical: Option<f64>,
    /// RMS over trials of ‖e_𝒰(t)‖ at t = 1..horizon.
    pub rms_error: Vec<f64>,
}

/// Min pairwise distance of readout-mapped codebook columns.
pub fn readout_separation(codebook: &Mat, w_out: &Mat) -> f64 {
    let mapped = w_out * codebook;
    let k = mapped.ncols();
    let mut m = f64::INFINITY;
    for g in 0..k {
        for h in g + 1..k {
            m = m.min((mapped.column(g) - mapped.column(h)).norm());
        }
    }
    m
}

pub fn simulate_error_budget(config: &BudgetSimConfig, seed: u64) -> Result<BudgetSimResult> {
    let subspace = SymbolicSubspace::from_codebook(&config.codebook);
    let drift_defect = (&config.drift - subspace.project(&config.drift)).amax();
    if drift_defect > 1e-9 {
        return Err(Error::config(format!("drift leaves the symbolic subspace by {drift_defect:.3e}")));
    }
    if config.horizon == 0 || config.trials == 0 {
        return Err(Error::config("budget simulation needs horizon ≥ 1 and trials ≥ 1"));
    }
    let separation = readout_separation(&config.codebook, &config.w_out);
    let readout_drift = (&config.w_out * &config.drift).norm();
    let predicted = if readout_drift > 0.0 {
        config.threshold * separation / readout_drift
    } else {
        f64::INFINITY
    };

    // Work in subspace coordinates: e = B z, readout norm via (W_out·B) z.
    let k = subspace.dim;
    let wb = &config.w_out * &subspace.basis;
    let drift_z = subspace.basis.transpose() * &config.drift;

    let mut crossings = Vec::with_capacity(config.trials);
    let mut sq_sum = vec![0.0f64; config.horizon];
    for trial in 0..config.trials {
        // Independent, order-insensitive stream per trial.
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut z = DVector::zeros(k);
        let mut crossed = None;
        for t in 1..=config.horizon {
            z += &drift_z;
            if config.noise_scale > 0.0 {
                for i in 0..k {
                    z[i] += config.noise_scale * crate::operators::standard_normal(&mut rng);
                }
            }
            sq_sum[t - 1] += z.norm_squared();
            if crossed.is_none() {
                let q = (&wb * &z).norm() / separation;
                if q >= config.threshold {
                    crossed = Some(t);
                }
            }
        }
        crossings.push(crossed);
    }
    let rms_error = sq_sum.iter().map(|s| (s / config.trials as f64).sqrt()).collect::<Vec<_>>();
    let mut finite: Vec<f64> = crossings.iter().flatten().map(|&t| t as f64).collect();
    finite.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_empirical = if finite.len() == crossings.len() && !finite.is_empty() {
        Some(median_of_sorted(&finite))
    } else {
        None
    };
    Ok(BudgetSimResult {
        separation,
        drift_readout_norm: readout_drift,
        predicted_t_cross: predicted,
        empirical_t_cross: crossings,
        median_empirical,
        rms_error,
    })
}

pub fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Least-squares slope of ln(y) against ln(t), t = 1..=y.len().
pub fn log_log_slope(y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = y
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(i, v)| (((i + 1) as f64).ln(), v.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

// ── cyclic margins ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CyclicMargin {
    /// Distance between adjacent centroids, 2r·sin(π/k).
    pub separation: f64,
    /// Angular decision sector half-width π/k.
    pub sector: f64,
}

/// Tolerated perturbation geometry of the regular C_k codebook of radius r:
/// adjacent centroids sit 2r·sin(π/k) apart, so the neutral oscillation that
/// is harmless for C2 becomes fragile as the cycle order grows.
pub fn cyclic_margin(k: usize, r: f64) -> Result<CyclicMargin> {
    if k < 2 {
        return Err(Error::config("cyclic margin needs k ≥ 2"));
    }
    if r <= 0.0 {
        return Err(Error::config("cyclic margin needs r > 0"));
    }
    let sector = std::f64::consts::PI / k as f64;
    Ok(CyclicMargin { separation: 2.0 * r * sector.sin(), sector })
}

/// Build and validate every supported exact tracker.
pub fn exact_tracker_suite() -> Result<Vec<ExactTracker>> {
    ["C2", "C3", "S3"]
        .iter()
        .map(|name| {
            let t = ExactTracker::build(name)?;
            t.validate()?;
            Ok(t)
        })
        .collect()
}

/// Rollout of an exact tracker from a perturbed start, recording the state
/// after each token. Used by diagnostics tests that need closed-form traces.
pub fn tracker_rollout(
    tracker: &ExactTracker,
    start: usize,
    delta: &DVector<f64>,
    seq: &TokenSequence,
) -> Vec<DVector<f64>> {
    let mut states = Vec::with_capacity(seq.len());
    let mut prefix: Vec<usize> = Vec::with_capacity(seq.len());
    for &x in &seq.0 {
        prefix.push(x);
        states.push(tracker.apply_word_from(start, delta, &prefix));
    }
    states
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trackers_realize_their_groups_exactly() {
        for t in exact_tracker_suite().unwrap() {
            t.validate().unwrap();
        }
    }

    #[test]
    fn c2_word_maps_match_hand_calculations() {
        let t = ExactTracker::build("C2").unwrap();
        let (a, _) = t.word_affine(&[1], 0);
        assert_eq!(a[(0, 0)], -1.0);
        let (a2, _) = t.word_affine(&[1, 1], 0);
        assert_eq!(a2[(0, 0)], 1.0);
    }

    #[test]
    fn c3_full_cycle_is_identity() {
        let t = ExactTracker::build("C3").unwrap();
        let (a, _) = t.word_affine(&[1, 1, 1], 0);
        assert!((a - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn s3_tracker_matches_running_product_example() {
        let t = ExactTracker::build("S3").unwrap();
        // (12),(23),(12) from e lands on (13).
        let got = t.apply_word_from(0, &DVector::zeros(3), &[1, 3, 1]);
        assert!((got - t.centroid(2)).amax() < 1e-12);
    }

    #[test]
    fn s3_codebook_matches_the_element_mapping() {
        let t = ExactTracker::build("S3").unwrap();
        // (12) carries y = −1 and unit phase.
        let c = t.centroid(1);
        assert_eq!(c.as_slice(), &[-1.0, 1.0, 0.0]);
        // (23) = s·r carries y = −1 and phase e^{−j2π/3}.
        let c = t.centroid(3);
        let phase = -std::f64::consts::TAU / 3.0;
        assert!((c[1] - phase.cos()).abs() < 1e-15);
        assert!((c[2] - phase.sin()).abs() < 1e-15);
    }

    #[test]
    fn subspace_dims_and_reconstruction() {
        for (name, dim) in [("C2", 1), ("C3", 2), ("S3", 3)] {
            let t = ExactTracker::build(name).unwrap();
            let u = SymbolicSubspace::from_codebook(&t.codebook);
            assert_eq!(u.dim, dim, "{name}");
            assert!(u.reconstruction_defect(&t.codebook) < 1e-12);
        }
    }

    #[test]
    fn neutrality_holds_for_short_words() {
        for name in ["C2", "C3", "S3"] {
            let t = ExactTracker::build(name).unwrap();
            let report = verify_affine_neutrality(&t, 4).unwrap();
            assert!(report.passed, "{name}: {report:?}");
            assert!(report.words_checked > 0);
        }
    }

    #[test]
    fn transport_is_exact_on_random_triples() {
        for name in ["C2", "C3", "S3"] {
            let t = ExactTracker::build(name).unwrap();
            let report = verify_perturbation_transport(&t, 50, 4, 7).unwrap();
            assert!(report.passed, "{name}: {report:?}");
        }
    }

    #[test]
    fn c2_oscillation_flips_and_returns() {
        let report = verify_c2_neutral_oscillation(3).unwrap();
        assert!(report.passed, "{report:?}");
    }

    fn two_point_config(
        m: f64,
        drift_norm: f64,
        noise: f64,
        horizon: usize,
        trials: usize,
    ) -> BudgetSimConfig {
        // Two centroids ±(m/2)·e1 in R², identity readout: separation = m and
        // 𝒰 = span{e1}.
        let codebook = Mat::from_row_slice(2, 2, &[m / 2.0, -m / 2.0, 0.0, 0.0]);
        let w_out = Mat::identity(2, 2);
        BudgetSimConfig {
            codebook,
            w_out,
            drift: DVector::from_column_slice(&[drift_norm, 0.0]),
            noise_scale: noise,
            threshold: 0.5,
            horizon,
            trials,
        }
    }

    #[test]
    fn drift_only_crossing_is_exactly_ceil() {
        // τ=0.5, M=10, ‖W_out η̄‖=0.01 → T_cross = 500. The prediction lands
        // exactly on an integer, so accumulated rounding may defer the
        // crossing by one step: ±1 deterministic.
        let cfg = two_point_config(10.0, 0.01, 0.0, 600, 1);
        let res = simulate_error_budget(&cfg, 0).unwrap();
        assert!((res.predicted_t_cross - 500.0).abs() < 1e-9);
        let got = res.empirical_t_cross[0].unwrap() as f64;
        assert!((got - 500.0).abs() <= 1.0, "got {got}");

        // Off-boundary predictions cross exactly at the ceiling.
        for drift in [0.0123, 0.00271, 0.047] {
            let cfg = two_point_config(10.0, drift, 0.0, 3000, 1);
            let res = simulate_error_budget(&cfg, 0).unwrap();
            assert_eq!(res.empirical_t_cross[0], Some(res.predicted_t_cross.ceil() as usize));
        }
    }

    #[test]
    fn horizon_exhaustion_yields_sentinel() {
        let cfg = two_point_config(10.0, 0.01, 0.0, 100, 1);
        let res = simulate_error_budget(&cfg, 0).unwrap();
        assert_eq!(res.empirical_t_cross[0], None);
        assert!(res.median_empirical.is_none());
    }

    #[test]
    fn matched_noise_median_stays_within_ten_percent() {
        let drift = 0.02;
        let cfg = two_point_config(10.0, drift, drift, 2000, 400);
        let res = simulate_error_budget(&cfg, 11).unwrap();
        let median = res.median_empirical.expect("all trials cross");
        let rel = (median - res.predicted_t_cross).abs() / res.predicted_t_cross;
        assert!(rel <= 0.10, "median {median} vs predicted {}", res.predicted_t_cross);
    }

    #[test]
    fn pure_noise_rms_grows_like_sqrt_t() {
        let mut cfg = two_point_config(1.0, 0.0, 1e-3, 3000, 300);
        cfg.threshold = f64::INFINITY;
        let res = simulate_error_budget(&cfg, 5).unwrap();
        let slope = log_log_slope(&res.rms_error);
        assert!((slope - 0.5).abs() < 0.05, "slope {slope}");
    }

    #[test]
    fn drift_outside_subspace_is_rejected() {
        let mut cfg = two_point_config(10.0, 0.01, 0.0, 10, 1);
        cfg.drift = DVector::from_column_slice(&[0.0, 0.5]);
        assert!(simulate_error_budget(&cfg, 0).is_err());
    }

    #[test]
    fn cyclic_margin_values_and_monotonicity() {
        assert!((cyclic_margin(2, 1.0).unwrap().separation - 2.0).abs() < 1e-15);
        assert!((cyclic_margin(6, 1.0).unwrap().separation - 1.0).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for k in 2..32 {
            let m = cyclic_margin(k, 1.0).unwrap().separation;
            assert!(m < prev);
            prev = m;
        }
        // Small-angle limit: k·separation → 2πr within 1% at k = 64.
        let k = 64;
        let m = cyclic_margin(k, 1.0).unwrap().separation;
        let rel = (k as f64 * m - std::f64::consts::TAU).abs() / std::f64::consts::TAU;
        assert!(rel < 0.01, "rel {rel}");
    }
}
