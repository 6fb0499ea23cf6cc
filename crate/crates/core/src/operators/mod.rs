//! Transition, gate, activation, and injection operators of the canonical
//! recursive layer `h_t = φ(g(h_{t-1},x_t) ⊙ (A(x_t)·h_{t-1}) + b(x_t))`.
//!
//! Six transition families cover the model zoo:
//!   diag_contractive          e^{Δ_t A},  A ≺ 0           (Mamba)
//!   diag_signed               2e^{Δ_t A} − I              (Negative Mamba)
//!   diag_complex_damped       e^{Δ_t(A_re + iΘ(x_t))}     (Mamba-3)
//!   diag_complex_unitary      e^{iΔ_t Λ(x_t)}             (AUSSM)
//!   diag_complex_unitary_nostep  e^{iΛ(x_t)}              (Simple AUSSM)
//!   dense_linear              W_h                         (RNN family)
//! with Δ_t = softplus(Δ_bias + W_Δ x_t). Complex lanes are stored as
//! interleaved (re, im) real pairs acted on by 2×2 rotation-scaling blocks.

pub mod kernels;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use kernels::Mat;

// ── kinds ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    DiagContractive,
    DiagSigned,
    DiagComplexDamped,
    DiagComplexUnitary,
    DiagComplexUnitaryNostep,
    DenseLinear,
}

impl TransitionKind {
    pub fn is_complex(self) -> bool {
        matches!(
            self,
            TransitionKind::DiagComplexDamped
                | TransitionKind::DiagComplexUnitary
                | TransitionKind::DiagComplexUnitaryNostep
        )
    }

    /// Whether the per-step factor uses the selective step size Δ_t.
    pub fn uses_delta(self) -> bool {
        matches!(
            self,
            TransitionKind::DiagContractive
                | TransitionKind::DiagSigned
                | TransitionKind::DiagComplexDamped
                | TransitionKind::DiagComplexUnitary
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    None,
    Token,
    State,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Identity,
    Tanh,
    Relu,
    MaxPair,
    MinPair,
    Groupsort2,
    Layernorm,
    Sphere,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 8] = [
        ActivationKind::Identity,
        ActivationKind::Tanh,
        ActivationKind::Relu,
        ActivationKind::MaxPair,
        ActivationKind::MinPair,
        ActivationKind::Groupsort2,
        ActivationKind::Layernorm,
        ActivationKind::Sphere,
    ];

    pub fn needs_even_dim(self) -> bool {
        matches!(
            self,
            ActivationKind::MaxPair | ActivationKind::MinPair | ActivationKind::Groupsort2
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionKind {
    Linear,
    MambaEuler,
    Mamba3Trapezoid,
}

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const SPHERE_MIN_NORM: f64 = 1e-12;

// ── transition ──────────────────────────────────────────────────────

/// Per-kind parameter block of a transition operator. All tensors are
/// column-major `DMatrix<f64>`; vectors are stored as d×1 matrices.
#[derive(Debug, Clone)]
pub enum TransitionParams {
    /// Shared by diag_contractive and diag_signed: A = −exp(a_log) ≺ 0.
    DiagSelective { a_log: Mat, w_delta: Mat, delta_bias: Mat },
    /// Mamba-3 lane decay A_re = −exp(a_re_log) plus rotation map Θ(x).
    ComplexDamped { a_re_log: Mat, w_delta: Mat, delta_bias: Mat, w_theta: Mat, b_theta: Mat },
    /// AUSSM: unit-modulus rotation by Δ_t·Λ(x).
    ComplexUnitary { w_delta: Mat, delta_bias: Mat, w_lambda: Mat, b_lambda: Mat },
    /// Simple AUSSM: rotation by Λ(x), no step size.
    ComplexUnitaryNostep { w_lambda: Mat, b_lambda: Mat },
    Dense { w_h: Mat },
}

#[derive(Debug, Clone)]
pub struct TransitionSpec {
    pub kind: TransitionKind,
    pub state_dim: usize,
    pub params: TransitionParams,
}

/// The linear action A(x_t) evaluated at one input, in structured form.
#[derive(Debug, Clone)]
pub enum TransitionFactor {
    /// Per-coordinate factor, d×B.
    Diag(Mat),
    /// Per-lane modulus and rotation angle, lanes×B each.
    ComplexDiag { modulus: Mat, angle: Mat },
    /// Input-independent dense matrix (borrowes the weight at call sites).
    Dense(Mat),
}

impl TransitionSpec {
    pub fn lanes(&self) -> usize {
        if self.kind.is_complex() {
            self.state_dim / 2
        } else {
            self.state_dim
        }
    }

    /// Step size Δ_t = softplus(Δ_bias + W_Δ x), when the kind has one.
    /// Shape d×B for real diagonal kinds, lanes×B for complex kinds.
    pub fn delta(&self, x_embed: &Mat) -> Option<Mat> {
        let (w_delta, delta_bias) = match &self.params {
            TransitionParams::DiagSelective { w_delta, delta_bias, .. } => (w_delta, delta_bias),
            TransitionParams::ComplexDamped { w_delta, delta_bias, .. } => (w_delta, delta_bias),
            TransitionParams::ComplexUnitary { w_delta, delta_bias, .. } => (w_delta, delta_bias),
            _ => return None,
        };
        Some(kernels::softplus(&kernels::add_col_broadcast(&(w_delta * x_embed), delta_bias)))
    }

    /// Evaluate the factor A(x) for a batch of inputs (columns).
    pub fn factor(&self, x_embed: &Mat) -> Result<TransitionFactor> {
        Ok(self.factor_and_delta(x_embed)?.0)
    }

    /// Factor plus the Δ_t it was built from (None for non-selective kinds),
    /// so callers feeding Δ_t into the injection evaluate it once.
    pub fn factor_and_delta(&self, x_embed: &Mat) -> Result<(TransitionFactor, Option<Mat>)> {
        let delta = self.delta(x_embed);
        let factor = match (&self.kind, &self.params) {
            (TransitionKind::DiagContractive, TransitionParams::DiagSelective { a_log, .. }) => {
                let delta = delta.as_ref().expect("selective kind has delta");
                let a = a_log.map(|v| -v.exp());
                TransitionFactor::Diag(kernels::exp(&kernels::mul_col_broadcast(delta, &a)))
            }
            (TransitionKind::DiagSigned, TransitionParams::DiagSelective { a_log, .. }) => {
                let delta = delta.as_ref().expect("selective kind has delta");
                let a = a_log.map(|v| -v.exp());
                let e = kernels::exp(&kernels::mul_col_broadcast(delta, &a));
                TransitionFactor::Diag(e.map(|v| 2.0 * v - 1.0))
            }
            (
                TransitionKind::DiagComplexDamped,
                TransitionParams::ComplexDamped { a_re_log, w_theta, b_theta, .. },
            ) => {
                let delta = delta.as_ref().expect("selective kind has delta");
                let a_re = a_re_log.map(|v| -v.exp());
                let modulus = kernels::exp(&kernels::mul_col_broadcast(delta, &a_re));
                let theta = kernels::add_col_broadcast(&(w_theta * x_embed), b_theta);
                TransitionFactor::ComplexDiag { modulus, angle: kernels::hadamard(delta, &theta) }
            }
            (
                TransitionKind::DiagComplexUnitary,
                TransitionParams::ComplexUnitary { w_lambda, b_lambda, .. },
            ) => {
                let delta = delta.as_ref().expect("selective kind has delta");
                let lambda = kernels::add_col_broadcast(&(w_lambda * x_embed), b_lambda);
                TransitionFactor::ComplexDiag {
                    modulus: Mat::from_element(delta.nrows(), delta.ncols(), 1.0),
                    angle: kernels::hadamard(delta, &lambda),
                }
            }
            (
                TransitionKind::DiagComplexUnitaryNostep,
                TransitionParams::ComplexUnitaryNostep { w_lambda, b_lambda },
            ) => {
                let angle = kernels::add_col_broadcast(&(w_lambda * x_embed), b_lambda);
                TransitionFactor::ComplexDiag {
                    modulus: Mat::from_element(angle.nrows(), angle.ncols(), 1.0),
                    angle,
                }
            }
            (TransitionKind::DenseLinear, TransitionParams::Dense { w_h }) => {
                TransitionFactor::Dense(w_h.clone())
            }
            _ => return Err(Error::config("transition kind does not match parameter block")),
        };
        check_factor_finite(&factor)?;
        Ok((factor, delta))
    }

    /// Dense d×d realization of A(x) for a single input column.
    pub fn factor_matrix(&self, x_embed: &DVector<f64>) -> Result<DMatrix<f64>> {
        let x = Mat::from_column_slice(x_embed.len(), 1, x_embed.as_slice());
        match self.factor(&x)? {
            TransitionFactor::Diag(d) => Ok(DMatrix::from_diagonal(&d.column(0).into_owned())),
            TransitionFactor::ComplexDiag { modulus, angle } => {
                let lanes = modulus.nrows();
                let mut m = DMatrix::zeros(2 * lanes, 2 * lanes);
                for l in 0..lanes {
                    let (s, c) = angle[(l, 0)].sin_cos();
                    let r = modulus[(l, 0)];
                    m[(2 * l, 2 * l)] = r * c;
                    m[(2 * l, 2 * l + 1)] = -r * s;
                    m[(2 * l + 1, 2 * l)] = r * s;
                    m[(2 * l + 1, 2 * l + 1)] = r * c;
                }
                Ok(m)
            }
            TransitionFactor::Dense(w) => Ok(w),
        }
    }
}

fn check_factor_finite(factor: &TransitionFactor) -> Result<()> {
    let scan = |m: &Mat, what: &str| -> Result<()> {
        for (i, v) in m.iter().enumerate() {
            if !v.is_finite() {
                let lane = i % m.nrows();
                return Err(Error::numeric(format!(
                    "non-finite transition {what} in lane {lane}"
                )));
            }
        }
        Ok(())
    };
    match factor {
        TransitionFactor::Diag(d) => scan(d, "factor"),
        TransitionFactor::ComplexDiag { modulus, angle } => {
            scan(modulus, "modulus")?;
            scan(angle, "angle")
        }
        TransitionFactor::Dense(w) => scan(w, "weight"),
    }
}

/// Apply a structured factor to a state batch.
pub fn apply_factor(factor: &TransitionFactor, h: &Mat) -> Mat {
    match factor {
        TransitionFactor::Diag(d) => kernels::hadamard(d, h),
        TransitionFactor::ComplexDiag { modulus, angle } => {
            kernels::hadamard(&kernels::expand_pairs(modulus), &kernels::rotate_pairs(angle, h))
        }
        TransitionFactor::Dense(w) => w * h,
    }
}

/// A(x)·h_prev for a single state vector.
pub fn apply_transition(
    spec: &TransitionSpec,
    x_embed: &DVector<f64>,
    h_prev: &DVector<f64>,
) -> Result<DVector<f64>> {
    let x = Mat::from_column_slice(x_embed.len(), 1, x_embed.as_slice());
    let h = Mat::from_column_slice(h_prev.len(), 1, h_prev.as_slice());
    let out = apply_factor(&spec.factor(&x)?, &h);
    Ok(DVector::from_column_slice(out.as_slice()))
}

// ── gate ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GateParams {
    pub w_g: Mat,
    /// State map, present only for the state-gated kind.
    pub u_g: Option<Mat>,
    pub b_g: Mat,
}

#[derive(Debug, Clone)]
pub struct GateSpec {
    pub kind: GateKind,
    pub params: Option<GateParams>,
}

impl GateSpec {
    pub fn none() -> Self {
        GateSpec { kind: GateKind::None, params: None }
    }
}

/// Batched g(h_{t-1}, x_t): all-ones for kind none, σ(W_g x + b_g) for token
/// gating, σ(W_g x + U_g h + b_g) for state gating.
pub fn gate_batch(spec: &GateSpec, x_embed: &Mat, h_prev: &Mat) -> Mat {
    match (spec.kind, &spec.params) {
        (GateKind::None, _) => Mat::from_element(h_prev.nrows(), h_prev.ncols(), 1.0),
        (GateKind::Token, Some(p)) => {
            kernels::sigmoid(&kernels::add_col_broadcast(&(&p.w_g * x_embed), &p.b_g))
        }
        (GateKind::State, Some(p)) => {
            let u_g = p.u_g.as_ref().expect("state gate has U_g");
            let pre = &p.w_g * x_embed + u_g * h_prev;
            kernels::sigmoid(&kernels::add_col_broadcast(&pre, &p.b_g))
        }
        _ => panic!("gate kind requires parameters"),
    }
}

pub fn apply_gate(spec: &GateSpec, x_embed: &DVector<f64>, h_prev: &DVector<f64>) -> DVector<f64> {
    let x = Mat::from_column_slice(x_embed.len(), 1, x_embed.as_slice());
    let h = Mat::from_column_slice(h_prev.len(), 1, h_prev.as_slice());
    DVector::from_column_slice(gate_batch(spec, &x, &h).as_slice())
}

// ── activation ──────────────────────────────────────────────────────

/// Batched φ(z). Pair kinds require even dimension; sphere requires every
/// column norm ≥ 1e-12.
pub fn activation_batch(kind: ActivationKind, z: &Mat) -> Result<Mat> {
    if kind.needs_even_dim() && z.nrows() % 2 != 0 {
        return Err(Error::config("pair activation requires even state dimension"));
    }
    Ok(match kind {
        ActivationKind::Identity => z.clone(),
        ActivationKind::Tanh => kernels::tanh(z),
        ActivationKind::Relu => kernels::relu(z),
        ActivationKind::MaxPair => kernels::pair_select(z, true).0,
        ActivationKind::MinPair | ActivationKind::Groupsort2 => kernels::pair_select(z, false).0,
        ActivationKind::Layernorm => kernels::layer_norm(z, LAYERNORM_EPS).0,
        ActivationKind::Sphere => kernels::sphere(z, SPHERE_MIN_NORM)
            .map_err(|col| Error::numeric(format!("sphere activation on near-zero column {col}")))?
            .0,
    })
}

pub fn apply_activation(kind: ActivationKind, z: &DVector<f64>) -> Result<DVector<f64>> {
    let m = Mat::from_column_slice(z.len(), 1, z.as_slice());
    Ok(DVector::from_column_slice(activation_batch(kind, &m)?.as_slice()))
}

/// Exact analytic Jacobian ∂φ/∂z. Boundary rule: relu'(0) = 0, tied pairs
/// keep their original order (identity permutation on that pair).
pub fn activation_jacobian(kind: ActivationKind, z: &DVector<f64>) -> Result<DMatrix<f64>> {
    let d = z.len();
    if kind.needs_even_dim() && d % 2 != 0 {
        return Err(Error::config("pair activation requires even state dimension"));
    }
    let jac = match kind {
        ActivationKind::Identity => DMatrix::identity(d, d),
        ActivationKind::Tanh => DMatrix::from_diagonal(&z.map(|v| 1.0 - v.tanh().powi(2))),
        ActivationKind::Relu => {
            DMatrix::from_diagonal(&z.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
        }
        ActivationKind::MaxPair | ActivationKind::MinPair | ActivationKind::Groupsort2 => {
            let descending = kind == ActivationKind::MaxPair;
            let mut jac = DMatrix::zeros(d, d);
            for p in 0..d / 2 {
                let (a, b) = (z[2 * p], z[2 * p + 1]);
                let swap = if descending { b > a } else { b < a };
                if swap {
                    jac[(2 * p, 2 * p + 1)] = 1.0;
                    jac[(2 * p + 1, 2 * p)] = 1.0;
                } else {
                    jac[(2 * p, 2 * p)] = 1.0;
                    jac[(2 * p + 1, 2 * p + 1)] = 1.0;
                }
            }
            jac
        }
        ActivationKind::Layernorm => {
            // (1/σ)(I − 𝟙𝟙ᵀ/d − p̃p̃ᵀ/d) with p̃ the normalized pre-activation.
            let dd = d as f64;
            let mean = z.sum() / dd;
            let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dd;
            let sigma = (var + LAYERNORM_EPS).sqrt();
            let p = z.map(|v| (v - mean) / sigma);
            let ones = DVector::from_element(d, 1.0);
            let jac = DMatrix::identity(d, d) - &ones * ones.transpose() / dd
                - &p * p.transpose() / dd;
            jac / sigma
        }
        ActivationKind::Sphere => {
            let n = z.norm();
            if n < SPHERE_MIN_NORM {
                return Err(Error::numeric("sphere jacobian on a near-zero vector"));
            }
            let hat = z / n;
            (DMatrix::identity(d, d) - &hat * hat.transpose()) / n
        }
    };
    Ok(jac)
}

// ── injection ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct InjectionParams {
    /// Input map (W_x for linear kind, B for SSM kinds), d×m.
    pub w_x: Mat,
    /// Bias b_h (linear kind only).
    pub b_h: Option<Mat>,
    /// λ_t source for the trapezoid rule (lanes×m map and lanes×1 bias).
    pub w_lambda: Option<Mat>,
    pub b_lambda: Option<Mat>,
}

#[derive(Debug, Clone)]
pub struct InjectionSpec {
    pub kind: InjectionKind,
    pub params: InjectionParams,
}

impl InjectionSpec {
    /// λ_t = σ(W_λ x + b_λ), lanes×B (trapezoid kind only).
    pub fn lambda(&self, x_embed: &Mat) -> Option<Mat> {
        let (w, b) = (self.params.w_lambda.as_ref()?, self.params.b_lambda.as_ref()?);
        Some(kernels::sigmoid(&kernels::add_col_broadcast(&(w * x_embed), b)))
    }
}

/// b(x_t) for a batch. `delta` and `factor` come from the paired transition:
///   linear            W_x x_t + b_h
///   mamba_euler       Δ_t ⊙ (B x_t)
///   mamba3_trapezoid  (1−λ_t) Δ_t ⊙ A(x_t)·(B x_{t-1}) + λ_t Δ_t ⊙ (B x_t)
/// The trapezoid kind reads the previous token (documented canonical-form
/// violation); x_prev is the zero vector at t = 1.
pub fn apply_injection_batch(
    spec: &InjectionSpec,
    x_embed: &Mat,
    x_prev: &Mat,
    delta: Option<&Mat>,
    factor: Option<&TransitionFactor>,
) -> Result<Mat> {
    match spec.kind {
        InjectionKind::Linear => {
            let mut out = &spec.params.w_x * x_embed;
            if let Some(b) = &spec.params.b_h {
                out = kernels::add_col_broadcast(&out, b);
            }
            Ok(out)
        }
        InjectionKind::MambaEuler => {
            let delta = delta.ok_or_else(|| Error::config("mamba_euler injection needs Δ_t"))?;
            let bx = &spec.params.w_x * x_embed;
            let scale = if delta.nrows() == bx.nrows() {
                delta.clone()
            } else {
                kernels::expand_pairs(delta)
            };
            Ok(kernels::hadamard(&scale, &bx))
        }
        InjectionKind::Mamba3Trapezoid => {
            let delta =
                delta.ok_or_else(|| Error::config("mamba3_trapezoid injection needs Δ_t"))?;
            let factor =
                factor.ok_or_else(|| Error::config("mamba3_trapezoid injection needs A(x_t)"))?;
            let lambda = spec
                .lambda(x_embed)
                .ok_or_else(|| Error::config("mamba3_trapezoid injection needs λ parameters"))?;
            let bx_cur = &spec.params.w_x * x_embed;
            let bx_prev = apply_factor(factor, &(&spec.params.w_x * x_prev));
            let dl_cur = kernels::expand_pairs(&kernels::hadamard(&lambda, delta));
            let dl_prev =
                kernels::expand_pairs(&kernels::hadamard(&lambda.map(|v| 1.0 - v), delta));
            Ok(kernels::hadamard(&dl_prev, &bx_prev) + kernels::hadamard(&dl_cur, &bx_cur))
        }
    }
}

// ── initialization ──────────────────────────────────────────────────

/// Uniform fan-in initialization U(−1/√fan_in, 1/√fan_in).
pub fn uniform_fan_in<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let bound = 1.0 / (cols as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Orthogonal initialization via QR of a Gaussian matrix, gain 1.0.
pub fn orthogonal<R: Rng>(dim: usize, rng: &mut R) -> Mat {
    let g = Mat::from_fn(dim, dim, |_, _| standard_normal(rng));
    let qr = g.qr();
    let r_diag: Vec<f64> = (0..dim).map(|i| qr.r()[(i, i)]).collect();
    let mut q = qr.q();
    // Fix signs so the distribution is Haar rather than half-space biased.
    for (j, rd) in r_diag.iter().enumerate() {
        if *rd < 0.0 {
            for i in 0..dim {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; two uniforms per call is fine at init-time scale.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Δ_bias value with softplus(Δ_bias) = 0.5.
pub fn delta_bias_init() -> f64 {
    (0.5f64.exp() - 1.0).ln()
}

/// Diagonal decay exponents: A = −exp(a_log) log-spaced over [−1, −1e-2].
pub fn a_log_init(lanes: usize) -> Mat {
    let (lo, hi) = ((1e-2f64).ln(), (1.0f64).ln());
    Mat::from_fn(lanes, 1, |i, _| {
        if lanes == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (lanes - 1) as f64
        }
    })
}

impl TransitionSpec {
    pub fn init<R: Rng>(kind: TransitionKind, state_dim: usize, model_dim: usize, rng: &mut R) -> Result<Self> {
        if kind.is_complex() && state_dim % 2 != 0 {
            return Err(Error::config("complex transition requires even state dimension"));
        }
        let lanes = if kind.is_complex() { state_dim / 2 } else { state_dim };
        let delta_bias = Mat::from_element(lanes, 1, delta_bias_init());
        let params = match kind {
            TransitionKind::DiagContractive | TransitionKind::DiagSigned => {
                TransitionParams::DiagSelective {
                    a_log: a_log_init(lanes),
                    w_delta: uniform_fan_in(lanes, model_dim, rng),
                    delta_bias,
                }
            }
            TransitionKind::DiagComplexDamped => TransitionParams::ComplexDamped {
                a_re_log: a_log_init(lanes),
                w_delta: uniform_fan_in(lanes, model_dim, rng),
                delta_bias,
                w_theta: uniform_fan_in(lanes, model_dim, rng),
                b_theta: Mat::zeros(lanes, 1),
            },
            TransitionKind::DiagComplexUnitary => TransitionParams::ComplexUnitary {
                w_delta: uniform_fan_in(lanes, model_dim, rng),
                delta_bias,
                w_lambda: uniform_fan_in(lanes, model_dim, rng),
                b_lambda: Mat::zeros(lanes, 1),
            },
            TransitionKind::DiagComplexUnitaryNostep => TransitionParams::ComplexUnitaryNostep {
                w_lambda: uniform_fan_in(lanes, model_dim, rng),
                b_lambda: Mat::zeros(lanes, 1),
            },
            TransitionKind::DenseLinear => {
                TransitionParams::Dense { w_h: orthogonal(state_dim, rng) }
            }
        };
        Ok(TransitionSpec { kind, state_dim, params })
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Mat)> {
        match &self.params {
            TransitionParams::DiagSelective { a_log, w_delta, delta_bias } => {
                vec![("a_log", a_log), ("w_delta", w_delta), ("delta_bias", delta_bias)]
            }
            TransitionParams::ComplexDamped { a_re_log, w_delta, delta_bias, w_theta, b_theta } => vec![
                ("a_re_log", a_re_log),
                ("w_delta", w_delta),
                ("delta_bias", delta_bias),
                ("w_theta", w_theta),
                ("b_theta", b_theta),
            ],
            TransitionParams::ComplexUnitary { w_delta, delta_bias, w_lambda, b_lambda } => vec![
                ("w_delta", w_delta),
                ("delta_bias", delta_bias),
                ("w_lambda", w_lambda),
                ("b_lambda", b_lambda),
            ],
            TransitionParams::ComplexUnitaryNostep { w_lambda, b_lambda } => {
                vec![("w_lambda", w_lambda), ("b_lambda", b_lambda)]
            }
            TransitionParams::Dense { w_h } => vec![("w_h", w_h)],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        match &mut self.params {
            TransitionParams::DiagSelective { a_log, w_delta, delta_bias } => {
                vec![("a_log", a_log), ("w_delta", w_delta), ("delta_bias", delta_bias)]
            }
            TransitionParams::ComplexDamped { a_re_log, w_delta, delta_bias, w_theta, b_theta } => vec![
                ("a_re_log", a_re_log),
                ("w_delta", w_delta),
                ("delta_bias", delta_bias),
                ("w_theta", w_theta),
                ("b_theta", b_theta),
            ],
            TransitionParams::ComplexUnitary { w_delta, delta_bias, w_lambda, b_lambda } => vec![
                ("w_delta", w_delta),
                ("delta_bias", delta_bias),
                ("w_lambda", w_lambda),
                ("b_lambda", b_lambda),
            ],
            TransitionParams::ComplexUnitaryNostep { w_lambda, b_lambda } => {
                vec![("w_lambda", w_lambda), ("b_lambda", b_lambda)]
            }
            TransitionParams::Dense { w_h } => vec![("w_h", w_h)],
        }
    }
}

impl GateSpec {
    pub fn init<R: Rng>(kind: GateKind, state_dim: usize, model_dim: usize, rng: &mut R) -> Self {
        let params = match kind {
            GateKind::None => None,
            GateKind::Token => Some(GateParams {
                w_g: uniform_fan_in(state_dim, model_dim, rng),
                u_g: None,
                b_g: Mat::zeros(state_dim, 1),
            }),
            GateKind::State => Some(GateParams {
                w_g: uniform_fan_in(state_dim, model_dim, rng),
                u_g: Some(uniform_fan_in(state_dim, state_dim, rng)),
                b_g: Mat::zeros(state_dim, 1),
            }),
        };
        GateSpec { kind, params }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Mat)> {
        let mut out = Vec::new();
        if let Some(p) = &self.params {
            out.push(("w_g", &p.w_g));
            if let Some(u) = &p.u_g {
                out.push(("u_g", u));
            }
            out.push(("b_g", &p.b_g));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        let mut out = Vec::new();
        if let Some(p) = &mut self.params {
            out.push(("w_g", &mut p.w_g));
            if let Some(u) = &mut p.u_g {
                out.push(("u_g", u));
            }
            out.push(("b_g", &mut p.b_g));
        }
        out
    }
}

impl InjectionSpec {
    /// `linear_bias` controls whether the linear kind carries b_h (the
    /// Simple AUSSM injection is B·x_t with no bias).
    pub fn init<R: Rng>(
        kind: InjectionKind,
        state_dim: usize,
        model_dim: usize,
        linear_bias: bool,
        rng: &mut R,
    ) -> Self {
        let w_x = uniform_fan_in(state_dim, model_dim, rng);
        let params = match kind {
            InjectionKind::Linear => InjectionParams {
                w_x,
                b_h: linear_bias.then(|| Mat::zeros(state_dim, 1)),
                w_lambda: None,
                b_lambda: None,
            },
            InjectionKind::MambaEuler => {
                InjectionParams { w_x, b_h: None, w_lambda: None, b_lambda: None }
            }
            InjectionKind::Mamba3Trapezoid => InjectionParams {
                w_x,
                b_h: None,
                w_lambda: Some(uniform_fan_in(state_dim / 2, model_dim, rng)),
                b_lambda: Some(Mat::zeros(state_dim / 2, 1)),
            },
        };
        InjectionSpec { kind, params }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Mat)> {
        let mut out = vec![("w_x", &self.params.w_x)];
        if let Some(b) = &self.params.b_h {
            out.push(("b_h", b));
        }
        if let Some(w) = &self.params.w_lambda {
            out.push(("w_lambda", w));
        }
        if let Some(b) = &self.params.b_lambda {
            out.push(("b_lambda", b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        let mut out = vec![("w_x", &mut self.params.w_x)];
        if let Some(b) = &mut self.params.b_h {
            out.push(("b_h", b));
        }
        if let Some(w) = &mut self.params.w_lambda {
            out.push(("w_lambda", w));
        }
        if let Some(b) = &mut self.params.b_lambda {
            out.push(("b_lambda", b));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_vec<R: Rng>(d: usize, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn contractive_factor_tends_to_one_as_delta_vanishes() {
        let mut r = rng(0);
        let mut spec = TransitionSpec::init(TransitionKind::DiagContractive, 4, 6, &mut r).unwrap();
        if let TransitionParams::DiagSelective { w_delta, delta_bias, .. } = &mut spec.params {
            w_delta.fill(0.0);
            delta_bias.fill(-40.0); // softplus(-40) ≈ 4e-18
        }
        let x = random_vec(6, &mut r);
        let h = random_vec(4, &mut r);
        let out = apply_transition(&spec, &x, &h).unwrap();
        assert!((out - &h).amax() < 1e-12);
    }

    #[test]
    fn factor_ranges_hold_over_random_draws() {
        // 10^4 draws per kind: contractive in (0,1), signed in (−1,1),
        // damped modulus < 1, unitary modulus ≡ 1.
        let mut r = rng(7);
        let kinds = [
            TransitionKind::DiagContractive,
            TransitionKind::DiagSigned,
            TransitionKind::DiagComplexDamped,
            TransitionKind::DiagComplexUnitary,
            TransitionKind::DiagComplexUnitaryNostep,
        ];
        for kind in kinds {
            for _ in 0..100 {
                let spec = TransitionSpec::init(kind, 4, 3, &mut r).unwrap();
                for _ in 0..100 {
                    let x = Mat::from_fn(3, 1, |_, _| r.random_range(-3.0..3.0));
                    match spec.factor(&x).unwrap() {
                        TransitionFactor::Diag(d) => match kind {
                            TransitionKind::DiagContractive => {
                                assert!(d.iter().all(|&v| v > 0.0 && v < 1.0))
                            }
                            TransitionKind::DiagSigned => {
                                assert!(d.iter().all(|&v| v > -1.0 && v < 1.0))
                            }
                            _ => unreachable!(),
                        },
                        TransitionFactor::ComplexDiag { modulus, .. } => match kind {
                            TransitionKind::DiagComplexDamped => {
                                assert!(modulus.iter().all(|&v| v > 0.0 && v < 1.0))
                            }
                            _ => assert!(modulus.iter().all(|&v| (v - 1.0).abs() <= 1e-12)),
                        },
                        TransitionFactor::Dense(_) => unreachable!(),
                    }
                }
            }
        }
    }

    #[test]
    fn unitary_factor_matrix_preserves_norm() {
        let mut r = rng(3);
        let spec = TransitionSpec::init(TransitionKind::DiagComplexUnitary, 6, 4, &mut r).unwrap();
        let x = random_vec(4, &mut r);
        let h = random_vec(6, &mut r);
        let out = apply_transition(&spec, &x, &h).unwrap();
        assert!((out.norm() - h.norm()).abs() < 1e-12);
    }

    #[test]
    fn simple_aussm_third_roots_of_unity_cycle() {
        // One complex lane, Λ(x) = 2π/3 per unit input: three steps return h.
        let spec = TransitionSpec {
            kind: TransitionKind::DiagComplexUnitaryNostep,
            state_dim: 2,
            params: TransitionParams::ComplexUnitaryNostep {
                w_lambda: Mat::from_element(1, 1, std::f64::consts::TAU / 3.0),
                b_lambda: Mat::zeros(1, 1),
            },
        };
        let x = DVector::from_element(1, 1.0);
        let mut h = DVector::from_column_slice(&[1.0, 0.0]);
        for _ in 0..3 {
            h = apply_transition(&spec, &x, &h).unwrap();
        }
        assert!((h[0] - 1.0).abs() < 1e-12 && h[1].abs() < 1e-12);
    }

    #[test]
    fn non_finite_factor_is_a_numeric_error() {
        let spec = TransitionSpec {
            kind: TransitionKind::DenseLinear,
            state_dim: 2,
            params: TransitionParams::Dense {
                w_h: Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, f64::NAN]),
            },
        };
        let err = apply_transition(&spec, &DVector::zeros(1), &DVector::zeros(2)).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn gate_kinds_behave_per_definition() {
        let mut r = rng(11);
        let x = random_vec(5, &mut r);
        let h1 = random_vec(4, &mut r);
        let h2 = &h1 + DVector::from_element(4, 0.25);

        let none = GateSpec::none();
        assert_eq!(apply_gate(&none, &x, &h1), DVector::from_element(4, 1.0));

        let token = GateSpec::init(GateKind::Token, 4, 5, &mut r);
        assert_eq!(apply_gate(&token, &x, &h1), apply_gate(&token, &x, &h2));

        let state = GateSpec::init(GateKind::State, 4, 5, &mut r);
        let d = (apply_gate(&state, &x, &h1) - apply_gate(&state, &x, &h2)).amax();
        assert!(d > 1e-9, "state gate must depend on h, diff {d}");
        for v in apply_gate(&state, &x, &h1).iter() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn activation_examples() {
        let z = DVector::zeros(4);
        assert_eq!(apply_activation(ActivationKind::Tanh, &z).unwrap(), z);

        let z = DVector::from_column_slice(&[3.0, 1.0, -2.0, 5.0]);
        let y = apply_activation(ActivationKind::Groupsort2, &z).unwrap();
        assert_eq!(y, DVector::from_column_slice(&[1.0, 3.0, -2.0, 5.0]));
        let y = apply_activation(ActivationKind::MaxPair, &z).unwrap();
        assert_eq!(y, DVector::from_column_slice(&[3.0, 1.0, 5.0, -2.0]));

        let mut r = rng(2);
        let z = random_vec(16, &mut r);
        let y = apply_activation(ActivationKind::Layernorm, &z).unwrap();
        let mean = y.sum() / 16.0;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);

        let tiny = DVector::from_element(4, 1e-14);
        assert!(matches!(
            apply_activation(ActivationKind::Sphere, &tiny),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn tanh_jacobian_at_zero_is_identity() {
        let z = DVector::zeros(5);
        let j = activation_jacobian(ActivationKind::Tanh, &z).unwrap();
        assert_eq!(j, DMatrix::identity(5, 5));
    }

    #[test]
    fn pair_jacobians_are_permutation_matrices() {
        let mut r = rng(5);
        for kind in [ActivationKind::MaxPair, ActivationKind::MinPair, ActivationKind::Groupsort2] {
            let z = random_vec(8, &mut r);
            let j = activation_jacobian(kind, &z).unwrap();
            for i in 0..8 {
                assert_eq!(j.row(i).iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(j.column(i).iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(j.row(i).iter().filter(|&&v| v != 0.0).count(), 1);
            }
        }
    }

    /// Central finite differences, step 1e-6.
    fn fd_jacobian(kind: ActivationKind, z: &DVector<f64>) -> DMatrix<f64> {
        let d = z.len();
        let h = 1e-6;
        let mut jac = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let fp = apply_activation(kind, &zp).unwrap();
            let fm = apply_activation(kind, &zm).unwrap();
            for i in 0..d {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut r = rng(9);
        for kind in ActivationKind::ALL {
            let z = random_vec(8, &mut r);
            let analytic = activation_jacobian(kind, &z).unwrap();
            let fd = fd_jacobian(kind, &z);
            let scale = fd.amax().max(1.0);
            let err = (&analytic - &fd).amax() / scale;
            assert!(err <= 1e-6, "{kind:?}: max rel error {err}");
        }
    }

    #[test]
    fn mamba3_injection_reduces_to_euler_when_lambda_is_one() {
        let mut r = rng(4);
        let spec3 = {
            let mut s = InjectionSpec::init(InjectionKind::Mamba3Trapezoid, 4, 3, false, &mut r);
            // σ(1000) rounds to exactly 1.0 in f64, so λ_t ≡ 1.
            s.params.b_lambda.as_mut().unwrap().fill(1000.0);
            s
        };
        let euler = InjectionSpec {
            kind: InjectionKind::MambaEuler,
            params: InjectionParams {
                w_x: spec3.params.w_x.clone(),
                b_h: None,
                w_lambda: None,
                b_lambda: None,
            },
        };
        let x = Mat::from_fn(3, 2, |_, _| r.random_range(-1.0..1.0));
        let x_prev = Mat::from_fn(3, 2, |_, _| r.random_range(-1.0..1.0));
        let delta = Mat::from_fn(2, 2, |_, _| r.random_range(0.1..0.9));
        let factor = TransitionFactor::ComplexDiag {
            modulus: Mat::from_element(2, 2, 0.9),
            angle: Mat::from_element(2, 2, 0.3),
        };
        let b3 =
            apply_injection_batch(&spec3, &x, &x_prev, Some(&delta), Some(&factor)).unwrap();
        let be = apply_injection_batch(&euler, &x, &x_prev, Some(&delta), None).unwrap();
        assert!((b3 - be).amax() < 1e-15);
    }
}
