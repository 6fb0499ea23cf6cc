//! Trainable stacks of canonical recursive layers.
//!
//! A stack is: learned token embedding → L pre-norm residual blocks → linear
//! readout W_out over the residual stream. Each block normalizes its stream
//! input, runs the canonical recurrence
//! `h_t = φ(g(h_{t-1},x̃_t) ⊙ (A(x̃_t)·h_{t-1}) + b(x̃_t))` over the sequence,
//! and writes `C·h_t (+ D ⊙ x̃_t)` back into the stream. The model predicts
//! the running group product at every step; everything is f64.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::groups::{TokenSequence, TrajectoryLabels};
use crate::operators::{
    self, kernels, ActivationKind, GateKind, GateSpec, InjectionKind, InjectionSpec, TransitionKind, TransitionParams, TransitionSpec, LAYERNORM_EPS,
    SPHERE_MIN_NORM,
};
use kernels::Mat;

// ── model zoo ───────────────────────────────────────────────────────

/// The nine main-experiment models, named by their canonical-form mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mamba,
    NegativeMamba,
    Mamba3,
    Aussm,
    SimpleAussm,
    LinearRnn,
    TokenGatedRnn,
    TanhRnn,
    StateGatedRnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 9] = [
        ModelKind::Mamba,
        ModelKind::NegativeMamba,
        ModelKind::Mamba3,
        ModelKind::Aussm,
        ModelKind::SimpleAussm,
        ModelKind::LinearRnn,
        ModelKind::TokenGatedRnn,
        ModelKind::TanhRnn,
        ModelKind::StateGatedRnn,
    ];

    /// Affine means the state Jacobian ∂h_t/∂h_{t-1} does not depend on
    /// h_{t-1}; only the tanh and state-gated RNNs are state-dependent.
    pub fn is_affine(self) -> bool {
        !matches!(self, ModelKind::TanhRnn | ModelKind::StateGatedRnn)
    }

    pub fn layer_config(self) -> RecurrentLayerConfig {
        use ModelKind::*;
        let (transition, gate, activation, injection, ssm_skip, injection_bias) = match self {
            Mamba => (
                TransitionKind::DiagContractive,
                GateKind::None,
                ActivationKind::Identity,
                InjectionKind::MambaEuler,
                true,
                false,
            ),
            NegativeMamba => (
                TransitionKind::DiagSigned,
                GateKind::None,
                ActivationKind::Identity,
                InjectionKind::MambaEuler,
                true,
                false,
            ),
            Mamba3 => (
                TransitionKind::DiagComplexDamped,
                GateKind::None,
                ActivationKind::Identity,
                InjectionKind::Mamba3Trapezoid,
                true,
                false,
            ),
            Aussm => (
                TransitionKind::DiagComplexUnitary,
                GateKind::None,
                ActivationKind::Identity,
                InjectionKind::MambaEuler,
                true,
                false,
            ),
            SimpleAussm => (
                TransitionKind::DiagComplexUnitaryNostep,
                GateKind::None,
                ActivationKind::Identity,
                InjectionKind::Linear,
                true,
                false,
            ),
            LinearRnn => (
                TransitionKind::DenseLinear,
                GateKind::None,
                ActivationKind::Identity,
                InjectionKind::Linear,
                false,
                true,
            ),
            TokenGatedRnn => (
                TransitionKind::DenseLinear,
                GateKind::Token,
                ActivationKind::Identity,
                InjectionKind::Linear,
                false,
                true,
            ),
            TanhRnn => (
                TransitionKind::DenseLinear,
                GateKind::None,
                ActivationKind::Tanh,
                InjectionKind::Linear,
                false,
                true,
            ),
            StateGatedRnn => (
                TransitionKind::DenseLinear,
                GateKind::State,
                ActivationKind::Identity,
                InjectionKind::Linear,
                false,
                true,
            ),
        };
        RecurrentLayerConfig { transition, gate, activation, injection, ssm_skip, injection_bias }
    }
}

/// The (A, g, φ, b) choice for one recurrent block, plus decoder details.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentLayerConfig {
    pub transition: TransitionKind,
    pub gate: GateKind,
    pub activation: ActivationKind,
    pub injection: InjectionKind,
    /// Include the diagonal skip D ⊙ x̃ in the block decoder (SSM kinds).
    pub ssm_skip: bool,
    /// Include b_h in a linear injection (RNN kinds).
    pub injection_bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    /// Vocabulary = |G|; the readout has one row per group element.
    pub vocab: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub depth: usize,
    pub layer: RecurrentLayerConfig,
    pub readout_bias: bool,
}

/// One pre-norm residual block around a canonical recurrent layer.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln_gamma: Mat,
    pub ln_beta: Mat,
    pub transition: TransitionSpec,
    pub gate: GateSpec,
    pub injection: InjectionSpec,
    /// Decoder C: state → stream contribution, d_model×d_state.
    pub c_out: Mat,
    /// Diagonal skip D (d_model×1), SSM kinds only.
    pub d_skip: Option<Mat>,
    /// Initial operator state (d_state×1). Zero for trained models; settable
    /// for exact-construction experiments. Not a trainable parameter.
    pub h0: Mat,
}

#[derive(Debug, Clone)]
pub struct ModelStack {
    pub config: StackConfig,
    /// Token embedding table, d_model×vocab.
    pub embedding: Mat,
    pub blocks: Vec<Block>,
    /// Readout W_out, vocab×d_model, applied to the final residual stream.
    pub w_out: Mat,
    pub b_out: Option<Mat>,
}

impl ModelStack {
    pub fn init(config: StackConfig, seed: u64) -> Result<Self> {
        if config.depth == 0 {
            return Err(Error::config("stack depth must be at least 1"));
        }
        if config.layer.activation.needs_even_dim() && config.d_state % 2 != 0 {
            return Err(Error::config("pair activations require even d_state"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding =
            Mat::from_fn(config.d_model, config.vocab, |_, _| operators::standard_normal(&mut rng));
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            blocks.push(Block::init(&config, &mut rng)?);
        }
        let w_out = operators::uniform_fan_in(config.vocab, config.d_model, &mut rng);
        let b_out = config.readout_bias.then(|| Mat::zeros(config.vocab, 1));
        Ok(ModelStack { config, embedding, blocks, w_out, b_out })
    }

    /// Canonical flat parameter enumeration (the optimizer, gradients, and
    /// checkpoints all follow this order).
    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![("embedding".into(), &self.embedding)];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("block{l}.{n}");
            out.push((p("ln_gamma"), &b.ln_gamma));
            out.push((p("ln_beta"), &b.ln_beta));
            for (n, t) in b.transition.tensors() {
                out.push((p(&format!("transition.{n}")), t));
            }
            for (n, t) in b.gate.tensors() {
                out.push((p(&format!("gate.{n}")), t));
            }
            for (n, t) in b.injection.tensors() {
                out.push((p(&format!("injection.{n}")), t));
            }
            out.push((p("c_out"), &b.c_out));
            if let Some(d) = &b.d_skip {
                out.push((p("d_skip"), d));
            }
        }
        out.push(("w_out".into(), &self.w_out));
        if let Some(b) = &self.b_out {
            out.push(("b_out".into(), b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = vec![("embedding".into(), &mut self.embedding)];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = |n: &str| format!("block{l}.{n}");
            out.push((p("ln_gamma"), &mut b.ln_gamma));
            out.push((p("ln_beta"), &mut b.ln_beta));
            for (n, t) in b.transition.tensors_mut() {
                out.push((p(&format!("transition.{n}")), t));
            }
            for (n, t) in b.gate.tensors_mut() {
                out.push((p(&format!("gate.{n}")), t));
            }
            for (n, t) in b.injection.tensors_mut() {
                out.push((p(&format!("injection.{n}")), t));
            }
            out.push((p("c_out"), &mut b.c_out));
            if let Some(d) = &mut b.d_skip {
                out.push((p("d_skip"), d));
            }
        }
        out.push(("w_out".into(), &mut self.w_out));
        if let Some(b) = &mut self.b_out {
            out.push(("b_out".into(), b));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Non-trainable buffers (per-block initial states).
    pub fn buffers(&self) -> Vec<(String, &Mat)> {
        self.blocks.iter().enumerate().map(|(l, b)| (format!("block{l}.h0"), &b.h0)).collect()
    }

    pub fn set_initial_state(&mut self, layer: usize, h0: &[f64]) -> Result<()> {
        if h0.len() != self.config.d_state {
            return Err(Error::config("initial state length does not match d_state"));
        }
        self.blocks[layer].h0 = Mat::from_column_slice(h0.len(), 1, h0);
        Ok(())
    }
}

impl Block {
    fn init(config: &StackConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, m) = (config.d_state, config.d_model);
        let lc = &config.layer;
        Ok(Block {
            ln_gamma: Mat::from_element(m, 1, 1.0),
            ln_beta: Mat::zeros(m, 1),
            transition: TransitionSpec::init(lc.transition, d, m, rng)?,
            gate: GateSpec::init(lc.gate, d, m, rng),
            injection: InjectionSpec::init(lc.injection, d, m, lc.injection_bias, rng),
            c_out: operators::uniform_fan_in(m, d, rng),
            d_skip: lc.ssm_skip.then(|| Mat::from_element(m, 1, 1.0)),
            h0: Mat::zeros(d, 1),
        })
    }
}

// ── plain (tape-free) forward ───────────────────────────────────────

/// Per-step, per-layer record of a batched rollout. Step index t is 0-based
/// for storage; the t-th entry holds the state AFTER consuming token t+1.
#[derive(Debug, Clone)]
pub struct RolloutTrace {
    /// hidden[layer][t]: operator state, d_state×B.
    pub hidden: Vec<Vec<Mat>>,
    /// residual[t]: final residual stream (readout input), d_model×B.
    pub residual: Vec<Mat>,
    /// logits[t]: vocab×B.
    pub logits: Vec<Mat>,
}

/// Perturbation applied to the first block's operator state at one step.
#[derive(Debug, Clone)]
pub enum StateOverride {
    /// h_{t0} ← h_{t0} + noise (one column per rollout).
    Additive(Mat),
    /// h_{t0} ← value.
    Replace(Mat),
}

fn gather_columns(table: &Mat, tokens: &[usize]) -> Mat {
    let mut out = Mat::zeros(table.nrows(), tokens.len());
    for (j, &t) in tokens.iter().enumerate() {
        out.set_column(j, &table.column(t));
    }
    out
}

fn check_finite(h: &Mat, step: usize, layer: usize) -> Result<()> {
    if h.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite state at step {step}, layer {layer}")))
    }
}

/// Batched forward over same-length sequences. `override_at` injects into the
/// first block's operator state immediately after that step's update (the
/// block decoder at that step already sees the perturbed state).
pub fn forward_batch(
    stack: &ModelStack,
    seqs: &[TokenSequence],
    override_at: Option<(usize, &StateOverride)>,
) -> Result<RolloutTrace> {
    let t_len = seqs.first().map(|s| s.len()).unwrap_or(0);
    if t_len == 0 || seqs.iter().any(|s| s.len() != t_len) {
        return Err(Error::config("forward requires non-empty sequences of equal length"));
    }
    if let Some((t0, _)) = override_at {
        if t0 == 0 || t0 > t_len {
            return Err(Error::config(format!("override step {t0} outside 1..={t_len}")));
        }
    }
    let b = seqs.len();
    let cfg = &stack.config;
    for s in seqs {
        if s.0.iter().any(|&x| x >= cfg.vocab) {
            return Err(Error::config("token index outside vocabulary"));
        }
    }

    // stream[t]: residual stream entering the current block, d_model×B.
    let mut stream: Vec<Mat> =
        (0..t_len).map(|t| gather_columns(&stack.embedding, &step_tokens(seqs, t))).collect();
    let mut hidden: Vec<Vec<Mat>> = Vec::with_capacity(cfg.depth);

    for (layer, block) in stack.blocks.iter().enumerate() {
        let mut states: Vec<Mat> = Vec::with_capacity(t_len);
        let mut h = repeat_column(&block.h0, b);
        let mut x_prev = Mat::zeros(cfg.d_model, b);
        for t in 0..t_len {
            let x_norm = kernels::layer_norm(&stream[t], LAYERNORM_EPS).0;
            let x_tilde = kernels::add_col_broadcast(
                &kernels::mul_col_broadcast(&x_norm, &block.ln_gamma),
                &block.ln_beta,
            );
            let (factor, delta) = block.transition.factor_and_delta(&x_tilde)?;
            let transported = operators::apply_factor(&factor, &h);
            let gated = match block.gate.kind {
                GateKind::None => transported,
                _ => kernels::hadamard(
                    &operators::gate_batch(&block.gate, &x_tilde, &h),
                    &transported,
                ),
            };
            let injected = operators::apply_injection_batch(
                &block.injection,
                &x_tilde,
                &x_prev,
                delta.as_ref(),
                Some(&factor),
            )?;
            h = operators::activation_batch(cfg.layer.activation, &(gated + injected))?;
            if let Some((t0, ov)) = override_at {
                if layer == 0 && t + 1 == t0 {
                    match ov {
                        StateOverride::Additive(noise) => h += noise,
                        StateOverride::Replace(value) => h = value.clone(),
                    }
                }
            }
            check_finite(&h, t + 1, layer)?;
            let mut out = &block.c_out * &h;
            if let Some(d) = &block.d_skip {
                out += kernels::mul_col_broadcast(&x_tilde, d);
            }
            stream[t] += out;
            states.push(h.clone());
            x_prev = x_tilde;
        }
        hidden.push(states);
    }

    let logits: Vec<Mat> = stream
        .iter()
        .map(|r| {
            let mut z = &stack.w_out * r;
            if let Some(b_out) = &stack.b_out {
                z = kernels::add_col_broadcast(&z, b_out);
            }
            z
        })
        .collect();
    Ok(RolloutTrace { hidden, residual: stream, logits })
}

/// Single-sequence forward; `record_trace = false` keeps only the logits.
pub fn forward(stack: &ModelStack, seq: &TokenSequence, record_trace: bool) -> Result<RolloutTrace> {
    let mut trace = forward_batch(stack, std::slice::from_ref(seq), None)?;
    if !record_trace {
        trace.hidden.clear();
        trace.residual.clear();
    }
    Ok(trace)
}

/// Forward with a one-shot perturbation of the first block's operator state.
pub fn forward_with_state_override(
    stack: &ModelStack,
    seqs: &[TokenSequence],
    override_step: usize,
    over: &StateOverride,
) -> Result<RolloutTrace> {
    forward_batch(stack, seqs, Some((override_step, over)))
}

fn step_tokens(seqs: &[TokenSequence], t: usize) -> Vec<usize> {
    seqs.iter().map(|s| s.0[t]).collect()
}

fn repeat_column(col: &Mat, n: usize) -> Mat {
    let mut out = Mat::zeros(col.nrows(), n);
    for j in 0..n {
        out.set_column(j, &col.column(0));
    }
    out
}

// ── loss and accuracy (tape-free) ───────────────────────────────────

/// Mean per-step cross-entropy over a batch, computed without the tape.
/// Serves as the independent oracle for gradient checks.
pub fn batch_loss(stack: &ModelStack, batch: &[(TokenSequence, TrajectoryLabels)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::config("loss of an empty batch"));
    }
    let seqs: Vec<TokenSequence> = batch.iter().map(|(s, _)| s.clone()).collect();
    let trace = forward_batch(stack, &seqs, None)?;
    let t_len = seqs[0].len();
    let mut total = 0.0;
    for (t, z) in trace.logits.iter().enumerate() {
        for (j, (_, labels)) in batch.iter().enumerate() {
            let col = z.column(j);
            let m = col.max();
            let lse = m + col.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - col[labels.0[t]];
        }
    }
    let loss = total / (t_len * batch.len()) as f64;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::numeric(format!("non-finite loss {loss}")))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Fraction of (sequence, step) pairs with argmax logits == label.
    pub token_acc: f64,
    /// Fraction of sequences whose final step is correct.
    pub final_acc: f64,
}

/// Streamed accuracy evaluation, chunked over the batch to bound memory.
pub fn evaluate_accuracy(
    stack: &ModelStack,
    batch: &[(TokenSequence, TrajectoryLabels)],
    chunk: usize,
) -> Result<AccuracyReport> {
    if batch.is_empty() {
        return Err(Error::config("accuracy of an empty batch"));
    }
    let mut token_hits = 0usize;
    let mut token_total = 0usize;
    let mut final_hits = 0usize;
    for part in batch.chunks(chunk.max(1)) {
        let seqs: Vec<TokenSequence> = part.iter().map(|(s, _)| s.clone()).collect();
        let trace = forward_batch(stack, &seqs, None)?;
        let t_len = seqs[0].len();
        for (j, (_, labels)) in part.iter().enumerate() {
            for t in 0..t_len {
                let col = trace.logits[t].column(j);
                let pred = argmax(col.iter().copied());
                if pred == labels.0[t] {
                    token_hits += 1;
                    if t + 1 == t_len {
                        final_hits += 1;
                    }
                }
                token_total += 1;
            }
        }
    }
    Ok(AccuracyReport {
        token_acc: token_hits as f64 / token_total as f64,
        final_acc: final_hits as f64 / batch.len() as f64,
    })
}

fn argmax(iter: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut idx = 0;
    for (i, v) in iter.enumerate() {
        if v > best {
            best = v;
            idx = i;
        }
    }
    idx
}

/// Nearest-centroid decoding: argmin over columns of `centroids` of the L2
/// distance to `h`, optionally after a linear readout map; ties break to the
/// lowest class index.
pub fn decode_nearest_centroid(
    centroids: &Mat,
    h: &DVector<f64>,
    readout: Option<&Mat>,
) -> usize {
    let transform = |v: DVector<f64>| -> DVector<f64> {
        match readout {
            Some(w) => w * v,
            None => v,
        }
    };
    let hv = transform(h.clone());
    let mut best = f64::INFINITY;
    let mut idx = 0;
    for j in 0..centroids.ncols() {
        let c = transform(centroids.column(j).into_owned());
        let d = (&hv - c).norm();
        if d < best {
            best = d;
            idx = j;
        }
    }
    idx
}

// ── tape forward (training path) ────────────────────────────────────

struct TransitionNodes {
    kind: TransitionKind,
    nodes: Vec<NodeId>, // same order as TransitionSpec::tensors()
}

struct BlockNodes {
    ln_gamma: NodeId,
    ln_beta: NodeId,
    transition: TransitionNodes,
    gate: Vec<NodeId>,
    injection: Vec<NodeId>,
    c_out: NodeId,
    d_skip: Option<NodeId>,
}

/// Record the full loss graph for a batch. Returns the tape, the scalar loss
/// node, and parameter nodes aligned with `ModelStack::tensors()`.
pub fn build_loss_tape(
    stack: &ModelStack,
    batch: &[(TokenSequence, TrajectoryLabels)],
) -> Result<(Tape, NodeId, Vec<NodeId>)> {
    let t_len = batch.first().map(|(s, _)| s.len()).unwrap_or(0);
    if t_len == 0 || batch.iter().any(|(s, _)| s.len() != t_len) {
        return Err(Error::config("loss tape requires non-empty sequences of equal length"));
    }
    let b = batch.len();
    let cfg = &stack.config;
    let mut tape = Tape::new();
    let mut flat: Vec<NodeId> = Vec::new();

    let embedding = tape.param(stack.embedding.clone());
    flat.push(embedding);
    let mut block_nodes = Vec::with_capacity(stack.blocks.len());
    for block in &stack.blocks {
        let ln_gamma = tape.param(block.ln_gamma.clone());
        let ln_beta = tape.param(block.ln_beta.clone());
        flat.push(ln_gamma);
        flat.push(ln_beta);
        let mut tr_nodes = Vec::new();
        for (_, t) in block.transition.tensors() {
            let id = tape.param(t.clone());
            tr_nodes.push(id);
            flat.push(id);
        }
        let mut gate_nodes = Vec::new();
        for (_, t) in block.gate.tensors() {
            let id = tape.param(t.clone());
            gate_nodes.push(id);
            flat.push(id);
        }
        let mut inj_nodes = Vec::new();
        for (_, t) in block.injection.tensors() {
            let id = tape.param(t.clone());
            inj_nodes.push(id);
            flat.push(id);
        }
        let c_out = tape.param(block.c_out.clone());
        flat.push(c_out);
        let d_skip = block.d_skip.as_ref().map(|d| {
            let id = tape.param(d.clone());
            flat.push(id);
            id
        });
        block_nodes.push(BlockNodes {
            ln_gamma,
            ln_beta,
            transition: TransitionNodes { kind: block.transition.kind, nodes: tr_nodes },
            gate: gate_nodes,
            injection: inj_nodes,
            c_out,
            d_skip,
        });
    }
    let w_out = tape.param(stack.w_out.clone());
    flat.push(w_out);
    let b_out = stack.b_out.as_ref().map(|bo| {
        let id = tape.param(bo.clone());
        flat.push(id);
        id
    });

    let seqs: Vec<&TokenSequence> = batch.iter().map(|(s, _)| s).collect();
    let mut stream: Vec<NodeId> = (0..t_len)
        .map(|t| {
            let tokens: Vec<usize> = seqs.iter().map(|s| s.0[t]).collect();
            tape.gather(embedding, &tokens)
        })
        .collect();

    for (layer, block) in stack.blocks.iter().enumerate() {
        let nodes = &block_nodes[layer];
        let mut h = tape.constant(repeat_column(&block.h0, b));
        let mut x_prev = tape.constant(Mat::zeros(cfg.d_model, b));
        for (t, stream_slot) in stream.iter_mut().enumerate() {
            let normed = tape.layer_norm(*stream_slot, LAYERNORM_EPS);
            let scaled = tape.mul_col_broadcast(normed, nodes.ln_gamma);
            let x_tilde = tape.add_col_broadcast(scaled, nodes.ln_beta);

            let (transported, delta, factor) =
                tape_transition(&mut tape, &block.transition, &nodes.transition, x_tilde, h);
            let gated = match block.gate.kind {
                GateKind::None => transported,
                GateKind::Token => {
                    let wx = tape.matmul(nodes.gate[0], x_tilde);
                    let pre = tape.add_col_broadcast(wx, nodes.gate[1]);
                    let gate = tape.sigmoid(pre);
                    tape.hadamard(gate, transported)
                }
                GateKind::State => {
                    let wx = tape.matmul(nodes.gate[0], x_tilde);
                    let uh = tape.matmul(nodes.gate[1], h);
                    let sum = tape.add(wx, uh);
                    let pre = tape.add_col_broadcast(sum, nodes.gate[2]);
                    let gate = tape.sigmoid(pre);
                    tape.hadamard(gate, transported)
                }
            };
            let injected = tape_injection(
                &mut tape,
                &block.injection,
                &nodes.injection,
                x_tilde,
                x_prev,
                delta,
                factor.as_ref(),
            )?;
            let pre_act = tape.add(gated, injected);
            h = tape_activation(&mut tape, cfg.layer.activation, pre_act)?;
            check_finite(tape.value(h), t + 1, layer)?;

            let mut out = tape.matmul(nodes.c_out, h);
            if let Some(d) = nodes.d_skip {
                let skip = tape.mul_col_broadcast(x_tilde, d);
                out = tape.add(out, skip);
            }
            *stream_slot = tape.add(*stream_slot, out);
            x_prev = x_tilde;
        }
    }

    let weight = 1.0 / (t_len * b) as f64;
    let mut terms = Vec::with_capacity(t_len);
    for (t, stream_slot) in stream.iter().enumerate() {
        let mut z = tape.matmul(w_out, *stream_slot);
        if let Some(bo) = b_out {
            z = tape.add_col_broadcast(z, bo);
        }
        let labels: Vec<usize> = batch.iter().map(|(_, l)| l.0[t]).collect();
        terms.push(tape.cross_entropy(z, &labels, weight));
    }
    let loss = tape.sum_scalars(&terms);
    Ok((tape, loss, flat))
}

struct TapeFactor {
    modulus: Option<NodeId>, // lanes×B, None for unit modulus
    angle: Option<NodeId>,   // lanes×B, None for real diagonal
}

fn tape_transition(
    tape: &mut Tape,
    spec: &TransitionSpec,
    nodes: &TransitionNodes,
    x_tilde: NodeId,
    h: NodeId,
) -> (NodeId, Option<NodeId>, Option<TapeFactor>) {
    // Node layout follows TransitionSpec::tensors() ordering per kind.
    match (&spec.params, nodes.kind) {
        (TransitionParams::DiagSelective { .. }, kind) => {
            let (a_log, w_delta, delta_bias) = (nodes.nodes[0], nodes.nodes[1], nodes.nodes[2]);
            let wx = tape.matmul(w_delta, x_tilde);
            let pre = tape.add_col_broadcast(wx, delta_bias);
            let delta = tape.softplus(pre);
            let ea = tape.exp(a_log);
            let a = tape.scalar_affine(ea, -1.0, 0.0);
            let da = tape.mul_col_broadcast(delta, a);
            let mut factor = tape.exp(da);
            if kind == TransitionKind::DiagSigned {
                factor = tape.scalar_affine(factor, 2.0, -1.0);
            }
            let out = tape.hadamard(factor, h);
            (
                out,
                Some(delta),
                Some(TapeFactor { modulus: None, angle: None }),
            )
        }
        (TransitionParams::ComplexDamped { .. }, _) => {
            let (a_re_log, w_delta, delta_bias, w_theta, b_theta) = (
                nodes.nodes[0],
                nodes.nodes[1],
                nodes.nodes[2],
                nodes.nodes[3],
                nodes.nodes[4],
            );
            let wx = tape.matmul(w_delta, x_tilde);
            let pre = tape.add_col_broadcast(wx, delta_bias);
            let delta = tape.softplus(pre);
            let ea = tape.exp(a_re_log);
            let a_re = tape.scalar_affine(ea, -1.0, 0.0);
            let da = tape.mul_col_broadcast(delta, a_re);
            let modulus = tape.exp(da);
            let tx = tape.matmul(w_theta, x_tilde);
            let theta = tape.add_col_broadcast(tx, b_theta);
            let angle = tape.hadamard(delta, theta);
            let rotated = tape.rotate_pairs(angle, h);
            let mod2 = tape.expand_pairs(modulus);
            let out = tape.hadamard(mod2, rotated);
            (
                out,
                Some(delta),
                Some(TapeFactor { modulus: Some(modulus), angle: Some(angle) }),
            )
        }
        (TransitionParams::ComplexUnitary { .. }, _) => {
            let (w_delta, delta_bias, w_lambda, b_lambda) =
                (nodes.nodes[0], nodes.nodes[1], nodes.nodes[2], nodes.nodes[3]);
            let wx = tape.matmul(w_delta, x_tilde);
            let pre = tape.add_col_broadcast(wx, delta_bias);
            let delta = tape.softplus(pre);
            let lx = tape.matmul(w_lambda, x_tilde);
            let lambda = tape.add_col_broadcast(lx, b_lambda);
            let angle = tape.hadamard(delta, lambda);
            let out = tape.rotate_pairs(angle, h);
            (
                out,
                Some(delta),
                Some(TapeFactor { modulus: None, angle: Some(angle) }),
            )
        }
        (TransitionParams::ComplexUnitaryNostep { .. }, _) => {
            let (w_lambda, b_lambda) = (nodes.nodes[0], nodes.nodes[1]);
            let lx = tape.matmul(w_lambda, x_tilde);
            let angle = tape.add_col_broadcast(lx, b_lambda);
            let out = tape.rotate_pairs(angle, h);
            (
                out,
                None,
                Some(TapeFactor { modulus: None, angle: Some(angle) }),
            )
        }
        (TransitionParams::Dense { .. }, _) => {
            let w_h = nodes.nodes[0];
            let out = tape.matmul(w_h, h);
            (
                out,
                None,
                Some(TapeFactor { modulus: None, angle: None }),
            )
        }
    }
}

fn tape_injection(
    tape: &mut Tape,
    spec: &InjectionSpec,
    nodes: &[NodeId],
    x_tilde: NodeId,
    x_prev: NodeId,
    delta: Option<NodeId>,
    factor: Option<&TapeFactor>,
) -> Result<NodeId> {
    // Node layout follows InjectionSpec::tensors(): w_x, [b_h], [w_lambda, b_lambda].
    match spec.kind {
        InjectionKind::Linear => {
            let mut out = tape.matmul(nodes[0], x_tilde);
            if spec.params.b_h.is_some() {
                out = tape.add_col_broadcast(out, nodes[1]);
            }
            Ok(out)
        }
        InjectionKind::MambaEuler => {
            let delta = delta.ok_or_else(|| Error::config("mamba_euler injection needs Δ_t"))?;
            let bx = tape.matmul(nodes[0], x_tilde);
            let scale = if tape.value(delta).nrows() == tape.value(bx).nrows() {
                delta
            } else {
                tape.expand_pairs(delta)
            };
            Ok(tape.hadamard(scale, bx))
        }
        InjectionKind::Mamba3Trapezoid => {
            let delta =
                delta.ok_or_else(|| Error::config("mamba3_trapezoid injection needs Δ_t"))?;
            let f = factor.ok_or_else(|| Error::config("mamba3_trapezoid injection needs A(x_t)"))?;
            let (angle, modulus) = (
                f.angle.ok_or_else(|| Error::config("trapezoid injection expects complex factor"))?,
                f.modulus,
            );
            let (w_lambda, b_lambda) = (nodes[1], nodes[2]);
            let lx = tape.matmul(w_lambda, x_tilde);
            let lpre = tape.add_col_broadcast(lx, b_lambda);
            let lambda = tape.sigmoid(lpre);
            let bx_cur = tape.matmul(nodes[0], x_tilde);
            let bx_prev_raw = tape.matmul(nodes[0], x_prev);
            let mut bx_prev = tape.rotate_pairs(angle, bx_prev_raw);
            if let Some(m) = modulus {
                let m2 = tape.expand_pairs(m);
                bx_prev = tape.hadamard(m2, bx_prev);
            }
            let dl_cur = tape.hadamard(lambda, delta);
            let one_minus = tape.scalar_affine(lambda, -1.0, 1.0);
            let dl_prev = tape.hadamard(one_minus, delta);
            let cur_scale = tape.expand_pairs(dl_cur);
            let prev_scale = tape.expand_pairs(dl_prev);
            let term_cur = tape.hadamard(cur_scale, bx_cur);
            let term_prev = tape.hadamard(prev_scale, bx_prev);
            Ok(tape.add(term_prev, term_cur))
        }
    }
}

fn tape_activation(tape: &mut Tape, kind: ActivationKind, z: NodeId) -> Result<NodeId> {
    Ok(match kind {
        ActivationKind::Identity => z,
        ActivationKind::Tanh => tape.tanh(z),
        ActivationKind::Relu => tape.relu(z),
        ActivationKind::MaxPair => tape.pair_select(z, true),
        ActivationKind::MinPair | ActivationKind::Groupsort2 => tape.pair_select(z, false),
        ActivationKind::Layernorm => tape.layer_norm(z, LAYERNORM_EPS),
        ActivationKind::Sphere => tape.sphere_norm(z, SPHERE_MIN_NORM)?,
    })
}

// ── checkpoints ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset_bytes: u64,
}

/// JSON manifest accompanying the flat binary blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: StackConfig,
    pub tensors: Vec<TensorMeta>,
    pub buffers: Vec<TensorMeta>,
}

/// Write `checkpoint.json` + `checkpoint.bin` under `dir` (atomically:
/// temp file then rename).
pub fn save_checkpoint(stack: &ModelStack, dir: &Path, seed: u64, config_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let describe = |list: Vec<(String, &Mat)>, blob: &mut Vec<u8>| -> Vec<TensorMeta> {
        list.into_iter()
            .map(|(name, t)| {
                let offset_bytes = blob.len() as u64;
                for v in t.iter() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                TensorMeta { name, rows: t.nrows(), cols: t.ncols(), offset_bytes }
            })
            .collect()
    };
    let tensors = describe(stack.tensors(), &mut blob);
    let buffers = describe(stack.buffers(), &mut blob);
    let manifest = CheckpointManifest {
        dtype: "f64le".into(),
        seed,
        config_hash: config_hash.into(),
        config: stack.config.clone(),
        tensors,
        buffers,
    };
    atomic_write(&dir.join("checkpoint.bin"), &blob)?;
    atomic_write(
        &dir.join("checkpoint.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(())
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelStack, CheckpointManifest)> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("checkpoint.json"))?)?;
    if manifest.dtype != "f64le" {
        return Err(Error::config(format!("unsupported checkpoint dtype {}", manifest.dtype)));
    }
    let mut blob = Vec::new();
    std::fs::File::open(dir.join("checkpoint.bin"))?.read_to_end(&mut blob)?;
    let mut stack = ModelStack::init(manifest.config.clone(), 0)?;
    let read_into = |meta: &TensorMeta, target: &mut Mat| -> Result<()> {
        if target.nrows() != meta.rows || target.ncols() != meta.cols {
            return Err(Error::config(format!("checkpoint shape mismatch for {}", meta.name)));
        }
        let start = meta.offset_bytes as usize;
        let n = meta.rows * meta.cols;
        if start + 8 * n > blob.len() {
            return Err(Error::config(format!("checkpoint blob truncated at {}", meta.name)));
        }
        for (i, v) in target.iter_mut().enumerate() {
            let o = start + 8 * i;
            *v = f64::from_le_bytes(blob[o..o + 8].try_into().unwrap());
        }
        Ok(())
    };
    {
        let mut tensors = stack.tensors_mut();
        if tensors.len() != manifest.tensors.len() {
            return Err(Error::config("checkpoint tensor list does not match model"));
        }
        for (meta, (name, t)) in manifest.tensors.iter().zip(tensors.iter_mut()) {
            if meta.name != *name {
                return Err(Error::config(format!(
                    "checkpoint tensor order mismatch: {} vs {name}",
                    meta.name
                )));
            }
            read_into(meta, t)?;
        }
    }
    for (meta, block) in manifest.buffers.iter().zip(stack.blocks.iter_mut()) {
        read_into(meta, &mut block.h0)?;
    }
    Ok((stack, manifest))
}
