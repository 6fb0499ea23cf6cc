//! Ignored-by-default timing/tuning probe for curriculum runs at acceptance
//! scale. Parameters come from env vars so sweeps need no recompilation:
//!   PROBE_MODEL, PROBE_GROUP, PROBE_DSTATE, PROBE_DMODEL, PROBE_LR,
//!   PROBE_EPOCHS, PROBE_SEED, PROBE_ACT, PROBE_TRAIN_SEQS, PROBE_BATCH
//! Run: cargo test -p statetrack-core --test timing_probe -- --ignored --nocapture

use statetrack_core::groups::build_group;
use statetrack_core::network::{ModelKind, StackConfig};
use statetrack_core::operators::ActivationKind;
use statetrack_core::training::{train_curriculum, TrainConfig};

fn env_or<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

#[test]
#[ignore]
fn probe_one_run() {
    let model = std::env::var("PROBE_MODEL").unwrap_or_else(|_| "tanh_rnn".into());
    let group_name = std::env::var("PROBE_GROUP").unwrap_or_else(|_| "S3".into());
    let kind = match model.as_str() {
        "mamba" => ModelKind::Mamba,
        "negative_mamba" => ModelKind::NegativeMamba,
        "mamba3" => ModelKind::Mamba3,
        "aussm" => ModelKind::Aussm,
        "simple_aussm" => ModelKind::SimpleAussm,
        "linear_rnn" => ModelKind::LinearRnn,
        "token_gated_rnn" => ModelKind::TokenGatedRnn,
        "state_gated_rnn" => ModelKind::StateGatedRnn,
        _ => ModelKind::TanhRnn,
    };
    let group = build_group(&group_name).unwrap();
    let mut sc = StackConfig {
        vocab: group.order,
        d_model: env_or("PROBE_DMODEL", 64),
        d_state: env_or("PROBE_DSTATE", 16),
        depth: env_or("PROBE_DEPTH", 1),
        layer: kind.layer_config(),
        readout_bias: false,
    };
    if let Ok(act) = std::env::var("PROBE_ACT") {
        sc.layer.activation = match act.as_str() {
            "identity" => ActivationKind::Identity,
            "relu" => ActivationKind::Relu,
            "max_pair" => ActivationKind::MaxPair,
            "min_pair" => ActivationKind::MinPair,
            "groupsort2" => ActivationKind::Groupsort2,
            "layernorm" => ActivationKind::Layernorm,
            "sphere" => ActivationKind::Sphere,
            _ => ActivationKind::Tanh,
        };
    }
    let mut tc = TrainConfig::desk();
    tc.lr = env_or("PROBE_LR", 1e-3);
    tc.max_total_epochs = env_or("PROBE_EPOCHS", 150);
    tc.train_seqs_per_stage = env_or("PROBE_TRAIN_SEQS", 2000);
    tc.batch_size = env_or("PROBE_BATCH", 128);
    let seed = env_or("PROBE_SEED", 0u64);
    let t0 = std::time::Instant::now();
    let (rec, _) = train_curriculum(&model, &sc, &tc, &group, seed).unwrap();
    println!(
        "{model}/{group_name} d_state={} lr={} seed={seed}: {:.1}s epochs={} converged={} mp={} evals={:?} stages={:?}",
        sc.d_state,
        tc.lr,
        t0.elapsed().as_secs_f64(),
        rec.total_epochs,
        rec.converged,
        rec.mp,
        rec.eval.iter().map(|e| (e.length, (e.token_acc * 1000.0).round() / 1000.0)).collect::<Vec<_>>(),
        rec.stages.iter().map(|s| (s.length, s.epochs, (s.final_test_acc * 1000.0).round() / 1000.0)).collect::<Vec<_>>()
    );
}
