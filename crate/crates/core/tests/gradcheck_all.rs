use statetrack_core::autodiff::finite_diff_check;
use statetrack_core::groups::{build_group, sample_batch, TokenSampling};
use statetrack_core::network::{ModelKind, ModelStack, StackConfig};
use statetrack_core::operators::ActivationKind;

#[test]
#[ignore]
fn gradcheck_all_kinds_and_activations() {
    let g = build_group("S3").unwrap();
    let batch = sample_batch(&g, 3, 9, 1234, TokenSampling::UniformAll);
    let mut worst_overall: f64 = 0.0;
    for kind in ModelKind::ALL {
        for depth in [1usize, 2] {
            let sc = StackConfig { vocab: 6, d_model: 12, d_state: 8, depth, layer: kind.layer_config(), readout_bias: false };
            let stack = ModelStack::init(sc, 99).unwrap();
            let report = finite_diff_check(&stack, &batch, 1e-5).unwrap();
            let worst = report.iter().map(|e| e.max_rel_error).fold(0.0f64, f64::max);
            let worst_name = report.iter().max_by(|a, b| a.max_rel_error.partial_cmp(&b.max_rel_error).unwrap()).unwrap();
            println!("{kind:?} L{depth}: worst {:.3e} ({})", worst, worst_name.name);
            worst_overall = worst_overall.max(worst);
        }
    }
    for act in ActivationKind::ALL {
        let mut layer = ModelKind::TanhRnn.layer_config();
        layer.activation = act;
        let sc = StackConfig { vocab: 6, d_model: 12, d_state: 8, depth: 1, layer, readout_bias: false };
        let stack = ModelStack::init(sc, 55).unwrap();
        let report = finite_diff_check(&stack, &batch, 1e-5).unwrap();
        let worst = report.iter().map(|e| e.max_rel_error).fold(0.0f64, f64::max);
        println!("skeleton {act:?}: worst {:.3e}", worst);
        worst_overall = worst_overall.max(worst);
    }
    println!("WORST OVERALL: {worst_overall:.3e}");
    assert!(worst_overall <= 1e-6);
}
