//! Analytic gradients of the flow-matching loss against central finite
//! differences on a depth-1, width-8 model.

use smoothdit_core::grad::{example_loss, gradient_check, loss_and_grad, CfmExample};
use smoothdit_core::toy::{cfm_example, gen_sample, SignalFamily};
use smoothdit_core::{Branch, Dit, ModelConfig, Purpose, Rng};

/// Small enough that f32 rounding in the loss stays below the O(h²)
/// truncation error.
const FD_STEP: f32 = 3e-3;

fn tiny_model() -> Dit {
    let config = ModelConfig {
        depth: 1,
        width: 8,
        heads: 2,
        ffn_mult: 2,
        seq_len: 6,
        in_dim: 3,
    };
    let mut model = Dit::init(config, 21).unwrap();
    // Move every parameter away from its structured init so no gradient is
    // trivially zero.
    let mut rng = Rng::substream(5, Purpose::Test, 0);
    for t in model.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    model
}

fn batch(model: &Dit) -> Vec<CfmExample> {
    let mut rng = Rng::substream(6, Purpose::Test, 1);
    let [seq, dim] = model.config.sample_shape();
    [Branch::Cond, Branch::Uncond]
        .into_iter()
        .map(|branch| {
            let s = gen_sample(&mut rng, seq, dim, &SignalFamily::default());
            cfm_example(&s.x1, &s.cond, branch, &mut rng).unwrap()
        })
        .collect()
}

#[test]
fn every_parameter_tensor_matches_central_differences() {
    let model = tiny_model();
    let batch = batch(&model);
    let (loss, _) = loss_and_grad(&model, &batch).unwrap();
    let direct = batch.iter().map(|ex| example_loss(&model, ex).unwrap()).sum::<f64>() / batch.len() as f64;
    assert!((loss - direct).abs() < 1e-9);
    let report = gradient_check(&model, &batch, FD_STEP).unwrap();
    assert_eq!(report.len(), model.param_names().len());
    for (name, err) in &report {
        println!("{name:>20}: relative error {err:.2e}");
        assert!(*err < 1e-3, "{name}: relative error {err:.3e}");
    }
}
