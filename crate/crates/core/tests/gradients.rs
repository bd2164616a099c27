mod common;

use calibprune::trainer::loss_and_grads;
use common::{gradient_check, micro_batch, micro_model, reference};

#[test]
fn reference_loss_agrees_with_library_loss() {
    let w = micro_model(1);
    let batch = micro_batch(1);
    let (loss, _) = loss_and_grads(&w, &batch).unwrap();
    let expect = reference::loss(&reference::to_f64(&w), w.config(), &batch);
    assert!(
        (f64::from(loss) - expect).abs() < 1e-5,
        "{loss} vs {expect}"
    );
}

#[test]
fn every_gradient_component_matches_finite_differences() {
    for seed in [2, 3] {
        let w = micro_model(seed);
        let (checked, bad) = gradient_check(&w, &micro_batch(seed));
        assert_eq!(checked, w.num_parameters());
        assert!(
            bad.is_empty(),
            "seed {seed}: {} mismatches, first {:?}",
            bad.len(),
            bad.first()
        );
    }
}
