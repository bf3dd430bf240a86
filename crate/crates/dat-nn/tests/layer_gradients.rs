//! Layer-level gradient checks against central differences (f64).

use dat_nn::check::gradient_battery;

#[test]
fn attention_layer_gradients() {
    for result in gradient_battery(Some("attention")).unwrap() {
        assert!(
            result.max_rel_error < 1e-5,
            "{}: max rel error {}",
            result.name,
            result.max_rel_error
        );
    }
}

#[test]
fn dmha_gradients_cover_offsets_bias_and_projections() {
    let results = gradient_battery(Some("dmha")).unwrap();
    assert_eq!(results.len(), 2);
    for result in results {
        assert!(
            result.max_rel_error < 1e-4,
            "{}: max rel error {}",
            result.name,
            result.max_rel_error
        );
    }
}

#[test]
fn ddetr_and_block_gradients() {
    for filter in ["ddetr", "transformer_block"] {
        for result in gradient_battery(Some(filter)).unwrap() {
            assert!(
                result.max_rel_error < 1e-5,
                "{}: max rel error {}",
                result.name,
                result.max_rel_error
            );
        }
    }
}
