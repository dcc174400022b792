use histonet::check::{layer_checks, loss_checks, model_check};

#[test]
fn every_layer_passes() {
    for r in layer_checks(1).unwrap() {
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn every_loss_passes() {
    for r in loss_checks(2).unwrap() {
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn tiny_model_passes_on_all_parameters() {
    for dsn in [false, true] {
        let r = model_check(3, dsn, None).unwrap();
        assert!(r.passed() && r.checked > 10 * r.skipped, "{r:?}");
    }
}
