mod support;

use support::oracle::{adapter_step, feddat_step};

#[test]
fn feddat_step_matches_oracle() {
    let (err, moved) = feddat_step();
    assert!(err <= 1e-10, "max deviation {err:e}");
    assert!(moved, "the step left a trained tensor unchanged");
}

#[test]
fn adapter_step_matches_oracle() {
    let err = adapter_step();
    assert!(err <= 1e-10, "max deviation {err:e}");
}
