mod common;

use common::{checks, tiny_config};

#[test]
fn weak_methods_never_see_points() {
    checks::supervision_hygiene(&tiny_config(), 3).unwrap();
}

#[test]
fn sequential_runs_write_identical_metrics() {
    checks::metrics_are_reproducible(&tiny_config(), 4).unwrap();
}
