use edgepipe_core::gradcheck::{worst_rel_err, KINDS};
use edgepipe_core::DType;

const INSTANCES: u64 = 24;

fn run(dtype: DType, tol: f64) {
    for kind in KINDS {
        let worst = worst_rel_err(kind, dtype, INSTANCES, 1000).unwrap();
        println!("{kind:16} {dtype:?} worst rel err {worst:.2e} over {INSTANCES}");
        assert!(worst <= tol, "{kind} ({dtype:?}): rel err {worst:e}");
    }
}

#[test]
fn every_layer_kind_matches_finite_differences_f32() {
    run(DType::F32, 1e-3);
}

#[test]
fn every_layer_kind_matches_finite_differences_f64() {
    run(DType::F64, 1e-6);
}

#[test]
fn unknown_kind_is_none() {
    assert!(worst_rel_err("batchnorm", DType::F32, 1, 0).is_none());
}
