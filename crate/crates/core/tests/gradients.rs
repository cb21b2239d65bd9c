mod common;

use common::gradcases::op_cases;
use speakerlab::numerics::{finite_diff_check, GradCheckOptions};

#[test]
fn every_op_matches_central_differences() {
    for (name, case) in op_cases() {
        for seed in 0..20 {
            let c = case(seed);
            let report = finite_diff_check(&c.store, &c.build, GradCheckOptions::default()).unwrap();
            assert!(report.passed(), "{name} seed {seed}: {:?}", report.failures());
        }
    }
}
