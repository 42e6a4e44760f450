//! The whole-network gradient check catches a corrupted conv3d backward.

use res3atn::arch::{network_check_config, network_grad_check, reduced_spec, NETWORK_CHECK_BATCH};
use res3atn::tensor::gradcheck::GradCheckConfig;
use res3atn::tensor::Mutation;

#[test]
fn doubled_conv_weight_gradient_fails_the_network_check() {
    let cfg = GradCheckConfig {
        mutation: Some(Mutation::conv3d_weight()),
        ..network_check_config(1)
    };
    let r = network_grad_check::<f64>(&reduced_spec(1), NETWORK_CHECK_BATCH, &cfg).unwrap();
    assert!(!r.passed);
    assert!(r.max_rel_error > 0.3, "{}", r.max_rel_error);
}
