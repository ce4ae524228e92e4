mod common;

use common::{layer_cases, layer_max_error, supcon_grad_error};

const LAYER_TOL: f64 = 1e-4;
const LOSS_TOL: f64 = 1e-5;
const SEEDS: u64 = 20;

fn check(name: &str) {
    let (_, specs, shape) = layer_cases().into_iter().find(|c| c.0 == name).expect("known case");
    let err = layer_max_error(&specs, &shape, SEEDS);
    assert!(err < LAYER_TOL, "{name}: max relative error {err:.2e}");
}

#[test]
fn conv2d_same_and_valid() {
    for name in ["conv2d same", "conv2d same bias", "conv2d valid", "conv2d valid bias"] {
        check(name);
    }
}

#[test]
fn pointwise_conv() {
    check("conv2d pointwise");
}

#[test]
fn depthwise_conv() {
    check("depthwise");
}

#[test]
fn separable_conv() {
    check("separable");
}

#[test]
fn batch_norm_train_mode() {
    check("batch norm");
}

#[test]
fn activations() {
    check("elu");
    check("relu");
}

#[test]
fn pooling() {
    check("avg pool");
    check("max pool");
}

#[test]
fn dropout_with_frozen_mask() {
    check("dropout");
}

#[test]
fn flatten_dense_and_normalizers() {
    check("flatten dense");
    check("l2 normalize");
    check("softmax");
}

#[test]
fn projection_head_chain() {
    check("projection head");
}

#[test]
fn eegnet_first_block() {
    check("eegnet first block");
}

#[test]
fn contrastive_loss_gradient() {
    for seed in 0..SEEDS {
        for tau in [0.07, 1.0] {
            let err = supcon_grad_error(seed, 8, 16, tau);
            assert!(err < LOSS_TOL, "seed {seed} tau {tau}: {err:.2e}");
        }
    }
}
