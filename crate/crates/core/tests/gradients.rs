//! Analytic gradients against central differences (step 1e-5, full f64).

#[path = "support/grad_cases.rs"]
mod grad_cases;

const TOL: f64 = 1e-5;

fn check(name: &str, worst: moelab::Result<f64>) {
    let worst = worst.unwrap();
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn gelu_gradient() {
    check("gelu", grad_cases::gelu());
}

#[test]
fn softmax_gradient() {
    check("softmax", grad_cases::softmax());
}

#[test]
fn matmul_gradient() {
    check("matmul", grad_cases::matmul());
}

#[test]
fn attention_gradient() {
    check("attention", grad_cases::attention());
}

#[test]
fn moe_layer_loss_gradient() {
    check("moe layer", grad_cases::moe_layer_loss());
}
