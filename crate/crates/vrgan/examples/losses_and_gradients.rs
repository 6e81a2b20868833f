//! Evaluate the four training loss terms on the tape and cross-check an
//! autodiff gradient against central finite differences.
//!
//! The kernels are generic over the float type, so the same code runs the
//! f32 training path and the f64 verification path used here.
//!
//! Run with: cargo run --release --example losses_and_gradients

use ndarray::{ArrayD, IxDyn};
use vrgan::autodiff::{grad, Tape};
use vrgan::train::{l1_mean, loss_reg};

fn leaf(tape: &Tape<f64>, values: &[f64]) -> vrgan::autodiff::Var<f64> {
    tape.leaf(ArrayD::from_shape_vec(IxDyn(&[values.len()]), values.to_vec()).unwrap())
}

/// A miniature composite objective: lambda_fit * |p - y| + lambda_reg * |p|.
fn objective(p: &[f64], y: &[f64]) -> f64 {
    let tape = Tape::new();
    let pv = leaf(&tape, p);
    let yv = leaf(&tape, y);
    let fit = l1_mean(&pv, &yv).unwrap();
    let reg = loss_reg(&pv).unwrap();
    fit.scale(0.3).add(&reg.scale(0.03)).scalar_value()
}

fn main() -> vrgan::Result<()> {
    let p = [0.62, 0.81, 0.44, 0.93];
    let y = [0.70, 0.70, 0.70, 0.70];

    // Worked values of the individual terms.
    let tape = Tape::new();
    let pv = leaf(&tape, &p);
    let yv = leaf(&tape, &y);
    println!("l1_mean(p, y) = {:.6}", l1_mean(&pv, &yv)?.scalar_value());
    println!("loss_reg(p)   = {:.6}", loss_reg(&pv)?.scalar_value());

    // Autodiff gradient of the composite objective vs central differences.
    let total = l1_mean(&pv, &yv)?.scale(0.3).add(&loss_reg(&pv)?.scale(0.03));
    let g = &grad(&total, &[&pv])[0];
    let eps = 1e-6;
    println!("index  autodiff      finite-diff");
    for i in 0..p.len() {
        let mut hi = p;
        let mut lo = p;
        hi[i] += eps;
        lo[i] -= eps;
        let fd = (objective(&hi, &y) - objective(&lo, &y)) / (2.0 * eps);
        let ad = g.data()[i];
        println!("{i}      {ad:+.8}   {fd:+.8}");
        assert!((ad - fd).abs() < 1e-6, "gradient mismatch at {i}");
    }
    println!("all components agree to 1e-6");
    Ok(())
}
