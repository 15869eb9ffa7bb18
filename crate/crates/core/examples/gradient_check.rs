//! Record a small graph on the tape and compare backward() with central
//! finite differences.

use latent_codec::tensor::{Padding, Tape, Tensor};

fn loss(x: &Tensor<f64>, k: &Tensor<f64>) -> (f64, Tensor<f64>) {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let kv = tape.constant(k.clone());
    let y = tape.conv2d(xv, kv, 2, Padding::same_scale(3, 2)).unwrap();
    let y = tape.leaky_relu(y, 0.1);
    let y = tape.scale(y, 0.5);
    let root = tape.sum(y);
    let grads = tape.backward(root).unwrap();
    (tape.value(root).item(), grads.get(xv))
}

fn main() {
    let x = Tensor::from_fn(vec![1, 2, 6, 6], |i| ((i * 37) % 11) as f64 / 5.0 - 1.0);
    let k = Tensor::from_fn(vec![3, 2, 3, 3], |i| ((i * 13) % 7) as f64 / 3.0 - 1.0);
    let (_, analytic) = loss(&x, &k);
    let step = 1e-4;
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[i] += step;
        minus.data_mut()[i] -= step;
        let numeric = (loss(&plus, &k).0 - loss(&minus, &k).0) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    println!("checked {} elements, worst relative error {worst:.2e}", x.len());
}
