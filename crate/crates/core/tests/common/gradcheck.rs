//! Central finite-difference checks of tape gradients at 64-bit.

#![allow(dead_code)]

use latent_codec::network::{ArchitectureConfig, ModelParams};
use latent_codec::tensor::{Padding, Tape, Tensor, Var};
use latent_codec::train::{record_relaxed_objective, uniform_noise, RDLossConfig};
use latent_codec::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub worst: f64,
    /// (input, element, analytic, numeric) at the worst element.
    pub worst_at: (usize, usize, f64, f64),
    /// Elements whose stencil crosses a kink of a piecewise op; the function
    /// is not differentiable across such a stencil, so they are not compared.
    pub skipped: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst <= TOLERANCE && self.skipped * 20 <= self.checked
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn evaluate(build: &Build, inputs: &[Tensor<f64>]) -> (f64, Vec<u8>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &vars).expect("forward");
    (tape.value(root).item(), tape.branch_signature())
}

/// Compare backward() against central differences for the elements of each
/// input chosen by `pick` (all elements when it returns `None`).
pub fn check(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    build: &Build,
    sample: Option<usize>,
) -> GradReport {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &vars).expect("forward");
    let grads = tape.backward(root).expect("backward");
    let signature = tape.branch_signature();
    let mut skipped = 0;
    let mut worst = 0.0f64;
    let mut worst_at = (0, 0, 0.0, 0.0);
    let mut checked = 0;
    for (i, var) in vars.iter().enumerate() {
        let g = grads.get(*var);
        let n = inputs[i].len();
        let indices: Vec<usize> = match sample {
            Some(k) if k < n => (0..k).map(|j| j * n / k + (j * 7919) % (n / k).max(1)).collect(),
            _ => (0..n).collect(),
        };
        for idx in indices {
            let mut plus = inputs.clone();
            plus[i].data_mut()[idx] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[idx] -= STEP;
            let ((fp, sp), (fm, sm)) = (evaluate(build, &plus), evaluate(build, &minus));
            if sp != signature || sm != signature {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * STEP);
            let err = relative_error(g.data()[idx], numeric);
            if err > worst {
                worst = err;
                worst_at = (i, idx, g.data()[idx], numeric);
            }
            checked += 1;
        }
    }
    GradReport {
        name: name.to_string(),
        checked,
        worst,
        worst_at,
        skipped,
    }
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so kinks sit outside the FD stencil.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.random_range(0.05..1.5);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Reduce any node to a scalar through an MSE against a fixed target.
fn reduce(tape: &mut Tape<f64>, v: Var, target: &Tensor<f64>) -> Result<Var> {
    if tape.value(v).is_scalar() {
        return Ok(v);
    }
    let t = tape.constant(target.clone());
    tape.mse(v, t)
}

/// One report per differentiable op.
pub fn per_op_reports() -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut out = Vec::new();
    let tgt = |shape: &[usize], rng: &mut ChaCha8Rng| random(shape, rng, -1.0, 1.0);

    let t = tgt(&[2, 4, 4, 4], &mut rng);
    out.push(check(
        "conv2d",
        vec![random(&[2, 3, 7, 6], &mut rng, -1.0, 1.0), random(&[4, 3, 3, 3], &mut rng, -0.5, 0.5)],
        &|tp, v| {
            let y = tp.conv2d(v[0], v[1], 2, Padding::new(2, 1))?;
            reduce(tp, y, &t)
        },
        None,
    ));

    let t = tgt(&[1, 2, 8, 6], &mut rng);
    out.push(check(
        "conv_transpose2d",
        vec![random(&[1, 3, 4, 3], &mut rng, -1.0, 1.0), random(&[3, 2, 5, 5], &mut rng, -0.5, 0.5)],
        &|tp, v| {
            let y = tp.conv_transpose2d(v[0], v[1], 2, Padding::new(2, 1))?;
            reduce(tp, y, &t)
        },
        None,
    ));

    let t = tgt(&[2, 3, 2, 2], &mut rng);
    out.push(check(
        "add_bias",
        vec![random(&[2, 3, 2, 2], &mut rng, -1.0, 1.0), random(&[3], &mut rng, -1.0, 1.0)],
        &|tp, v| {
            let y = tp.add_bias(v[0], v[1])?;
            reduce(tp, y, &t)
        },
        None,
    ));

    let t = tgt(&[1, 2, 3, 3], &mut rng);
    out.push(check(
        "leaky_relu",
        vec![away_from_zero(&[1, 2, 3, 3], &mut rng)],
        &|tp, v| {
            let y = tp.leaky_relu(v[0], 0.2);
            reduce(tp, y, &t)
        },
        None,
    ));

    let t = tgt(&[1, 1, 4, 4], &mut rng);
    let inside_and_out = Tensor::from_fn(vec![1, 1, 4, 4], |i| -0.7 + 0.163 * i as f64);
    out.push(check(
        "clamp",
        vec![inside_and_out],
        &|tp, v| {
            let y = tp.clamp(v[0], 0.0, 1.0);
            reduce(tp, y, &t)
        },
        None,
    ));

    let t = tgt(&[3, 2], &mut rng);
    out.push(check(
        "add",
        vec![random(&[3, 2], &mut rng, -1.0, 1.0), random(&[3, 2], &mut rng, -1.0, 1.0)],
        &|tp, v| {
            let y = tp.add(v[0], v[1])?;
            reduce(tp, y, &t)
        },
        None,
    ));

    let t = tgt(&[5], &mut rng);
    out.push(check(
        "scale",
        vec![random(&[5], &mut rng, -1.0, 1.0)],
        &|tp, v| {
            let y = tp.scale(v[0], -2.5);
            reduce(tp, y, &t)
        },
        None,
    ));

    out.push(check(
        "sum",
        vec![random(&[2, 3], &mut rng, -1.0, 1.0)],
        &|tp, v| {
            let s = tp.sum(v[0]);
            Ok(tp.scale(s, 0.75))
        },
        None,
    ));

    out.push(check(
        "mse",
        vec![random(&[2, 2, 3], &mut rng, -1.0, 1.0), random(&[2, 2, 3], &mut rng, -1.0, 1.0)],
        &|tp, v| tp.mse(v[0], v[1]),
        None,
    ));

    out.push(check(
        "logistic_bits",
        vec![
            random(&[2, 3, 3, 2], &mut rng, -4.0, 4.0),
            random(&[3], &mut rng, -1.0, 1.0),
            random(&[3], &mut rng, -1.0, 1.5),
        ],
        &|tp, v| Ok(tp.logistic_bits(v[0], v[1], v[2], 16.0)?.0),
        None,
    ));
    out
}

/// The relaxed rate-distortion loss of the default model on a 16×16 image,
/// differentiated with respect to the image and every parameter tensor.
pub fn full_loss_report(sample_per_tensor: usize) -> GradReport {
    let params = ModelParams::init(ArchitectureConfig::default(), 0.01, 11).expect("init");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[1, 3, 16, 16], &mut rng, 0.0, 1.0);
    let noise = uniform_noise(&[1, 48, 2, 2], 3, 0, 0).cast::<f64>();
    let cfg = RDLossConfig::new(0.01).expect("config");
    let mut inputs = vec![x];
    inputs.extend(params.tensors().iter().map(|(_, t)| t.cast::<f64>()));

    let build = |tp: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        // Registered constants are replaced by the checked leaves below.
        let mut vars = params.register(tp, |_| false);
        let mut it = v[1..].iter().copied();
        for layer in vars.encoder.iter_mut().chain(vars.decoder.iter_mut()) {
            *layer = (it.next().unwrap(), it.next().unwrap());
        }
        vars.loc = it.next().unwrap();
        vars.log_scale = it.next().unwrap();
        let y = params.encoder_on_tape(tp, &vars, v[0])?;
        let obj = record_relaxed_objective(tp, &params, &vars, y, v[0], noise.clone(), &cfg)?;
        Ok(obj.loss)
    };
    check("rd_loss (16x16, all parameters)", inputs, &build, Some(sample_per_tensor))
}
