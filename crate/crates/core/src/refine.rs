//! Per-image latent refinement with every model parameter frozen.

use std::path::Path;

use crate::entropy::RateMode;
use crate::error::{Error, Result};
use crate::network::ModelParams;
use crate::tensor::{self, Tape, Tensor};
use crate::train::{record_relaxed_objective, uniform_noise, AdamState, RDLossConfig, MSE_SCALE_8BIT};

#[derive(Clone, Debug, PartialEq)]
pub struct RefineConfig {
    pub max_steps: usize,
    pub lr: f64,
    /// Overrides the model's training λ when set.
    pub lambda: Option<f64>,
    pub distortion_scale: f64,
    /// Steps between hard-quantized checkpoint evaluations.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            max_steps: 1500,
            lr: 1e-3,
            lambda: None,
            distortion_scale: MSE_SCALE_8BIT,
            eval_every: 25,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("evaluation cadence must be at least 1".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self, params: &ModelParams) -> Result<RDLossConfig> {
        let cfg = RDLossConfig {
            lambda: self.lambda.unwrap_or(params.lambda),
            distortion_scale: self.distortion_scale,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One hard-quantized evaluation during refinement.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Checkpoint {
    pub step: usize,
    pub relaxed_loss: f64,
    pub true_loss: f64,
    pub true_rate_bits: f64,
    pub true_mse: f64,
}

#[derive(Clone, Debug)]
pub struct RefineResult {
    /// Continuous latents of the chosen checkpoint.
    pub latents: Tensor<f32>,
    pub trace: Vec<Checkpoint>,
    pub best: usize,
    /// Set when refinement stopped on a non-finite value.
    pub diverged: bool,
}

impl RefineResult {
    pub fn best_checkpoint(&self) -> &Checkpoint {
        &self.trace[self.best]
    }

    pub fn initial_checkpoint(&self) -> &Checkpoint {
        &self.trace[0]
    }

    /// Write the trace as CSV (step, relaxed_loss, true_loss, true_rate_bits, true_mse).
    pub fn write_trace(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.trace {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Round to the nearest integer and clamp to the raw escape range.
pub fn quantize_latents(y: &Tensor<f32>) -> Tensor<f32> {
    y.map(|v| v.round().clamp(i16::MIN as f32, i16::MAX as f32))
}

/// Hard-quantized objective: discrete rate of `round(y)` per pixel plus the
/// weighted MSE of the clamped reconstruction.
pub fn true_objective(
    y: &Tensor<f32>,
    x: &Tensor<f32>,
    params: &ModelParams,
    cfg: &RDLossConfig,
) -> Result<(f64, f64, f64)> {
    let [_, _, h, w] = x.dims4()?;
    let y_hat = quantize_latents(y);
    let rate = params.prior.rate_bits(&y_hat, RateMode::Discrete)?;
    let x_hat = params.decode_forward(&y_hat)?;
    let mse = tensor::mse(&x.cast::<f64>(), &x_hat.cast::<f64>())?;
    let loss = rate.bits / (h * w) as f64 + cfg.distortion_weight() * mse;
    Ok((loss, rate.bits, mse))
}

fn relaxed_step(
    y: &Tensor<f32>,
    x: &Tensor<f32>,
    params: &ModelParams,
    cfg: &RDLossConfig,
    noise: Tensor<f32>,
    with_grad: bool,
) -> Result<(f64, Option<Tensor<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let vars = params.register(&mut tape, |_| false);
    let yv = tape.param(y.clone());
    let xv = tape.constant(x.clone());
    let obj = record_relaxed_objective(&mut tape, params, &vars, yv, xv, noise, cfg)?;
    let loss = tape.value(obj.loss).item() as f64;
    if !loss.is_finite() {
        return Err(Error::divergence("loss", "non-finite relaxed loss"));
    }
    let grad = if with_grad {
        Some(tape.backward(obj.loss)?.take(yv))
    } else {
        None
    };
    Ok((loss, grad))
}

/// Gradient descent (Adam) on the latents `y0` of image `x` under the relaxed
/// objective, returning the checkpoint with the lowest hard-quantized loss.
pub fn refine_latents(
    y0: &Tensor<f32>,
    x: &Tensor<f32>,
    params: &ModelParams,
    cfg: &RefineConfig,
) -> Result<RefineResult> {
    cfg.validate()?;
    let loss_cfg = cfg.loss_config(params)?;
    let d = params.config.downsampling();
    let [n, c, h, w] = x.dims4()?;
    let expected = [n, params.config.latent_channels, h / d, w / d];
    if c != 3 || h % d != 0 || w % d != 0 || y0.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "refine_latents",
            left: y0.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    if !y0.is_finite() {
        return Err(Error::rejected("initial latents are not finite"));
    }

    let mut y = y0.clone();
    let mut adam = AdamState::<f32>::new(cfg.lr, &[y.shape()]);
    let mut trace = Vec::new();
    let mut best: Option<(usize, Tensor<f32>)> = None;
    let mut diverged = false;

    for step in 0..=cfg.max_steps {
        let checkpoint = step % cfg.eval_every == 0 || step == cfg.max_steps;
        let last = step == cfg.max_steps;
        if !checkpoint && last {
            break;
        }
        let noise = uniform_noise(y.shape(), cfg.seed, 0, step as u64);
        let (relaxed, grad) = match relaxed_step(&y, x, params, &loss_cfg, noise, !last) {
            Ok(r) => r,
            Err(Error::Divergence { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if checkpoint {
            let (true_loss, bits, mse) = true_objective(&y, x, params, &loss_cfg)?;
            trace.push(Checkpoint {
                step,
                relaxed_loss: relaxed,
                true_loss,
                true_rate_bits: bits,
                true_mse: mse,
            });
            let improved = best
                .as_ref()
                .is_none_or(|(i, _)| true_loss < trace[*i].true_loss);
            if improved {
                best = Some((trace.len() - 1, y.clone()));
            }
        }
        let Some(grad) = grad else { break };
        if adam.step(&mut [&mut y], &[grad]).is_err() || !y.is_finite() {
            diverged = true;
            break;
        }
    }

    let (best, latents) = match best {
        Some(b) => b,
        None => return Err(Error::divergence("refine", "no finite checkpoint")),
    };
    Ok(RefineResult {
        latents,
        trace,
        best,
        diverged,
    })
}
