//! Rate-distortion objective, Adam, and the training loop.

use std::fmt;
use std::fs::OpenOptions;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{crop, pad_to_multiple, ModelParams, ParamGroup, TapeParams};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Distortion weight that converts MSE on `[0, 1]` samples to 8-bit units.
pub const MSE_SCALE_8BIT: f64 = 255.0 * 255.0;

/// `L = bits / pixels + λ · distortion_scale · MSE`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RDLossConfig {
    pub lambda: f64,
    pub distortion_scale: f64,
}

impl RDLossConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        let cfg = RDLossConfig {
            lambda,
            distortion_scale: MSE_SCALE_8BIT,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if !(self.distortion_scale > 0.0 && self.distortion_scale.is_finite()) {
            return Err(Error::Config("distortion scale must be positive".into()));
        }
        Ok(())
    }

    /// Multiplier applied to MSE in the loss.
    pub fn distortion_weight(&self) -> f64 {
        self.lambda * self.distortion_scale
    }
}

/// Uniform noise in `[-½, ½)` for one (image, step) pair. The stream is a
/// pure function of its key, so any step can be replayed independently.
pub fn uniform_noise(shape: &[usize], seed: u64, image_id: u64, step: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_id);
    rng.set_word_pos((step as u128) << 48);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-0.5f32..0.5))
}

/// Tape handles for the two loss terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct RelaxedObjective {
    pub loss: Var,
    /// `bits / pixels`.
    pub rate_term: Var,
    /// `λ · scale · MSE`.
    pub distortion_term: Var,
    pub rate_bits: Var,
    pub mse: Var,
    pub floored: usize,
}

/// Record the noise-relaxed objective for latents `y` against `target`:
/// `ỹ = y + noise`, `x̃ = φ(ỹ)`, rate under the relaxed prior, MSE pre-clamp.
pub fn record_relaxed_objective<T: Element>(
    tape: &mut Tape<T>,
    params: &ModelParams,
    vars: &TapeParams,
    y: Var,
    target: Var,
    noise: Tensor<T>,
    cfg: &RDLossConfig,
) -> Result<RelaxedObjective> {
    let pixels = {
        let [n, _, h, w] = tape.value(target).dims4()?;
        (n * h * w) as f64
    };
    let noise = tape.constant(noise);
    let y_tilde = tape.add(y, noise)?;
    let (rate_bits, floored) =
        tape.logistic_bits(y_tilde, vars.loc, vars.log_scale, params.prior.floor_bits())?;
    check_finite(tape, rate_bits, "rate")?;
    let x_tilde = params.decoder_on_tape(tape, vars, y_tilde)?;
    check_finite(tape, x_tilde, "decoder")?;
    let mse = tape.mse(target, x_tilde)?;
    check_finite(tape, mse, "distortion")?;
    let rate_term = tape.scale(rate_bits, 1.0 / pixels);
    let distortion_term = tape.scale(mse, cfg.distortion_weight());
    let loss = tape.add(rate_term, distortion_term)?;
    Ok(RelaxedObjective {
        loss,
        rate_term,
        distortion_term,
        rate_bits,
        mse,
        floored,
    })
}

fn check_finite<T: Element>(tape: &Tape<T>, var: Var, stage: &str) -> Result<()> {
    if tape.value(var).is_finite() {
        Ok(())
    } else {
        Err(Error::divergence(stage, "non-finite forward value"))
    }
}

/// Loss value with both terms reported separately.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdLoss<T> {
    pub loss: T,
    pub rate_term: T,
    pub distortion_term: T,
    pub rate_bits: T,
    pub mse: T,
    pub floored: usize,
}

impl<T: Element> RdLoss<T> {
    fn read(tape: &Tape<T>, obj: &RelaxedObjective) -> Self {
        RdLoss {
            loss: tape.value(obj.loss).item(),
            rate_term: tape.value(obj.rate_term).item(),
            distortion_term: tape.value(obj.distortion_term).item(),
            rate_bits: tape.value(obj.rate_bits).item(),
            mse: tape.value(obj.mse).item(),
            floored: obj.floored,
        }
    }
}

/// Relaxed rate-distortion loss of one image under `params`, with the
/// encoder's latents perturbed by `noise` (zeros give the noiseless value).
pub fn rd_loss<T: Element>(
    x: &Tensor<T>,
    params: &ModelParams,
    noise: &Tensor<T>,
    cfg: &RDLossConfig,
) -> Result<RdLoss<T>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, |_| false);
    let xv = tape.constant(x.clone());
    let y = params.encoder_on_tape(&mut tape, &vars, xv)?;
    check_finite(&tape, y, "encoder")?;
    let obj = record_relaxed_objective(&mut tape, params, &vars, y, xv, noise.clone(), cfg)?;
    Ok(RdLoss::read(&tape, &obj))
}

/// Adam with bias correction and per-tensor moment buffers.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
        }
    }

    /// One update of every target with its gradient. Nothing is modified if
    /// any gradient is non-finite.
    pub fn step(&mut self, targets: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if targets.len() != self.first.len() || grads.len() != targets.len() {
            return Err(Error::rejected(format!(
                "adam: {} moment buffers, {} targets, {} gradients",
                self.first.len(),
                targets.len(),
                grads.len()
            )));
        }
        for (i, (t, g)) in targets.iter().zip(grads).enumerate() {
            t.same_shape(g, "adam")?;
            self.first[i].same_shape(g, "adam")?;
            if !g.is_finite() {
                return Err(Error::divergence("adam", format!("non-finite gradient {i}")));
            }
        }
        self.step += 1;
        let c = |v: f64| T::from_f64_lossy(v);
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let bc1 = c(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = c(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (c(self.lr), c(self.eps));
        let one = T::one();
        for ((t, g), (m, v)) in targets
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let it = t
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &gi), (mi, vi)) in it {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Which parameter groups a training run updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainMode {
    Full,
    ProbaOnly,
    Frozen,
}

impl TrainMode {
    pub fn trains(self, group: ParamGroup) -> bool {
        match self {
            TrainMode::Full => true,
            TrainMode::ProbaOnly => group == ParamGroup::Prior,
            TrainMode::Frozen => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::ProbaOnly => "proba-only",
            TrainMode::Frozen => "frozen",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainMode::Full),
            "proba-only" => Ok(TrainMode::ProbaOnly),
            "frozen" => Ok(TrainMode::Frozen),
            other => Err(Error::Config(format!(
                "unknown training mode {other:?} (expected full, proba-only or frozen)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    /// Side of the square training crops; must be a multiple of `D`.
    pub crop: usize,
    pub lr: f64,
    pub seed: u64,
    /// Steps per log row.
    pub log_every: usize,
    /// Abort after this many consecutive non-finite steps.
    pub divergence_patience: usize,
    /// Worker threads for batch shards.
    pub threads: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            steps: 20_000,
            batch_size: 8,
            crop: 64,
            lr: 1e-3,
            seed: 0,
            log_every: 100,
            divergence_patience: 50,
            threads: 1,
        }
    }
}

/// One training-log row: means over the steps since the previous row.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub rate_bpp: f64,
    pub mse: f64,
    pub mode: String,
    pub lambda: f64,
    pub seed: u64,
}

/// Append rows to a CSV file, writing the header only when the file is new.
pub fn append_train_log(path: impl AsRef<Path>, rows: &[TrainLogRow]) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<TrainLogRow>,
    /// Set when training stopped on repeated divergence; `params` is then the
    /// best checkpoint by smoothed loss.
    pub aborted: Option<String>,
}

struct ShardResult {
    grads: Vec<Tensor<f32>>,
    loss: f64,
    rate_bpp: f64,
    mse: f64,
}

fn run_shard(
    params: &ModelParams,
    mode: TrainMode,
    cfg: &RDLossConfig,
    crop: Tensor<f32>,
    noise: Tensor<f32>,
) -> Result<ShardResult> {
    let mut tape = Tape::<f32>::new();
    let vars = params.register(&mut tape, |g| mode.trains(g));
    let x = tape.constant(crop);
    let y = params.encoder_on_tape(&mut tape, &vars, x)?;
    check_finite(&tape, y, "encoder")?;
    let obj = record_relaxed_objective(&mut tape, params, &vars, y, x, noise, cfg)?;
    let terms = RdLoss::read(&tape, &obj);
    if !terms.loss.is_finite() {
        return Err(Error::divergence("loss", "non-finite loss"));
    }
    let grads = if mode == TrainMode::Frozen {
        Vec::new()
    } else {
        let mut g = tape.backward(obj.loss)?;
        vars.vars().into_iter().map(|v| g.take(v)).collect()
    };
    Ok(ShardResult {
        grads,
        loss: terms.loss as f64,
        rate_bpp: terms.rate_term as f64,
        mse: terms.mse as f64,
    })
}

/// Random square crop, reflect-padding images smaller than the crop.
fn random_crop(image: &Tensor<f32>, side: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let [_, _, h, w] = image.dims4()?;
    let padded;
    let src = if h < side || w < side {
        padded = pad_to_multiple(image, side)?;
        &padded
    } else {
        image
    };
    let [_, c, h, w] = src.dims4()?;
    let oy = rng.random_range(0..=h - side);
    let ox = rng.random_range(0..=w - side);
    let mut out = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        for yy in 0..side {
            out.extend_from_slice(&src.data()[(ch * h + oy + yy) * w + ox..][..side]);
        }
    }
    Tensor::new(vec![1, c, side, side], out)
}

/// Train `base` on `corpus` (each image 1×3×H×W in `[0, 1]`).
pub fn train(
    corpus: &[Tensor<f32>],
    base: &ModelParams,
    mode: TrainMode,
    cfg: &RDLossConfig,
    schedule: &TrainSchedule,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::rejected("training corpus is empty"));
    }
    let d = base.config.downsampling();
    if schedule.crop == 0 || !schedule.crop.is_multiple_of(d) {
        return Err(Error::Config(format!(
            "crop size {} must be a positive multiple of {d}",
            schedule.crop
        )));
    }
    if schedule.batch_size == 0 || schedule.log_every == 0 {
        return Err(Error::Config("batch size and log interval must be positive".into()));
    }
    for img in corpus {
        let [n, c, _, _] = img.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::rejected("corpus images must be 1×3×H×W"));
        }
    }

    let mut params = base.clone();
    params.lambda = cfg.lambda;
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let trainable: Vec<bool> = params.tensors().iter().map(|(g, _)| mode.trains(*g)).collect();
    let trained_shapes: Vec<&[usize]> = shapes
        .iter()
        .zip(&trainable)
        .filter_map(|(s, &on)| on.then_some(s.as_slice()))
        .collect();
    let mut adam = AdamState::<f32>::new(schedule.lr, &trained_shapes);

    let mut data_rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut log = Vec::new();
    let mut window = (0.0, 0.0, 0.0, 0usize);
    let mut smoothed: Option<f64> = None;
    let mut best = (f64::INFINITY, params.clone());
    let mut bad_steps = 0usize;
    let threads = schedule.threads.max(1);

    for step in 0..schedule.steps {
        let mut jobs = Vec::with_capacity(schedule.batch_size);
        for slot in 0..schedule.batch_size {
            let idx = data_rng.random_range(0..corpus.len());
            let x = random_crop(&corpus[idx], schedule.crop, &mut data_rng)?;
            let shape = [1, params.config.latent_channels, schedule.crop / d, schedule.crop / d];
            let key = (idx as u64) << 16 | slot as u64;
            let noise = uniform_noise(&shape, schedule.seed, key, step as u64);
            jobs.push((x, noise));
        }

        let results: Vec<Result<ShardResult>> = if threads == 1 {
            jobs.into_iter()
                .map(|(x, n)| run_shard(&params, mode, cfg, x, n))
                .collect()
        } else {
            let p = &params;
            let per = jobs.len().div_ceil(threads);
            let mut chunks: Vec<Vec<(Tensor<f32>, Tensor<f32>)>> = Vec::new();
            let mut it = jobs.into_iter().peekable();
            while it.peek().is_some() {
                chunks.push(it.by_ref().take(per).collect());
            }
            std::thread::scope(|s| {
                let handles: Vec<_> = chunks
                    .into_iter()
                    .map(|chunk| {
                        s.spawn(move || {
                            chunk
                                .into_iter()
                                .map(|(x, n)| run_shard(p, mode, cfg, x, n))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("training shard panicked"))
                    .collect()
            })
        };

        let outcome: Result<Vec<ShardResult>> = results.into_iter().collect();
        let shards = match outcome {
            Ok(s) => s,
            Err(Error::Divergence { stage, detail }) => {
                bad_steps += 1;
                if bad_steps >= schedule.divergence_patience {
                    let msg = format!(
                        "{bad_steps} consecutive divergent steps (last at {stage}: {detail})"
                    );
                    return Ok(TrainOutcome {
                        params: best.1,
                        log,
                        aborted: Some(msg),
                    });
                }
                continue;
            }
            Err(e) => return Err(e),
        };

        let b = shards.len() as f64;
        let loss = shards.iter().map(|s| s.loss).sum::<f64>() / b;
        window.0 += loss;
        window.1 += shards.iter().map(|s| s.rate_bpp).sum::<f64>() / b;
        window.2 += shards.iter().map(|s| s.mse).sum::<f64>() / b;
        window.3 += 1;

        if mode != TrainMode::Frozen {
            // Sum in shard order, then average.
            let mut grads: Vec<Tensor<f32>> = shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
            for shard in &shards {
                for (acc, g) in grads.iter_mut().zip(&shard.grads) {
                    acc.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, &v)| *a += v);
                }
            }
            let inv = 1.0 / b as f32;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            let selected: Vec<Tensor<f32>> = grads
                .into_iter()
                .zip(&trainable)
                .filter_map(|(g, &on)| on.then_some(g))
                .collect();
            let mut targets: Vec<&mut Tensor<f32>> = params
                .tensors_mut()
                .into_iter()
                .filter_map(|(g, t)| mode.trains(g).then_some(t))
                .collect();
            match adam.step(&mut targets, &selected) {
                Ok(()) => {}
                Err(Error::Divergence { .. }) => {
                    bad_steps += 1;
                    if bad_steps >= schedule.divergence_patience {
                        return Ok(TrainOutcome {
                            params: best.1,
                            log,
                            aborted: Some(format!("{bad_steps} consecutive divergent steps")),
                        });
                    }
                    continue;
                }
                Err(e) => return Err(e),
            }
        }
        bad_steps = 0;

        let ema = match smoothed {
            None => loss,
            Some(prev) => 0.95 * prev + 0.05 * loss,
        };
        smoothed = Some(ema);
        if ema < best.0 {
            best = (ema, params.clone());
        }

        if (step + 1) % schedule.log_every == 0 || step + 1 == schedule.steps {
            let n = window.3 as f64;
            log.push(TrainLogRow {
                step: step + 1,
                loss: window.0 / n,
                rate_bpp: window.1 / n,
                mse: window.2 / n,
                mode: mode.to_string(),
                lambda: cfg.lambda,
                seed: schedule.seed,
            });
            window = (0.0, 0.0, 0.0, 0);
        }
    }

    if mode == TrainMode::Frozen {
        params = base.clone();
    }
    Ok(TrainOutcome {
        params,
        log,
        aborted: None,
    })
}

/// Crop an image to a multiple of `multiple` from the top-left (helper for
/// building corpora of exact sizes).
pub fn crop_to_multiple(x: &Tensor<f32>, multiple: usize) -> Result<Tensor<f32>> {
    let [_, _, h, w] = x.dims4()?;
    crop(x, h / multiple * multiple, w / multiple * multiple)
}
