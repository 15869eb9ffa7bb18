//! Rate-distortion evaluation over a test set for several adaptation strategies.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::metrics::{bits_per_pixel, image_mse_8bit, psnr_db, RDPoint, Strategy};
use crate::refine::RefineConfig;
use crate::tensor::Tensor;

/// Models for one λ: the base model plus the optional adapted variants.
#[derive(Clone, Debug)]
pub struct ModelArms {
    pub base: Codec,
    /// Base model with only the prior fine-tuned on the target content.
    pub proba: Option<Codec>,
    /// Model fully retrained on the target content.
    pub retrained: Option<Codec>,
}

impl ModelArms {
    pub fn lambda(&self) -> f64 {
        self.base.params().lambda
    }

    fn codec(&self, strategy: Strategy) -> Option<&Codec> {
        match strategy {
            Strategy::Baseline | Strategy::Adapt => Some(&self.base),
            Strategy::Proba => self.proba.as_ref(),
            Strategy::Retrained => self.retrained.as_ref(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub strategies: Vec<Strategy>,
    /// Used by the `+adapt` strategy; its λ is taken from each model.
    pub refine: RefineConfig,
    pub threads: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            strategies: vec![Strategy::Baseline, Strategy::Adapt],
            refine: RefineConfig::default(),
            threads: 1,
            seed: 0,
        }
    }
}

/// Compress and decompress one image, measuring the result.
pub fn measure(
    codec: &Codec,
    image_id: &str,
    image: &Tensor<f32>,
    refine: Option<&RefineConfig>,
    seed: u64,
    strategy: Strategy,
) -> Result<RDPoint> {
    let [_, _, h, w] = image.dims4()?;
    let compressed = codec.compress(image, refine)?;
    let decoded = codec.decompress(&compressed.bitstream)?;
    let mse = image_mse_8bit(image, &decoded.image)?;
    Ok(RDPoint {
        image_id: image_id.to_string(),
        lambda: codec.params().lambda,
        strategy: strategy.label().to_string(),
        bpp_payload: bits_per_pixel(compressed.bitstream.payload.len(), w, h),
        bpp_total: bits_per_pixel(compressed.bitstream.len(), w, h),
        mse,
        psnr_db: psnr_db(mse),
        refine_steps: refine.map_or(0, |r| r.max_steps),
        seed,
        status: "ok".into(),
    })
}

/// One row per (image, λ, strategy) in input order. Failures are recorded in
/// the row's status and do not stop the run.
pub fn evaluate(
    images: &[(String, Tensor<f32>)],
    arms: &[ModelArms],
    cfg: &EvalConfig,
) -> Result<Vec<RDPoint>> {
    for arm in arms {
        for &s in &cfg.strategies {
            if arm.codec(s).is_none() {
                return Err(Error::Config(format!(
                    "strategy {s} needs a model for lambda {}",
                    arm.lambda()
                )));
            }
        }
    }
    let jobs: Vec<(usize, usize, Strategy)> = (0..images.len())
        .flat_map(|i| {
            (0..arms.len()).flat_map(move |a| cfg.strategies.iter().map(move |&s| (i, a, s)))
        })
        .collect();

    let run = |&(i, a, s): &(usize, usize, Strategy)| -> RDPoint {
        let (id, image) = &images[i];
        let arm = &arms[a];
        let codec = arm.codec(s).expect("checked above");
        let mut refine = cfg.refine.clone();
        refine.seed = cfg.seed;
        let refine = (s == Strategy::Adapt).then_some(&refine);
        measure(codec, id, image, refine, cfg.seed, s).unwrap_or_else(|e| RDPoint {
            image_id: id.clone(),
            lambda: arm.lambda(),
            strategy: s.label().to_string(),
            bpp_payload: f64::NAN,
            bpp_total: f64::NAN,
            mse: f64::NAN,
            psnr_db: f64::NAN,
            refine_steps: refine.map_or(0, |r| r.max_steps),
            seed: cfg.seed,
            status: format!("error: {e}"),
        })
    };

    let threads = cfg.threads.max(1).min(jobs.len().max(1));
    if threads == 1 {
        return Ok(jobs.iter().map(run).collect());
    }
    let next = AtomicUsize::new(0);
    let mut done: Vec<(usize, RDPoint)> = std::thread::scope(|s| {
        let workers: Vec<_> = (0..threads)
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let k = next.fetch_add(1, Ordering::Relaxed);
                        let Some(job) = jobs.get(k) else { break };
                        out.push((k, run(job)));
                    }
                    out
                })
            })
            .collect();
        workers
            .into_iter()
            .flat_map(|w| w.join().expect("evaluation worker panicked"))
            .collect()
    });
    done.sort_by_key(|(k, _)| *k);
    Ok(done.into_iter().map(|(_, r)| r).collect())
}

/// Mean row per (λ, strategy) over successful detail rows, in first-seen order.
pub fn aggregate(rows: &[RDPoint]) -> Vec<RDPoint> {
    let mut keys: Vec<(f64, String)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(l, s)| *l == r.lambda && *s == r.strategy) {
            keys.push((r.lambda, r.strategy.clone()));
        }
    }
    keys.into_iter()
        .map(|(lambda, strategy)| {
            let group: Vec<&RDPoint> = rows
                .iter()
                .filter(|r| r.lambda == lambda && r.strategy == strategy)
                .collect();
            let ok: Vec<&&RDPoint> = group.iter().filter(|r| r.is_ok()).collect();
            let n = ok.len() as f64;
            let mean = |f: fn(&RDPoint) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / n;
            let failed = group.len() - ok.len();
            RDPoint {
                image_id: "mean".into(),
                lambda,
                bpp_payload: mean(|r| r.bpp_payload),
                bpp_total: mean(|r| r.bpp_total),
                mse: mean(|r| r.mse),
                psnr_db: mean(|r| r.psnr_db),
                refine_steps: group[0].refine_steps,
                seed: group[0].seed,
                strategy,
                status: if failed == 0 {
                    "ok".into()
                } else {
                    format!("{failed} of {} rows failed", group.len())
                },
            }
        })
        .collect()
}

/// Write detail rows followed by their aggregates.
pub fn write_rd_csv(path: impl AsRef<Path>, rows: &[RDPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows.iter().chain(&aggregate(rows)) {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
