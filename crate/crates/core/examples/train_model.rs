//! Train a small model on a synthetic corpus and save it.
//!
//! cargo run --release --example train_model -- [steps] [lambda] [output]

use latent_codec::corpus::{generate, ContentKind};
use latent_codec::network::{ArchitectureConfig, ModelParams};
use latent_codec::train::{train, RDLossConfig, TrainMode, TrainSchedule};

fn main() -> latent_codec::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(200, |s| s.parse().expect("steps"));
    let lambda: f64 = args.next().map_or(0.01, |s| s.parse().expect("lambda"));
    let output = args.next().unwrap_or_else(|| "target/example-model.lpm".into());

    let corpus: Vec<_> = (0..16).map(|i| generate(ContentKind::Shapes, 96, 96, 1, i)).collect();
    let init = ModelParams::init(ArchitectureConfig::default(), lambda, 1)?;
    let schedule = TrainSchedule {
        steps,
        log_every: (steps / 10).max(1),
        ..TrainSchedule::default()
    };
    let out = train(&corpus, &init, TrainMode::Full, &RDLossConfig::new(lambda)?, &schedule)?;
    for row in &out.log {
        println!(
            "step {:5}  loss {:.4}  rate {:.4} bpp  mse {:.6}",
            row.step, row.loss, row.rate_bpp, row.mse
        );
    }
    if let Some(reason) = &out.aborted {
        println!("aborted: {reason}");
    }
    out.params.save(&output)?;
    println!("saved {output}");
    Ok(())
}
