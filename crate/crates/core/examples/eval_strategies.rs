//! Compare baseline, refined and prior-fine-tuned coding on shifted content.
//!
//! cargo run --release --example eval_strategies -- [base.lpm] [output.csv]

use latent_codec::codec::Codec;
use latent_codec::corpus::{generate, ContentKind};
use latent_codec::eval::{aggregate, evaluate, write_rd_csv, EvalConfig, ModelArms};
use latent_codec::metrics::Strategy;
use latent_codec::network::{ArchitectureConfig, ModelParams};
use latent_codec::refine::RefineConfig;
use latent_codec::train::{train, RDLossConfig, TrainMode, TrainSchedule};

fn main() -> latent_codec::Result<()> {
    let mut args = std::env::args().skip(1);
    let base = match args.next() {
        Some(path) => ModelParams::load(path)?,
        None => ModelParams::init(ArchitectureConfig::default(), 0.01, 1)?,
    };
    let output = args.next().unwrap_or_else(|| "target/example-rd.csv".into());
    let noise: Vec<_> = (0..8).map(|i| generate(ContentKind::Noise, 96, 96, 3, i)).collect();
    let schedule = TrainSchedule {
        steps: 100,
        log_every: 50,
        ..TrainSchedule::default()
    };
    let proba = train(&noise, &base, TrainMode::ProbaOnly, &RDLossConfig::new(base.lambda)?, &schedule)?.params;

    let tests: Vec<_> = (0..3)
        .map(|i| (format!("noise_{i}"), generate(ContentKind::Noise, 64, 64, 4, i)))
        .collect();
    let arms = [ModelArms {
        base: Codec::new(base)?,
        proba: Some(Codec::new(proba)?),
        retrained: None,
    }];
    let cfg = EvalConfig {
        strategies: vec![Strategy::Baseline, Strategy::Proba, Strategy::Adapt],
        refine: RefineConfig {
            max_steps: 200,
            eval_every: 25,
            ..RefineConfig::default()
        },
        ..EvalConfig::default()
    };
    let rows = evaluate(&tests, &arms, &cfg)?;
    for m in aggregate(&rows) {
        println!(
            "{:9} bpp {:.4}  psnr {:.2} dB  rd loss {:.4}",
            m.strategy,
            m.bpp_payload,
            m.psnr_db,
            m.rd_loss()
        );
    }
    write_rd_csv(&output, &rows)?;
    println!("wrote {output}");
    Ok(())
}
