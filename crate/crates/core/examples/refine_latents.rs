//! Refine the latents of one image against a trained model and print the
//! checkpoint trace.
//!
//! cargo run --release --example refine_latents -- [model.lpm] [steps]

use latent_codec::corpus::{generate, ContentKind};
use latent_codec::network::{ArchitectureConfig, ModelParams};
use latent_codec::refine::{refine_latents, RefineConfig};

fn main() -> latent_codec::Result<()> {
    let mut args = std::env::args().skip(1);
    let params = match args.next() {
        Some(path) => ModelParams::load(path)?,
        None => ModelParams::init(ArchitectureConfig::default(), 0.01, 1)?,
    };
    let steps: usize = args.next().map_or(300, |s| s.parse().expect("steps"));
    let x = generate(ContentKind::Shapes, 64, 64, 2, 0);
    let y0 = params.encode_forward(&x)?;
    let cfg = RefineConfig {
        max_steps: steps,
        eval_every: (steps / 10).max(1),
        ..RefineConfig::default()
    };
    let result = refine_latents(&y0, &x, &params, &cfg)?;
    for c in &result.trace {
        println!(
            "step {:5}  relaxed {:.4}  true {:.4}  ({:.0} bits, mse {:.6})",
            c.step, c.relaxed_loss, c.true_loss, c.true_rate_bits, c.true_mse
        );
    }
    let best = result.best_checkpoint();
    println!(
        "best step {} improves the true objective from {:.4} to {:.4}",
        best.step,
        result.initial_checkpoint().true_loss,
        best.true_loss
    );
    Ok(())
}
