//! Compress an image to a bitstream and decode it again.
//!
//! cargo run --release --example compress_image -- [model.lpm] [image]
//! Without arguments an untrained model and a generated image are used.

use latent_codec::codec::Codec;
use latent_codec::corpus::{generate, ContentKind};
use latent_codec::image_io::load_image;
use latent_codec::metrics::{bits_per_pixel, image_mse_8bit, psnr_db};
use latent_codec::network::{ArchitectureConfig, ModelParams};

fn main() -> latent_codec::Result<()> {
    let mut args = std::env::args().skip(1);
    let params = match args.next() {
        Some(path) => ModelParams::load(path)?,
        None => ModelParams::init(ArchitectureConfig::default(), 0.01, 1)?,
    };
    let image = match args.next() {
        Some(path) => load_image(path)?,
        None => generate(ContentKind::Mixed, 80, 56, 3, 0),
    };
    let [_, _, h, w] = image.dims4()?;
    let codec = Codec::new(params)?;
    let compressed = codec.compress(&image, None)?;
    let bytes = compressed.bitstream.pack();
    let decoded = codec.decompress(&compressed.bitstream)?;
    let mse = image_mse_8bit(&image, &decoded.image)?;
    println!("image: {w}x{h}");
    println!("latents: {:?}", compressed.latents.shape());
    println!("bytes: {}", bytes.len());
    println!("bpp: {:.4}", bits_per_pixel(bytes.len(), w, h));
    println!("psnr: {:.2} dB", psnr_db(mse));
    Ok(())
}
