//! PNG and binary PPM reading and writing.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB to a 1×3×H×W tensor in `[0, 1]`.
pub fn tensor_from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Tensor<f32>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::rejected(format!(
            "{} bytes for a {width}x{height} RGB image",
            rgb.len()
        )));
    }
    let plane = width * height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![1, 3, height, width], data)
}

/// 1×3×H×W tensor to interleaved 8-bit RGB, rounding after clamping to `[0, 1]`.
pub fn rgb8_from_tensor(image: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let [n, c, h, w] = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::rejected(format!(
            "expected a 1x3xHxW image, got {:?}",
            image.shape()
        )));
    }
    let plane = w * h;
    let src = image.data();
    let mut out = vec![0u8; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            out[3 * i + ch] = to_u8(src[ch * plane + i]);
        }
    }
    Ok((w, h, out))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Round every sample to the nearest 8-bit level.
pub fn quantize_8bit(image: &Tensor<f32>) -> Tensor<f32> {
    image.map(|v| to_u8(v) as f32 / 255.0)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    tensor_from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
}

/// Save as PNG, or as binary PPM when the extension is `.ppm`.
pub fn save_image(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let (w, h, rgb) = rgb8_from_tensor(image)?;
    let buf = RgbImage::from_raw(w as u32, h as u32, rgb)
        .ok_or_else(|| Error::rejected("image buffer size mismatch"))?;
    let err = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ppm") => {
            let file = BufWriter::new(File::create(path)?);
            PnmEncoder::new(file)
                .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
                .write_image(buf.as_raw(), buf.width(), buf.height(), ExtendedColorType::Rgb8)
                .map_err(err)
        }
        _ => buf.save_with_format(path, ImageFormat::Png).map_err(err),
    }
}
