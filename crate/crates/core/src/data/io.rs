//! 8-bit PNG and binary PPM reading and writing.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, DynamicImage, ImageEncoder, RgbImage};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn to_tensor<T: Real>(rgb: &RgbImage) -> Tensor<T> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = T::of(px.0[c] as f64 / 255.0);
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data).expect("shape")
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| image_err(path, e))
}

/// Load any supported image as `[1, 3, H, W]` in `[0,1]`, converting
/// grayscale or alpha images to RGB.
pub fn load_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    Ok(to_tensor(&decode(path)?.to_rgb8()))
}

/// Like [`load_image`] but rejects anything that is not 8-bit RGB.
pub fn load_image_strict<T: Real>(path: &Path) -> Result<Tensor<T>> {
    match decode(path)? {
        DynamicImage::ImageRgb8(rgb) => Ok(to_tensor(&rgb)),
        other => Err(image_err(
            path,
            format!("expected 8-bit RGB, found {:?}", other.color()),
        )),
    }
}

/// Quantize `[1, 3, H, W]` data to interleaved 8-bit RGB.
pub fn to_rgb8<T: Real>(img: &Tensor<T>) -> Result<(u32, u32, Vec<u8>)> {
    let [n, c, h, w] = img.dims4("save_image")?;
    if n != 1 || c != 3 {
        return Err(Error::contract(
            "save_image",
            format!("expected [1, 3, H, W], got {:?}", img.shape()),
        ));
    }
    let mut buf = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            let v = img.data()[ch * h * w + i].as_f64();
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((w as u32, h as u32, buf))
}

/// Write by extension: `.ppm` gives binary P6, anything else PNG.
pub fn save_image<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let (w, h, buf) = to_rgb8(img)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let out = BufWriter::new(file);
    let is_ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        PnmEncoder::new(out)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&buf, w, h, ColorType::Rgb8.into())
    } else {
        PngEncoder::new(out).write_image(&buf, w, h, ColorType::Rgb8.into())
    }
    .map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img =
            Tensor::<f32>::rand_uniform(&[1, 3, 7, 9], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_image(&p, &img).unwrap();
            let back: Tensor<f32> = load_image_strict(&p).unwrap();
            assert_eq!(back.shape(), img.shape());
            assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
        }
        let header = std::fs::read(dir.path().join("a.ppm")).unwrap();
        assert!(header.starts_with(b"P6"));
    }

    #[test]
    fn grayscale_is_converted_or_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::from_pixel(3, 2, image::Luma([128]))
            .save(&p)
            .unwrap();
        let t: Tensor<f64> = load_image(&p).unwrap();
        assert_eq!(t.shape(), &[1, 3, 2, 3]);
        assert!(t.data().iter().all(|&v| v == 128.0 / 255.0));
        assert!(load_image_strict::<f64>(&p).is_err());
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_image::<f32>(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }
}
