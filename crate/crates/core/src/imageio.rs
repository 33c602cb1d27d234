//! PNG reading and writing for `[H, W, 3]` tensors in [0, 1].

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// Loads an 8- or 16-bit image as RGB scaled to [0, 1]. Grey and alpha
/// channels are converted to plain RGB.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match &img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => img
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
        _ => img
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 255.0)
            .collect(),
    };
    Tensor::new(&[h, w, 3], data)
}

/// Quantises with round-half-up after clamping to [0, 1].
pub fn quantize(v: f32, depth: BitDepth) -> u16 {
    let max = depth.max();
    ((v.clamp(0.0, 1.0) as f64 * max + 0.5).floor()).min(max) as u16
}

/// Writes an `[H, W, 3]` tensor; the format follows the file extension.
pub fn save_image(image: &Tensor, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let s = image.shape();
    if image.rank() != 3 || s[2] != 3 {
        return Err(Error::shape("save_image", format!("expected [H, W, 3], got {s:?}")));
    }
    if !image.is_finite() {
        return Err(Error::NonFinite("image to save".into()));
    }
    let (h, w) = (s[0] as u32, s[1] as u32);
    let result = match depth {
        BitDepth::Eight => {
            let raw = image.data().iter().map(|&v| quantize(v, depth) as u8).collect();
            ImageBuffer::<Rgb<u8>, Vec<u8>>::from_raw(w, h, raw)
                .expect("buffer length matches shape")
                .save(path)
        }
        BitDepth::Sixteen => {
            let raw = image.data().iter().map(|&v| quantize(v, depth)).collect();
            ImageBuffer::<Rgb<u16>, Vec<u16>>::from_raw(w, h, raw)
                .expect("buffer length matches shape")
                .save(path)
        }
    };
    result.map_err(|e| image_error(path, e))
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Image(format!("{}: {other}", path.display())),
    }
}
