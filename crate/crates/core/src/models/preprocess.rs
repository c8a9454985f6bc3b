use image::imageops::{self, FilterType};
use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Resize and normalization applied before the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageProcessorConfig {
    pub height: usize,
    pub width: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for ImageProcessorConfig {
    fn default() -> Self {
        Self {
            height: 224,
            width: 224,
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

/// Bilinear resize to the target size, scale to `[0, 1]`, then
/// `(x - mean) / std` per channel. Returns `[3, height, width]`.
pub fn preprocess<T: Float>(image: &RgbImage, cfg: &ImageProcessorConfig) -> Result<Tensor<T>> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::Validation("cannot preprocess an empty image".into()));
    }
    if cfg.std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Validation(format!("normalization std must be positive, got {:?}", cfg.std)));
    }
    let (h, w) = (cfg.height, cfg.width);
    let float = DynamicImage::ImageRgb8(image.clone()).into_rgb32f();
    let resized = if (float.height() as usize, float.width() as usize) == (h, w) {
        float
    } else {
        imageops::resize(&float, w as u32, h as u32, FilterType::Triangle)
    };
    let px = resized.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, yx) = (i / (h * w), i % (h * w));
        T::from_f64(((px[yx * 3 + c] - cfg.mean[c]) / cfg.std[c]) as f64)
    }))
}

/// Stacks `[3, h, w]` tensors into `[batch, 3, h, w]`.
pub fn stack_images<T: Float>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * images.len());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::shape("stack_images", &shape, img.shape()));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

#[cfg(test)]
mod tests {
    use image::Rgb;

    use super::*;

    #[test]
    fn mean_colored_image_is_zero() {
        // 127.5 is not representable, so use a mean that is
        let cfg = ImageProcessorConfig {
            mean: [0.2, 0.4, 0.6],
            ..Default::default()
        };
        let img = RgbImage::from_pixel(50, 30, Rgb([51, 102, 153]));
        let t = preprocess::<f32>(&img, &cfg).unwrap();
        assert_eq!(t.shape(), &[3, 224, 224]);
        assert!(t.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn same_size_is_not_resampled() {
        let img = RgbImage::from_fn(224, 224, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x ^ y) % 256) as u8]));
        let t = preprocess::<f64>(&img, &ImageProcessorConfig::default()).unwrap();
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                let expect = (p.0[c] as f32 / 255.0 - 0.5) / 0.5;
                assert_eq!(t.data()[c * 224 * 224 + i], expect as f64);
            }
        }
    }

    #[test]
    fn empty_image_is_rejected() {
        assert!(preprocess::<f32>(&RgbImage::new(0, 10), &ImageProcessorConfig::default()).is_err());
    }
}
