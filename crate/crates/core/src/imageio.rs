//! Image loading, saving, quantization and dataset splits.
//!
//! Images are `H x W x 3` RGB float tensors in `[0, 1]`. Files are read and
//! written as PNG-24 or baseline JPEG; a stored 8-bit channel value `v` maps
//! to `v / 255`.

use crate::error::{Error, Result};
use ndarray::prelude::*;
use std::path::{Path, PathBuf};

/// Minimum image side: enough for the 3x3 conv stacks and the SSIM window.
pub const MIN_SIDE: usize = 16;

/// RGB image tensor of shape `(H, W, 3)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    values: Array3<f32>,
}

impl ImageTensor {
    pub fn new(values: Array3<f32>) -> Result<Self> {
        let (h, w, c) = values.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch {
                expected: "(H, W, 3)".into(),
                got: format!("({h}, {w}, {c})"),
            });
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::TooSmall { h, w, min: MIN_SIDE });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidImage(
                "pixel values must be finite and within [0, 1]".into(),
            ));
        }
        Ok(ImageTensor { values })
    }

    /// Clamps out-of-range values instead of rejecting them; used at the end
    /// of optimizer pipelines where projection already happened in theory but
    /// floating-point noise can leave values a ULP outside the box.
    pub fn from_clamped(mut values: Array3<f32>) -> Result<Self> {
        values.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self::new(values)
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f32> {
        self.values
    }

    /// `(H, W)`.
    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.values.dim();
        (h, w)
    }

    /// 8-bit rows, top to bottom, RGB interleaved.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Rounds every value to the nearest 8-bit level: `round(v * 255) / 255`.
pub fn quantize(image: &ImageTensor) -> ImageTensor {
    let values = image
        .values()
        .mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0);
    ImageTensor { values }
}

/// Quantization on a raw array, for internal optimizer iterates.
pub(crate) fn quantize_array(values: &Array3<f32>) -> Array3<f32> {
    values.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0)
}

fn tensor_from_rgb8(width: u32, height: u32, data: &[u8]) -> Result<ImageTensor> {
    let (h, w) = (height as usize, width as usize);
    let values = Array3::from_shape_vec((h, w, 3), data.iter().map(|&v| v as f32 / 255.0).collect())
        .map_err(|e| Error::DecodeError(e.to_string()))?;
    ImageTensor::new(values)
}

/// Loads a PNG or JPEG file into the `[0, 1]` tensor domain.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::DecodeError(format!("{}: {e}", path.display())))?
        .to_rgb8();
    tensor_from_rgb8(img.width(), img.height(), img.as_raw())
}

/// Loads an image and resizes it to `side x side` with bicubic filtering.
pub fn load_image_square(path: &Path, side: usize) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::DecodeError(format!("{}: {e}", path.display())))?
        .resize_exact(
            side as u32,
            side as u32,
            image::imageops::FilterType::CatmullRom,
        )
        .to_rgb8();
    tensor_from_rgb8(img.width(), img.height(), img.as_raw())
}

/// Writes the quantized image as PNG-24 (lossless for quantized values).
pub fn save_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w) = image.dims();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, image.to_rgb8())
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn check_quality(quality: u8) -> Result<()> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Config(format!(
            "jpeg quality must be in [1, 100], got {quality}"
        )));
    }
    Ok(())
}

/// Writes baseline JPEG with 4:2:0 chroma subsampling at the given quality.
pub fn save_jpeg(image: &ImageTensor, path: &Path, quality: u8) -> Result<()> {
    check_quality(quality)?;
    let bytes = encode_jpeg_bytes(image, quality)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// In-memory baseline JPEG encode, shared by [`save_jpeg`] and the
/// compression layer in [`crate::jpeg`].
pub(crate) fn encode_jpeg_bytes(image: &ImageTensor, quality: u8) -> Result<Vec<u8>> {
    check_quality(quality)?;
    let (h, w) = image.dims();
    let mut out = Vec::new();
    let mut enc = jpeg_encoder::Encoder::new(&mut out, quality);
    enc.set_sampling_factor(jpeg_encoder::SamplingFactor::F_2_2);
    enc.encode(
        &image.to_rgb8(),
        w as u16,
        h as u16,
        jpeg_encoder::ColorType::Rgb,
    )
    .map_err(|e| Error::CodecError(e.to_string()))?;
    Ok(out)
}

pub(crate) fn decode_image_bytes(bytes: &[u8]) -> Result<ImageTensor> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::CodecError(e.to_string()))?
        .to_rgb8();
    tensor_from_rgb8(img.width(), img.height(), img.as_raw())
}

/// Splits a directory of images into validation and training lists.
///
/// Filenames are sorted lexicographically; the first `k_val` become the
/// validation set and the following `k_train` the training set.
pub fn make_split(image_dir: &Path, k_val: usize, k_train: usize) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(image_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    names.sort();
    if names.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    let val: Vec<PathBuf> = names.iter().take(k_val).cloned().collect();
    let train: Vec<PathBuf> = names.iter().skip(k_val).take(k_train).cloned().collect();
    if val.is_empty() || train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((val, train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn constant_image(v: f32) -> ImageTensor {
        ImageTensor::new(Array3::from_elem((16, 16, 3), v)).unwrap()
    }

    #[test]
    fn black_and_white_roundtrip_exactly() {
        let dir = tempdir().unwrap();
        for (name, v) in [("black.png", 0.0f32), ("white.png", 1.0f32)] {
            let path = dir.path().join(name);
            save_png(&constant_image(v), &path).unwrap();
            let loaded = load_image(&path).unwrap();
            assert!(loaded.values().iter().all(|&x| x == v));
        }
    }

    #[test]
    fn png_roundtrip_equals_quantize() {
        let dir = tempdir().unwrap();
        let mut values = Array3::zeros((16, 16, 3));
        for ((i, j, c), v) in values.indexed_iter_mut() {
            *v = ((i * 31 + j * 7 + c * 13) % 256) as f32 / 255.0 + 0.001;
        }
        values.mapv_inplace(|v| v.min(1.0));
        let img = ImageTensor::new(values).unwrap();
        let path = dir.path().join("x.png");
        save_png(&img, &path).unwrap();
        let loaded = load_image(&path).unwrap();
        let q = quantize(&img);
        assert_eq!(loaded.values(), q.values());
    }

    #[test]
    fn quantize_rule_and_idempotence() {
        let img = constant_image(0.5);
        let q = quantize(&img);
        assert!((q.values()[[0, 0, 0]] - 128.0 / 255.0).abs() < 1e-7);
        assert_eq!(quantize(&q).values(), q.values());
    }

    #[test]
    fn quantization_error_is_bounded() {
        let mut values = Array3::zeros((16, 16, 3));
        for ((i, j, c), v) in values.indexed_iter_mut() {
            *v = ((i * 131 + j * 17 + c * 29) % 991) as f32 / 990.0;
        }
        let img = ImageTensor::new(values).unwrap();
        let q = quantize(&img);
        let max = img
            .values()
            .iter()
            .zip(q.values().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max <= 1.0 / 510.0 + 1e-7, "max deviation {max}");
    }

    #[test]
    fn jpeg_quality_100_roundtrip_is_tight_on_constant_image() {
        let dir = tempdir().unwrap();
        let img = constant_image(0.5);
        let path = dir.path().join("x.jpg");
        save_jpeg(&img, &path, 100).unwrap();
        let loaded = load_image(&path).unwrap();
        let max = img
            .values()
            .iter()
            .zip(loaded.values().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max <= 2.0 / 255.0, "max deviation {max}");
    }

    #[test]
    fn jpeg_quality_zero_is_rejected() {
        let dir = tempdir().unwrap();
        let err = save_jpeg(&constant_image(0.1), &dir.path().join("x.jpg"), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn split_is_sorted_and_disjoint() {
        let dir = tempdir().unwrap();
        for i in 0..25 {
            save_png(&constant_image(i as f32 / 25.0), &dir.path().join(format!("img{i:03}.png")))
                .unwrap();
        }
        let (val, train) = make_split(dir.path(), 10, 10).unwrap();
        assert_eq!(val.len(), 10);
        assert_eq!(train.len(), 10);
        assert!(val.iter().all(|v| !train.contains(v)));
        let name = |p: &PathBuf| p.file_name().unwrap().to_str().unwrap().to_string();
        assert_eq!(name(&val[0]), "img000.png");
        assert_eq!(name(&val[9]), "img009.png");
        assert_eq!(name(&train[0]), "img010.png");
        assert_eq!(name(&train[9]), "img019.png");
    }

    #[test]
    fn single_file_is_an_empty_dataset() {
        let dir = tempdir().unwrap();
        save_png(&constant_image(0.2), &dir.path().join("only.png")).unwrap();
        assert!(matches!(make_split(dir.path(), 10, 10), Err(Error::EmptyDataset)));
    }

    #[test]
    fn tiny_images_are_rejected() {
        let err = ImageTensor::new(Array3::zeros((8, 8, 3))).unwrap_err();
        assert!(matches!(err, Error::TooSmall { .. }));
    }
}
