//! JPEG compression layer with a straight-through backward pass.
//!
//! The forward pass runs a real baseline JPEG encode/decode (4:2:0 chroma
//! subsampling) at the configured quality; inside a gradient tape the
//! backward pass is the identity, so downstream gradients reach the
//! uncompressed input unchanged.

use crate::autograd::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::imageio::{decode_image_bytes, encode_jpeg_bytes, ImageTensor};
use ndarray::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JpegConfig {
    pub quality: u8,
    pub enabled: bool,
}

impl Default for JpegConfig {
    fn default() -> Self {
        JpegConfig {
            quality: 80,
            enabled: false,
        }
    }
}

impl JpegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=100).contains(&self.quality) {
            return Err(Error::Config(format!(
                "jpeg quality must be in [1, 100], got {}",
                self.quality
            )));
        }
        Ok(())
    }

    /// The quality when the layer is on, `None` otherwise.
    pub fn active_quality(&self) -> Option<u8> {
        self.enabled.then_some(self.quality)
    }
}

/// Encodes to baseline JPEG in memory and decodes back.
pub fn jpeg_forward(image: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let bytes = encode_jpeg_bytes(image, quality)?;
    let out = decode_image_bytes(&bytes)?;
    if out.dims() != image.dims() {
        return Err(Error::CodecError("codec changed image dimensions".into()));
    }
    Ok(out)
}

/// Value-identical to [`jpeg_forward`]; the straight-through gradient
/// contract only exists inside a tape, see [`jpeg_layer`].
pub fn jpeg_straight_through(image: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    jpeg_forward(image, quality)
}

/// Codec roundtrip on a `[N,3,H,W]` activation, used by [`jpeg_layer`].
/// Values are clamped to `[0,1]` before encoding, as the codec's 8-bit
/// conversion would do anyway.
pub(crate) fn roundtrip_nchw<T: Scalar>(x: &ArrayD<T>, quality: u8) -> ArrayD<T> {
    let shape = x.shape();
    assert_eq!(shape.len(), 4, "jpeg layer expects [N,3,H,W]");
    assert_eq!(shape[1], 3, "jpeg layer expects RGB channels");
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let mut out = ArrayD::<T>::zeros(x.raw_dim());
    for i in 0..n {
        let mut hwc = Array3::<f32>::zeros((h, w, 3));
        for c in 0..3 {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[[i, c, y, xx]].to_f32().unwrap_or(0.0);
                    hwc[[y, xx, c]] = v.clamp(0.0, 1.0);
                }
            }
        }
        let img = ImageTensor::from_clamped(hwc).expect("clamped image is valid");
        let rt = jpeg_forward(&img, quality).expect("in-memory jpeg roundtrip");
        let rv = rt.values();
        for c in 0..3 {
            for y in 0..h {
                for xx in 0..w {
                    out[[i, c, y, xx]] = T::from_f32(rv[[y, xx, c]]).expect("f32 fits scalar");
                }
            }
        }
    }
    out
}

/// Tape node: forward is the real codec roundtrip, backward is identity.
pub fn jpeg_layer<T: Scalar>(tape: &Tape<T>, x: Var, quality: u8) -> Var {
    tape.straight_through(x, move |v| roundtrip_nchw(v, quality))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn gradient_image() -> ImageTensor {
        let mut values = Array3::zeros((32, 32, 3));
        for ((i, j, c), v) in values.indexed_iter_mut() {
            *v = (i as f32 / 62.0 + j as f32 / 62.0) * (0.8 + 0.1 * c as f32) / 1.1;
        }
        ImageTensor::new(values).unwrap()
    }

    #[test]
    fn constant_gray_survives_quality_80() {
        let img = ImageTensor::new(Array3::from_elem((16, 16, 3), 0.5)).unwrap();
        let rt = jpeg_forward(&img, 80).unwrap();
        let max = img
            .values()
            .iter()
            .zip(rt.values().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max <= 2.0 / 255.0, "max deviation {max}");
        assert_eq!(rt.dims(), img.dims());
    }

    #[test]
    fn quality_100_smooth_gradient_psnr() {
        let img = gradient_image();
        let rt = jpeg_forward(&img, 100).unwrap();
        let db = psnr(&img, &rt).unwrap();
        assert!(db >= 40.0, "psnr {db}");
    }

    #[test]
    fn recompression_is_nearly_idempotent() {
        let img = gradient_image();
        let once = jpeg_forward(&img, 80).unwrap();
        let twice = jpeg_forward(&once, 80).unwrap();
        let max = once
            .values()
            .iter()
            .zip(twice.values().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max < 4.0 / 255.0, "max deviation {max}");
    }

    #[test]
    fn straight_through_value_matches_forward() {
        let img = gradient_image();
        assert_eq!(
            jpeg_straight_through(&img, 80).unwrap().values(),
            jpeg_forward(&img, 80).unwrap().values()
        );
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let tape = Tape::<f32>::new();
        let (h, w) = (16usize, 16usize);
        let mut x = Array4::<f32>::zeros((1, 3, h, w));
        for ((_, c, y, xx), v) in x.indexed_iter_mut() {
            *v = ((y + xx + c) % 17) as f32 / 16.0;
        }
        let xv = tape.leaf(x.into_dyn());
        let j = jpeg_layer(&tape, xv, 80);
        let loss = tape.sum_all(j);
        let grads = tape.backward(loss);
        assert!(grads.wrt(xv).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_uses_compressed_value_not_input() {
        // d mean(y^2) / dx with identity backward is 2*y/N, where y is the
        // codec output.
        let tape = Tape::<f64>::new();
        let (h, w) = (16usize, 16usize);
        let mut x = Array4::<f64>::zeros((1, 3, h, w));
        for ((_, c, y, xx), v) in x.indexed_iter_mut() {
            *v = ((y * 7 + xx * 3 + c * 5) % 29) as f64 / 28.0;
        }
        let n = x.len() as f64;
        let xv = tape.leaf(x.into_dyn());
        let y = jpeg_layer(&tape, xv, 80);
        let sq = tape.mul(y, y);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        let got = grads.wrt(xv).unwrap();
        let yv = tape.value(y);
        let expect = yv.mapv(|v| 2.0 * v / n);
        let err = (got - &expect).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(err < 1e-12, "max abs err {err}");
    }
}
