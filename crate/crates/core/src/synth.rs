//! Procedural cover images for desk-scale runs: smooth color fields built
//! from a few plane waves, soft radial blobs and a global gradient, plus
//! light pixel noise. Deterministic per seed.

use crate::error::Result;
use crate::imageio::{save_png, ImageTensor};
use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use std::path::{Path, PathBuf};

pub fn synth_image(side: usize, seed: u64) -> Result<ImageTensor> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(17));
    let n = side as f32;

    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.random::<f32>() * 4.0 - 2.0,  // fx cycles
                rng.random::<f32>() * 4.0 - 2.0,  // fy cycles
                rng.random::<f32>() * std::f32::consts::TAU, // phase
                0.3 + rng.random::<f32>() * 0.7,  // amplitude
            )
        })
        .collect();
    let blobs: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random::<f32>(),               // cx
                rng.random::<f32>(),               // cy
                0.08 + rng.random::<f32>() * 0.3,  // sigma
                rng.random::<f32>() * 2.0 - 1.0,   // weight
            )
        })
        .collect();
    let theta = rng.random::<f32>() * std::f32::consts::TAU;
    let grad_w = rng.random::<f32>() * 1.5;
    let chroma_seeds: [(f32, f32, f32); 2] = [
        (
            rng.random::<f32>() * 2.0 - 1.0,
            rng.random::<f32>() * 2.0 - 1.0,
            rng.random::<f32>() * std::f32::consts::TAU,
        ),
        (
            rng.random::<f32>() * 2.0 - 1.0,
            rng.random::<f32>() * 2.0 - 1.0,
            rng.random::<f32>() * std::f32::consts::TAU,
        ),
    ];

    let mut luma = Array2::<f32>::zeros((side, side));
    for y in 0..side {
        for x in 0..side {
            let (u, v) = (x as f32 / n, y as f32 / n);
            let mut val = grad_w * (theta.cos() * u + theta.sin() * v);
            for &(fx, fy, ph, a) in &waves {
                val += a * (std::f32::consts::TAU * (fx * u + fy * v) + ph).sin();
            }
            for &(cx, cy, sigma, w) in &blobs {
                let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                val += w * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            luma[[y, x]] = val;
        }
    }
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in luma.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-6);

    let mut values = Array3::<f32>::zeros((side, side, 3));
    for y in 0..side {
        for x in 0..side {
            let (u, v) = (x as f32 / n, y as f32 / n);
            let l = 0.12 + 0.76 * (luma[[y, x]] - lo) / span;
            let c0 = 0.12
                * (std::f32::consts::TAU * (chroma_seeds[0].0 * u + chroma_seeds[0].1 * v)
                    + chroma_seeds[0].2)
                    .sin();
            let c1 = 0.12
                * (std::f32::consts::TAU * (chroma_seeds[1].0 * u + chroma_seeds[1].1 * v)
                    + chroma_seeds[1].2)
                    .sin();
            let mut noise = || (rng.random::<f32>() - 0.5) * 0.03;
            values[[y, x, 0]] = (l + c0 + noise()).clamp(0.0, 1.0);
            values[[y, x, 1]] = (l - 0.5 * c0 + 0.8 * c1 + noise()).clamp(0.0, 1.0);
            values[[y, x, 2]] = (l - 0.7 * c1 + noise()).clamp(0.0, 1.0);
        }
    }
    ImageTensor::new(values)
}

/// Writes `count` synthetic PNGs named `synthNNNN.png` and returns their
/// paths in index order.
pub fn write_corpus(dir: &Path, count: usize, side: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let path = dir.join(format!("synth{i:04}.png"));
        save_png(&synth_image(side, seed.wrapping_add(i as u64))?, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_varied() {
        let a = synth_image(32, 5).unwrap();
        let b = synth_image(32, 5).unwrap();
        let c = synth_image(32, 6).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
        // Not degenerate: some spread in every channel.
        for ch in 0..3 {
            let lane = a.values().index_axis(Axis(2), ch);
            let lo = lane.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = lane.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert!(hi - lo > 0.1, "channel {ch} too flat");
        }
    }

    #[test]
    fn corpus_files_land_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_corpus(dir.path(), 3, 16, 0).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths.windows(2).all(|w| w[0] < w[1]));
        assert!(paths.iter().all(|p| p.exists()));
    }
}
