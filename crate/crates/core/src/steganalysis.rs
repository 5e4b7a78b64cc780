//! A generic CNN steganalysis detector: trained on cover/stego pairs with
//! two-class cross entropy, it reports detection accuracy and supplies the
//! differentiable logits consumed by the defense loss.

use crate::error::{Error, Result};
use crate::imageio::ImageTensor;
use crate::nets::{
    bind, detector_graph, hwc_to_nchw, init_detector_params, stack_hwc, BnMode, BnUpdates,
    NetConfig, Params,
};
use crate::train::Adam;
use crate::autograd::Tape;
use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

const DETECTOR_BATCH: usize = 8;
const DETECTOR_LR: f32 = 1e-3;

/// Trains the detector on covers (class 0) and stego images (class 1).
/// Deterministic for a fixed seed.
pub fn train_detector(
    config: NetConfig,
    covers: &[ImageTensor],
    stegos: &[ImageTensor],
    epochs: usize,
    seed: u64,
) -> Result<Params<f32>> {
    crate::tune_allocator();
    if covers.is_empty() || stegos.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    let dims = covers[0].dims();
    let all: Vec<(&ImageTensor, usize)> = covers
        .iter()
        .map(|i| (i, 0usize))
        .chain(stegos.iter().map(|i| (i, 1usize)))
        .collect();
    if all.iter().any(|(i, _)| i.dims() != dims) {
        return Err(Error::ShapeMismatch {
            expected: format!("{dims:?} for every training image"),
            got: "mixed sizes".into(),
        });
    }

    let mut params = init_detector_params(config, seed)?;
    let mut adam = Adam::new(DETECTOR_LR);
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xdec0));

    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..all.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(DETECTOR_BATCH) {
            let views: Vec<&Array3<f32>> = chunk.iter().map(|&i| all[i].0.values()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| all[i].1).collect();
            let x = stack_hwc(&views).into_dyn();

            let tape = Tape::<f32>::new();
            let bound = bind(&tape, &params, &["detector/"]);
            let xv = tape.constant(x);
            let mut updates = BnUpdates::new();
            let logits = detector_graph(&tape, &bound, &params, xv, BnMode::Train, &mut updates)?;
            let loss = tape.cross_entropy_mean(logits, &labels);
            if !tape.scalar(loss).is_finite() {
                return Err(Error::DivergenceDetected { step: 0 });
            }
            let grads = tape.backward(loss);
            let mut grad_list = Vec::new();
            for (name, var) in bound.trainable(&params, &["detector/"]) {
                if let Some(g) = grads.wrt(var) {
                    grad_list.push((name.to_string(), g.clone()));
                }
            }
            adam.step(&mut params, &grad_list)?;
            crate::train::apply_bn_updates(&mut params, &updates)?;
        }
    }
    Ok(params)
}

/// Detector output for one image: the stego probability (softmax of the two
/// logits) and the raw `(cover, stego)` logit pair.
pub fn detect(detector: &Params<f32>, image: &ImageTensor) -> Result<(f32, [f32; 2])> {
    let tape = Tape::<f32>::new();
    let bound = bind(&tape, detector, &[]);
    let x = tape.constant(hwc_to_nchw(image.values()).into_dyn());
    let mut updates = BnUpdates::new();
    let logits = detector_graph(&tape, &bound, detector, x, BnMode::Eval, &mut updates)?;
    let v = tape.value(logits);
    let (c, s) = (v[[0, 0]], v[[0, 1]]);
    let m = c.max(s);
    let (ec, es) = ((c - m).exp(), (s - m).exp());
    Ok((es / (ec + es), [c, s]))
}

/// Percentage of correct classifications over the union of both sets at the
/// given stego-probability threshold.
pub fn detection_accuracy(
    detector: &Params<f32>,
    covers: &[ImageTensor],
    stegos: &[ImageTensor],
    threshold: f32,
) -> Result<f64> {
    if covers.is_empty() || stegos.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for img in covers {
        let (p, _) = detect(detector, img)?;
        if p <= threshold {
            correct += 1;
        }
    }
    for img in stegos {
        let (p, _) = detect(detector, img)?;
        if p > threshold {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / (covers.len() + stegos.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> NetConfig {
        NetConfig {
            hidden_channels: 8,
            stem_channels: 2,
            decoder_channels: 4,
            head_channels: 4,
            bpp: 1,
            leaky_slope: 0.2,
        }
    }

    fn images(count: usize, seed: u64) -> Vec<ImageTensor> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                ImageTensor::new(Array3::from_shape_simple_fn((16, 16, 3), || {
                    rng.random::<f32>()
                }))
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn identical_classes_sit_near_chance() {
        let imgs = images(12, 1);
        let det = train_detector(small_config(), &imgs, &imgs, 3, 7).unwrap();
        let held = images(10, 2);
        let acc = detection_accuracy(&det, &held, &held, 0.5).unwrap();
        assert!((40.0..=60.0).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn separable_classes_are_learned() {
        let covers = images(16, 3);
        let stegos: Vec<ImageTensor> = covers
            .iter()
            .map(|c| ImageTensor::new(c.values().mapv(|v| (v + 0.3).min(1.0))).unwrap())
            .collect();
        let det = train_detector(small_config(), &covers, &stegos, 30, 4).unwrap();
        let held_covers = images(8, 5);
        let held_stegos: Vec<ImageTensor> = held_covers
            .iter()
            .map(|c| ImageTensor::new(c.values().mapv(|v| (v + 0.3).min(1.0))).unwrap())
            .collect();
        let acc = detection_accuracy(&det, &held_covers, &held_stegos, 0.5).unwrap();
        assert!(acc >= 95.0, "accuracy {acc}");
    }

    #[test]
    fn fixed_seed_reproduces_parameters() {
        let covers = images(6, 6);
        let stegos = images(6, 7);
        let a = train_detector(small_config(), &covers, &stegos, 2, 11).unwrap();
        let b = train_detector(small_config(), &covers, &stegos, 2, 11).unwrap();
        for (name, arr) in a.iter() {
            let other = b.get(name).unwrap();
            assert!(
                arr.iter().zip(other.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{name} differs"
            );
        }
    }

    #[test]
    fn detect_closed_forms() {
        // Zero convolutions push a zero feature map into the linear head, so
        // the logits equal its bias.
        let mut det = init_detector_params(small_config(), 1).unwrap();
        for block in 0..3 {
            det.tensor_mut(&format!("detector/block{block}/conv/weight")).unwrap().fill(0.0);
            det.tensor_mut(&format!("detector/block{block}/conv/bias")).unwrap().fill(0.0);
            det.tensor_mut(&format!("detector/block{block}/bn/beta")).unwrap().fill(0.0);
        }
        det.tensor_mut("detector/fc/weight").unwrap().fill(0.0);
        let img = images(1, 9).pop().unwrap();

        det.tensor_mut("detector/fc/bias").unwrap().fill(0.0);
        let (p, logits) = detect(&det, &img).unwrap();
        assert_eq!(logits, [0.0, 0.0]);
        assert!((p - 0.5).abs() < 1e-7);

        {
            let b = det.tensor_mut("detector/fc/bias").unwrap();
            b[[0]] = 0.0;
            b[[1]] = 3.0f32.ln();
        }
        let (p, _) = detect(&det, &img).unwrap();
        assert!((p - 0.75).abs() < 1e-6, "p_stego {p}");
    }

    #[test]
    fn constant_detector_scores_fifty_on_balanced_sets() {
        let mut det = init_detector_params(small_config(), 2).unwrap();
        for block in 0..3 {
            det.tensor_mut(&format!("detector/block{block}/conv/weight")).unwrap().fill(0.0);
        }
        det.tensor_mut("detector/fc/weight").unwrap().fill(0.0);
        {
            let b = det.tensor_mut("detector/fc/bias").unwrap();
            b[[0]] = 0.0;
            b[[1]] = 5.0; // always "stego"
        }
        let covers = images(5, 10);
        let stegos = images(5, 11);
        let acc = detection_accuracy(&det, &covers, &stegos, 0.5).unwrap();
        assert_eq!(acc, 50.0);
    }

    #[test]
    fn accuracy_is_recomputable_from_decisions() {
        let covers = images(4, 12);
        let stegos = images(4, 13);
        let det = train_detector(small_config(), &covers, &stegos, 1, 3).unwrap();
        let acc = detection_accuracy(&det, &covers, &stegos, 0.5).unwrap();
        let mut correct = 0;
        for c in &covers {
            if detect(&det, c).unwrap().0 <= 0.5 {
                correct += 1;
            }
        }
        for s in &stegos {
            if detect(&det, s).unwrap().0 > 0.5 {
                correct += 1;
            }
        }
        assert_eq!(acc, 100.0 * correct as f64 / 8.0);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let imgs = images(2, 14);
        assert!(matches!(
            train_detector(small_config(), &[], &imgs, 1, 0),
            Err(Error::EmptyDataset)
        ));
        let det = init_detector_params(small_config(), 0).unwrap();
        assert!(matches!(
            detection_accuracy(&det, &imgs, &[], 0.5),
            Err(Error::EmptyDataset)
        ));
    }
}
