//! Loss terms: recovery accuracy (BCE), image quality (MSE), critic score,
//! the step-decayed training aggregate, and the steganalysis defense penalty.
//!
//! The accuracy loss is the standard nonnegative binary cross entropy; the
//! decoder outputs are clamped to `[PROB_EPS, 1-PROB_EPS]` before the logs.

use crate::autograd::{Scalar, Tape, Var};
use crate::bitstream::MessageTensor;
use crate::error::{Error, Result};
use crate::imageio::ImageTensor;
use crate::jpeg::jpeg_layer;
use crate::nets::{
    bind, critic_forward, decoder_forward, decoder_graph, detector_graph, BnMode, BnUpdates,
    Bound, Params,
};
use ndarray::prelude::*;

/// Clamp applied to probabilities before logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Objective weights: quality weight, critic weight, and the per-step decay
/// of the unrolled training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f32,
    pub mu: f32,
    pub gamma: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            mu: 1.0,
            gamma: 0.8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.mu < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Mean binary cross entropy between decoder probabilities `(H, W, B)` and
/// the message bits.
pub fn acc_loss(probs: &Array3<f32>, message: &MessageTensor) -> Result<f64> {
    if probs.dim() != message.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", message.shape()),
            got: format!("{:?}", probs.dim()),
        });
    }
    let mut total = 0.0f64;
    for (&p, &m) in probs.iter().zip(message.bits().iter()) {
        let p = (p as f64).clamp(PROB_EPS, 1.0 - PROB_EPS);
        let m = m as f64;
        total -= m * p.ln() + (1.0 - m) * (1.0 - p).ln();
    }
    Ok(total / message.len() as f64)
}

/// Mean squared error between two images.
pub fn qua_loss(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", b.dims()),
            got: format!("{:?}", a.dims()),
        });
    }
    let n = a.values().len() as f64;
    let total: f64 = a
        .values()
        .iter()
        .zip(b.values().iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(total / n)
}

/// Critic term of the encoder objective: the raw critic score (lower means
/// "more natural" under the adopted convention).
pub fn critic_loss_encoder(critic_params: &Params<f32>, x_tilde: &ImageTensor) -> Result<f64> {
    Ok(critic_forward(critic_params, x_tilde)? as f64)
}

/// Critic training objective: `mean critic(X) - mean critic(X~)`, minimized
/// in the critic step. Parameter clipping to [-0.01, 0.01] happens after
/// each update, see [`crate::train::clamp_component`].
pub fn critic_training_loss(
    critic_params: &Params<f32>,
    cover: &ImageTensor,
    x_tilde: &ImageTensor,
) -> Result<f64> {
    Ok(critic_forward(critic_params, cover)? as f64 - critic_forward(critic_params, x_tilde)? as f64)
}

/// The unrolled training objective of a sequence of intermediate images:
/// `sum_t gamma^(T-t) [acc + lambda*qua + mu*critic]` evaluated at each step.
///
/// Reference evaluator over single images with frozen statistics; the
/// training loop composes the same expression on a gradient tape.
pub fn training_loss(
    intermediates: &[ImageTensor],
    message: &MessageTensor,
    cover: &ImageTensor,
    weights: &LossWeights,
    params: &Params<f32>,
) -> Result<f64> {
    weights.validate()?;
    let t_max = intermediates.len();
    if t_max == 0 {
        return Err(Error::EmptySequence);
    }
    let mut total = 0.0f64;
    for (i, x_tilde) in intermediates.iter().enumerate() {
        let probs = decoder_forward(params, x_tilde)?;
        let acc = acc_loss(&probs, message)?;
        let qua = qua_loss(x_tilde, cover)?;
        let crit = critic_loss_encoder(params, x_tilde)?;
        let w = (weights.gamma as f64).powi((t_max - 1 - i) as i32);
        total += w * (acc + weights.lambda as f64 * qua + weights.mu as f64 * crit);
    }
    Ok(total)
}

/// Steganalysis defense term: the stego-class logit when the detector calls
/// the image steganographic (stego logit above cover logit), else 0. The
/// undetected branch is constant, so it contributes no gradient.
pub fn detection_defense_loss(detector: &Params<f32>, x_tilde: &ImageTensor) -> Result<f64> {
    let tape = Tape::<f32>::new();
    let bound = bind(&tape, detector, &[]);
    let x = tape.constant(crate::nets::hwc_to_nchw(x_tilde.values()).into_dyn());
    let mut updates = BnUpdates::new();
    let logits = detector_graph(&tape, &bound, detector, x, BnMode::Eval, &mut updates)?;
    let pen = tape.detection_penalty(logits);
    Ok(tape.scalar(pen) as f64)
}

/// Builds the per-sample inference objective `acc + lambda*qua` (plus the
/// optional defense penalty) on a tape. `x_tilde` is `[N,3,H,W]`; when a
/// JPEG quality is given the decoder consumes the compressed image through
/// the straight-through layer. Returns the objective scalar and the decoder
/// probabilities.
#[allow(clippy::too_many_arguments)]
pub(crate) fn objective_graph<T: Scalar>(
    tape: &Tape<T>,
    stego_bound: &Bound,
    stego: &Params<T>,
    x_tilde: Var,
    cover: Var,
    message: &ArrayD<T>,
    lambda: T,
    mode: BnMode,
    updates: &mut BnUpdates<T>,
    jpeg_quality: Option<u8>,
    defense: Option<(&Bound, &Params<T>)>,
) -> Result<(Var, Var)> {
    let decoded_input = match jpeg_quality {
        Some(q) => jpeg_layer(tape, x_tilde, q),
        None => x_tilde,
    };
    let probs = decoder_graph(tape, stego_bound, stego, decoded_input, mode, updates)?;
    let eps = T::from_f64(PROB_EPS).expect("eps fits scalar");
    let acc = tape.bce_mean(probs, message, eps);
    let qua = tape.mse_mean(x_tilde, cover);
    let mut total = tape.add(acc, tape.scale(qua, lambda));
    if let Some((det_bound, det)) = defense {
        let logits = detector_graph(tape, det_bound, det, decoded_input, BnMode::Eval, updates)?;
        let pen = tape.detection_penalty(logits);
        total = tape.add(total, pen);
    }
    Ok((total, probs))
}
