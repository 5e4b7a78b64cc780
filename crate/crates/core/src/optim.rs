//! The iterative encoders: the learned recurrent optimizer, projected
//! gradient descent, box-constrained L-BFGS, and the learned+L-BFGS hybrid.
//!
//! All of them minimize the same per-image objective `acc + lambda*qua`
//! (plus the optional steganalysis defense penalty) over the pixel box
//! `[0,1]`, differing only in how the next iterate is produced. Traces record
//! objective and bit error per iteration; error is always measured on the
//! quantized iterate — what a PNG consumer would decode — and, when the JPEG
//! layer is active, after the codec roundtrip.

use crate::autograd::Tape;
use crate::bitstream::MessageTensor;
use crate::error::{Error, Result};
use crate::imageio::{quantize_array, ImageTensor};
use crate::jpeg::JpegConfig;
use crate::losses::objective_graph;
use crate::nets::{
    bind, hwc_to_nchw, init_state, nchw_to_hwc, update_step, BnMode, BnUpdates,
    EncoderState, Params,
};
use ndarray::prelude::*;
use std::time::Instant;

/// The optimized image delta, `(H, W, 3)`. After [`project_box`] the sum
/// `X + delta` lies in `[0,1]` and, with a finite truncation bound,
/// `|delta| <= tau` elementwise.
pub type Perturbation = Array3<f32>;

/// Settings of the learned iterative encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeConfig {
    /// Step size applied to the learned update.
    pub eta: f32,
    /// Iteration budget.
    pub max_iters: usize,
    /// Stop after this many iterations without a strict error improvement.
    pub patience: usize,
    /// Truncation bound on the perturbation; infinite disables it.
    pub tau: f32,
    /// Stop as soon as the quantized decode error reaches zero.
    pub stop_on_zero: bool,
    /// Quality weight of the objective.
    pub lambda: f32,
    /// JPEG layer; when enabled, decoding happens on the compressed image
    /// everywhere (objective, error checks, trace).
    pub jpeg: JpegConfig,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            eta: 0.1,
            max_iters: 50,
            patience: 5,
            tau: f32::INFINITY,
            stop_on_zero: true,
            lambda: 1.0,
            jpeg: JpegConfig::default(),
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config("eta must be > 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        self.jpeg.validate()
    }
}

/// Projected gradient descent settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PgdConfig {
    pub steps: usize,
    pub lr: f32,
    /// Sign-of-gradient steps (default); plain gradient steps otherwise.
    pub sign: bool,
    pub stop_on_zero: bool,
    pub lambda: f32,
    pub jpeg: JpegConfig,
    pub x_init: Option<ImageTensor>,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            steps: 50,
            lr: 0.01,
            sign: true,
            stop_on_zero: true,
            lambda: 1.0,
            jpeg: JpegConfig::default(),
            x_init: None,
        }
    }
}

/// Box-constrained L-BFGS settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub max_steps: usize,
    /// Number of curvature pairs kept for the two-loop recursion.
    pub history: usize,
    pub stop_on_zero: bool,
    /// Stop once the quantized decode error drops to this level or below.
    pub error_target: Option<f64>,
    pub lambda: f32,
    pub jpeg: JpegConfig,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            max_steps: 100,
            history: 10,
            stop_on_zero: true,
            error_target: None,
            lambda: 1.0,
            jpeg: JpegConfig::default(),
        }
    }
}

/// Why an optimization run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIters,
    ZeroError,
    Patience,
    /// Gradient already (numerically) zero at the start.
    ZeroGradient,
    /// Backtracking line search could not find an acceptable step; the best
    /// iterate so far is returned.
    LineSearchFailure,
    /// The configured error target was reached.
    TargetReached,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub objective: f64,
    pub error_rate: f64,
    pub seconds: f64,
}

/// Per-iteration optimization record.
#[derive(Debug, Clone)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub stop: StopReason,
}

impl Trace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    /// Record with the lowest error; earliest wins ties.
    pub fn best(&self) -> Option<&TraceRecord> {
        self.records.iter().reduce(|best, r| {
            if r.error_rate < best.error_rate {
                r
            } else {
                best
            }
        })
    }

    pub fn final_error(&self) -> Option<f64> {
        self.best().map(|r| r.error_rate)
    }

    /// CSV rows `iteration,objective,error_rate,seconds` with a header.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,objective,error_rate,seconds")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{}",
                r.iteration, r.objective, r.error_rate, r.seconds
            )?;
        }
        Ok(())
    }

    fn concat(mut self, other: Trace) -> Trace {
        let offset = self.records.len();
        for r in other.records {
            self.records.push(TraceRecord {
                iteration: offset + r.iteration,
                ..r
            });
        }
        self.stop = other.stop;
        self
    }
}

/// Projects a perturbation so `X + delta` stays inside `[0,1]` and, when
/// `tau` is finite, `|delta| <= tau`. Idempotent.
pub fn project_box(cover: &ImageTensor, delta: &Perturbation, tau: f32) -> Perturbation {
    let x = cover.values();
    assert_eq!(x.dim(), delta.dim(), "project_box: shape mismatch");
    let mut out = delta.clone();
    azip!((d in &mut out, &xv in x) {
        let t = (*d).clamp(-tau, tau);
        *d = t.clamp(-xv, 1.0 - xv);
    });
    out
}

/// Frozen per-image objective shared by every optimizer.
pub(crate) struct Objective<'a> {
    params: &'a Params<f32>,
    detector: Option<&'a Params<f32>>,
    message: &'a MessageTensor,
    message_nchw: ArrayD<f32>,
    lambda: f32,
    jpeg_quality: Option<u8>,
}

impl<'a> Objective<'a> {
    pub fn new(
        params: &'a Params<f32>,
        message: &'a MessageTensor,
        lambda: f32,
        jpeg: JpegConfig,
        detector: Option<&'a Params<f32>>,
    ) -> Result<Self> {
        jpeg.validate()?;
        let final_w = params.get("decoder/final/weight")?;
        let params_bpp = final_w.shape()[0];
        if params_bpp != message.bits_per_pixel() || params.config.bpp != message.bits_per_pixel() {
            return Err(Error::PayloadMismatch {
                params: params_bpp,
                message: message.bits_per_pixel(),
            });
        }
        let (h, w, b) = message.shape();
        let mut msg = Array4::<f32>::zeros((1, b, h, w));
        for ((y, x, bi), &bit) in message.bits().indexed_iter() {
            msg[[0, bi, y, x]] = bit as f32;
        }
        Ok(Objective {
            params,
            detector,
            message,
            message_nchw: msg.into_dyn(),
            lambda,
            jpeg_quality: jpeg.active_quality(),
        })
    }

    fn check_spatial(&self, x: &Array3<f32>) -> Result<()> {
        let (h, w, b) = self.message.shape();
        let _ = b;
        if x.dim().0 != h || x.dim().1 != w {
            return Err(Error::ShapeMismatch {
                expected: format!("image ({h}, {w}, 3) matching the message"),
                got: format!("{:?}", x.dim()),
            });
        }
        Ok(())
    }

    /// Objective value and its gradient w.r.t. the stego image, `(H, W, 3)`.
    pub fn eval_grad(&self, x_tilde: &Array3<f32>, cover: &Array3<f32>) -> Result<(f64, Array3<f32>)> {
        self.check_spatial(x_tilde)?;
        let tape = Tape::<f32>::new();
        let bound = bind(&tape, self.params, &[]);
        let det_bound = self.detector.map(|d| (bind(&tape, d, &[]), d));
        let xv = tape.leaf(hwc_to_nchw(x_tilde).into_dyn());
        let cv = tape.constant(hwc_to_nchw(cover).into_dyn());
        let mut updates = BnUpdates::new();
        let (obj, _) = objective_graph(
            &tape,
            &bound,
            self.params,
            xv,
            cv,
            &self.message_nchw,
            self.lambda,
            BnMode::Eval,
            &mut updates,
            self.jpeg_quality,
            det_bound.as_ref().map(|(b, d)| (b, *d)),
        )?;
        let value = tape.scalar(obj) as f64;
        let grads = tape.backward(obj);
        let gx = grads
            .wrt(xv)
            .expect("objective depends on the stego image");
        Ok((value, nchw_to_hwc(gx)))
    }

    /// Objective value and quantized-decode bit error in one forward pass.
    /// `x_quantized` must already be quantized (and is what a stored file
    /// would contain); with the JPEG layer enabled both the decode and the
    /// accuracy term consume the compressed image.
    pub fn eval_and_error(
        &self,
        x_quantized: &Array3<f32>,
        cover: &Array3<f32>,
    ) -> Result<(f64, f64)> {
        self.check_spatial(x_quantized)?;
        let tape = Tape::<f32>::new();
        let bound = bind(&tape, self.params, &[]);
        let det_bound = self.detector.map(|d| (bind(&tape, d, &[]), d));
        let xv = tape.constant(hwc_to_nchw(x_quantized).into_dyn());
        let cv = tape.constant(hwc_to_nchw(cover).into_dyn());
        let mut updates = BnUpdates::new();
        let (obj, probs) = objective_graph(
            &tape,
            &bound,
            self.params,
            xv,
            cv,
            &self.message_nchw,
            self.lambda,
            BnMode::Eval,
            &mut updates,
            self.jpeg_quality,
            det_bound.as_ref().map(|(b, d)| (b, *d)),
        )?;
        let pv = tape.value(probs);
        let bits = self.message.bits();
        let (h, w, b) = self.message.shape();
        let mut wrong = 0usize;
        for y in 0..h {
            for x in 0..w {
                for bi in 0..b {
                    let bit = u8::from(pv[[0, bi, y, x]] > 0.5);
                    if bit != bits[[y, x, bi]] {
                        wrong += 1;
                    }
                }
            }
        }
        let err = wrong as f64 / self.message.len() as f64;
        Ok((tape.scalar(obj) as f64, err))
    }

}

/// Runs the learned iterative encoder on one image.
///
/// Starting from a zero perturbation and the extractor-initialized hidden
/// state, each iteration feeds the objective gradient to the update cell,
/// scales the emitted update by `eta` and projects back into the box. The
/// returned image is the quantized iterate with the lowest recorded error
/// (earliest on ties).
pub fn liso_encode(
    cover: &ImageTensor,
    message: &MessageTensor,
    params: &Params<f32>,
    cfg: &OptimizeConfig,
    detector: Option<&Params<f32>>,
) -> Result<(ImageTensor, Trace, EncoderState)> {
    crate::tune_allocator();
    cfg.validate()?;
    let objective = Objective::new(params, message, cfg.lambda, cfg.jpeg, detector)?;
    objective.check_spatial(cover.values())?;

    let start = Instant::now();
    let x = cover.values();
    let mut delta: Perturbation = Array3::zeros(x.dim());
    let mut state = init_state(params, cover)?;
    let mut records = Vec::new();
    let mut best: Option<(f64, Array3<f32>)> = None;
    let mut stale = 0usize;
    let mut stop = StopReason::MaxIters;

    for t in 1..=cfg.max_iters {
        let x_tilde = x + &delta;
        let (_, grad) = objective.eval_grad(&x_tilde, x)?;
        let (next_state, g) = update_step(params, &state, cover, &delta, &grad)?;
        state = next_state;
        delta = project_box(cover, &(&delta + &g.mapv(|v| cfg.eta * v)), cfg.tau);

        let xq = quantize_array(&(x + &delta));
        let (obj, err) = objective.eval_and_error(&xq, x)?;
        records.push(TraceRecord {
            iteration: t,
            objective: obj,
            error_rate: err,
            seconds: start.elapsed().as_secs_f64(),
        });

        let improved = best.as_ref().map_or(true, |(b, _)| err < *b);
        if improved {
            best = Some((err, xq));
            stale = 0;
        } else {
            stale += 1;
        }

        if err == 0.0 && cfg.stop_on_zero {
            stop = StopReason::ZeroError;
            break;
        }
        if stale >= cfg.patience {
            stop = StopReason::Patience;
            break;
        }
    }

    let (_, best_x) = best.expect("at least one iteration ran");
    let image = ImageTensor::from_clamped(best_x)?;
    Ok((
        image,
        Trace { records, stop },
        state,
    ))
}

/// Projected gradient descent on the stego image itself: steepest descent
/// (sign steps by default) followed by clamping to the pixel box.
pub fn pgd_optimize(
    cover: &ImageTensor,
    message: &MessageTensor,
    params: &Params<f32>,
    cfg: &PgdConfig,
) -> Result<(ImageTensor, Trace)> {
    if cfg.steps < 1 {
        return Err(Error::Config("steps must be >= 1".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Config("lr must be > 0".into()));
    }
    let objective = Objective::new(params, message, cfg.lambda, cfg.jpeg, None)?;
    objective.check_spatial(cover.values())?;

    let start = Instant::now();
    let mut x_tilde = cfg
        .x_init
        .as_ref()
        .unwrap_or(cover)
        .values()
        .clone();
    let mut records = Vec::new();
    let mut best: Option<(f64, Array3<f32>)> = None;
    let mut stop = StopReason::MaxIters;

    for t in 1..=cfg.steps {
        let (_, grad) = objective.eval_grad(&x_tilde, cover.values())?;
        azip!((x in &mut x_tilde, &g in &grad) {
            let step = if cfg.sign { g.signum() * f32::from(g != 0.0) } else { g };
            *x = (*x - cfg.lr * step).clamp(0.0, 1.0);
        });

        let xq = quantize_array(&x_tilde);
        let (obj, err) = objective.eval_and_error(&xq, cover.values())?;
        records.push(TraceRecord {
            iteration: t,
            objective: obj,
            error_rate: err,
            seconds: start.elapsed().as_secs_f64(),
        });
        if best.as_ref().map_or(true, |(b, _)| err < *b) {
            best = Some((err, xq));
        }
        if err == 0.0 && cfg.stop_on_zero {
            stop = StopReason::ZeroError;
            break;
        }
    }

    let (_, best_x) = best.expect("at least one step ran");
    Ok((ImageTensor::from_clamped(best_x)?, Trace { records, stop }))
}

// ---- L-BFGS core ----

pub(crate) struct LbfgsOptions {
    pub max_steps: usize,
    pub history: usize,
    /// Armijo constant.
    pub c1: f64,
    /// Maximum halvings per line search.
    pub max_ls: usize,
    /// Infinity-norm gradient tolerance for immediate convergence.
    pub grad_tol: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_steps: 100,
            history: 10,
            c1: 1e-4,
            max_ls: 20,
            grad_tol: 1e-12,
            lo: 0.0,
            hi: 1.0,
        }
    }
}

pub(crate) enum LbfgsEnd {
    Converged,
    MaxSteps,
    Callback,
    LineSearchFailure,
}

/// Two-loop-recursion L-BFGS with box handling by clamping accepted iterates
/// and skipping curvature pairs with non-positive `s . y`.
///
/// `eval` returns value and gradient; `on_step(k, x, f)` runs after each
/// accepted step and stops the loop by returning `true`.
pub(crate) fn lbfgs_box_minimize<F, C>(
    x0: Array1<f64>,
    mut eval: F,
    opts: &LbfgsOptions,
    mut on_step: C,
) -> (Array1<f64>, LbfgsEnd)
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
    C: FnMut(usize, &Array1<f64>, f64) -> bool,
{
    let clamp = |x: &Array1<f64>| x.mapv(|v| v.clamp(opts.lo, opts.hi));
    let mut x = clamp(&x0);
    let (mut fx, mut g) = eval(&x);
    if g.iter().map(|v| v.abs()).fold(0.0, f64::max) <= opts.grad_tol {
        return (x, LbfgsEnd::Converged);
    }

    let mut hist: std::collections::VecDeque<(Array1<f64>, Array1<f64>, f64)> =
        std::collections::VecDeque::with_capacity(opts.history);

    for k in 1..=opts.max_steps {
        let mut dir = two_loop(&g, &hist);
        dir.mapv_inplace(|v| -v);
        if dir.dot(&g) >= 0.0 {
            // Not a descent direction; fall back to steepest descent.
            dir = g.mapv(|v| -v);
            hist.clear();
        }

        let mut alpha = 1.0f64;
        let mut accepted: Option<(Array1<f64>, f64)> = None;
        for _ in 0..opts.max_ls {
            let cand = clamp(&(&x + &dir.mapv(|v| alpha * v)));
            let s = &cand - &x;
            let slope = g.dot(&s);
            if slope >= 0.0 {
                // Projection destroyed the descent property at this scale.
                alpha *= 0.5;
                continue;
            }
            let (fc, _) = eval_value_only(&mut eval, &cand);
            if fc <= fx + opts.c1 * slope {
                accepted = Some((cand, fc));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            return (x, LbfgsEnd::LineSearchFailure);
        };

        let (_, g_new) = eval(&x_new);
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 {
            if hist.len() == opts.history {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        fx = f_new;
        g = g_new;

        if on_step(k, &x, fx) {
            return (x, LbfgsEnd::Callback);
        }
        if g.iter().map(|v| v.abs()).fold(0.0, f64::max) <= opts.grad_tol {
            return (x, LbfgsEnd::Converged);
        }
    }
    (x, LbfgsEnd::MaxSteps)
}

fn eval_value_only<F>(eval: &mut F, x: &Array1<f64>) -> (f64, ())
where
    F: FnMut(&Array1<f64>) -> (f64, Array1<f64>),
{
    let (f, _) = eval(x);
    (f, ())
}

/// `H * g` via the two-loop recursion with the usual `s.y / y.y` initial
/// Hessian scaling.
fn two_loop(
    g: &Array1<f64>,
    hist: &std::collections::VecDeque<(Array1<f64>, Array1<f64>, f64)>,
) -> Array1<f64> {
    let mut q = g.clone();
    if hist.is_empty() {
        return q;
    }
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * s.dot(&q);
        q.scaled_add(-a, y);
        alphas.push(a);
    }
    let (s_last, y_last, _) = hist.back().expect("nonempty history");
    let gamma = s_last.dot(y_last) / y_last.dot(y_last);
    q.mapv_inplace(|v| v * gamma);
    for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
        let b = rho * y.dot(&q);
        q.scaled_add(a - b, s);
    }
    q
}

/// Box-constrained L-BFGS on the stego image, starting from `x_start`.
///
/// The optimization variable is the full image; accepted iterates are
/// clamped to `[0,1]`. Early stopping on zero quantized-decode error (or the
/// configured error target).
pub fn lbfgs_optimize(
    x_start: &ImageTensor,
    cover: &ImageTensor,
    message: &MessageTensor,
    params: &Params<f32>,
    cfg: &LbfgsConfig,
) -> Result<(ImageTensor, Trace)> {
    if cfg.max_steps < 1 {
        return Err(Error::Config("max_steps must be >= 1".into()));
    }
    if cfg.history < 1 {
        return Err(Error::Config("history must be >= 1".into()));
    }
    let objective = Objective::new(params, message, cfg.lambda, cfg.jpeg, None)?;
    objective.check_spatial(cover.values())?;
    objective.check_spatial(x_start.values())?;

    let start = Instant::now();
    let dims = x_start.values().dim();
    let x0 = Array1::from_iter(x_start.values().iter().map(|&v| v as f64));

    let to_hwc = |x: &Array1<f64>| -> Array3<f32> {
        Array3::from_shape_vec(dims, x.iter().map(|&v| v as f32).collect())
            .expect("shape preserved")
    };

    let mut first_error = None;
    let eval_err: std::cell::RefCell<Option<Error>> = std::cell::RefCell::new(None);
    let mut records: Vec<TraceRecord> = Vec::new();
    let mut best: Option<(f64, Array3<f32>)> = None;

    let (_, end) = {
        let eval_fn = |x: &Array1<f64>| -> (f64, Array1<f64>) {
            let hwc = to_hwc(x);
            match objective.eval_grad(&hwc, cover.values()) {
                Ok((f, ghwc)) => (f, Array1::from_iter(ghwc.iter().map(|&v| v as f64))),
                Err(e) => {
                    *eval_err.borrow_mut() = Some(e);
                    (f64::INFINITY, Array1::zeros(x.len()))
                }
            }
        };
        let on_step = |k: usize, x: &Array1<f64>, _f: f64| -> bool {
            let xq = quantize_array(&to_hwc(x));
            let (obj, err) = match objective.eval_and_error(&xq, cover.values()) {
                Ok(pair) => pair,
                Err(e) => {
                    *eval_err.borrow_mut() = Some(e);
                    return true;
                }
            };
            records.push(TraceRecord {
                iteration: k,
                objective: obj,
                error_rate: err,
                seconds: start.elapsed().as_secs_f64(),
            });
            if best.as_ref().map_or(true, |(b, _)| err < *b) {
                best = Some((err, xq));
            }
            if first_error.is_none() {
                first_error = Some(err);
            }
            (cfg.stop_on_zero && err == 0.0)
                || cfg.error_target.is_some_and(|t| err <= t)
        };
        lbfgs_box_minimize(
            x0,
            eval_fn,
            &LbfgsOptions {
                max_steps: cfg.max_steps,
                history: cfg.history,
                ..LbfgsOptions::default()
            },
            on_step,
        )
    };
    if let Some(e) = eval_err.into_inner() {
        return Err(e);
    }

    let stop = match end {
        LbfgsEnd::Converged => StopReason::ZeroGradient,
        LbfgsEnd::MaxSteps => StopReason::MaxIters,
        LbfgsEnd::LineSearchFailure => StopReason::LineSearchFailure,
        LbfgsEnd::Callback => {
            let last = records.last().expect("callback stop implies a record");
            if last.error_rate == 0.0 && cfg.stop_on_zero {
                StopReason::ZeroError
            } else {
                StopReason::TargetReached
            }
        }
    };

    // No accepted step (immediate convergence or instant failure): the start
    // point is the result.
    let best_x = best
        .map(|(_, x)| x)
        .unwrap_or_else(|| quantize_array(x_start.values()));
    Ok((ImageTensor::from_clamped(best_x)?, Trace { records, stop }))
}

/// Learned encoder followed by an L-BFGS polish from its output; returns
/// whichever iterate decodes better (ties broken by quality loss).
pub fn liso_refine_lbfgs(
    cover: &ImageTensor,
    message: &MessageTensor,
    params: &Params<f32>,
    cfg: &OptimizeConfig,
    max_lbfgs_steps: usize,
    detector: Option<&Params<f32>>,
) -> Result<(ImageTensor, Trace)> {
    let (x_liso, trace_liso, _) = liso_encode(cover, message, params, cfg, detector)?;
    let liso_err = trace_liso.final_error().expect("liso ran at least once");
    if liso_err == 0.0 {
        return Ok((x_liso, trace_liso));
    }
    let lcfg = LbfgsConfig {
        max_steps: max_lbfgs_steps.max(1),
        stop_on_zero: true,
        lambda: cfg.lambda,
        jpeg: cfg.jpeg,
        ..LbfgsConfig::default()
    };
    let (x_ref, trace_ref) = lbfgs_optimize(&x_liso, cover, message, params, &lcfg)?;
    let ref_err = trace_ref.final_error().unwrap_or(liso_err);

    let objective = Objective::new(params, message, cfg.lambda, cfg.jpeg, detector)?;
    let pick_refined = match ref_err.partial_cmp(&liso_err) {
        Some(std::cmp::Ordering::Less) => true,
        Some(std::cmp::Ordering::Greater) => false,
        _ => {
            // Tie: lower quality loss wins.
            let q_l = crate::losses::qua_loss(&x_liso, cover)?;
            let q_r = crate::losses::qua_loss(&x_ref, cover)?;
            q_r < q_l
        }
    };
    let _ = &objective;
    let combined = trace_liso.concat(trace_ref);
    Ok(if pick_refined {
        (x_ref, combined)
    } else {
        (x_liso, combined)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::quantize;
    use crate::nets::{init_stego_params, NetConfig};
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

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

    fn image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_simple_fn((h, w, 3), || rng.random::<f32>())).unwrap()
    }

    #[test]
    fn project_box_cases() {
        let cover = ImageTensor::new(Array3::from_elem((16, 16, 3), 0.5)).unwrap();
        // Feasible delta with infinite tau is untouched.
        let d = Array3::from_elem((16, 16, 3), 0.25f32);
        assert_eq!(project_box(&cover, &d, f32::INFINITY), d);
        // Lower box face.
        let black = ImageTensor::new(Array3::zeros((16, 16, 3))).unwrap();
        let neg = Array3::from_elem((16, 16, 3), -0.3f32);
        assert!(project_box(&black, &neg, f32::INFINITY).iter().all(|&v| v == 0.0));
        // Truncation bound.
        let big = Array3::from_elem((16, 16, 3), 0.2f32);
        assert!(project_box(&cover, &big, 0.05).iter().all(|&v| v == 0.05));
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_feasible(seed in 0u64..200, tau in prop::sample::select(vec![0.05f32, 0.3, f32::INFINITY])) {
            let cover = image(16, 16, seed);
            let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xabcd);
            let delta = Array3::from_shape_simple_fn((16, 16, 3), || rng.random::<f32>() * 3.0 - 1.5);
            let p = project_box(&cover, &delta, tau);
            let pp = project_box(&cover, &p, tau);
            prop_assert_eq!(&p, &pp);
            for (d, x) in p.iter().zip(cover.values().iter()) {
                let s = d + x;
                prop_assert!((-1e-6..=1.0 + 1e-6).contains(&s));
                if tau.is_finite() {
                    prop_assert!(d.abs() <= tau + 1e-6);
                }
            }
        }
    }

    #[test]
    fn lbfgs_reaches_quadratic_minimizer() {
        // f(x) = 0.5 ||x - c||^2 inside a wide box.
        let c: Array1<f64> = Array1::from_vec(vec![0.9, 1.3, 0.5, -0.4, 2.0]);
        let target = c.clone();
        let (x, end) = lbfgs_box_minimize(
            Array1::zeros(5),
            move |x| {
                let d = x - &c;
                (0.5 * d.dot(&d), d)
            },
            &LbfgsOptions {
                max_steps: 20,
                lo: -10.0,
                hi: 10.0,
                ..LbfgsOptions::default()
            },
            |_, _, _| false,
        );
        assert!(matches!(end, LbfgsEnd::Converged | LbfgsEnd::MaxSteps));
        let err = (&x - &target).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(err < 1e-6, "distance to minimizer {err}");
    }

    #[test]
    fn lbfgs_zero_gradient_terminates_immediately() {
        let mut calls = 0usize;
        let (x, end) = lbfgs_box_minimize(
            Array1::from_vec(vec![0.25, 0.75]),
            |x| {
                calls += 1;
                (0.0, Array1::zeros(x.len()))
            },
            &LbfgsOptions::default(),
            |_, _, _| false,
        );
        assert!(matches!(end, LbfgsEnd::Converged));
        assert_eq!(calls, 1);
        assert_eq!(x.as_slice().unwrap(), &[0.25, 0.75]);
    }

    #[test]
    fn lbfgs_iterates_respect_the_box() {
        // Minimum outside the box at c = 2: iterates must stay clamped.
        let c = 2.0f64;
        let mut seen = Vec::new();
        let (x, _) = lbfgs_box_minimize(
            Array1::from_vec(vec![0.1, 0.2, 0.3]),
            |x| {
                let d = x.mapv(|v| v - c);
                (0.5 * d.dot(&d), d)
            },
            &LbfgsOptions {
                max_steps: 15,
                ..LbfgsOptions::default()
            },
            |_, x, _| {
                seen.push(x.clone());
                false
            },
        );
        for it in seen.iter().chain(std::iter::once(&x)) {
            assert!(it.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(x.iter().all(|&v| (v - 1.0).abs() < 1e-9), "should sit on the face");
    }

    /// Decoder whose probability at each position is a logistic function of
    /// that pixel's red channel: blocks pass the channel through untouched,
    /// the final conv applies `sigmoid(8x - 4)`.
    fn logistic_decoder() -> Params<f32> {
        let mut p = init_stego_params(small_config(), 1).unwrap();
        let d = small_config().decoder_channels;
        let passthrough = |cin: usize| {
            let mut w = Array4::<f32>::zeros((d, cin, 3, 3));
            w[[0, 0, 1, 1]] = 1.0;
            w.into_dyn()
        };
        for (i, cin) in [(0usize, 3usize), (1, d), (2, d)] {
            p.insert(format!("decoder/block{i}/conv/weight"), passthrough(cin));
            p.tensor_mut(&format!("decoder/block{i}/conv/bias")).unwrap().fill(0.0);
        }
        let mut wf = Array4::<f32>::zeros((1, d, 3, 3));
        wf[[0, 0, 1, 1]] = 8.0;
        p.insert("decoder/final/weight", wf.into_dyn());
        p.tensor_mut("decoder/final/bias").unwrap().fill(-4.0);
        p.config.bpp = 1;
        p
    }

    #[test]
    fn pgd_logistic_oracle_reaches_zero_error() {
        // Cover at 0.2 everywhere, all-ones message: each sign step moves the
        // red channel up by lr, crossing sigmoid's 0.5 point (x = 0.5) within
        // 10 steps (0.2 + 6 * 0.06 = 0.56).
        let params = logistic_decoder();
        let cover = ImageTensor::new(Array3::from_elem((16, 16, 3), 0.2)).unwrap();
        let message = MessageTensor::new(Array3::ones((16, 16, 1))).unwrap();
        let cfg = PgdConfig {
            steps: 10,
            lr: 0.06,
            ..PgdConfig::default()
        };
        let (x, trace) = pgd_optimize(&cover, &message, &params, &cfg).unwrap();
        assert_eq!(trace.final_error(), Some(0.0));
        assert!(trace.iterations() <= 10);
        assert!(x.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn pgd_zero_gradient_is_a_fixed_point() {
        // Zero decoder weights: probability is constant so the acc gradient
        // w.r.t. the image vanishes, and at X = cover the quality gradient is
        // zero too.
        let mut params = init_stego_params(small_config(), 2).unwrap();
        for i in 0..3 {
            params.tensor_mut(&format!("decoder/block{i}/conv/weight")).unwrap().fill(0.0);
            params.tensor_mut(&format!("decoder/block{i}/conv/bias")).unwrap().fill(0.0);
        }
        params.tensor_mut("decoder/final/weight").unwrap().fill(0.0);
        let cover = quantize(&image(16, 16, 3));
        let message = crate::bitstream::sample_random_message(16, 16, 1, 4).unwrap();
        let cfg = PgdConfig {
            steps: 3,
            lr: 0.05,
            stop_on_zero: false,
            ..PgdConfig::default()
        };
        let (x, _) = pgd_optimize(&cover, &message, &params, &cfg).unwrap();
        assert_eq!(x.values(), cover.values());
    }

    #[test]
    fn liso_rejects_bad_configs_and_mismatched_payload() {
        let params = init_stego_params(small_config(), 5).unwrap();
        let cover = image(16, 16, 6);
        let message = crate::bitstream::sample_random_message(16, 16, 1, 7).unwrap();
        let bad = OptimizeConfig {
            max_iters: 0,
            ..OptimizeConfig::default()
        };
        assert!(matches!(
            liso_encode(&cover, &message, &params, &bad, None),
            Err(Error::Config(_))
        ));

        let two_bpp = crate::bitstream::sample_random_message(16, 16, 2, 7).unwrap();
        assert!(matches!(
            liso_encode(&cover, &two_bpp, &params, &OptimizeConfig::default(), None),
            Err(Error::PayloadMismatch { .. })
        ));
    }

    #[test]
    fn liso_first_step_is_identity_with_fresh_head() {
        // The head's final conv is zero-initialized, so g_1 = 0 and one
        // iteration returns the quantized cover.
        let params = init_stego_params(small_config(), 8).unwrap();
        let cover = image(16, 16, 9);
        let message = crate::bitstream::sample_random_message(16, 16, 1, 10).unwrap();
        let cfg = OptimizeConfig {
            max_iters: 1,
            ..OptimizeConfig::default()
        };
        let (x, trace, state) = liso_encode(&cover, &message, &params, &cfg, None).unwrap();
        assert_eq!(x.values(), quantize(&cover).values());
        assert_eq!(trace.iterations(), 1);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn liso_output_is_feasible_and_quantized() {
        let params = init_stego_params(small_config(), 11).unwrap();
        let cover = image(16, 16, 12);
        let message = crate::bitstream::sample_random_message(16, 16, 1, 13).unwrap();
        let cfg = OptimizeConfig {
            max_iters: 4,
            stop_on_zero: false,
            ..OptimizeConfig::default()
        };
        let (x, trace, _) = liso_encode(&cover, &message, &params, &cfg, None).unwrap();
        assert!(x.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(quantize(&x).values(), x.values());
        // Best-iterate selection: reported error is the trace minimum.
        let min = trace
            .records
            .iter()
            .map(|r| r.error_rate)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(trace.final_error(), Some(min));
    }

    #[test]
    fn refine_never_decodes_worse_than_liso_alone() {
        let params = init_stego_params(small_config(), 14).unwrap();
        let cover = image(16, 16, 15);
        let message = crate::bitstream::sample_random_message(16, 16, 1, 16).unwrap();
        let cfg = OptimizeConfig {
            max_iters: 3,
            stop_on_zero: true,
            ..OptimizeConfig::default()
        };
        let (_, liso_trace, _) = liso_encode(&cover, &message, &params, &cfg, None).unwrap();
        let (refined, combined) =
            liso_refine_lbfgs(&cover, &message, &params, &cfg, 5, None).unwrap();
        let objective = Objective::new(&params, &message, cfg.lambda, cfg.jpeg, None).unwrap();
        let refined_err = objective
            .eval_and_error(refined.values(), cover.values())
            .unwrap()
            .1;
        assert!(refined_err <= liso_trace.final_error().unwrap() + 1e-12);
        assert!(combined.iterations() >= liso_trace.iterations());
    }

    #[test]
    fn trace_csv_shape() {
        let trace = Trace {
            records: vec![TraceRecord {
                iteration: 1,
                objective: 0.5,
                error_rate: 0.25,
                seconds: 0.01,
            }],
            stop: StopReason::MaxIters,
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("iteration,objective,error_rate,seconds"));
        assert_eq!(lines.next(), Some("1,0.5,0.25,0.01"));
    }
}
