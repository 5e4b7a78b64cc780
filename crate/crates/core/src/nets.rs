//! The four networks: feature extractor, recurrent update cell with its
//! projection head (the learned optimizer), decoder, and critic — plus the
//! steganalysis detector, which reuses the same block vocabulary.
//!
//! All networks are fully convolutional with 3x3 kernels and stride 1 and no
//! resampling, so they accept any spatial size and produce spatially matched
//! outputs. Forward computations are expressed as [`Tape`] graphs; the public
//! single-image entry points bind parameters as constants and discard the
//! tape, while training binds them as leaves and backpropagates.

use crate::autograd::{Scalar, Tape, Var};
use crate::bitstream::MessageTensor;
use crate::error::{Error, Result};
use crate::imageio::ImageTensor;
use indexmap::IndexMap;
use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::sync::Arc;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Width and payload settings shared by all networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    /// Channels of the recurrent hidden state.
    pub hidden_channels: usize,
    /// Channels produced by each input stem (perturbation, gradient, image);
    /// the cell input is their concatenation.
    pub stem_channels: usize,
    /// Block width of the decoder, critic and detector.
    pub decoder_channels: usize,
    /// Mid width of the update head.
    pub head_channels: usize,
    /// Payload bits per pixel.
    pub bpp: usize,
    /// Negative slope of the leaky ReLUs.
    pub leaky_slope: f32,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden_channels: 64,
            stem_channels: 16,
            decoder_channels: 32,
            head_channels: 32,
            bpp: 1,
            leaky_slope: 0.2,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels < 8 {
            return Err(Error::Config(format!(
                "hidden_channels must be >= 8, got {}",
                self.hidden_channels
            )));
        }
        if !(1..=8).contains(&self.bpp) {
            return Err(Error::Config(format!("bpp must be in [1, 8], got {}", self.bpp)));
        }
        if self.stem_channels == 0 || self.decoder_channels == 0 || self.head_channels == 0 {
            return Err(Error::Config("channel widths must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config(format!(
                "leaky_slope must be in [0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

/// Recurrent optimizer state: hidden map `(H, W, C)` plus iteration counter.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub h: Array3<f32>,
    pub t: usize,
}

/// Named parameter tensors plus the [`NetConfig`] they were built for.
///
/// Names ending in `running_mean` / `running_var` are batch-norm buffers:
/// persisted, but not trainable.
#[derive(Debug, Clone)]
pub struct Params<T: Scalar> {
    pub config: NetConfig,
    map: IndexMap<String, Arc<ArrayD<T>>>,
}

pub fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

impl<T: Scalar> Params<T> {
    pub fn new(config: NetConfig) -> Self {
        Params {
            config,
            map: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.map.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Arc<ArrayD<T>>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<ArrayD<T>>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Mutable access without copying when unaliased (copy-on-write when a
    /// tape still holds the value).
    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut ArrayD<T>> {
        self.map
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing parameter {name}")))
    }

    /// Batch-norm buffer as a rank-1 array.
    pub fn vec1(&self, name: &str) -> Result<Array1<T>> {
        let arr = self.get(name)?;
        arr.view()
            .into_dimensionality::<Ix1>()
            .map(|v| v.to_owned())
            .map_err(|_| Error::ShapeMismatch {
                expected: "rank-1 buffer".into(),
                got: format!("{:?}", arr.shape()),
            })
    }
}

impl Params<f32> {
    pub fn to_f64(&self) -> Params<f64> {
        let mut out = Params::new(self.config);
        for (name, arr) in &self.map {
            out.insert(name.clone(), arr.mapv(|v| v as f64));
        }
        out
    }
}

// ---- initialization ----

struct Init {
    rng: ChaCha12Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Kaiming-style fan-in scaled normal weights with zero bias.
    fn conv(&mut self, p: &mut Params<f32>, prefix: &str, cout: usize, cin: usize, k: usize) {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid normal");
        let w = Array4::from_shape_simple_fn((cout, cin, k, k), || {
            normal.sample(&mut self.rng) as f32
        });
        p.insert(format!("{prefix}/weight"), w.into_dyn());
        p.insert(format!("{prefix}/bias"), Array1::<f32>::zeros(cout).into_dyn());
    }

    fn conv_zero(&mut self, p: &mut Params<f32>, prefix: &str, cout: usize, cin: usize, k: usize) {
        p.insert(
            format!("{prefix}/weight"),
            Array4::<f32>::zeros((cout, cin, k, k)).into_dyn(),
        );
        p.insert(format!("{prefix}/bias"), Array1::<f32>::zeros(cout).into_dyn());
    }

    fn bn(&mut self, p: &mut Params<f32>, prefix: &str, c: usize) {
        p.insert(format!("{prefix}/gamma"), Array1::<f32>::ones(c).into_dyn());
        p.insert(format!("{prefix}/beta"), Array1::<f32>::zeros(c).into_dyn());
        p.insert(
            format!("{prefix}/running_mean"),
            Array1::<f32>::zeros(c).into_dyn(),
        );
        p.insert(
            format!("{prefix}/running_var"),
            Array1::<f32>::ones(c).into_dyn(),
        );
    }

    fn linear(&mut self, p: &mut Params<f32>, prefix: &str, out: usize, fan_in: usize) {
        let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid normal");
        let w = Array2::from_shape_simple_fn((out, fan_in), || normal.sample(&mut self.rng) as f32);
        p.insert(format!("{prefix}/weight"), w.into_dyn());
        p.insert(format!("{prefix}/bias"), Array1::<f32>::zeros(out).into_dyn());
    }
}

/// Initializes encoder, decoder and critic parameters.
pub fn init_stego_params(config: NetConfig, seed: u64) -> Result<Params<f32>> {
    config.validate()?;
    let mut p = Params::new(config);
    let mut init = Init::new(seed);
    let (c, s, d, hd, b) = (
        config.hidden_channels,
        config.stem_channels,
        config.decoder_channels,
        config.head_channels,
        config.bpp,
    );

    init.conv(&mut p, "encoder/extract/conv0", c, 3, 3);
    init.conv(&mut p, "encoder/extract/conv1", c, c, 3);
    init.conv(&mut p, "encoder/extract/conv2", c, c, 3);
    init.conv(&mut p, "encoder/stem_delta", s, 3, 3);
    init.conv(&mut p, "encoder/stem_grad", s, 3, 3);
    init.conv(&mut p, "encoder/stem_image", s, 3, 3);
    for gate in ["update", "reset", "cand"] {
        init.conv(&mut p, &format!("encoder/gru/{gate}"), c, c + 3 * s, 3);
    }
    init.conv(&mut p, "encoder/head/conv0", hd, c, 3);
    // Zero head output so the first update leaves the perturbation at zero.
    init.conv_zero(&mut p, "encoder/head/conv1", 3, hd, 3);

    init.conv(&mut p, "decoder/block0/conv", d, 3, 3);
    init.bn(&mut p, "decoder/block0/bn", d);
    init.conv(&mut p, "decoder/block1/conv", d, d, 3);
    init.bn(&mut p, "decoder/block1/bn", d);
    init.conv(&mut p, "decoder/block2/conv", d, d, 3);
    init.bn(&mut p, "decoder/block2/bn", d);
    init.conv(&mut p, "decoder/final", b, d, 3);

    init.conv(&mut p, "critic/block0/conv", d, 3, 3);
    init.bn(&mut p, "critic/block0/bn", d);
    init.conv(&mut p, "critic/block1/conv", d, d, 3);
    init.bn(&mut p, "critic/block1/bn", d);
    init.conv(&mut p, "critic/block2/conv", d, d, 3);
    init.bn(&mut p, "critic/block2/bn", d);

    Ok(p)
}

/// Initializes the steganalysis detector: three conv blocks, global mean
/// pooling and a linear map to two logits (cover, stego).
pub fn init_detector_params(config: NetConfig, seed: u64) -> Result<Params<f32>> {
    config.validate()?;
    let mut p = Params::new(config);
    let mut init = Init::new(seed ^ 0x5eed_de7e_c70a_11ce);
    let d = config.decoder_channels;
    init.conv(&mut p, "detector/block0/conv", d, 3, 3);
    init.bn(&mut p, "detector/block0/bn", d);
    init.conv(&mut p, "detector/block1/conv", d, d, 3);
    init.bn(&mut p, "detector/block1/bn", d);
    init.conv(&mut p, "detector/block2/conv", d, d, 3);
    init.bn(&mut p, "detector/block2/bn", d);
    init.linear(&mut p, "detector/fc", 2, d);
    Ok(p)
}

// ---- graph building ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BnMode {
    Train,
    Eval,
}

/// Batch statistics observed during a training forward pass, keyed by the
/// batch-norm prefix; the caller folds them into the running buffers.
pub(crate) type BnUpdates<T> = Vec<(String, Array1<T>, Array1<T>)>;

/// Parameter tensors bound onto a tape. Trainable prefixes become leaves,
/// everything else constants; buffers stay outside the tape.
pub(crate) struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn trainable<'a, T: Scalar>(
        &'a self,
        params: &'a Params<T>,
        prefixes: &'a [&str],
    ) -> impl Iterator<Item = (&'a str, Var)> + 'a {
        params.names().filter_map(move |name| {
            (!is_buffer(name) && prefixes.iter().any(|p| name.starts_with(p)))
                .then(|| (name, self.var(name)))
        })
    }
}

pub(crate) fn bind<T: Scalar>(
    tape: &Tape<T>,
    params: &Params<T>,
    trainable_prefixes: &[&str],
) -> Bound {
    let mut vars = IndexMap::new();
    for (name, value) in params.iter() {
        if is_buffer(name) {
            continue;
        }
        let var = if trainable_prefixes.iter().any(|p| name.starts_with(p)) {
            tape.leaf_shared(value.clone())
        } else {
            tape.constant_shared(value.clone())
        };
        vars.insert(name.to_string(), var);
    }
    Bound { vars }
}

fn slope_of<T: Scalar>(params: &Params<T>) -> T {
    T::from_f32(params.config.leaky_slope).expect("slope fits scalar")
}

/// conv 3x3 -> batch-norm -> leaky ReLU.
fn conv_block<T: Scalar>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &Params<T>,
    prefix: &str,
    x: Var,
    mode: BnMode,
    updates: &mut BnUpdates<T>,
) -> Result<Var> {
    let conv = tape.conv2d_same(
        x,
        bound.var(&format!("{prefix}/conv/weight")),
        Some(bound.var(&format!("{prefix}/conv/bias"))),
    );
    let gamma = bound.var(&format!("{prefix}/bn/gamma"));
    let beta = bound.var(&format!("{prefix}/bn/beta"));
    let eps = T::from_f64(BN_EPS).expect("eps");
    let bn = match mode {
        BnMode::Train => {
            let (y, mean, var) = tape.batchnorm_train(conv, gamma, beta, eps);
            updates.push((format!("{prefix}/bn"), mean, var));
            y
        }
        BnMode::Eval => {
            let rmean = params.vec1(&format!("{prefix}/bn/running_mean"))?;
            let rvar = params.vec1(&format!("{prefix}/bn/running_var"))?;
            tape.batchnorm_eval(conv, gamma, beta, &rmean, &rvar, eps)
        }
    };
    Ok(tape.leaky_relu(bn, slope_of(params)))
}

/// Decoder: three conv blocks, then a final 3x3 conv and sigmoid.
/// `[N,3,H,W] -> [N,B,H,W]` probabilities strictly in (0, 1).
pub(crate) fn decoder_graph<T: Scalar>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &Params<T>,
    x: Var,
    mode: BnMode,
    updates: &mut BnUpdates<T>,
) -> Result<Var> {
    let mut h = x;
    for block in ["decoder/block0", "decoder/block1", "decoder/block2"] {
        h = conv_block(tape, bound, params, block, h, mode, updates)?;
    }
    let logits = tape.conv2d_same(
        h,
        bound.var("decoder/final/weight"),
        Some(bound.var("decoder/final/bias")),
    );
    Ok(tape.sigmoid(logits))
}

/// Critic: three conv blocks, then mean pooling to one score per sample.
pub(crate) fn critic_graph<T: Scalar>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &Params<T>,
    x: Var,
    mode: BnMode,
    updates: &mut BnUpdates<T>,
) -> Result<Var> {
    let mut h = x;
    for block in ["critic/block0", "critic/block1", "critic/block2"] {
        h = conv_block(tape, bound, params, block, h, mode, updates)?;
    }
    Ok(tape.mean_per_sample(h))
}

/// Detector: three conv blocks, global mean pool, linear map to `[N,2]`
/// (cover, stego) logits.
pub(crate) fn detector_graph<T: Scalar>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &Params<T>,
    x: Var,
    mode: BnMode,
    updates: &mut BnUpdates<T>,
) -> Result<Var> {
    let mut h = x;
    for block in ["detector/block0", "detector/block1", "detector/block2"] {
        h = conv_block(tape, bound, params, block, h, mode, updates)?;
    }
    let pooled = tape.global_mean_pool(h);
    Ok(tape.linear(
        pooled,
        bound.var("detector/fc/weight"),
        bound.var("detector/fc/bias"),
    ))
}

/// Feature extractor producing the initial hidden state: a 3-layer conv
/// stack squashed through tanh so the boundedness invariant holds from t=0.
pub(crate) fn extractor_graph<T: Scalar>(tape: &Tape<T>, bound: &Bound, params: &Params<T>, x: Var) -> Var {
    let slope = slope_of(params);
    let c0 = tape.conv2d_same(
        x,
        bound.var("encoder/extract/conv0/weight"),
        Some(bound.var("encoder/extract/conv0/bias")),
    );
    let a0 = tape.leaky_relu(c0, slope);
    let c1 = tape.conv2d_same(
        a0,
        bound.var("encoder/extract/conv1/weight"),
        Some(bound.var("encoder/extract/conv1/bias")),
    );
    let a1 = tape.leaky_relu(c1, slope);
    let c2 = tape.conv2d_same(
        a1,
        bound.var("encoder/extract/conv2/weight"),
        Some(bound.var("encoder/extract/conv2/bias")),
    );
    tape.tanh(c2)
}

/// One stem: conv 3x3 + leaky ReLU.
pub(crate) fn stem_graph<T: Scalar>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &Params<T>,
    stem: &str,
    x: Var,
) -> Var {
    let c = tape.conv2d_same(
        x,
        bound.var(&format!("encoder/{stem}/weight")),
        Some(bound.var(&format!("encoder/{stem}/bias"))),
    );
    tape.leaky_relu(c, slope_of(params))
}

/// The gated recurrent update on spatial maps:
/// `z = sig(conv([h, x]; Wz))`, `r = sig(conv([h, x]; Wr))`,
/// `cand = tanh(conv([r*h, x]; Wh))`, `h' = (1-z)*h + z*cand`.
pub(crate) fn gru_graph<T: Scalar>(tape: &Tape<T>, bound: &Bound, h: Var, x: Var) -> Var {
    let hx = tape.concat_channels(&[h, x]);
    let z = tape.sigmoid(tape.conv2d_same(
        hx,
        bound.var("encoder/gru/update/weight"),
        Some(bound.var("encoder/gru/update/bias")),
    ));
    let r = tape.sigmoid(tape.conv2d_same(
        hx,
        bound.var("encoder/gru/reset/weight"),
        Some(bound.var("encoder/gru/reset/bias")),
    ));
    let rh = tape.mul(r, h);
    let rhx = tape.concat_channels(&[rh, x]);
    let cand = tape.tanh(tape.conv2d_same(
        rhx,
        bound.var("encoder/gru/cand/weight"),
        Some(bound.var("encoder/gru/cand/bias")),
    ));
    let keep = tape.mul(tape.one_minus(z), h);
    let take = tape.mul(z, cand);
    tape.add(keep, take)
}

/// Projection head mapping the hidden state to a 3-channel update, with no
/// output nonlinearity.
pub(crate) fn head_graph<T: Scalar>(tape: &Tape<T>, bound: &Bound, params: &Params<T>, h: Var) -> Var {
    let c0 = tape.conv2d_same(
        h,
        bound.var("encoder/head/conv0/weight"),
        Some(bound.var("encoder/head/conv0/bias")),
    );
    let a0 = tape.leaky_relu(c0, slope_of(params));
    tape.conv2d_same(
        a0,
        bound.var("encoder/head/conv1/weight"),
        Some(bound.var("encoder/head/conv1/bias")),
    )
}

/// One full update-cell step on an existing tape. `img_feat` is the image
/// stem output, which is constant across iterations and computed once.
pub(crate) fn encoder_step_graph<T: Scalar>(
    tape: &Tape<T>,
    bound: &Bound,
    params: &Params<T>,
    h: Var,
    delta: Var,
    grad: Var,
    img_feat: Var,
) -> (Var, Var) {
    let fd = stem_graph(tape, bound, params, "stem_delta", delta);
    let fg = stem_graph(tape, bound, params, "stem_grad", grad);
    let x_t = tape.concat_channels(&[fd, fg, img_feat]);
    let h_new = gru_graph(tape, bound, h, x_t);
    let g = head_graph(tape, bound, params, h_new);
    (h_new, g)
}

// ---- layout helpers ----

pub(crate) fn hwc_to_nchw(x: &Array3<f32>) -> Array4<f32> {
    let (h, w, c) = x.dim();
    let mut out = Array4::<f32>::zeros((1, c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[[0, ch, y, xx]] = x[[y, xx, ch]];
            }
        }
    }
    out
}

pub(crate) fn nchw_to_hwc(x: &ArrayD<f32>) -> Array3<f32> {
    let v = x
        .view()
        .into_dimensionality::<Ix4>()
        .expect("expected [1,C,H,W]");
    let (n, c, h, w) = v.dim();
    assert_eq!(n, 1, "single-image layout expected");
    let mut out = Array3::<f32>::zeros((h, w, c));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[[y, xx, ch]] = v[[0, ch, y, xx]];
            }
        }
    }
    out
}

/// Stacks same-sized `(H, W, C)` tensors into `[N,C,H,W]`.
pub(crate) fn stack_hwc(items: &[&Array3<f32>]) -> Array4<f32> {
    assert!(!items.is_empty());
    let (h, w, c) = items[0].dim();
    let mut out = Array4::<f32>::zeros((items.len(), c, h, w));
    for (i, item) in items.iter().enumerate() {
        assert_eq!(item.dim(), (h, w, c), "stack_hwc: inhomogeneous shapes");
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[[i, ch, y, xx]] = item[[y, xx, ch]];
                }
            }
        }
    }
    out
}

// ---- public single-image operations ----

/// Decoder probabilities for one image, `(H, W, B)`, strictly inside (0, 1).
pub fn decoder_forward(params: &Params<f32>, image: &ImageTensor) -> Result<Array3<f32>> {
    let w0 = params.get("decoder/block0/conv/weight")?;
    if w0.shape()[1] != 3 {
        return Err(Error::ShapeMismatch {
            expected: "decoder input of 3 channels".into(),
            got: format!("{}", w0.shape()[1]),
        });
    }
    let tape = Tape::<f32>::new();
    let bound = bind(&tape, params, &[]);
    let x = tape.constant(hwc_to_nchw(image.values()).into_dyn());
    let mut updates = BnUpdates::new();
    let probs = decoder_graph(&tape, &bound, params, x, BnMode::Eval, &mut updates)?;
    Ok(nchw_to_hwc(&tape.value(probs)))
}

/// Rounds probabilities to bits; exactly 0.5 rounds to 0.
pub fn decode_bits(probs: &Array3<f32>) -> MessageTensor {
    let bits = probs.mapv(|p| u8::from(p > 0.5));
    MessageTensor::new(bits).expect("thresholded bits are binary")
}

/// Critic score of one image (lower = more natural under the training
/// convention).
pub fn critic_forward(params: &Params<f32>, image: &ImageTensor) -> Result<f32> {
    let tape = Tape::<f32>::new();
    let bound = bind(&tape, params, &[]);
    let x = tape.constant(hwc_to_nchw(image.values()).into_dyn());
    let mut updates = BnUpdates::new();
    let score = critic_graph(&tape, &bound, params, x, BnMode::Eval, &mut updates)?;
    Ok(tape.value(score)[[0]])
}

/// Initial encoder state from the feature extractor; every element of `h`
/// lies in (-1, 1) because of the tanh.
pub fn init_state(params: &Params<f32>, image: &ImageTensor) -> Result<EncoderState> {
    let tape = Tape::<f32>::new();
    let bound = bind(&tape, params, &[]);
    let x = tape.constant(hwc_to_nchw(image.values()).into_dyn());
    let h = extractor_graph(&tape, &bound, params, x);
    Ok(EncoderState {
        h: nchw_to_hwc(&tape.value(h)),
        t: 0,
    })
}

/// One bare GRU update on `(H, W, C)` maps.
pub fn gru_update(
    params: &Params<f32>,
    h_prev: &Array3<f32>,
    x_t: &Array3<f32>,
) -> Result<Array3<f32>> {
    if h_prev.dim().0 != x_t.dim().0 || h_prev.dim().1 != x_t.dim().1 {
        return Err(Error::ShapeMismatch {
            expected: format!("spatial dims {:?}", (h_prev.dim().0, h_prev.dim().1)),
            got: format!("{:?}", (x_t.dim().0, x_t.dim().1)),
        });
    }
    let tape = Tape::<f32>::new();
    let bound = bind(&tape, params, &[]);
    let h = tape.constant(hwc_to_nchw(h_prev).into_dyn());
    let x = tape.constant(hwc_to_nchw(x_t).into_dyn());
    let h_new = gru_graph(&tape, &bound, h, x);
    Ok(nchw_to_hwc(&tape.value(h_new)))
}

/// One full learned-optimizer step: stems, GRU, projection head.
///
/// `grad` is the objective gradient with respect to the perturbation at
/// `delta_prev`, shape `(H, W, 3)` like `delta_prev` itself.
pub fn update_step(
    params: &Params<f32>,
    state: &EncoderState,
    image: &ImageTensor,
    delta_prev: &Array3<f32>,
    grad: &Array3<f32>,
) -> Result<(EncoderState, Array3<f32>)> {
    let (h, w) = image.dims();
    for (name, arr) in [("delta", delta_prev), ("grad", grad)] {
        if arr.dim() != (h, w, 3) {
            return Err(Error::ShapeMismatch {
                expected: format!("({h}, {w}, 3)"),
                got: format!("{name}: {:?}", arr.dim()),
            });
        }
    }
    if state.h.dim().0 != h || state.h.dim().1 != w {
        return Err(Error::ShapeMismatch {
            expected: format!("hidden state ({h}, {w}, C)"),
            got: format!("{:?}", state.h.dim()),
        });
    }
    let tape = Tape::<f32>::new();
    let bound = bind(&tape, params, &[]);
    let hv = tape.constant(hwc_to_nchw(&state.h).into_dyn());
    let dv = tape.constant(hwc_to_nchw(delta_prev).into_dyn());
    let gv = tape.constant(hwc_to_nchw(grad).into_dyn());
    let xv = tape.constant(hwc_to_nchw(image.values()).into_dyn());
    let img_feat = stem_graph(&tape, &bound, params, "stem_image", xv);
    let (h_new, g) = encoder_step_graph(&tape, &bound, params, hv, dv, gv, img_feat);
    Ok((
        EncoderState {
            h: nchw_to_hwc(&tape.value(h_new)),
            t: state.t + 1,
        },
        nchw_to_hwc(&tape.value(g)),
    ))
}
