//! End-to-end training: the unrolled encoder-decoder update alternating with
//! a weight-clipped critic update, plus checkpointing and the flat
//! `key = value` config format.
//!
//! Per batch: fresh random messages, a T-step unroll producing box-projected
//! intermediate images (compressed through the straight-through JPEG layer
//! before decoding when enabled), one critic update on the detached final
//! image, then one encoder+decoder update of the step-decayed aggregate
//! loss. The gradient fed to the update cell each step is treated as a
//! constant input (first-order unroll).

use crate::archive::{load_archive, save_archive};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::imageio::load_image_square;
use crate::jpeg::{jpeg_layer, JpegConfig};
use crate::losses::{LossWeights, PROB_EPS};
use crate::nets::{
    bind, critic_graph, decoder_graph, encoder_step_graph, extractor_graph, is_buffer, stem_graph,
    BnMode, BnUpdates, NetConfig, Params, BN_MOMENTUM,
};
use indexmap::IndexMap;
use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use std::path::{Path, PathBuf};

/// Critic weights are clamped to this magnitude after every critic update.
pub const CRITIC_CLIP: f32 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    /// Unrolled optimizer steps per batch (T).
    pub steps: usize,
    /// Step size of the unrolled updates.
    pub eta: f32,
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam learning rate for all parameter groups.
    pub learning_rate: f32,
    pub seed: u64,
    /// Square side images are resized to for batching.
    pub crop: usize,
    pub jpeg: JpegConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            steps: 15,
            eta: 1.0,
            weights: LossWeights::default(),
            epochs: 20,
            batch_size: 4,
            learning_rate: 1e-4,
            seed: 0,
            crop: 128,
            jpeg: JpegConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights.validate()?;
        self.jpeg.validate()?;
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config("eta must be > 0".into()));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.crop < crate::imageio::MIN_SIDE {
            return Err(Error::Config(format!(
                "crop must be >= {}",
                crate::imageio::MIN_SIDE
            )));
        }
        Ok(())
    }
}

/// `key = value` config file contents: training settings plus dataset
/// location and split sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub val_count: usize,
    pub train_count: usize,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            train: TrainConfig::default(),
            data_dir: None,
            val_count: 1000,
            train_count: 1000,
        }
    }
}

pub fn parse_config_str(text: &str) -> Result<FileConfig> {
    let mut cfg = FileConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        set_key(&mut cfg, key, value)?;
    }
    Ok(cfg)
}

pub fn parse_config_file(path: &Path) -> Result<FileConfig> {
    parse_config_str(&std::fs::read_to_string(path)?)
}

/// Applies one `key = value` assignment; CLI overrides reuse this.
pub fn set_key(cfg: &mut FileConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse::<T>()
            .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
    }
    match key {
        "steps" => cfg.train.steps = num(key, value)?,
        "eta" => cfg.train.eta = num(key, value)?,
        "gamma" => cfg.train.weights.gamma = num(key, value)?,
        "lambda" => cfg.train.weights.lambda = num(key, value)?,
        "mu" => cfg.train.weights.mu = num(key, value)?,
        "epochs" => cfg.train.epochs = num(key, value)?,
        "batch_size" => cfg.train.batch_size = num(key, value)?,
        "learning_rate" => cfg.train.learning_rate = num(key, value)?,
        "seed" => cfg.train.seed = num(key, value)?,
        "bpp" => cfg.train.net.bpp = num(key, value)?,
        "crop" => cfg.train.crop = num(key, value)?,
        "hidden_channels" => cfg.train.net.hidden_channels = num(key, value)?,
        "stem_channels" => cfg.train.net.stem_channels = num(key, value)?,
        "decoder_channels" => cfg.train.net.decoder_channels = num(key, value)?,
        "head_channels" => cfg.train.net.head_channels = num(key, value)?,
        "leaky_slope" => cfg.train.net.leaky_slope = num(key, value)?,
        "jpeg_enabled" => cfg.train.jpeg.enabled = num(key, value)?,
        "jpeg_quality" => cfg.train.jpeg.quality = num(key, value)?,
        "data_dir" => cfg.data_dir = Some(PathBuf::from(value)),
        "val_count" => cfg.val_count = num(key, value)?,
        "train_count" => cfg.train_count = num(key, value)?,
        other => return Err(Error::Config(format!("unknown key `{other}`"))),
    }
    Ok(())
}

// ---- optimizer ----

/// First-order adaptive-moment parameter updates.
pub(crate) struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: IndexMap<String, ArrayD<f32>>,
    v: IndexMap<String, ArrayD<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params<f32>, grads: &[(String, ArrayD<f32>)]) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            azip!((m in &mut *m, &g in g) *m = 0.9 * *m + 0.1 * g);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            azip!((v in &mut *v, &g in g) *v = 0.999 * *v + 0.001 * g * g);
            let m = self.m.get(name).expect("just inserted");
            let v = self.v.get(name).expect("just inserted");
            let p = params.tensor_mut(name)?;
            let (lr, eps) = (self.lr, self.eps);
            azip!((p in p, &m in m, &v in v) {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// Clamps every trainable tensor under `prefix` to `[-bound, bound]`
/// (the critic clipping contract).
pub fn clamp_component(params: &mut Params<f32>, prefix: &str, bound: f32) -> Result<()> {
    let names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with(prefix) && !is_buffer(n))
        .map(str::to_string)
        .collect();
    for name in names {
        params
            .tensor_mut(&name)?
            .mapv_inplace(|v| v.clamp(-bound, bound));
    }
    Ok(())
}

pub(crate) fn apply_bn_updates(params: &mut Params<f32>, updates: &BnUpdates<f32>) -> Result<()> {
    let momentum = BN_MOMENTUM as f32;
    for (prefix, mean, var) in updates {
        let rm = params.tensor_mut(&format!("{prefix}/running_mean"))?;
        azip!((r in rm, &m in &mean.view().into_dyn()) *r = (1.0 - momentum) * *r + momentum * m);
        let rv = params.tensor_mut(&format!("{prefix}/running_var"))?;
        azip!((r in rv, &v in &var.view().into_dyn()) *r = (1.0 - momentum) * *r + momentum * v);
    }
    Ok(())
}

// ---- training ----

/// Loss components of one encoder-decoder update (already decay-weighted).
#[derive(Debug, Clone, Copy)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    pub acc: f64,
    pub qua: f64,
    pub critic: f64,
}

/// Bernoulli(0.5) messages for a batch, drawn from the shared seeded stream
/// so every batch sees fresh bits.
pub(crate) fn sample_batch_messages(
    rng: &mut ChaCha12Rng,
    n: usize,
    b: usize,
    h: usize,
    w: usize,
) -> Array4<f32> {
    Array4::from_shape_simple_fn((n, b, h, w), || f32::from(rng.random::<bool>()))
}

struct UnrollOutcome {
    loss: StepLoss,
    grads: Vec<(String, ArrayD<f32>)>,
    bn_updates: BnUpdates<f32>,
    x_tilde_last: ArrayD<f32>,
}

/// Gradient of the per-step objective `acc + lambda*qua` with respect to the
/// stego image, evaluated on its own tape and returned as a plain array
/// (the unroll consumes it as a constant input).
fn inner_gradient(
    params: &Params<f32>,
    x_tilde: &ArrayD<f32>,
    cover: &ArrayD<f32>,
    msgs: &ArrayD<f32>,
    lambda: f32,
    jpeg: Option<u8>,
) -> Result<ArrayD<f32>> {
    let tape = Tape::<f32>::new();
    let bound = bind(&tape, params, &[]);
    let xv = tape.leaf(x_tilde.clone());
    let cv = tape.constant(cover.clone());
    let mut updates = BnUpdates::new();
    let (obj, _) = crate::losses::objective_graph(
        &tape,
        &bound,
        params,
        xv,
        cv,
        msgs,
        lambda,
        BnMode::Train,
        &mut updates,
        jpeg,
        None,
    )?;
    let grads = tape.backward(obj);
    Ok(grads.wrt(xv).expect("objective depends on x").clone())
}

/// Builds the unrolled graph for one batch and backpropagates the aggregate
/// loss; parameters are not modified.
fn unroll_and_grads(
    params: &Params<f32>,
    cfg: &TrainConfig,
    step_index: usize,
    x: &Array4<f32>,
    msgs: &Array4<f32>,
) -> Result<UnrollOutcome> {
    let tape = Tape::<f32>::new();
    let bound = bind(&tape, params, &["encoder/", "decoder/"]);
    let x_dyn = x.clone().into_dyn();
    let xv = tape.constant(x_dyn.clone());
    let msgs_dyn = msgs.clone().into_dyn();
    let jpeg = cfg.jpeg.active_quality();

    let lo = x_dyn.mapv(|v| -v);
    let hi = x_dyn.mapv(|v| 1.0 - v);

    let mut bn_updates = BnUpdates::new();
    let mut critic_scratch = BnUpdates::new();
    let mut h = extractor_graph(&tape, &bound, params, xv);
    let img_feat = stem_graph(&tape, &bound, params, "stem_image", xv);
    let mut delta = tape.constant(ArrayD::zeros(x_dyn.raw_dim()));
    let eps = PROB_EPS as f32;

    let mut per_step = Vec::with_capacity(cfg.steps);
    let mut x_tilde_last = None;
    for _ in 0..cfg.steps {
        let grad = inner_gradient(
            params,
            &(&*tape.value(delta) + &x_dyn),
            &x_dyn,
            &msgs_dyn,
            cfg.weights.lambda,
            jpeg,
        )?;
        let gv = tape.constant(grad);
        let (h_new, g) = encoder_step_graph(&tape, &bound, params, h, delta, gv, img_feat);
        h = h_new;
        delta = tape.clamp_bounds(tape.add(delta, tape.scale(g, cfg.eta)), &lo, &hi);
        let x_tilde = tape.add(xv, delta);
        let dec_in = match jpeg {
            Some(q) => jpeg_layer(&tape, x_tilde, q),
            None => x_tilde,
        };
        let probs = decoder_graph(&tape, &bound, params, dec_in, BnMode::Train, &mut bn_updates)?;
        let acc = tape.bce_mean(probs, &msgs_dyn, eps);
        let qua = tape.mse_mean(x_tilde, xv);
        let crit_scores = critic_graph(
            &tape,
            &bound,
            params,
            x_tilde,
            BnMode::Train,
            &mut critic_scratch,
        )?;
        let crit = tape.mean_all(crit_scores);
        per_step.push((acc, qua, crit));
        x_tilde_last = Some(x_tilde);
    }
    // Critic batch statistics are only folded into the running buffers
    // during the critic's own update.
    critic_scratch.clear();

    let mut total = None;
    let (mut acc_sum, mut qua_sum, mut crit_sum) = (0.0f64, 0.0f64, 0.0f64);
    for (i, (acc, qua, crit)) in per_step.iter().enumerate() {
        let w = cfg.weights.gamma.powi((cfg.steps - 1 - i) as i32);
        acc_sum += w as f64 * tape.scalar(*acc) as f64;
        qua_sum += (w * cfg.weights.lambda) as f64 * tape.scalar(*qua) as f64;
        crit_sum += (w * cfg.weights.mu) as f64 * tape.scalar(*crit) as f64;
        let term = tape.add(
            *acc,
            tape.add(
                tape.scale(*qua, cfg.weights.lambda),
                tape.scale(*crit, cfg.weights.mu),
            ),
        );
        let weighted = tape.scale(term, w);
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted),
        });
    }
    let total = total.expect("steps >= 1");
    let total_val = tape.scalar(total) as f64;
    if !total_val.is_finite() {
        return Err(Error::DivergenceDetected { step: step_index });
    }

    let grads = tape.backward(total);
    let mut grad_list = Vec::new();
    for (name, var) in bound.trainable(params, &["encoder/", "decoder/"]) {
        if let Some(g) = grads.wrt(var) {
            grad_list.push((name.to_string(), g.clone()));
        }
    }

    Ok(UnrollOutcome {
        loss: StepLoss {
            step: step_index,
            total: total_val,
            acc: acc_sum,
            qua: qua_sum,
            critic: crit_sum,
        },
        grads: grad_list,
        bn_updates,
        x_tilde_last: (*tape.value(x_tilde_last.expect("steps >= 1"))).clone(),
    })
}

/// One Wasserstein-style critic update on a detached batch of stego images:
/// minimizes `mean critic(X) - mean critic(X~)`, then clamps all critic
/// parameters to `[-CRITIC_CLIP, CRITIC_CLIP]`.
pub(crate) fn critic_step(
    params: &mut Params<f32>,
    adam: &mut Adam,
    covers: &ArrayD<f32>,
    stegos: &ArrayD<f32>,
) -> Result<f64> {
    let tape = Tape::<f32>::new();
    let bound = bind(&tape, params, &["critic/"]);
    let xv = tape.constant(covers.clone());
    let sv = tape.constant(stegos.clone());
    let mut updates = BnUpdates::new();
    let s_cover = critic_graph(&tape, &bound, params, xv, BnMode::Train, &mut updates)?;
    let s_stego = critic_graph(&tape, &bound, params, sv, BnMode::Train, &mut updates)?;
    let loss = tape.sub(tape.mean_all(s_cover), tape.mean_all(s_stego));
    let loss_val = tape.scalar(loss) as f64;
    let grads = tape.backward(loss);
    let mut grad_list = Vec::new();
    for (name, var) in bound.trainable(params, &["critic/"]) {
        if let Some(g) = grads.wrt(var) {
            grad_list.push((name.to_string(), g.clone()));
        }
    }
    adam.step(params, &grad_list)?;
    clamp_component(params, "critic/", CRITIC_CLIP)?;
    apply_bn_updates(params, &updates)?;
    Ok(loss_val)
}

/// Trains encoder, decoder and critic on a directory-derived image list.
///
/// `init` resumes from existing parameters (their config wins); `on_epoch`
/// runs after every epoch, e.g. to write checkpoints. Deterministic for a
/// fixed seed up to floating-point reduction order.
pub fn train(
    dataset: &[PathBuf],
    cfg: &TrainConfig,
    init: Option<Params<f32>>,
    on_epoch: &mut dyn FnMut(usize, &Params<f32>) -> Result<()>,
) -> Result<(Params<f32>, Vec<StepLoss>)> {
    crate::tune_allocator();
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let images: Vec<Array3<f32>> = dataset
        .iter()
        .map(|p| Ok(load_image_square(p, cfg.crop)?.into_values()))
        .collect::<Result<_>>()?;

    let mut params = match init {
        Some(p) => p,
        None => crate::nets::init_stego_params(cfg.net, cfg.seed)?,
    };
    let bpp = params.config.bpp;
    let mut adam_coders = Adam::new(cfg.learning_rate);
    let mut adam_critic = Adam::new(cfg.learning_rate);
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x5077));
    let mut msg_rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0xb175));

    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let views: Vec<&Array3<f32>> = chunk.iter().map(|&i| &images[i]).collect();
            let x = crate::nets::stack_hwc(&views);
            let (n, _, h, w) = x.dim();
            let msgs = sample_batch_messages(&mut msg_rng, n, bpp, h, w);

            let outcome = unroll_and_grads(&params, cfg, step, &x, &msgs)?;
            critic_step(
                &mut params,
                &mut adam_critic,
                &x.clone().into_dyn(),
                &outcome.x_tilde_last,
            )?;
            adam_coders.step(&mut params, &outcome.grads)?;
            apply_bn_updates(&mut params, &outcome.bn_updates)?;
            log.push(outcome.loss);
        }
        on_epoch(epoch, &params)?;
    }
    Ok((params, log))
}

/// Writes a checkpoint file; [`load_checkpoint`] restores it bit-exactly.
pub fn save_checkpoint(params: &Params<f32>, path: &Path) -> Result<()> {
    save_archive(params, path)
}

pub fn load_checkpoint(path: &Path) -> Result<Params<f32>> {
    load_archive(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::{save_png, ImageTensor};
    use crate::nets::init_stego_params;
    use tempfile::tempdir;

    fn small_config() -> TrainConfig {
        TrainConfig {
            net: NetConfig {
                hidden_channels: 8,
                stem_channels: 2,
                decoder_channels: 4,
                head_channels: 4,
                bpp: 1,
                leaky_slope: 0.2,
            },
            steps: 2,
            eta: 1.0,
            epochs: 1,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 1,
            crop: 16,
            ..TrainConfig::default()
        }
    }

    fn write_images(dir: &Path, count: usize) -> Vec<PathBuf> {
        (0..count)
            .map(|i| {
                let path = dir.join(format!("img{i:02}.png"));
                let values = Array3::from_shape_fn((16, 16, 3), |(y, x, c)| {
                    (((y * 13 + x * 7 + c * 5 + i * 11) % 97) as f32) / 96.0
                });
                save_png(&ImageTensor::new(values).unwrap(), &path).unwrap();
                path
            })
            .collect()
    }

    #[test]
    fn config_parsing_and_unknown_keys() {
        let cfg = parse_config_str(
            "# comment\nsteps = 7\ngamma = 0.5\nbpp = 2\ndata_dir = /tmp/imgs\nbatch_size = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.weights.gamma, 0.5);
        assert_eq!(cfg.train.net.bpp, 2);
        assert_eq!(cfg.data_dir.as_deref(), Some(Path::new("/tmp/imgs")));
        assert_eq!(cfg.train.batch_size, 3);

        let err = parse_config_str("bogus_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        let err = parse_config_str("steps = many\n").unwrap_err();
        assert!(err.to_string().contains("steps"), "{err}");
    }

    #[test]
    fn eq2_weight_of_first_step_matches_closed_form() {
        // T = 15, gamma = 0.8: the first step's weight is 0.8^14.
        let w = 0.8f64.powi(14);
        assert!((w - 0.043980465111040006).abs() < 1e-15);
        let cfg = TrainConfig::default();
        assert_eq!(cfg.steps, 15);
        assert_eq!(cfg.weights.gamma, 0.8);
        assert!(((cfg.weights.gamma as f64).powi(14) - w).abs() < 1e-8);
    }

    #[test]
    fn one_epoch_counts_updates() {
        let dir = tempdir().unwrap();
        let paths = write_images(dir.path(), 4);
        let cfg = small_config();
        let mut epochs_seen = 0;
        let (_, log) = train(&paths, &cfg, None, &mut |_, _| {
            epochs_seen += 1;
            Ok(())
        })
        .unwrap();
        // 4 images, batch 2 -> exactly 2 batches, each one critic update and
        // one encoder-decoder update.
        assert_eq!(log.len(), 2);
        assert_eq!(epochs_seen, 1);
        assert_eq!(log[0].step, 1);
        assert_eq!(log[1].step, 2);
    }

    #[test]
    fn messages_are_resampled_every_batch() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = sample_batch_messages(&mut rng, 2, 1, 8, 8);
        let b = sample_batch_messages(&mut rng, 2, 1, 8, 8);
        assert_ne!(a, b, "the stream must advance between batches");
        // Same seed restarts identically.
        let mut rng2 = ChaCha12Rng::seed_from_u64(3);
        let a2 = sample_batch_messages(&mut rng2, 2, 1, 8, 8);
        assert_eq!(a, a2);
    }

    #[test]
    fn critic_step_clamps_and_leaves_coders_untouched() {
        let cfg = small_config();
        let mut params = init_stego_params(cfg.net, 5).unwrap();
        let coder_snapshot: Vec<(String, ArrayD<f32>)> = params
            .iter()
            .filter(|(n, _)| n.starts_with("encoder/") || n.starts_with("decoder/"))
            .map(|(n, a)| (n.to_string(), (**a).clone()))
            .collect();

        let mut adam = Adam::new(1e-3);
        let covers = Array4::<f32>::from_elem((2, 3, 16, 16), 0.4).into_dyn();
        let stegos = Array4::<f32>::from_elem((2, 3, 16, 16), 0.6).into_dyn();
        critic_step(&mut params, &mut adam, &covers, &stegos).unwrap();

        for (name, arr) in params.iter() {
            if name.starts_with("critic/") && !is_buffer(name) {
                assert!(
                    arr.iter().all(|v| v.abs() <= CRITIC_CLIP + 1e-9),
                    "{name} not clamped"
                );
            }
        }
        for (name, before) in &coder_snapshot {
            let after = params.get(name).unwrap();
            assert!(
                before.iter().zip(after.iter()).all(|(a, b)| a == b),
                "{name} changed during critic update"
            );
        }
    }

    #[test]
    fn critic_loss_decreases_over_ten_steps() {
        let cfg = small_config();
        let mut params = init_stego_params(cfg.net, 6).unwrap();
        let mut adam = Adam::new(1e-3);
        let covers = Array4::from_shape_fn((2, 3, 16, 16), |(n, c, y, x)| {
            ((n + c + y + x) % 11) as f32 / 11.0
        })
        .into_dyn();
        let stegos = covers.mapv(|v| (v + 0.3).min(1.0));
        let mut losses = Vec::new();
        for _ in 0..10 {
            losses.push(critic_step(&mut params, &mut adam, &covers, &stegos).unwrap());
        }
        assert!(
            losses[9] < losses[0],
            "critic did not improve: {losses:?}"
        );
    }

    #[test]
    fn coders_update_leaves_critic_untouched() {
        let dir = tempdir().unwrap();
        let paths = write_images(dir.path(), 2);
        let cfg = small_config();
        let params0 = init_stego_params(cfg.net, 7).unwrap();
        let critic_before: Vec<(String, ArrayD<f32>)> = params0
            .iter()
            .filter(|(n, _)| n.starts_with("critic/"))
            .map(|(n, a)| (n.to_string(), (**a).clone()))
            .collect();

        // Zero critic learning by running only the coder update: reuse the
        // internals directly.
        let images: Vec<Array3<f32>> = paths
            .iter()
            .map(|p| load_image_square(p, 16).unwrap().into_values())
            .collect();
        let views: Vec<&Array3<f32>> = images.iter().collect();
        let x = crate::nets::stack_hwc(&views);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let msgs = sample_batch_messages(&mut rng, 2, 1, 16, 16);
        let outcome = unroll_and_grads(&params0, &cfg, 1, &x, &msgs).unwrap();
        let mut params = params0.clone();
        let mut adam = Adam::new(1e-3);
        adam.step(&mut params, &outcome.grads).unwrap();

        for (name, before) in &critic_before {
            let after = params.get(name).unwrap();
            assert!(
                before.iter().zip(after.iter()).all(|(a, b)| a == b),
                "{name} changed during coder update"
            );
        }
        // And the coder update did change something.
        let w_before = params0.get("decoder/final/weight").unwrap();
        let w_after = params.get("decoder/final/weight").unwrap();
        assert!(w_before.iter().zip(w_after.iter()).any(|(a, b)| a != b));
    }

    #[test]
    fn divergence_is_detected_from_poisoned_init() {
        let dir = tempdir().unwrap();
        let paths = write_images(dir.path(), 2);
        let cfg = small_config();
        let mut params = init_stego_params(cfg.net, 8).unwrap();
        params
            .tensor_mut("decoder/final/bias")
            .unwrap()
            .fill(f32::NAN);
        let err = train(&paths, &cfg, Some(params), &mut |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::DivergenceDetected { step: 1 }));
    }

    #[test]
    fn training_loss_trends_down_on_a_tiny_run() {
        let dir = tempdir().unwrap();
        let paths = write_images(dir.path(), 4);
        let mut cfg = small_config();
        cfg.epochs = 30; // 2 batches each -> 60 updates
        cfg.learning_rate = 2e-3;
        let (_, log) = train(&paths, &cfg, None, &mut |_, _| Ok(())).unwrap();
        assert_eq!(log.len(), 60);
        let early: f64 = log[..5].iter().map(|l| l.total).sum::<f64>() / 5.0;
        let late: f64 = log[log.len() - 10..].iter().map(|l| l.total).sum::<f64>() / 10.0;
        assert!(
            late < early,
            "loss did not decrease: early {early}, late {late}"
        );
    }

    #[test]
    fn checkpoint_roundtrip_via_train_api() {
        let dir = tempdir().unwrap();
        let cfg = small_config();
        let params = init_stego_params(cfg.net, 9).unwrap();
        let path = dir.path().join("ck.liso");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), params.len());
        for (name, arr) in params.iter() {
            assert_eq!(&**loaded.get(name).unwrap(), &**arr, "{name}");
        }
    }
}
