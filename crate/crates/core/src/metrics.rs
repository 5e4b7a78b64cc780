//! Image-quality and recovery metrics plus the evaluation harness that
//! produces per-mode summary rows (error rate, PSNR, SSIM, iterations,
//! seconds).

use crate::bitstream::{error_rate, sample_random_message};
use crate::error::{Error, Result};
use crate::imageio::{load_image, load_image_square, quantize, save_jpeg, save_png, ImageTensor};
use crate::nets::{decode_bits, decoder_forward, Params};
use crate::optim::{
    lbfgs_optimize, liso_encode, liso_refine_lbfgs, pgd_optimize, LbfgsConfig, OptimizeConfig,
    PgdConfig,
};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Peak signal-to-noise ratio in dB at unit peak; identical images report
/// positive infinity (serialized as `inf`).
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.dims()),
            got: format!("{:?}", b.dims()),
        });
    }
    let n = a.values().len() as f64;
    let mse: f64 = a
        .values()
        .iter()
        .zip(b.values().iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Single-scale SSIM with the reference 11x11 Gaussian window (sigma 1.5)
/// and constants `C1 = 0.01^2`, `C2 = 0.03^2` at unit dynamic range, computed
/// over fully interior windows per channel and averaged.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.dims()),
            got: format!("{:?}", b.dims()),
        });
    }
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall {
            h,
            w,
            min: SSIM_WINDOW,
        });
    }
    let win = gaussian_window();
    let va = a.values();
    let vb = b.values();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ch in 0..3 {
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let (mut m1, mut m2) = (0.0f64, 0.0f64);
                let (mut s11, mut s22, mut s12) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wgt = win[i * SSIM_WINDOW + j];
                        let p = va[[y0 + i, x0 + j, ch]] as f64;
                        let q = vb[[y0 + i, x0 + j, ch]] as f64;
                        m1 += wgt * p;
                        m2 += wgt * q;
                        s11 += wgt * p * p;
                        s22 += wgt * q * q;
                        s12 += wgt * p * q;
                    }
                }
                let v1 = s11 - m1 * m1;
                let v2 = s22 - m2 * m2;
                let cov = s12 - m1 * m2;
                let num = (2.0 * m1 * m2 + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (m1 * m1 + m2 * m2 + SSIM_C1) * (v1 + v2 + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Encoding pipelines compared by [`evaluate`] and the bench command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncodeMode {
    Liso,
    LisoLbfgs,
    Pgd,
    Lbfgs,
}

impl EncodeMode {
    pub const ALL: [EncodeMode; 4] = [
        EncodeMode::Liso,
        EncodeMode::LisoLbfgs,
        EncodeMode::Pgd,
        EncodeMode::Lbfgs,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EncodeMode::Liso => "liso",
            EncodeMode::LisoLbfgs => "liso+lbfgs",
            EncodeMode::Pgd => "pgd",
            EncodeMode::Lbfgs => "lbfgs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "liso" => Ok(EncodeMode::Liso),
            "liso+lbfgs" | "liso-lbfgs" => Ok(EncodeMode::LisoLbfgs),
            "pgd" => Ok(EncodeMode::Pgd),
            "lbfgs" => Ok(EncodeMode::Lbfgs),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}`; valid names: liso, liso+lbfgs, pgd, lbfgs"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Learned-encoder settings; its `jpeg` field also selects the stored
    /// file format (JPEG at that quality instead of PNG).
    pub opt: OptimizeConfig,
    /// L-BFGS budget, both for refinement and the from-scratch mode.
    pub lbfgs_steps: usize,
    pub pgd_steps: usize,
    pub pgd_lr: f32,
    pub seed: u64,
    /// Resize loaded images to this square side first.
    pub resize: Option<usize>,
    /// Directory for the stego files; a temp dir when absent.
    pub out_dir: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            opt: OptimizeConfig::default(),
            lbfgs_steps: 100,
            pgd_steps: 50,
            pgd_lr: 0.01,
            seed: 0,
            resize: None,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub image: String,
    pub mode: EncodeMode,
    pub error_rate: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub iterations: usize,
    pub seconds: f64,
}

/// Per-image, per-mode evaluation results.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub rows: Vec<EvalRow>,
}

impl Report {
    fn rows_of(&self, mode: EncodeMode) -> impl Iterator<Item = &EvalRow> {
        self.rows.iter().filter(move |r| r.mode == mode)
    }

    fn mean_of(&self, mode: EncodeMode, f: impl Fn(&EvalRow) -> f64) -> f64 {
        let vals: Vec<f64> = self.rows_of(mode).map(f).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn mean_error(&self, mode: EncodeMode) -> f64 {
        self.mean_of(mode, |r| r.error_rate)
    }

    pub fn max_error(&self, mode: EncodeMode) -> f64 {
        self.rows_of(mode)
            .map(|r| r.error_rate)
            .fold(f64::NAN, f64::max)
    }

    pub fn mean_psnr(&self, mode: EncodeMode) -> f64 {
        self.mean_of(mode, |r| r.psnr)
    }

    pub fn mean_ssim(&self, mode: EncodeMode) -> f64 {
        self.mean_of(mode, |r| r.ssim)
    }

    pub fn mean_iterations(&self, mode: EncodeMode) -> f64 {
        self.mean_of(mode, |r| r.iterations as f64)
    }

    pub fn mean_seconds(&self, mode: EncodeMode) -> f64 {
        self.mean_of(mode, |r| r.seconds)
    }

    /// Fraction (in [0,1]) of images that decoded with zero error.
    pub fn zero_error_fraction(&self, mode: EncodeMode) -> f64 {
        let rows: Vec<_> = self.rows_of(mode).collect();
        if rows.is_empty() {
            return f64::NAN;
        }
        rows.iter().filter(|r| r.error_rate == 0.0).count() as f64 / rows.len() as f64
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "image,mode,error_rate,psnr,ssim,iterations,seconds")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.image,
                r.mode.name(),
                r.error_rate,
                r.psnr,
                r.ssim,
                r.iterations,
                r.seconds
            )?;
        }
        Ok(())
    }

    /// Human-readable per-mode summary.
    pub fn table(&self) -> String {
        let mut out = String::from(
            "mode         mean_err%   max_err%   psnr_db    ssim     iters    secs\n",
        );
        for mode in EncodeMode::ALL {
            if self.rows_of(mode).next().is_none() {
                continue;
            }
            out.push_str(&format!(
                "{:<12} {:>9.4} {:>10.4} {:>9.2} {:>8.4} {:>8.1} {:>7.2}\n",
                mode.name(),
                100.0 * self.mean_error(mode),
                100.0 * self.max_error(mode),
                self.mean_psnr(mode),
                self.mean_ssim(mode),
                self.mean_iterations(mode),
                self.mean_seconds(mode),
            ));
        }
        out
    }
}

/// Encodes with one mode; returns the stego image, iteration count and
/// wall-clock seconds.
pub fn encode_with_mode(
    mode: EncodeMode,
    cover: &ImageTensor,
    message: &crate::bitstream::MessageTensor,
    params: &Params<f32>,
    cfg: &EvalConfig,
) -> Result<(ImageTensor, usize, f64)> {
    let started = Instant::now();
    let (stego, iters) = match mode {
        EncodeMode::Liso => {
            let (x, trace, _) = liso_encode(cover, message, params, &cfg.opt, None)?;
            (x, trace.iterations())
        }
        EncodeMode::LisoLbfgs => {
            let (x, trace) =
                liso_refine_lbfgs(cover, message, params, &cfg.opt, cfg.lbfgs_steps, None)?;
            (x, trace.iterations())
        }
        EncodeMode::Pgd => {
            let pcfg = PgdConfig {
                steps: cfg.pgd_steps,
                lr: cfg.pgd_lr,
                lambda: cfg.opt.lambda,
                jpeg: cfg.opt.jpeg,
                ..PgdConfig::default()
            };
            let (x, trace) = pgd_optimize(cover, message, params, &pcfg)?;
            (x, trace.iterations())
        }
        EncodeMode::Lbfgs => {
            let lcfg = LbfgsConfig {
                max_steps: cfg.lbfgs_steps,
                lambda: cfg.opt.lambda,
                jpeg: cfg.opt.jpeg,
                ..LbfgsConfig::default()
            };
            let (x, trace) = lbfgs_optimize(cover, cover, message, params, &lcfg)?;
            (x, trace.iterations())
        }
    };
    Ok((stego, iters, started.elapsed().as_secs_f64()))
}

/// Full evaluation loop: encode, store to disk, reload, decode, measure.
///
/// Errors are measured on the stored file — what a recipient would see. With
/// the JPEG layer enabled the file is a JPEG at the configured quality,
/// otherwise a PNG.
pub fn evaluate(
    val_list: &[PathBuf],
    params: &Params<f32>,
    modes: &[EncodeMode],
    cfg: &EvalConfig,
) -> Result<Report> {
    let mut report = Report::default();
    if modes.is_empty() || val_list.is_empty() {
        return Ok(report);
    }
    let tmp;
    let out_dir = match &cfg.out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            d.clone()
        }
        None => {
            tmp = tempdir_fallback()?;
            tmp.clone()
        }
    };
    let bpp = params.config.bpp;

    for (i, path) in val_list.iter().enumerate() {
        let cover = match cfg.resize {
            Some(side) => load_image_square(path, side)?,
            None => load_image(path)?,
        };
        let cover_q = quantize(&cover);
        let (h, w) = cover.dims();
        let message = sample_random_message(h, w, bpp, cfg.seed.wrapping_add(i as u64))?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();

        for &mode in modes {
            let (stego, iterations, seconds) =
                encode_with_mode(mode, &cover, &message, params, cfg)?;
            let file = match cfg.opt.jpeg.active_quality() {
                Some(q) => {
                    let p = out_dir.join(format!("{stem}__{}.jpg", mode.name()));
                    save_jpeg(&stego, &p, q)?;
                    p
                }
                None => {
                    let p = out_dir.join(format!("{stem}__{}.png", mode.name()));
                    save_png(&stego, &p)?;
                    p
                }
            };
            let loaded = load_image(&file)?;
            let probs = decoder_forward(params, &loaded)?;
            let bits = decode_bits(&probs);
            let err = error_rate(&bits, &message)?;
            report.rows.push(EvalRow {
                image: stem.clone(),
                mode,
                error_rate: err,
                psnr: psnr(&cover_q, &loaded)?,
                ssim: ssim(&cover_q, &loaded)?,
                iterations,
                seconds,
            });
        }
    }
    Ok(report)
}

fn tempdir_fallback() -> Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!("liso-eval-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Writes one CSV per (image, optimizer) trace plus an aggregated mean curve
/// per optimizer. Shorter traces carry their last value forward so curves
/// share a common length.
pub fn write_bench_curves(
    traces: &[(String, EncodeMode, crate::optim::Trace)],
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for (image, mode, trace) in traces {
        let path = out_dir.join(format!("{image}__{}.csv", mode.name()));
        let file = std::fs::File::create(path)?;
        trace.write_csv(std::io::BufWriter::new(file))?;
    }
    for mode in EncodeMode::ALL {
        let of_mode: Vec<&crate::optim::Trace> = traces
            .iter()
            .filter(|(_, m, _)| *m == mode)
            .map(|(_, _, t)| t)
            .collect();
        if of_mode.is_empty() {
            continue;
        }
        let len = of_mode.iter().map(|t| t.records.len()).max().unwrap_or(0);
        let path = out_dir.join(format!("{}__mean.csv", mode.name()));
        let mut wtr = std::io::BufWriter::new(std::fs::File::create(path)?);
        use std::io::Write;
        writeln!(wtr, "iteration,mean_objective,mean_error_rate")?;
        for t in 0..len {
            let (mut obj, mut err) = (0.0f64, 0.0f64);
            for trace in &of_mode {
                let r = trace.records.get(t).or_else(|| trace.records.last());
                if let Some(r) = r {
                    obj += r.objective;
                    err += r.error_rate;
                }
            }
            let n = of_mode.len() as f64;
            writeln!(wtr, "{},{},{}", t + 1, obj / n, err / n)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{init_stego_params, NetConfig};
    use ndarray::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use tempfile::tempdir;

    fn image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_simple_fn((h, w, 3), || rng.random::<f32>())).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = image(16, 16, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let x = ImageTensor::new(Array3::from_elem((16, 16, 3), 0.3)).unwrap();
        let y = ImageTensor::new(Array3::from_elem((16, 16, 3), 0.4)).unwrap();
        let db = psnr(&x, &y).unwrap();
        assert!((db - 20.0).abs() < 1e-6, "got {db}");
        assert_eq!(db, psnr(&y, &x).unwrap());
    }

    #[test]
    fn psnr_of_quantization_noise_is_high() {
        let a = image(32, 32, 2);
        let q = quantize(&a);
        // MSE <= (1/510)^2 gives at least 54.15 dB.
        assert!(psnr(&a, &q).unwrap() >= 54.0);
    }

    #[test]
    fn ssim_identity_symmetry_and_constant_closed_form() {
        let a = image(16, 16, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let b = image(16, 16, 4);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ssim(&a, &b).unwrap() < 1.0);

        // Constant images: zero variance collapses SSIM to the luminance
        // term (2 c1 c2 + C1) / (c1^2 + c2^2 + C1).
        let c1 = 0.4f64;
        let c2 = 0.5f64;
        let x = ImageTensor::new(Array3::from_elem((16, 16, 3), c1 as f32)).unwrap();
        let y = ImageTensor::new(Array3::from_elem((16, 16, 3), c2 as f32)).unwrap();
        let expect = (2.0 * c1 * c2 + SSIM_C1) / (c1 * c1 + c2 * c2 + SSIM_C1);
        let got = ssim(&x, &y).unwrap();
        assert!((got - expect).abs() < 1e-6, "got {got}, expected {expect}");
    }

    #[test]
    fn empty_mode_set_is_an_empty_report() {
        let params = init_stego_params(
            NetConfig {
                hidden_channels: 8,
                stem_channels: 2,
                decoder_channels: 4,
                head_channels: 4,
                bpp: 1,
                leaky_slope: 0.2,
            },
            1,
        )
        .unwrap();
        let report = evaluate(&[], &params, &[], &EvalConfig::default()).unwrap();
        assert!(report.rows.is_empty());
        let _ = params;
    }

    #[test]
    fn evaluate_errors_match_saved_files() {
        let dir = tempdir().unwrap();
        let out = tempdir().unwrap();
        for i in 0..2 {
            crate::imageio::save_png(&image(16, 16, 50 + i), &dir.path().join(format!("i{i}.png")))
                .unwrap();
        }
        let (val, _) = crate::imageio::make_split(dir.path(), 1, 1).unwrap();
        let params = init_stego_params(
            NetConfig {
                hidden_channels: 8,
                stem_channels: 2,
                decoder_channels: 4,
                head_channels: 4,
                bpp: 1,
                leaky_slope: 0.2,
            },
            2,
        )
        .unwrap();
        let cfg = EvalConfig {
            opt: OptimizeConfig {
                max_iters: 2,
                stop_on_zero: false,
                ..OptimizeConfig::default()
            },
            out_dir: Some(out.path().to_path_buf()),
            seed: 9,
            ..EvalConfig::default()
        };
        let report = evaluate(&val, &params, &[EncodeMode::Liso], &cfg).unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];

        // Recompute the error from the stored file.
        let stego = load_image(&out.path().join(format!("{}__liso.png", row.image))).unwrap();
        let probs = decoder_forward(&params, &stego).unwrap();
        let bits = decode_bits(&probs);
        let message = sample_random_message(16, 16, 1, 9).unwrap();
        assert_eq!(row.error_rate, error_rate(&bits, &message).unwrap());

        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("image,mode,error_rate,psnr,ssim,iterations,seconds"));
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(EncodeMode::parse("liso").unwrap(), EncodeMode::Liso);
        assert_eq!(EncodeMode::parse("LISO+LBFGS").unwrap(), EncodeMode::LisoLbfgs);
        assert!(EncodeMode::parse("adamw").is_err());
    }
}
