//! Image losses: L1, multi-scale SSIM, gradient difference, their weighted
//! composite, least-squares adversarial losses, and PSNR scoring.
//!
//! Each loss exists in two forms: a differentiable tape builder (`*_var`)
//! operating on `(N, C, H, W)` vars, and a plain array entry point that
//! validates inputs and returns the scalar value.

use crate::error::{Error, Result};
use crate::types::FrameTensor;
use metascene_tape::{Tape, Var};
use ndarray::{Array2, ArrayD};
use std::sync::Arc;

pub const MS_SSIM_WINDOW: usize = 11;
pub const MS_SSIM_SIGMA: f64 = 1.5;
/// Standard per-scale exponents; the first `scales` entries are renormalized
/// to sum to one.
pub const MS_SSIM_EXPONENTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_C1: f64 = 1e-4; // (0.01 * peak)^2, peak = 1
const SSIM_C2: f64 = 9e-4; // (0.03 * peak)^2

/// Coefficients of the composite prediction loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda1, self.lambda2, self.lambda3];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::validation(format!(
                "loss weights must be finite and non-negative, got {ws:?}"
            )));
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err(Error::validation("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Normalized 2-d Gaussian window.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Array2<f64> {
    let half = (size as isize - 1) / 2;
    let mut k = Array2::<f64>::zeros((size, size));
    for i in 0..size {
        for j in 0..size {
            let di = i as isize - half;
            let dj = j as isize - half;
            k[[i, j]] = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s = k.sum();
    k / s
}

/// Smallest spatial side for which `scales` MS-SSIM levels are defined.
pub fn ms_ssim_min_side(scales: usize) -> usize {
    MS_SSIM_WINDOW << (scales - 1)
}

/// Largest scale count usable at the given spatial size, capped at `max`.
pub fn feasible_ms_scales(h: usize, w: usize, max: usize) -> usize {
    let mut s = max.min(MS_SSIM_EXPONENTS.len()).max(1);
    while s > 1 && h.min(w) < ms_ssim_min_side(s) {
        s -= 1;
    }
    s
}

/// Mean absolute deviation.
pub fn l1_var(tape: &Tape, pred: Var, target: Var) -> Var {
    tape.mean(tape.abs(tape.sub(pred, target)))
}

/// `1 - MS-SSIM`. Inputs are remapped from `[-1, 1]` to `[0, 1]` so the
/// standard stabilization constants apply with peak 1.
pub fn ms_ssim_loss_var(tape: &Tape, pred: Var, target: Var, scales: usize) -> Result<Var> {
    if scales == 0 || scales > MS_SSIM_EXPONENTS.len() {
        return Err(Error::validation(format!(
            "ms-ssim scales must be in 1..={}, got {scales}",
            MS_SSIM_EXPONENTS.len()
        )));
    }
    let shape = tape.shape(pred);
    let (h, w) = (shape[2], shape[3]);
    let min = ms_ssim_min_side(scales);
    if h < min || w < min {
        return Err(Error::validation(format!(
            "image {h}x{w} too small for {scales} MS-SSIM scales; minimum side is {min}"
        )));
    }

    let kernel = Arc::new(gaussian_kernel(MS_SSIM_WINDOW, MS_SSIM_SIGMA));
    let weights: Vec<f64> = {
        let raw = &MS_SSIM_EXPONENTS[..scales];
        let sum: f64 = raw.iter().sum();
        raw.iter().map(|w| w / sum).collect()
    };

    let remap = |v: Var| tape.scale(tape.add_scalar(v, 1.0), 0.5);
    let mut x = remap(pred);
    let mut y = remap(target);

    let mut msssim: Option<Var> = None;
    for (s, &weight) in weights.iter().enumerate() {
        let mu_x = tape.blur_valid(x, kernel.clone());
        let mu_y = tape.blur_valid(y, kernel.clone());
        let xx = tape.blur_valid(tape.mul(x, x), kernel.clone());
        let yy = tape.blur_valid(tape.mul(y, y), kernel.clone());
        let xy = tape.blur_valid(tape.mul(x, y), kernel.clone());
        let var_x = tape.sub(xx, tape.mul(mu_x, mu_x));
        let var_y = tape.sub(yy, tape.mul(mu_y, mu_y));
        let cov = tape.sub(xy, tape.mul(mu_x, mu_y));

        let cs_num = tape.add_scalar(tape.scale(cov, 2.0), SSIM_C2);
        let cs_den = tape.add_scalar(tape.add(var_x, var_y), SSIM_C2);
        let cs = tape.div(cs_num, cs_den);

        let factor = if s + 1 == weights.len() {
            let l_num = tape.add_scalar(tape.scale(tape.mul(mu_x, mu_y), 2.0), SSIM_C1);
            let l_den = tape.add_scalar(tape.add(tape.mul(mu_x, mu_x), tape.mul(mu_y, mu_y)), SSIM_C1);
            let l = tape.div(l_num, l_den);
            tape.mean(tape.mul(l, cs))
        } else {
            tape.mean(cs)
        };
        // guard the fractional power against non-positive means
        let factor = tape.pow_const(tape.clamp_min(factor, 1e-6), weight);
        msssim = Some(match msssim {
            Some(acc) => tape.mul(acc, factor),
            None => factor,
        });

        if s + 1 < weights.len() {
            x = tape.avg_pool2(x);
            y = tape.avg_pool2(y);
        }
    }

    Ok(tape.add_scalar(tape.neg(msssim.unwrap()), 1.0))
}

/// Gradient difference loss with forward differences, exponent 1.
pub fn gdl_var(tape: &Tape, pred: Var, target: Var) -> Var {
    let shape = tape.shape(pred);
    let (h, w) = (shape[2], shape[3]);
    let dx = |v: Var| {
        let right = tape.crop2d(v, 0, 1, h, w - 1);
        let left = tape.crop2d(v, 0, 0, h, w - 1);
        tape.abs(tape.sub(right, left))
    };
    let dy = |v: Var| {
        let down = tape.crop2d(v, 1, 0, h - 1, w);
        let up = tape.crop2d(v, 0, 0, h - 1, w);
        tape.abs(tape.sub(down, up))
    };
    let term_x = tape.mean(tape.abs(tape.sub(dx(pred), dx(target))));
    let term_y = tape.mean(tape.abs(tape.sub(dy(pred), dy(target))));
    tape.add(term_x, term_y)
}

/// `lambda1 * L1 + lambda2 * (1 - MS-SSIM) + lambda3 * GDL`. Zero-weight
/// terms are skipped entirely.
pub fn composite_var(
    tape: &Tape,
    pred: Var,
    target: Var,
    weights: &LossWeights,
    ms_scales: usize,
) -> Result<Var> {
    weights.validate()?;
    let mut acc = tape.constant(0.0);
    if weights.lambda1 != 0.0 {
        acc = tape.add(acc, tape.scale(l1_var(tape, pred, target), weights.lambda1));
    }
    if weights.lambda2 != 0.0 {
        let ms = ms_ssim_loss_var(tape, pred, target, ms_scales)?;
        acc = tape.add(acc, tape.scale(ms, weights.lambda2));
    }
    if weights.lambda3 != 0.0 {
        acc = tape.add(acc, tape.scale(gdl_var(tape, pred, target), weights.lambda3));
    }
    Ok(acc)
}

/// Least-squares GAN generator loss `0.5 * mean((D(fake) - 1)^2)`.
pub fn lsgan_generator_var(tape: &Tape, fake_logits: Var) -> Var {
    let d = tape.add_scalar(fake_logits, -1.0);
    tape.scale(tape.mean(tape.mul(d, d)), 0.5)
}

/// Least-squares GAN discriminator loss
/// `0.5 * mean((D(real) - 1)^2) + 0.5 * mean(D(fake)^2)`.
pub fn lsgan_discriminator_var(tape: &Tape, real_logits: Var, fake_logits: Var) -> Var {
    let dr = tape.add_scalar(real_logits, -1.0);
    let real_term = tape.scale(tape.mean(tape.mul(dr, dr)), 0.5);
    let fake_term = tape.scale(tape.mean(tape.mul(fake_logits, fake_logits)), 0.5);
    tape.add(real_term, fake_term)
}

fn check_pair(pred: &FrameTensor, target: &FrameTensor, what: &str) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(
            what,
            format!("{:?}", pred.dims()),
            format!("{:?}", target.dims()),
        ));
    }
    Ok(())
}

fn eval_pair<F>(pred: &FrameTensor, target: &FrameTensor, build: F) -> Result<f64>
where
    F: FnOnce(&Tape, Var, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let p = tape.leaf(pred.data().clone().into_dyn());
    let t = tape.leaf(target.data().clone().into_dyn());
    Ok(tape.scalar(build(&tape, p, t)?))
}

pub fn l1_loss(pred: &FrameTensor, target: &FrameTensor) -> Result<f64> {
    check_pair(pred, target, "l1_loss")?;
    eval_pair(pred, target, |t, p, y| Ok(l1_var(t, p, y)))
}

pub fn ms_ssim_loss(pred: &FrameTensor, target: &FrameTensor, scales: usize) -> Result<f64> {
    check_pair(pred, target, "ms_ssim_loss")?;
    eval_pair(pred, target, |t, p, y| ms_ssim_loss_var(t, p, y, scales))
}

pub fn gdl_loss(pred: &FrameTensor, target: &FrameTensor) -> Result<f64> {
    check_pair(pred, target, "gdl_loss")?;
    let (_, _, h, w) = pred.dims();
    if h < 2 || w < 2 {
        return Err(Error::validation(format!(
            "gdl_loss needs at least 2x2 spatial size, got {h}x{w}"
        )));
    }
    eval_pair(pred, target, |t, p, y| Ok(gdl_var(t, p, y)))
}

pub fn composite_loss(
    pred: &FrameTensor,
    target: &FrameTensor,
    weights: &LossWeights,
    ms_scales: usize,
) -> Result<f64> {
    check_pair(pred, target, "composite_loss")?;
    eval_pair(pred, target, |t, p, y| composite_var(t, p, y, weights, ms_scales))
}

/// `(generator_loss, discriminator_loss)` for grids of patch logits.
pub fn adversarial_losses(real_logits: &ArrayD<f64>, fake_logits: &ArrayD<f64>) -> Result<(f64, f64)> {
    for (name, l) in [("real", real_logits), ("fake", fake_logits)] {
        if !l.iter().all(|x| x.is_finite()) {
            return Err(Error::validation(format!("{name} logits contain non-finite values")));
        }
    }
    let tape = Tape::new();
    let r = tape.leaf(real_logits.clone());
    let f = tape.leaf(fake_logits.clone());
    let gen = tape.scalar(lsgan_generator_var(&tape, f));
    let disc = tape.scalar(lsgan_discriminator_var(&tape, r, f));
    Ok((gen, disc))
}

/// Largest PSNR reported; reached when the MSE clamp kicks in.
pub const PSNR_CAP_DB: f64 = 100.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

/// Peak signal-to-noise ratio in decibels. Values are remapped from
/// `[-1, 1]` to `[0, 1]`, so peak is 1; the MSE is floored at 1e-10,
/// capping the result at 100 dB.
pub fn psnr(pred: &FrameTensor, target: &FrameTensor) -> Result<f64> {
    check_pair(pred, target, "psnr")?;
    let diff = pred.data() - target.data();
    // remap halves every difference
    let mse = diff.iter().map(|d| (d / 2.0) * (d / 2.0)).sum::<f64>() / diff.len() as f64;
    let mse = mse.max(PSNR_MSE_FLOOR);
    Ok(-10.0 * mse.log10())
}
