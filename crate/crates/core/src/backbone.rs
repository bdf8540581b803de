//! Future-frame prediction backbone: a U-Net generator refined by a
//! ConvLSTM recurrence, plus a patch discriminator for adversarial
//! pre-training.
//!
//! Forward passes exist at two levels: tape builders over `Var`s (used by
//! training, fully differentiable) and validated array-level operations.

use crate::error::{Error, Result};
use crate::types::{ClipTensor, FrameTensor, ParamSet, PredictorState};
use metascene_tape::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const GENERATOR_ID: &str = "r-gan.generator";
pub const DISCRIMINATOR_ID: &str = "r-gan.discriminator";

/// Backbone hyperparameters. All sizes are config keys; the defaults are
/// the desk-scale choices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frame_channels: usize,
    pub frame_size: usize,
    /// Number of conditioning frames per prediction.
    pub t: usize,
    pub unet_depth: usize,
    pub unet_base: usize,
    pub lstm_hidden: usize,
    pub disc_blocks: usize,
    pub disc_base: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frame_channels: 3,
            frame_size: 64,
            t: 4,
            unet_depth: 4,
            unet_base: 32,
            lstm_hidden: 32,
            disc_blocks: 4,
            disc_base: 32,
        }
    }
}

impl ModelConfig {
    /// Stable hash of the config, embedded in parameter sets and artifacts.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex_prefix(&digest, 16)
    }

    fn enc_channels(&self, level: usize) -> usize {
        self.unet_base << level
    }

    fn mid_channels(&self) -> usize {
        self.unet_base << self.unet_depth
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], len: usize) -> String {
    bytes
        .iter()
        .take(len / 2)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Draw a normal(0, std^2) array.
pub(crate) fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

fn conv_entry(
    rng: &mut ChaCha8Rng,
    entries: &mut Vec<(String, ArrayD<f64>)>,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    gain: f64,
) {
    let fan_in = (cin * k * k) as f64;
    let std = (gain / fan_in).sqrt();
    entries.push((format!("{name}.weight"), randn(rng, &[cout, cin, k, k], std)));
    entries.push((format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout]))));
}

/// Seeded generator initialization. Identical (config, seed) pairs give
/// bitwise-identical parameters.
pub fn init_generator(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let c = cfg.frame_channels;
    let mut prev = c;
    for l in 0..cfg.unet_depth {
        conv_entry(&mut rng, &mut entries, &format!("unet.enc{l}"), cfg.enc_channels(l), prev, 3, 2.0);
        prev = cfg.enc_channels(l);
    }
    conv_entry(&mut rng, &mut entries, "unet.mid", cfg.mid_channels(), prev, 3, 2.0);
    let mut cur = cfg.mid_channels();
    for l in (0..cfg.unet_depth).rev() {
        let cin = cur + cfg.enc_channels(l);
        conv_entry(&mut rng, &mut entries, &format!("unet.dec{l}"), cfg.enc_channels(l), cin, 3, 2.0);
        cur = cfg.enc_channels(l);
    }
    conv_entry(&mut rng, &mut entries, "unet.out", c, cur, 3, 1.0);
    conv_entry(&mut rng, &mut entries, "lstm.gates", 4 * cfg.lstm_hidden, c + cfg.lstm_hidden, 3, 1.0);
    conv_entry(&mut rng, &mut entries, "lstm.proj", c, cfg.lstm_hidden, 1, 1.0);
    ParamSet::new(GENERATOR_ID, cfg.hash(), entries)
}

/// Seeded patch-discriminator initialization.
pub fn init_discriminator(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut prev = cfg.frame_channels;
    for b in 0..cfg.disc_blocks {
        let cout = cfg.disc_base << b.min(3);
        conv_entry(&mut rng, &mut entries, &format!("disc.block{b}"), cout, prev, 4, 2.0);
        prev = cout;
    }
    conv_entry(&mut rng, &mut entries, "disc.head", 1, prev, 1, 1.0);
    ParamSet::new(DISCRIMINATOR_ID, cfg.hash(), entries)
}

/// Parameters entered on a tape as leaves, in declaration order.
pub struct ParamVars {
    ordered: Vec<(String, Var)>,
    lookup: HashMap<String, Var>,
}

impl ParamVars {
    /// Enter every parameter of `params` as a tape leaf.
    pub fn leaves(tape: &Tape, params: &ParamSet) -> Self {
        let ordered: Vec<(String, Var)> = params
            .iter()
            .map(|(n, a)| (n.to_string(), tape.leaf(a.clone())))
            .collect();
        let lookup = ordered.iter().cloned().collect();
        Self { ordered, lookup }
    }

    /// Rebind the same names to new vars (e.g. adapted parameters).
    pub fn rebind(&self, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), self.ordered.len(), "rebind: arity mismatch");
        let ordered: Vec<(String, Var)> = self
            .ordered
            .iter()
            .zip(vars)
            .map(|((n, _), v)| (n.clone(), v))
            .collect();
        let lookup = ordered.iter().cloned().collect();
        Self { ordered, lookup }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .lookup
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from var map"))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.ordered.iter().map(|(_, v)| *v).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.ordered.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Extract current values into a ParamSet with the given identity.
    pub fn to_param_set(&self, tape: &Tape, template: &ParamSet) -> ParamSet {
        let values = self
            .ordered
            .iter()
            .map(|(_, v)| (*tape.value(*v)).clone())
            .collect();
        template.with_values(values).expect("structure preserved")
    }
}

fn conv_block(tape: &Tape, vars: &ParamVars, name: &str, x: Var, stride: usize, pad: usize) -> Var {
    let w = vars.get(&format!("{name}.weight"));
    let b = vars.get(&format!("{name}.bias"));
    tape.add_chan_bias(tape.conv2d(x, w, stride, pad), b)
}

const LRELU_SLOPE: f64 = 0.2;

/// U-Net trunk: encoder with 2x pooling per level, skip connections into
/// the decoder, linear output of `frame_channels` channels.
pub fn unet_forward(tape: &Tape, cfg: &ModelConfig, vars: &ParamVars, frame: Var) -> Var {
    let mut x = frame;
    let mut skips = Vec::with_capacity(cfg.unet_depth);
    for l in 0..cfg.unet_depth {
        x = tape.leaky_relu(conv_block(tape, vars, &format!("unet.enc{l}"), x, 1, 1), LRELU_SLOPE);
        skips.push(x);
        x = tape.avg_pool2(x);
    }
    x = tape.leaky_relu(conv_block(tape, vars, "unet.mid", x, 1, 1), LRELU_SLOPE);
    for l in (0..cfg.unet_depth).rev() {
        x = tape.upsample2(x);
        x = tape.concat_c(x, skips[l]);
        x = tape.leaky_relu(conv_block(tape, vars, &format!("unet.dec{l}"), x, 1, 1), LRELU_SLOPE);
    }
    conv_block(tape, vars, "unet.out", x, 1, 1)
}

/// One ConvLSTM step on a `frame_channels` input.
pub fn convlstm_step(
    tape: &Tape,
    cfg: &ModelConfig,
    vars: &ParamVars,
    input: Var,
    state: (Var, Var),
) -> (Var, Var) {
    let (h, c) = state;
    let hid = cfg.lstm_hidden;
    let stacked = tape.concat_c(input, h);
    let gates = conv_block(tape, vars, "lstm.gates", stacked, 1, 1);
    let i = tape.sigmoid(tape.slice_c(gates, 0, hid));
    let f = tape.sigmoid(tape.slice_c(gates, hid, hid));
    let o = tape.sigmoid(tape.slice_c(gates, 2 * hid, hid));
    let g = tape.tanh(tape.slice_c(gates, 3 * hid, hid));
    let c_next = tape.add(tape.mul(f, c), tape.mul(i, g));
    let h_next = tape.mul(o, tape.tanh(c_next));
    (h_next, c_next)
}

/// Predict the next frame from `frames` (one var per time step). The U-Net
/// prediction for each step is passed through the ConvLSTM; the final
/// hidden state is projected and squashed to `[-1, 1]`.
pub fn predict_forward(
    tape: &Tape,
    cfg: &ModelConfig,
    vars: &ParamVars,
    frames: &[Var],
    state: (Var, Var),
) -> (Var, (Var, Var)) {
    assert!(!frames.is_empty(), "predict_forward: empty clip");
    let mut st = state;
    for &frame in frames {
        let u = unet_forward(tape, cfg, vars, frame);
        st = convlstm_step(tape, cfg, vars, u, st);
    }
    let proj = conv_block(tape, vars, "lstm.proj", st.0, 1, 0);
    (tape.tanh(proj), st)
}

/// Single-frame reconstruction through the U-Net alone.
pub fn reconstruct_forward(tape: &Tape, cfg: &ModelConfig, vars: &ParamVars, frame: Var) -> Var {
    tape.tanh(unet_forward(tape, cfg, vars, frame))
}

/// Patch-discriminator logits: stride-2 conv blocks then a 1x1 head.
pub fn discriminator_forward(tape: &Tape, cfg: &ModelConfig, vars: &ParamVars, frame: Var) -> Var {
    let mut x = frame;
    for b in 0..cfg.disc_blocks {
        x = tape.leaky_relu(conv_block(tape, vars, &format!("disc.block{b}"), x, 2, 1), LRELU_SLOPE);
    }
    conv_block(tape, vars, "disc.head", x, 1, 0)
}

fn check_params(cfg: &ModelConfig, params: &ParamSet, expected_id: &str) -> Result<()> {
    if params.model_id() != expected_id {
        return Err(Error::validation(format!(
            "parameter set is for model {}, expected {expected_id}",
            params.model_id()
        )));
    }
    if params.config_hash() != cfg.hash() {
        return Err(Error::validation(format!(
            "parameter set was built for config {}, current config is {}",
            params.config_hash(),
            cfg.hash()
        )));
    }
    if !params.all_finite() {
        return Err(Error::validation("parameter set contains non-finite values"));
    }
    Ok(())
}

fn check_frame_geometry(cfg: &ModelConfig, c: usize, h: usize, w: usize, depth: usize) -> Result<()> {
    if c != cfg.frame_channels {
        return Err(Error::shape("frame channels", cfg.frame_channels, c));
    }
    let d = 1usize << depth;
    if h % d != 0 || h == 0 {
        return Err(Error::shape("frame height", format!("positive multiple of {d}"), h));
    }
    if w % d != 0 || w == 0 {
        return Err(Error::shape("frame width", format!("positive multiple of {d}"), w));
    }
    Ok(())
}

/// Predict frame t+1 from a clip of exactly `cfg.t` frames. Deterministic
/// in (params, clip, state); the state must be zeroed at clip start.
pub fn predict_next_frame(
    cfg: &ModelConfig,
    params: &ParamSet,
    clip: &ClipTensor,
    state: &PredictorState,
) -> Result<(FrameTensor, PredictorState)> {
    check_params(cfg, params, GENERATOR_ID)?;
    let (n, t, c, h, w) = clip.dims();
    if t != cfg.t {
        return Err(Error::shape("clip time steps", cfg.t, t));
    }
    check_frame_geometry(cfg, c, h, w, cfg.unet_depth)?;
    let expect_state = (n, cfg.lstm_hidden, h, w);
    let got_state = {
        let s = state.hidden.shape();
        (s[0], s[1], s[2], s[3])
    };
    if got_state != expect_state || state.cell.shape() != state.hidden.shape() {
        return Err(Error::shape(
            "predictor state",
            format!("{expect_state:?}"),
            format!("{got_state:?}"),
        ));
    }

    let tape = Tape::new();
    let vars = ParamVars::leaves(&tape, params);
    let frames: Vec<Var> = (0..t).map(|k| tape.leaf(clip.frame(k).into_dyn())).collect();
    let st = (
        tape.leaf(state.hidden.clone().into_dyn()),
        tape.leaf(state.cell.clone().into_dyn()),
    );
    let (pred, st) = predict_forward(&tape, cfg, &vars, &frames, st);
    let out = (*tape.value(pred)).clone().into_dimensionality().unwrap();
    let hidden = (*tape.value(st.0)).clone().into_dimensionality().unwrap();
    let cell = (*tape.value(st.1)).clone().into_dimensionality().unwrap();
    Ok((FrameTensor::new(out)?, PredictorState { hidden, cell }))
}

/// Reconstruct a single frame (the reconstruction-based task variant).
pub fn reconstruct_frame(cfg: &ModelConfig, params: &ParamSet, frame: &FrameTensor) -> Result<FrameTensor> {
    check_params(cfg, params, GENERATOR_ID)?;
    let (_, c, h, w) = frame.dims();
    check_frame_geometry(cfg, c, h, w, cfg.unet_depth)?;
    let tape = Tape::new();
    let vars = ParamVars::leaves(&tape, params);
    let x = tape.leaf(frame.data().clone().into_dyn());
    let y = reconstruct_forward(&tape, cfg, &vars, x);
    FrameTensor::new((*tape.value(y)).clone().into_dimensionality().unwrap())
}

/// Patch logits for a frame: one realness logit per receptive-field patch.
pub fn discriminate(cfg: &ModelConfig, disc_params: &ParamSet, frame: &FrameTensor) -> Result<ArrayD<f64>> {
    check_params(cfg, disc_params, DISCRIMINATOR_ID)?;
    let (_, c, h, w) = frame.dims();
    check_frame_geometry(cfg, c, h, w, cfg.disc_blocks)?;
    let tape = Tape::new();
    let vars = ParamVars::leaves(&tape, disc_params);
    let x = tape.leaf(frame.data().clone().into_dyn());
    let logits = discriminator_forward(&tape, cfg, &vars, x);
    Ok((*tape.value(logits)).clone())
}

/// Fresh zero recurrent state for a batch of the given spatial size.
pub fn initial_state(cfg: &ModelConfig, batch: usize, h: usize, w: usize) -> PredictorState {
    PredictorState::zeros(batch, cfg.lstm_hidden, h, w)
}
