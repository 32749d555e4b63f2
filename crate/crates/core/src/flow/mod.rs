//! Conditional flow-matching acoustic model: straight-line interpolation
//! from noise to mel targets, masked mel conditioning with a direction
//! indicator, an L1 velocity objective restricted to masked frames, and an
//! Euler sampler for generation.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::trunk::{
    gaussian_matrix, init_matrix, register_layer, trunk_forward, LayerParams, LayerVars,
    TrunkConfig,
};
use crate::nn::{Adam, Tape, Var};
use crate::seeding::component_rng;
use crate::tensor_file;

/// Conversion direction conditioning the shared acoustic model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    W2n,
    N2w,
}

impl Direction {
    pub fn embedding_row(self) -> usize {
        match self {
            Direction::W2n => 0,
            Direction::N2w => 1,
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::W2n => "w2n",
            Direction::N2w => "n2w",
        })
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w2n" => Ok(Direction::W2n),
            "n2w" => Ok(Direction::N2w),
            other => Err(Error::Argument(format!("unknown direction {other:?}, want w2n|n2w"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub mel_bins: usize,
    pub codebook_size: usize,
    pub trunk: TrunkConfig,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mel_bins == 0 || self.codebook_size == 0 {
            return Err(Error::Argument("mel_bins and codebook_size must be positive".into()));
        }
        self.trunk.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModelParams {
    pub config: FlowConfig,
    pub token_embed: Array2<f64>,
    pub dir_embed: Array2<f64>,
    pub time_w: Array2<f64>,
    pub time_b: Array2<f64>,
    pub yt_w: Array2<f64>,
    pub yt_b: Array2<f64>,
    pub cond_w: Array2<f64>,
    pub cond_b: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
}

impl FlowModelParams {
    /// Seeded init; the output head starts at zero so an untrained model
    /// predicts zero velocity everywhere.
    pub fn init(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = component_rng("flow-model-init", seed);
        let d = config.trunk.dim_model;
        let mel = config.mel_bins;
        let layers = (0..config.trunk.layers)
            .map(|_| LayerParams::init(&config.trunk, &mut rng))
            .collect();
        Ok(FlowModelParams {
            token_embed: init_matrix(&mut rng, config.codebook_size, d, 0.3),
            dir_embed: init_matrix(&mut rng, 2, d, 0.3),
            time_w: init_matrix(&mut rng, d, d, 1.0 / (d as f64).sqrt()),
            time_b: Array2::zeros((1, d)),
            yt_w: init_matrix(&mut rng, mel, d, 1.0 / (mel as f64).sqrt()),
            yt_b: Array2::zeros((1, d)),
            cond_w: init_matrix(&mut rng, mel, d, 1.0 / (mel as f64).sqrt()),
            cond_b: Array2::zeros((1, d)),
            layers,
            out_w: Array2::zeros((d, mel)),
            out_b: Array2::zeros((1, mel)),
            config,
        })
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Array2<f64>)) {
        f("token_embed".into(), &self.token_embed);
        f("dir_embed".into(), &self.dir_embed);
        f("time_w".into(), &self.time_w);
        f("time_b".into(), &self.time_b);
        f("yt_w".into(), &self.yt_w);
        f("yt_b".into(), &self.yt_b);
        f("cond_w".into(), &self.cond_w);
        f("cond_b".into(), &self.cond_b);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("layer{i}"), f);
        }
        f("out_w".into(), &self.out_w);
        f("out_b".into(), &self.out_b);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut Array2<f64>)) {
        f("token_embed".into(), &mut self.token_embed);
        f("dir_embed".into(), &mut self.dir_embed);
        f("time_w".into(), &mut self.time_w);
        f("time_b".into(), &mut self.time_b);
        f("yt_w".into(), &mut self.yt_w);
        f("yt_b".into(), &mut self.yt_b);
        f("cond_w".into(), &mut self.cond_w);
        f("cond_b".into(), &mut self.cond_b);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("layer{i}"), f);
        }
        f("out_w".into(), &mut self.out_w);
        f("out_b".into(), &mut self.out_b);
    }
}

/// One training item for the masked-velocity objective.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub y0: Array2<f64>,
    pub y1: Array2<f64>,
    pub t: f64,
    pub mask: Vec<bool>,
    pub token_indices: Vec<usize>,
    pub direction: Direction,
    pub condition: Array2<f64>,
}

impl FlowBatch {
    pub fn validate(&self, config: &FlowConfig) -> Result<()> {
        let frames = self.y1.nrows();
        if self.y0.dim() != self.y1.dim() || self.condition.dim() != self.y1.dim() {
            return Err(Error::Argument("y0/y1/condition shapes must match".into()));
        }
        if self.y1.ncols() != config.mel_bins {
            return Err(Error::Argument(format!(
                "batch has {} mel bins, model expects {}",
                self.y1.ncols(),
                config.mel_bins
            )));
        }
        if self.mask.len() != frames || self.token_indices.len() != frames {
            return Err(Error::Argument("mask and tokens must cover every frame".into()));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::Argument(format!("t = {} outside [0, 1]", self.t)));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(Error::DegenerateInput("training mask selects no frames".into()));
        }
        Ok(())
    }
}

/// Straight-line point between noise and data: (1-t) y0 + t y1.
pub fn ot_interpolate(y0: &Array2<f64>, y1: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
    if y0.dim() != y1.dim() {
        return Err(Error::Argument("shape mismatch".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Argument(format!("t = {t} outside [0, 1]")));
    }
    Ok(y0 * (1.0 - t) + y1 * t)
}

/// Copies y1 on unmasked frames; masked frames are unit Gaussian noise
/// from the seeded stream.
pub fn make_masked_condition(y1: &Array2<f64>, mask: &[bool], noise_seed: u64) -> Result<Array2<f64>> {
    if mask.len() != y1.nrows() {
        return Err(Error::Argument("mask length must match frame count".into()));
    }
    let mut rng = component_rng("masked-condition", noise_seed);
    let mut out = y1.clone();
    for (r, &m) in mask.iter().enumerate() {
        if m {
            let noise = gaussian_matrix(&mut rng, 1, y1.ncols());
            out.row_mut(r).assign(&noise.row(0));
        }
    }
    Ok(out)
}

/// Sinusoidal features of the scalar time, 1 x dim.
fn time_features(t: f64, dim: usize) -> Array2<f64> {
    let half = (dim / 2).max(1);
    let mut out = Array2::zeros((1, dim));
    for i in 0..dim / 2 {
        let freq = (-(i as f64) * (10_000f64).ln() / half as f64).exp();
        let angle = 1_000.0 * t * freq;
        out[[0, 2 * i]] = angle.sin();
        out[[0, 2 * i + 1]] = angle.cos();
    }
    out
}

struct FlowVars {
    token_embed: Var,
    dir_embed: Var,
    time_w: Var,
    time_b: Var,
    yt_w: Var,
    yt_b: Var,
    cond_w: Var,
    cond_b: Var,
    layers: Vec<LayerVars>,
    out_w: Var,
    out_b: Var,
}

impl FlowVars {
    fn vars_in_order(&self) -> Vec<Var> {
        let mut out = vec![
            self.token_embed,
            self.dir_embed,
            self.time_w,
            self.time_b,
            self.yt_w,
            self.yt_b,
            self.cond_w,
            self.cond_b,
        ];
        for l in &self.layers {
            out.extend(l.vars_in_order());
        }
        out.push(self.out_w);
        out.push(self.out_b);
        out
    }
}

fn register_flow(tape: &mut Tape, params: &FlowModelParams) -> FlowVars {
    FlowVars {
        token_embed: tape.leaf(params.token_embed.clone()),
        dir_embed: tape.leaf(params.dir_embed.clone()),
        time_w: tape.leaf(params.time_w.clone()),
        time_b: tape.leaf(params.time_b.clone()),
        yt_w: tape.leaf(params.yt_w.clone()),
        yt_b: tape.leaf(params.yt_b.clone()),
        cond_w: tape.leaf(params.cond_w.clone()),
        cond_b: tape.leaf(params.cond_b.clone()),
        layers: params.layers.iter().map(|l| register_layer(tape, l)).collect(),
        out_w: tape.leaf(params.out_w.clone()),
        out_b: tape.leaf(params.out_b.clone()),
    }
}

fn check_velocity_inputs(
    params: &FlowModelParams,
    y_t: &Array2<f64>,
    token_indices: &[usize],
    condition: &Array2<f64>,
) -> Result<()> {
    if y_t.nrows() != token_indices.len() || condition.nrows() != y_t.nrows() {
        return Err(Error::Argument(format!(
            "frame mismatch: y_t {}, tokens {}, condition {}",
            y_t.nrows(),
            token_indices.len(),
            condition.nrows()
        )));
    }
    if y_t.ncols() != params.config.mel_bins || condition.ncols() != params.config.mel_bins {
        return Err(Error::Argument("mel bin mismatch".into()));
    }
    for &i in token_indices {
        if i >= params.config.codebook_size {
            return Err(Error::Argument(format!(
                "token index {i} outside codebook of {}",
                params.config.codebook_size
            )));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn velocity_on_tape(
    tape: &mut Tape,
    vars: &FlowVars,
    params: &FlowModelParams,
    y_t: Var,
    t: f64,
    token_indices: &[usize],
    direction: Direction,
    condition: Var,
) -> Result<Var> {
    // Additive fusion of all conditioning streams, per frame.
    let h = tape.gather(vars.token_embed, token_indices)?;
    let dir_row = tape.gather(vars.dir_embed, &[direction.embedding_row()])?;
    let h = tape.add_row(h, dir_row);
    let tf = tape.leaf(time_features(t, params.config.trunk.dim_model));
    let tf = tape.matmul(tf, vars.time_w);
    let tf = tape.add_row(tf, vars.time_b);
    let h = tape.add_row(h, tf);
    let ytp = tape.matmul(y_t, vars.yt_w);
    let ytp = tape.add_row(ytp, vars.yt_b);
    let h = tape.add(h, ytp);
    let cp = tape.matmul(condition, vars.cond_w);
    let cp = tape.add_row(cp, vars.cond_b);
    let h = tape.add(h, cp);
    let h = trunk_forward(tape, h, &vars.layers, &params.config.trunk)?;
    let v = tape.matmul(h, vars.out_w);
    Ok(tape.add_row(v, vars.out_b))
}

/// Predicted velocity field, frames x mel_bins. Deterministic.
pub fn velocity_forward(
    params: &FlowModelParams,
    y_t: &Array2<f64>,
    t: f64,
    token_indices: &[usize],
    direction: Direction,
    condition: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_velocity_inputs(params, y_t, token_indices, condition)?;
    let mut tape = Tape::new();
    let vars = register_flow(&mut tape, params);
    let y = tape.leaf(y_t.clone());
    let c = tape.leaf(condition.clone());
    let v = velocity_on_tape(&mut tape, &vars, params, y, t, token_indices, direction, c)?;
    Ok(tape.value(v).clone())
}

/// Masked L1 between the target velocity (y1 - y0) and a given velocity
/// matrix; unmasked frames contribute exactly zero.
pub fn cfm_loss_given_velocity(velocity: &Array2<f64>, batch: &FlowBatch) -> Result<f64> {
    if velocity.dim() != batch.y1.dim() {
        return Err(Error::Argument("velocity shape mismatch".into()));
    }
    let masked_rows = batch.mask.iter().filter(|&&m| m).count();
    if masked_rows == 0 {
        return Err(Error::DegenerateInput("mask selects no frames".into()));
    }
    let count = (masked_rows * velocity.ncols()) as f64;
    let mut loss = 0.0;
    for (r, &m) in batch.mask.iter().enumerate() {
        if m {
            for c in 0..velocity.ncols() {
                let target = batch.y1[[r, c]] - batch.y0[[r, c]];
                loss += (target - velocity[[r, c]]).abs();
            }
        }
    }
    Ok(loss / count)
}

/// Flow-matching objective on one batch item.
pub fn cfm_loss(params: &FlowModelParams, batch: &FlowBatch) -> Result<f64> {
    batch.validate(&params.config)?;
    let y_t = ot_interpolate(&batch.y0, &batch.y1, batch.t)?;
    let v = velocity_forward(
        params,
        &y_t,
        batch.t,
        &batch.token_indices,
        batch.direction,
        &batch.condition,
    )?;
    cfm_loss_given_velocity(&v, batch)
}

/// Loss and exact gradients in canonical parameter order.
pub fn flow_grad(params: &FlowModelParams, batch: &FlowBatch) -> Result<(f64, Vec<Array2<f64>>)> {
    batch.validate(&params.config)?;
    check_velocity_inputs(params, &batch.y1, &batch.token_indices, &batch.condition)?;
    let y_t = ot_interpolate(&batch.y0, &batch.y1, batch.t)?;
    let mut tape = Tape::new();
    let vars = register_flow(&mut tape, params);
    let y = tape.leaf(y_t);
    let c = tape.leaf(batch.condition.clone());
    let v = velocity_on_tape(
        &mut tape,
        &vars,
        params,
        y,
        batch.t,
        &batch.token_indices,
        batch.direction,
        c,
    )?;
    let target = tape.leaf(&batch.y1 - &batch.y0);
    let loss = tape.masked_l1(v, target, &batch.mask)?;
    tape.check_finite()?;
    let grads = tape.backward(loss);
    let ordered = vars
        .vars_in_order()
        .into_iter()
        .map(|var| {
            grads[var.0]
                .clone()
                .unwrap_or_else(|| Array2::zeros(tape.value(var).dim()))
        })
        .collect();
    Ok((tape.scalar(loss), ordered))
}

/// Adam-driven flow training; Stage 2 default learning rate is 1e-5.
pub struct FlowTrainer {
    opt: Adam,
}

impl FlowTrainer {
    pub fn new(lr: f64) -> Self {
        FlowTrainer { opt: Adam::new(lr) }
    }

    pub fn step(&mut self, params: &mut FlowModelParams, batch: &FlowBatch) -> Result<f64> {
        let (loss, grads) = flow_grad(params, batch)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        let mut refs: Vec<&mut Array2<f64>> = Vec::new();
        params.visit_mut(&mut |_, a| refs.push(a));
        self.opt.step(&mut refs, &grads)?;
        Ok(loss)
    }
}

/// Draws a training item: t uniform on [0, 1], one contiguous masked span
/// covering 40-90% of frames, Gaussian y0, and the masked condition.
pub fn sample_training_batch(
    y1: &Array2<f64>,
    token_indices: &[usize],
    direction: Direction,
    rng: &mut impl Rng,
) -> Result<FlowBatch> {
    let frames = y1.nrows();
    if frames == 0 || token_indices.len() != frames {
        return Err(Error::Argument("tokens must cover every mel frame".into()));
    }
    let frac = rng.gen_range(0.4..0.9);
    let span = ((frames as f64 * frac).round() as usize).clamp(1, frames);
    let start = rng.gen_range(0..=frames - span);
    let mut mask = vec![false; frames];
    for m in mask.iter_mut().skip(start).take(span) {
        *m = true;
    }
    let t = rng.gen_range(0.0..1.0);
    let y0 = gaussian_matrix(rng, frames, y1.ncols());
    let mut condition = y1.clone();
    for (r, &m) in mask.iter().enumerate() {
        if m {
            let noise = gaussian_matrix(rng, 1, y1.ncols());
            condition.row_mut(r).assign(&noise.row(0));
        }
    }
    Ok(FlowBatch {
        y0,
        y1: y1.clone(),
        t,
        mask,
        token_indices: token_indices.to_vec(),
        direction,
        condition,
    })
}

/// Euler integration of the learned velocity field. Prompt frames stay
/// bit-identical; only masked (target) frames are updated. Returns the
/// target region, target_frames x mel_bins.
#[allow(clippy::too_many_arguments)]
pub fn euler_sample(
    params: &FlowModelParams,
    token_indices: &[usize],
    direction: Direction,
    prompt_mel: &Array2<f64>,
    target_frames: usize,
    steps: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(Error::Argument("steps must be >= 1".into()));
    }
    let prompt_frames = prompt_mel.nrows();
    let total = prompt_frames + target_frames;
    if token_indices.len() != total {
        return Err(Error::Argument(format!(
            "tokens must cover prompt + target frames: got {}, need {}",
            token_indices.len(),
            total
        )));
    }
    if target_frames == 0 {
        return Err(Error::Argument("target_frames must be positive".into()));
    }
    if prompt_frames > 0 && prompt_mel.ncols() != params.config.mel_bins {
        return Err(Error::Argument("prompt mel bin mismatch".into()));
    }
    let mel = params.config.mel_bins;

    let mut y = Array2::zeros((total, mel));
    let mut rng = component_rng("euler-initial-noise", seed);
    let noise = gaussian_matrix(&mut rng, target_frames, mel);
    for r in 0..prompt_frames {
        y.row_mut(r).assign(&prompt_mel.row(r));
    }
    for r in 0..target_frames {
        y.row_mut(prompt_frames + r).assign(&noise.row(r));
    }
    let mask: Vec<bool> = (0..total).map(|r| r >= prompt_frames).collect();

    // The condition fixes prompt content and carries seeded noise on the
    // region to generate; it stays constant across integration steps.
    let mut cond_rng = component_rng("euler-condition-noise", seed);
    let mut condition = y.clone();
    for r in prompt_frames..total {
        let noise = gaussian_matrix(&mut cond_rng, 1, mel);
        condition.row_mut(r).assign(&noise.row(0));
    }

    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = k as f64 * dt;
        let v = velocity_forward(params, &y, t, token_indices, direction, &condition)?;
        for (r, &m) in mask.iter().enumerate() {
            if m {
                for c in 0..mel {
                    y[[r, c]] += dt * v[[r, c]];
                }
            }
        }
    }
    Ok(y.slice(ndarray::s![prompt_frames.., ..]).to_owned())
}

#[derive(Debug, Serialize, Deserialize)]
struct FlowManifest {
    kind: String,
    seed: u64,
    config: FlowConfig,
}

pub fn save_flow_model(dir: &Path, params: &FlowModelParams, seed: u64) -> Result<()> {
    let params_dir = dir.join("params");
    std::fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let manifest = FlowManifest { kind: "flow".into(), seed, config: params.config.clone() };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    let mut result = Ok(());
    params.visit(&mut |name, a| {
        if result.is_ok() {
            result = tensor_file::write_matrix(&params_dir.join(format!("{name}.wft")), a);
        }
    });
    result
}

pub fn load_flow_model(dir: &Path) -> Result<(FlowModelParams, u64)> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: FlowManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.kind != "flow" {
        return Err(Error::Format(format!(
            "{}: expected a flow checkpoint, got kind {}",
            dir.display(),
            manifest.kind
        )));
    }
    let mut params = FlowModelParams::init(manifest.config, manifest.seed)?;
    let params_dir = dir.join("params");
    let mut result = Ok(());
    params.visit_mut(&mut |name, a| {
        if result.is_err() {
            return;
        }
        match tensor_file::read_matrix(&params_dir.join(format!("{name}.wft"))) {
            Ok(m) if m.dim() == a.dim() => *a = m,
            Ok(m) => {
                result = Err(Error::Format(format!(
                    "parameter {name}: stored shape {:?} does not match model shape {:?}",
                    m.dim(),
                    a.dim()
                )))
            }
            Err(e) => result = Err(e),
        }
    });
    result.map(|_| (params, manifest.seed))
}

/// Small test model shared by unit and acceptance tests.
pub fn tiny_flow_config(mel_bins: usize, codebook_size: usize) -> FlowConfig {
    FlowConfig {
        mel_bins,
        codebook_size,
        trunk: TrunkConfig {
            layers: 1,
            dim_model: 8,
            dim_ff: 16,
            heads: 2,
            fsmn_left: 1,
            fsmn_right: 1,
            rope_base: 10_000.0,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fd;
    use rand::SeedableRng;

    fn randm(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    fn test_model(seed: u64) -> FlowModelParams {
        let mut params = FlowModelParams::init(tiny_flow_config(4, 6), seed).unwrap();
        // Randomize the zero-initialized head for gradient checks.
        let mut rng = component_rng("flow-test-head", seed);
        params.out_w = init_matrix(&mut rng, 8, 4, 0.3);
        params.out_b = init_matrix(&mut rng, 1, 4, 0.1);
        params
    }

    fn test_batch(rng: &mut rand_chacha::ChaCha8Rng, frames: usize) -> FlowBatch {
        let y1 = randm(rng, frames, 4);
        let tokens: Vec<usize> = (0..frames).map(|_| rng.gen_range(0..6)).collect();
        sample_training_batch(&y1, &tokens, Direction::W2n, rng).unwrap()
    }

    #[test]
    fn interpolate_endpoints() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(61);
        let y0 = randm(&mut rng, 3, 4);
        let y1 = randm(&mut rng, 3, 4);
        assert_eq!(ot_interpolate(&y0, &y1, 0.0).unwrap(), y0);
        assert_eq!(ot_interpolate(&y0, &y1, 1.0).unwrap(), y1);
        let zeros = Array2::zeros((3, 4));
        let mid = ot_interpolate(&zeros, &y1, 0.5).unwrap();
        for (a, b) in mid.iter().zip(y1.iter()) {
            assert!((a - 0.5 * b).abs() < 1e-12);
        }
        assert!(ot_interpolate(&y0, &y1, 1.5).is_err());
    }

    #[test]
    fn interpolate_is_linear() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(62);
        let y0 = randm(&mut rng, 3, 4);
        let y1 = randm(&mut rng, 3, 4);
        for t in [0.0, 0.25, 0.7] {
            let a = ot_interpolate(&y0, &y1, t).unwrap();
            let b = ot_interpolate(&y0, &y1, 1.0 - t).unwrap();
            let sum = &a + &b;
            let expect = &y0 + &y1;
            for (x, y) in sum.iter().zip(expect.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_condition_contract() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(63);
        let y1 = randm(&mut rng, 5, 4);
        let all_false = vec![false; 5];
        assert_eq!(make_masked_condition(&y1, &all_false, 7).unwrap(), y1);
        // Determinism.
        let mask = vec![true, false, true, true, false];
        let a = make_masked_condition(&y1, &mask, 7).unwrap();
        let b = make_masked_condition(&y1, &mask, 7).unwrap();
        assert_eq!(a, b);
        // Unmasked rows copy y1.
        for c in 0..4 {
            assert_eq!(a[[1, c]], y1[[1, c]]);
            assert_eq!(a[[4, c]], y1[[4, c]]);
        }
    }

    #[test]
    fn masked_condition_noise_moments() {
        let y1 = Array2::zeros((200, 80));
        let mask = vec![true; 200];
        let cond = make_masked_condition(&y1, &mask, 11).unwrap();
        let n = (200 * 80) as f64;
        let mean: f64 = cond.iter().sum::<f64>() / n;
        let var: f64 = cond.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() <= 0.1, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.1, "var {var}");
    }

    #[test]
    fn zero_head_gives_zero_velocity() {
        let params = FlowModelParams::init(tiny_flow_config(4, 6), 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(64);
        let y = randm(&mut rng, 5, 4);
        let cond = randm(&mut rng, 5, 4);
        let tokens = vec![0, 1, 2, 3, 4];
        let v = velocity_forward(&params, &y, 0.3, &tokens, Direction::N2w, &cond).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn velocity_preserves_frame_count() {
        let params = test_model(4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(65);
        for _ in 0..10 {
            let frames = rng.gen_range(1..30usize);
            let y = randm(&mut rng, frames, 4);
            let cond = randm(&mut rng, frames, 4);
            let tokens: Vec<usize> = (0..frames).map(|_| rng.gen_range(0..6)).collect();
            let v = velocity_forward(&params, &y, 0.5, &tokens, Direction::W2n, &cond).unwrap();
            assert_eq!(v.nrows(), frames);
            assert_eq!(v.ncols(), 4);
        }
    }

    #[test]
    fn direction_changes_output_after_training_step() {
        let mut params = test_model(5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(66);
        // One gradient step per direction so both embedding rows are live.
        let mut trainer = FlowTrainer::new(1e-3);
        for dir in [Direction::W2n, Direction::N2w] {
            let y1 = randm(&mut rng, 6, 4);
            let tokens: Vec<usize> = (0..6).map(|_| rng.gen_range(0..6)).collect();
            let batch = sample_training_batch(&y1, &tokens, dir, &mut rng).unwrap();
            trainer.step(&mut params, &batch).unwrap();
        }
        let y = randm(&mut rng, 5, 4);
        let cond = randm(&mut rng, 5, 4);
        let tokens = vec![1, 2, 3, 4, 5];
        let a = velocity_forward(&params, &y, 0.4, &tokens, Direction::W2n, &cond).unwrap();
        let b = velocity_forward(&params, &y, 0.4, &tokens, Direction::N2w, &cond).unwrap();
        let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "direction indicator has no effect");
    }

    #[test]
    fn cfm_loss_trivial_values() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(67);
        let batch = test_batch(&mut rng, 5);
        // Perfect velocity: loss 0.
        let perfect = &batch.y1 - &batch.y0;
        assert_eq!(cfm_loss_given_velocity(&perfect, &batch).unwrap(), 0.0);
        // One masked frame, all-ones error: loss 1.
        let y1 = randm(&mut rng, 3, 4);
        let y0 = randm(&mut rng, 3, 4);
        let mut batch2 = FlowBatch {
            y0: y0.clone(),
            y1: y1.clone(),
            t: 0.5,
            mask: vec![false, true, false],
            token_indices: vec![0, 1, 2],
            direction: Direction::W2n,
            condition: y1.clone(),
        };
        let mut v = &y1 - &y0;
        for c in 0..4 {
            v[[1, c]] += if c % 2 == 0 { 1.0 } else { -1.0 };
        }
        assert!((cfm_loss_given_velocity(&v, &batch2).unwrap() - 1.0).abs() < 1e-12);
        // All-false mask is degenerate.
        batch2.mask = vec![false; 3];
        assert!(matches!(
            cfm_loss_given_velocity(&v, &batch2),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn masked_loss_fd_gradient_wrt_velocity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(68);
        let batch = test_batch(&mut rng, 6);
        let v0 = randm(&mut rng, 6, 4);
        let h = 1e-4;
        for r in 0..6 {
            for c in 0..4 {
                let mut plus = v0.clone();
                plus[[r, c]] += h;
                let mut minus = v0.clone();
                minus[[r, c]] -= h;
                let fd = (cfm_loss_given_velocity(&plus, &batch).unwrap()
                    - cfm_loss_given_velocity(&minus, &batch).unwrap())
                    / (2.0 * h);
                if batch.mask[r] {
                    let masked = batch.mask.iter().filter(|&&m| m).count();
                    let sign = (v0[[r, c]] - (batch.y1[[r, c]] - batch.y0[[r, c]])).signum();
                    let expect = sign / (masked * 4) as f64;
                    assert!((fd - expect).abs() < 1e-9, "[{r},{c}] fd {fd} expect {expect}");
                } else {
                    assert_eq!(fd, 0.0, "unmasked frame leaked into the loss");
                }
            }
        }
    }

    #[test]
    fn flow_gradients_match_finite_differences() {
        let params = test_model(6);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(69);
        let batch = test_batch(&mut rng, 4);
        let (_, grads) = flow_grad(&params, &batch).unwrap();

        let mut names = Vec::new();
        params.visit(&mut |name, _| names.push(name));
        for (idx, name) in names.iter().enumerate() {
            let mut base = None;
            let mut i = 0;
            params.visit(&mut |_, a| {
                if i == idx {
                    base = Some(a.clone());
                }
                i += 1;
            });
            let base = base.unwrap();
            fd::check_grad(
                &base,
                &grads[idx],
                |candidate| {
                    let mut p = params.clone();
                    let mut i = 0;
                    p.visit_mut(&mut |_, a| {
                        if i == idx {
                            *a = candidate.clone();
                        }
                        i += 1;
                    });
                    cfm_loss(&p, &batch).unwrap()
                },
                name,
            );
        }
    }

    #[test]
    fn train_step_zero_lr_keeps_params() {
        let mut params = test_model(7);
        let snapshot = params.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(70);
        let batch = test_batch(&mut rng, 5);
        FlowTrainer::new(0.0).step(&mut params, &batch).unwrap();
        assert_eq!(params, snapshot);
    }

    #[test]
    fn euler_single_step_contract() {
        let params = test_model(8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(71);
        let prompt = randm(&mut rng, 2, 4);
        let tokens = vec![0, 1, 2, 3, 4, 5];
        let out = euler_sample(&params, &tokens, Direction::N2w, &prompt, 4, 1, 9).unwrap();

        // Reproduce by hand: noise + v_0 on the masked region.
        let mut rng0 = component_rng("euler-initial-noise", 9);
        let noise = gaussian_matrix(&mut rng0, 4, 4);
        let mut y = Array2::zeros((6, 4));
        for r in 0..2 {
            y.row_mut(r).assign(&prompt.row(r));
        }
        for r in 0..4 {
            y.row_mut(2 + r).assign(&noise.row(r));
        }
        let mut cond_rng = component_rng("euler-condition-noise", 9);
        let mut cond = y.clone();
        for r in 2..6 {
            let n = gaussian_matrix(&mut cond_rng, 1, 4);
            cond.row_mut(r).assign(&n.row(0));
        }
        let v = velocity_forward(&params, &y, 0.0, &tokens, Direction::N2w, &cond).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expect = noise[[r, c]] + v[[2 + r, c]];
                assert!((out[[r, c]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn euler_same_seed_identical() {
        let params = test_model(9);
        let prompt = Array2::zeros((1, 4));
        let tokens = vec![0, 1, 2, 3];
        let a = euler_sample(&params, &tokens, Direction::W2n, &prompt, 3, 5, 42).unwrap();
        let b = euler_sample(&params, &tokens, Direction::W2n, &prompt, 3, 5, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn euler_rejects_token_mismatch() {
        let params = test_model(10);
        let prompt = Array2::zeros((2, 4));
        let tokens = vec![0, 1, 2];
        assert!(matches!(
            euler_sample(&params, &tokens, Direction::W2n, &prompt, 4, 2, 1),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let params = test_model(11);
        save_flow_model(dir.path(), &params, 11).unwrap();
        let (loaded, seed) = load_flow_model(dir.path()).unwrap();
        assert_eq!(seed, 11);
        assert_eq!(loaded.config, params.config);
        let mut lhs = Vec::new();
        params.visit(&mut |_, a| lhs.push(a.clone()));
        let mut rhs = Vec::new();
        loaded.visit(&mut |_, a| rhs.push(a.clone()));
        for (a, b) in lhs.iter().zip(&rhs) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
