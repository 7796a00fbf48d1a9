//! The UMAVR network: convolutional stem, MetaFormer blocks with a
//! three-pathway token mixer, and answer/rule heads. Forward and backward
//! passes are written by hand over flat parameter vectors.

mod gradcheck;
mod model;
pub mod ops;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckReport};
pub use model::{Mode, Outputs, Tape, TokenGrid};
pub use ops::Real;

use ops::ConvGeom;

/// Hidden width of the auxiliary rule head.
pub const AUX_HIDDEN: usize = 128;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input is {got_h}x{got_w}, model expects {want_h}x{want_w}")]
    InputSize { got_h: usize, got_w: usize, want_h: usize, want_w: usize },
    #[error("batch buffer holds {got} values, expected {want}")]
    BatchLength { got: usize, want: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stem_channels: Vec<usize>,
    pub blocks: usize,
    pub segments: usize,
    pub expansion: usize,
    pub n_a: usize,
    pub rule_dim: usize,
    pub input_h: usize,
    pub input_w: usize,
}

impl ModelConfig {
    /// Full-size configuration. Five blocks put the parameter count at
    /// 3,696,106 for a 544x416 canvas with 8 answers and 50 rule bits.
    pub fn standard(input_h: usize, input_w: usize, n_a: usize, rule_dim: usize) -> Self {
        ModelConfig {
            stem_channels: vec![16, 16, 32, 128],
            blocks: 5,
            segments: 8,
            expansion: 4,
            n_a,
            rule_dim,
            input_h,
            input_w,
        }
    }

    /// Small configuration that trains on a single CPU core.
    pub fn compact(input_h: usize, input_w: usize, n_a: usize, rule_dim: usize) -> Self {
        ModelConfig {
            stem_channels: vec![4, 8, 16, 32],
            blocks: 1,
            segments: 4,
            expansion: 2,
            n_a,
            rule_dim,
            input_h,
            input_w,
        }
    }

    pub fn stem_depth(&self) -> usize {
        self.stem_channels.len()
    }

    pub fn d(&self) -> usize {
        self.stem_channels.last().copied().unwrap_or(0)
    }

    /// Token grid `(rows, cols)` after the stem.
    pub fn grid(&self) -> (usize, usize) {
        let f = 1usize << self.stem_depth();
        (self.input_h / f, self.input_w / f)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let err = |m: String| Err(NetError::Config(m));
        if self.stem_channels.is_empty() || self.stem_channels.contains(&0) {
            return err("stem needs at least one stage with nonzero channels".into());
        }
        let f = 1usize << self.stem_depth();
        if self.input_h == 0 || self.input_w == 0 || !self.input_h.is_multiple_of(f) || !self.input_w.is_multiple_of(f) {
            return err(format!("input {}x{} is not divisible by {f}", self.input_h, self.input_w));
        }
        if self.segments == 0 || !self.d().is_multiple_of(self.segments) {
            return err(format!("d={} is not divisible by S={}", self.d(), self.segments));
        }
        if self.expansion == 0 {
            return err("expansion must be positive".into());
        }
        if self.n_a < 2 {
            return err(format!("n_a={} must be at least 2", self.n_a));
        }
        Ok(())
    }
}

/// How a tensor is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Weight { fan_in: usize },
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
    pub init: Init,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct StemLayer {
    pub geom: ConvGeom,
    pub c_out: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
    pub gamma: Range<usize>,
    pub beta: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockLayer {
    pub norm1_g: Range<usize>,
    pub norm1_b: Range<usize>,
    pub local_w: Range<usize>,
    pub local_b: Range<usize>,
    pub height_w: Range<usize>,
    pub height_b: Range<usize>,
    pub width_w: Range<usize>,
    pub width_b: Range<usize>,
    pub chan_w: Range<usize>,
    pub chan_b: Range<usize>,
    pub fuse_w: Range<usize>,
    pub fuse_b: Range<usize>,
    pub norm2_g: Range<usize>,
    pub norm2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct HeadLayer {
    pub norm_g: Range<usize>,
    pub norm_b: Range<usize>,
    pub answer_w: Range<usize>,
    pub answer_b: Range<usize>,
    pub aux1_w: Range<usize>,
    pub aux1_b: Range<usize>,
    pub aux2_w: Range<usize>,
    pub aux2_b: Range<usize>,
}

/// Flat parameter layout in declaration order. Weight matrices are stored
/// `out x in`; conv kernels `out x in x k x k`. Spatial pathway matrices
/// index rows and columns as `segment * extent + position`, with channel
/// `c = group * S + segment`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub(crate) stem: Vec<StemLayer>,
    pub(crate) blocks: Vec<BlockLayer>,
    pub(crate) head: HeadLayer,
    pub total: usize,
}

struct LayoutBuilder {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: &[usize], init: Init) -> Range<usize> {
        let len: usize = shape.iter().product();
        let range = self.total..self.total + len;
        self.total += len;
        self.tensors.push(TensorInfo { name, shape: shape.to_vec(), range: range.clone(), init });
        range
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> (Range<usize>, Range<usize>) {
        let w = self.push(format!("{name}.weight"), &[out, inp], Init::Weight { fan_in: inp });
        let b = self.push(format!("{name}.bias"), &[out], Init::Zeros);
        (w, b)
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) -> (Range<usize>, Range<usize>) {
        let w = self.push(format!("{name}.weight"), &[out, inp, k, k], Init::Weight { fan_in: inp * k * k });
        let b = self.push(format!("{name}.bias"), &[out], Init::Zeros);
        (w, b)
    }

    fn norm(&mut self, name: &str, c: usize) -> (Range<usize>, Range<usize>) {
        let g = self.push(format!("{name}.scale"), &[c], Init::Ones);
        let b = self.push(format!("{name}.shift"), &[c], Init::Zeros);
        (g, b)
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Result<Self, NetError> {
        config.validate()?;
        let mut lb = LayoutBuilder { tensors: Vec::new(), total: 0 };
        let (mut h, mut w, mut c_in) = (config.input_h, config.input_w, 1);
        let mut stem = Vec::new();
        for (i, &c_out) in config.stem_channels.iter().enumerate() {
            let (weight, bias) = lb.conv(&format!("stem.{i}.conv"), c_out, c_in, 3);
            let (gamma, beta) = lb.norm(&format!("stem.{i}.bn"), c_out);
            let geom = ConvGeom { c_in, h, w, kernel: 3, stride: 2, pad: 1 };
            stem.push(StemLayer { geom, c_out, weight, bias, gamma, beta });
            h /= 2;
            w /= 2;
            c_in = c_out;
        }
        let d = config.d();
        let s = config.segments;
        let kd = config.expansion * d;
        let mut blocks = Vec::new();
        for b in 0..config.blocks {
            let p = |n: &str| format!("block.{b}.{n}");
            let (norm1_g, norm1_b) = lb.norm(&p("norm1"), d);
            let (local_w, local_b) = lb.conv(&p("local"), d, d, 5);
            let (height_w, height_b) = lb.linear(&p("height"), h * s, h * s);
            let (width_w, width_b) = lb.linear(&p("width"), w * s, w * s);
            let (chan_w, chan_b) = lb.linear(&p("channel"), d, d);
            let (fuse_w, fuse_b) = lb.linear(&p("fuse"), d, 3 * d);
            let (norm2_g, norm2_b) = lb.norm(&p("norm2"), d);
            let (w1, b1) = lb.linear(&p("mlp1"), kd, d);
            let (w2, b2) = lb.linear(&p("mlp2"), d, kd);
            blocks.push(BlockLayer {
                norm1_g,
                norm1_b,
                local_w,
                local_b,
                height_w,
                height_b,
                width_w,
                width_b,
                chan_w,
                chan_b,
                fuse_w,
                fuse_b,
                norm2_g,
                norm2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let (norm_g, norm_b) = lb.norm("head.norm", d);
        let (answer_w, answer_b) = lb.linear("head.answer", config.n_a, d);
        let (aux1_w, aux1_b) = lb.linear("head.aux1", AUX_HIDDEN, d);
        let (aux2_w, aux2_b) = lb.linear("head.aux2", config.rule_dim, AUX_HIDDEN);
        let head = HeadLayer { norm_g, norm_b, answer_w, answer_b, aux1_w, aux1_b, aux2_w, aux2_b };
        Ok(Layout { tensors: lb.tensors, stem, blocks, head, total: lb.total })
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Exact number of learnable scalars.
pub fn count_params(config: &ModelConfig) -> Result<usize, NetError> {
    Ok(Layout::new(config)?.total)
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

fn init_tensor<T: Real>(info: &TensorInfo, out: &mut [T], rng: &mut ChaCha8Rng) {
    match info.init {
        Init::Ones => out.fill(T::one()),
        Init::Zeros => out.fill(T::zero()),
        Init::Weight { fan_in } => {
            let std = 1.0 / (fan_in as f64).sqrt();
            out.iter_mut().for_each(|v| *v = T::lit(truncated_normal(rng) * std));
        }
    }
}

/// Parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<T>,
    /// Running means then running variances, one pair of vectors per stem stage.
    pub running: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Network<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NetError> {
        let layout = Layout::new(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); layout.total];
        for info in &layout.tensors {
            init_tensor(info, &mut params[info.range.clone()], &mut rng);
        }
        let running = config.stem_channels.iter().map(|&c| (vec![T::zero(); c], vec![T::one(); c])).collect();
        Ok(Network { config, layout, params, running })
    }

    pub fn from_parts(config: ModelConfig, params: Vec<T>, running: Vec<(Vec<T>, Vec<T>)>) -> Result<Self, NetError> {
        let layout = Layout::new(&config)?;
        if params.len() != layout.total {
            return Err(NetError::Config(format!("{} parameters, layout needs {}", params.len(), layout.total)));
        }
        let shapes_ok = running.len() == config.stem_depth()
            && running.iter().zip(&config.stem_channels).all(|((m, v), &c)| m.len() == c && v.len() == c);
        if !shapes_ok {
            return Err(NetError::Config("running statistics do not match the stem".into()));
        }
        Ok(Network { config, layout, params, running })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.tensor(name).map(|t| &self.params[t.range.clone()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let range = self.layout.tensor(name)?.range.clone();
        Some(&mut self.params[range])
    }

    /// Copy of this network with heads sized for `n_a` answers and
    /// `rule_dim` rule bits. Answer rows shared with the current head are
    /// copied when `keep_rows` is set; other answer rows, and the whole rule
    /// output layer when its size changes, are freshly initialised from `seed`.
    pub fn with_heads(&self, n_a: usize, rule_dim: usize, keep_rows: bool, seed: u64) -> Result<Self, NetError> {
        let config = ModelConfig { n_a, rule_dim, ..self.config.clone() };
        let layout = Layout::new(&config)?;
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d();
        for info in &layout.tensors {
            let old = self.layout.tensor(&info.name).expect("same architecture");
            let dst = &mut params[info.range.clone()];
            let answer = info.name.starts_with("head.answer.");
            if answer && n_a != self.config.n_a {
                init_tensor(info, dst, &mut rng);
                if keep_rows {
                    let row = if info.shape.len() == 2 { d } else { 1 };
                    let shared = n_a.min(self.config.n_a) * row;
                    dst[..shared].copy_from_slice(&self.params[old.range.start..old.range.start + shared]);
                }
            } else if info.name.starts_with("head.aux2.") && rule_dim != self.config.rule_dim {
                init_tensor(info, dst, &mut rng);
            } else {
                dst.copy_from_slice(&self.params[old.range.clone()]);
            }
        }
        Ok(Network { config, layout, params, running: self.running.clone() })
    }

    /// Converts the element type, e.g. for double-precision checks.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect::<Vec<U>>();
        Network {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: conv(&self.params),
            running: self.running.iter().map(|(m, v)| (conv(m), conv(v))).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig {
            stem_channels: vec![4],
            blocks: 1,
            segments: 2,
            expansion: 2,
            n_a: 2,
            rule_dim: 3,
            input_h: 32,
            input_w: 32,
        }
    }

    #[test]
    fn toy_count_matches_hand_tally() {
        let stem = 9 * 4 + 4 + 4 + 4;
        let grid = 16;
        let block = 4 + 4
            + (4 * 4 * 25 + 4)
            + (2 * grid * 2 * grid + 2 * grid)
            + (2 * grid * 2 * grid + 2 * grid)
            + (4 * 4 + 4)
            + (12 * 4 + 4)
            + 4 + 4
            + (4 * 8 + 8)
            + (8 * 4 + 4);
        let heads = 4 + 4 + (4 * 2 + 2) + (4 * 128 + 128) + (128 * 3 + 3);
        assert_eq!(stem + block + heads, 3773);
        assert_eq!(count_params(&toy()).unwrap(), 3773);
    }

    #[test]
    fn standard_count_is_calibrated() {
        let n = count_params(&ModelConfig::standard(544, 416, 8, 50)).unwrap();
        assert_eq!(n, 3_696_106);
        assert!((n as f64 - 3.5e6).abs() <= 0.35e6);
    }

    #[test]
    fn answer_count_adds_head_rows_only() {
        let base = toy();
        let a = count_params(&base).unwrap();
        let b = count_params(&ModelConfig { n_a: 5, ..base.clone() }).unwrap();
        assert_eq!(b - a, base.d() * 3 + 3);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = toy();
        c.segments = 3;
        assert!(c.validate().is_err());
        let mut c = toy();
        c.input_h = 31;
        assert!(c.validate().is_err());
        let mut c = toy();
        c.n_a = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_follows_rules() {
        let a = Network::<f32>::new(toy(), 7).unwrap();
        let b = Network::<f32>::new(toy(), 7).unwrap();
        let c = Network::<f32>::new(toy(), 8).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        assert!(a.tensor("stem.0.bn.scale").unwrap().iter().all(|&v| v == 1.0));
        assert!(a.tensor("head.answer.bias").unwrap().iter().all(|&v| v == 0.0));
        let w = a.tensor("block.0.local.weight").unwrap();
        let bound = 2.0 / (100f32).sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn answer_head_extension_keeps_shared_rows() {
        let net = Network::<f32>::new(toy(), 1).unwrap();
        let big = net.with_heads(4, 3, true, 9).unwrap();
        let old = net.tensor("head.answer.weight").unwrap();
        let new = big.tensor("head.answer.weight").unwrap();
        assert_eq!(&new[..old.len()], old);
        assert_eq!(new.len(), 4 * 4);
        assert_eq!(net.tensor("block.0.fuse.weight"), big.tensor("block.0.fuse.weight"));
        let fresh = net.with_heads(4, 3, false, 9).unwrap();
        assert_ne!(&fresh.tensor("head.answer.weight").unwrap()[..old.len()], old);
        let same = net.with_heads(2, 5, false, 9).unwrap();
        assert_eq!(same.tensor("head.answer.weight").unwrap(), old);
        assert_eq!(same.tensor("head.aux2.weight").unwrap().len(), 5 * AUX_HIDDEN);
    }
}
