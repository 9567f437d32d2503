//! The three-modality alignment model: per-modality MLP encoders with
//! learned positional tables, a joint pre-norm transformer over
//! `[frames; narrations; steps]`, and cosine alignment heads.

mod checkpoint;
mod forward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Dims;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub use checkpoint::{load_params, save_params, CHECKPOINT_VERSION};
pub use forward::{
    bind_params, cosine_alignment, forward, forward_item, fuse, indirect_alignment, multimodal_encode,
    record_forward, unimodal_encode, AlignmentSet, ForwardInput, ParamVars, RecordedAlignment, COSINE_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Narration,
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub video_dim: usize,
    pub narration_dim: usize,
    pub step_dim: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_frames: usize,
    pub max_narrations: usize,
    pub max_steps: usize,
    pub pe_for_steps: bool,
    pub separate_text_mlp: bool,
    pub activation: Activation,
    /// Temperature of the step-to-narration softmax in the indirect pathway.
    pub xi: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            video_dim: 32,
            narration_dim: 24,
            step_dim: 24,
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            max_frames: 256,
            max_narrations: 32,
            max_steps: 16,
            pe_for_steps: true,
            separate_text_mlp: true,
            activation: Activation::Gelu,
            xi: 0.07,
        }
    }
}

impl ModelConfig {
    /// Desk-scale defaults sized for `dims`.
    pub fn desk(dims: Dims) -> Self {
        ModelConfig {
            video_dim: dims.video,
            narration_dim: dims.narration,
            step_dim: dims.step,
            ..ModelConfig::default()
        }
    }

    /// 512-wide, 6-layer, 8-head stack with 1024 frames of context.
    pub fn paper_scale(dims: Dims) -> Self {
        ModelConfig {
            d_model: 512,
            layers: 6,
            heads: 8,
            max_frames: 1024,
            max_narrations: 256,
            max_steps: 64,
            ..ModelConfig::desk(dims)
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            video: self.video_dim,
            narration: self.narration_dim,
            step: self.step_dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.video_dim == 0 || self.narration_dim == 0 || self.step_dim == 0 {
            return Err(Error::Config("input dimensions must be >= 1".into()));
        }
        if !self.separate_text_mlp && self.narration_dim != self.step_dim {
            return Err(Error::Config(format!(
                "a shared text MLP needs equal narration ({}) and step ({}) dims",
                self.narration_dim, self.step_dim
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be >= 1".into()));
        }
        if !(self.xi > 0.0) {
            return Err(Error::Config(format!("xi = {} must be > 0", self.xi)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub ff_w1: usize,
    pub ff_b1: usize,
    pub ff_w2: usize,
    pub ff_b2: usize,
}

/// Positions of every named tensor in [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub video_mlp: MlpIdx,
    pub narration_mlp: MlpIdx,
    /// Same as `narration_mlp` when the text MLP is shared.
    pub step_mlp: MlpIdx,
    pub pos_video: usize,
    pub pos_narration: usize,
    pub pos_step: Option<usize>,
    pub layers: Vec<LayerIdx>,
    pub final_g: usize,
    pub final_b: usize,
}

/// How each tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`, fan-in = rows.
    Affine,
    Zeros,
    Ones,
    Positional,
}

struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

struct LayoutBuilder {
    specs: Vec<Spec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(Spec { name, rows, cols, init });
        self.specs.len() - 1
    }

    fn mlp(&mut self, prefix: &str, input: usize, d: usize) -> MlpIdx {
        MlpIdx {
            w1: self.add(format!("{prefix}.w1"), input, d, Init::Affine),
            b1: self.add(format!("{prefix}.b1"), 1, d, Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), d, d, Init::Affine),
            b2: self.add(format!("{prefix}.b2"), 1, d, Init::Zeros),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<Spec>) {
    let d = cfg.d_model;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let video_mlp = b.mlp("video_mlp", cfg.video_dim, d);
    let narration_mlp = b.mlp(
        if cfg.separate_text_mlp { "narration_mlp" } else { "text_mlp" },
        cfg.narration_dim,
        d,
    );
    let step_mlp = if cfg.separate_text_mlp {
        b.mlp("step_mlp", cfg.step_dim, d)
    } else {
        narration_mlp
    };
    let pos_video = b.add("pos.video".into(), cfg.max_frames, d, Init::Positional);
    let pos_narration = b.add("pos.narration".into(), cfg.max_narrations, d, Init::Positional);
    let pos_step = cfg
        .pe_for_steps
        .then(|| b.add("pos.step".into(), cfg.max_steps, d, Init::Positional));
    let hidden = d * cfg.ffn_mult;
    let layers = (0..cfg.layers)
        .map(|l| {
            let p = |s: &str| format!("layers.{l}.{s}");
            LayerIdx {
                ln1_g: b.add(p("ln1.g"), 1, d, Init::Ones),
                ln1_b: b.add(p("ln1.b"), 1, d, Init::Zeros),
                wq: b.add(p("attn.wq"), d, d, Init::Affine),
                bq: b.add(p("attn.bq"), 1, d, Init::Zeros),
                wk: b.add(p("attn.wk"), d, d, Init::Affine),
                bk: b.add(p("attn.bk"), 1, d, Init::Zeros),
                wv: b.add(p("attn.wv"), d, d, Init::Affine),
                bv: b.add(p("attn.bv"), 1, d, Init::Zeros),
                wo: b.add(p("attn.wo"), d, d, Init::Affine),
                bo: b.add(p("attn.bo"), 1, d, Init::Zeros),
                ln2_g: b.add(p("ln2.g"), 1, d, Init::Ones),
                ln2_b: b.add(p("ln2.b"), 1, d, Init::Zeros),
                ff_w1: b.add(p("ffn.w1"), d, hidden, Init::Affine),
                ff_b1: b.add(p("ffn.b1"), 1, hidden, Init::Zeros),
                ff_w2: b.add(p("ffn.w2"), hidden, d, Init::Affine),
                ff_b2: b.add(p("ffn.b2"), 1, d, Init::Zeros),
            }
        })
        .collect();
    let final_g = b.add("final_ln.g".into(), 1, d, Init::Ones);
    let final_b = b.add("final_ln.b".into(), 1, d, Init::Zeros);
    (
        Layout {
            video_mlp,
            narration_mlp,
            step_mlp,
            pos_video,
            pos_narration,
            pos_step,
            layers,
            final_g,
            final_b,
        },
        b.specs,
    )
}

/// All trainable tensors, addressed by [`Layout`] index or by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    tensors: Vec<Mat>,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = Normal::new(0.0, 0.02).expect("valid normal");
        let tensors = specs
            .iter()
            .map(|s| match s.init {
                Init::Zeros => Mat::zeros(s.rows, s.cols),
                Init::Ones => Mat::filled(s.rows, s.cols, 1.0),
                Init::Affine => {
                    let bound = 1.0 / (s.rows as f64).sqrt();
                    let data = (0..s.rows * s.cols).map(|_| rng.random_range(-bound..=bound)).collect();
                    Mat::from_vec(s.rows, s.cols, data)
                }
                Init::Positional => {
                    let data = (0..s.rows * s.cols).map(|_| pos.sample(&mut rng)).collect();
                    Mat::from_vec(s.rows, s.cols, data)
                }
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            layout,
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors,
        })
    }

    /// Rebuilds params from tensors in layout order, checking every shape.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Mat>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        if specs.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if t.shape() != (s.rows, s.cols) {
                return Err(Error::Shape(format!(
                    "tensor `{}` is {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    (s.rows, s.cols)
                )));
            }
        }
        Ok(ModelParams {
            config: config.clone(),
            layout,
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Mat::zeros(t.rows(), t.cols())).collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Mat::all_finite)
    }

    pub(crate) fn mlp_for(&self, modality: Modality) -> MlpIdx {
        match modality {
            Modality::Video => self.layout.video_mlp,
            Modality::Narration => self.layout.narration_mlp,
            Modality::Step => self.layout.step_mlp,
        }
    }

    pub(crate) fn pos_for(&self, modality: Modality) -> Option<usize> {
        match modality {
            Modality::Video => Some(self.layout.pos_video),
            Modality::Narration => Some(self.layout.pos_narration),
            Modality::Step => self.layout.pos_step,
        }
    }

    pub(crate) fn input_dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Video => self.config.video_dim,
            Modality::Narration => self.config.narration_dim,
            Modality::Step => self.config.step_dim,
        }
    }

    pub(crate) fn max_len(&self, modality: Modality) -> usize {
        match modality {
            Modality::Video => self.config.max_frames,
            Modality::Narration => self.config.max_narrations,
            Modality::Step => self.config.max_steps,
        }
    }
}
