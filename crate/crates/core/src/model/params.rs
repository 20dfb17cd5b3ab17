use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autograd::{Graph, Var};

/// Which stacked cross-modal layer supplies the guidance attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceLayer {
    First,
    #[default]
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub d_feat: usize,
    pub d_word: usize,
    pub max_positions: usize,
    #[serde(default)]
    pub guidance_layer: GuidanceLayer,
}

impl ModelConfig {
    /// Full-size settings: `d_model = 512`, 8 heads, 2 stacked layers.
    pub fn paper(d_feat: usize, d_word: usize) -> Self {
        Self {
            d_model: 512,
            heads: 8,
            layers: 2,
            d_ff: 4 * 512,
            dropout: 0.1,
            d_feat,
            d_word,
            max_positions: 512,
            guidance_layer: GuidanceLayer::Last,
        }
    }

    /// Desk-scale settings: `d_model = 64`, 4 heads, 2 stacked layers.
    pub fn desk(d_feat: usize, d_word: usize) -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            d_ff: 4 * 64,
            dropout: 0.1,
            d_feat,
            d_word,
            max_positions: 128,
            guidance_layer: GuidanceLayer::Last,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.layers == 0 || self.d_ff == 0 {
            return bad("d_model, heads, layers and d_ff must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_model % 2 != 0 {
            return bad(format!(
                "d_model {} must be even for the bidirectional query encoder",
                self.d_model
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.d_feat == 0 || self.d_word == 0 || self.max_positions == 0 {
            return bad("d_feat, d_word and max_positions must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn matrix(name: String, rows: usize, cols: usize, fan_in: usize) -> Self {
        Self {
            name,
            dims: vec![rows, cols],
            init: Init::Uniform(1.0 / (fan_in as f64).sqrt()),
        }
    }

    fn vector(name: String, len: usize, init: Init) -> Self {
        Self {
            name,
            dims: vec![len],
            init,
        }
    }

    /// Shape as a 2-D matrix; vectors become a single row.
    pub fn shape2(&self) -> (usize, usize) {
        match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("parameters are rank 1 or 2"),
        }
    }
}

fn linear(specs: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, out: usize) {
    specs.push(ParamSpec::matrix(
        format!("{prefix}.weight"),
        fan_in,
        out,
        fan_in,
    ));
    specs.push(ParamSpec::vector(
        format!("{prefix}.bias"),
        out,
        Init::Zeros,
    ));
}

fn layer_norm(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    specs.push(ParamSpec::vector(format!("{prefix}.gain"), d, Init::Ones));
    specs.push(ParamSpec::vector(format!("{prefix}.bias"), d, Init::Zeros));
}

/// Attention + normalization + feed-forward + normalization.
fn block(specs: &mut Vec<ParamSpec>, prefix: &str, cfg: &ModelConfig) {
    let d = cfg.d_model;
    for proj in ["query", "key", "value", "out"] {
        linear(specs, &format!("{prefix}.attn.{proj}"), d, d);
    }
    layer_norm(specs, &format!("{prefix}.norm1"), d);
    linear(specs, &format!("{prefix}.ff1"), d, cfg.d_ff);
    linear(specs, &format!("{prefix}.ff2"), cfg.d_ff, d);
    layer_norm(specs, &format!("{prefix}.norm2"), d);
}

/// Every parameter of the model, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let hidden = d / 2;
    let mut specs = Vec::new();

    for layer in 0..cfg.layers {
        let input = if layer == 0 { cfg.d_word } else { d };
        for dir in ["fwd", "bwd"] {
            let p = format!("query.gru{layer}.{dir}");
            specs.push(ParamSpec::matrix(
                format!("{p}.w_input"),
                input,
                3 * hidden,
                input,
            ));
            specs.push(ParamSpec::matrix(
                format!("{p}.w_hidden"),
                hidden,
                3 * hidden,
                hidden,
            ));
            specs.push(ParamSpec::vector(
                format!("{p}.b_input"),
                3 * hidden,
                Init::Zeros,
            ));
            specs.push(ParamSpec::vector(
                format!("{p}.b_hidden"),
                3 * hidden,
                Init::Zeros,
            ));
        }
    }

    linear(&mut specs, "video.proj", cfg.d_feat, d);
    specs.push(ParamSpec::matrix(
        "video.position".into(),
        cfg.max_positions,
        d,
        d,
    ));
    for layer in 0..cfg.layers {
        block(&mut specs, &format!("video.layer{layer}"), cfg);
    }

    for layer in 0..cfg.layers {
        block(&mut specs, &format!("cross{layer}.q2v"), cfg);
        block(&mut specs, &format!("cross{layer}.v2q"), cfg);
    }
    specs
}

/// One named parameter tensor. Rank-1 tensors are held as a single row.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub dims: Vec<usize>,
    pub value: Array2<f64>,
}

/// Named parameter set, ordered by name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Parameters {
    entries: BTreeMap<String, Param>,
}

/// Rounds to the nearest `f32`; parameters and optimizer state live at
/// storage precision so checkpoints are lossless.
pub fn to_storage(v: f64) -> f64 {
    v as f32 as f64
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, value: Array2<f64>) {
        self.entries.insert(name.into(), Param { dims, value });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Zero-valued tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            dims: p.dims.clone(),
                            value: Array2::zeros(p.value.dim()),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Checks names and shapes against the specs of `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let specs = param_specs(cfg);
        if specs.len() != self.entries.len() {
            return Err(ModelError::ParamMismatch(format!(
                "expected {} tensors, found {}",
                specs.len(),
                self.entries.len()
            )));
        }
        for spec in specs {
            let p = self
                .entries
                .get(&spec.name)
                .ok_or_else(|| ModelError::ParamMismatch(format!("missing `{}`", spec.name)))?;
            if p.dims != spec.dims {
                return Err(ModelError::ParamMismatch(format!(
                    "`{}` has dims {:?}, expected {:?}",
                    spec.name, p.dims, spec.dims
                )));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Draws every weight uniformly within its fan-in bound; biases and
/// normalization offsets start at zero, gains at one.
pub fn init_params<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<Parameters, ModelError> {
    cfg.validate()?;
    let mut params = Parameters::new();
    for spec in param_specs(cfg) {
        let shape = spec.shape2();
        let value = match spec.init {
            Init::Uniform(b) => {
                Array2::from_shape_simple_fn(shape, || to_storage(rng.gen_range(-b..=b)))
            }
            Init::Zeros => Array2::zeros(shape),
            Init::Ones => Array2::ones(shape),
        };
        params.insert(spec.name, spec.dims, value);
    }
    Ok(params)
}

/// Parameters placed on a graph, looked up by name.
#[derive(Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binds parameters as differentiable leaves.
    pub fn trainable(graph: &mut Graph, params: &Parameters) -> Self {
        Self::bind(graph, params, true)
    }

    /// Binds parameters as constants (inference only).
    pub fn frozen(graph: &mut Graph, params: &Parameters) -> Self {
        Self::bind(graph, params, false)
    }

    fn bind(graph: &mut Graph, params: &Parameters, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, p)| {
                let v = if trainable {
                    graph.param(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
