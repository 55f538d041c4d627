//! Hierarchical latent-variable segmentation model.
//!
//! Forward pass: [`encoder`] turns the scene and clicks into point features
//! and click prototypes; [`latent`] infers the scene latent from prototype
//! summaries and one object latent per clicked object; [`modulate`] rescales
//! and shifts each prototype by samples of its object latent; [`head`] scores
//! points by cosine similarity and reports the sample variance as uncertainty.
//! [`forward`] wires these together for inference and for training.

pub mod encoder;
pub mod forward;
pub mod head;
pub mod latent;
pub mod modulate;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_attention, init_mlp, Activation};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use encoder::{encode_points, summarize_prototypes, ClickPrototypes, Encoded, PrototypeSummary};
pub use forward::{forward_infer, forward_train, infer_with_latents, LossComponents, PriorLatents, TrainPass};
pub use head::{predict, PredictionBundle};
pub use modulate::{modulate, Modulated};

/// Largest object id the previous-mask channel can encode.
pub const MAX_OBJECT_ID: usize = 7;
/// Width of the previous-mask embedding.
pub const PREV_MASK_CHANNELS: usize = 15;
/// Width of the raw per-point encoder input.
pub const POINT_INPUT_WIDTH: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    /// Scale and shift from two MLP heads on the latent sample.
    Film,
    /// MLP over the concatenated prototype and latent sample.
    Concat,
    /// Prototype plus latent sample.
    Add,
    /// Film heads driven by the object's mean prototype, one sample.
    Deterministic,
}

impl std::str::FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "film" => Ok(Self::Film),
            "concat" => Ok(Self::Concat),
            "add" => Ok(Self::Add),
            "deterministic" => Ok(Self::Deterministic),
            other => Err(Error::Config(format!("unknown modulation mode `{other}`"))),
        }
    }
}

/// How the object-latent input aggregates an object's prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeAggregation {
    #[default]
    Sum,
    Mean,
}

impl std::str::FromStr for PrototypeAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    /// Weight of the scene sample against the prototype term in the object-latent input.
    pub alpha: f64,
    /// Latent samples per object at inference.
    pub mc_samples: usize,
    pub init_temperature: f64,
    pub use_scene_latent: bool,
    pub use_object_latent: bool,
    pub modulation: Modulation,
    pub use_prev_mask: bool,
    pub background_prototypes: usize,
    pub knn: usize,
    /// Scene points the click prototypes attend to.
    pub scene_tokens: usize,
    pub prototype_aggregation: PrototypeAggregation,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            hidden_dim: 64,
            alpha: 0.5,
            mc_samples: 10,
            init_temperature: 10.0,
            use_scene_latent: true,
            use_object_latent: true,
            modulation: Modulation::Film,
            use_prev_mask: false,
            background_prototypes: 1,
            knn: 16,
            scene_tokens: 128,
            prototype_aggregation: PrototypeAggregation::Sum,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    /// The latent-free baseline: no scene or object latent, deterministic modulation.
    pub fn baseline() -> Self {
        Self {
            use_scene_latent: false,
            use_object_latent: false,
            modulation: Modulation::Deterministic,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be >= 1".into()));
        }
        if !(self.init_temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.scene_tokens == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Latent samples actually drawn per object at inference.
    pub fn effective_samples(&self) -> usize {
        if self.modulation == Modulation::Deterministic || !self.use_object_latent {
            1
        } else {
            self.mc_samples
        }
    }

    fn uses_film_heads(&self) -> bool {
        matches!(self.modulation, Modulation::Film | Modulation::Deterministic)
    }
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Self { config, params })
    }

    /// Current logit temperature.
    pub fn temperature(&self) -> f64 {
        self.params
            .get("head.log_temp")
            .map_or(self.config.init_temperature, |t| t.item().exp())
    }

    /// Check that `params` holds exactly the tensors `config` calls for.
    pub fn validate_params(config: &ModelConfig, params: &ParamStore) -> Result<()> {
        let reference = init_params(config, 0);
        for (name, t) in reference.iter() {
            match params.get(name) {
                None => return Err(Error::MissingParam(name.to_string())),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let d = cfg.feature_dim;
    let h = cfg.hidden_dim;
    let mut s = ParamStore::new(seed);
    let mut input = POINT_INPUT_WIDTH;
    if cfg.use_prev_mask {
        init_mlp(&mut s, "enc.prev", &[MAX_OBJECT_ID + 1, 16, 16, 16, PREV_MASK_CHANNELS], false);
        input += PREV_MASK_CHANNELS;
    }
    init_mlp(&mut s, "enc.mlp", &[input, h, h, d], false);
    init_attention(&mut s, "enc.attn", d);
    if cfg.background_prototypes > 0 {
        let bg = s.normal("enc.bg", &[cfg.background_prototypes, d], 1.0);
        s.insert("enc.bg", bg);
    }
    for side in ["prior", "post"] {
        init_attention(&mut s, &format!("{side}.scene.attn"), d);
        init_mlp(&mut s, &format!("{side}.scene.head"), &[d, d, 2 * d], false);
        init_mlp(&mut s, &format!("{side}.object.head"), &[d, d, 2 * d], false);
    }
    if cfg.uses_film_heads() {
        init_mlp(&mut s, "mod.gamma", &[d, d, d], false);
        init_mlp(&mut s, "mod.beta", &[d, d, d], false);
    }
    if cfg.modulation == Modulation::Concat {
        init_mlp(&mut s, "mod.concat", &[2 * d, d, d], false);
    }
    s.insert("head.log_temp", Tensor::scalar(cfg.init_temperature.ln()));
    s
}

/// One user click: a scene point and the object it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub point_index: usize,
    pub object_id: usize,
}

impl Click {
    pub fn new(point_index: usize, object_id: usize) -> Self {
        Self {
            point_index,
            object_id,
        }
    }
}

/// Ordered clicks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClickSet {
    clicks: Vec<Click>,
}

impl ClickSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, click: Click) {
        self.clicks.push(click);
    }

    pub fn pop(&mut self) -> Option<Click> {
        self.clicks.pop()
    }

    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Click> {
        self.clicks.iter()
    }

    pub fn as_slice(&self) -> &[Click] {
        &self.clicks
    }

    pub fn max_object(&self) -> Option<usize> {
        self.clicks.iter().map(|c| c.object_id).max()
    }

    /// Positions in the list per object id `0..=num_objects`.
    pub fn groups(&self, num_objects: usize) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); num_objects + 1];
        for (k, c) in self.clicks.iter().enumerate() {
            if c.object_id <= num_objects {
                g[c.object_id].push(k);
            }
        }
        g
    }

    pub fn contains(&self, click: &Click) -> bool {
        self.clicks.contains(click)
    }
}

impl FromIterator<Click> for ClickSet {
    fn from_iter<I: IntoIterator<Item = Click>>(iter: I) -> Self {
        Self {
            clicks: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a ClickSet {
    type Item = &'a Click;
    type IntoIter = std::slice::Iter<'a, Click>;

    fn into_iter(self) -> Self::IntoIter {
        self.clicks.iter()
    }
}
