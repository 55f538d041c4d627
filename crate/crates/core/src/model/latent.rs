//! Scene- and object-level latent Gaussians.
//!
//! The prior side reads click prototypes (`prior.*` parameters); the
//! posterior side, used only in training, reads target features grouped by
//! ground truth (`post.*` parameters). Both share the same structure.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gaussian::GaussianVar;
use crate::model::Model;
use crate::nn::{attention_apply, mlp_apply};

/// Which parameter set to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Prior,
    Posterior,
}

impl Side {
    fn prefix(self) -> &'static str {
        match self {
            Side::Prior => "prior",
            Side::Posterior => "post",
        }
    }
}

/// Scene latent from `[scene_mean; object_means]`: one self-attention layer,
/// then a two-layer head on the transformed scene token.
pub fn scene_latent(
    g: &mut Graph,
    model: &Model,
    side: Side,
    scene_mean: Var,
    object_means: Var,
) -> Result<GaussianVar> {
    let p = side.prefix();
    let act = model.config.activation;
    let tokens = g.concat_rows(&[scene_mean, object_means]);
    let attended = attention_apply(g, &model.params, tokens, &format!("{p}.scene.attn"), act)?;
    let scene_token = g.gather_rows(attended.output, vec![0]);
    let head = mlp_apply(g, &model.params, scene_token, &format!("{p}.scene.head"), 2, act)?;
    Ok(GaussianVar::from_head(g, head))
}

/// Object latents from `alpha * z_s + (1 - alpha) * aggregate`, one row per
/// object in `aggregates`. `z_s` is a single `1 x d` sample shared by all
/// objects.
pub fn object_latent(
    g: &mut Graph,
    model: &Model,
    side: Side,
    z_s: Var,
    aggregates: Var,
) -> Result<GaussianVar> {
    if g.value(aggregates).rows() == 0 {
        return Err(Error::NoPrototypes);
    }
    let alpha = model.config.alpha;
    let local = g.scale(aggregates, 1.0 - alpha);
    let global = g.scale(z_s, alpha);
    let blended = g.add_row(local, global);
    let head = mlp_apply(
        g,
        &model.params,
        blended,
        &format!("{}.object.head", side.prefix()),
        2,
        model.config.activation,
    )?;
    Ok(GaussianVar::from_head(g, head))
}
