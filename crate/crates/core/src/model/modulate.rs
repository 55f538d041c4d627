use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::encoder::Encoded;
use crate::model::{Model, Modulation};
use crate::nn::mlp_apply;

/// Modulated prototypes, one row per (object, click, sample), object-major.
#[derive(Debug, Clone)]
pub struct Modulated {
    /// `R x d`.
    pub prototypes: Var,
    /// Rows of `prototypes` for each click, one per sample.
    pub click_rows: Vec<Vec<usize>>,
    /// Clicks (indices into `click_rows`) of each object in `objects`.
    pub object_clicks: Vec<Vec<usize>>,
    /// Object ids covered, in the order given to [`modulate`].
    pub objects: Vec<usize>,
    pub samples: usize,
}

/// Modulate every prototype of `objects` by the latent rows in `z`.
///
/// `z` holds `samples` rows per object (row `k * samples + j` is sample `j`
/// of `objects[k]`). In film and deterministic modes the result is
/// `(1 + gamma(z)) * x + beta(z)`; concat runs an MLP on `[x; z]`; add
/// returns `x + z`.
pub fn modulate(
    g: &mut Graph,
    model: &Model,
    enc: &Encoded,
    objects: &[usize],
    z: Var,
    samples: usize,
) -> Result<Modulated> {
    if samples == 0 {
        return Err(Error::Config("at least one latent sample is required".into()));
    }
    if g.value(z).rows() != objects.len() * samples {
        return Err(Error::Shape(format!(
            "{} latent rows for {} objects x {samples} samples",
            g.value(z).rows(),
            objects.len()
        )));
    }
    let mut proto_idx = Vec::new();
    let mut z_idx = Vec::new();
    let mut click_rows = Vec::new();
    let mut object_clicks = Vec::new();
    for (k, &m) in objects.iter().enumerate() {
        let rows = enc.groups.get(m).filter(|r| !r.is_empty()).ok_or(Error::NoPrototypes)?;
        let mut clicks = Vec::with_capacity(rows.len());
        for &r in rows {
            let mut cols = Vec::with_capacity(samples);
            for j in 0..samples {
                cols.push(proto_idx.len());
                proto_idx.push(r);
                z_idx.push(k * samples + j);
            }
            clicks.push(click_rows.len());
            click_rows.push(cols);
        }
        object_clicks.push(clicks);
    }

    let act = model.config.activation;
    let store = &model.params;
    let x = g.gather_rows(enc.prototypes, proto_idx);
    let prototypes = match model.config.modulation {
        Modulation::Film | Modulation::Deterministic => {
            let gamma = mlp_apply(g, store, z, "mod.gamma", 2, act)?;
            let beta = mlp_apply(g, store, z, "mod.beta", 2, act)?;
            let gamma = g.gather_rows(gamma, z_idx.clone());
            let beta = g.gather_rows(beta, z_idx);
            let scale = g.add_scalar(gamma, 1.0);
            let scaled = g.mul(x, scale);
            g.add(scaled, beta)
        }
        Modulation::Concat => {
            let zr = g.gather_rows(z, z_idx);
            let joined = g.concat_cols(&[x, zr]);
            mlp_apply(g, store, joined, "mod.concat", 2, act)?
        }
        Modulation::Add => {
            let zr = g.gather_rows(z, z_idx);
            g.add(x, zr)
        }
    };
    Ok(Modulated {
        prototypes,
        click_rows,
        object_clicks,
        objects: objects.to_vec(),
        samples,
    })
}
