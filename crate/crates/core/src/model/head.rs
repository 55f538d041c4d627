use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::loss::COSINE_EPS;
use crate::model::modulate::Modulated;

/// Per-object scores, hard mask and uncertainty for every point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    /// `(M + 1) x N` cosine logits; rows of absent objects are `-inf`.
    pub logits: Vec<Vec<f64>>,
    /// Which object ids had prototypes.
    pub present: Vec<bool>,
    pub mask: Vec<usize>,
    /// Maximum over objects of the per-object uncertainty.
    pub uncertainty: Vec<f64>,
    /// `(M + 1) x N`; zero for absent objects.
    pub per_object_uncertainty: Vec<Vec<f64>>,
}

impl PredictionBundle {
    pub fn mean_uncertainty(&self) -> f64 {
        self.uncertainty.iter().sum::<f64>() / self.uncertainty.len().max(1) as f64
    }
}

/// Graph outputs of the mask head.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `N x R` cosine of every point with every modulated prototype.
    pub cosines: Var,
    /// `N x G` logits of the covered objects: max over clicks of the sample mean.
    pub logits: Var,
}

pub fn score(g: &mut Graph, features: Var, modulated: &Modulated) -> Result<HeadOutput> {
    if modulated.click_rows.is_empty() {
        return Err(Error::NoPrototypes);
    }
    let cosines = g.cosine(features, modulated.prototypes, COSINE_EPS);
    let per_click = g.group_mean_cols(cosines, modulated.click_rows.clone());
    let logits = g.group_max_cols(per_click, &modulated.object_clicks);
    Ok(HeadOutput { cosines, logits })
}

/// Score points against the modulated prototypes.
///
/// The logit of object `m` at a point is the maximum over its clicks of the
/// sample-averaged cosine; the mask takes the best present object (lowest id
/// on ties). Uncertainty replaces the sample mean with the sample variance,
/// takes the maximum over clicks and then over objects.
pub fn predict(g: &mut Graph, features: Var, modulated: &Modulated, num_objects: usize) -> Result<PredictionBundle> {
    let out = score(g, features, modulated)?;
    let n = g.value(features).rows();
    let logit_vals = g.value(out.logits);
    let cos = g.value(out.cosines);
    let r = cos.cols();

    let mut logits = vec![vec![f64::NEG_INFINITY; n]; num_objects + 1];
    let mut present = vec![false; num_objects + 1];
    let mut per_object_uncertainty = vec![vec![0.0; n]; num_objects + 1];
    let gcount = modulated.objects.len();
    for (k, &m) in modulated.objects.iter().enumerate() {
        if m > num_objects {
            return Err(Error::Shape(format!("object {m} beyond {num_objects}")));
        }
        present[m] = true;
        for t in 0..n {
            logits[m][t] = logit_vals.data()[t * gcount + k];
        }
        let u = &mut per_object_uncertainty[m];
        for &c in &modulated.object_clicks[k] {
            let cols = &modulated.click_rows[c];
            let s = cols.len() as f64;
            for t in 0..n {
                let row = &cos.data()[t * r..(t + 1) * r];
                let mean = cols.iter().map(|&j| row[j]).sum::<f64>() / s;
                let var = cols.iter().map(|&j| (row[j] - mean).powi(2)).sum::<f64>() / s;
                if var > u[t] {
                    u[t] = var;
                }
            }
        }
    }
    let mut mask = vec![0usize; n];
    let mut uncertainty = vec![0.0; n];
    for t in 0..n {
        let mut best: Option<usize> = None;
        for &m in &modulated.objects {
            if best.is_none_or(|b| logits[m][t] > logits[b][t] || (logits[m][t] == logits[b][t] && m < b)) {
                best = Some(m);
            }
            uncertainty[t] = f64::max(uncertainty[t], per_object_uncertainty[m][t]);
        }
        mask[t] = best.expect("at least one object");
    }
    Ok(PredictionBundle {
        logits,
        present,
        mask,
        uncertainty,
        per_object_uncertainty,
    })
}
