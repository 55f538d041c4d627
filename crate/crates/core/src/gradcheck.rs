//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::SeedTree;

/// Denominator floor of the relative error. Central differences of an O(1)
/// loss carry about 1e-12 of rounding noise at `h = 1e-4`, so derivatives
/// below this floor are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
}

/// Compare analytic gradients of `loss` with `(f(x+h) - f(x-h)) / 2h` on up
/// to `max_coords` coordinates (all of them when the model is small enough).
///
/// `loss` must rebuild the same function on every call: any randomness it
/// uses has to come from a stream it re-seeds itself.
pub fn grad_check<F>(loss: F, store: &ParamStore, h: f64, max_coords: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = loss(s, &mut g)?;
        g.check_finite()?;
        Ok(g.value(root).item())
    };

    let mut work = store.clone();
    work.zero_grads();
    let mut g = Graph::new();
    let root = loss(&work, &mut g)?;
    let base = g.value(root).item();
    g.backward_into(root, &mut work, 1.0)?;
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let coords: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.to_string(), i)))
        .collect();
    let picked: Vec<usize> = if coords.len() <= max_coords {
        (0..coords.len()).collect()
    } else {
        let mut rng = SeedTree::new(seed).child("gradcheck").rng();
        let mut idx = sample(&mut rng, coords.len(), max_coords).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: picked.len(),
        worst: None,
        worst_values: (0.0, 0.0),
    };
    let mut probe = store.clone();
    for &c in &picked {
        let (name, i) = &coords[c];
        let x = store.get(name).expect("name from store").data()[*i];
        probe.set_value(name, *i, x + h)?;
        let plus = eval(&probe)?;
        probe.set_value(name, *i, x - h)?;
        let minus = eval(&probe)?;
        probe.set_value(name, *i, x)?;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = work.grad(name).expect("grad slot").data()[*i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((name.clone(), *i));
            report.worst_values = (analytic, numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_mlp, mlp_apply, Activation};
    use crate::tensor::Tensor;
    use std::sync::Arc;

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new(0);
        s.insert("p", Tensor::row(vec![0.5, -1.5, 2.0]));
        let r = grad_check(
            |s, g| {
                let p = g.param(s, "p")?;
                let q = g.square(p);
                Ok(g.sum(q))
            },
            &s,
            1e-4,
            100,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.coords_checked, 3);
    }

    #[test]
    fn mlp_cross_entropy() {
        let mut s = ParamStore::new(4);
        init_mlp(&mut s, "m", &[3, 6, 3], false);
        let x = s.normal("input", &[7, 3], 1.0);
        let labels = Arc::new(vec![0, 1, 2, 2, 1, 0, 1]);
        let r = grad_check(
            |s, g| {
                let xi = g.constant(x.clone());
                let y = mlp_apply(g, s, xi, "m", 2, Activation::Tanh)?;
                Ok(g.cross_entropy(y, labels.clone()))
            },
            &s,
            1e-4,
            1000,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn nondeterminism_is_detected() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let mut s = ParamStore::new(0);
        s.insert("p", Tensor::row(vec![1.0]));
        let counter = AtomicU64::new(0);
        let r = grad_check(
            |s, g| {
                let p = g.param(s, "p")?;
                let k = counter.fetch_add(1, Ordering::SeqCst) as f64;
                Ok(g.scale(p, 1.0 + k))
            },
            &s,
            1e-4,
            10,
            0,
        );
        assert!(matches!(r, Err(Error::NonDeterministic)));
    }
}
