//! Central-difference gradient checking.

use rand::seq::index::sample;

use super::graph::{Gradients, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::rng::rng_for;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates, sampled without replacement.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a - c| / (|a| + |c| + 1e-12)`.
pub fn relative_error(analytic: f64, central: f64) -> f64 {
    (analytic - central).abs() / (analytic.abs() + central.abs() + 1e-12)
}

fn evaluate<F>(store: &ParamStore, objective: &mut F) -> Result<f64>
where
    F: for<'s> FnMut(&mut Graph<'s>, &'s ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = objective(&mut g, store)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::Contract("objective must be a scalar".into()));
    }
    Ok(v.item())
}

/// Loss value and reverse-mode gradients of `objective`.
pub fn analytic_gradients<F>(store: &ParamStore, objective: &mut F) -> Result<(f64, Gradients)>
where
    F: for<'s> FnMut(&mut Graph<'s>, &'s ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = objective(&mut g, store)?;
    let value = g.value(loss).item();
    Ok((value, g.backward(loss)?))
}

/// Compares `analytic` against central differences over trainable
/// coordinates. `store` is restored bit-exactly afterwards.
pub fn compare_with_central_differences<F>(
    store: &mut ParamStore,
    objective: &mut F,
    analytic: &Gradients,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'s> FnMut(&mut Graph<'s>, &'s ParamStore) -> Result<Var>,
{
    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for (id, p) in store.iter() {
        if p.trainable {
            coords.extend((0..p.value.numel()).map(|j| (id, j)));
        }
    }
    if let Some(k) = opts.max_coords {
        if k < coords.len() {
            let mut rng = rng_for(opts.seed, "gradcheck");
            let mut picked: Vec<usize> = sample(&mut rng, coords.len(), k).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|i| coords[i]).collect();
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (id, j) in coords {
        let original = store.value(id).data()[j];
        store.value_mut(id).data_mut()[j] = original + opts.eps;
        let plus = evaluate(store, objective);
        store.value_mut(id).data_mut()[j] = original - opts.eps;
        let minus = evaluate(store, objective);
        store.value_mut(id).data_mut()[j] = original;
        let central = (plus? - minus?) / (2.0 * opts.eps);
        let a = analytic.param(id).map_or(0.0, |g| g[j]);
        let err = relative_error(a, central);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some((store.get(id).name.clone(), j));
            }
        }
    }
    Ok(report)
}

/// Max relative error between reverse-mode and central-difference gradients
/// of a scalar objective.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    mut objective: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'s> FnMut(&mut Graph<'s>, &'s ParamStore) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(store, &mut objective)?;
    compare_with_central_differences(store, &mut objective, &analytic, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0), true).unwrap();
        let report = finite_difference_check(
            &mut store,
            |g, s| {
                let x = g.param(s, w);
                g.square(x)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(store.value(w).item(), 3.0);
    }
}
