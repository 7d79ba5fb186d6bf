//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Which parameter entries to perturb.
#[derive(Clone, Copy, Debug, Default)]
pub enum Coverage {
    /// Every entry of every parameter.
    #[default]
    Full,
    /// At most this many entries per parameter tensor, drawn by seed.
    Sampled { per_param: usize, seed: u64 },
}

fn evaluate<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let value = g.value(out);
    if value.len() != 1 {
        return Err(Error::Contract("grad_check function must be scalar".into()));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric {
            node: out.index(),
            op: "grad_check output",
        });
    }
    Ok(v)
}

/// Function value and analytic gradients.
pub fn analytic_gradients<F>(store: &ParamStore<f64>, f: &F) -> Result<(f64, Gradients<f64>)>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let v = g.value(out).data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric {
            node: out.index(),
            op: "grad_check output",
        });
    }
    Ok((v, g.backward(out, store)?))
}

/// Max over checked entries of `|a - n| / max(1, |a|, |n|)` between the
/// supplied analytic gradients and central differences at step `eps`.
pub fn max_relative_error<F>(
    store: &ParamStore<f64>,
    analytic: &Gradients<f64>,
    eps: f64,
    coverage: Coverage,
    f: &F,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut work = store.clone();
    let mut worst = 0.0f64;
    let mut rng = match coverage {
        Coverage::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coverage::Full => None,
    };
    for id in store.ids() {
        let len = store.get(id).len();
        let entries: Vec<usize> = match (coverage, rng.as_mut()) {
            (Coverage::Sampled { per_param, .. }, Some(rng)) if per_param < len => {
                sample(rng, len, per_param).into_vec()
            }
            _ => (0..len).collect(),
        };
        for k in entries {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let plus = evaluate(&work, f)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let minus = evaluate(&work, f)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).data()[k];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Max relative error between analytic and finite-difference gradients of
/// the scalar function built by `f`.
pub fn grad_check<F>(store: &ParamStore<f64>, eps: f64, coverage: Coverage, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let (_, analytic) = analytic_gradients(store, &f)?;
    max_relative_error(store, &analytic, eps, coverage, &f)
}
