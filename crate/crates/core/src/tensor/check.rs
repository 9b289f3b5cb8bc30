//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{Graph, ParamStore, Precision, Tensor, Var};

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_of(graph: &Graph, v: Var) -> f64 {
    graph.value(v).data()[0]
}

/// Max relative error between the reverse-mode gradient of `f` at `point` and
/// central differences with step `h`, over every coordinate of `point`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut graph = Graph::new(Precision::Oracle64);
    let x = graph.leaf(point.clone().with_requires_grad(true));
    let loss = f(&mut graph, x)?;
    graph.backward(loss)?;
    let analytic = graph
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new(Precision::Oracle64);
        let x = g.constant(p);
        let l = f(&mut g, x)?;
        Ok(scalar_of(&g, l))
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// Result of a parameter-wise gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates_checked: usize,
}

/// Gradient check of `f` with respect to the parameters in `store`.
///
/// When `per_param` is `Some(n)`, at most `n` coordinates of each parameter
/// are checked, chosen deterministically from `seed`.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    h: f64,
    per_param: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_params_where(store, f, h, per_param, seed, |_| true)
}

/// [`grad_check_params`] restricted to the parameters whose name satisfies `include`.
pub fn grad_check_params_where<F, P>(
    store: &ParamStore,
    f: F,
    h: f64,
    per_param: Option<usize>,
    seed: u64,
    include: P,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    P: Fn(&str) -> bool,
{
    let mut graph = Graph::new(Precision::Oracle64);
    let loss = f(&mut graph, store)?;
    graph.backward(loss)?;
    let grads = graph.param_gradients(store);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates_checked: 0,
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(Precision::Oracle64);
        let l = f(&mut g, s)?;
        Ok(scalar_of(&g, l))
    };

    for id in store.ids().filter(|&id| include(store.name(id))) {
        let n = store.get(id).numel();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            work.data_mut(id)[i] = orig + h;
            let fp = eval(&work)?;
            work.data_mut(id)[i] = orig - h;
            let fm = eval(&work)?;
            work.data_mut(id)[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(grads.get(id)[i], numeric);
            report.coordinates_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
