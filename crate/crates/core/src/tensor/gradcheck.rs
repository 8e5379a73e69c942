//! Central finite-difference checks of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Element `(input index, flat offset)` to probe.
pub type Probe = (usize, usize);

fn check_step(step: f64) -> Result<()> {
    if !(1e-7..=1e-4).contains(&step) {
        return Err(Error::InvalidArgument(format!("finite-difference step {step} outside [1e-7, 1e-4]")));
    }
    Ok(())
}

fn scalar_output(g: &Graph, y: Var) -> Result<f64> {
    g.value(y).item()
}

/// Max relative error `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// of a scalar function of one tensor. Non-finite values report as `INFINITY`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), step, None)
}

/// Like [`grad_check`] over several inputs. `probes` restricts the comparison
/// to a subset of elements; `None` checks every element of every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64, probes: Option<&[Probe]>) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_step(step)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    if g.shape(y).numel() != 1 {
        return Err(Error::Graph(format!("grad_check needs a scalar function, got {}", g.shape(y))));
    }
    let grads = g.backward(y)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();

    let all: Vec<Probe>;
    let probes = match probes {
        Some(p) => p,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |k| (i, k)))
                .collect();
            &all
        }
    };

    let eval = |which: usize, k: usize, delta: f64| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which {
                    let mut d = t.data().to_vec();
                    d[k] += delta;
                    g.constant(Tensor::from_parts(t.shape(), d))
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let y = f(&mut g, &vars)?;
        scalar_output(&g, y)
    };

    let mut worst: f64 = 0.0;
    for &(i, k) in probes {
        let numeric = (eval(i, k, step)? - eval(i, k, -step)?) / (2.0 * step);
        let a = analytic[i].data()[k];
        if !numeric.is_finite() || !a.is_finite() {
            return Ok(f64::INFINITY);
        }
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
