//! Central-difference check of [`Graph::backward`].

use super::{Graph, ParamSet, Var};
use crate::error::{Error, Result};

/// Largest relative error between the analytic gradient and the five-point
/// central difference with step `h`, over every scalar of every parameter in
/// `params`. The stencil's truncation error is `O(h⁴)`.
///
/// The relative error of one scalar is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn max_relative_error<F>(params: &ParamSet, h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let grads = g.backward(loss)?;
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, p)?;
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let analytic = grads
            .get(&name)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; params.get(&name).map_or(0, |t| t.len())]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe.get(&name).map_or(0.0, |t| t.data()[i]);
            let mut at = |offset: f64| -> Result<f64> {
                set(&mut probe, &name, i, orig + offset)?;
                eval(&probe)
            };
            let n = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
            set(&mut probe, &name, i, orig)?;
            let scale = a.abs().max(n.abs()).max(1e-6);
            worst = worst.max((a - n).abs() / scale);
        }
    }
    Ok(worst)
}

fn set(params: &mut ParamSet, name: &str, i: usize, value: f64) -> Result<()> {
    let t = params.get_mut(name).ok_or_else(|| Error::InvalidInput(format!("no parameter `{name}`")))?;
    t.data_mut()[i] = value;
    Ok(())
}
