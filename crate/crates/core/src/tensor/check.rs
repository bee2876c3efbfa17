use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub coords: usize,
}

fn scalar_of(g: &Graph, out: Var) -> Result<f64> {
    g.value(out).item().ok_or_else(|| Error::NonScalar(g.shape(out).to_vec()))
}

/// Compares reverse-mode gradients of `build` at `point` against central
/// differences with step `h`. Every named input is differentiated.
///
/// The graph is rebuilt for each perturbed point so that value-dependent
/// constants inside `build` are recomputed.
pub fn grad_check<F>(build: F, point: &[(&str, Tensor)], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 1e-7 && h < 1e-3) {
        return Err(Error::Invalid(format!("finite-difference step {h} outside (1e-7, 1e-3)")));
    }
    let eval = |pt: &[(&str, Tensor)], track: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pt.iter().map(|(n, t)| g.input(n, t.clone().with_grad(track))).collect();
        let out = build(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let (mut g, vars, out) = eval(point, true)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect();

    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut pt: Vec<(&str, Tensor)> = point.to_vec();
    for (slot, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = pt[slot].1.values()[j];
            pt[slot].1.values_mut()[j] = orig + h;
            let (gp, _, op) = eval(&pt, false)?;
            let fp = scalar_of(&gp, op)?;
            pt[slot].1.values_mut()[j] = orig - h;
            let (gm, _, om) = eval(&pt, false)?;
            let fm = scalar_of(&gm, om)?;
            pt[slot].1.values_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let denom = 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / denom);
            coords += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        coords,
    })
}
