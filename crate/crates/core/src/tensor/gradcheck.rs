//! Central finite-difference oracle for gradient checks.
//!
//! Only forward values are used to form the numeric estimate, so the check is
//! independent of the backward rules it validates.

use super::{Graph, ParamId, ParamStore, Result, Tensor, Var};

/// Worst `|analytic − numeric| / max(1, |numeric|)` over all checked entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / n.abs().max(1.0)
}

/// Checks gradients of a scalar function of leaf inputs.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let mut g = Graph::standalone();
        g.set_strict(true);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let y = f(&mut g, &vars)?;
        let grads = g.backward(y)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::standalone();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone(), false)).collect();
        let y = f(&mut g, &vars)?;
        Ok(g.value(y).item())
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(rel(analytic[k].data()[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}

/// Checks gradients of a scalar function with respect to every parameter in
/// `store` (or those accepted by `select`). At most `max_per_param` entries of
/// each parameter are probed, spread evenly, to bound cost on large layers.
pub fn check_params<F>(
    store: &ParamStore,
    select: impl Fn(ParamId) -> bool,
    max_per_param: usize,
    f: F,
    step: f64,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        g.set_strict(true);
        let y = f(&mut g)?;
        g.backward(y)?
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in store.ids() {
        if !select(id) {
            continue;
        }
        let len = store.get(id).len();
        let stride = (len / max_per_param.max(1)).max(1);
        for i in (0..len).step_by(stride).take(max_per_param) {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let up = {
                let mut g = Graph::inference(&work);
                let y = f(&mut g)?;
                g.value(y).item()
            };
            work.get_mut(id).data_mut()[i] = orig - step;
            let down = {
                let mut g = Graph::inference(&work);
                let y = f(&mut g)?;
                g.value(y).item()
            };
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.param(id).map_or(0.0, |t| t.data()[i]);
            worst = worst.max(rel(analytic, numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}
