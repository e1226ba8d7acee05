use crate::error::{Error, Result};
use crate::tensor::autodiff::{Graph, Var};
use crate::tensor::params::{Bound, ParamStore};

fn evaluate<F>(loss_fn: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Var,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = loss_fn(&mut g, &bound);
    let v = g.scalar(out);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("grad_check loss".into()))
    }
}

/// Compares reverse-mode gradients with central finite differences on
/// every coordinate of `params`.
///
/// Returns `max |g_ad - g_fd| / max(1, |g_fd|)`.
pub fn grad_check<F>(loss_fn: F, params: &ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Var,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "eps {eps} outside (0, 1e-2]"
        )));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = loss_fn(&mut g, &bound);
    if !g.scalar(out).is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let grads = g.backward(out);

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let ad: Vec<f64> = grads
            .get(bound.get(name))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; params.get(name).map_or(0, |p| p.len())]);
        for (i, &ad_i) in ad.iter().enumerate() {
            let orig = probe.get(name).expect("bound").value[i];
            probe.get_mut(name).expect("bound").value[i] = orig + eps;
            let plus = evaluate(&loss_fn, &probe)?;
            probe.get_mut(name).expect("bound").value[i] = orig - eps;
            let minus = evaluate(&loss_fn, &probe)?;
            probe.get_mut(name).expect("bound").value[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            worst = worst.max((ad_i - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}
