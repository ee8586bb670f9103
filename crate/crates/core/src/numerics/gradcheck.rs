use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Scalar, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `loss_fn` against central differences.
///
/// The numerical derivative uses the fourth-order central stencil
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, so truncation error at
/// `h = 1e-3` sits far below the comparison tolerance even for elements with
/// tiny gradients. `loss_fn` must bind every parameter it uses as trainable.
/// The relative error of one element is `|a − c| / max(|a|, |c|, 1e-6)`;
/// the floor keeps round-off on identically-zero gradients (attention key
/// biases, for one) from reading as error.
pub fn grad_check<T, F>(loss_fn: F, params: &ParamStore<T>, eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    grad_check_sampled(loss_fn, params, eps, None)
}

/// As [`grad_check`], but checks at most `per_tensor` evenly spaced elements
/// of each parameter tensor.
pub fn grad_check_sampled<T, F>(
    loss_fn: F,
    params: &ParamStore<T>,
    eps: f64,
    per_tensor: Option<usize>,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    if !g.scalar(loss).is_finite() {
        return Err(Error::NonFinite("grad_check: unperturbed loss".into()));
    }
    let grads = g.backward(loss)?.into_param_grads(params);

    let eval = |p: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, p)?;
        Ok(g.scalar(l).f64())
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let mut work = params.clone();
    for (name, tensor) in params.iter() {
        let analytic = grads.get(name);
        let n = tensor.len();
        let stride = per_tensor.map_or(1, |k| n.div_ceil(k.max(1)));
        for i in (0..n).step_by(stride.max(1)) {
            let orig = tensor.data()[i];
            let mut f = [0.0f64; 4];
            for (slot, k) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                work.get_mut(name).expect("param").data_mut()[i] = orig + T::c(k * eps);
                *slot = eval(&work)?;
                if !slot.is_finite() {
                    return Err(Error::NonFinite(format!("grad_check: loss non-finite perturbing {name}[{i}]")));
                }
            }
            work.get_mut(name).expect("param").data_mut()[i] = orig;
            let central = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * eps);
            let a = analytic.map_or(0.0, |t| t.data()[i].f64());
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
