use super::{ParamStore, Result, Tape, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over all coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// The same maximum per named parameter tensor.
    pub per_param: Vec<(String, f64)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn eval_scalar<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let out = f(&mut tape)?;
    tape.value(out).item()
}

/// Compares tape gradients of the scalar `f` against central differences
/// with step `eps`, coordinate by coordinate over every parameter in `store`.
pub fn grad_check<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape)?;
        if tape.value(out).len() != 1 {
            return Err(TensorError::NotScalar {
                shape: tape.shape(out).to_vec(),
            });
        }
        tape.backward(out)?.param_grads(store)
    };

    let mut probe = store.clone();
    let mut per_param = Vec::with_capacity(store.len());
    let mut max_rel_error: f64 = 0.0;
    let mut coordinates = 0;
    for id in store.ids() {
        let mut worst: f64 = 0.0;
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval_scalar(&probe, &f)?;
            probe.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval_scalar(&probe, &f)?;
            probe.get_mut(id).data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.index()].data()[k];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
            coordinates += 1;
        }
        max_rel_error = max_rel_error.max(worst);
        per_param.push((store.name(id).to_string(), worst));
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
        coordinates,
    })
}
