use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Max over checked coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub checked: usize,
}

fn eval_scalar<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Dimension("grad_check needs a scalar loss".into()));
    }
    if !v.item().is_finite() {
        return Err(Error::Evaluation(format!("loss is {}", v.item())));
    }
    Ok(v.item())
}

/// Compares tape gradients of the scalar `f` against central differences.
///
/// Up to `per_param` coordinates of every parameter are sampled with a
/// generator seeded by `seed`; a parameter with fewer entries is checked
/// exhaustively.
pub fn grad_check<F>(
    f: F,
    params: &ParamSet,
    h: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Argument(format!("step {h} outside [1e-6, 1e-4]")));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::Evaluation("loss is not finite".into()));
    }
    let analytic = tape.grad(out)?.for_params(params);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (name, value) in params.iter() {
        let n = value.len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, per_param).into_vec();
            c.sort_unstable();
            c
        };
        let grad = &analytic[name];
        for i in coords {
            let orig = value.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = eval_scalar(&f, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = eval_scalar(&f, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}
