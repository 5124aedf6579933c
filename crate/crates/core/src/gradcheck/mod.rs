//! Central finite-difference gradient checking.

pub mod cases;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::model::{Batch, Model, Session};
use crate::tensor::{Tape, Tensor, Var};

/// Result of comparing analytic and numeric derivatives.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose one-sided differences disagreed and were re-probed
    /// with smaller steps.
    pub kinks: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Relative error of `analytic` against a central difference of `eval`
/// around `x0`, and whether a kink was hit. When the forward and backward
/// differences disagree, a ReLU or max-pool switch lies inside the probe
/// interval; the step is then shrunk (twice, by 10x) and the best estimate
/// kept.
fn probe_coordinate(
    mut eval: impl FnMut(f64) -> Result<f64>,
    x0: f64,
    step: f64,
    analytic: f64,
    floor: f64,
) -> Result<(f64, bool)> {
    let centre = eval(x0)?;
    let mut best = f64::INFINITY;
    let mut h = step;
    for attempt in 0..3 {
        let plus = eval(x0 + h)?;
        let minus = eval(x0 - h)?;
        let err = rel_error(analytic, (plus - minus) / (2.0 * h), floor);
        best = best.min(err);
        let (fwd, bwd) = ((plus - centre) / h, (centre - minus) / h);
        let smooth = (fwd - bwd).abs() <= 1e-3 * fwd.abs().max(bwd.abs()).max(floor);
        if smooth {
            return Ok((best, attempt > 0));
        }
        h /= 10.0;
    }
    Ok((best, true))
}

/// Checks d(loss)/d(input) for every input tensor. `build` records a scalar
/// loss on a fresh tape from the given leaves. At most `per_input` coordinates
/// of each input are probed (all of them when it has fewer).
pub fn check<F>(
    inputs: &[Tensor],
    build: F,
    step: f64,
    floor: f64,
    per_input: usize,
    rng: &mut impl Rng,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        kinks: 0,
    };
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= per_input {
            (0..n).collect()
        } else {
            sample(rng, n, per_input).into_vec()
        };
        for c in coords {
            let orig = input.data()[c];
            let (err, kink) = probe_coordinate(
                |x| {
                    probe[which].data_mut()[c] = x;
                    eval(&probe)
                },
                orig,
                step,
                analytic[which].data()[c],
                floor,
            )?;
            probe[which].data_mut()[c] = orig;
            report.checked += 1;
            report.kinks += usize::from(kink);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((which, c));
            }
        }
    }
    Ok(report)
}

/// Random fixed weights for turning a tensor output into a scalar loss
/// without the cancellations a plain mean would have.
pub fn projection(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// `sum(out * weights)` on the tape.
pub fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Checks the model's batch-loss gradient against central differences on
/// up to `per_param` coordinates of every parameter tensor. `worst` indexes
/// parameters in name order.
pub fn check_model(
    model: &Model,
    batch: &Batch,
    step: f64,
    floor: f64,
    per_param: usize,
    rng: &mut impl Rng,
) -> Result<GradReport> {
    let analytic = {
        let mut sess = Session::deterministic(model);
        let (loss, _) = sess.batch_loss(batch)?;
        sess.tape.backward(loss)?;
        sess.grads()
    };
    let eval = |m: &Model| -> Result<f64> {
        let mut sess = Session::deterministic(m);
        let (loss, _) = sess.batch_loss(batch)?;
        sess.tape.value(loss).item()
    };
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        kinks: 0,
    };
    let mut probe = model.clone();
    for (which, (name, t)) in model.params().iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            sample(rng, n, per_param).into_vec()
        };
        for c in coords {
            let orig = t.data()[c];
            let (err, kink) = probe_coordinate(
                |x| {
                    probe.param_mut(name).expect("bound")[c] = x;
                    eval(&probe)
                },
                orig,
                step,
                analytic[name].data()[c],
                floor,
            )?;
            probe.param_mut(name).expect("bound")[c] = orig;
            report.checked += 1;
            report.kinks += usize::from(kink);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((which, c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn kink_inside_the_step_is_reprobed() {
        // relu at 3e-6: a 1e-5 central difference straddles the kink
        let x = Tensor::new([1], vec![3e-6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = check(&[x], |t, v| Ok(t.relu(v[0])), 1e-5, 1e-6, 1, &mut rng).unwrap();
        assert_eq!(r.kinks, 1);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn smooth_functions_are_probed_once() {
        let x = Tensor::new([3], vec![0.3, -1.2, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = check(
            &[x],
            |t, v| {
                let s = t.mul(v[0], v[0])?;
                Ok(t.sum(s))
            },
            1e-5,
            1e-6,
            3,
            &mut rng,
        )
        .unwrap();
        assert_eq!((r.kinks, r.checked), (0, 3));
        assert!(r.max_rel_error < 1e-8);
    }
}
