//! Central-difference gradient checking.

use super::{ParamId, ParamStore, Tape, Var};
use crate::{Error, Result};

/// What a checked function reports back: its scalar loss and the discrete
/// routing decisions taken on the way (empty for dense functions).
pub struct Probe {
    pub loss: Var,
    pub routing: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedCoord {
    pub param: String,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: Vec<SkippedCoord>,
    /// `(param, index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares backward gradients of `f` with central differences of step `h`
/// at the listed coordinates. Runs on an f64 tape. A coordinate whose ±h
/// evaluations change the routing is skipped and reported. Stop-gradient
/// outputs are held at their unperturbed values in the ±h passes, so the
/// check measures the derivative the backward rules claim to compute.
pub fn finite_diff_check<F>(store: &ParamStore, coords: &[(ParamId, Vec<usize>)], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Probe>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("gradient check step must be positive, got {h}")));
    }
    let mut tape = Tape::<f64>::new(store);
    let base = f(&mut tape)?;
    let grads = tape.backward(base.loss)?;
    let held = tape.stop_grad_values().to_vec();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: Vec::new(),
        worst: None,
    };
    for (id, idxs) in coords {
        if !store.get(*id).requires_grad {
            return Err(Error::Contract(format!("{} is not trainable", store.name(*id))));
        }
        let analytic = grads.param(*id);
        for &i in idxs {
            let eval = |delta: f64| -> Result<(f64, Vec<usize>)> {
                let mut t = Tape::<f64>::with_perturbation(store, *id, i, delta).freeze_stop_grads(held.clone());
                let p = f(&mut t)?;
                Ok((t.scalar(p.loss), p.routing))
            };
            let (lp, rp) = eval(h)?;
            let (lm, rm) = eval(-h)?;
            if rp != base.routing || rm != base.routing {
                report.skipped.push(SkippedCoord {
                    param: store.name(*id).to_string(),
                    index: i,
                });
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g[i]);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((store.name(*id).to_string(), i, a, numeric));
            }
        }
    }
    if report.checked == 0 && !report.skipped.is_empty() {
        return Err(Error::Diagnostic(format!(
            "routing flipped at every one of {} tested coordinates",
            report.skipped.len()
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(vals: &[f32]) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap().trainable());
        (s, id)
    }

    #[test]
    fn linear_function_is_exact() {
        let (s, id) = store(&[0.3, -0.7, 0.1]);
        let c = Tensor::new(vec![3], vec![2.0, -1.0, 0.5]).unwrap();
        let r = finite_diff_check(&s, &[(id, vec![0, 1, 2])], 1e-3, |t| {
            let w = t.param(id)?;
            let cv = t.input(&c)?;
            let p = t.mul(w, cv)?;
            Ok(Probe {
                loss: t.sum(p)?,
                routing: vec![],
            })
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn quadratic_function_within_truncation_bound() {
        let (s, id) = store(&[0.9, -0.4]);
        let r = finite_diff_check(&s, &[(id, vec![0, 1])], 1e-3, |t| {
            let w = t.param(id)?;
            let sq = t.mul(w, w)?;
            let cube = t.mul(sq, w)?;
            let y = t.add(sq, cube)?;
            Ok(Probe {
                loss: t.sum(y)?,
                routing: vec![],
            })
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    fn argmax_probe(id: ParamId) -> impl Fn(&mut Tape<'_, f64>) -> Result<Probe> {
        move |t| {
            let w = t.param(id)?;
            let v = t.value(w);
            let pick = if v[1] > v[0] { 1 } else { 0 };
            let l = t.gather_elems(w, &[(0, pick)])?;
            let l2 = t.sum(l)?;
            Ok(Probe {
                loss: l2,
                routing: vec![pick],
            })
        }
    }

    #[test]
    fn routing_flip_is_skipped_and_reported() {
        // w[0] and w[1] differ by less than h, so perturbing either flips the pick.
        let (s, id) = store(&[0.5, 0.5004, 0.2]);
        let r = finite_diff_check(&s, &[(id, vec![0, 2])], 1e-3, argmax_probe(id)).unwrap();
        assert_eq!(
            r.skipped,
            vec![SkippedCoord {
                param: "w".into(),
                index: 0
            }]
        );
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn flip_everywhere_is_a_diagnostic_error() {
        let (s, id) = store(&[0.5, 0.5004, 0.2]);
        let r = finite_diff_check(&s, &[(id, vec![0, 1])], 1e-3, argmax_probe(id));
        assert!(matches!(r, Err(Error::Diagnostic(_))));
    }
}
