use crate::error::{Error, Result};

use super::{NodeId, ParamStore, Tape};

/// Outcome of a central finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares analytic gradients of the scalar built by `f` against
/// `(f(θ+ε) - f(θ-ε)) / 2ε` on every coordinate of every trainable
/// parameter. The error per coordinate is
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
///
/// `f` must be deterministic; disable dropout before calling.
pub fn grad_check_fd<F>(store: &mut ParamStore, eps: f64, mut f: F) -> Result<GradCheck>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    check_finite(tape.scalar(loss))?;
    let analytic = tape.backward(loss, store)?;

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(store, &mut tape)?;
        let v = tape.scalar(loss);
        check_finite(v)?;
        Ok(v)
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).len();
        for coord in 0..n {
            let original = flat(store, id, coord);
            set_flat(store, id, coord, original + eps);
            let plus = eval(store)?;
            set_flat(store, id, coord, original - eps);
            let minus = eval(store)?;
            set_flat(store, id, coord, original);

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).iter().nth(coord).copied().unwrap_or(0.0);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), coord));
            }
        }
    }
    Ok(report)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("finite-difference objective".into()))
    }
}

fn flat(store: &ParamStore, id: super::ParamId, coord: usize) -> f64 {
    *store.value(id).iter().nth(coord).expect("coordinate in range")
}

fn set_flat(store: &mut ParamStore, id: super::ParamId, coord: usize, v: f64) {
    *store.value_mut(id).iter_mut().nth(coord).expect("coordinate in range") = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let theta = store.register("theta", array![[3.0]], true).unwrap();
        let report = grad_check_fd(&mut store, 1e-4, |s, tape| {
            let x = tape.param(s, theta)?;
            tape.affine(x, x, None)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.coordinates, 1);
    }

    #[test]
    fn gate_derivative_at_zero() {
        let mut store = ParamStore::new();
        let omega = store.register("omega", array![[0.0]], true).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, omega).unwrap();
        let l = tape.gate(w, 0.1).unwrap();
        let g = tape.backward(l, &store).unwrap();
        assert!((g.get(omega)[[0, 0]] - 2.5).abs() < 1e-12);

        let report = grad_check_fd(&mut store, 1e-4, |s, tape| {
            let w = tape.param(s, omega)?;
            tape.gate(w, 0.1)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut store = ParamStore::new();
        let p = store.register("p", array![[1.0]], true).unwrap();
        let r = grad_check_fd(&mut store, 1e-4, |s, tape| {
            let _ = tape.param(s, p)?;
            tape.constant(array![[f64::NAN]])
        });
        assert!(r.is_err());
    }
}
