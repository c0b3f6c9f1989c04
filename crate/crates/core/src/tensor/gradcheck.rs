use super::{Graph, Real, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

/// Relative error between an analytic and a numeric derivative.
///
/// `|a - n| / max(|a|, |n|, floor)`; both zero counts as exact agreement.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<T: Real, F>(f: &F, params: &[Tensor], values: &[Vec<T>]) -> Result<(Graph<T>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::<T>::default();
    let vars = params
        .iter()
        .zip(values)
        .map(|(p, v)| g.leaf_values(p.shape().to_vec(), v.clone(), p.is_trainable()))
        .collect::<Result<Vec<Var>>>()?;
    let loss = f(&mut g, &vars)?;
    Ok((g, vars, loss))
}

/// Compares backward gradients of `f` against central differences with step
/// `eps`, coordinate by coordinate over every trainable tensor in `params`.
///
/// The graph computes in `T`; the tensors are widened on binding and the
/// perturbations are applied in `T` as well. The error of a coordinate is
/// [`relative_error`] with the denominator floored at `floor` (pass `0.0` for
/// a purely relative measure). Frozen tensors are bound but not probed.
pub fn grad_check<T: Real, F>(f: F, params: &[Tensor], eps: f32, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut values: Vec<Vec<T>> = params
        .iter()
        .map(|p| p.data().iter().map(|&v| T::of_f32(v)).collect())
        .collect();
    let (g, vars, loss) = evaluate(&f, params, &values)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Option<Vec<T>>> = vars
        .iter()
        .map(|&v| grads.get(v).map(|s| s.to_vec()))
        .collect();
    drop(g);

    let eps = T::of_f32(eps);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    for (pi, an) in analytic.iter().enumerate() {
        let Some(an) = an else { continue };
        for ci in 0..an.len() {
            let orig = values[pi][ci];
            let (plus, minus) = (orig + eps, orig - eps);
            values[pi][ci] = plus;
            let (gp, _, lp) = evaluate(&f, params, &values)?;
            let fp = gp.scalar(lp).as_f64();
            values[pi][ci] = minus;
            let (gm, _, lm) = evaluate(&f, params, &values)?;
            let fm = gm.scalar(lm).as_f64();
            values[pi][ci] = orig;

            let numeric = (fp - fm) / (plus.as_f64() - minus.as_f64());
            let a = an[ci].as_f64();
            let err = relative_error(a, numeric, floor);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, ci));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact() {
        // loss = x^T A x with A symmetric positive.
        let a = Tensor::new(vec![3, 3], vec![2., 0.5, 0., 0.5, 1., 0.25, 0., 0.25, 3.]).unwrap();
        let x = Tensor::new(vec![3, 1], vec![0.5, -1.0, 0.25])
            .unwrap()
            .with_trainable(true);
        let params = vec![x, a];
        let report = grad_check::<f32, _>(
            |g, v| {
                let ax = g.matmul(v[1], v[0])?;
                let xt = g.transpose(v[0])?;
                let q = g.matmul(xt, ax)?;
                g.sum(q)
            },
            &params,
            1e-3,
            0.0,
        )
        .unwrap();
        assert_eq!(report.coordinates, 3);
        // Central differences of an f32 loss near 1.2 with eps=1e-3 carry
        // roughly u·|f|/eps ≈ 6e-5 of rounding noise; the quadratic itself
        // contributes no truncation error.
        assert!(report.max_rel_error < 2e-4, "{report:?}");

        // The analytic side is exact: d(x^T A x)/dx = 2Ax.
        let mut g = Graph::new();
        let xv = g.leaf(&params[0]);
        let av = g.leaf(&params[1]);
        let ax = g.matmul(av, xv).unwrap();
        let xt = g.transpose(xv).unwrap();
        let q = g.matmul(xt, ax).unwrap();
        let loss = g.sum(q).unwrap();
        let grads = g.backward(loss).unwrap();
        let expect = [2.0 * (2. * 0.5 + 0.5 * -1.0), 2.0 * (0.5 * 0.5 - 1.0 + 0.25 * 0.25), 2.0 * (0.25 * -1.0 + 3. * 0.25)];
        for (a, e) in grads.get(xv).unwrap().iter().zip(expect) {
            assert!((*a as f64 - e).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_function_has_zero_error() {
        let params = vec![Tensor::new(vec![2], vec![1., 2.]).unwrap().with_trainable(true)];
        let report = grad_check::<f32, _>(
            |g, _| g.constant(vec![1], vec![4.0]),
            &params,
            1e-3,
            0.0,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(params[0].data(), &[1., 2.]);
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let logits = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.9, 1.1, 0.4, -0.7])
            .unwrap()
            .with_trainable(true);
        let onehot = Tensor::new(vec![2, 3], vec![0., 0., 1., 0., 1., 0.]).unwrap();
        let params = vec![logits, onehot];
        let report = grad_check::<f32, _>(
            |g, v| {
                let lp = g.log_softmax(v[0])?;
                let picked = g.mul(lp, v[1])?;
                let s = g.sum(picked)?;
                g.scale(s, -0.5)
            },
            &params,
            1e-3,
            0.0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
