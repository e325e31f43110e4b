use super::{ParamStore, Tensor};

/// Per-tensor comparison of analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error over its entries)`.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|p| p.1).fold(0.0, f64::max)
    }

    /// Max error per group, where a group is the name up to its second `.`
    /// for numbered blocks (`enc.0`) and up to the first `.` otherwise.
    pub fn by_group(&self) -> Vec<(String, f64)> {
        let mut groups: Vec<(String, f64)> = Vec::new();
        for (name, err) in &self.per_param {
            let parts: Vec<&str> = name.split('.').collect();
            let key = if parts.len() > 2 && parts[1].parse::<usize>().is_ok() {
                format!("{}.{}", parts[0], parts[1])
            } else {
                parts[0].to_string()
            };
            match groups.iter_mut().find(|g| g.0 == key) {
                Some(g) => g.1 = g.1.max(*err),
                None => groups.push((key, *err)),
            }
        }
        groups
    }
}

/// Denominator floor for the per-entry relative error.
pub const FLOOR: f64 = 1e-6;

/// Compare `analytic` gradients of `f` at `params` against central
/// differences with step `h`. The relative error of one entry is
/// `|a - cd| / max(|a|, |cd|, FLOOR)`; entries smaller than the floor sit
/// near the round-off level of the differences and are compared absolutely.
pub fn finite_diff_check(
    params: &ParamStore<f64>,
    analytic: &[Tensor<f64>],
    h: f64,
    mut f: impl FnMut(&ParamStore<f64>) -> f64,
) -> GradCheckReport {
    assert!(h > 0.0, "finite difference step must be positive");
    assert_eq!(analytic.len(), params.len(), "one gradient per parameter");
    let mut work = params.clone();
    let mut per_param = Vec::with_capacity(params.len());
    for (i, (name, value)) in params.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..value.len() {
            let x = value.data()[j];
            work.tensors_mut()[i].data_mut()[j] = x + h;
            let up = f(&work);
            work.tensors_mut()[i].data_mut()[j] = x - h;
            let down = f(&work);
            work.tensors_mut()[i].data_mut()[j] = x;
            let cd = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = (a - cd).abs() / a.abs().max(cd.abs()).max(FLOOR);
            worst = worst.max(err);
        }
        per_param.push((name.to_string(), worst));
    }
    GradCheckReport { per_param }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn quadratic_is_captured_exactly() {
        let mut params = ParamStore::new();
        params.add("p", Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let loss = |p: &ParamStore<f64>| -> (f64, Vec<Tensor<f64>>) {
            let tape = Tape::new();
            let bound = p.bind(&tape);
            let v = &bound.vars()[0];
            let l = tape.sum(&tape.mul(v, v).unwrap());
            let g = tape.backward(&l).unwrap().for_bound(&bound);
            (l.value().item(), g)
        };
        let (_, grads) = loss(&params);
        let report = finite_diff_check(&params, &grads, 1e-5, |p| loss(p).0);
        assert!(report.max_error() < 1e-7, "{report:?}");
    }

    #[test]
    fn constant_function_reports_zero() {
        let mut params = ParamStore::new();
        params.add("p", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let report = finite_diff_check(&params, &[Tensor::zeros(&[2])], 1e-5, |_| 4.0);
        assert_eq!(report.max_error(), 0.0);
    }

    #[test]
    fn groups_numbered_blocks() {
        let report = GradCheckReport {
            per_param: vec![
                ("enc.0.attn.q.weight".into(), 1e-6),
                ("enc.0.mlp.fc1.bias".into(), 2e-6),
                ("head.weight".into(), 3e-7),
            ],
        };
        assert_eq!(report.by_group(), vec![("enc.0".into(), 2e-6), ("head".into(), 3e-7)]);
    }
}
