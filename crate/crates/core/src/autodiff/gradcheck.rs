//! Central-difference gradient verification, used by the test suites to
//! hold every differentiable path to an independent numeric oracle.

use super::{GradMap, Param, ParamId, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Perturbation step for the central difference.
    pub h: f64,
    /// Denominator floor: the reported error for a coordinate is
    /// `|analytic - numeric| / max(|analytic|, |numeric|, scale_floor)`,
    /// so tiny-against-tiny disagreements are measured on the loss scale
    /// instead of blowing up.
    pub scale_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            scale_floor: 1.0,
        }
    }
}

/// Worst disagreement found by [`max_relative_error`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` gradients against central differences of `eval`
/// over every coordinate of every parameter that `params_mut` exposes.
/// Parameters are restored exactly after probing.
pub fn max_relative_error<T>(
    subject: &mut T,
    mut params_mut: impl FnMut(&mut T) -> Vec<&mut Param>,
    eval: impl Fn(&T) -> f64,
    analytic: &GradMap,
    options: GradCheckOptions,
) -> GradCheckReport {
    let layout: Vec<(ParamId, String, usize)> = params_mut(subject)
        .iter()
        .map(|p| (p.id(), p.name().to_string(), p.value().len()))
        .collect();
    let h = options.h;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_coordinate: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (index, (id, name, len)) in layout.iter().enumerate() {
        let grad: Option<Tensor> = analytic.get_by_id(*id).cloned();
        for coord in 0..*len {
            params_mut(subject)[index].update(|t| t.data_mut()[coord] += h);
            let plus = eval(subject);
            params_mut(subject)[index].update(|t| t.data_mut()[coord] -= 2.0 * h);
            let minus = eval(subject);
            params_mut(subject)[index].update(|t| t.data_mut()[coord] += h);

            let numeric = (plus - minus) / (2.0 * h);
            let analytic_value = grad.as_ref().map_or(0.0, |g| g.data()[coord]);
            let denom = analytic_value
                .abs()
                .max(numeric.abs())
                .max(options.scale_floor);
            let error = (analytic_value - numeric).abs() / denom;
            if error > report.max_relative_error {
                report.max_relative_error = error;
                report.worst_param = name.clone();
                report.worst_coordinate = coord;
                report.analytic = analytic_value;
                report.numeric = numeric;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn catches_a_wrong_gradient() {
        let mut p = Param::new("x", Tensor::vector(vec![0.5, -1.0]));
        // Loss x0^2 + x1^2; claim an off-by-factor-two gradient.
        let mut wrong = GradMap::new();
        {
            let mut g = Graph::new();
            let x = g.param(&p);
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq);
            g.backward(loss, &mut wrong).unwrap();
        }
        // Double the recorded gradient by backpropagating again.
        {
            let mut g = Graph::new();
            let x = g.param(&p);
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq);
            g.backward(loss, &mut wrong).unwrap();
        }
        let report = max_relative_error(
            &mut p,
            |p| vec![p],
            |p| {
                let mut g = Graph::new();
                let x = g.param(p);
                let sq = g.mul(x, x).unwrap();
                let loss = g.sum(sq);
                g.scalar_value(loss)
            },
            &wrong,
            GradCheckOptions::default(),
        );
        assert!(report.max_relative_error > 0.3, "{report:?}");
    }

    #[test]
    fn passes_a_correct_gradient() {
        let mut p = Param::new("x", Tensor::vector(vec![0.5, -1.0, 2.0]));
        let mut grads = GradMap::new();
        let loss_of = |p: &Param| {
            let mut g = Graph::new();
            let x = g.param(p);
            let t = g.tanh(x);
            let sq = g.mul(t, t).unwrap();
            let loss = g.mean(sq).unwrap();
            (g, loss)
        };
        let (g, loss) = loss_of(&p);
        g.backward(loss, &mut grads).unwrap();
        let report = max_relative_error(
            &mut p,
            |p| vec![p],
            |p| {
                let (g, loss) = loss_of(p);
                g.scalar_value(loss)
            },
            &grads,
            GradCheckOptions::default(),
        );
        assert!(report.max_relative_error <= 1e-4, "{report:?}");
    }
}
