//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Coordinates per input to probe; `None` checks all of them.
    pub max_coords: Option<usize>,
    /// Relative tolerance of the smoothness probe; coordinates that fail it
    /// are treated as sitting on a kink or discontinuity and skipped.
    pub kink_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords: None,
            kink_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: Self) -> Self {
        Self {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Checks `f(inputs)` against central differences in every input.
///
/// `f` records a scalar-valued computation on the tape it is handed; the
/// inputs arrive as gradient-tracking leaves in order.
pub fn grad_check<F, R>(
    f: F,
    inputs: &[Tensor],
    cfg: GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    check_against(&analytic, inputs, eval, cfg, rng)
}

/// Compares precomputed `analytic` gradients of `eval` at `inputs` with
/// central differences, skipping coordinates that fail the smoothness probe.
pub fn check_against<E, R>(
    analytic: &[Tensor],
    inputs: &[Tensor],
    mut eval: E,
    cfg: GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    E: FnMut(&[Tensor]) -> Result<f64>,
    R: Rng + ?Sized,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let centre = eval(inputs)?;
    let mut work = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < x.numel() => sample(rng, x.numel(), m).into_vec(),
            _ => (0..x.numel()).collect(),
        };
        for c in coords {
            let x0 = x.data()[c];
            let mut probe = |step: f64| -> Result<(f64, f64)> {
                work[k].data_mut()[c] = x0 + step;
                let plus = eval(&work)?;
                work[k].data_mut()[c] = x0 - step;
                let minus = eval(&work)?;
                work[k].data_mut()[c] = x0;
                Ok(((plus - minus) / (2.0 * step), (plus - 2.0 * centre + minus) / step))
            };
            let (coarse, curv_coarse) = probe(cfg.h)?;
            let (fine, curv_fine) = probe(cfg.h / 2.0)?;
            // Smooth points: the central difference is stable under halving
            // the step and the scaled second difference halves with it. A
            // kink keeps the second difference fixed; a jump breaks both.
            let scale = cfg.kink_tol * coarse.abs().max(1.0);
            if (coarse - fine).abs() > scale || (2.0 * curv_fine - curv_coarse).abs() > scale {
                report.skipped += 1;
                continue;
            }
            let err = relative_error(analytic[k].data()[c], coarse);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_of_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(&[4, 3], &mut rng);
        let x = Tensor::randn(&[3, 2], &mut rng);
        let r = grad_check(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let s = t.sigmoid(y)?;
                t.sum(s)
            },
            &[w, x],
            GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.checked, 18);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn relu_kink_is_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(&[3], vec![0.0, 1.0, -1.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let y = t.relu(v[0])?;
                t.sum(y)
            },
            &[x],
            GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!((r.checked, r.skipped), (2, 1));
        assert!(r.max_rel_error < 1e-9);
    }
}
