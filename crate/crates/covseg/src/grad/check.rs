//! Central finite-difference gradient verification.
//!
//! The numeric side only ever calls the forward pass, so it stays independent
//! of the backward implementation it is checking.

use super::{ParamId, Params, Tape, ValueId};

pub struct GradCheck {
    /// Step used for the central difference.
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Deterministic cap on coordinates checked per tensor (stride sampling).
    pub max_coords_per_tensor: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, rtol: 1e-3, atol: 1e-7, max_coords_per_tensor: 64 }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    /// max |analytic - numeric| over checked coordinates.
    pub max_abs_diff: f64,
    /// max |analytic - numeric| / max(|analytic|, |numeric|, atol/rtol).
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl GradCheck {
    /// Checks d(loss)/d(param) for every target parameter against central
    /// differences of the forward pass. `build` must be a pure function of
    /// `params` (deferred batch-norm updates on the scratch tape are fine).
    pub fn run<F>(&self, params: &mut Params, targets: &[ParamId], mut build: F) -> GradCheckReport
    where
        F: FnMut(&mut Tape, &Params) -> ValueId,
    {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params);
        tape.backward(loss);
        let analytic: Vec<Option<ndarray::ArrayD<f64>>> = targets
            .iter()
            .map(|t| tape.param_grad(*t).cloned())
            .collect();

        let mut report = GradCheckReport {
            checked: 0,
            max_abs_diff: 0.0,
            max_rel_err: 0.0,
            failures: Vec::new(),
        };
        let floor = self.atol / self.rtol;

        for (t_idx, target) in targets.iter().enumerate() {
            let numel = params.value(*target).len();
            let stride = (numel / self.max_coords_per_tensor).max(1);
            let name = params.name(*target).to_string();
            for flat in (0..numel).step_by(stride) {
                let orig = params.value(*target).as_slice().unwrap()[flat];
                let h = self.step;

                let eval = |params: &mut Params, v: f64, build: &mut F| -> f64 {
                    {
                        let entry = &mut params.entries[target.0];
                        entry.value.as_slice_mut().unwrap()[flat] = v;
                    }
                    let mut t = Tape::new();
                    let l = build(&mut t, params);
                    t.scalar(l) as f64
                };

                let f_plus = eval(params, orig + h, &mut build);
                let f_minus = eval(params, orig - h, &mut build);
                {
                    let entry = &mut params.entries[target.0];
                    entry.value.as_slice_mut().unwrap()[flat] = orig;
                }

                let numeric = (f_plus - f_minus) / (2.0 * h as f64);
                let a = analytic[t_idx]
                    .as_ref()
                    .map(|g| g.as_slice().unwrap()[flat] as f64)
                    .unwrap_or(0.0);
                let diff = (a - numeric).abs();
                let rel = diff / a.abs().max(numeric.abs()).max(floor);
                report.checked += 1;
                report.max_abs_diff = report.max_abs_diff.max(diff);
                report.max_rel_err = report.max_rel_err.max(rel);
                if diff > self.atol + self.rtol * a.abs().max(numeric.abs()) {
                    report.failures.push(format!(
                        "{name}[{flat}]: analytic {a:.6e} vs numeric {numeric:.6e} (diff {diff:.3e})"
                    ));
                }
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn catches_correct_and_wrong_gradients() {
        let mut params = Params::new();
        let x = params.insert(
            "x",
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.3, -0.7, 1.2]).unwrap(),
            true,
        );
        // loss = sum(sigmoid(x)^2)
        let check = GradCheck::default();
        let report = check.run(&mut params, &[x], |tape, params| {
            let xv = tape.param(params, x);
            let s = tape.sigmoid(xv);
            let sq = tape.mul(s, s);
            tape.sum_all(sq)
        });
        assert!(report.passed(), "{:?}", report.failures);
        assert!(report.max_rel_err < 1e-3);
    }
}
