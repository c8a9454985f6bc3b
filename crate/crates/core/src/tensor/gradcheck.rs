//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Float, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that gradients
    /// which are zero up to rounding are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many coordinates per tensor (chosen by `seed`).
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(tensor name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub passed: bool,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
            passed: true,
        }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64, cfg: &GradCheckConfig) {
        let denom = analytic.abs().max(numeric.abs()).max(cfg.abs_floor);
        let err = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if err > self.max_rel_error || err.is_nan() {
            self.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            self.worst = Some((name.to_string(), index, analytic, numeric));
        }
        self.passed = self.max_rel_error <= cfg.tolerance;
    }
}

fn coordinates(len: usize, cfg: &GradCheckConfig, salt: u64) -> Vec<usize> {
    match cfg.max_coords_per_tensor {
        Some(k) if k < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx = sample(&mut rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

fn scalar_value<T: Float>(v: Var<'_, T>) -> Result<f64> {
    v.with_value(|t| {
        if t.len() == 1 {
            Ok(t.data()[0].as_f64())
        } else {
            Err(Error::Contract(format!("grad_check needs a scalar function, got shape {:?}", t.shape())))
        }
    })
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    T: Float,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = f(&tape, input)?;
    scalar_value(out)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor<T>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(probe);
        scalar_value(f(&tape, v)?)
    };

    let mut report = GradCheckReport::new();
    for i in coordinates(x.len(), cfg, 0) {
        let mut plus = x.clone();
        let mut minus = x.clone();
        let base = x.data()[i].as_f64();
        plus.data_mut()[i] = T::from_f64(base + cfg.step);
        minus.data_mut()[i] = T::from_f64(base - cfg.step);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * cfg.step);
        report.record("input", i, analytic.data()[i].as_f64(), numeric, cfg);
    }
    Ok(report)
}

/// Same as [`grad_check`] but with respect to every tensor in `store`.
pub fn grad_check_params<T, F>(f: F, store: &ParamStore<T>, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    T: Float,
    F: for<'t> Fn(&'t Tape<T>, &ParamStore<T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let out = f(&tape, store)?;
    scalar_value(out)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::new();
    let mut probe = store.clone();
    for (pid, name, value) in store.iter() {
        let analytic = grads.param(pid).cloned().unwrap_or_else(|| Tensor::zeros(value.shape()));
        for i in coordinates(value.len(), cfg, pid.index() as u64 + 1) {
            let base = value.data()[i];
            probe.get_mut(pid).data_mut()[i] = T::from_f64(base.as_f64() + cfg.step);
            let up = {
                let tape = Tape::new();
                scalar_value(f(&tape, &probe)?)?
            };
            probe.get_mut(pid).data_mut()[i] = T::from_f64(base.as_f64() - cfg.step);
            let down = {
                let tape = Tape::new();
                scalar_value(f(&tape, &probe)?)?
            };
            probe.get_mut(pid).data_mut()[i] = base;
            let numeric = (up - down) / (2.0 * cfg.step);
            report.record(name, i, analytic.data()[i].as_f64(), numeric, cfg);
        }
    }
    Ok(report)
}
