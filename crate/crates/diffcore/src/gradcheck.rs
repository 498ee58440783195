//! Central finite-difference verification of analytic gradients.

use crate::error::DiffError;
use crate::store::{Bindings, ParameterStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Number of elements compared (may be a strided subset).
    pub checked: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Settings for [`GradCheck::run`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Denominator floor that keeps near-zero gradients from dominating.
    pub floor: f64,
    /// Compare at most this many evenly strided elements per parameter.
    pub max_per_param: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-4, floor: 1e-6, max_per_param: None }
    }
}

impl GradCheck {
    pub fn run<F, E>(&self, store: &ParameterStore<f64>, f: F, tolerance: f64) -> Result<GradCheckReport, E>
    where
        F: Fn(&Bindings<f64>) -> Result<Tensor<f64>, E>,
        E: From<DiffError>,
    {
        let bound = store.bind();
        let loss = f(&bound)?;
        loss.backward()?;
        let analytic = bound.gradients();

        let eval = |s: &ParameterStore<f64>| -> Result<f64, E> { Ok(f(&s.bind())?.item()?) };
        let mut probe = store.clone();
        let mut entries = Vec::with_capacity(store.len());
        for (name, param) in store.iter() {
            let n = param.data.len();
            let stride = match self.max_per_param {
                Some(m) if m > 0 && n > m => n.div_ceil(m),
                _ => 1,
            };
            let grad = analytic.get(name).expect("gradients mirror the store");
            let mut entry = GradCheckEntry { name: name.to_string(), max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
            for i in (0..n).step_by(stride) {
                let orig = param.data[i];
                probe.get_mut(name).expect("same keys").data[i] = orig + self.step;
                let plus = eval(&probe)?;
                probe.get_mut(name).expect("same keys").data[i] = orig - self.step;
                let minus = eval(&probe)?;
                probe.get_mut(name).expect("same keys").data[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let abs = (grad[i] - numeric).abs();
                let rel = abs / grad[i].abs().max(numeric.abs()).max(self.floor);
                entry.max_abs_err = entry.max_abs_err.max(abs);
                entry.max_rel_err = entry.max_rel_err.max(rel);
                entry.checked += 1;
            }
            entries.push(entry);
        }
        Ok(GradCheckReport { entries, tolerance })
    }
}

/// [`GradCheck::run`] with default step (1e-4) and floor.
pub fn grad_check<F, E>(store: &ParameterStore<f64>, f: F, tolerance: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&Bindings<f64>) -> Result<Tensor<f64>, E>,
    E: From<DiffError>,
{
    GradCheck::default().run(store, f, tolerance)
}
