//! Central finite-difference checks of reverse-mode gradients (f64 only).

use rand::seq::index::sample;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::init::seeded;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Retry a mismatching element with this smaller step; a ReLU or max kink
    /// inside the first stencil is the usual cause of an isolated mismatch.
    pub retry_step: Option<f64>,
    /// Check at most this many (seeded, random) elements per tensor.
    pub max_elems: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-3,
            abs_tol: 1e-5,
            retry_step: Some(1e-6),
            max_elems: None,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn agrees(&self, analytic: f64, numeric: f64) -> bool {
        let tol = (self.rel_tol * analytic.abs().max(numeric.abs())).max(self.abs_tol);
        (analytic - numeric).abs() <= tol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatches.is_empty()
    }

    pub fn worst(&self) -> Option<&Mismatch> {
        self.mismatches
            .iter()
            .max_by(|a, b| (a.analytic - a.numeric).abs().total_cmp(&(b.analytic - b.numeric).abs()))
    }
}

fn element_indices(numel: usize, cfg: &GradCheckConfig, salt: u64) -> Vec<usize> {
    match cfg.max_elems {
        Some(k) if k < numel => {
            let mut rng = seeded(cfg.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx = sample(&mut rng, numel, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..numel).collect(),
    }
}

/// Check `f`'s gradient with respect to each input tensor, which become
/// grad-requiring leaves in the order given.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(&g, v)).collect();

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, a) in analytic.iter().enumerate() {
        for idx in element_indices(a.numel(), cfg, ti as u64) {
            let base = work[ti].data()[idx];
            let mut numeric = |h: f64| -> Result<f64> {
                work[ti].data_mut()[idx] = base + h;
                let up = eval(&work)?;
                work[ti].data_mut()[idx] = base - h;
                let down = eval(&work)?;
                work[ti].data_mut()[idx] = base;
                Ok((up - down) / (2.0 * h))
            };
            let an = a.data()[idx];
            let mut num = numeric(cfg.step)?;
            if !cfg.agrees(an, num) {
                if let Some(h) = cfg.retry_step {
                    num = numeric(h)?;
                }
            }
            report.checked += 1;
            if !cfg.agrees(an, num) {
                report.mismatches.push(Mismatch {
                    tensor: format!("input{ti}"),
                    index: idx,
                    analytic: an,
                    numeric: num,
                });
            }
        }
    }
    Ok(report)
}

/// Check the gradient of `f` with respect to every trainable parameter of
/// `store` that `f` binds. The store is perturbed in place and restored.
pub fn check_params<F>(store: &mut ParamStore<f64>, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let (names, analytic) = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        let grads = g.backward(loss)?;
        let mut names = Vec::new();
        let mut analytic = Vec::new();
        for (name, var) in g.bound_params() {
            if g.requires_grad(var) {
                names.push(name.to_string());
                analytic.push(grads.wrt(&g, var));
            }
        }
        (names, analytic)
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let loss = f(&mut g)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport::default();
    for (ni, (name, a)) in names.iter().zip(&analytic).enumerate() {
        for idx in element_indices(a.numel(), cfg, ni as u64 + 1) {
            let base = store.value(name)?.data()[idx];
            let mut numeric = |h: f64| -> Result<f64> {
                store.value_mut(name)?.data_mut()[idx] = base + h;
                let up = eval(store)?;
                store.value_mut(name)?.data_mut()[idx] = base - h;
                let down = eval(store)?;
                store.value_mut(name)?.data_mut()[idx] = base;
                Ok((up - down) / (2.0 * h))
            };
            let an = a.data()[idx];
            let mut num = numeric(cfg.step)?;
            if !cfg.agrees(an, num) {
                if let Some(h) = cfg.retry_step {
                    num = numeric(h)?;
                }
            }
            report.checked += 1;
            if !cfg.agrees(an, num) {
                report.mismatches.push(Mismatch {
                    tensor: name.clone(),
                    index: idx,
                    analytic: an,
                    numeric: num,
                });
            }
        }
    }
    Ok(report)
}
