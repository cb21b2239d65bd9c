//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Largest tolerated relative error per element.
    pub tolerance: f64,
    /// Gradients smaller than this are compared absolutely against it.
    pub floor: f64,
    /// Upper bound on probed elements per parameter (evenly strided).
    pub max_elements: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            max_elements: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub probed: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| !p.passed).collect()
    }
}

/// Compares `backward` against central differences of the scalar returned by
/// `build` for every trainable parameter. Frozen parameters are not reported.
pub fn finite_diff_check<F>(params: &ParamStore, build: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(store);
        let loss = build(&mut g)?;
        Ok(g.value(loss).item())
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport::default();
    for (id, p) in params.iter() {
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let stride = n.div_ceil(opts.max_elements.max(1)).max(1);
        let mut worst: f64 = 0.0;
        let mut probed = 0;
        for e in (0..n).step_by(stride) {
            let orig = p.value.data()[e];
            probe.value_mut(id).data_mut()[e] = orig + opts.step;
            let plus = eval(&probe)?;
            probe.value_mut(id).data_mut()[e] = orig - opts.step;
            let minus = eval(&probe)?;
            probe.value_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let exact = analytic.get(id).map_or(0.0, |g| g.data()[e]);
            let denom = exact.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max((exact - numeric).abs() / denom);
            probed += 1;
        }
        report.params.push(ParamCheck {
            name: p.name.clone(),
            max_rel_err: worst,
            probed,
            passed: worst < opts.tolerance,
        });
    }
    Ok(report)
}
