//! Shared optimisation loop: per-example graphs with summed gradients,
//! non-finite loss detection, periodic checkpoints and resumable Adam state.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Checkpoint, Gradients, Graph, NodeId, ParamStore, Tensor};

/// Where and how often to write checkpoints while training.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoint path, rewritten atomically every `checkpoint_every` steps
    /// and at the end.
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
    /// Worker threads for per-example graphs (1 = sequential).
    pub jobs: usize,
    /// Stop after this many steps even if the configured count is larger.
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub loss: Vec<f64>,
    /// Task-specific per-step metric (accuracy, permutation switch rate, ...).
    pub metric: Vec<f64>,
}

impl History {
    /// Mean loss over the last `n` steps.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let k = n.min(self.loss.len()).max(1);
        self.loss[self.loss.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
    }

    pub fn head_loss(&self, n: usize) -> f64 {
        let k = n.min(self.loss.len()).max(1);
        self.loss[..k.min(self.loss.len())].iter().sum::<f64>() / k as f64
    }
}

/// Builds one graph per item, backpropagates each and sums the gradients in
/// item order. `f` returns the loss node and a per-item statistic.
pub fn batch_gradients<T: Sync, A: Send>(
    params: &ParamStore,
    items: &[T],
    jobs: usize,
    f: impl Fn(&mut Graph, &T) -> Result<(NodeId, A)> + Sync,
) -> Result<(Gradients, f64, Vec<A>)> {
    let run = |item: &T| -> Result<(Gradients, f64, A)> {
        let mut g = Graph::new(params);
        let (loss, aux) = f(&mut g, item)?;
        let value = g.value(loss).item();
        Ok((g.backward(loss)?, value, aux))
    };
    let results: Vec<Result<(Gradients, f64, A)>> = if jobs <= 1 || items.len() <= 1 {
        items.iter().map(run).collect()
    } else {
        let chunk = items.len().div_ceil(jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        })
    };
    let mut total = Gradients::default();
    let mut loss = 0.0;
    let mut aux = Vec::with_capacity(items.len());
    for r in results {
        let (g, l, a) = r?;
        total.merge(&g);
        loss += l;
        aux.push(a);
    }
    Ok((total, loss, aux))
}

pub fn gradients_finite(g: &Gradients) -> bool {
    g.iter().all(|(_, t)| t.is_finite())
}

/// Adam moments as named arrays (`adam.m.<param>`, `adam.v.<param>`).
pub fn adam_arrays(adam: &Adam, params: &ParamStore) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (id, p) in params.iter() {
        out.push((format!("adam.m.{}", p.name), adam.m[id.index()].clone()));
        out.push((format!("adam.v.{}", p.name), adam.v[id.index()].clone()));
    }
    out
}

/// Restores Adam state saved by [`adam_arrays`]; missing moments start at zero.
pub fn adam_from_checkpoint(ck: &Checkpoint, params: &ParamStore, config: AdamConfig, step: u64) -> Adam {
    let mut adam = Adam::new(config, params);
    adam.step = step;
    for (id, p) in params.iter() {
        if let Some(m) = ck.array(&format!("adam.m.{}", p.name)) {
            adam.m[id.index()] = m.clone();
        }
        if let Some(v) = ck.array(&format!("adam.v.{}", p.name)) {
            adam.v[id.index()] = v.clone();
        }
    }
    adam
}

/// Learning-rate multiplier: linear warm-up, then cosine decay to
/// `final_fraction` of the base rate at the last step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub final_fraction: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            warmup_steps: 0,
            final_fraction: 1.0,
        }
    }
}

impl LrSchedule {
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let x = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.final_fraction + (1.0 - self.final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
    }
}

/// Runs `step_fn` for steps `start..end`, applying Adam after each. A
/// non-finite loss or gradient aborts with the step index and the last
/// checkpoint written.
pub fn run_steps(
    params: &mut ParamStore,
    adam: &mut Adam,
    start: usize,
    end: usize,
    opts: &TrainOptions,
    history: &mut History,
    step_fn: impl FnMut(&ParamStore, usize) -> Result<(Gradients, f64, f64)>,
    save: impl Fn(&ParamStore, &Adam, usize, &History) -> Checkpoint,
) -> Result<()> {
    run_steps_scheduled(params, adam, start, end, LrSchedule::default(), opts, history, step_fn, save)
}

/// [`run_steps`] with the base learning rate scaled by `schedule` over the
/// configured `end` steps.
#[allow(clippy::too_many_arguments)]
pub fn run_steps_scheduled(
    params: &mut ParamStore,
    adam: &mut Adam,
    start: usize,
    end: usize,
    schedule: LrSchedule,
    opts: &TrainOptions,
    history: &mut History,
    mut step_fn: impl FnMut(&ParamStore, usize) -> Result<(Gradients, f64, f64)>,
    save: impl Fn(&ParamStore, &Adam, usize, &History) -> Checkpoint,
) -> Result<()> {
    let mut last_good: Option<PathBuf> = opts.checkpoint.clone().filter(|p| p.exists());
    let base_lr = adam.config.lr;
    let total = end;
    let end = opts.max_steps.map_or(end, |m| end.min(m));
    for step in start..end {
        let (grads, loss, metric) = step_fn(params, step)?;
        if !loss.is_finite() || !gradients_finite(&grads) {
            log::error!("non-finite loss at step {step}");
            return Err(Error::NumericalAbort { step, last_good });
        }
        adam.config.lr = base_lr * schedule.factor(step, total);
        adam.update(params, &grads);
        history.loss.push(loss);
        history.metric.push(metric);
        if step % 50 == 0 {
            log::info!("step {step}: loss {loss:.5} metric {metric:.4}");
        }
        let done = step + 1;
        if let Some(path) = &opts.checkpoint {
            if (opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0) || done == end {
                let mut a = adam.clone();
                a.config.lr = base_lr;
                save(params, &a, done, history).save(path)?;
                last_good = Some(path.clone());
            }
        }
    }
    adam.config.lr = base_lr;
    Ok(())
}

/// Training step and history stored in a checkpoint's metadata.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub step: usize,
    pub history: History,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl TrainMeta {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        serde_json::from_str(&ck.meta_json).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))
    }
}

pub fn meta_json(step: usize, history: &History, extra: serde_json::Value) -> String {
    serde_json::to_string(&TrainMeta {
        step,
        history: history.clone(),
        extra,
    })
    .expect("metadata serialises")
}

pub fn config_json<T: Serialize>(config: &T) -> String {
    serde_json::to_string(config).expect("config serialises")
}

pub fn parse_config<T: serde::de::DeserializeOwned>(ck: &Checkpoint, expected_kind: &str, path: Option<&Path>) -> Result<T> {
    if ck.kind != expected_kind {
        return Err(Error::Format(format!(
            "{}checkpoint holds a {:?} model, expected {expected_kind:?}",
            path.map(|p| format!("{}: ", p.display())).unwrap_or_default(),
            ck.kind
        )));
    }
    serde_json::from_str(&ck.config_json).map_err(|e| Error::Format(format!("checkpoint config: {e}")))
}
