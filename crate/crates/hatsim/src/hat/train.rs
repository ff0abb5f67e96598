//! Training loop and evaluation-under-perturbation.

use crate::autodiff::optimizer::cosine_lr;
use crate::autodiff::{sgd_update, Graph, NodeId, OptimizerState, ParamId};
use crate::error::{HatError, Result};
use crate::hat::pipeline::{forward, loss_node, ForwardStreams, PipelineMode};
use crate::hat::{HatModel, TimeState, TrainConfig};
use crate::perturb::PerturbationSpec;
use crate::rng::RngStream;
use crate::tensor::TensorValue;

#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub task_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub drift_collapsed: bool,
}

/// Range-regularization node: mean over layers of mean over entries of
/// `max(|W| − β·W_max, 0)²`, built on the given weight leaves so the task
/// and regularization paths share parameters.
pub fn range_regularization_node(
    g: &mut Graph,
    model: &HatModel,
    beta_reg: f64,
    weight_leaves: &[(ParamId, NodeId)],
) -> Result<NodeId> {
    let mut per_layer = Vec::with_capacity(model.layers.len());
    for (layer, (_, leaf)) in model.layers.iter().zip(weight_leaves) {
        let a = g.abs(*leaf);
        let shifted = g.add_scalar(a, -beta_reg * layer.crossbar.w_max);
        let hinge = g.relu(shifted);
        let sq = g.square(hinge);
        per_layer.push(g.mean_all(sq));
    }
    g.avg_n(&per_layer)
}

/// Scalar value of the range regularizer on the current weights.
pub fn range_regularization_value(model: &HatModel, beta_reg: f64) -> f64 {
    let mut acc = 0.0;
    for layer in &model.layers {
        let w = &model.params.get(layer.w).value;
        let threshold = beta_reg * layer.crossbar.w_max;
        let layer_mean = w
            .data()
            .iter()
            .map(|v| {
                let h = (v.abs() - threshold).max(0.0);
                h * h
            })
            .sum::<f64>()
            / w.len() as f64;
        acc += layer_mean;
    }
    acc / model.layers.len() as f64
}

/// One HAT step: sample ξ, build effective weights, perturbed forward,
/// task + λ·regularization loss, backward to the software weights, SGD
/// update, advance the time counter.
pub fn hat_train_step(
    model: &mut HatModel,
    batch_x: &TensorValue,
    batch_y: &[usize],
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    master: &RngStream,
    time: &mut TimeState,
) -> Result<StepRecord> {
    let streams = ForwardStreams::for_step(master, time.step);
    let mut g = Graph::new();
    let x = g.input(batch_x.clone());
    let fwd = forward(&mut g, model, x, &streams, time, PipelineMode::Stored)?;
    let task = loss_node(&mut g, model, fwd.logits, batch_y, None)?;
    let total = if cfg.lambda_reg > 0.0 {
        let reg = range_regularization_node(&mut g, model, cfg.beta_reg, &fwd.weight_leaves)?;
        let scaled = g.scale(reg, cfg.lambda_reg);
        g.add(task, scaled)?
    } else {
        task
    };

    let task_loss = g.value(task).data()[0];
    let total_loss = g.value(total).data()[0];
    if !total_loss.is_finite() {
        let specs: Vec<&str> = model.layers[0]
            .perturbations
            .iter()
            .map(PerturbationSpec::name)
            .collect();
        return Err(HatError::NonFiniteLoss {
            step: time.step,
            detail: format!("loss {total_loss}; active specs: {specs:?}"),
        });
    }

    let bw = g.backward(total)?;
    g.accumulate_param_grads(&bw, &mut model.params);
    let grad_norm = model
        .params
        .iter()
        .map(|(_, p)| p.grad.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    sgd_update(&mut model.params, opt);
    let record = StepRecord {
        step: time.step,
        task_loss,
        total_loss,
        grad_norm,
        drift_collapsed: fwd.drift_collapsed,
    };
    time.step += 1;
    Ok(record)
}

/// Deterministic mini-batch trainer: shuffles once per epoch from a labeled
/// stream, applies the cosine schedule, and records per-step statistics.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub opt: OptimizerState,
    pub time: TimeState,
    pub records: Vec<StepRecord>,
    master: RngStream,
    total_steps: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, n_train: usize, master: RngStream) -> Result<Self> {
        cfg.validate()?;
        let steps_per_epoch = n_train.div_ceil(cfg.batch_size).max(1);
        let total_steps = cfg.steps.unwrap_or(cfg.epochs * steps_per_epoch);
        let opt = OptimizerState::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;
        Ok(Self {
            cfg: cfg.clone(),
            opt,
            time: TimeState::new(cfg.drift_horizon),
            records: Vec::new(),
            master,
            total_steps,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn steps_done(&self) -> usize {
        self.records.len()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn reshuffle(&mut self, n: usize) {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = self
            .master
            .child(&format!("data/epoch{}", self.epoch))
            .rng();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        self.order = order;
        self.cursor = 0;
    }

    fn next_batch(&mut self, x: &TensorValue, y: &[usize]) -> (TensorValue, Vec<usize>) {
        let n = y.len();
        if self.order.is_empty() || self.cursor >= n {
            if !self.order.is_empty() {
                self.epoch += 1;
            }
            self.reshuffle(n);
        }
        let end = (self.cursor + self.cfg.batch_size).min(n);
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let cols = x.cols();
        let mut bx = TensorValue::zeros(&[idx.len(), cols]);
        let mut by = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..cols {
                bx.set(r, c, x.at(i, c));
            }
            by.push(y[i]);
        }
        (bx, by)
    }

    /// Run `n` optimizer steps; `on_epoch` fires at each epoch boundary with
    /// the epoch index just completed.
    pub fn run_steps(
        &mut self,
        model: &mut HatModel,
        x: &TensorValue,
        y: &[usize],
        n: usize,
        mut on_epoch: impl FnMut(usize, &mut HatModel) -> Result<()>,
    ) -> Result<()> {
        let mut last_epoch = self.epoch;
        for _ in 0..n {
            if self.cfg.cosine_schedule {
                self.opt.set_learning_rate(cosine_lr(
                    self.cfg.learning_rate,
                    self.time.step,
                    self.total_steps,
                ));
            }
            let (bx, by) = self.next_batch(x, y);
            let rec = hat_train_step(
                model,
                &bx,
                &by,
                &self.cfg,
                &mut self.opt,
                &self.master,
                &mut self.time,
            )?;
            self.records.push(rec);
            if self.epoch != last_epoch {
                on_epoch(last_epoch, model)?;
                last_epoch = self.epoch;
            }
        }
        Ok(())
    }

    /// Train for the configured total step budget.
    pub fn run(
        &mut self,
        model: &mut HatModel,
        x: &TensorValue,
        y: &[usize],
        on_epoch: impl FnMut(usize, &mut HatModel) -> Result<()>,
    ) -> Result<()> {
        let remaining = self.total_steps.saturating_sub(self.steps_done());
        self.run_steps(model, x, y, remaining, on_epoch)
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub per_draw: Vec<f64>,
    /// Mean over draws of the network-aggregated relative distortion against
    /// the clean forward pass.
    pub delta_global_mean: f64,
    pub n_draws: usize,
}

/// Accuracy under perturbation, averaged over `n_draws` noise draws with one
/// shared programming event. `lists` gives per-layer evaluation specs; None
/// evaluates the clean model.
pub fn evaluate(
    model: &HatModel,
    x: &TensorValue,
    y: &[usize],
    lists: Option<&[Vec<PerturbationSpec>]>,
    scope: &RngStream,
    time: &TimeState,
    n_draws: usize,
) -> Result<EvalReport> {
    assert!(n_draws >= 1, "n_draws must be >= 1");
    // Clean reference for the distortion metric.
    let mut g_ref = Graph::new();
    let x_ref = g_ref.input(x.clone());
    let clean_streams = ForwardStreams::for_eval_draw(scope, 0);
    let clean = forward(
        &mut g_ref,
        model,
        x_ref,
        &clean_streams,
        time,
        PipelineMode::Clean,
    )?;
    let clean_outputs: Vec<TensorValue> = clean
        .layer_outputs
        .iter()
        .map(|&n| g_ref.value(n).clone())
        .collect();

    let mut per_draw = Vec::with_capacity(n_draws);
    let mut delta_acc = 0.0;
    for draw in 0..n_draws {
        let streams = ForwardStreams::for_eval_draw(scope, draw);
        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let mode = match lists {
            Some(l) => PipelineMode::Override(l),
            None => PipelineMode::Clean,
        };
        let fwd = forward(&mut g, model, xn, &streams, time, mode)?;
        per_draw.push(accuracy(g.value(fwd.logits), y));
        let pert_outputs: Vec<TensorValue> = fwd
            .layer_outputs
            .iter()
            .map(|&n| g.value(n).clone())
            .collect();
        delta_acc +=
            crate::diagnostics::distortion_global(&clean_outputs, &pert_outputs, 1e-12)?;
    }
    let mean = per_draw.iter().sum::<f64>() / n_draws as f64;
    let var = per_draw
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / n_draws as f64;
    Ok(EvalReport {
        accuracy_mean: mean,
        accuracy_std: var.sqrt(),
        per_draw,
        delta_global_mean: delta_acc / n_draws as f64,
        n_draws,
    })
}

/// Fraction of rows whose argmax logit matches the label.
pub fn accuracy(logits: &TensorValue, y: &[usize]) -> f64 {
    let (b, c) = (logits.rows(), logits.cols());
    let mut hits = 0usize;
    for r in 0..b {
        let row = &logits.data()[r * c..(r + 1) * c];
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == y[r] {
            hits += 1;
        }
    }
    hits as f64 / b as f64
}
