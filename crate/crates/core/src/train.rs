//! Self-supervised training loop: augmented views -> encoder and head ->
//! per-anchor loss -> SGD with momentum under a warmup + cosine schedule.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::batchpipe::{batch_loss_and_grad, BatchLossConfig, GroupConfig, ViewBatch};
use crate::dataio::{
    augment_view, metrics_append, Dataset, MetricsRecord, RngStreams, StreamPurpose,
};
use crate::diffgrad::{Tape, Tensor};
use crate::error::{GrocoError, Result};
use crate::losses::LossConfig;
use crate::model::{cosine_warmup_lr, sgd_step, ModelDims, ModelParams, OptimizerState};
use crate::par::Execution;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Images per batch; each contributes `views` rows.
    pub batch_size: usize,
    pub views: usize,
    pub loss: LossConfig,
    /// Strongest negatives kept per anchor.
    pub negatives: usize,
    pub stop_grad: bool,
    pub preorder: bool,
    pub random_negatives: bool,
    /// Restrict InfoNCE to the same top-N negatives as GroCo.
    pub infonce_top_n: bool,
    pub lr: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub view_noise: f64,
    pub hidden: usize,
    pub rep_dim: usize,
    pub proj_dim: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 128,
            views: 2,
            loss: LossConfig::default(),
            negatives: 10,
            stop_grad: true,
            preorder: true,
            random_negatives: false,
            infonce_top_n: false,
            lr: 3.0,
            momentum: 0.9,
            warmup_epochs: 1,
            view_noise: 0.5,
            hidden: 128,
            rep_dim: 128,
            proj_dim: 64,
            seed: 0,
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch size", self.batch_size),
            ("negatives", self.negatives),
            ("hidden width", self.hidden),
            ("representation width", self.rep_dim),
            ("projection width", self.proj_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(GrocoError::invalid(format!("{name} must be positive")));
            }
        }
        if self.batch_size < 2 {
            return Err(GrocoError::invalid("batch size must be at least 2 images"));
        }
        if self.views < 2 {
            return Err(GrocoError::invalid("need at least 2 views per image"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(GrocoError::invalid(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(GrocoError::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.view_noise.is_finite() && self.view_noise >= 0.0) {
            return Err(GrocoError::invalid("view noise must be non-negative"));
        }
        Ok(())
    }

    pub fn dims(&self, input: usize) -> ModelDims {
        ModelDims {
            encoder: vec![input, self.hidden, self.hidden, self.rep_dim],
            projection: vec![self.rep_dim, self.proj_dim, self.proj_dim],
        }
    }

    pub fn batch_loss_config(&self) -> BatchLossConfig {
        let mut loss = self.loss;
        loss.groco.negatives = self.negatives;
        BatchLossConfig {
            loss,
            group: GroupConfig {
                top_n: Some(self.negatives),
                stop_grad: self.stop_grad,
                preorder: self.preorder,
                random_negatives: self.random_negatives,
                seed: 0,
            },
            infonce_top_n: self.infonce_top_n,
        }
    }

    /// Resolved configuration as `key=value` lines.
    pub fn dump(&self) -> String {
        let l = &self.loss;
        let margin = l.triplet.margin.to_string();
        [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("views", self.views.to_string()),
            ("loss", l.kind.to_string()),
            ("beta", l.groco.beta.to_string()),
            ("tau", l.infonce.tau.to_string()),
            ("margin", margin),
            ("negatives", self.negatives.to_string()),
            ("stopgrad", self.stop_grad.to_string()),
            ("preorder", self.preorder.to_string()),
            ("random_negatives", self.random_negatives.to_string()),
            ("infonce_top_n", self.infonce_top_n.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("view_noise", self.view_noise.to_string()),
            ("hidden", self.hidden.to_string()),
            ("rep_dim", self.rep_dim.to_string()),
            ("proj_dim", self.proj_dim.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
    }
}

/// Trained parameters, optimizer state and the per-step losses.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

fn batches_per_epoch(count: usize, batch_size: usize) -> usize {
    // a trailing batch of one image has no negatives and is dropped
    let full = count / batch_size;
    full + (count % batch_size >= 2) as usize
}

/// Train on `data` from a fresh initialisation. Metrics rows are appended
/// to `metrics` after every step when given.
pub fn train(config: &TrainConfig, data: &Dataset, metrics: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if data.count() < 2 {
        return Err(GrocoError::invalid("training needs at least two samples"));
    }
    let params = ModelParams::init(&config.dims(data.dim()), config.seed)?;
    train_from(config, data, params, metrics)
}

pub fn train_from(
    config: &TrainConfig,
    data: &Dataset,
    mut params: ModelParams,
    metrics: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let streams = RngStreams::new(config.seed);
    let mut shuffle_rng = streams.stream(StreamPurpose::Shuffle);
    let mut augment_rng = streams.stream(StreamPurpose::Augment);
    let mut negative_rng = streams.stream(StreamPurpose::Negatives);

    let batch_size = config.batch_size.min(data.count());
    let per_epoch = batches_per_epoch(data.count(), batch_size);
    let total = per_epoch * config.epochs;
    let warmup = (config.warmup_epochs * per_epoch).min(total.saturating_sub(1));
    let mut optimizer = OptimizerState::new(&params, config.momentum, config.lr);
    let mut loss_cfg = config.batch_loss_config();
    let mut step_losses = Vec::with_capacity(total);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.count()).collect();
    let m = config.views;

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sum = 0.0;
        for (b, images) in order.chunks(batch_size).take(per_epoch).enumerate() {
            let step = epoch * per_epoch + b;
            let mut x = Vec::with_capacity(images.len() * m * data.dim());
            let mut image_id = Vec::with_capacity(images.len() * m);
            for (slot, &img) in images.iter().enumerate() {
                let base = data.vector_f64(img);
                for _ in 0..m {
                    x.extend(augment_view(&base, config.view_noise, &mut augment_rng)?);
                    image_id.push(slot);
                }
            }
            loss_cfg.group.seed = negative_rng.gen();

            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::matrix(image_id.len(), data.dim(), x)?);
            let fwd = params.record(&mut tape, xv)?;
            let batch = ViewBatch::new(tape.value(fwd.projection).clone(), image_id)?;
            let (loss, dz) = batch_loss_and_grad(&batch, &loss_cfg, config.exec)
                .map_err(|e| at_step(e, step))?;
            if !loss.is_finite() {
                return Err(GrocoError::numeric(
                    None,
                    format!("non-finite loss {loss} at step {step}"),
                ));
            }
            let gm = tape.backward_from(fwd.projection, &dz)?;
            let grads: Vec<Tensor> = fwd.params.iter().map(|&p| gm.get(p)).collect();
            let lr = cosine_warmup_lr(step, total, warmup, config.lr)?;
            sgd_step(&mut params, &grads, &mut optimizer, lr)?;
            if !params.is_finite() {
                return Err(GrocoError::numeric(
                    None,
                    format!("non-finite parameters after step {step}"),
                ));
            }
            if let Some(path) = metrics {
                metrics_append(
                    path,
                    &MetricsRecord {
                        epoch,
                        step,
                        loss,
                        lr,
                        extra: Vec::new(),
                    },
                )?;
            }
            step_losses.push(loss);
            epoch_sum += loss;
        }
        epoch_losses.push(epoch_sum / per_epoch as f64);
    }
    Ok(TrainOutcome {
        params,
        optimizer,
        step_losses,
        epoch_losses,
    })
}

fn at_step(e: GrocoError, step: usize) -> GrocoError {
    match e {
        GrocoError::Numeric { node, message } => GrocoError::Numeric {
            node,
            message: format!("{message} (step {step})"),
        },
        other => other,
    }
}
