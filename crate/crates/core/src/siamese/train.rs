use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{EncodedPair, SiameseModel};
use crate::error::{Error, Result};
use crate::evalreport::{confusion, MetricsRow};
use crate::seed;

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One update of `params[range]` from `grad[range]`; the rest is left alone.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, frozen: Option<std::ops::Range<usize>>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for i in 0..params.len() {
            if let Some(r) = &frozen {
                if r.contains(&i) {
                    continue;
                }
            }
            let g = grad[i];
            let m = b1 * self.m[i] + (1.0 - b1) * g;
            let v = b2 * self.v[i] + (1.0 - b2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            params[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch, accumulated while the epoch runs.
    pub epoch_losses: Vec<f64>,
    /// Validation metrics after each epoch at the configured threshold;
    /// empty when no validation pairs were given.
    pub valid_metrics: Vec<MetricsRow>,
    pub wall_time_secs: f64,
    pub weights_checksum: String,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.epoch_losses.len()
    }
}

/// Runs epochs over a model, keeping optimizer state so a run can be
/// checkpointed and resumed.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub(crate) model: SiameseModel,
    pub(crate) adam: Adam,
    pub(crate) report: TrainReport,
}

impl Trainer {
    pub fn new(model: SiameseModel) -> Self {
        let n = model.num_params();
        Trainer {
            model,
            adam: Adam::new(n),
            report: TrainReport::default(),
        }
    }

    pub fn model(&self) -> &SiameseModel {
        &self.model
    }

    pub fn into_model(self) -> SiameseModel {
        self.model
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn epochs_done(&self) -> usize {
        self.report.epochs_run()
    }

    /// Trains until `config.epochs` epochs have run in total.
    pub fn fit(&mut self, train: &[EncodedPair], valid: &[EncodedPair]) -> Result<&TrainReport> {
        let target = self.model.config.epochs;
        self.fit_until(train, valid, target)
    }

    /// Trains until `epochs` epochs have run in total.
    pub fn fit_until(&mut self, train: &[EncodedPair], valid: &[EncodedPair], epochs: usize) -> Result<&TrainReport> {
        let positives = train.iter().filter(|p| p.label == 1).count();
        if positives == 0 || positives == train.len() {
            return Err(Error::Training(format!(
                "training set needs both labels ({positives} positive of {})",
                train.len()
            )));
        }
        let start = Instant::now();
        while self.epochs_done() < epochs {
            self.run_epoch(train, valid)?;
        }
        self.report.wall_time_secs += start.elapsed().as_secs_f64();
        self.report.weights_checksum = self.model.weights_checksum();
        Ok(&self.report)
    }

    fn run_epoch(&mut self, train: &[EncodedPair], valid: &[EncodedPair]) -> Result<()> {
        let epoch = self.epochs_done();
        let cfg = self.model.config.clone();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::stream(cfg.seed, "shuffle", epoch as u64));
        let frozen = (!cfg.trainable_embeddings).then(|| self.model.embedding_range());

        let mut total = 0.0;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(idx.iter().map(|&i| train[i].clone()));
            let (loss, grad) = self.model.loss_and_grad(&batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {b} ({} pairs, lr {})",
                    batch.len(),
                    cfg.learning_rate
                )));
            }
            total += loss * batch.len() as f64;
            self.adam
                .update(&mut self.model.params, &grad, cfg.learning_rate, frozen.clone());
        }
        self.report.epoch_losses.push(total / train.len() as f64);

        if !valid.is_empty() {
            let preds = self.model.predict(valid, cfg.threshold);
            let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
            let labels: Vec<u8> = valid.iter().map(|p| p.label).collect();
            let cm = confusion(&scores, &labels, cfg.threshold)?;
            self.report.valid_metrics.push(MetricsRow::new(
                "siamese",
                format!("epoch {}", epoch + 1),
                cfg.threshold,
                cm,
            ));
        }
        Ok(())
    }
}

/// Trains `model` in place for `config.epochs` epochs.
pub fn train(model: &mut SiameseModel, train: &[EncodedPair], valid: &[EncodedPair]) -> Result<TrainReport> {
    let mut t = Trainer::new(model.clone());
    t.fit(train, valid)?;
    *model = t.model;
    Ok(t.report)
}
