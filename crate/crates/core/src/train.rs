//! Training and evaluation loops for the CIFAR networks.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::cifar::CifarData;
use crate::data::{make_batch, NormStats, Prefetcher, Sampler};
use crate::error::{Error, Result};
use crate::nn::checkpoint;
use crate::nn::graph::Graph;
use crate::nn::layers::{LayerKind, Mode, ParamRole};
use crate::nn::optim::{LrSchedule, Sgd, SgdConfig};
use crate::tensor::{Element, Tensor};

pub const METRICS_SCHEMA: &str = "asl-metrics/1";
/// Training batches run through BN layers that have never seen data.
pub const CALIBRATION_BATCHES: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub augment: bool,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_interval: u64,
    pub eval_batch: usize,
    pub prefetch: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 64_000,
            batch_size: 128,
            sgd: SgdConfig::default(),
            augment: true,
            eval_interval: 2_000,
            checkpoint_interval: 4_000,
            checkpoint_dir: None,
            log_interval: 100,
            eval_batch: 500,
            prefetch: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Shortened run with the step schedule's milestones scaled to match.
    pub fn scaled(iterations: u64) -> Self {
        let base = TrainConfig::default();
        let scale = |m: u64| m * iterations / base.iterations;
        TrainConfig {
            iterations,
            sgd: SgdConfig {
                schedule: LrSchedule::Step {
                    base: 0.1,
                    gamma: 0.1,
                    milestones: vec![scale(32_000), scale(48_000)],
                },
                ..base.sgd.clone()
            },
            ..base
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub top1: f64,
    /// Present when there are at least five classes.
    pub top5: Option<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub test_top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub schema: String,
    pub network: String,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub param_count: usize,
    pub trainable_param_count: usize,
    pub shift_param_count: usize,
    pub test: EvalReport,
    pub final_train_loss: Option<f64>,
    pub wall_time_s: f64,
    pub history: Vec<HistoryEntry>,
}

fn topk_hits<T: Element>(logits: &Tensor<T>, labels: &[usize], k: usize) -> usize {
    let s = logits.shape();
    let classes = s.c;
    labels
        .iter()
        .enumerate()
        .filter(|&(n, &y)| {
            let row = &logits.data()[n * classes..(n + 1) * classes];
            let target = row[y];
            // Ties are resolved against the label.
            let above = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > target || (v == target && j < y))
                .count();
            above < k
        })
        .count()
}

fn bn_layers_have_statistics<T: Element>(graph: &Graph<T>) -> bool {
    graph
        .named_buffers()
        .iter()
        .filter(|(name, _)| name.ends_with("batches_tracked"))
        .all(|(_, b)| b.value[0] > T::zero())
}

/// Fills BN running statistics by running training-mode forward passes
/// without any parameter update. No-op once statistics exist.
pub fn calibrate_bn<T: Element>(
    graph: &mut Graph<T>,
    data: &CifarData,
    stats: &NormStats,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    let has_bn = graph.nodes().iter().any(|n| n.kind() == Some(LayerKind::BatchNorm));
    if !has_bn || bn_layers_have_statistics(graph) {
        return Ok(());
    }
    log::info!("collecting batch-norm statistics over {CALIBRATION_BATCHES} batches");
    let mode = graph.mode();
    graph.set_mode(Mode::Train);
    let mut sampler = Sampler::new(data.len(), batch_size.min(data.len()), seed)?;
    for i in 0..CALIBRATION_BATCHES as u64 {
        let (x, _) = make_batch::<T>(data, &sampler.indices(i), stats, None)?;
        graph.forward(&x)?;
    }
    graph.clear_caches();
    graph.set_mode(mode);
    Ok(())
}

pub fn evaluate<T: Element>(
    graph: &mut Graph<T>,
    data: &CifarData,
    stats: &NormStats,
    batch: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let mode = graph.mode();
    graph.set_mode(Mode::Eval);
    let mut top1 = 0;
    let mut top5 = 0;
    let mut loss = 0.0;
    let mut classes = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = make_batch::<T>(data, chunk, stats, None)?;
        let r = graph.forward_loss(&x, &labels);
        let (logits, l) = match r {
            Ok(v) => v,
            Err(e) => {
                graph.set_mode(mode);
                return Err(e);
            }
        };
        classes = logits.shape().c;
        top1 += topk_hits(&logits, &labels, 1);
        top5 += topk_hits(&logits, &labels, 5);
        loss += l * chunk.len() as f64;
    }
    graph.clear_caches();
    graph.set_mode(mode);
    let n = data.len() as f64;
    Ok(EvalReport {
        examples: data.len(),
        top1: top1 as f64 / n,
        top5: (classes >= 5).then(|| top5 as f64 / n),
        loss: loss / n,
    })
}

/// Owns a graph, its optimizer and the data order of one training run.
pub struct Trainer<T: Element> {
    pub graph: Graph<T>,
    pub opt: Sgd<T>,
    pub config: TrainConfig,
    pub stats: NormStats,
    pub network: String,
    train: Arc<CifarData>,
    test: Arc<CifarData>,
    iteration: u64,
    history: Vec<HistoryEntry>,
    losses: Vec<f64>,
}

type Batch<T> = (u64, Tensor<T>, Vec<usize>);

impl<T: Element> Trainer<T> {
    pub fn new(
        graph: Graph<T>,
        network: String,
        config: TrainConfig,
        train: Arc<CifarData>,
        test: Arc<CifarData>,
    ) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let stats = NormStats::compute(&train)?;
        let opt = Sgd::new(config.sgd.clone(), &graph);
        Ok(Trainer {
            graph,
            opt,
            config,
            stats,
            network,
            train,
            test,
            iteration: 0,
            history: Vec::new(),
            losses: Vec::new(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Training losses of the iterations run by this trainer, in order.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn resume(&mut self, path: &Path) -> Result<()> {
        self.iteration = checkpoint::load(path, &mut self.graph, Some(&mut self.opt))?;
        log::info!("resumed from {} at iteration {}", path.display(), self.iteration);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.graph, Some(&self.opt), self.iteration)
    }

    fn batch_source(&self, until: u64) -> Box<dyn Iterator<Item = Result<Batch<T>>> + Send> {
        let data = Arc::clone(&self.train);
        let stats = self.stats;
        let augment = self.config.augment;
        let mut sampler = Sampler::new(data.len(), self.config.batch_size, self.config.seed).expect("validated");
        let produce = move |it: u64| -> Result<Batch<T>> {
            let idx = sampler.indices(it);
            let augs = augment.then(|| sampler.augmentations(it));
            let (x, y) = make_batch::<T>(&data, &idx, &stats, augs.as_deref())?;
            Ok((it, x, y))
        };
        let range = self.iteration..until;
        if self.config.prefetch {
            Box::new(Prefetcher::spawn(range, 2, produce))
        } else {
            Box::new(range.map(produce))
        }
    }

    pub fn evaluate(&mut self) -> Result<EvalReport> {
        calibrate_bn(&mut self.graph, &self.train, &self.stats, self.config.batch_size, self.config.seed)?;
        evaluate(&mut self.graph, &self.test, &self.stats, self.config.eval_batch)
    }

    /// Trains until `until` (capped at the configured iteration count).
    pub fn run_until(&mut self, until: u64) -> Result<()> {
        let until = until.min(self.config.iterations);
        if self.iteration >= until {
            return Ok(());
        }
        self.graph.set_mode(Mode::Train);
        let mut window = 0.0;
        let mut window_n = 0;
        for item in self.batch_source(until) {
            let (it, x, labels) = item?;
            let (_, loss) = self.graph.forward_loss(&x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::State(format!("training diverged at iteration {it} (loss {loss})")));
            }
            self.graph.backward()?;
            self.opt.step(&mut self.graph, it)?;
            self.iteration = it + 1;
            self.losses.push(loss);
            window += loss;
            window_n += 1;
            let done = self.iteration;
            let lr = self.config.sgd.schedule.lr(it);
            if self.config.log_interval > 0 && done.is_multiple_of(self.config.log_interval) {
                log::info!("iter {done} loss {:.4} lr {lr:.5}", window / window_n as f64);
            }
            let eval_now = self.config.eval_interval > 0 && done.is_multiple_of(self.config.eval_interval);
            if eval_now || (self.config.log_interval > 0 && done.is_multiple_of(self.config.log_interval)) {
                let test_top1 = if eval_now {
                    let r = self.evaluate()?;
                    log::info!("iter {done} test top1 {:.4} loss {:.4}", r.top1, r.loss);
                    Some(r.top1)
                } else {
                    None
                };
                self.history.push(HistoryEntry {
                    iteration: done,
                    lr,
                    train_loss: window / window_n as f64,
                    test_top1,
                });
                window = 0.0;
                window_n = 0;
            }
            if let Some(dir) = &self.config.checkpoint_dir {
                if self.config.checkpoint_interval > 0 && done.is_multiple_of(self.config.checkpoint_interval) {
                    let path = dir.join(format!("ckpt_{done:06}.bin"));
                    self.save(&path)?;
                    self.save(&dir.join("latest.bin"))?;
                    log::info!("wrote checkpoint {}", path.display());
                }
            }
        }
        self.graph.clear_caches();
        Ok(())
    }

    /// Runs the remaining iterations, evaluates and assembles the metrics.
    pub fn run(&mut self) -> Result<Metrics> {
        let start = Instant::now();
        self.run_until(self.config.iterations)?;
        let test = self.evaluate()?;
        Ok(Metrics {
            schema: METRICS_SCHEMA.into(),
            network: self.network.clone(),
            iterations: self.iteration,
            batch_size: self.config.batch_size,
            seed: self.config.seed,
            param_count: self.graph.param_count(),
            trainable_param_count: self.graph.trainable_param_count(),
            shift_param_count: self.graph.param_count_by_role(ParamRole::Shift),
            test,
            final_train_loss: self.losses.last().copied(),
            wall_time_s: start.elapsed().as_secs_f64(),
            history: self.history.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn topk_counts() {
        let logits = Tensor::from_vec(
            Shape4::new(2, 3, 1, 1),
            vec![0.1f32, 0.5, 0.2, 0.9, 0.0, 0.3],
        )
        .unwrap();
        assert_eq!(topk_hits(&logits, &[1, 2], 1), 1);
        assert_eq!(topk_hits(&logits, &[1, 2], 2), 2);
        assert_eq!(topk_hits(&logits, &[2, 1], 2), 1);
    }

    #[test]
    fn scaled_schedule() {
        let cfg = TrainConfig::scaled(16_000);
        assert_eq!(
            cfg.sgd.schedule,
            LrSchedule::Step {
                base: 0.1,
                gamma: 0.1,
                milestones: vec![8_000, 12_000]
            }
        );
        assert_eq!(TrainConfig::default().sgd.schedule, LrSchedule::cifar_default());
    }
}
