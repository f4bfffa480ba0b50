//! The training loop: batches, Adam updates, periodic evaluation and
//! resumable checkpoints.
//!
//! All randomness is derived from the seed and the iteration (or global
//! sample) index, never from state carried between iterations, so a run
//! resumed from a checkpoint replays the exact same batches.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ddnet_core::checkpoint;
use ddnet_core::losses::{median_frequency_weights, ClassFrequency};
use ddnet_core::metrics::predict;
use ddnet_core::{
    ArchSpec, ConfusionMatrix, Graph, LabelMap, LabelSpace, Mode, ParamStore, SegLoss, Session, Tensor4, WeightStrategy,
};
use ddnet_data::augment::{augment, channel_means, subtract_mean};
use ddnet_data::{batch, corpus, split_ids, AugPolicy, Sample};

use crate::adam::Adam;
use crate::config::TrainConfig;
use crate::error::{Result, TrainError};
use crate::report::{EvalRecord, RunReport, RunStatus};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

const ARCH_FILE: &str = "arch.dd";
const PARAMS_FILE: &str = "params.ddnp";
const BUFFERS_FILE: &str = "buffers.ddnp";
const OPTIMIZER_FILE: &str = "optimizer.ddnp";
const STATE_FILE: &str = "state.json";

const DOMAIN_EPOCH: u64 = 1;
const DOMAIN_AUGMENT: u64 = 2;
const DOMAIN_DROPOUT: u64 = 3;

fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

/// Training and evaluation samples held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub space: LabelSpace,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Dataset {
    pub fn new(space: LabelSpace, train: Vec<Sample>, eval: Vec<Sample>) -> Result<Self> {
        if train.is_empty() || eval.is_empty() {
            return Err(TrainError::Invalid(format!(
                "need training and evaluation images, got {} and {}",
                train.len(),
                eval.len()
            )));
        }
        Ok(Dataset { space, train, eval })
    }

    /// Loads a corpus directory and splits it by id hash.
    pub fn open(dir: &Path, space: LabelSpace, eval_fraction: f64) -> Result<Self> {
        let corpus = corpus::open(dir)?;
        let (train_ids, eval_ids) = split_ids(corpus.ids(), eval_fraction);
        let train = corpus.load_all(&train_ids)?;
        let eval = corpus.load_all(&eval_ids)?;
        Dataset::new(space, train, eval)
    }

    /// Median-frequency inputs from the training labels.
    pub fn class_frequencies(&self) -> Result<Vec<ClassFrequency>> {
        let mut out = vec![ClassFrequency::default(); self.space.num_classes];
        for s in &self.train {
            let mut counts = vec![0u64; self.space.num_classes];
            for &v in s.label.data() {
                if let Some(c) = self.space.target(v)? {
                    counts[c] += 1;
                }
            }
            let labelled: u64 = counts.iter().sum();
            for (f, n) in out.iter_mut().zip(counts) {
                if n > 0 {
                    f.pixels += n;
                    f.presence_pixels += labelled;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainState {
    iteration: usize,
    adam_step: u64,
    channel_mean: Vec<f32>,
    config: TrainConfig,
    records: Vec<EvalRecord>,
}

pub struct Trainer {
    arch: ArchSpec,
    cfg: TrainConfig,
    graph: Graph,
    store: ParamStore<f32>,
    adam: Adam,
    loss: SegLoss,
    mean: Vec<f32>,
    iteration: usize,
    records: Vec<EvalRecord>,
    loss_sum: f64,
    loss_steps: usize,
    epoch_order: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    /// Fresh parameters. The config's dropout rate replaces the spec's.
    pub fn new(arch: &ArchSpec, cfg: &TrainConfig, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let arch = arch.clone().with_dropout(cfg.dropout);
        let graph = Graph::build(&arch)?;
        if arch.num_classes != data.space.num_classes {
            return Err(TrainError::Invalid(format!(
                "architecture predicts {} classes but the data has {}",
                arch.num_classes, data.space.num_classes
            )));
        }
        let store = graph.init_params(cfg.seed);
        let adam = Adam::new(&store);
        let mut loss = SegLoss::new(cfg.weight_strategy, data.space);
        loss.l = cfg.l;
        loss.gamma = cfg.gamma;
        loss.aux_weight = cfg.aux_weight;
        if cfg.weight_strategy == WeightStrategy::MedianFrequency {
            let (w, absent) = median_frequency_weights(&data.class_frequencies()?, &data.space)?;
            if !absent.is_empty() {
                log::warn!("classes {absent:?} never appear in the training split");
            }
            loss.median = Some(w);
        }
        Ok(Trainer {
            mean: channel_means(&data.train),
            arch,
            cfg: cfg.clone(),
            graph,
            store,
            adam,
            loss,
            iteration: 0,
            records: Vec::new(),
            loss_sum: 0.0,
            loss_steps: 0,
            epoch_order: None,
        })
    }

    /// Continues from a checkpoint directory. `cfg` replaces the stored
    /// config when given (for example to extend the iteration budget).
    pub fn resume(dir: &Path, cfg: Option<&TrainConfig>, data: &Dataset) -> Result<Self> {
        let arch = checkpoint_arch(dir)?;
        let state = read_state(dir)?;
        let cfg = cfg.cloned().unwrap_or(state.config);
        let mut t = Trainer::new(&arch, &cfg, data)?;
        checkpoint::load_into(&mut t.store, &dir.join(PARAMS_FILE))?;
        checkpoint::load_into(&mut t.store, &dir.join(BUFFERS_FILE))?;
        let moments = checkpoint::read::<f32>(&dir.join(OPTIMIZER_FILE))?;
        t.adam.load_state(&t.store, moments, state.adam_step)?;
        t.mean = state.channel_mean;
        t.iteration = state.iteration;
        t.records = state.records;
        Ok(t)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn records(&self) -> &[EvalRecord] {
        &self.records
    }

    /// Training image for global sample index `g`: each epoch visits every
    /// image `windows` times in a seeded order, with a fresh augmentation
    /// draw per visit.
    fn batch_item(&mut self, data: &Dataset, g: usize) -> Result<Sample> {
        let k = self.cfg.windows;
        let epoch_len = data.train.len() * k;
        let (epoch, pos) = (g / epoch_len, g % epoch_len);
        if self.epoch_order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..epoch_len).collect();
            order.shuffle(&mut stream_rng(self.cfg.seed, DOMAIN_EPOCH, epoch as u64));
            self.epoch_order = Some((epoch, order));
        }
        let entry = self.epoch_order.as_ref().expect("set above").1[pos];
        let policy = AugPolicy {
            crop: self.cfg.crop,
            windows: 1,
            flip: self.cfg.flip,
            flip_prob: self.cfg.flip_prob,
            mean: Some(self.mean.clone()),
        };
        let mut rng = stream_rng(self.cfg.seed, DOMAIN_AUGMENT, g as u64);
        Ok(augment(&data.train[entry / k], &policy, &mut rng)?)
    }

    /// One optimisation step; returns the training loss.
    pub fn step(&mut self, data: &Dataset) -> Result<f64> {
        let it = self.iteration;
        let b = self.cfg.batch;
        let samples = (it * b..(it + 1) * b)
            .map(|g| self.batch_item(data, g))
            .collect::<Result<Vec<_>>>()?;
        let (x, labels) = batch(&samples)?;
        let dropout_seed = stream_rng(self.cfg.seed, DOMAIN_DROPOUT, it as u64).next_u64();
        let mut s = Session::new(&mut self.store, Mode::Train, dropout_seed);
        let xv = s.input(x);
        let heads = self.graph.forward(&mut s, xv)?;
        let loss = self.loss.supervised(&mut s.tape, &heads, &labels)?;
        let value = f64::from(s.tape.value(loss).item()?);
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                what: "training loss".into(),
                iteration: it,
            });
        }
        let grads = s.backward(loss)?;
        drop(s);
        self.adam
            .update(&mut self.store, &grads, self.cfg.lr_at(it), self.cfg.weight_decay, it)?;
        self.iteration += 1;
        self.loss_sum += value;
        self.loss_steps += 1;
        Ok(value)
    }

    /// Main-head predictions and loss on the evaluation split.
    pub fn evaluate(&mut self, data: &Dataset) -> Result<EvalRecord> {
        let mut cm = ConfusionMatrix::new(data.space);
        let mut loss_sum = 0.0;
        for chunk in data.eval.chunks(self.cfg.eval_batch) {
            let centred = chunk
                .iter()
                .map(|s| subtract_mean(s, &self.mean))
                .collect::<ddnet_data::Result<Vec<_>>>()?;
            let (x, labels) = batch(&centred)?;
            let (logits, loss) = self.infer(x, &labels)?;
            loss_sum += loss * chunk.len() as f64;
            for (pred, truth) in predict(&logits).iter().zip(&labels) {
                cm.accumulate(pred, truth)?;
            }
        }
        let report = cm.report();
        let train_loss = (self.loss_steps > 0).then(|| self.loss_sum / self.loss_steps as f64);
        self.loss_sum = 0.0;
        self.loss_steps = 0;
        Ok(EvalRecord {
            iteration: self.iteration,
            lr: self.cfg.lr_at(self.iteration),
            train_loss,
            eval_loss: loss_sum / data.eval.len() as f64,
            mean_iou: report.mean_iou,
            per_class_iou: report.per_class_iou,
            global_accuracy: report.global_accuracy,
        })
    }

    fn infer(&mut self, x: Tensor4<f32>, labels: &[LabelMap]) -> Result<(Tensor4<f32>, f64)> {
        let mut s = Session::new(&mut self.store, Mode::Eval, 0);
        let xv = s.input(x);
        let heads = self.graph.forward(&mut s, xv)?;
        let loss = self.loss.loss(&mut s.tape, heads.main, labels)?;
        Ok((s.tape.value(heads.main).clone(), f64::from(s.tape.value(loss).item()?)))
    }

    /// Writes parameters, batch-norm buffers, optimizer moments and loop
    /// state so that [`resume`](Self::resume) continues bit-exactly.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(TrainError::io(dir))?;
        let write = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, text).map_err(TrainError::io(p))
        };
        write(ARCH_FILE, self.arch.to_text())?;
        checkpoint::save_params(&self.store, &dir.join(PARAMS_FILE))?;
        checkpoint::save_buffers(&self.store, &dir.join(BUFFERS_FILE))?;
        let moments = self.adam.named_state(&self.store);
        let refs: Vec<(&str, &Tensor4<f32>)> = moments.iter().map(|(n, t)| (n.as_str(), t)).collect();
        checkpoint::write(&dir.join(OPTIMIZER_FILE), &refs)?;
        let state = TrainState {
            iteration: self.iteration,
            adam_step: self.adam.step,
            channel_mean: self.mean.clone(),
            config: self.cfg.clone(),
            records: self.records.clone(),
        };
        write(STATE_FILE, serde_json::to_string_pretty(&state).expect("state serialises") + "\n")
    }

    fn report(&self, data: &Dataset, status: RunStatus, checkpoint: Option<String>) -> RunReport {
        RunReport {
            config: self.cfg.clone(),
            arch: self.arch.to_text(),
            param_count: self.graph.param_count(),
            train_images: data.train.len(),
            eval_images: data.eval.len(),
            records: self.records.clone(),
            status,
            checkpoint,
        }
    }

    fn record(&mut self, data: &Dataset, on_record: &mut dyn FnMut(&EvalRecord)) -> Result<()> {
        let r = self.evaluate(data)?;
        on_record(&r);
        self.records.push(r);
        Ok(())
    }

    /// Trains up to `cfg.iterations`, evaluating at the start, every
    /// `eval_interval` iterations and at the end. With `out`, writes
    /// `reports.jsonl`, `summary.json` and the final checkpoint there.
    pub fn run(&mut self, data: &Dataset, out: Option<&Path>, on_record: &mut dyn FnMut(&EvalRecord)) -> Result<RunReport> {
        if self.records.is_empty() {
            self.record(data, on_record)?;
        }
        let mut status = RunStatus::Completed;
        while self.iteration < self.cfg.iterations {
            match self.step(data) {
                Ok(_) => {}
                Err(TrainError::NonFinite { what, iteration }) => {
                    log::error!("stopping: non-finite {what} at iteration {iteration}");
                    status = RunStatus::Diverged {
                        iteration,
                        reason: format!("non-finite {what}"),
                    };
                    break;
                }
                Err(e) => return Err(e),
            }
            let it = self.iteration;
            if it % self.cfg.eval_interval == 0 || it == self.cfg.iterations {
                self.record(data, on_record)?;
                if let (Some(out), Some(every)) = (out, self.cfg.checkpoint_interval) {
                    if it % every == 0 {
                        self.save(&out.join(format!("checkpoint-{it:08}")))?;
                    }
                }
            }
        }
        let mut checkpoint = None;
        if let Some(out) = out {
            fs::create_dir_all(out).map_err(TrainError::io(out))?;
            if status == RunStatus::Completed {
                self.save(&out.join(CHECKPOINT_DIR))?;
                checkpoint = Some(CHECKPOINT_DIR.to_string());
            }
            let report = self.report(data, status.clone(), checkpoint.clone());
            let p = out.join(REPORTS_FILE);
            fs::write(&p, report.to_jsonl()).map_err(TrainError::io(p))?;
            let p = out.join(SUMMARY_FILE);
            fs::write(&p, report.to_json()).map_err(TrainError::io(p))?;
        }
        Ok(self.report(data, status, checkpoint))
    }
}

/// Fresh run of `arch` on `data`.
pub fn train(arch: &ArchSpec, data: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<RunReport> {
    Trainer::new(arch, cfg, data)?.run(data, out, &mut |_| {})
}

/// Metrics of stored parameters on `samples`, which must be raw (not
/// mean-subtracted) images.
pub fn evaluate_checkpoint(dir: &Path, samples: &[Sample], space: LabelSpace, eval_batch: usize) -> Result<ddnet_core::MetricsReport> {
    let arch = checkpoint_arch(dir)?;
    let state = read_state(dir)?;
    let graph = Graph::build(&arch)?;
    let mut store: ParamStore<f32> = graph.init_params(0);
    checkpoint::load_into(&mut store, &dir.join(PARAMS_FILE))?;
    checkpoint::load_into(&mut store, &dir.join(BUFFERS_FILE))?;
    let mut cm = ConfusionMatrix::new(space);
    for chunk in samples.chunks(eval_batch.max(1)) {
        let centred = chunk
            .iter()
            .map(|s| subtract_mean(s, &state.channel_mean))
            .collect::<ddnet_data::Result<Vec<_>>>()?;
        let (x, labels) = batch(&centred)?;
        let mut s = Session::new(&mut store, Mode::Eval, 0);
        let xv = s.input(x);
        let heads = graph.forward(&mut s, xv)?;
        for (pred, truth) in predict(s.tape.value(heads.main)).iter().zip(&labels) {
            cm.accumulate(pred, truth)?;
        }
    }
    Ok(cm.report())
}

/// Architecture stored in a checkpoint directory.
pub fn checkpoint_arch(dir: &Path) -> Result<ArchSpec> {
    let arch_path = dir.join(ARCH_FILE);
    let text = fs::read_to_string(&arch_path).map_err(TrainError::io(&arch_path))?;
    Ok(ArchSpec::parse(&text)?)
}

/// Training config stored in a checkpoint directory.
pub fn checkpoint_config(dir: &Path) -> Result<TrainConfig> {
    Ok(read_state(dir)?.config)
}

fn read_state(dir: &Path) -> Result<TrainState> {
    let state_path = dir.join(STATE_FILE);
    let raw = fs::read_to_string(&state_path).map_err(TrainError::io(&state_path))?;
    serde_json::from_str(&raw).map_err(|e| TrainError::State {
        path: state_path.clone(),
        reason: e.to_string(),
    })
}
