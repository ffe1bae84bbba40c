use std::io::Write;
use std::path::Path;

use crate::diffcore::{Matrix, Tape};
use crate::error::{Error, Result};
use crate::graphcore::PointCloud;
use crate::metrics::{evaluate_pair, MetricSettings, MetricValues, MetricsReport, SampleMetrics};
use crate::nn::{Adam, ParamId};
use crate::rng::Rng;
use crate::synthdata::{split_of, SampleRecord, Split};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::model::{discriminator_loss, total_loss, Model, Target};

/// Comma-separated header of the per-epoch log.
pub const LOG_HEADER: &str = "epoch,train_loss,pose,spectral,adversarial,discriminator,val_mpjpe,val_ged,val_sc,val_tf";

/// A record with its node count and loss targets precomputed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub cloud: PointCloud,
    pub target: Target,
    pub nodes: usize,
}

pub fn prepare(records: &[SampleRecord], cfg: &TrainConfig, model: &Model) -> Result<Vec<Prepared>> {
    records
        .iter()
        .map(|r| {
            let cloud = r.cloud();
            Ok(Prepared {
                id: r.id.clone(),
                nodes: model.node_count(cfg, &cloud)?,
                target: Target::new(r.graph()?)?,
                cloud,
            })
        })
        .collect()
}

pub fn metric_settings(cfg: &TrainConfig) -> MetricSettings {
    MetricSettings {
        edge_threshold: cfg.edge_threshold,
        spectral_k: cfg.metric_k,
        exact_limit: cfg.exact_ged_limit,
    }
}

/// Full pipeline per sample, thresholded adjacency, means over samples.
pub fn evaluate_prepared(model: &Model, cfg: &TrainConfig, samples: &[Prepared]) -> Result<MetricsReport> {
    let settings = metric_settings(cfg);
    let per_sample = samples
        .iter()
        .map(|s| {
            let pred = model.predict(cfg, &s.cloud, s.nodes)?;
            Ok(SampleMetrics {
                id: s.id.clone(),
                values: evaluate_pair(&pred, &s.target.graph, &settings)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::aggregate(per_sample))
}

pub fn evaluate_records(model: &Model, cfg: &TrainConfig, records: &[SampleRecord]) -> Result<MetricsReport> {
    evaluate_prepared(model, cfg, &prepare(records, cfg, model)?)
}

/// One row of the training log. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub pose: f64,
    pub spectral: f64,
    pub adversarial: f64,
    pub discriminator: f64,
    pub val: MetricValues,
}

impl EpochRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.pose,
            self.spectral,
            self.adversarial,
            self.discriminator,
            self.val.mpjpe,
            self.val.ged,
            self.val.sc,
            self.val.tf
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Receives `metrics.csv`, `best.json` and `last.json` when set.
    pub out_dir: Option<std::path::PathBuf>,
    pub resume: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochRow>,
    /// Lowest validation MPJPE seen, epoch 0 included.
    pub best: Checkpoint,
    pub last: Checkpoint,
}

#[derive(Default)]
struct Sums {
    total: f64,
    pose: f64,
    spectral: f64,
    adversarial: f64,
    discriminator: f64,
    count: usize,
}

impl Sums {
    fn row(&self, epoch: usize, val: MetricValues) -> EpochRow {
        let n = self.count.max(1) as f64;
        EpochRow {
            epoch,
            train_loss: self.total / n,
            pose: self.pose / n,
            spectral: self.spectral / n,
            adversarial: self.adversarial / n,
            discriminator: self.discriminator / n,
            val,
        }
    }
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    model: Model,
    gen_ids: Vec<ParamId>,
    disc_ids: Vec<ParamId>,
    gen_opt: Adam,
    disc_opt: Adam,
    out_dir: Option<&'a Path>,
    last_val: f64,
}

fn finite(m: &Matrix) -> bool {
    m.iter().all(|x| x.is_finite())
}

impl Trainer<'_> {
    fn abort(&self, epoch: usize, sample: &str, what: &str) -> Error {
        if let Some(dir) = self.out_dir {
            let ckpt = Checkpoint::capture(self.cfg, &self.model, epoch.saturating_sub(1), self.last_val, &self.gen_opt, &self.disc_opt);
            // The dump is best effort; the numerical error is what gets reported.
            let _ = ckpt.save(dir.join("last_good.json"));
            let _ = std::fs::write(
                dir.join("nan_dump.txt"),
                format!("epoch = {epoch}\nsample = {sample}\nproblem = {what}\n"),
            );
        }
        Error::Numerical(format!("{what} at epoch {epoch} on sample {sample}"))
    }

    /// Loss values of one sample without updating anything.
    fn measure(&self, s: &Prepared, sums: &mut Sums) -> Result<()> {
        let mut tape = Tape::new();
        let p = self.model.store.bind(&mut tape);
        let pred = self.model.forward(&mut tape, &p, self.cfg, &s.cloud, s.nodes)?;
        let terms = total_loss(&mut tape, &p, &pred, &s.target, self.cfg, &self.model)?;
        sums.total += tape.scalar(terms.total);
        sums.pose += tape.scalar(terms.pose);
        sums.spectral += terms.spectral.map_or(0.0, |v| tape.scalar(v));
        sums.adversarial += terms.adversarial.map_or(0.0, |v| tape.scalar(v));
        if self.cfg.adversarial && self.cfg.w_adv > 0.0 {
            let graph = self.model.predict(self.cfg, &s.cloud, s.nodes)?;
            let mut t2 = Tape::new();
            let p2 = self.model.store.bind(&mut t2);
            let d = discriminator_loss(&mut t2, &p2, &graph, &s.target, self.cfg, &self.model)?;
            sums.discriminator += t2.scalar(d);
        }
        sums.count += 1;
        Ok(())
    }

    fn step(&mut self, epoch: usize, batch: &[&Prepared], sums: &mut Sums) -> Result<()> {
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Matrix> = self.gen_ids.iter().map(|&id| Matrix::zeros(self.model.store.get(id).nrows(), self.model.store.get(id).ncols())).collect();
        let mut detached = Vec::new();
        for s in batch {
            let mut tape = Tape::new();
            let p = self.model.store.bind(&mut tape);
            let pred = self.model.forward(&mut tape, &p, self.cfg, &s.cloud, s.nodes)?;
            let terms = total_loss(&mut tape, &p, &pred, &s.target, self.cfg, &self.model)?;
            let value = tape.scalar(terms.total);
            if !value.is_finite() {
                return Err(self.abort(epoch, &s.id, "non-finite loss"));
            }
            sums.total += value;
            sums.pose += tape.scalar(terms.pose);
            sums.spectral += terms.spectral.map_or(0.0, |v| tape.scalar(v));
            sums.adversarial += terms.adversarial.map_or(0.0, |v| tape.scalar(v));
            sums.count += 1;
            let root = tape.scale(terms.total, scale);
            tape.backward(root)?;
            for (acc, g) in grads.iter_mut().zip(p.grads(&tape, &self.gen_ids)) {
                if !finite(&g) {
                    return Err(self.abort(epoch, &s.id, "non-finite gradient"));
                }
                *acc += g;
            }
            if self.cfg.adversarial && self.cfg.w_adv > 0.0 {
                let joints = tape.value(pred.joints).map(|x| x.clamp(0.0, 1.0));
                let adjacency = tape.value(pred.adjacency).clone();
                let features = tape.value(pred.features).clone();
                detached.push((crate::graphcore::SkeletonGraph::new(joints, adjacency, features)?, *s));
            }
        }
        self.gen_opt.update(&mut self.model.store, &self.gen_ids, &grads);
        if detached.is_empty() {
            return Ok(());
        }
        let mut dgrads: Vec<Matrix> = self.disc_ids.iter().map(|&id| Matrix::zeros(self.model.store.get(id).nrows(), self.model.store.get(id).ncols())).collect();
        for (graph, s) in &detached {
            let mut tape = Tape::new();
            let p = self.model.store.bind(&mut tape);
            let d = discriminator_loss(&mut tape, &p, graph, &s.target, self.cfg, &self.model)?;
            let value = tape.scalar(d);
            if !value.is_finite() {
                return Err(self.abort(epoch, &s.id, "non-finite discriminator loss"));
            }
            sums.discriminator += value;
            let root = tape.scale(d, scale);
            tape.backward(root)?;
            for (acc, g) in dgrads.iter_mut().zip(p.grads(&tape, &self.disc_ids)) {
                *acc += g;
            }
        }
        self.disc_opt.update(&mut self.model.store, &self.disc_ids, &dgrads);
        Ok(())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Adaptive-moment training with alternating generator and discriminator
/// steps. Row 0 of the log measures the initial model; every later row
/// follows one pass over the shuffled training split.
pub fn train(cfg: &TrainConfig, records: &[SampleRecord], opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::new(cfg)?;
    let mut gen_opt = Adam::new(cfg.learning_rate);
    let mut disc_opt = Adam::new(cfg.learning_rate);
    let mut start = 0;
    if let Some(ckpt) = &opts.resume {
        let prev = ckpt.train_config()?;
        if prev.resume_hash() != cfg.resume_hash() {
            return Err(Error::Config("checkpoint was trained with a different configuration; refusing to resume".into()));
        }
        model
            .store
            .restore(&ckpt.params)
            .map_err(|e| Error::Data(format!("checkpoint parameters: {e}")))?;
        gen_opt = ckpt.generator_opt.clone();
        disc_opt = ckpt.discriminator_opt.clone();
        start = ckpt.epoch + 1;
        if start > cfg.epochs {
            return Err(Error::Config(format!(
                "checkpoint already covers {} epochs; raise epochs to continue",
                ckpt.epoch
            )));
        }
    }

    let train_set: Vec<SampleRecord> = records.iter().filter(|r| split_of(&r.id) == Split::Train).cloned().collect();
    let val_set: Vec<SampleRecord> = records.iter().filter(|r| split_of(&r.id) == Split::Val).cloned().collect();
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(format!(
            "need non-empty train and val splits, got {} and {}",
            train_set.len(),
            val_set.len()
        )));
    }
    let train_data = prepare(&train_set, cfg, &model)?;
    let val_data = prepare(&val_set, cfg, &model)?;

    let out_dir = opts.out_dir.as_deref();
    let mut log_file = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("metrics.csv");
        let fresh = start == 0 || !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&path)
            .map_err(io_err(&path))?;
        if fresh {
            writeln!(f, "{LOG_HEADER}").map_err(io_err(&path))?;
        }
        log_file = Some((f, path));
    }

    let mut trainer = Trainer {
        cfg,
        gen_ids: model.generator_ids(),
        disc_ids: model.discriminator_ids(),
        model,
        gen_opt,
        disc_opt,
        out_dir,
        last_val: 0.0,
    };
    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = opts.resume.clone();
    for epoch in start..=cfg.epochs {
        let mut sums = Sums::default();
        if epoch == 0 {
            for s in &train_data {
                trainer.measure(s, &mut sums)?;
            }
        } else {
            let mut order: Vec<usize> = (0..train_data.len()).collect();
            Rng::new(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)).shuffle(&mut order);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train_data[i]).collect();
                trainer.step(epoch, &batch, &mut sums)?;
            }
        }
        if !trainer.model.store.all_finite() {
            return Err(trainer.abort(epoch, "-", "non-finite parameters"));
        }
        let report = evaluate_prepared(&trainer.model, cfg, &val_data)?;
        trainer.last_val = report.mpjpe;
        let row = sums.row(
            epoch,
            MetricValues {
                mpjpe: report.mpjpe,
                ged: report.ged,
                sc: report.sc,
                tf: report.tf,
            },
        );
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", row.to_csv()).map_err(io_err(path))?;
            f.flush().map_err(io_err(path))?;
        }
        let ckpt = Checkpoint::capture(cfg, &trainer.model, epoch, report.mpjpe, &trainer.gen_opt, &trainer.disc_opt);
        if best.as_ref().is_none_or(|b| report.mpjpe < b.val_mpjpe) {
            if let Some(dir) = out_dir {
                ckpt.save(dir.join("best.json"))?;
            }
            best = Some(ckpt.clone());
        }
        if let Some(dir) = out_dir {
            ckpt.save(dir.join("last.json"))?;
        }
        log.push(row);
    }
    let last = Checkpoint::capture(cfg, &trainer.model, cfg.epochs, trainer.last_val, &trainer.gen_opt, &trainer.disc_opt);
    Ok(TrainOutcome {
        log,
        best: best.unwrap_or_else(|| last.clone()),
        last,
    })
}
