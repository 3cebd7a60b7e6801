//! End-to-end training loop: forward pass, histogram update, per-sample
//! weighting, weighted loss, backward pass and SGD step, plus evaluation and
//! run-directory outputs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Provenance, VerificationSet};
use crate::error::{Error, Result};
use crate::histogram::{CosHistogram, HistSidecar, StatsParams, DEFAULT_CAPACITY};
use crate::losses::{backprop_to_features, cosines, loss_and_grad, ClassifierHead, LossKind};
use crate::model::{Checkpoint, EmbedModel, EmbedNet, ModelGrads, SgdConfig, SgdState};
use crate::weighting::{sample_weight, WeightMethod, WeightPolicy, WeightRecord};

// Independent random streams derived from the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_PAIRS: u64 = 4;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TrainMode {
    /// Every sample weighted 1.
    Normal,
    /// Samples with non-clean provenance get weight 0 and stay out of the
    /// weighting histogram.
    CleanOracle,
    Paradigm(WeightMethod),
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::Normal,
        TrainMode::CleanOracle,
        TrainMode::Paradigm(WeightMethod::LossScale),
        TrainMode::Paradigm(WeightMethod::LogitScale),
    ];

    pub fn token(self) -> &'static str {
        match self {
            TrainMode::Normal => "normal",
            TrainMode::CleanOracle => "clean-oracle",
            TrainMode::Paradigm(WeightMethod::LossScale) => "paradigm-m1",
            TrainMode::Paradigm(WeightMethod::LogitScale) => "paradigm-m2",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.token() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode {s:?}; expected one of normal, clean-oracle, paradigm-m1, paradigm-m2"
                ))
            })
    }
}

impl TryFrom<String> for TrainMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TrainMode> for String {
    fn from(m: TrainMode) -> String {
        m.token().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub optimizer: SgdConfig,
    pub loss: LossKind,
    pub scale: f64,
    /// Strategy parameters; the weight-application method comes from `mode`.
    pub policy: WeightPolicy,
    pub mode: TrainMode,
    /// Upper bound on the histogram ring; the actual capacity is
    /// `min(hist_capacity, training samples)`.
    pub hist_capacity: usize,
    pub train_fraction: f64,
    /// Pairs in each of the validation and test halves.
    pub verification_pairs: usize,
    pub log_stride: usize,
    /// Iterations between histogram/weight snapshots; 0 disables them.
    pub snapshot_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![512],
            embedding_dim: 32,
            optimizer: SgdConfig::default(),
            loss: LossKind::L2Softmax,
            scale: 32.0,
            policy: WeightPolicy::default(),
            mode: TrainMode::Paradigm(WeightMethod::LogitScale),
            hist_capacity: DEFAULT_CAPACITY,
            train_fraction: 0.8,
            verification_pairs: 2000,
            log_stride: 100,
            snapshot_stride: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.policy.validate()?;
        let bad = |what: String| Err(Error::Config(what));
        if self.embedding_dim == 0 || self.hidden.contains(&0) {
            return bad("model: layer widths must be positive".into());
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad(format!("loss: scale {} must be positive", self.scale));
        }
        if self.hist_capacity == 0 {
            return bad("paradigm: hist_capacity must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        if self.log_stride == 0 || self.verification_pairs == 0 {
            return bad("log_stride and verification_pairs must be positive".into());
        }
        Ok(())
    }

    pub fn dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.embedding_dim);
        dims
    }
}

/// What one optimizer step did.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub iter: usize,
    pub loss: f64,
    pub weights: Vec<f64>,
    /// Present when histogram statistics drove the weights.
    pub record: Option<WeightRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// `(iter, mean batch loss since the previous entry)`.
    pub loss_curve: Vec<(usize, f64)>,
    pub noise_estimates: Vec<(usize, f64)>,
    pub weight_records: Vec<WeightRecord>,
    pub hist_snapshots: Vec<String>,
}

pub struct Trainer<'a> {
    data: &'a Dataset,
    features: Array2<f64>,
    cfg: TrainConfig,
    model: EmbedModel,
    opt: SgdState,
    hist: CosHistogram,
    dropped: Option<CosHistogram>,
    params: StatsParams,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    iter: usize,
    window: (f64, usize),
    pending: Vec<WeightRecord>,
    log: TrainLog,
    out_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        if let Some(s) = data.samples.iter().find(|s| s.label >= data.classes) {
            return Err(Error::InvalidInput(format!("label {} outside {} classes", s.label, data.classes)));
        }
        let seed = cfg.optimizer.seed;
        let mut init = stream_rng(seed, STREAM_INIT);
        let net = EmbedNet::new(&cfg.dims(data.dim), &mut init)?;
        let head = ClassifierHead::random(cfg.embedding_dim, data.classes, cfg.scale, &mut init)?;
        let model = EmbedModel { net, head };
        let opt = SgdState::for_model(&model);
        let capacity = cfg.hist_capacity.min(data.len());
        let hist = CosHistogram::new(capacity)?;
        let dropped = (cfg.mode == TrainMode::CleanOracle).then(|| CosHistogram::new(capacity)).transpose()?;
        let params = StatsParams {
            zeta: cfg.policy.zeta,
            ..StatsParams::default()
        };
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let mut rng = stream_rng(seed, STREAM_BATCH);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        Ok(Trainer {
            data,
            features: data.feature_matrix(),
            cfg: cfg.clone(),
            model,
            opt,
            hist,
            dropped,
            params,
            rng,
            order,
            cursor: 0,
            iter: 0,
            window: (0.0, 0),
            pending: Vec::new(),
            log: TrainLog::default(),
            out_dir: out_dir.map(Path::to_path_buf),
        })
    }

    pub fn model(&self) -> &EmbedModel {
        &self.model
    }

    pub fn optimizer(&self) -> &SgdState {
        &self.opt
    }

    pub fn histogram(&self) -> &CosHistogram {
        &self.hist
    }

    /// Diagnostic histogram of the samples dropped by the clean oracle.
    pub fn dropped_histogram(&self) -> Option<&CosHistogram> {
        self.dropped.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let b = self.cfg.optimizer.batch_size;
        let mut idx = Vec::with_capacity(b);
        while idx.len() < b {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (b - idx.len()).min(self.order.len() - self.cursor);
            idx.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        idx
    }

    fn diverged(&self, reason: String) -> Error {
        if let Some(dir) = &self.out_dir {
            // best effort: the divergence itself is the error worth reporting
            let _ = self.hist.export(dir, "hist_diverged", &self.params);
            let _ = Checkpoint::new(self.model.clone(), self.opt.clone(), self.iter).save(&dir.join("checkpoint_diverged.json"));
        }
        Error::Divergence { iter: self.iter, reason }
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let idx = self.next_batch();
        let batch = self.features.select(Axis(0), &idx);
        let labels: Vec<usize> = idx.iter().map(|&i| self.data.samples[i].label).collect();
        let (emb, cache) = self.model.net.forward(batch.view()).map_err(|e| self.diverged(e.to_string()))?;
        let rec = cosines(emb.view(), &self.model.head, &labels).map_err(|e| self.diverged(e.to_string()))?;

        for (&i, &c) in idx.iter().zip(&rec.target_cos) {
            match &mut self.dropped {
                Some(d) if !self.data.samples[i].provenance.is_clean() => d.push(c)?,
                _ => self.hist.push(c)?,
            }
        }

        let n = idx.len();
        let mut record = None;
        let (weights, method) = match self.cfg.mode {
            TrainMode::Normal => (vec![1.0; n], WeightMethod::LossScale),
            TrainMode::CleanOracle => (
                idx.iter()
                    .map(|&i| f64::from(u8::from(self.data.samples[i].provenance.is_clean())))
                    .collect(),
                WeightMethod::LossScale,
            ),
            TrainMode::Paradigm(method) => {
                if self.hist.is_ready() {
                    let st = self.hist.stats_with(&self.params)?;
                    let w: Vec<f64> = rec.target_cos.iter().map(|&c| sample_weight(c, &st, &self.cfg.policy)).collect();
                    record = Some(WeightRecord::summarize(self.iter + 1, st.delta_r.clamp(0.0, 1.0), &w));
                    (w, method)
                } else {
                    (vec![1.0; n], method)
                }
            }
        };

        let lg = loss_and_grad(&rec, self.cfg.loss, self.model.head.scale, &weights, method)
            .map_err(|e| self.diverged(e.to_string()))?;
        let (grad_features, grad_anchors) = backprop_to_features(&rec, &lg.grad_cos, &self.model.head);
        let layers = self.model.net.backward(&cache, &grad_features);
        let grads = ModelGrads {
            layers,
            anchors: grad_anchors,
        };
        self.model.sgd_step(&grads, &mut self.opt, &self.cfg.optimizer, self.iter);
        self.iter += 1;

        self.window.0 += lg.loss;
        self.window.1 += 1;
        if self.iter.is_multiple_of(self.cfg.log_stride) {
            self.log.loss_curve.push((self.iter, self.window.0 / self.window.1 as f64));
            self.window = (0.0, 0);
            if let Some(est) = self.current_estimate() {
                self.log.noise_estimates.push((self.iter, est));
            }
            if let Some(r) = &record {
                self.log.weight_records.push(r.clone());
                self.pending.push(r.clone());
            }
        }
        if self.cfg.snapshot_stride > 0 && self.iter.is_multiple_of(self.cfg.snapshot_stride) {
            self.snapshot()?;
        }
        Ok(StepReport {
            iter: self.iter,
            loss: lg.loss,
            weights,
            record,
        })
    }

    /// Noise-rate estimate from the current weighting histogram.
    pub fn current_estimate(&self) -> Option<f64> {
        let st = self.hist.stats_with(&self.params).ok()?;
        self.hist.estimate_noise_rate(&st).ok()
    }

    fn snapshot(&mut self) -> Result<()> {
        let Some(dir) = self.out_dir.clone() else {
            return Ok(());
        };
        let stem = format!("hist_{}", self.iter);
        self.hist.export(&dir, &stem, &self.params)?;
        self.log.hist_snapshots.push(format!("{stem}.csv"));
        if let Some(d) = &self.dropped {
            d.export(&dir, &format!("hist_dropped_{}", self.iter), &self.params)?;
        }
        let path = dir.join(format!("weights_{}.jsonl", self.iter));
        let mut lines = String::new();
        for r in self.pending.drain(..) {
            lines.push_str(&serde_json::to_string(&r)?);
            lines.push('\n');
        }
        fs::write(&path, lines).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Runs the remaining iterations of the schedule.
    pub fn run(&mut self) -> Result<()> {
        while self.iter < self.cfg.optimizer.total_iters {
            self.step()?;
        }
        if self.window.1 > 0 {
            self.log.loss_curve.push((self.iter, self.window.0 / self.window.1 as f64));
            self.window = (0.0, 0);
        }
        Ok(())
    }

    /// Target-class cosines of every training sample under the current model.
    pub fn training_cosines(&self) -> Result<Vec<f64>> {
        target_cosines(&self.model, self.data)
    }
}

pub fn target_cosines(model: &EmbedModel, data: &Dataset) -> Result<Vec<f64>> {
    let emb = model.net.embed(data.feature_matrix().view())?;
    Ok(cosines(emb.view(), &model.head, &data.labels())?.target_cos)
}

/// Probability that a random clean value exceeds a random noisy one, ties
/// counted as one half.
pub fn separation_auc(clean: &[f64], noisy: &[f64]) -> Result<f64> {
    if clean.is_empty() || noisy.is_empty() {
        return Err(Error::DegenerateInput("AUC needs both clean and noisy values".into()));
    }
    let mut all: Vec<(f64, bool)> = clean
        .iter()
        .map(|&v| (v, true))
        .chain(noisy.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut clean_rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j share their mean
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        clean_rank_sum += mean_rank * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (n1, n2) = (clean.len() as f64, noisy.len() as f64);
    Ok((clean_rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n2))
}

/// Threshold maximizing accuracy of `same iff sim >= t`, and that accuracy.
/// Ties go to the lowest threshold.
pub fn best_threshold(scored: &[(f64, bool)]) -> (f64, f64) {
    if scored.is_empty() {
        return (0.0, 0.0);
    }
    let mut s = scored.to_vec();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = s.len();
    let total_same = s.iter().filter(|x| x.1).count();
    // k = number of pairs predicted different
    let (mut diff_below, mut same_below) = (0usize, 0usize);
    let mut best = (s[0].0 - 1.0, total_same as f64 / n as f64);
    for k in 1..=n {
        if s[k - 1].1 {
            same_below += 1;
        } else {
            diff_below += 1;
        }
        if k < n && s[k].0 == s[k - 1].0 {
            continue;
        }
        let acc = (diff_below + total_same - same_below) as f64 / n as f64;
        if acc > best.1 {
            let t = if k < n { 0.5 * (s[k - 1].0 + s[k].0) } else { s[n - 1].0 + 1.0 };
            best = (t, acc);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub accuracy: f64,
    pub threshold: f64,
    pub validation_accuracy: f64,
}

/// Cosine-similarity verification: the threshold is fit on the validation
/// pairs and scored on the test pairs.
pub fn evaluate_verification(net: &EmbedNet, set: &VerificationSet) -> Result<Verification> {
    if set.validation.is_empty() || set.test.is_empty() {
        return Err(Error::InvalidInput("verification needs validation and test pairs".into()));
    }
    let mut emb = net.embed(set.features.view())?;
    for mut row in emb.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let score = |pairs: &[crate::data::Pair]| -> Vec<(f64, bool)> {
        pairs.iter().map(|p| (emb.row(p.a).dot(&emb.row(p.b)), p.same)).collect()
    };
    let (threshold, validation_accuracy) = best_threshold(&score(&set.validation));
    let test = score(&set.test);
    let correct = test.iter().filter(|(s, same)| (*s >= threshold) == *same).count();
    Ok(Verification {
        accuracy: correct as f64 / test.len() as f64,
        threshold,
        validation_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: TrainMode,
    pub seed: u64,
    pub iterations: usize,
    pub train_samples: usize,
    /// Non-clean share of the training split, from provenance.
    pub train_noise_fraction: f64,
    pub verification_accuracy: f64,
    pub verification_threshold: f64,
    pub clean_noisy_auc: Option<f64>,
    pub final_noise_estimate: Option<f64>,
    pub final_hist: HistSidecar,
    pub noise_estimates: Vec<(usize, f64)>,
    pub hist_snapshots: Vec<String>,
    pub loss_curve: Vec<(usize, f64)>,
}

pub struct RunOutput {
    pub summary: RunSummary,
    pub checkpoint: Checkpoint,
    pub histogram: CosHistogram,
    pub log: TrainLog,
}

/// The `(train, held-out)` split a run with `cfg` uses.
pub fn split_dataset(dataset: &Dataset, cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    dataset.stratified_split(cfg.train_fraction, &mut stream_rng(cfg.optimizer.seed, STREAM_SPLIT))
}

/// Splits `dataset`, trains on the training part, evaluates, and writes the
/// run directory when `out_dir` is given.
pub fn run_experiment(dataset: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let seed = cfg.optimizer.seed;
    let (train, held) = split_dataset(dataset, cfg)?;
    let pairs = VerificationSet::build(&held, cfg.verification_pairs, &mut stream_rng(seed, STREAM_PAIRS))?;

    let mut trainer = Trainer::new(&train, cfg, out_dir)?;
    trainer.run()?;

    let verification = evaluate_verification(&trainer.model().net, &pairs)?;
    let cos = trainer.training_cosines()?;
    let (mut clean, mut noisy) = (Vec::new(), Vec::new());
    for (c, s) in cos.iter().zip(&train.samples) {
        if s.provenance == Provenance::Clean { clean.push(*c) } else { noisy.push(*c) }
    }
    let params = StatsParams {
        zeta: cfg.policy.zeta,
        ..StatsParams::default()
    };
    let hist = trainer.histogram().clone();
    let stats = hist.stats_with(&params).ok();
    let final_noise_estimate = stats.as_ref().and_then(|st| hist.estimate_noise_rate(st).ok());
    let final_hist = HistSidecar {
        delta_l: stats.as_ref().map(|s| s.delta_l),
        delta_r: stats.as_ref().map(|s| s.delta_r),
        mu_l: stats.as_ref().and_then(|s| s.mu_l),
        mu_r: stats.as_ref().and_then(|s| s.mu_r),
        count: hist.count(),
        noise_rate_estimate: final_noise_estimate,
    };
    let log = trainer.log().clone();
    let summary = RunSummary {
        mode: cfg.mode,
        seed,
        iterations: trainer.iteration(),
        train_samples: train.len(),
        train_noise_fraction: noisy.len() as f64 / train.len() as f64,
        verification_accuracy: verification.accuracy,
        verification_threshold: verification.threshold,
        clean_noisy_auc: separation_auc(&clean, &noisy).ok(),
        final_noise_estimate,
        final_hist,
        noise_estimates: log.noise_estimates.clone(),
        hist_snapshots: log.hist_snapshots.clone(),
        loss_curve: log.loss_curve.clone(),
    };
    let checkpoint = Checkpoint::new(trainer.model().clone(), trainer.optimizer().clone(), trainer.iteration());

    if let Some(dir) = out_dir {
        write_run_dir(dir, &summary, &checkpoint, &hist, &params)?;
    }
    Ok(RunOutput {
        summary,
        checkpoint,
        histogram: hist,
        log,
    })
}

fn write_run_dir(
    dir: &Path,
    summary: &RunSummary,
    checkpoint: &Checkpoint,
    hist: &CosHistogram,
    params: &StatsParams,
) -> Result<()> {
    let write = |name: &str, body: String| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    };
    write("summary.json", serde_json::to_string_pretty(summary)?)?;
    let mut loss = String::from("iter,loss\n");
    for (i, l) in &summary.loss_curve {
        loss.push_str(&format!("{i},{l}\n"));
    }
    write("loss.csv", loss)?;
    checkpoint.save(&dir.join("checkpoint.json"))?;
    hist.export(dir, "hist_final", params)?;
    Ok(())
}
