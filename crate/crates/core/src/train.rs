//! Training loops: group-robust cross-entropy, vanilla distillation,
//! group-robust distillation, and a plain ERM control.
//!
//! The two group-robust methods share one loop. At every step a domain is
//! drawn uniformly, a batch is sampled from it with replacement, the batch
//! loss moves that domain's weight by an exponentiated-gradient step, and
//! the parameters then take an optimizer step with the gradient scaled by
//! the domain's freshly updated weight. The distillation variant differs
//! only in its loss. The pooled methods sample domain-blind batches and
//! never touch group weights.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, DomainId, LabeledBatch, STREAM_TRAINING};
use crate::error::{config_err, Error, Result};
use crate::losses::{ce_loss, kd_loss, softmax_tau, KdConfig, ProbBatch};
use crate::mlp::MlpParams;
use crate::optim::{OptConfig, Optimizer};
use crate::robust_weights::{EgConfig, GroupWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GroupDro,
    Kd,
    GroupDistil,
    /// Pooled cross-entropy; the non-robust control.
    Erm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::GroupDro => "group_dro",
            Method::Kd => "kd",
            Method::GroupDistil => "group_distil",
            Method::Erm => "erm",
        }
    }

    pub fn needs_teacher(self) -> bool {
        matches!(self, Method::Kd | Method::GroupDistil)
    }

    fn samples_domains(self) -> bool {
        matches!(self, Method::GroupDro | Method::GroupDistil)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "group_dro" => Ok(Method::GroupDro),
            "kd" => Ok(Method::Kd),
            "group_distil" => Ok(Method::GroupDistil),
            "erm" => Ok(Method::Erm),
            other => Err(config_err!("unknown method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub kd: KdConfig,
    #[serde(default)]
    pub eg: EgConfig,
    #[serde(default)]
    pub opt: OptConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_log_every() -> usize {
    1
}

impl TrainConfig {
    /// Batch 128, α = 0.9, τ = 4, η_w = 0.01, Adam.
    pub fn new(method: Method, steps: usize) -> Self {
        Self {
            method,
            steps,
            batch_size: 128,
            kd: KdConfig::default(),
            eg: EgConfig::default(),
            opt: OptConfig::default(),
            seed: 0,
            log_every: default_log_every(),
        }
    }

    /// Steps in `epochs` passes, one pass being `ceil(n_train / batch_size)` steps.
    pub fn steps_for_epochs(epochs: usize, n_train: usize, batch_size: usize) -> usize {
        epochs * n_train.div_ceil(batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config_err!("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if self.log_every == 0 {
            return Err(config_err!("log_every must be positive"));
        }
        self.kd.validate()?;
        self.eg.validate()?;
        self.opt.validate()
    }
}

/// Source of softened class distributions for distillation.
pub trait Teacher: Sync {
    fn soft_targets(&self, batch: &LabeledBatch, tau: f64) -> Result<ProbBatch>;

    /// Number of classes produced, when fixed.
    fn num_classes(&self) -> Option<usize>;

    fn checksum(&self) -> u64;
}

impl Teacher for MlpParams {
    fn soft_targets(&self, batch: &LabeledBatch, tau: f64) -> Result<ProbBatch> {
        softmax_tau(&self.predict(&batch.features)?, tau)
    }

    fn num_classes(&self) -> Option<usize> {
        Some(self.output_dim())
    }

    fn checksum(&self) -> u64 {
        MlpParams::checksum(self)
    }
}

/// Emits the exact one-hot distribution of the true label at any temperature.
#[derive(Debug, Clone, Copy)]
pub struct OneHotTeacher {
    pub num_classes: usize,
}

impl Teacher for OneHotTeacher {
    fn soft_targets(&self, batch: &LabeledBatch, _tau: f64) -> Result<ProbBatch> {
        ProbBatch::one_hot(&batch.labels, self.num_classes)
    }

    fn num_classes(&self) -> Option<usize> {
        Some(self.num_classes)
    }

    fn checksum(&self) -> u64 {
        self.num_classes as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    /// Sampled domain; absent for pooled methods.
    pub domain: Option<DomainId>,
    pub loss: f64,
    /// Group weights after this step's update; absent for pooled methods.
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_group_accuracy: Vec<f64>,
    pub worst_group_accuracy: f64,
    pub average_accuracy: f64,
    pub adjusted_average_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub num_domains: usize,
    pub rows: Vec<LogRow>,
    pub final_weights: Option<Vec<f64>>,
    pub metrics: Option<Metrics>,
}

impl RunRecord {
    /// `step,domain,loss,w_0..w_{D-1}`; pooled methods leave domain and weights empty.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("step,domain,loss");
        for d in 0..self.num_domains {
            out.push_str(&format!(",w_{d}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.step.to_string());
            out.push(',');
            if let Some(d) = row.domain {
                out.push_str(&d.to_string());
            }
            out.push_str(&format!(",{:.16e}", row.loss));
            match &row.weights {
                Some(w) => w.iter().for_each(|v| out.push_str(&format!(",{v:.16e}"))),
                None => (0..self.num_domains).for_each(|_| out.push(',')),
            }
            out.push('\n');
        }
        out
    }
}

/// What one call to [`TrainSession::step`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub step: usize,
    pub domain: Option<DomainId>,
    pub loss: f64,
    pub scale: f64,
}

/// State of a single training run, advanced one step at a time.
pub struct TrainSession<'a> {
    cfg: TrainConfig,
    train: &'a Dataset,
    teacher: Option<&'a dyn Teacher>,
    teacher_checksum: u64,
    params: MlpParams,
    opt: Optimizer,
    weights: GroupWeights,
    rng: ChaCha8Rng,
    step: usize,
    rows: Vec<LogRow>,
}

impl<'a> TrainSession<'a> {
    pub fn new(
        init: MlpParams,
        teacher: Option<&'a dyn Teacher>,
        train: &'a Dataset,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if init.input_dim() != train.feature_dim() {
            return Err(config_err!(
                "model expects {} features, data has {}",
                init.input_dim(),
                train.feature_dim()
            ));
        }
        if init.output_dim() != train.num_classes() {
            return Err(config_err!(
                "model emits {} logits, data has {} classes",
                init.output_dim(),
                train.num_classes()
            ));
        }
        match (cfg.method.needs_teacher(), teacher) {
            (true, None) => return Err(config_err!("method {} needs a teacher", cfg.method)),
            (false, Some(_)) => return Err(config_err!("method {} does not take a teacher", cfg.method)),
            _ => {}
        }
        if let Some(c) = teacher.and_then(|t| t.num_classes()) {
            if c != init.output_dim() {
                return Err(config_err!("teacher emits {c} classes, student {}", init.output_dim()));
            }
        }
        if cfg.method.samples_domains() {
            if let Some(d) = (0..train.num_domains()).find(|&d| train.domain_indices(d).is_empty()) {
                return Err(Error::Data(format!("training domain {d} has no samples")));
            }
        }
        Ok(Self {
            teacher_checksum: teacher.map_or(0, |t| t.checksum()),
            opt: Optimizer::new(cfg.opt, &init)?,
            weights: GroupWeights::uniform(train.num_domains())?,
            rng: data::seeded_rng(cfg.seed, STREAM_TRAINING),
            params: init,
            teacher,
            train,
            cfg,
            step: 0,
            rows: Vec::new(),
        })
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn weights(&self) -> &GroupWeights {
        &self.weights
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let t = self.step + 1;
        self.advance(t).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {t}: {m}")),
            other => other,
        })
    }

    fn advance(&mut self, t: usize) -> Result<StepOutcome> {
        let method = self.cfg.method;
        let (domain, batch) = if method.samples_domains() {
            let d = data::draw_domain(&mut self.rng, self.train.num_domains());
            (Some(d), data::sample_domain_batch(self.train, d, self.cfg.batch_size, &mut self.rng)?)
        } else {
            (None, data::sample_pooled_batch(self.train, self.cfg.batch_size, &mut self.rng)?)
        };
        let labels = ProbBatch::one_hot(&batch.labels, self.train.num_classes())?;
        let (logits, cache) = self.params.forward(&batch.features)?;
        let (loss, d_logits) = match self.teacher {
            Some(teacher) => {
                let soft = teacher.soft_targets(&batch, self.cfg.kd.tau)?;
                kd_loss(&labels, &logits, &soft, &self.cfg.kd)?
            }
            None => ce_loss(&labels, &logits)?,
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss}")));
        }
        let scale = match domain {
            Some(d) => {
                self.weights = self.weights.eg_update(d, loss, &self.cfg.eg)?;
                self.weights.get(d)
            }
            None => 1.0,
        };
        let grads = self.params.backward(&cache, &d_logits)?;
        self.params = self.opt.step(&self.params, &grads, scale)?;
        self.step = t;
        if t % self.cfg.log_every == 0 {
            self.rows.push(LogRow {
                step: t,
                domain,
                loss,
                weights: domain.map(|_| self.weights.snapshot()),
            });
        }
        Ok(StepOutcome { step: t, domain, loss, scale })
    }

    /// Runs the remaining steps and returns the final parameters and log.
    pub fn run(mut self) -> Result<(MlpParams, RunRecord)> {
        while !self.is_done() {
            self.step()?;
        }
        self.finish()
    }

    pub fn finish(self) -> Result<(MlpParams, RunRecord)> {
        if let Some(teacher) = self.teacher {
            if teacher.checksum() != self.teacher_checksum {
                return Err(Error::Contract("teacher parameters changed during distillation".into()));
            }
        }
        let final_weights = self.cfg.method.samples_domains().then(|| self.weights.snapshot());
        let record = RunRecord {
            num_domains: self.train.num_domains(),
            config: self.cfg,
            rows: self.rows,
            final_weights,
            metrics: None,
        };
        Ok((self.params, record))
    }
}

fn check_method(cfg: &TrainConfig, expected: Method) -> Result<()> {
    if cfg.method == expected {
        Ok(())
    } else {
        Err(config_err!("config method is {}, expected {expected}", cfg.method))
    }
}

/// Group-robust cross-entropy training.
pub fn train_group_dro(init: MlpParams, train: &Dataset, cfg: &TrainConfig) -> Result<(MlpParams, RunRecord)> {
    check_method(cfg, Method::GroupDro)?;
    TrainSession::new(init, None, train, cfg.clone())?.run()
}

/// Vanilla distillation on pooled batches.
pub fn train_kd(
    init: MlpParams,
    teacher: &dyn Teacher,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<(MlpParams, RunRecord)> {
    check_method(cfg, Method::Kd)?;
    TrainSession::new(init, Some(teacher), train, cfg.clone())?.run()
}

/// Group-robust distillation.
pub fn train_group_distil(
    init: MlpParams,
    teacher: &dyn Teacher,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<(MlpParams, RunRecord)> {
    check_method(cfg, Method::GroupDistil)?;
    TrainSession::new(init, Some(teacher), train, cfg.clone())?.run()
}

/// Plain pooled cross-entropy.
pub fn train_erm(init: MlpParams, train: &Dataset, cfg: &TrainConfig) -> Result<(MlpParams, RunRecord)> {
    check_method(cfg, Method::Erm)?;
    TrainSession::new(init, None, train, cfg.clone())?.run()
}

/// Per-group, worst-group, pooled and proportion-weighted accuracy.
pub fn evaluate(model: &MlpParams, test: &Dataset, train_group_proportions: &[f64]) -> Result<Metrics> {
    let num_domains = test.num_domains();
    if train_group_proportions.len() != num_domains {
        return Err(Error::Metric(format!(
            "{} group proportions for {num_domains} test groups",
            train_group_proportions.len()
        )));
    }
    let predictions = model.predict(test.features())?.argmax_rows();
    let mut correct = Vec::with_capacity(num_domains);
    let mut totals = Vec::with_capacity(num_domains);
    for d in 0..num_domains {
        let idx = test.domain_indices(d);
        correct.push(idx.iter().filter(|&&i| predictions[i] == test.labels()[i]).count());
        totals.push(idx.len());
    }
    Metrics::from_counts(&correct, &totals, train_group_proportions)
}

impl Metrics {
    /// Metrics from per-group correct counts and group sizes.
    pub fn from_counts(correct: &[usize], totals: &[usize], train_group_proportions: &[f64]) -> Result<Self> {
        if correct.len() != totals.len() || totals.len() != train_group_proportions.len() {
            return Err(Error::Metric(format!(
                "{} correct counts, {} group sizes, {} proportions",
                correct.len(),
                totals.len(),
                train_group_proportions.len()
            )));
        }
        let mut per_group_accuracy = Vec::with_capacity(totals.len());
        for (d, (&c, &n)) in correct.iter().zip(totals).enumerate() {
            if n == 0 {
                return Err(Error::Metric(format!("test group {d} is empty")));
            }
            if c > n {
                return Err(Error::Metric(format!("group {d}: {c} correct out of {n}")));
            }
            per_group_accuracy.push(c as f64 / n as f64);
        }
        let worst_group_accuracy = per_group_accuracy.iter().copied().fold(f64::INFINITY, f64::min);
        let adjusted_average_accuracy = per_group_accuracy.iter().zip(train_group_proportions).map(|(a, p)| a * p).sum();
        let average_accuracy = correct.iter().sum::<usize>() as f64 / totals.iter().sum::<usize>() as f64;
        Ok(Self { per_group_accuracy, worst_group_accuracy, average_accuracy, adjusted_average_accuracy })
    }
}
