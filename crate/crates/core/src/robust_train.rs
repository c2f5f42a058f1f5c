//! Training loop for adversarial training (AT), TRADES and plain ERM, with
//! SGD, a learning-rate schedule, weight EMA, extra-data mixing and early
//! stopping on a PGD evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{clean_accuracy, pgd, robust_accuracy, AttackConfig, AttackLoss};
use crate::cost_meter::{
    energy_from_samples, train_flops, EnergyParams, FlopQuery, FlopReport, PowerMeter, PowerSource,
};
use crate::dataset::{Augment, Dataset};
use crate::error::{Error, Result};
use crate::models::{ArchSpec, ForwardPass, Model, Param};
use crate::tensor::{BnMode, BnStats, FlopTally, Gradients, Tape, Tensor, Var, SOFTMAX_FLOOR};

/// Version of the [`RunRecord`] schema.
pub const RECORD_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy on clean inputs.
    Standard,
    /// Cross-entropy on PGD examples.
    #[default]
    At,
    /// Clean cross-entropy plus `β·KL(f(x) ‖ f(x + δ))`.
    Trades,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Constant, ×0.1 at 50% and again at 75% of the epochs.
    #[default]
    Piecewise,
    /// Linear warm-up to the peak over the first 40% of steps, then linear
    /// decay to zero.
    Cyclic,
}

/// Power source and conversion constants for the energy estimate.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostSettings {
    pub power: PowerSource,
    pub energy: EnergyParams,
}

/// One experiment's recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    pub loss: LossKind,
    /// TRADES weight; ignored by the other losses.
    pub beta: f64,
    /// Training-time attack. Its objective follows `loss`.
    pub attack: AttackConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub ema: bool,
    pub ema_decay: f64,
    pub extra_data: bool,
    /// Share of each batch drawn from the extra pool.
    pub extra_ratio: f64,
    pub augment: Augment,
    /// Attack used for early stopping after every epoch.
    pub eval_attack: AttackConfig,
    /// Test examples used for early stopping (0 = all).
    pub eval_subset: usize,
    /// Stronger attack for the final robust accuracy.
    pub final_attack: AttackConfig,
    /// Test examples used for the final attack (0 = all).
    pub final_subset: usize,
    pub cost: CostSettings,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchSpec::mlp(2, 32, [1, 8, 8], 2),
            loss: LossKind::At,
            beta: 6.0,
            attack: AttackConfig::default(),
            epochs: 10,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Piecewise,
            ema: false,
            ema_decay: 0.995,
            extra_data: false,
            extra_ratio: 0.3,
            augment: Augment::default(),
            eval_attack: AttackConfig { steps: 40, ..AttackConfig::default() },
            eval_subset: 512,
            final_attack: AttackConfig { steps: 20, restarts: 3, ..AttackConfig::default() },
            final_subset: 0,
            cost: CostSettings::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Copy with fields that cannot affect the run reset to their defaults,
    /// so equivalent recipes share a run id.
    pub fn canonical(&self) -> TrainConfig {
        let d = TrainConfig::default();
        let mut c = self.clone();
        if c.loss != LossKind::Trades {
            c.beta = d.beta;
        }
        match c.loss {
            LossKind::Standard => c.attack = d.attack.clone(),
            LossKind::At => c.attack.loss_kind = AttackLoss::CrossEntropy,
            LossKind::Trades => c.attack.loss_kind = AttackLoss::KlVsClean,
        }
        c.attack.restarts = 1;
        if !c.ema {
            c.ema_decay = d.ema_decay;
        }
        if !c.extra_data {
            c.extra_ratio = d.extra_ratio;
        }
        c
    }

    /// The canonical config without cost settings, which only change how
    /// energy is measured. Two configs describe the same run iff their
    /// identities are equal.
    pub fn identity(&self) -> TrainConfig {
        TrainConfig { cost: CostSettings::default(), ..self.canonical() }
    }

    /// First 16 hex digits of the SHA-256 of the identity as JSON.
    pub fn run_id(&self) -> String {
        let json = serde_json::to_vec(&self.identity()).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.eval_attack.validate()?;
        self.final_attack.validate()?;
        if self.loss != LossKind::Standard {
            self.attack.validate()?;
        }
        let bad = |m: String| Err(Error::config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight_decay nonnegative".into());
        }
        if self.loss == LossKind::Trades && !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("TRADES needs beta > 0, got {}", self.beta));
        }
        if self.ema && !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay {} outside (0, 1)", self.ema_decay));
        }
        if self.extra_data {
            BatchPlan::new(1, self.batch_size, self.extra_ratio)?;
        }
        Ok(())
    }

    fn effective_extra_ratio(&self) -> f64 {
        if self.extra_data {
            self.extra_ratio
        } else {
            0.0
        }
    }

    /// Attack steps that count towards cost (0 for standard training).
    pub fn attack_steps(&self) -> usize {
        if self.loss == LossKind::Standard {
            0
        } else {
            self.attack.steps
        }
    }

    pub fn flop_query(&self, dataset_size: usize) -> FlopQuery {
        FlopQuery {
            arch: self.arch.clone(),
            loss: self.loss,
            steps: self.attack_steps(),
            dataset_size,
            batch_size: self.batch_size,
            extra_ratio: self.effective_extra_ratio(),
            epochs: self.epochs,
            ema: self.ema,
        }
    }

    /// Learning rate for step `step` of epoch `epoch`.
    pub fn lr_at(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Piecewise => {
                let frac = epoch as f64 / self.epochs as f64;
                let mut lr = self.lr;
                if frac >= 0.5 {
                    lr *= 0.1;
                }
                if frac >= 0.75 {
                    lr *= 0.1;
                }
                lr
            }
            Schedule::Cyclic => {
                let total = (self.epochs * steps_per_epoch) as f64;
                let t = (epoch * steps_per_epoch + step) as f64 / total;
                if t < 0.4 {
                    self.lr * t / 0.4
                } else {
                    self.lr * (1.0 - t) / 0.6
                }
            }
        }
    }
}

/// Deterministic interleaving of base and extra examples. Every batch takes
/// `extra_per_batch = round(ratio·batch_size)` extra examples and up to
/// `base_per_batch = batch_size − extra_per_batch` base examples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub dataset_size: usize,
    pub base_per_batch: usize,
    pub extra_per_batch: usize,
    pub batches: usize,
}

impl BatchPlan {
    pub fn new(dataset_size: usize, batch_size: usize, extra_ratio: f64) -> Result<BatchPlan> {
        if dataset_size == 0 || batch_size == 0 {
            return Err(Error::config("dataset and batch size must be positive"));
        }
        if !(0.0..1.0).contains(&extra_ratio) {
            return Err(Error::config(format!("extra_ratio {extra_ratio} outside [0, 1)")));
        }
        let extra = (extra_ratio * batch_size as f64).round() as usize;
        if extra >= batch_size {
            return Err(Error::config(format!("extra_ratio {extra_ratio} leaves no base examples per batch")));
        }
        let base = batch_size - extra;
        Ok(BatchPlan {
            dataset_size,
            base_per_batch: base,
            extra_per_batch: extra,
            batches: dataset_size.div_ceil(base),
        })
    }

    /// Examples seen per epoch: the whole base set plus the extra share.
    pub fn examples_per_epoch(&self) -> usize {
        self.dataset_size + self.batches * self.extra_per_batch
    }
}

/// Loss value, parameter gradients and train-mode BN statistics of one step.
#[derive(Clone, Debug)]
pub struct StepLoss {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    /// Batch statistics for every train-mode pass, in order.
    pub bn_batch: Vec<Vec<BnStats>>,
    /// Forward and backward FLOPs, attack included.
    pub flops: FlopTally,
}

fn collect_grads(model: &Model, grads: &mut Gradients, params: &[Var]) -> Vec<Tensor> {
    params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect()
}

fn finish(
    model: &Model,
    tape: &Tape,
    loss: Var,
    params: &[Var],
    bn_batch: Vec<Vec<BnStats>>,
    mut flops: FlopTally,
) -> Result<StepLoss> {
    let mut grads = tape.backward(loss)?;
    flops += tape.forward_flops() + grads.flops();
    Ok(StepLoss { loss: tape.value(loss).item()?, grads: collect_grads(model, &mut grads, params), bn_batch, flops })
}

/// Mean cross-entropy on clean inputs, BN in train mode.
pub fn standard_loss(model: &Model, x: &Tensor, y: &[usize]) -> Result<StepLoss> {
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), false);
    let pass = model.forward(&mut tape, input, BnMode::Train, true)?;
    let loss = tape.cross_entropy(pass.logits, y)?;
    finish(model, &tape, loss, &pass.params, vec![pass.bn_batch], FlopTally::default())
}

/// Mean cross-entropy at `x + δ` where `δ` comes from a cross-entropy PGD
/// run with frozen BN; the loss forward uses train-mode BN.
pub fn at_loss(model: &Model, x: &Tensor, y: &[usize], attack: &AttackConfig, seed: u64) -> Result<StepLoss> {
    let cfg = AttackConfig { loss_kind: AttackLoss::CrossEntropy, ..attack.clone() };
    let adv = pgd(model, x, y, &cfg, None, seed)?;
    let x_adv = x.zip_map(&adv.delta, |a, d| a + d)?;
    let mut step = at_objective(model, &x_adv, y)?;
    step.flops += adv.flops;
    Ok(step)
}

/// The outer AT objective at a fixed adversarial batch.
pub fn at_objective(model: &Model, x_adv: &Tensor, y: &[usize]) -> Result<StepLoss> {
    let mut tape = Tape::new();
    let input = tape.leaf(x_adv.clone(), false);
    let pass = model.forward(&mut tape, input, BnMode::Train, true)?;
    let loss = tape.cross_entropy(pass.logits, y)?;
    finish(model, &tape, loss, &pass.params, vec![pass.bn_batch], FlopTally::default())
}

/// `CE(f(x), y) + β·KL(p(x) ‖ p(x + δ))` with `δ` maximizing the KL term.
///
/// The attack treats the clean prediction as a constant target. The final
/// loss differentiates through both forward passes, which share parameter
/// leaves; both run with train-mode BN.
pub fn trades_loss(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    beta: f64,
    attack: &AttackConfig,
    seed: u64,
) -> Result<StepLoss> {
    check_beta(beta)?;
    let mut tape = Tape::new();
    let params = model.param_leaves(&mut tape, true);
    let clean_in = tape.leaf(x.clone(), false);
    let clean = model.forward_with(&mut tape, clean_in, BnMode::Train, params.clone())?;

    let cfg = AttackConfig { loss_kind: AttackLoss::KlVsClean, ..attack.clone() };
    let adv = pgd(model, x, y, &cfg, Some(tape.value(clean.logits)), seed)?;
    let x_adv = x.zip_map(&adv.delta, |a, d| a + d)?;
    trades_tail(model, tape, params, clean, &x_adv, y, beta, adv.flops)
}

/// The outer TRADES objective at a fixed adversarial batch.
pub fn trades_objective(model: &Model, x: &Tensor, x_adv: &Tensor, y: &[usize], beta: f64) -> Result<StepLoss> {
    check_beta(beta)?;
    let mut tape = Tape::new();
    let params = model.param_leaves(&mut tape, true);
    let clean_in = tape.leaf(x.clone(), false);
    let clean = model.forward_with(&mut tape, clean_in, BnMode::Train, params.clone())?;
    trades_tail(model, tape, params, clean, x_adv, y, beta, FlopTally::default())
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("TRADES needs beta > 0, got {beta}")))
    }
}

#[allow(clippy::too_many_arguments)]
fn trades_tail(
    model: &Model,
    mut tape: Tape,
    params: Vec<Var>,
    clean: ForwardPass,
    x_adv: &Tensor,
    y: &[usize],
    beta: f64,
    attack_flops: FlopTally,
) -> Result<StepLoss> {
    let adv_in = tape.leaf(x_adv.clone(), false);
    let perturbed = model.forward_with(&mut tape, adv_in, BnMode::Train, params.clone())?;
    let ce = tape.cross_entropy(clean.logits, y)?;
    let p = tape.softmax(clean.logits)?;
    let p = tape.floor(p, SOFTMAX_FLOOR);
    let q = tape.softmax(perturbed.logits)?;
    let q = tape.floor(q, SOFTMAX_FLOOR);
    let kl = tape.kl_divergence(p, q)?;
    let kl = tape.scale(kl, beta);
    let loss = tape.add(ce, kl)?;
    finish(model, &tape, loss, &params, vec![clean.bn_batch, perturbed.bn_batch], attack_flops)
}

/// SGD with momentum; weight decay is added to the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, params: &[Param]) -> Sgd {
        Sgd { momentum, weight_decay, velocity: params.iter().map(|p| vec![0.0; p.value.len()]).collect() }
    }

    /// `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
    pub fn step(&mut self, params: &mut [Param], grads: &[Tensor], lr: f64) {
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                *w -= lr * *vi;
            }
        }
    }
}

/// `ema ← decay·ema + (1 − decay)·weights`, elementwise.
pub fn ema_update(ema: &mut [Tensor], weights: &[Tensor], decay: f64) -> Result<()> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(Error::config(format!("ema decay {decay} outside (0, 1)")));
    }
    if ema.len() != weights.len() {
        return Err(Error::shape("ema_update", format!("{} averages for {} tensors", ema.len(), weights.len())));
    }
    for (e, w) in ema.iter_mut().zip(weights) {
        if e.shape() != w.shape() {
            return Err(Error::shape("ema_update", format!("{:?} vs {:?}", e.shape(), w.shape())));
        }
        for (a, &b) in e.data_mut().iter_mut().zip(w.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

/// Outcome of one run as persisted in the records file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub v: u32,
    pub config: TrainConfig,
    pub clean_acc: f64,
    pub robust_acc_earlystop: f64,
    pub robust_acc_final: f64,
    pub train_flops: f64,
    pub wall_seconds: f64,
    pub kwh: f64,
    pub usd: f64,
    pub co2_g: f64,
    pub best_epoch: usize,
    pub epochs_trained: usize,
    pub seed: u64,
    pub failed: bool,
}

impl RunRecord {
    /// Equality ignoring the measured quantities (wall time and energy).
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        let strip = |r: &RunRecord| RunRecord { wall_seconds: 0.0, kwh: 0.0, usd: 0.0, co2_g: 0.0, ..r.clone() };
        let (a, b) = (strip(self), strip(other));
        // Compare floats bitwise so the check is exact.
        serde_json::to_string(&a).ok() == serde_json::to_string(&b).ok()
    }
}

/// Everything [`train`] produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The retained checkpoint (EMA weights when enabled).
    pub model: Model,
    pub record: RunRecord,
    pub flop_report: FlopReport,
    /// FLOPs counted by the tensor primitives during training steps.
    pub measured_flops: FlopTally,
    /// Loss of every optimizer step.
    pub losses: Vec<f64>,
    /// Why the run was aborted, if it was.
    pub failure: Option<String>,
}

mod stream {
    pub const SHUFFLE: u64 = 1;
    pub const EXTRA: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const ATTACK: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const FINAL: u64 = 6;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for a named purpose within a run.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |h, &p| splitmix(h ^ p))
}

fn with_params(model: &Model, params: Option<&[Tensor]>) -> Result<Model> {
    let mut m = model.clone();
    if let Some(p) = params {
        m.set_param_values(p)?;
    }
    Ok(m)
}

struct Checkpoint {
    score: f64,
    robust: f64,
    epoch: usize,
    model: Model,
}

/// Cycles through the extra pool in seeded passes.
struct ExtraStream {
    seed: u64,
    len: usize,
    order: Vec<usize>,
    cursor: usize,
    pass: u64,
}

impl ExtraStream {
    fn new(seed: u64, len: usize) -> ExtraStream {
        ExtraStream { seed, len, order: Vec::new(), cursor: 0, pass: 0 }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.cursor == self.order.len() {
                self.order = (0..self.len).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[stream::EXTRA, self.pass]));
                self.order.shuffle(&mut rng);
                self.cursor = 0;
                self.pass += 1;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Train a model under `cfg` and evaluate it.
///
/// After every epoch the evaluation model (EMA weights if enabled) is
/// attacked with `eval_attack` on the first `eval_subset` test examples and
/// the best checkpoint is kept. A non-finite loss aborts the run and yields
/// a record flagged as failed.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let cfg = cfg.canonical();
    cfg.validate()?;
    if data.image_shape() != cfg.arch.input_shape || data.num_classes != cfg.arch.num_classes {
        return Err(Error::Data(format!(
            "dataset of {:?} images with {} classes does not fit {} on {:?} with {} classes",
            data.image_shape(),
            data.num_classes,
            cfg.arch,
            cfg.arch.input_shape,
            cfg.arch.num_classes
        )));
    }
    let extra = match (cfg.extra_data, &data.extra) {
        (false, _) => None,
        (true, Some(e)) if !e.is_empty() => Some(e),
        (true, _) => return Err(Error::Data("extra_data is set but the dataset has no extra split".into())),
    };
    let n = data.train.len();
    let plan = BatchPlan::new(n, cfg.batch_size, cfg.effective_extra_ratio())?;
    let flop_report = train_flops(&cfg.flop_query(n))?;
    let seed = cfg.seed;

    let meter = PowerMeter::start(&cfg.cost.power)?;
    let started = Instant::now();
    let mut model = Model::build(&cfg.arch, seed)?;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay, model.params());
    let mut ema = cfg.ema.then(|| model.param_values());
    let mut extra_stream = extra.map(|e| ExtraStream::new(seed, e.len()));
    let eval_set = data.test.head(cfg.eval_subset);
    let eval_seed = derive_seed(seed, &[stream::EVAL]);

    let mut best: Option<Checkpoint> = None;
    let mut measured = FlopTally::default();
    let mut losses = Vec::with_capacity(plan.batches * cfg.epochs);
    let mut failure = None;
    let mut epochs_trained = 0;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::SHUFFLE, epoch as u64])));
        for b in 0..plan.batches {
            let base = &order[b * plan.base_per_batch..((b + 1) * plan.base_per_batch).min(n)];
            let mut x = data.train.images.select_rows(base);
            let mut y: Vec<usize> = base.iter().map(|&i| data.train.labels[i]).collect();
            if let (Some(pool), Some(s)) = (extra, extra_stream.as_mut()) {
                let idx = s.take(plan.extra_per_batch);
                x = Tensor::concat_rows(&[&x, &pool.images.select_rows(&idx)])?;
                y.extend(idx.iter().map(|&i| pool.labels[i]));
            }
            if !cfg.augment.is_identity() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::AUGMENT, epoch as u64, b as u64]));
                cfg.augment.apply(&mut x, &mut rng);
            }
            let step_seed = derive_seed(seed, &[stream::ATTACK, epoch as u64, b as u64]);
            let step = match cfg.loss {
                LossKind::Standard => standard_loss(&model, &x, &y)?,
                LossKind::At => at_loss(&model, &x, &y, &cfg.attack, step_seed)?,
                LossKind::Trades => trades_loss(&model, &x, &y, cfg.beta, &cfg.attack, step_seed)?,
            };
            measured += step.flops;
            let grads_finite = step.grads.iter().all(|g| g.data().iter().all(|v| v.is_finite()));
            if !step.loss.is_finite() || !grads_finite {
                failure = Some(format!("non-finite loss {} at epoch {} batch {b}", step.loss, epoch + 1));
                break 'epochs;
            }
            losses.push(step.loss);
            let lr = cfg.lr_at(epoch, b, plan.batches);
            sgd.step(model.params_mut(), &step.grads, lr);
            for pass in &step.bn_batch {
                model.absorb_bn(pass);
            }
            if let Some(e) = ema.as_mut() {
                ema_update(e, &model.param_values(), cfg.ema_decay)?;
            }
        }
        epochs_trained = epoch + 1;
        let candidate = with_params(&model, ema.as_deref())?;
        let robust = robust_accuracy(&candidate, &eval_set.images, &eval_set.labels, &cfg.eval_attack, eval_seed)?;
        // A standard-trained model is selected like any ERM model, on clean
        // accuracy; robust recipes select on robust accuracy.
        let score = match cfg.loss {
            LossKind::Standard => clean_accuracy(&candidate, &eval_set.images, &eval_set.labels)?,
            _ => robust,
        };
        log::debug!("run {} epoch {}: eval robust accuracy {robust:.4}", cfg.run_id(), epoch + 1);
        if best.as_ref().is_none_or(|b| score > b.score) {
            best = Some(Checkpoint { score, robust, epoch: epoch + 1, model: candidate });
        }
    }

    let mut record = RunRecord {
        run_id: cfg.run_id(),
        v: RECORD_VERSION,
        config: cfg.clone(),
        clean_acc: 0.0,
        robust_acc_earlystop: 0.0,
        robust_acc_final: 0.0,
        train_flops: flop_report.total_train_flops as f64,
        wall_seconds: 0.0,
        kwh: 0.0,
        usd: 0.0,
        co2_g: 0.0,
        best_epoch: 0,
        epochs_trained,
        seed,
        failed: failure.is_some(),
    };
    let final_model = match (&failure, best) {
        (None, Some(Checkpoint { robust, epoch, model: m, .. })) => {
            record.robust_acc_earlystop = robust;
            record.best_epoch = epoch;
            record.clean_acc = clean_accuracy(&m, &data.test.images, &data.test.labels)?;
            let set = data.test.head(cfg.final_subset);
            let final_seed = derive_seed(seed, &[stream::FINAL]);
            record.robust_acc_final = robust_accuracy(&m, &set.images, &set.labels, &cfg.final_attack, final_seed)?;
            m
        }
        _ => {
            log::warn!("run {} failed: {}", record.run_id, failure.as_deref().unwrap_or("no epoch completed"));
            with_params(&model, ema.as_deref())?
        }
    };

    let (samples, _) = meter.stop()?;
    let wall = started.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    let energy = energy_from_samples(&samples, wall, &cfg.cost.energy)?;
    record.wall_seconds = wall;
    record.kwh = energy.kwh;
    record.usd = energy.usd;
    record.co2_g = energy.co2_g;

    Ok(TrainOutcome { model: final_model, record, flop_report, measured_flops: measured, losses, failure })
}
