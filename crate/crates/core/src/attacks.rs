//! ℓ∞-bounded white-box attacks and the robust-accuracy evaluator.
//!
//! Every attack runs the model with frozen batch norm, so running statistics
//! are never touched while adversarial examples are crafted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::{validate_probabilities, BnMode, FlopTally, Tape, Tensor, SOFTMAX_FLOOR};

/// Examples attacked per tape during evaluation.
const EVAL_CHUNK: usize = 256;

/// Objective the attacker ascends.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    #[default]
    CrossEntropy,
    /// KL divergence from the clean prediction to the perturbed one.
    KlVsClean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// ℓ∞ radius in input units; inputs live in `[0, 1]`.
    pub epsilon: f64,
    pub steps: usize,
    /// Per-iteration step; `None` means `2.5·ε / steps`.
    pub step_size: Option<f64>,
    pub random_start: bool,
    pub restarts: usize,
    pub loss_kind: AttackLoss,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            steps: 10,
            step_size: None,
            random_start: true,
            restarts: 1,
            loss_kind: AttackLoss::CrossEntropy,
        }
    }
}

impl AttackConfig {
    /// PGD-`steps` with cross-entropy and a random start.
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackConfig { epsilon, steps, ..Default::default() }
    }

    /// Single full-size signed-gradient step from the clean point.
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig { epsilon, steps: 1, step_size: Some(epsilon), random_start: false, ..Default::default() }
    }

    pub fn step_size(&self) -> f64 {
        self.step_size.unwrap_or(2.5 * self.epsilon / self.steps.max(1) as f64)
    }

    /// `ε = 0` is accepted and describes the empty ball.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("attack: {m}")));
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad(format!("epsilon {} outside [0, 1)", self.epsilon));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1".into());
        }
        let step = self.step_size();
        if !step.is_finite() || step < 0.0 || (step == 0.0 && self.epsilon > 0.0) {
            return bad(format!("step size {step}"));
        }
        Ok(())
    }
}

/// Clamp `delta` into the ε-box and keep `x + delta` inside `[0, 1]`.
///
/// Both constraints are applied as one interval per coordinate,
/// `[max(−ε, −x), min(ε, 1 − x)]`, so `|δ| ≤ ε` holds exactly with no
/// rounding slack and repeating the projection changes nothing.
pub fn project(delta: &mut [f64], x: &[f64], epsilon: f64) {
    for (d, &xi) in delta.iter_mut().zip(x) {
        let lo = (-epsilon).max(-xi);
        let hi = epsilon.min(1.0 - xi);
        *d = d.max(lo).min(hi);
    }
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Seed for restart `restart` of an attack keyed by `seed`.
fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed ^ (restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Uniform draw from the ε-box for every example, projected so `x + δ`
/// stays in `[0, 1]`. Example `i` uses stream `i` of a generator seeded
/// with `seed`.
pub fn random_start(x: &Tensor, epsilon: f64, seed: u64) -> Tensor {
    let mut t = random_start_keyed(x, epsilon, seed, None);
    project(t.data_mut(), x.data(), epsilon);
    t
}

fn random_start_keyed(x: &Tensor, epsilon: f64, seed: u64, keys: Option<&[usize]>) -> Tensor {
    let mut delta = vec![0.0; x.len()];
    for (i, row) in delta.chunks_mut(x.row_len()).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(keys.map_or(i, |k| k[i]) as u64);
        for d in row {
            *d = epsilon * (2.0 * rng.random::<f64>() - 1.0);
        }
    }
    Tensor::new(x.shape().to_vec(), delta).expect("shape of x")
}

/// Result of one PGD run.
#[derive(Clone, Debug)]
pub struct PgdOutcome {
    /// Final perturbation.
    pub delta: Tensor,
    /// FLOPs spent on forward and backward passes.
    pub flops: FlopTally,
    /// Per example: whether any visited iterate was misclassified. Only
    /// filled when iterates are tracked.
    pub fooled: Option<Vec<bool>>,
}

/// Targets of the attack objective, fixed before the first step.
enum Objective<'a> {
    CrossEntropy,
    Kl(&'a Tensor),
}

/// Craft a perturbation for the batch `x` with labels `y`.
///
/// `clean_logits` is required for [`AttackLoss::KlVsClean`]; its floored
/// softmax is held constant while `δ` is optimized. The random start of
/// example `i` depends only on `(seed, i)`.
pub fn pgd(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    clean_logits: Option<&Tensor>,
    seed: u64,
) -> Result<PgdOutcome> {
    let target = match (cfg.loss_kind, clean_logits) {
        (AttackLoss::CrossEntropy, _) => None,
        (AttackLoss::KlVsClean, Some(logits)) => Some(clean_target(logits, y.len())?),
        (AttackLoss::KlVsClean, None) => return Err(Error::config("attack: kl_vs_clean needs clean logits")),
    };
    let objective = match &target {
        Some(t) => Objective::Kl(t),
        None => Objective::CrossEntropy,
    };
    run(model, x, y, cfg, &objective, seed, None, false)
}

fn clean_target(logits: &Tensor, rows: usize) -> Result<Tensor> {
    if logits.rank() != 2 || logits.rows() != rows {
        return Err(Error::shape("pgd", format!("clean logits {:?} for {rows} examples", logits.shape())));
    }
    let p = logits.softmax_rows().map(|v| v.max(SOFTMAX_FLOOR));
    validate_probabilities("pgd", &p)?;
    Ok(p)
}

fn check_inputs(x: &Tensor, y: &[usize]) -> Result<()> {
    if x.rank() < 2 || x.rows() != y.len() {
        return Err(Error::shape("pgd", format!("inputs {:?} with {} labels", x.shape(), y.len())));
    }
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::domain("pgd", format!("input value {v} outside [0, 1]")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    objective: &Objective,
    seed: u64,
    stream_keys: Option<&[usize]>,
    track: bool,
) -> Result<PgdOutcome> {
    cfg.validate()?;
    check_inputs(x, y)?;
    let eps = cfg.epsilon;
    let alpha = cfg.step_size();

    let mut delta =
        if cfg.random_start { random_start_keyed(x, eps, seed, stream_keys).into_data() } else { vec![0.0; x.len()] };
    project(&mut delta, x.data(), eps);

    let mut flops = FlopTally::default();
    let mut fooled = track.then(|| vec![false; y.len()]);
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let adv = x.zip_map(&Tensor::new(x.shape().to_vec(), delta.clone())?, |a, d| a + d)?;
        let input = tape.leaf(adv, true);
        let logits = model.forward(&mut tape, input, BnMode::Frozen, false)?.logits;
        if let Some(f) = fooled.as_mut() {
            mark_misclassified(tape.value(logits), y, f);
        }
        let loss = match objective {
            Objective::CrossEntropy => tape.cross_entropy(logits, y)?,
            Objective::Kl(target) => {
                let p = tape.leaf((*target).clone(), false);
                let q = tape.softmax(logits)?;
                let q = tape.floor(q, SOFTMAX_FLOOR);
                tape.kl_divergence(p, q)?
            }
        };
        let grads = tape.backward(loss)?;
        flops += tape.forward_flops() + grads.flops();
        let g = grads.get(input).expect("input requires grad");
        for (d, &gi) in delta.iter_mut().zip(g.data()) {
            *d += alpha * sign(gi);
        }
        project(&mut delta, x.data(), eps);
    }
    let delta = Tensor::new(x.shape().to_vec(), delta)?;
    if let Some(f) = fooled.as_mut() {
        let adv = x.zip_map(&delta, |a, d| a + d)?;
        let mut tape = Tape::new();
        let input = tape.leaf(adv, false);
        let logits = model.forward(&mut tape, input, BnMode::Frozen, false)?.logits;
        mark_misclassified(tape.value(logits), y, f);
    }
    Ok(PgdOutcome { delta, flops, fooled })
}

fn mark_misclassified(logits: &Tensor, y: &[usize], fooled: &mut [bool]) {
    for ((f, pred), &label) in fooled.iter_mut().zip(logits.argmax_rows()).zip(y) {
        *f |= pred != label;
    }
}

/// Per-example correctness on clean inputs.
pub fn clean_mask(model: &Model, x: &Tensor, y: &[usize]) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(y.len());
    for start in (0..y.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(y.len())).collect();
        let logits = model.logits(&x.select_rows(&idx))?;
        out.extend(logits.argmax_rows().into_iter().zip(&y[start..]).map(|(p, &l)| p == l));
    }
    Ok(out)
}

pub fn clean_accuracy(model: &Model, x: &Tensor, y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Data("accuracy of an empty dataset".into()));
    }
    let mask = clean_mask(model, x, y)?;
    Ok(fraction(&mask))
}

/// Per-example robustness: an example counts only if it is classified
/// correctly at the clean point and at every iterate of every restart.
///
/// Restart `r` draws its random start from a seed derived from `(seed, r)`,
/// so adding restarts or steps (at a fixed step size) can only remove
/// examples from the robust set.
pub fn robust_mask(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig, seed: u64) -> Result<Vec<bool>> {
    cfg.validate()?;
    check_inputs(x, y)?;
    let mut robust = clean_mask(model, x, y)?;
    for r in 0..cfg.restarts {
        let alive: Vec<usize> = (0..y.len()).filter(|&i| robust[i]).collect();
        for chunk in alive.chunks(EVAL_CHUNK) {
            let xs = x.select_rows(chunk);
            let ys: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let target = match cfg.loss_kind {
                AttackLoss::CrossEntropy => None,
                AttackLoss::KlVsClean => Some(clean_target(&model.logits(&xs)?, ys.len())?),
            };
            let objective = match &target {
                Some(t) => Objective::Kl(t),
                None => Objective::CrossEntropy,
            };
            // Streams are keyed by the example's position in the full batch
            // so results do not depend on which examples are still alive.
            let outcome = run(model, &xs, &ys, cfg, &objective, restart_seed(seed, r), Some(chunk), true)?;
            for (&i, f) in chunk.iter().zip(outcome.fooled.expect("tracked")) {
                robust[i] &= !f;
            }
        }
    }
    Ok(robust)
}

/// Fraction of examples robust under `cfg`.
pub fn robust_accuracy(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig, seed: u64) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Data("robust accuracy of an empty dataset".into()));
    }
    Ok(fraction(&robust_mask(model, x, y, cfg, seed)?))
}

fn fraction(mask: &[bool]) -> f64 {
    mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64
}
