//! Training objectives, recorded on a [`Tape`] so they can be differentiated.
//!
//! Every loss is a batch mean and is written so that smaller is better.
//! Scores are clipped to `[SCORE_EPS, 1 - SCORE_EPS]` before any logarithm.

use crate::datagen::Origin;
use crate::diffcore::tape::log_softmax_f64;
use crate::diffcore::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::memory::ClassRegistry;
use crate::model::Variant;

pub const SCORE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of distillation against classification.
    pub gamma: f64,
    pub temperature: f64,
    /// Weight of the binary detection term.
    pub lambda: f64,
}

impl LossConfig {
    pub fn for_variant(variant: Variant) -> Self {
        LossConfig {
            gamma: 0.5,
            temperature: 2.0,
            lambda: if variant == Variant::MtMc { 1.0 } else { 0.5 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.temperature >= 1.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be at least 1, got {}",
                self.temperature
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::for_variant(Variant::MtSc)
    }
}

/// Class index and real/generated label of every sample in a batch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchLabels {
    pub classes: Vec<usize>,
    pub origins: Vec<Origin>,
}

impl BatchLabels {
    /// Labels whose origins are looked up in `registry`.
    pub fn from_classes(classes: Vec<usize>, registry: &ClassRegistry) -> Result<Self> {
        let origins = classes
            .iter()
            .map(|&c| {
                registry
                    .get(c)
                    .map(|d| d.origin)
                    .ok_or_else(|| Error::Usage(format!("class {} is not registered", c + 1)))
            })
            .collect::<Result<_>>()?;
        Ok(BatchLabels { classes, origins })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Labels of the given rows, in order.
    pub fn subset(&self, rows: &[usize]) -> BatchLabels {
        BatchLabels {
            classes: rows.iter().map(|&r| self.classes[r]).collect(),
            origins: rows.iter().map(|&r| self.origins[r]).collect(),
        }
    }
}

/// `softmax(logits / T)` with the log-sum-exp shift.
pub fn tempered_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    log_softmax_f64(logits, 1.0 / temperature)
        .into_iter()
        .map(f64::exp)
        .collect()
}

fn rows_and_cols<T: Real>(tape: &Tape<'_, T>, v: Var, what: &'static str) -> Result<(usize, usize)> {
    let s = tape.value(v).shape();
    if s.len() != 2 {
        return Err(Error::shape(what, format!("expected [N, K], got {s:?}")));
    }
    Ok((s[0], s[1]))
}

fn check_batch(n: usize, labels: &BatchLabels, what: &'static str) -> Result<()> {
    if n == 0 {
        return Err(Error::Usage(format!("{what} on an empty batch")));
    }
    if labels.len() != n || labels.origins.len() != n {
        return Err(Error::shape(
            what,
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    Ok(())
}

/// Per-class cross-entropy over sigmoid scores `[N, t]`:
/// `-(1/N) Σ_i Σ_y [y = y_i] ln g_y + [y ≠ y_i] ln(1 - g_y)`.
pub fn classification_loss<T: Real>(tape: &mut Tape<'_, T>, scores: Var, labels: &BatchLabels) -> Result<Var> {
    let (n, t) = rows_and_cols(tape, scores, "classification_loss")?;
    check_batch(n, labels, "classification_loss")?;
    let mut onehot = vec![T::zero(); n * t];
    for (i, &y) in labels.classes.iter().enumerate() {
        if y >= t {
            return Err(Error::Usage(format!(
                "label {} outside classes 1..{t}",
                y + 1
            )));
        }
        onehot[i * t + y] = T::one();
    }
    let complement: Vec<T> = onehot.iter().map(|&v| T::one() - v).collect();
    let pos = tape.input(Tensor::new(vec![n, t], onehot)?);
    let neg = tape.input(Tensor::new(vec![n, t], complement)?);
    let log_g = tape.log_clamped(scores, SCORE_EPS, 1.0 - SCORE_EPS);
    let one_minus = tape.scale_shift(scores, -1.0, 1.0);
    let log_1mg = tape.log_clamped(one_minus, SCORE_EPS, 1.0 - SCORE_EPS);
    let a = tape.mul(pos, log_g)?;
    let b = tape.mul(neg, log_1mg)?;
    let ab = tape.add(a, b)?;
    let s = tape.sum_all(ab);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// `(1/N) Σ_i T² · KL(softmax(new_i / T) ‖ softmax(old_i / T))`.
///
/// `new_logits` must already be restricted to the classes the old model knew.
pub fn distillation_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    new_logits: Var,
    old_logits: &Tensor<T>,
    temperature: f64,
) -> Result<Var> {
    let (n, k) = rows_and_cols(tape, new_logits, "distillation_loss")?;
    if old_logits.shape() != [n, k] {
        return Err(Error::Usage(format!(
            "distillation_loss: new logits {:?} vs old logits {:?}",
            [n, k],
            old_logits.shape()
        )));
    }
    if n == 0 {
        return Err(Error::Usage("distillation_loss on an empty batch".into()));
    }
    let mut old_log_p = Vec::with_capacity(n * k);
    for i in 0..n {
        old_log_p.extend(
            log_softmax_f64(old_logits.row(i), 1.0 / temperature)
                .into_iter()
                .map(T::from_f64),
        );
    }
    let log_q = tape.input(Tensor::new(vec![n, k], old_log_p)?);
    let log_p = tape.log_softmax_rows(new_logits, temperature)?;
    let p = tape.exp(log_p);
    let diff = tape.sub(log_p, log_q)?;
    let kl = tape.mul(p, diff)?;
    let s = tape.sum_all(kl);
    Ok(tape.scale(s, temperature * temperature / n as f64))
}

/// `(1 - γ) · class + γ · distill`.
pub fn icarl_loss<T: Real>(tape: &mut Tape<'_, T>, class_term: Var, distill_term: Var, gamma: f64) -> Result<Var> {
    let a = tape.scale(class_term, 1.0 - gamma);
    let b = tape.scale(distill_term, gamma);
    tape.add(a, b)
}

/// Binary cross-entropy of detector outputs `[N, 1]` (or `[N]`) against the
/// real/generated labels.
pub fn binary_loss_mtmc<T: Real>(tape: &mut Tape<'_, T>, detector: Var, labels: &BatchLabels) -> Result<Var> {
    let n = tape.value(detector).len();
    if tape.value(detector).rows() != n {
        return Err(Error::shape(
            "binary_loss_mtmc",
            format!("expected one output per sample, got {:?}", tape.value(detector).shape()),
        ));
    }
    check_batch(n, labels, "binary_loss_mtmc")?;
    let shape = tape.value(detector).shape().to_vec();
    let is_gan: Vec<T> = labels
        .origins
        .iter()
        .map(|&o| if o == Origin::Gan { T::one() } else { T::zero() })
        .collect();
    let is_real: Vec<T> = is_gan.iter().map(|&v| T::one() - v).collect();
    let g = tape.input(Tensor::new(shape.clone(), is_gan)?);
    let r = tape.input(Tensor::new(shape, is_real)?);
    let log_d = tape.log_clamped(detector, SCORE_EPS, 1.0 - SCORE_EPS);
    let one_minus = tape.scale_shift(detector, -1.0, 1.0);
    let log_1md = tape.log_clamped(one_minus, SCORE_EPS, 1.0 - SCORE_EPS);
    let a = tape.mul(g, log_d)?;
    let b = tape.mul(r, log_1md)?;
    let ab = tape.add(a, b)?;
    let s = tape.sum_all(ab);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// `icarl + λ · binary`.
pub fn mtmc_loss<T: Real>(tape: &mut Tape<'_, T>, icarl: Var, binary: Var, lambda: f64) -> Result<Var> {
    let b = tape.scale(binary, lambda);
    tape.add(icarl, b)
}

/// Group binary term over class scores `[N, t]`:
/// `-(1/N) Σ_i Σ_{y in group(Y_i)} ln g_y`, where the group is every
/// generated class for a generated sample and every real class otherwise.
pub fn group_binary_loss_mtsc<T: Real>(
    tape: &mut Tape<'_, T>,
    scores: Var,
    labels: &BatchLabels,
    registry: &ClassRegistry,
) -> Result<Var> {
    let (n, t) = rows_and_cols(tape, scores, "group_binary_loss_mtsc")?;
    check_batch(n, labels, "group_binary_loss_mtsc")?;
    if t != registry.len() {
        return Err(Error::shape(
            "group_binary_loss_mtsc",
            format!("{t} score columns for {} registered classes", registry.len()),
        ));
    }
    if registry.group(Origin::Gan).is_empty() || registry.group(Origin::Real).is_empty() {
        return Err(Error::Usage(
            "group binary loss needs both generated and real classes".into(),
        ));
    }
    let mut mask = vec![T::zero(); n * t];
    for (i, &origin) in labels.origins.iter().enumerate() {
        for c in registry.classes() {
            if c.origin == origin {
                mask[i * t + c.id] = T::one();
            }
        }
    }
    let m = tape.input(Tensor::new(vec![n, t], mask)?);
    let log_g = tape.log_clamped(scores, SCORE_EPS, 1.0 - SCORE_EPS);
    let masked = tape.mul(m, log_g)?;
    let s = tape.sum_all(masked);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Plain f64 evaluation helper for tests and reports.
pub fn eval_scalar(f: impl FnOnce(&mut Tape<'_, f64>) -> Result<Var>) -> Result<f64> {
    let params = crate::diffcore::ParameterSet::<f64>::new();
    let mut tape = Tape::new(&params);
    let v = f(&mut tape)?;
    Ok(tape.scalar(v))
}
