//! The incremental protocol: initial training on the first architectures,
//! then one three-step update per added architecture, plus evaluation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{crop, splitmix64, ArchitectureData, Origin, Sample, Split};
use crate::diffcore::{AdamConfig, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{
    binary_loss_mtmc, classification_loss, distillation_loss, group_binary_loss_mtsc, BatchLabels,
    LossConfig,
};
use crate::memory::{class_quota, classify_nme, select_exemplars, Budget, ClassRegistry, ExemplarStore};
use crate::model::{rows_of, ModelSnapshot, ModelState, NetworkConfig, Variant, EVAL_CHUNK};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Smallest validation decrease that counts as an improvement.
    pub min_delta: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 64,
            patience: 5,
            max_epochs: 100,
            min_delta: 1e-5,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnerConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub budget: Budget,
}

impl LearnerConfig {
    pub fn new(variant: Variant) -> Self {
        LearnerConfig {
            network: NetworkConfig {
                variant,
                ..NetworkConfig::default()
            },
            loss: LossConfig::for_variant(variant),
            train: TrainConfig::default(),
            budget: Budget::Unlimited,
        }
    }

    pub fn variant(&self) -> Variant {
        self.network.variant
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Validation stopped improving for `patience` epochs.
    Patience,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// 1 for the initial training, then one more per increment.
    pub step: usize,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub epochs_run: usize,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub stop_reason: StopReason,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub step: usize,
    /// Seen architecture indices, in arrival order.
    pub architectures: Vec<usize>,
    pub detection_acc: f64,
    /// Detection accuracy per entry of `architectures`.
    pub per_arch_detection: Vec<f64>,
    /// Architecture attribution accuracy over generated test images.
    pub classification_acc: f64,
    /// `confusion[true][predicted]` over generated test images.
    pub confusion: Vec<Vec<usize>>,
    /// Detector-head accuracy, multi-classifier variant only.
    pub aux_detector_acc: Option<f64>,
}

/// One training row: a sample, its class and whether it is rehearsed.
#[derive(Clone, Debug)]
struct Item {
    sample: Arc<Sample>,
    class: usize,
    exemplar: bool,
}

/// Per-term batch means and the row counts behind them.
#[derive(Default)]
struct Terms {
    class: Option<(Var, usize)>,
    distill: Option<(Var, usize)>,
    binary: Option<(Var, usize)>,
}

#[derive(Default, Clone, Copy)]
struct TermSums {
    class: (f64, usize),
    distill: (f64, usize),
    binary: (f64, usize),
}

impl TermSums {
    fn add(&mut self, tape: &Tape<'_, f32>, terms: &Terms) {
        let acc = |slot: &mut (f64, usize), t: Option<(Var, usize)>| {
            if let Some((v, n)) = t {
                slot.0 += tape.scalar(v) * n as f64;
                slot.1 += n;
            }
        };
        acc(&mut self.class, terms.class);
        acc(&mut self.distill, terms.distill);
        acc(&mut self.binary, terms.binary);
    }

    fn mean(slot: (f64, usize)) -> f64 {
        if slot.1 == 0 {
            0.0
        } else {
            slot.0 / slot.1 as f64
        }
    }
}

/// Full learner state.
#[derive(Clone, Debug)]
pub struct Learner {
    config: LearnerConfig,
    model: ModelState<f32>,
    snapshot: Option<ModelSnapshot<f32>>,
    store: ExemplarStore,
    registry: ClassRegistry,
    rng: ChaCha8Rng,
    steps: usize,
}

const INIT_STREAM: u64 = 0x6d6f_6465_6c00;
const SHUFFLE_STREAM: u64 = 0x7368_7566_666c;

impl Learner {
    /// Trains on the first architectures and builds their exemplar sets.
    pub fn initialize(config: LearnerConfig, archs: &[&ArchitectureData]) -> Result<(Learner, StepReport)> {
        config.validate()?;
        if archs.is_empty() {
            return Err(Error::Config("initialization needs at least one architecture".into()));
        }
        let mut registry = ClassRegistry::new();
        for a in archs {
            if a.train.is_empty() || a.val.is_empty() {
                return Err(Error::Config(format!(
                    "architecture {} has an empty training or validation split",
                    a.arch
                )));
            }
            registry.add_architecture(a.arch)?;
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(splitmix64(config.train.seed ^ INIT_STREAM));
        let model = ModelState::new(config.network.clone(), registry.len(), &mut init_rng)?;
        let mut learner = Learner {
            store: ExemplarStore::new(config.budget),
            rng: ChaCha8Rng::seed_from_u64(splitmix64(config.train.seed ^ SHUFFLE_STREAM)),
            config,
            model,
            snapshot: None,
            registry,
            steps: 0,
        };
        let (train, val) = learner.labelled(archs)?;
        let report = learner.train_epochs(&train, &val)?;
        learner.rebuild_memory(archs)?;
        Ok((learner, report))
    }

    /// Adds one architecture: snapshot, head growth, training on the new data
    /// plus exemplars, then exemplar selection, reduction and new templates.
    pub fn increment(&mut self, arch: &ArchitectureData) -> Result<StepReport> {
        if arch.train.is_empty() || arch.val.is_empty() {
            return Err(Error::Config(format!(
                "architecture {} has an empty training or validation split",
                arch.arch
            )));
        }
        self.snapshot = Some(self.model.snapshot());
        self.registry.add_architecture(arch.arch)?;
        self.model.expand_head(2)?;
        self.store.ensure_classes(self.registry.len());
        let (mut train, val) = self.labelled(&[arch])?;
        if self.config.variant() != Variant::Finetune {
            train.extend(self.exemplar_items());
        }
        let report = self.train_epochs(&train, &val)?;
        self.rebuild_memory(&[arch])?;
        Ok(report)
    }

    fn labelled(&self, archs: &[&ArchitectureData]) -> Result<(Vec<Item>, Vec<Item>)> {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for a in archs {
            for (split, out) in [(Split::Train, &mut train), (Split::Val, &mut val)] {
                for s in a.split(split) {
                    let class = self.registry.class_of(a.arch, s.key.origin).ok_or_else(|| {
                        Error::Usage(format!("architecture {} is not registered", a.arch))
                    })?;
                    out.push(Item {
                        sample: s.clone(),
                        class,
                        exemplar: false,
                    });
                }
            }
        }
        Ok((train, val))
    }

    fn exemplar_items(&self) -> Vec<Item> {
        self.store
            .iter()
            .map(|(class, s)| Item {
                sample: s.clone(),
                class,
                exemplar: true,
            })
            .collect()
    }

    /// Selects exemplars for the classes of `fresh` and shrinks the rest to
    /// the current quota, then recomputes every template.
    fn rebuild_memory(&mut self, fresh: &[&ArchitectureData]) -> Result<()> {
        self.store.invalidate();
        self.store.ensure_classes(self.registry.len());
        let quota = class_quota(self.config.budget, self.registry.len())?;
        let mut new_classes = Vec::new();
        for a in fresh {
            for origin in [Origin::Gan, Origin::Real] {
                let class = self.registry.class_of(a.arch, origin).expect("registered");
                let pool: Vec<Arc<Sample>> = a
                    .train
                    .iter()
                    .filter(|s| s.key.origin == origin)
                    .cloned()
                    .collect();
                let m = quota.take(pool.len());
                let chosen = if m == 0 {
                    Vec::new()
                } else {
                    let features = self.model.features_of(&pool)?;
                    select_exemplars(&features, m)?
                        .into_iter()
                        .map(|i| pool[i].clone())
                        .collect()
                };
                self.store.set_exemplars(class, chosen);
                new_classes.push(class);
            }
        }
        for class in 0..self.registry.len() {
            if new_classes.contains(&class) {
                continue;
            }
            let target = quota.take(self.store.count(class));
            self.store.reduce_exemplars(class, target, &self.model)?;
        }
        self.store.compute_templates(&self.model)?;
        self.steps += 1;
        Ok(())
    }

    /// Runs shuffled mini-batch epochs with early stopping on `val` and
    /// restores the parameters of the best validation epoch.
    fn train_epochs(&mut self, train: &[Item], val: &[Item]) -> Result<StepReport> {
        let step = self.steps + 1;
        let tc = self.config.train.clone();
        let adam = AdamConfig {
            lr: tc.lr,
            ..AdamConfig::default()
        };
        self.model.params_mut().reset_optimizer();
        let old_logits = self.cache_old_logits(train)?;
        let val_exemplars = self.exemplar_items();
        let val_old = self.cache_old_logits(&val_exemplars)?;

        let mut report = StepReport {
            step,
            train_losses: Vec::new(),
            val_losses: Vec::new(),
            epochs_run: 0,
            best_epoch: None,
            stop_reason: StopReason::MaxEpochs,
        };
        if train.is_empty() {
            return Err(Error::Config(format!("step {step} has no training data")));
        }
        let mut best = f64::INFINITY;
        let mut best_params = None;
        let mut stale = 0usize;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=tc.max_epochs {
            order.shuffle(&mut self.rng);
            let mut sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(tc.batch_size) {
                let items: Vec<&Item> = chunk.iter().map(|&i| &train[i]).collect();
                let old: Vec<Option<&[f32]>> = chunk.iter().map(|&i| old_logits[i].as_deref()).collect();
                let batch = self.batch_images(&items, true)?;
                let mut tape = Tape::new(self.model.params());
                let terms = self.batch_terms(&mut tape, batch, &items, &old)?;
                let Some(loss) = self.combine(&mut tape, &terms)? else { continue };
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        epoch,
                        detail: format!("training loss {value} after {batches} batches"),
                    });
                }
                let mut grads = tape.backward(loss)?;
                drop(tape);
                if tc.grad_clip > 0.0 {
                    grads.clip_global_norm(tc.grad_clip);
                }
                self.model.params_mut().adam_step(&grads, &adam)?;
                sum += value;
                batches += 1;
            }
            report.train_losses.push(if batches == 0 { 0.0 } else { sum / batches as f64 });
            let val_loss = self.validation_loss(val, &val_exemplars, &val_old)?;
            if !val_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    epoch,
                    detail: format!("validation loss {val_loss}"),
                });
            }
            report.val_losses.push(val_loss);
            report.epochs_run = epoch;
            if val_loss < best - tc.min_delta {
                best = val_loss;
                best_params = Some(self.model.params().clone());
                report.best_epoch = Some(epoch);
                stale = 0;
            } else {
                stale += 1;
                if stale >= tc.patience {
                    report.stop_reason = StopReason::Patience;
                    break;
                }
            }
        }
        if let Some(p) = best_params {
            self.model.params_mut().copy_values_from(&p)?;
        }
        if !self.model.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                epoch: report.epochs_run,
                detail: "parameters became non-finite".into(),
            });
        }
        Ok(report)
    }

    /// Snapshot logits for exemplar rows when inputs are not randomly cropped.
    fn cache_old_logits(&self, items: &[Item]) -> Result<Vec<Option<Vec<f32>>>> {
        let mut out = vec![None; items.len()];
        let Some(snap) = &self.snapshot else { return Ok(out) };
        if self.needs_crop(items) || self.config.loss.gamma == 0.0 {
            return Ok(out);
        }
        let idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].exemplar).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let samples: Vec<Arc<Sample>> = chunk.iter().map(|&i| items[i].sample.clone()).collect();
            let (logits, _) = snap.class_scores(snap.prepare(&samples)?)?;
            for (row, &i) in rows_of(&logits).into_iter().zip(chunk) {
                out[i] = Some(row);
            }
        }
        Ok(out)
    }

    fn needs_crop(&self, items: &[Item]) -> bool {
        let size = self.config.network.input_size;
        items.iter().any(|it| it.sample.image.shape()[1] != size)
    }

    /// Stacks (and, for training batches of oversized images, randomly crops)
    /// the inputs of `items`.
    fn batch_images(&mut self, items: &[&Item], train: bool) -> Result<Tensor<f32>> {
        let size = self.config.network.input_size;
        let mut crops = Vec::with_capacity(items.len());
        for it in items {
            let img = &it.sample.image;
            let side = img.shape()[1];
            if side == size {
                crops.push(img.clone());
            } else if side < size {
                return Err(Error::shape(
                    "input",
                    format!("image side {side} is smaller than input size {size}"),
                ));
            } else if train {
                let top = self.rng.random_range(0..=side - size);
                let left = self.rng.random_range(0..=side - size);
                crops.push(crop(img, size, top, left)?);
            } else {
                crops.push(crate::datagen::center_crop(img, size)?);
            }
        }
        let refs: Vec<&Tensor<f32>> = crops.iter().collect();
        Tensor::stack(&refs)
    }

    /// Records every active loss term for one batch.
    fn batch_terms(
        &self,
        tape: &mut Tape<'_, f32>,
        batch: Tensor<f32>,
        items: &[&Item],
        cached_old: &[Option<&[f32]>],
    ) -> Result<Terms> {
        let variant = self.config.variant();
        let out = self.model.forward(tape, batch.clone())?;
        let labels = BatchLabels::from_classes(items.iter().map(|i| i.class).collect(), &self.registry)?;
        let new_rows: Vec<usize> = (0..items.len()).filter(|&i| !items[i].exemplar).collect();
        let old_rows: Vec<usize> = (0..items.len()).filter(|&i| items[i].exemplar).collect();
        let mut terms = Terms::default();

        if !new_rows.is_empty() {
            let s = tape.gather_rows(out.scores, &new_rows)?;
            let l = classification_loss(tape, s, &labels.subset(&new_rows))?;
            terms.class = Some((l, new_rows.len()));
        }
        let gamma = self.config.loss.gamma;
        if let (Some(snap), false, true) = (&self.snapshot, old_rows.is_empty(), gamma > 0.0) {
            if variant != Variant::Finetune {
                let t_old = snap.num_classes();
                let old = if old_rows.iter().all(|&r| cached_old[r].is_some()) {
                    let mut data = Vec::with_capacity(old_rows.len() * t_old);
                    for &r in &old_rows {
                        data.extend_from_slice(cached_old[r].expect("checked"));
                    }
                    Tensor::new(vec![old_rows.len(), t_old], data)?
                } else {
                    let (full, _) = snap.class_scores(batch)?;
                    let mut data = Vec::with_capacity(old_rows.len() * t_old);
                    for &r in &old_rows {
                        data.extend_from_slice(full.row(r));
                    }
                    Tensor::new(vec![old_rows.len(), t_old], data)?
                };
                let rows = tape.gather_rows(out.logits, &old_rows)?;
                let cols = tape.slice_cols(rows, 0, t_old)?;
                let l = distillation_loss(tape, cols, &old, self.config.loss.temperature)?;
                terms.distill = Some((l, old_rows.len()));
            }
        }
        match variant {
            Variant::MtMc if !new_rows.is_empty() => {
                let d = out.detector.ok_or_else(|| Error::Usage("missing detector head".into()))?;
                let d = tape.gather_rows(d, &new_rows)?;
                let l = binary_loss_mtmc(tape, d, &labels.subset(&new_rows))?;
                terms.binary = Some((l, new_rows.len()));
            }
            Variant::MtSc => {
                let l = group_binary_loss_mtsc(tape, out.scores, &labels, &self.registry)?;
                terms.binary = Some((l, items.len()));
            }
            _ => {}
        }
        Ok(terms)
    }

    fn weights(&self) -> (f64, f64, f64) {
        let lc = &self.config.loss;
        match self.config.variant() {
            Variant::Finetune => (1.0, 0.0, 0.0),
            Variant::BaseIcarl => (1.0 - lc.gamma, lc.gamma, 0.0),
            Variant::MtMc | Variant::MtSc => (1.0 - lc.gamma, lc.gamma, lc.lambda),
        }
    }

    fn combine(&self, tape: &mut Tape<'_, f32>, terms: &Terms) -> Result<Option<Var>> {
        let (wc, wd, wb) = self.weights();
        let mut total: Option<Var> = None;
        for (term, w) in [(terms.class, wc), (terms.distill, wd), (terms.binary, wb)] {
            let Some((v, _)) = term else { continue };
            if w == 0.0 {
                continue;
            }
            let scaled = tape.scale(v, w);
            total = Some(match total {
                Some(t) => tape.add(t, scaled)?,
                None => scaled,
            });
        }
        Ok(total)
    }

    /// The training objective on the new validation split, with the
    /// rehearsal terms evaluated on the fixed exemplar set.
    fn validation_loss(&mut self, val: &[Item], exemplars: &[Item], old: &[Option<Vec<f32>>]) -> Result<f64> {
        let mut rows: Vec<(&Item, Option<&[f32]>)> = val.iter().map(|i| (i, None)).collect();
        if self.snapshot.is_some() && self.config.variant() != Variant::Finetune {
            rows.extend(exemplars.iter().zip(old).map(|(i, o)| (i, o.as_deref())));
        }
        let mut sums = TermSums::default();
        for chunk in rows.chunks(EVAL_CHUNK) {
            let items: Vec<&Item> = chunk.iter().map(|r| r.0).collect();
            let cached: Vec<Option<&[f32]>> = chunk.iter().map(|r| r.1).collect();
            let batch = self.batch_images(&items, false)?;
            let mut tape = Tape::new(self.model.params());
            let terms = self.batch_terms(&mut tape, batch, &items, &cached)?;
            sums.add(&tape, &terms);
        }
        let (wc, wd, wb) = self.weights();
        Ok(wc * TermSums::mean(sums.class) + wd * TermSums::mean(sums.distill) + wb * TermSums::mean(sums.binary))
    }

    /// Predicted class per sample: nearest template, or head argmax when no
    /// templates exist.
    pub fn predict(&self, samples: &[Arc<Sample>]) -> Result<Vec<usize>> {
        let templates = self.store.templates();
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let batch = self.model.prepare(chunk)?;
            if templates.is_empty() {
                let (_, scores) = self.model.class_scores(batch)?;
                for i in 0..scores.rows() {
                    out.push(argmax(scores.row(i)));
                }
            } else {
                let f = self.model.extract_features(batch)?;
                for i in 0..f.rows() {
                    out.push(classify_nme(f.row(i), &templates).expect("templates present"));
                }
            }
        }
        Ok(out)
    }

    /// Generated-or-real decision per sample via its predicted class.
    pub fn detect(&self, samples: &[Arc<Sample>]) -> Result<Vec<Origin>> {
        Ok(self
            .predict(samples)?
            .into_iter()
            .map(|c| self.registry.get(c).map(|d| d.origin).unwrap_or(Origin::Real))
            .collect())
    }

    /// Detection, attribution and confusion over the test splits of every
    /// seen architecture. `data` may hold more architectures than were seen.
    pub fn evaluate(&self, data: &[&ArchitectureData]) -> Result<MetricsReport> {
        let seen = self.registry.architectures();
        let mut per_arch = Vec::with_capacity(seen.len());
        let mut confusion = vec![vec![0usize; seen.len()]; seen.len()];
        let (mut hits, mut total) = (0usize, 0usize);
        let (mut aux_hits, mut aux_total) = (0usize, 0usize);
        for (ai, &arch) in seen.iter().enumerate() {
            let a = data
                .iter()
                .find(|d| d.arch == arch)
                .ok_or_else(|| Error::Config(format!("no test data for architecture {arch}")))?;
            let tests = &a.test;
            let preds = self.predict(tests)?;
            let mut arch_hits = 0usize;
            for (s, &p) in tests.iter().zip(&preds) {
                let desc = self.registry.get(p).expect("predicted class is registered");
                if desc.origin == s.key.origin {
                    arch_hits += 1;
                }
                if s.key.origin == Origin::Gan {
                    let pi = seen.iter().position(|&x| x == desc.arch).expect("seen");
                    confusion[ai][pi] += 1;
                }
            }
            if self.config.variant() == Variant::MtMc {
                for chunk in tests.chunks(EVAL_CHUNK) {
                    let d = self.model.detector_score(self.model.prepare(chunk)?)?;
                    for (s, &v) in chunk.iter().zip(d.data()) {
                        let said_gan = v >= 0.5;
                        aux_hits += usize::from(said_gan == (s.key.origin == Origin::Gan));
                        aux_total += 1;
                    }
                }
            }
            per_arch.push(ratio(arch_hits, tests.len()));
            hits += arch_hits;
            total += tests.len();
        }
        let diag: usize = (0..seen.len()).map(|i| confusion[i][i]).sum();
        let gan_total: usize = confusion.iter().flatten().sum();
        Ok(MetricsReport {
            step: self.steps,
            architectures: seen,
            detection_acc: ratio(hits, total),
            per_arch_detection: per_arch,
            classification_acc: ratio(diag, gan_total),
            confusion,
            aux_detector_acc: (aux_total > 0).then(|| ratio(aux_hits, aux_total)),
        })
    }

    /// Checks that the store fits the budget, that every class holds exactly
    /// `min(quota, available)` exemplars and that the head matches the
    /// registry.
    pub fn check_invariants(&self, available: impl Fn(usize) -> usize) -> Result<()> {
        let t = self.registry.len();
        if self.model.num_classes() != t || self.store.classes() != t {
            return Err(Error::Invariant(format!(
                "{t} registered classes, {} head rows, {} exemplar sets",
                self.model.num_classes(),
                self.store.classes()
            )));
        }
        if let Budget::Limited(m) = self.config.budget {
            if self.store.total() > m {
                return Err(Error::Invariant(format!(
                    "{} exemplars stored under budget {m}",
                    self.store.total()
                )));
            }
        }
        let quota = class_quota(self.config.budget, t)?;
        for class in 0..t {
            let want = quota.take(available(class));
            if self.store.count(class) != want {
                return Err(Error::Invariant(format!(
                    "class {} holds {} exemplars, expected {want}",
                    class + 1,
                    self.store.count(class)
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelState<f32> {
        &self.model
    }

    pub fn snapshot(&self) -> Option<&ModelSnapshot<f32>> {
        self.snapshot.as_ref()
    }

    pub fn store(&self) -> &ExemplarStore {
        &self.store
    }

    pub fn registry(&self) -> &ClassRegistry {
        &self.registry
    }

    /// Completed steps (initialization counts as one).
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Writes the model, the class order and the exemplar manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(&dir.join("model"))?;
        let archs: Vec<String> = self.registry.architectures().iter().map(|a| a.to_string()).collect();
        let state = format!(
            "# architectures={}\n# steps={}\n{}",
            archs.join(" "),
            self.steps,
            self.store.to_manifest()
        );
        let path = dir.join("exemplars.csv");
        fs::write(&path, state).map_err(|e| Error::io(&path, e))
    }

    /// Restores a learner written by [`Learner::save`]; exemplar paths are
    /// resolved against `data`.
    pub fn load(dir: &Path, config: LearnerConfig, data: &[&ArchitectureData]) -> Result<Learner> {
        let model = ModelState::load(&dir.join("model"))?;
        let path = dir.join("exemplars.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut registry = ClassRegistry::new();
        let mut steps = 0usize;
        let mut budget = config.budget;
        for (i, line) in text.lines().enumerate() {
            let Some(meta) = line.trim().strip_prefix('#') else { continue };
            let Some((k, v)) = meta.split_once('=') else { continue };
            let bad = |detail: String| Error::Manifest {
                path: path.clone(),
                line: i + 1,
                detail,
            };
            match k.trim() {
                "architectures" => {
                    for tok in v.split_whitespace() {
                        let a = tok.parse().map_err(|_| bad(format!("bad architecture `{tok}`")))?;
                        registry.add_architecture(a)?;
                    }
                }
                "steps" => steps = v.trim().parse().map_err(|_| bad(format!("bad steps `{v}`")))?,
                "budget" => budget = v.trim().parse().map_err(bad)?,
                _ => {}
            }
        }
        if registry.len() != model.num_classes() {
            return Err(Error::Config(format!(
                "checkpoint lists {} classes but the model head has {}",
                registry.len(),
                model.num_classes()
            )));
        }
        let lookup = |rel: &str| {
            data.iter()
                .flat_map(|a| a.iter())
                .find(|s| s.key.relative_path() == rel)
                .cloned()
        };
        let mut store = ExemplarStore::from_manifest(&text, registry.len(), budget, lookup)
            .map_err(|(line, detail)| Error::Manifest {
                path: path.clone(),
                line,
                detail,
            })?;
        store.compute_templates(&model)?;
        let mut config = config;
        config.network = model.config().clone();
        config.budget = budget;
        Ok(Learner {
            rng: ChaCha8Rng::seed_from_u64(splitmix64(config.train.seed ^ SHUFFLE_STREAM)),
            config,
            model,
            snapshot: None,
            store,
            registry,
            steps,
        })
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}
