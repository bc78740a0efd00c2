//! Feature extractor, growing classification head and optional detector head.
//!
//! The backbone is a stack of stride-2 3×3 convolutions with ReLU, global
//! average pooling and one affine map to `feature_dim`, followed by L2
//! normalization. The head produces one independent sigmoid score per class.

use std::fmt;
use std::fs;
use std::ops::Deref;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::datagen::{read_tensor, write_tensor, Sample};
use crate::diffcore::{ParamId, ParameterSet, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::memory::FeatureExtractor;

/// Guards the feature normalization against zero-norm activations.
pub const FEATURE_EPS: f64 = 1e-8;

/// Training objective family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Rehearsal plus distillation.
    BaseIcarl,
    /// Adds a separate real/generated detector head with its own loss.
    MtMc,
    /// Adds a group binary term over the class scores.
    MtSc,
    /// Classification loss on new data only.
    Finetune,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::BaseIcarl,
        Variant::MtMc,
        Variant::MtSc,
        Variant::Finetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaseIcarl => "base_icarl",
            Variant::MtMc => "mt_mc",
            Variant::MtSc => "mt_sc",
            Variant::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| {
                format!("unknown variant `{s}` (expected base_icarl, mt_mc, mt_sc or finetune)")
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Pixels per side of the network input.
    pub input_size: usize,
    pub channels: usize,
    pub feature_dim: usize,
    /// Each stage halves the spatial size.
    pub conv_stages: usize,
    /// Output channels of the first stage; doubled by every further stage.
    pub conv_width: usize,
    pub variant: Variant,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: 32,
            channels: 3,
            feature_dim: 64,
            conv_stages: 2,
            conv_width: 16,
            variant: Variant::MtSc,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_stages == 0 || self.conv_stages > 8 {
            return Err(Error::Config(format!(
                "conv_stages must be in 1..=8, got {}",
                self.conv_stages
            )));
        }
        let step = 1usize << self.conv_stages;
        if self.input_size == 0 || self.input_size % step != 0 {
            return Err(Error::Config(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size, self.conv_stages
            )));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("feature_dim must be at least 2".into()));
        }
        if self.channels == 0 || self.conv_width == 0 {
            return Err(Error::Config("channels and conv_width must be positive".into()));
        }
        Ok(())
    }

    fn stage_width(&self, stage: usize) -> usize {
        self.conv_width << stage
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// Unit-norm embeddings `[N, D]`.
    pub features: Var,
    /// Head logits `[N, t]`.
    pub logits: Var,
    /// Per-class sigmoid scores `[N, t]`.
    pub scores: Var,
    /// Detector probability `[N, 1]`, multi-classifier variant only.
    pub detector: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T: Real = f32> {
    config: NetworkConfig,
    params: ParameterSet<T>,
    conv: Vec<(ParamId, ParamId)>,
    projection: (ParamId, ParamId),
    head: (ParamId, ParamId),
    detector: Option<(ParamId, ParamId)>,
    classes: usize,
}

fn glorot<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-limit..=limit)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl<T: Real> ModelState<T> {
    /// Fresh model with `classes` zero-initialized head rows.
    pub fn new(config: NetworkConfig, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        let mut conv = Vec::with_capacity(config.conv_stages);
        let mut in_ch = config.channels;
        for stage in 0..config.conv_stages {
            let out_ch = config.stage_width(stage);
            let w = glorot(rng, &[out_ch, in_ch, 3, 3], in_ch * 9, out_ch * 9);
            let wid = params.add(format!("conv{stage}.weight"), w)?;
            let bid = params.add(format!("conv{stage}.bias"), Tensor::zeros(&[out_ch]))?;
            conv.push((wid, bid));
            in_ch = out_ch;
        }
        let d = config.feature_dim;
        let pw = glorot(rng, &[d, in_ch], in_ch, d);
        let projection = (
            params.add("proj.weight", pw)?,
            params.add("proj.bias", Tensor::zeros(&[d]))?,
        );
        let head = (
            params.add("head.weight", Tensor::zeros(&[classes, d]))?,
            params.add("head.bias", Tensor::zeros(&[classes]))?,
        );
        let detector = if config.variant == Variant::MtMc {
            Some((
                params.add("detector.weight", Tensor::zeros(&[1, d]))?,
                params.add("detector.bias", Tensor::zeros(&[1]))?,
            ))
        } else {
            None
        };
        Ok(ModelState {
            config,
            params,
            conv,
            projection,
            head,
            detector,
            classes,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        self.head
    }

    pub fn detector_ids(&self) -> Option<(ParamId, ParamId)> {
        self.detector
    }

    pub fn is_finite(&self) -> bool {
        self.params.is_finite()
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let s = batch.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.channels || s[2] != c.input_size || s[3] != c.input_size {
            return Err(Error::shape(
                "input",
                format!(
                    "expected [N, {}, {}, {}], got {s:?}",
                    c.channels, c.input_size, c.input_size
                ),
            ));
        }
        Ok(())
    }

    /// Records the full forward pass on `tape`, which must be open on this
    /// model's parameters.
    pub fn forward(&self, tape: &mut Tape<'_, T>, batch: Tensor<T>) -> Result<Outputs> {
        self.check_batch(&batch)?;
        let mut x = tape.input(batch);
        for &(w, b) in &self.conv {
            let (w, b) = (tape.param(w), tape.param(b));
            let y = tape.conv2d(x, w, b, 2, 1)?;
            x = tape.relu(y);
        }
        let pooled = tape.global_avg_pool(x)?;
        let (pw, pb) = (tape.param(self.projection.0), tape.param(self.projection.1));
        let embedded = tape.affine(pooled, pw, pb)?;
        let features = tape.l2_normalize_rows(embedded, FEATURE_EPS)?;
        let (hw, hb) = (tape.param(self.head.0), tape.param(self.head.1));
        let logits = tape.affine(features, hw, hb)?;
        let scores = tape.sigmoid(logits);
        let detector = match self.detector {
            Some((dw, db)) => {
                let (dw, db) = (tape.param(dw), tape.param(db));
                let z = tape.affine(features, dw, db)?;
                Some(tape.sigmoid(z))
            }
            None => None,
        };
        Ok(Outputs {
            features,
            logits,
            scores,
            detector,
        })
    }

    /// Unit-norm features `[N, D]`.
    pub fn extract_features(&self, batch: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, batch)?;
        Ok(tape.value(out.features).clone())
    }

    /// `(logits, sigmoid scores)`, both `[N, t]`.
    pub fn class_scores(&self, batch: Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, batch)?;
        Ok((tape.value(out.logits).clone(), tape.value(out.scores).clone()))
    }

    /// Detector probabilities `[N, 1]`.
    pub fn detector_score(&self, batch: Tensor<T>) -> Result<Tensor<T>> {
        if self.detector.is_none() {
            return Err(Error::Usage(format!(
                "variant {} has no detector head",
                self.config.variant
            )));
        }
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, batch)?;
        let d = out.detector.expect("detector present");
        Ok(tape.value(d).clone())
    }

    /// Appends `n_new` zero rows to the head so existing logits are unchanged
    /// and new classes start at score 0.5.
    pub fn expand_head(&mut self, n_new: usize) -> Result<()> {
        if n_new == 0 {
            return Err(Error::Usage("expand_head needs at least one new class".into()));
        }
        let d = self.config.feature_dim;
        let t = self.classes + n_new;
        let mut w = self.params.value(self.head.0).data().to_vec();
        w.resize(t * d, T::zero());
        let mut b = self.params.value(self.head.1).data().to_vec();
        b.resize(t, T::zero());
        self.params.replace(self.head.0, Tensor::new(vec![t, d], w)?);
        self.params.replace(self.head.1, Tensor::new(vec![t], b)?);
        self.classes = t;
        Ok(())
    }

    /// Frozen copy used as the previous classifier during an update.
    pub fn snapshot(&self) -> ModelSnapshot<T> {
        ModelSnapshot(Arc::new(self.clone()))
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self.params.cast(),
            conv: self.conv.clone(),
            projection: self.projection,
            head: self.head,
            detector: self.detector,
            classes: self.classes,
        }
    }
}

/// Immutable, cheaply shareable copy of a [`ModelState`].
#[derive(Clone, Debug)]
pub struct ModelSnapshot<T: Real = f32>(Arc<ModelState<T>>);

impl<T: Real> Deref for ModelSnapshot<T> {
    type Target = ModelState<T>;
    fn deref(&self) -> &ModelState<T> {
        &self.0
    }
}

/// Stacks sample images into an `[N, C, H, W]` batch.
pub fn batch_of(samples: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    Tensor::stack(samples)
}

/// Rows of a 2-D tensor as owned vectors.
pub fn rows_of(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Evaluation chunk size for inference passes.
pub const EVAL_CHUNK: usize = 256;

impl ModelState<f32> {
    /// Features for any number of samples, center-cropped to the input size.
    pub fn features_of(&self, samples: &[Arc<Sample>]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let batch = self.prepare(chunk)?;
            out.extend(rows_of(&self.extract_features(batch)?));
        }
        Ok(out)
    }

    /// Center-cropped input batch for evaluation.
    pub fn prepare(&self, samples: &[Arc<Sample>]) -> Result<Tensor<f32>> {
        let size = self.config.input_size;
        let crops = samples
            .iter()
            .map(|s| crate::datagen::center_crop(&s.image, size))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<f32>> = crops.iter().collect();
        batch_of(&refs)
    }

    /// Writes every parameter as a tensor file plus a manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let c = &self.config;
        let mut manifest = format!(
            "# input_size={}\n# channels={}\n# feature_dim={}\n# conv_stages={}\n# conv_width={}\n# variant={}\n# classes={}\n# name,relative_path\n",
            c.input_size, c.channels, c.feature_dim, c.conv_stages, c.conv_width, c.variant, self.classes
        );
        for id in self.params.ids() {
            let name = self.params.name(id);
            let rel = format!("params/{name}.iltf");
            write_tensor(&dir.join(&rel), self.params.value(id))?;
            manifest.push_str(&format!("{name},{rel}\n"));
        }
        let path = dir.join("model.csv");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    /// Restores a model written by [`ModelState::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |line: usize, detail: String| Error::Manifest {
            path: path.clone(),
            line,
            detail,
        };
        let mut config = NetworkConfig::default();
        let mut classes = 0usize;
        let mut tensors = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if let Some(meta) = line.strip_prefix('#') {
                let Some((k, v)) = meta.split_once('=') else { continue };
                let (k, v) = (k.trim(), v.trim());
                let num = || v.parse::<usize>().map_err(|_| bad(i + 1, format!("bad value `{v}` for {k}")));
                match k {
                    "input_size" => config.input_size = num()?,
                    "channels" => config.channels = num()?,
                    "feature_dim" => config.feature_dim = num()?,
                    "conv_stages" => config.conv_stages = num()?,
                    "conv_width" => config.conv_width = num()?,
                    "classes" => classes = num()?,
                    "variant" => config.variant = v.parse().map_err(|e| bad(i + 1, e))?,
                    _ => return Err(bad(i + 1, format!("unknown key `{k}`"))),
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let Some((name, rel)) = line.split_once(',') else {
                return Err(bad(i + 1, "expected `name,relative_path`".into()));
            };
            tensors.push((i + 1, name.trim().to_string(), rel.trim().to_string()));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = ModelState::new(config, classes, &mut rng)?;
        for (line, name, rel) in tensors {
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| bad(line, format!("unknown parameter `{name}`")))?;
            let t = read_tensor(&dir.join(&rel))?;
            if t.shape() != model.params.value(id).shape() {
                return Err(bad(
                    line,
                    format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        model.params.value(id).shape()
                    ),
                ));
            }
            model.params.replace(id, t);
        }
        Ok(model)
    }
}

impl FeatureExtractor for ModelState<f32> {
    fn features(&self, samples: &[Arc<Sample>]) -> Result<Vec<Vec<f32>>> {
        self.features_of(samples)
    }
}
