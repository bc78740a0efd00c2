//! Exemplar memory: class bookkeeping, budgeted exemplar sets, class
//! templates and the nearest-mean-of-exemplars rule.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::datagen::{Origin, Sample};
use crate::error::{Error, Result};

/// One class: a (architecture, origin) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassDescriptor {
    /// Dense zero-based index; printed one-based.
    pub id: usize,
    pub arch: usize,
    pub origin: Origin,
}

/// Bijection between (architecture, origin) pairs and dense class indices.
///
/// Every architecture contributes its generated class followed by its real
/// class, so the registry always holds an even number of classes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassRegistry {
    classes: Vec<ClassDescriptor>,
}

impl ClassRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers both classes of `arch`; returns `(gan_class, real_class)`.
    pub fn add_architecture(&mut self, arch: usize) -> Result<(usize, usize)> {
        if self.classes.iter().any(|c| c.arch == arch) {
            return Err(Error::Usage(format!(
                "architecture {arch} is already registered"
            )));
        }
        let g = self.classes.len();
        for (i, origin) in [Origin::Gan, Origin::Real].into_iter().enumerate() {
            self.classes.push(ClassDescriptor {
                id: g + i,
                arch,
                origin,
            });
        }
        Ok((g, g + 1))
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassDescriptor] {
        &self.classes
    }

    pub fn get(&self, class: usize) -> Option<&ClassDescriptor> {
        self.classes.get(class)
    }

    pub fn class_of(&self, arch: usize, origin: Origin) -> Option<usize> {
        self.classes
            .iter()
            .find(|c| c.arch == arch && c.origin == origin)
            .map(|c| c.id)
    }

    pub fn is_gan(&self, class: usize) -> bool {
        self.classes[class].origin == Origin::Gan
    }

    pub fn group(&self, origin: Origin) -> Vec<usize> {
        self.classes
            .iter()
            .filter(|c| c.origin == origin)
            .map(|c| c.id)
            .collect()
    }

    /// Architectures in registration order.
    pub fn architectures(&self) -> Vec<usize> {
        self.classes
            .iter()
            .filter(|c| c.origin == Origin::Gan)
            .map(|c| c.arch)
            .collect()
    }
}

/// Total exemplar budget `M`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    Limited(usize),
    Unlimited,
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Limited(m) => write!(f, "{m}"),
            Budget::Unlimited => f.write_str("inf"),
        }
    }
}

impl FromStr for Budget {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "inf" | "∞" => Ok(Budget::Unlimited),
            other => other
                .parse()
                .map(Budget::Limited)
                .map_err(|_| format!("memory budget must be a non-negative integer or `inf`, got `{other}`")),
        }
    }
}

/// Number of exemplars one class may keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quota {
    Limited(usize),
    Unlimited,
}

impl Quota {
    /// Exemplars actually kept out of `available` candidates.
    pub fn take(self, available: usize) -> usize {
        match self {
            Quota::Limited(m) => m.min(available),
            Quota::Unlimited => available,
        }
    }
}

/// `floor(M / t)`; leftover slots stay unused.
pub fn class_quota(budget: Budget, classes: usize) -> Result<Quota> {
    if classes == 0 {
        return Err(Error::Usage("class quota needs at least one class".into()));
    }
    Ok(match budget {
        Budget::Limited(m) => Quota::Limited(m / classes),
        Budget::Unlimited => Quota::Unlimited,
    })
}

/// Arithmetic mean of feature vectors, accumulated in f64, not renormalized.
pub fn class_mean(features: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = features
        .first()
        .ok_or_else(|| Error::Usage("mean of an empty class".into()))?;
    let mut acc = vec![0.0f64; first.len()];
    for f in features {
        if f.len() != acc.len() {
            return Err(Error::shape(
                "class_mean",
                format!("feature width {} vs {}", f.len(), acc.len()),
            ));
        }
        for (a, &v) in acc.iter_mut().zip(f) {
            *a += v as f64;
        }
    }
    let n = features.len() as f64;
    Ok(acc.into_iter().map(|v| (v / n) as f32).collect())
}

pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Positions of the `m` rows closest to `reference`, nearest first, ties by
/// ascending position.
pub fn nearest_indices(features: &[Vec<f32>], reference: &[f32], m: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = features
        .iter()
        .enumerate()
        .map(|(i, f)| (squared_distance(f, reference), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.truncate(m);
    order.into_iter().map(|(_, i)| i).collect()
}

/// Picks the `m` samples whose features lie closest to the class mean.
pub fn select_exemplars(class_features: &[Vec<f32>], m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Ok(Vec::new());
    }
    let mean = class_mean(class_features)?;
    Ok(nearest_indices(class_features, &mean, m))
}

/// Minimum-distance rule over `(class, template)` pairs; ties go to the
/// smallest class index. `None` when there are no templates.
pub fn classify_nme(feature: &[f32], templates: &[(usize, Vec<f32>)]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (class, t) in templates {
        let d = squared_distance(feature, t);
        best = match best {
            Some((bd, bc)) if bd < d || (bd == d && bc < *class) => Some((bd, bc)),
            _ => Some((d, *class)),
        };
    }
    best.map(|(_, c)| c)
}

/// Anything that maps samples to unit-norm feature vectors.
pub trait FeatureExtractor {
    fn features(&self, samples: &[Arc<Sample>]) -> Result<Vec<Vec<f32>>>;
}

/// Budgeted per-class exemplar sets with cached features and templates.
///
/// Raw samples are kept so features can be recomputed after every model
/// update; the cache is dropped by [`ExemplarStore::invalidate`].
#[derive(Clone, Debug)]
pub struct ExemplarStore {
    budget: Budget,
    sets: Vec<Vec<Arc<Sample>>>,
    cache: Vec<Option<Vec<Vec<f32>>>>,
    templates: Vec<Option<Vec<f32>>>,
}

impl ExemplarStore {
    pub fn new(budget: Budget) -> Self {
        ExemplarStore {
            budget,
            sets: Vec::new(),
            cache: Vec::new(),
            templates: Vec::new(),
        }
    }

    pub fn budget(&self) -> Budget {
        self.budget
    }

    pub fn classes(&self) -> usize {
        self.sets.len()
    }

    pub fn ensure_classes(&mut self, t: usize) {
        while self.sets.len() < t {
            self.sets.push(Vec::new());
            self.cache.push(None);
            self.templates.push(None);
        }
    }

    pub fn exemplars(&self, class: usize) -> &[Arc<Sample>] {
        self.sets.get(class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn count(&self, class: usize) -> usize {
        self.exemplars(class).len()
    }

    pub fn total(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    /// All exemplars with their class, in class order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Arc<Sample>)> {
        self.sets
            .iter()
            .enumerate()
            .flat_map(|(c, s)| s.iter().map(move |x| (c, x)))
    }

    pub fn set_exemplars(&mut self, class: usize, samples: Vec<Arc<Sample>>) {
        self.ensure_classes(class + 1);
        self.sets[class] = samples;
        self.cache[class] = None;
        self.templates[class] = None;
    }

    /// Forgets cached features and templates (call after the model changes).
    pub fn invalidate(&mut self) {
        self.cache.iter_mut().for_each(|c| *c = None);
        self.templates.iter_mut().for_each(|t| *t = None);
    }

    fn class_features(&mut self, class: usize, fx: &dyn FeatureExtractor) -> Result<&[Vec<f32>]> {
        if self.cache[class].is_none() {
            self.cache[class] = Some(fx.features(&self.sets[class])?);
        }
        Ok(self.cache[class].as_deref().unwrap_or(&[]))
    }

    /// Keeps the `new_m` exemplars of `class` closest to its template under
    /// the current features, nearest first; ties by ascending sample index.
    /// Asking for the current size leaves the set as it is.
    pub fn reduce_exemplars(&mut self, class: usize, new_m: usize, fx: &dyn FeatureExtractor) -> Result<()> {
        self.ensure_classes(class + 1);
        let have = self.sets[class].len();
        if new_m > have {
            return Err(Error::Usage(format!(
                "cannot reduce class {} from {have} to {new_m} exemplars",
                class + 1
            )));
        }
        if new_m == have {
            return Ok(());
        }
        if new_m == 0 {
            self.set_exemplars(class, Vec::new());
            return Ok(());
        }
        let features = self.class_features(class, fx)?.to_vec();
        let template = class_mean(&features)?;
        let set = &self.sets[class];
        let mut order: Vec<(f64, usize, usize)> = features
            .iter()
            .enumerate()
            .map(|(i, f)| (squared_distance(f, &template), set[i].key.index, i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let keep: Vec<usize> = order.into_iter().take(new_m).map(|(_, _, i)| i).collect();
        let samples = keep.iter().map(|&i| self.sets[class][i].clone()).collect();
        let kept_features = keep.iter().map(|&i| features[i].clone()).collect();
        self.sets[class] = samples;
        self.cache[class] = Some(kept_features);
        self.templates[class] = None;
        Ok(())
    }

    /// Recomputes every class template with the current features.
    ///
    /// With a zero budget there is nothing to average and no template is
    /// produced. Otherwise a class without exemplars is a configuration error.
    pub fn compute_templates(&mut self, fx: &dyn FeatureExtractor) -> Result<()> {
        if self.budget == Budget::Limited(0) {
            return Ok(());
        }
        for class in 0..self.sets.len() {
            if self.sets[class].is_empty() {
                return Err(Error::Config(format!(
                    "class {} holds no exemplars under budget {}",
                    class + 1,
                    self.budget
                )));
            }
            let features = self.class_features(class, fx)?;
            self.templates[class] = Some(class_mean(features)?);
        }
        Ok(())
    }

    /// `(class, template)` pairs for classes whose template is current.
    pub fn templates(&self) -> Vec<(usize, Vec<f32>)> {
        self.templates
            .iter()
            .enumerate()
            .filter_map(|(c, t)| t.clone().map(|t| (c, t)))
            .collect()
    }

    pub fn template(&self, class: usize) -> Option<&[f32]> {
        self.templates.get(class).and_then(|t| t.as_deref())
    }

    /// `class_id,sample_path` lines with one-based class ids.
    pub fn to_manifest(&self) -> String {
        let mut out = format!("# budget={}\n# class_id,sample_path\n", self.budget);
        for (class, s) in self.iter() {
            out.push_str(&format!("{},{}\n", class + 1, s.key.relative_path()));
        }
        out
    }

    /// Rebuilds a store from [`ExemplarStore::to_manifest`] output.
    pub fn from_manifest(
        text: &str,
        classes: usize,
        budget: Budget,
        lookup: impl Fn(&str) -> Option<Arc<Sample>>,
    ) -> std::result::Result<Self, (usize, String)> {
        let mut store = ExemplarStore::new(budget);
        store.ensure_classes(classes);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((token, path)) = line.split_once(',') else {
                return Err((lineno + 1, "expected `class_id,sample_path`".into()));
            };
            let class = match token.trim().parse::<usize>() {
                Ok(c) if c >= 1 && c <= classes => c - 1,
                _ => return Err((lineno + 1, format!("bad class id `{token}`"))),
            };
            let sample = lookup(path.trim())
                .ok_or_else(|| (lineno + 1, format!("unknown sample `{}`", path.trim())))?;
            store.sets[class].push(sample);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{SampleKey, Split};
    use crate::diffcore::Tensor;

    /// Features are the raw pixels of a 1×1×D image.
    struct Pixels;
    impl FeatureExtractor for Pixels {
        fn features(&self, samples: &[Arc<Sample>]) -> Result<Vec<Vec<f32>>> {
            Ok(samples.iter().map(|s| s.image.data().to_vec()).collect())
        }
    }

    fn sample(index: usize, v: Vec<f32>) -> Arc<Sample> {
        let d = v.len();
        Arc::new(Sample {
            key: SampleKey {
                arch: 0,
                origin: Origin::Gan,
                split: Split::Train,
                index,
            },
            image: Tensor::new(vec![d, 1, 1], v).unwrap(),
        })
    }

    #[test]
    fn registry_pairs_classes_per_architecture() {
        let mut r = ClassRegistry::new();
        assert_eq!(r.add_architecture(3).unwrap(), (0, 1));
        assert_eq!(r.add_architecture(7).unwrap(), (2, 3));
        assert!(r.add_architecture(3).is_err());
        assert_eq!(r.len(), 4);
        assert_eq!(r.group(Origin::Gan), vec![0, 2]);
        assert_eq!(r.group(Origin::Real), vec![1, 3]);
        assert_eq!(r.class_of(7, Origin::Real), Some(3));
        assert_eq!(r.architectures(), vec![3, 7]);
    }

    #[test]
    fn quotas() {
        assert_eq!(class_quota(Budget::Limited(512), 6).unwrap(), Quota::Limited(85));
        assert_eq!(class_quota(Budget::Limited(0), 4).unwrap(), Quota::Limited(0));
        assert_eq!(class_quota(Budget::Unlimited, 10).unwrap(), Quota::Unlimited);
        assert_eq!(Quota::Unlimited.take(17), 17);
        assert_eq!(Quota::Limited(5).take(3), 3);
        assert!(class_quota(Budget::Limited(8), 0).is_err());
    }

    #[test]
    fn budget_parses_inf() {
        assert_eq!("inf".parse::<Budget>().unwrap(), Budget::Unlimited);
        assert_eq!("128".parse::<Budget>().unwrap(), Budget::Limited(128));
        assert!("-1".parse::<Budget>().is_err());
        assert_eq!(Budget::Unlimited.to_string(), "inf");
    }

    #[test]
    fn means() {
        let m = class_mean(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(m, vec![0.5, 0.5]);
        assert_eq!(class_mean(&[vec![0.3, -0.2]]).unwrap(), vec![0.3, -0.2]);
        let v = vec![0.6f32, 0.8];
        assert_eq!(class_mean(&vec![v.clone(); 7]).unwrap(), v);
        assert!(matches!(class_mean(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn collinear_selection_takes_closest() {
        // mean of (0, 1, 2, 3, -6) on one axis is 0: distances 0,1,2,3,6
        let f: Vec<Vec<f32>> = [0.0, 1.0, 2.0, 3.0, -6.0].iter().map(|&x| vec![x]).collect();
        assert_eq!(select_exemplars(&f, 2).unwrap(), vec![0, 1]);
        assert_eq!(select_exemplars(&f, 5).unwrap().len(), 5);
        assert_eq!(select_exemplars(&f, 9).unwrap().len(), 5);
    }

    #[test]
    fn nme_tie_goes_to_smaller_class() {
        let templates = vec![(4, vec![1.0, 0.0]), (1, vec![-1.0, 0.0]), (2, vec![0.0, 1.0])];
        assert_eq!(classify_nme(&[0.0, 0.0], &templates[..2]), Some(1));
        assert_eq!(classify_nme(&[0.0, 1.0], &templates), Some(2));
        assert_eq!(classify_nme(&[0.0, 1.0], &[]), None);
    }

    #[test]
    fn reduction_keeps_closest_to_template() {
        let mut store = ExemplarStore::new(Budget::Limited(10));
        let samples: Vec<_> = [0.0f32, 1.0, 2.0, 3.0, 10.0]
            .iter()
            .enumerate()
            .map(|(i, &x)| sample(i, vec![x]))
            .collect();
        store.set_exemplars(0, samples.clone());
        store.reduce_exemplars(0, 5, &Pixels).unwrap();
        assert_eq!(store.count(0), 5);
        // template 3.2: distances 3.2, 2.2, 1.2, 0.2, 6.8
        store.reduce_exemplars(0, 2, &Pixels).unwrap();
        let kept: Vec<_> = store.exemplars(0).iter().map(|s| s.key.index).collect();
        assert_eq!(kept, vec![3, 2]);
        store.reduce_exemplars(0, 0, &Pixels).unwrap();
        assert_eq!(store.count(0), 0);
        assert!(store.reduce_exemplars(0, 1, &Pixels).is_err());
    }

    #[test]
    fn reduction_ties_follow_sample_index() {
        let mut store = ExemplarStore::new(Budget::Limited(10));
        // stored as 9, 2, 5; template 0, and 9 and 2 are equally far
        let samples = vec![sample(9, vec![1.0]), sample(2, vec![-1.0]), sample(5, vec![0.0])];
        store.set_exemplars(0, samples);
        store.reduce_exemplars(0, 2, &Pixels).unwrap();
        let kept: Vec<_> = store.exemplars(0).iter().map(|s| s.key.index).collect();
        assert_eq!(kept, vec![5, 2]);
    }

    #[test]
    fn templates_average_exemplars() {
        let mut store = ExemplarStore::new(Budget::Limited(4));
        store.set_exemplars(0, vec![sample(0, vec![1.0, 0.0]), sample(1, vec![0.0, 1.0])]);
        store.set_exemplars(1, vec![sample(2, vec![0.2, 0.4])]);
        store.compute_templates(&Pixels).unwrap();
        assert_eq!(store.template(0).unwrap(), &[0.5, 0.5]);
        assert_eq!(store.template(1).unwrap(), &[0.2, 0.4]);
        store.ensure_classes(3);
        assert!(matches!(store.compute_templates(&Pixels), Err(Error::Config(_))));
    }

    #[test]
    fn zero_budget_has_no_templates() {
        let mut store = ExemplarStore::new(Budget::Limited(0));
        store.ensure_classes(4);
        store.compute_templates(&Pixels).unwrap();
        assert!(store.templates().is_empty());
    }

    #[test]
    fn manifest_round_trip() {
        let mut store = ExemplarStore::new(Budget::Limited(4));
        let a = sample(0, vec![1.0]);
        let b = sample(5, vec![2.0]);
        store.set_exemplars(1, vec![a.clone(), b.clone()]);
        let text = store.to_manifest();
        assert!(text.contains("2,arch0/G/train/000005.iltf"));
        let pool = [a, b];
        let back = ExemplarStore::from_manifest(&text, 2, Budget::Limited(4), |p| {
            pool.iter().find(|s| s.key.relative_path() == p).cloned()
        })
        .unwrap();
        assert_eq!(back.count(1), 2);
        assert_eq!(back.count(0), 0);
        let err = ExemplarStore::from_manifest("9,x\n", 2, Budget::Limited(4), |_| None).unwrap_err();
        assert_eq!(err.0, 1);
    }
}
