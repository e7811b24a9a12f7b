//! Similarity scoring, softmax, and the subclass-space prediction with
//! superclass reweighting.
//!
//! Probabilities are computed in `f64` and then converted to the trace
//! scalar `T`; reweighting products are formed in `T`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::LabelMap;
use crate::prompts::TextReps;
use crate::scalar::{argmax, dot_f64, Real};
use crate::tensorio::EmbeddingBundle;

/// Conventional learned temperature of public open-vocabulary checkpoints.
pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("dimension mismatch: image has {image} values, text rows have {text}")]
    DimensionMismatch { image: usize, text: usize },
    #[error("softmax of an empty vector")]
    EmptyLogits,
    #[error("logit scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("{what}: expected {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("no items to evaluate")]
    Empty,
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// How subclass probabilities are combined with coarse evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReweightVariant {
    /// Each subclass probability times its superclass probability.
    #[default]
    Standard,
    /// Raw subclass probabilities.
    None,
    /// Each subclass probability times the aggregated probability of its
    /// sibling set, in place of the superclass probability.
    SubWithAggSub,
    /// Aggregated subclass probability per superclass times the superclass
    /// probability; scores live in superclass space.
    AggSubWithSup,
}

impl ReweightVariant {
    pub const ALL: [ReweightVariant; 4] = [
        ReweightVariant::Standard,
        ReweightVariant::None,
        ReweightVariant::SubWithAggSub,
        ReweightVariant::AggSubWithSup,
    ];
}

/// Reduction over a superclass's subclass probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    #[default]
    Mean,
    Sum,
}

impl Aggregator {
    fn apply<T: Real>(self, values: &[T]) -> T {
        let mut acc = T::zero();
        for &v in values {
            acc = acc + v;
        }
        match self {
            Aggregator::Sum => acc,
            Aggregator::Mean => acc / T::of(values.len() as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig<T> {
    pub logit_scale: T,
    pub reweight: ReweightVariant,
    pub agg: Aggregator,
}

impl<T: Real> InferenceConfig<T> {
    pub fn new(logit_scale: T, reweight: ReweightVariant, agg: Aggregator) -> Result<Self, EngineError> {
        if !(logit_scale > T::zero() && logit_scale.is_finite()) {
            return Err(EngineError::InvalidScale(logit_scale.as_f64()));
        }
        Ok(Self {
            logit_scale,
            reweight,
            agg,
        })
    }

    pub fn with_reweight(self, reweight: ReweightVariant) -> Self {
        Self { reweight, ..self }
    }
}

impl<T: Real> Default for InferenceConfig<T> {
    fn default() -> Self {
        Self {
            logit_scale: T::of(DEFAULT_LOGIT_SCALE),
            reweight: ReweightVariant::Standard,
            agg: Aggregator::Mean,
        }
    }
}

/// Everything computed for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChilsTrace<T> {
    /// Probabilities over superclasses.
    pub sup_probs: Vec<T>,
    /// Probabilities over the union subclass space.
    pub sub_probs: Vec<T>,
    /// Combined scores; over subclasses, or over superclasses for
    /// [`ReweightVariant::AggSubWithSup`]. Not renormalized.
    pub reweighted: Vec<T>,
    pub predicted_superclass: usize,
    /// Flat subclass index chosen, absent when scores are in superclass space.
    pub predicted_subclass: Option<usize>,
    /// Argmax of the raw subclass probabilities.
    pub sub_argmax: usize,
    /// Prediction from superclass prompts alone.
    pub baseline_superclass: usize,
}

/// `scale · ⟨image, text_j⟩` for every text row.
pub fn similarity_logits<T: Real>(
    image: &[f32],
    texts: &TextReps,
    logit_scale: T,
) -> Result<Vec<T>, EngineError> {
    if image.len() != texts.dim() {
        return Err(EngineError::DimensionMismatch {
            image: image.len(),
            text: texts.dim(),
        });
    }
    let scale = logit_scale.as_f64();
    Ok(texts.rows().map(|row| T::of(scale * dot_f64(image, row))).collect())
}

fn softmax_f64<T: Real>(logits: &[T]) -> Result<Vec<f64>, EngineError> {
    if logits.is_empty() {
        return Err(EngineError::EmptyLogits);
    }
    let max = logits
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let mut total = 0.0f64;
    for &v in &out {
        total += v;
    }
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Numerically stable softmax, evaluated in `f64`.
pub fn softmax<T: Real>(logits: &[T]) -> Result<Vec<T>, EngineError> {
    Ok(softmax_f64(logits)?.into_iter().map(T::of).collect())
}

/// Class probabilities for an image; caption-level probabilities are summed
/// per owning class when several rows share a class.
fn class_probs<T: Real>(image: &[f32], reps: &TextReps, scale: T) -> Result<(Vec<T>, usize), EngineError> {
    let row_probs = softmax_f64(&similarity_logits(image, reps, scale)?)?;
    if reps.is_one_per_class() {
        let pred = argmax(&row_probs).expect("non-empty");
        return Ok((row_probs.into_iter().map(T::of).collect(), pred));
    }
    let mut probs = vec![0.0f64; reps.num_classes()];
    for (&owner, &p) in reps.owner().iter().zip(&row_probs) {
        probs[owner] += p;
    }
    let pred = reps.owner()[argmax(&row_probs).expect("non-empty")];
    Ok((probs.into_iter().map(T::of).collect(), pred))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselinePrediction<T> {
    pub class: usize,
    pub probs: Vec<T>,
}

/// Standard zero-shot prediction over class representations.
pub fn predict_baseline<T: Real>(
    image: &[f32],
    class_reps: &TextReps,
    config: &InferenceConfig<T>,
) -> Result<BaselinePrediction<T>, EngineError> {
    let (probs, class) = class_probs(image, class_reps, config.logit_scale)?;
    Ok(BaselinePrediction { class, probs })
}

/// Combines subclass and superclass probabilities according to `variant`.
pub fn reweight<T: Real>(
    sub_probs: &[T],
    sup_probs: &[T],
    map: &LabelMap,
    variant: ReweightVariant,
    agg: Aggregator,
) -> Result<Vec<T>, EngineError> {
    if sub_probs.len() != map.num_subclasses() {
        return Err(EngineError::LengthMismatch {
            what: "subclass probabilities",
            expected: map.num_subclasses(),
            found: sub_probs.len(),
        });
    }
    if sup_probs.len() != map.num_superclasses() {
        return Err(EngineError::LengthMismatch {
            what: "superclass probabilities",
            expected: map.num_superclasses(),
            found: sup_probs.len(),
        });
    }
    let k = map.num_superclasses();
    let scores = match variant {
        ReweightVariant::None => sub_probs.to_vec(),
        ReweightVariant::Standard => {
            let mut out = sub_probs.to_vec();
            for (i, &sup) in sup_probs.iter().enumerate() {
                for s in &mut out[map.range(i)] {
                    *s = *s * sup;
                }
            }
            out
        }
        ReweightVariant::SubWithAggSub => {
            let mut out = sub_probs.to_vec();
            for i in 0..k {
                let range = map.range(i);
                let mass = agg.apply(&sub_probs[range.clone()]);
                for s in &mut out[range] {
                    *s = *s * mass;
                }
            }
            out
        }
        ReweightVariant::AggSubWithSup => (0..k)
            .map(|i| agg.apply(&sub_probs[map.range(i)]) * sup_probs[i])
            .collect(),
    };
    Ok(scores)
}

/// Runs the full subclass-space prediction for one image.
pub fn predict_chils<T: Real>(
    image: &[f32],
    map: &LabelMap,
    text_reps_sub: &TextReps,
    text_reps_sup: &TextReps,
    config: &InferenceConfig<T>,
) -> Result<ChilsTrace<T>, EngineError> {
    check_alignment(map, text_reps_sub, text_reps_sup)?;
    let (sub_probs, _) = class_probs(image, text_reps_sub, config.logit_scale)?;
    let (sup_probs, baseline_superclass) = class_probs(image, text_reps_sup, config.logit_scale)?;
    let reweighted = reweight(&sub_probs, &sup_probs, map, config.reweight, config.agg)?;
    let best = argmax(&reweighted).expect("non-empty");
    let (predicted_superclass, predicted_subclass) = match config.reweight {
        ReweightVariant::AggSubWithSup => (best, None),
        _ => (map.parent_of_flat(best), Some(best)),
    };
    let sub_argmax = argmax(&sub_probs).expect("non-empty");
    Ok(ChilsTrace {
        sup_probs,
        sub_probs,
        reweighted,
        predicted_superclass,
        predicted_subclass,
        sub_argmax,
        baseline_superclass,
    })
}

fn check_alignment(map: &LabelMap, sub: &TextReps, sup: &TextReps) -> Result<(), EngineError> {
    if sub.num_classes() != map.num_subclasses() {
        return Err(EngineError::LengthMismatch {
            what: "subclass text representations",
            expected: map.num_subclasses(),
            found: sub.num_classes(),
        });
    }
    if sup.num_classes() != map.num_superclasses() {
        return Err(EngineError::LengthMismatch {
            what: "superclass text representations",
            expected: map.num_superclasses(),
            found: sup.num_classes(),
        });
    }
    if sub.dim() != sup.dim() {
        return Err(EngineError::DimensionMismatch {
            image: sup.dim(),
            text: sub.dim(),
        });
    }
    Ok(())
}

/// Fraction of items where either the baseline or the unweighted subclass
/// prediction is correct.
pub fn best_possible(
    baseline_preds: &[usize],
    chils_norw_preds: &[usize],
    labels: &[usize],
) -> Result<f64, EngineError> {
    if baseline_preds.len() != labels.len() || chils_norw_preds.len() != labels.len() {
        return Err(EngineError::LengthMismatch {
            what: "prediction lists",
            expected: labels.len(),
            found: if baseline_preds.len() != labels.len() {
                baseline_preds.len()
            } else {
                chils_norw_preds.len()
            },
        });
    }
    if labels.is_empty() {
        return Err(EngineError::Empty);
    }
    let hits = labels
        .iter()
        .zip(baseline_preds.iter().zip(chils_norw_preds))
        .filter(|(y, (b, c))| b == y || c == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// A label map bound to its text representations and a configuration.
#[derive(Debug, Clone)]
pub struct Classifier<'a, T> {
    map: &'a LabelMap,
    sub: &'a TextReps,
    sup: &'a TextReps,
    config: InferenceConfig<T>,
}

impl<'a, T: Real> Classifier<'a, T> {
    pub fn new(
        map: &'a LabelMap,
        sub: &'a TextReps,
        sup: &'a TextReps,
        config: InferenceConfig<T>,
    ) -> Result<Self, EngineError> {
        check_alignment(map, sub, sup)?;
        Ok(Self { map, sub, sup, config })
    }

    pub fn config(&self) -> &InferenceConfig<T> {
        &self.config
    }

    pub fn map(&self) -> &LabelMap {
        self.map
    }

    pub fn trace(&self, image: &[f32]) -> Result<ChilsTrace<T>, EngineError> {
        predict_chils(image, self.map, self.sub, self.sup, &self.config)
    }

    /// Traces every row of `images` on a pool of `threads` workers. Output
    /// order follows row order and does not depend on `threads`.
    pub fn trace_all(&self, images: &EmbeddingBundle, threads: usize) -> Result<Vec<ChilsTrace<T>>, EngineError> {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| EngineError::ThreadPool(e.to_string()))?;
        let rows: Vec<&[f32]> = images.rows().collect();
        pool.install(|| rows.par_iter().map(|row| self.trace(row)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reps(dim: usize, rows: &[&[f32]]) -> TextReps {
        TextReps::from_parts(dim, rows.concat(), (0..rows.len()).collect())
    }

    fn cfg(scale: f64, variant: ReweightVariant, agg: Aggregator) -> InferenceConfig<f64> {
        InferenceConfig::new(scale, variant, agg).unwrap()
    }

    #[test]
    fn logits_examples() {
        let t = reps(2, &[&[1., 0.], &[0., 1.]]);
        assert_eq!(similarity_logits(&[1., 0.], &t, 1.0f64).unwrap(), vec![1.0, 0.0]);
        assert_eq!(similarity_logits(&[1., 0.], &t, 100.0f64).unwrap(), vec![100.0, 0.0]);
        let one = reps(2, &[&[0.8, 0.6]]);
        let v = similarity_logits(&[0.6, 0.8], &one, 1.0f64).unwrap();
        assert!((v[0] - 0.96).abs() < 1e-7);
        assert!(matches!(
            similarity_logits(&[1., 0., 0.], &t, 1.0f64),
            Err(EngineError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[2.5f64, 2.5, 2.5]).unwrap();
        for p in &u {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[0.0f64, 2f64.ln()]).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-15);
        let big = softmax(&[1000.0f64, 0.0]).unwrap();
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big[0] - 1.0).abs() < 1e-12 && big[1] < 1e-300);
        assert!(matches!(softmax::<f64>(&[]), Err(EngineError::EmptyLogits)));
    }

    #[test]
    fn softmax_f32_sums_to_one() {
        let p = softmax(&[1.0f32, -3.0, 0.25, 7.0]).unwrap();
        let s: f32 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn config_rejects_bad_scale() {
        assert!(InferenceConfig::new(0.0f64, ReweightVariant::Standard, Aggregator::Mean).is_err());
        assert!(InferenceConfig::new(f64::NAN, ReweightVariant::Standard, Aggregator::Mean).is_err());
        assert_eq!(InferenceConfig::<f64>::default().logit_scale, 100.0);
    }

    #[test]
    fn baseline_examples() {
        let t = reps(2, &[&[1., 0.], &[0., 1.]]);
        let c = cfg(100.0, ReweightVariant::Standard, Aggregator::Mean);
        assert_eq!(predict_baseline(&[1., 0.], &t, &c).unwrap().class, 0);
        let h = 0.5f32.sqrt();
        assert_eq!(predict_baseline(&[h, h], &t, &c).unwrap().class, 0);

        // logits 0.1, 0.9, 0.3 at unit scale
        let t3 = reps(3, &[&[0.1, 0., 0.], &[0.9, 0., 0.], &[0.3, 0., 0.]]);
        let c1 = cfg(1.0, ReweightVariant::Standard, Aggregator::Mean);
        let p = predict_baseline(&[1., 0., 0.], &t3, &c1).unwrap();
        assert_eq!(p.class, 1);
    }

    #[test]
    fn set_based_baseline_maps_caption_to_owner() {
        // class 0 owns rows 0,1; class 1 owns row 2
        let t = TextReps::from_parts(2, vec![0., 1., 0.6, 0.8, 1., 0.], vec![0, 0, 1]);
        let c = cfg(10.0, ReweightVariant::Standard, Aggregator::Mean);
        let p = predict_baseline(&[0.8, 0.6], &t, &c).unwrap();
        assert_eq!(p.class, 0);
        assert_eq!(p.probs.len(), 2);
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn ab_map() -> LabelMap {
        LabelMap::new([("A", vec!["a1", "a2"]), ("B", vec!["b1"])]).unwrap()
    }

    #[test]
    fn standard_reweight_example() {
        let map = LabelMap::identity(["A", "B"]).unwrap();
        let s = reweight(&[0.6f64, 0.4], &[0.3, 0.7], &map, ReweightVariant::Standard, Aggregator::Mean)
            .unwrap();
        assert!((s[0] - 0.18).abs() < 1e-15 && (s[1] - 0.28).abs() < 1e-15);
        assert_eq!(argmax(&s), Some(1));
    }

    #[test]
    fn uniform_superclass_scales_scores() {
        let map = ab_map();
        let sub = [0.1f64, 0.6, 0.3];
        let s = reweight(&sub, &[0.5, 0.5], &map, ReweightVariant::Standard, Aggregator::Mean).unwrap();
        for (x, y) in s.iter().zip(sub) {
            assert_eq!(*x, y * 0.5);
        }
        assert_eq!(argmax(&s), argmax(&sub));
    }

    #[test]
    fn superclass_space_sum_tie() {
        let s = reweight(
            &[0.2f64, 0.3, 0.5],
            &[0.5, 0.5],
            &ab_map(),
            ReweightVariant::AggSubWithSup,
            Aggregator::Sum,
        )
        .unwrap();
        assert_eq!(s, vec![0.25, 0.25]);
        assert_eq!(argmax(&s), Some(0));
    }

    #[test]
    fn sibling_mass_variant() {
        let s = reweight(
            &[0.2f64, 0.3, 0.5],
            &[0.9, 0.1],
            &ab_map(),
            ReweightVariant::SubWithAggSub,
            Aggregator::Mean,
        )
        .unwrap();
        assert_eq!(s, vec![0.2 * 0.25, 0.3 * 0.25, 0.5 * 0.5]);
        let none = reweight(&[0.2f64, 0.3, 0.5], &[0.9, 0.1], &ab_map(), ReweightVariant::None, Aggregator::Mean)
            .unwrap();
        assert_eq!(none, vec![0.2, 0.3, 0.5]);
    }

    #[test]
    fn reweight_length_errors() {
        let e = reweight(&[0.5f64, 0.5], &[1.0, 0.0], &ab_map(), ReweightVariant::Standard, Aggregator::Mean);
        assert!(matches!(e, Err(EngineError::LengthMismatch { .. })));
        let e = reweight(&[0.2f64, 0.3, 0.5], &[1.0], &ab_map(), ReweightVariant::Standard, Aggregator::Mean);
        assert!(matches!(e, Err(EngineError::LengthMismatch { .. })));
    }

    #[test]
    fn identity_map_matches_baseline() {
        let map = LabelMap::identity(["x", "y", "z"]).unwrap();
        let t = reps(3, &[&[1., 0., 0.], &[0., 1., 0.], &[0., 0., 1.]]);
        let c = cfg(100.0, ReweightVariant::Standard, Aggregator::Mean);
        for img in [[0.9f32, 0.3, 0.1], [0.1, 0.2, 0.97], [0.5, 0.5, 0.0]] {
            let tr = predict_chils(&img, &map, &t, &t, &c).unwrap();
            assert_eq!(tr.predicted_superclass, tr.baseline_superclass);
            assert_eq!(tr.predicted_subclass, Some(tr.predicted_superclass));
        }
    }

    #[test]
    fn certain_superclass_dominates() {
        let map = ab_map();
        let probs = reweight(&[0.05f64, 0.05, 0.9], &[1.0, 0.0], &map, ReweightVariant::Standard, Aggregator::Mean)
            .unwrap();
        assert_eq!(map.parent_of_flat(argmax(&probs).unwrap()), 0);
    }

    #[test]
    fn trace_alignment_errors() {
        let map = ab_map();
        let two = reps(2, &[&[1., 0.], &[0., 1.]]);
        let c = cfg(1.0, ReweightVariant::Standard, Aggregator::Mean);
        assert!(matches!(
            predict_chils(&[1., 0.], &map, &two, &two, &c),
            Err(EngineError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn best_possible_examples() {
        let y = [0, 1, 2, 3];
        assert_eq!(best_possible(&y, &y, &y).unwrap(), 1.0);
        assert_eq!(best_possible(&[0, 1, 9, 9], &[9, 9, 2, 3], &y).unwrap(), 1.0);
        assert_eq!(best_possible(&[0, 1, 9, 9], &[9, 1, 2, 9], &y).unwrap(), 0.75);
        assert!(best_possible(&[0], &[0, 1], &[0, 1]).is_err());
        assert!(matches!(best_possible(&[], &[], &[]), Err(EngineError::Empty)));
    }

    #[test]
    fn trace_all_order_independent_of_threads() {
        let map = ab_map();
        let sub = reps(3, &[&[1., 0., 0.], &[0., 1., 0.], &[0., 0., 1.]]);
        let h = 0.5f32.sqrt();
        let sup = reps(3, &[&[h, h, 0.], &[0., 0., 1.]]);
        let mut data = Vec::new();
        for i in 0..40 {
            let a = (i as f32 * 0.37).sin();
            let b = (i as f32 * 0.11).cos();
            let n = (a * a + b * b + 0.04).sqrt();
            data.extend([a / n, b / n, 0.2 / n]);
        }
        let names = (0..40).map(|i| format!("i{i}")).collect();
        let images = EmbeddingBundle::new(3, names, data, true).unwrap();
        let clf = Classifier::new(&map, &sub, &sup, InferenceConfig::<f64>::default()).unwrap();
        let one = clf.trace_all(&images, 1).unwrap();
        let many = clf.trace_all(&images, 8).unwrap();
        assert_eq!(one, many);
        assert_eq!(one.len(), 40);
    }
}
