//! Predictions file: JSON lines, one object per image.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use chils_core::hierarchy::LabelMap;
use chils_core::Trace;

/// A scored label: a subclass entry, or a bare superclass when scores live
/// in superclass space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub superclass: String,
    pub subclass: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub index: usize,
    pub baseline: usize,
    pub chils: usize,
    /// Argmax of the unweighted subclass probabilities (flat union index).
    pub sub_argmax: usize,
    pub sup_probs: Vec<f64>,
    /// Highest reweighted scores, best first, ties by lowest index.
    pub reweighted_top: Vec<(ScoredEntry, f64)>,
}

pub fn records_from_traces(map: &LabelMap, traces: &[Trace], top: usize) -> Vec<PredictionRecord> {
    traces
        .iter()
        .enumerate()
        .map(|(index, t)| {
            let superclass_space = t.predicted_subclass.is_none();
            let mut order: Vec<usize> = (0..t.reweighted.len()).collect();
            order.sort_by(|&a, &b| t.reweighted[b].total_cmp(&t.reweighted[a]).then(a.cmp(&b)));
            let reweighted_top = order
                .into_iter()
                .take(top)
                .map(|i| {
                    let entry = if superclass_space {
                        ScoredEntry {
                            superclass: map.superclasses()[i].clone(),
                            subclass: None,
                        }
                    } else {
                        let e = map.entry(i);
                        ScoredEntry {
                            superclass: map.superclasses()[e.parent].clone(),
                            subclass: Some(e.text),
                        }
                    };
                    (entry, t.reweighted[i])
                })
                .collect();
            PredictionRecord {
                index,
                baseline: t.baseline_superclass,
                chils: t.predicted_superclass,
                sub_argmax: t.sub_argmax,
                sup_probs: t.sup_probs.clone(),
                reweighted_top,
            }
        })
        .collect()
}

pub fn render_predictions(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("prediction serializes"));
        out.push('\n');
    }
    out
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    fs::write(path, render_predictions(records)).with_context(|| format!("writing {}", path.display()))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), n + 1)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_scores_sorted_with_stable_ties() {
        let map = LabelMap::new([("A", vec!["a1", "a2"]), ("B", vec!["b1"])]).unwrap();
        let trace = Trace {
            sup_probs: vec![0.5, 0.5],
            sub_probs: vec![0.2, 0.4, 0.4],
            reweighted: vec![0.1, 0.2, 0.2],
            predicted_superclass: 0,
            predicted_subclass: Some(1),
            sub_argmax: 1,
            baseline_superclass: 0,
        };
        let recs = records_from_traces(&map, &[trace], 5);
        let texts: Vec<_> = recs[0]
            .reweighted_top
            .iter()
            .map(|(e, _)| e.subclass.clone().unwrap())
            .collect();
        assert_eq!(texts, ["a2", "b1", "a1"]);
        assert_eq!(recs[0].reweighted_top[1].0.superclass, "B");
    }

    #[test]
    fn file_round_trips_byte_exactly() {
        let rec = PredictionRecord {
            index: 0,
            baseline: 1,
            chils: 0,
            sub_argmax: 2,
            sup_probs: vec![0.1 + 0.2, 1.0 / 3.0],
            reweighted_top: vec![(
                ScoredEntry {
                    superclass: "A".into(),
                    subclass: None,
                },
                2.0f64.sqrt(),
            )],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        write_predictions(&[rec.clone(), rec], &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let back = read_predictions(&p).unwrap();
        write_predictions(&back, &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes);
    }
}
