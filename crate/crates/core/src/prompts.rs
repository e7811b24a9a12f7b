//! Caption templates and per-class text representations.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{dot_f64, norm_f64};
use crate::tensorio::EmbeddingBundle;

pub const PLACEHOLDER: &str = "{}";
/// Marker inside a template replaced by the prompt set's context token.
pub const CONTEXT_MARKER: &str = "[context]";
/// Conventional single template.
pub const DEFAULT_TEMPLATE: &str = "A photo of a {}.";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed prompt set {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("template {template:?} must contain exactly one {{}} placeholder, found {found}")]
    Placeholder { template: String, found: usize },
    #[error("prompt set has no templates")]
    NoTemplates,
    #[error("template {0:?} uses [context] but the prompt set has no context")]
    MissingContext(String),
    #[error("expected {expected} caption rows, bundle has {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("caption rows must be unit-normalized")]
    NotNormalized,
    #[error("degenerate mean for class {0}: prompt embeddings cancel out")]
    DegenerateMean(usize),
    #[error("no text embedding named {0:?}")]
    MissingText(String),
}

/// How per-caption embeddings are turned into class representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// One vector per class: the (re-normalized) mean of its caption vectors.
    #[default]
    LinearAverage,
    /// Every caption vector kept, tagged with its owning class.
    SetBased,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub templates: Vec<String>,
    #[serde(default)]
    pub context: Option<String>,
}

impl PromptSet {
    pub fn new(templates: Vec<String>, context: Option<String>) -> Result<Self, PromptError> {
        let set = Self { templates, context };
        set.validate()?;
        Ok(set)
    }

    /// The single default template, no context.
    pub fn single() -> Self {
        Self {
            templates: vec![DEFAULT_TEMPLATE.to_string()],
            context: None,
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.templates.is_empty() {
            return Err(PromptError::NoTemplates);
        }
        for t in &self.templates {
            check_template(t)?;
            if t.contains(CONTEXT_MARKER) && self.context.is_none() {
                return Err(PromptError::MissingContext(t.clone()));
            }
        }
        Ok(())
    }

    /// Templates with the context marker filled in.
    pub fn resolved_templates(&self) -> Vec<String> {
        self.templates
            .iter()
            .map(|t| match &self.context {
                Some(ctx) => t.replace(CONTEXT_MARKER, ctx),
                None => t.clone(),
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("prompt set serializes");
        s.push('\n');
        s
    }
}

pub fn load_prompt_set(path: impl AsRef<Path>) -> Result<PromptSet, PromptError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| PromptError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let set: PromptSet = serde_json::from_str(&text).map_err(|e| PromptError::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    set.validate()?;
    Ok(set)
}

pub fn save_prompt_set(set: &PromptSet, path: impl AsRef<Path>) -> Result<(), PromptError> {
    let path = path.as_ref();
    fs::write(path, set.to_json()).map_err(|source| PromptError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn check_template(template: &str) -> Result<(), PromptError> {
    let found = template.matches(PLACEHOLDER).count();
    if found != 1 {
        return Err(PromptError::Placeholder {
            template: template.to_string(),
            found,
        });
    }
    Ok(())
}

/// T(·) for one template: substitutes the class name into the placeholder.
pub fn render_prompt(template: &str, class_name: &str) -> Result<String, PromptError> {
    check_template(template)?;
    Ok(template.replacen(PLACEHOLDER, class_name, 1))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedCaption {
    pub class_index: usize,
    pub prompt_index: usize,
    pub caption: String,
}

/// Every class rendered through every template, class-major.
pub fn render_all<S: AsRef<str>>(
    prompt_set: &PromptSet,
    class_names: &[S],
) -> Result<Vec<RenderedCaption>, PromptError> {
    prompt_set.validate()?;
    let templates = prompt_set.resolved_templates();
    let mut out = Vec::with_capacity(class_names.len() * templates.len());
    for (class_index, name) in class_names.iter().enumerate() {
        for (prompt_index, t) in templates.iter().enumerate() {
            out.push(RenderedCaption {
                class_index,
                prompt_index,
                caption: render_prompt(t, name.as_ref())?,
            });
        }
    }
    Ok(out)
}

/// Text vectors scored against an image, each owned by one class.
///
/// With [`PromptMode::LinearAverage`] there is exactly one row per class and
/// `owner[i] == i`; with [`PromptMode::SetBased`] several rows share a class.
#[derive(Debug, Clone, PartialEq)]
pub struct TextReps {
    dim: usize,
    data: Vec<f32>,
    owner: Vec<usize>,
    n_classes: usize,
}

impl TextReps {
    /// Rows of `bundle` as one representation per class, in bundle order.
    pub fn from_bundle(bundle: &EmbeddingBundle) -> Self {
        Self {
            dim: bundle.dim(),
            data: bundle.as_slice().to_vec(),
            owner: (0..bundle.count()).collect(),
            n_classes: bundle.count(),
        }
    }

    /// Builds representations from raw rows and owners. `owner` must be
    /// non-decreasing, start at 0 and cover every class.
    pub fn from_parts(dim: usize, data: Vec<f32>, owner: Vec<usize>) -> Self {
        assert_eq!(data.len(), owner.len() * dim, "rows and owners disagree");
        let n_classes = owner.last().map_or(0, |&o| o + 1);
        Self {
            dim,
            data,
            owner,
            n_classes,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_rows(&self) -> usize {
        self.owner.len()
    }

    pub fn num_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn owner(&self) -> &[usize] {
        &self.owner
    }

    /// True when every class has exactly one row.
    pub fn is_one_per_class(&self) -> bool {
        self.owner.len() == self.n_classes
    }

    /// Looks up each class's captions by name in a bundle of caption
    /// embeddings and aggregates them. Duplicate captions share one row.
    pub fn align<S: AsRef<str>>(
        bundle: &EmbeddingBundle,
        class_names: &[S],
        prompt_set: Option<&PromptSet>,
        mode: PromptMode,
        renormalize_mean: bool,
    ) -> Result<Self, PromptError> {
        let index: HashMap<&str, usize> = bundle
            .names()
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let (captions, n_templates) = match prompt_set {
            Some(set) => (
                render_all(set, class_names)?
                    .into_iter()
                    .map(|c| c.caption)
                    .collect::<Vec<_>>(),
                set.templates.len(),
            ),
            None => (class_names.iter().map(|n| n.as_ref().to_string()).collect(), 1),
        };
        let mut data = Vec::with_capacity(captions.len() * bundle.dim());
        let mut names = Vec::with_capacity(captions.len());
        for (i, caption) in captions.iter().enumerate() {
            let row = *index
                .get(caption.as_str())
                .ok_or_else(|| PromptError::MissingText(caption.clone()))?;
            data.extend_from_slice(bundle.row(row));
            // captions repeat when texts repeat; keep bundle names unique
            names.push(format!("{i}:{caption}"));
        }
        if !bundle.is_normalized() {
            return Err(PromptError::NotNormalized);
        }
        let per_caption = EmbeddingBundle::new(bundle.dim(), names, data, true)
            .map_err(|_| PromptError::NotNormalized)?;
        aggregate_prompt_embeddings(
            &per_caption,
            class_names.len(),
            n_templates,
            mode,
            renormalize_mean,
        )
    }
}

/// Combines caption embeddings (class-major, as produced by [`render_all`])
/// into class representations.
pub fn aggregate_prompt_embeddings(
    per_caption: &EmbeddingBundle,
    n_classes: usize,
    n_templates: usize,
    mode: PromptMode,
    renormalize_mean: bool,
) -> Result<TextReps, PromptError> {
    let expected = n_classes * n_templates;
    if per_caption.count() != expected || expected == 0 {
        return Err(PromptError::CountMismatch {
            expected,
            found: per_caption.count(),
        });
    }
    if !per_caption.is_normalized() {
        return Err(PromptError::NotNormalized);
    }
    let dim = per_caption.dim();
    match mode {
        PromptMode::SetBased => Ok(TextReps {
            dim,
            data: per_caption.as_slice().to_vec(),
            owner: (0..expected).map(|r| r / n_templates).collect(),
            n_classes,
        }),
        PromptMode::LinearAverage => {
            let mut data = Vec::with_capacity(n_classes * dim);
            let mut mean = vec![0.0f64; dim];
            for class in 0..n_classes {
                mean.iter_mut().for_each(|v| *v = 0.0);
                for t in 0..n_templates {
                    for (acc, &v) in mean.iter_mut().zip(per_caption.row(class * n_templates + t)) {
                        *acc += f64::from(v);
                    }
                }
                let n = n_templates as f64;
                mean.iter_mut().for_each(|v| *v /= n);
                let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-12 {
                    return Err(PromptError::DegenerateMean(class));
                }
                let scale = if renormalize_mean { norm } else { 1.0 };
                data.extend(mean.iter().map(|v| (v / scale) as f32));
            }
            Ok(TextReps {
                dim,
                data,
                owner: (0..n_classes).collect(),
                n_classes,
            })
        }
    }
}

/// Cosine similarity of two rows, accumulated in `f64`.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    dot_f64(a, b) / (norm_f64(a) * norm_f64(b))
}
