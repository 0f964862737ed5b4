//! Natural-language class descriptions and their ensemble embeddings.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{EmbeddingVec, FasModel};
use crate::error::{Error, Result};
use crate::label::Class;
use crate::nn::Grad;

const DEFAULT_REAL: [&str; 6] = [
    "This is an example of a real face",
    "This is a bonafide face",
    "This is a real face",
    "This is how a real face looks like",
    "A photo of a real face",
    "This is not a spoof face",
];

const DEFAULT_SPOOF: [&str; 6] = [
    "This is an example of a spoof face",
    "This is an example of an attack face",
    "This is not a real face",
    "This is how a spoof face looks like",
    "A photo of a spoof face",
    "A printout shown to be a spoof face",
];

/// Prompt catalog: an ordered list of descriptions per class.
///
/// On disk this is a TOML table with `real` and `spoof` string arrays.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSet {
    pub real: Vec<String>,
    pub spoof: Vec<String>,
}

impl Default for PromptSet {
    /// The six context prompts per class.
    fn default() -> Self {
        Self {
            real: DEFAULT_REAL.iter().map(|s| s.to_string()).collect(),
            spoof: DEFAULT_SPOOF.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl PromptSet {
    pub fn new(real: Vec<String>, spoof: Vec<String>) -> Result<Self> {
        let ps = Self { real, spoof };
        ps.validate()?;
        Ok(ps)
    }

    pub fn validate(&self) -> Result<()> {
        for class in Class::ALL {
            let list = self.prompts(class);
            if list.is_empty() {
                return Err(Error::InvalidInput(format!("no prompts for class {class}")));
            }
            if list.iter().any(|p| p.trim().is_empty()) {
                return Err(Error::InvalidInput(format!("empty prompt for class {class}")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ps: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        ps.validate()?;
        Ok(ps)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("prompt set serializes")
    }

    pub fn prompts(&self, class: Class) -> &[String] {
        match class {
            Class::Real => &self.real,
            Class::Spoof => &self.spoof,
        }
    }

    /// Two different prompts of `class`, drawn uniformly without
    /// replacement, in random order.
    pub fn sample_views(&self, class: Class, rng: &mut impl Rng) -> Result<(String, String)> {
        let list = self.prompts(class);
        if list.len() < 2 {
            return Err(Error::TooFewPrompts {
                class: class.name(),
                available: list.len(),
            });
        }
        let first = rng.random_range(0..list.len());
        let mut second = rng.random_range(0..list.len() - 1);
        if second >= first {
            second += 1;
        }
        Ok((list[first].clone(), list[second].clone()))
    }
}

/// Per-prompt text embeddings and their per-class means.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddings {
    pub z_real: EmbeddingVec,
    pub z_spoof: EmbeddingVec,
    pub per_prompt_real: Vec<EmbeddingVec>,
    pub per_prompt_spoof: Vec<EmbeddingVec>,
}

impl ClassEmbeddings {
    pub fn class(&self, class: Class) -> &EmbeddingVec {
        match class {
            Class::Real => &self.z_real,
            Class::Spoof => &self.z_spoof,
        }
    }

    /// `2 × d` matrix with the real ensemble in row 0 and spoof in row 1.
    pub fn matrix(&self) -> Array2<f64> {
        let d = self.z_real.dim();
        Array2::from_shape_fn((2, d), |(r, c)| if r == 0 { self.z_real.0[c] } else { self.z_spoof.0[c] })
    }
}

/// Arithmetic mean of equally sized vectors.
pub fn mean_embedding(items: &[EmbeddingVec]) -> Result<EmbeddingVec> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot average zero embeddings".into()))?;
    let mut acc = vec![0.0; first.dim()];
    for e in items {
        if e.dim() != acc.len() {
            return Err(Error::Shape("embeddings differ in dimension".into()));
        }
        for (a, v) in acc.iter_mut().zip(&e.0) {
            *a += v;
        }
    }
    let n = items.len() as f64;
    Ok(EmbeddingVec(acc.into_iter().map(|v| v / n).collect()))
}

/// Embeds every prompt with the (frozen) text tower and averages per class.
pub fn embed_prompt_set(ps: &PromptSet, model: &FasModel) -> Result<ClassEmbeddings> {
    ps.validate()?;
    let embed = |list: &[String]| -> Result<Vec<EmbeddingVec>> {
        list.iter().map(|p| model.encode_text(p)).collect()
    };
    let per_prompt_real = embed(&ps.real)?;
    let per_prompt_spoof = embed(&ps.spoof)?;
    Ok(ClassEmbeddings {
        z_real: mean_embedding(&per_prompt_real)?,
        z_spoof: mean_embedding(&per_prompt_spoof)?,
        per_prompt_real,
        per_prompt_spoof,
    })
}

/// Every prompt embedded in one node: the real prompts in catalog order,
/// then the spoof prompts (`(P_real + P_spoof) × d`).
pub fn prompt_table_graph(g: &mut Graph, model: &FasModel, ps: &PromptSet, grad: Grad) -> Result<Var> {
    ps.validate()?;
    let mut rows = Vec::with_capacity(ps.real.len() + ps.spoof.len());
    for p in ps.real.iter().chain(&ps.spoof) {
        let tokens = model.tokenize(p)?;
        rows.push(model.text.forward(g, &model.store, &tokens, grad)?);
    }
    Ok(g.concat_rows(&rows))
}

/// Class ensembles (`2 × d`, real row then spoof row) from a prompt table.
pub fn ensemble_from_table(g: &mut Graph, table: Var, ps: &PromptSet) -> Var {
    let real = g.slice_rows(table, 0, ps.real.len());
    let spoof = g.slice_rows(table, ps.real.len(), ps.spoof.len());
    let rows = [g.mean_rows(real), g.mean_rows(spoof)];
    g.concat_rows(&rows)
}

/// Row of `prompt` in the prompt table, looked up within `class`.
pub fn table_row(ps: &PromptSet, class: Class, prompt: &str) -> Result<usize> {
    let pos = ps
        .prompts(class)
        .iter()
        .position(|p| p == prompt)
        .ok_or_else(|| Error::InvalidInput(format!("`{prompt}` is not a {class} prompt")))?;
    Ok(match class {
        Class::Real => pos,
        Class::Spoof => ps.real.len() + pos,
    })
}

/// Differentiable ensemble: a `2 × d` node (real row, spoof row), rebuilt
/// on every training step so it tracks the current text weights.
pub fn ensemble_graph(g: &mut Graph, model: &FasModel, ps: &PromptSet, grad: Grad) -> Result<Var> {
    let table = prompt_table_graph(g, model, ps, grad)?;
    Ok(ensemble_from_table(g, table, ps))
}
