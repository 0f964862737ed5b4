use rayon::prelude::*;

use super::metrics::{ScoreEntry, ScoreSet};
use crate::autograd::softmax_rows;
use crate::data::{ImageStore, Sample};
use crate::encoders::{FaceImage, FasModel};
use crate::error::{Error, Result};
use crate::losses::{cosine_sim, similarity_softmax, SimilarityLogits};
use crate::prompts::{embed_prompt_set, ClassEmbeddings, PromptSet};
use crate::training::Strategy;

/// How an image is turned into a real-class probability.
#[derive(Clone, Copy, Debug)]
pub enum Scorer<'a> {
    /// Softmax of the MLP head logits.
    Head,
    /// Softmax of the temperature-scaled similarities to the cached prompt
    /// ensembles.
    Prompts(&'a ClassEmbeddings),
}

/// Probability that `img` shows a real face.
pub fn score_image(model: &FasModel, scorer: Scorer, img: &FaceImage) -> Result<f64> {
    let (class_token, embedding) = model.encode_image(img)?;
    match scorer {
        Scorer::Head => {
            let logits = model.mlp_forward(&class_token)?;
            let row = ndarray::Array2::from_shape_vec((1, 2), logits.to_vec()).expect("two logits");
            Ok(softmax_rows(&row)[[0, 0]])
        }
        Scorer::Prompts(emb) => {
            let s_real = cosine_sim(&embedding.0, &emb.z_real.0)?;
            let s_spoof = cosine_sim(&embedding.0, &emb.z_spoof.0)?;
            let logits = SimilarityLogits::new(s_real, s_spoof, 1.0 / model.logit_scale())?;
            Ok(similarity_softmax(logits).0)
        }
    }
}

/// Scores of a test pool, plus the samples whose image could not be read.
#[derive(Clone, Debug)]
pub struct Inference {
    pub scores: ScoreSet,
    pub missing: Vec<String>,
}

/// Scores every sample with the path `strategy` implies. Prompt ensembles
/// are embedded once up front; the `V` path never runs the text tower.
pub fn infer_scores(
    model: &FasModel,
    strategy: Strategy,
    samples: &[Sample],
    images: &ImageStore,
    prompts: &PromptSet,
) -> Result<Inference> {
    let cached;
    let scorer = match strategy {
        Strategy::V => Scorer::Head,
        Strategy::IT | Strategy::MCL => {
            cached = embed_prompt_set(prompts, model)?;
            Scorer::Prompts(&cached)
        }
    };
    let results: Vec<Result<Option<ScoreEntry>>> = samples
        .par_iter()
        .map(|s| {
            let img = match images.get(&s.path) {
                Ok(img) => img,
                Err(Error::Io { .. } | Error::Image { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            Ok(Some(ScoreEntry {
                sample_id: s.id.clone(),
                score: score_image(model, scorer, &img)?,
                label: s.label,
            }))
        })
        .collect();
    let mut entries = Vec::with_capacity(samples.len());
    let mut missing = Vec::new();
    for (s, r) in samples.iter().zip(results) {
        match r? {
            Some(e) => entries.push(e),
            None => missing.push(s.id.clone()),
        }
    }
    if !missing.is_empty() {
        log::warn!("{} test image(s) could not be read and were skipped", missing.len());
    }
    Ok(Inference {
        scores: ScoreSet::new(entries)?,
        missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{ModelConfig, ParamGroup};
    use crate::label::{AttackType, Class};
    use std::path::PathBuf;

    fn pool(store: &ImageStore) -> Vec<Sample> {
        (0..4)
            .map(|i| {
                let path = PathBuf::from(format!("mem://{i}"));
                let px = ndarray::Array3::from_shape_fn((32, 32, 3), |(y, x, c)| ((x + y * i + c) % 5) as f32 / 5.0);
                store.insert(path.clone(), FaceImage::from_unit_rgb(px).unwrap());
                let label = if i % 2 == 0 { Class::Real } else { Class::Spoof };
                Sample {
                    id: format!("t/{i}"),
                    path,
                    label,
                    attack: if label == Class::Real { AttackType::None } else { AttackType::Print },
                    domain: "t".into(),
                }
            })
            .collect()
    }

    #[test]
    fn scoring_is_deterministic_and_in_unit_range() {
        let model = FasModel::new(ModelConfig::toy(), 4).unwrap();
        let store = ImageStore::new(32, true);
        let samples = pool(&store);
        for strategy in [Strategy::V, Strategy::IT] {
            let a = infer_scores(&model, strategy, &samples, &store, &PromptSet::default()).unwrap();
            let b = infer_scores(&model, strategy, &samples, &store, &PromptSet::default()).unwrap();
            assert_eq!(a.scores, b.scores);
            assert!(a.scores.entries().iter().all(|e| (0.0..=1.0).contains(&e.score)));
        }
    }

    #[test]
    fn head_path_never_reads_the_text_tower() {
        let mut model = FasModel::new(ModelConfig::toy(), 4).unwrap();
        for id in model.group(ParamGroup::Text) {
            model.store.get_mut(id).fill(f64::NAN);
        }
        let store = ImageStore::new(32, true);
        let samples = pool(&store);
        let v = infer_scores(&model, Strategy::V, &samples, &store, &PromptSet::default()).unwrap();
        assert_eq!(v.scores.len(), 4);
        assert!(infer_scores(&model, Strategy::IT, &samples, &store, &PromptSet::default()).is_err());
    }

    #[test]
    fn missing_images_are_skipped_and_listed() {
        let model = FasModel::new(ModelConfig::toy(), 4).unwrap();
        let store = ImageStore::new(32, true);
        let mut samples = pool(&store);
        samples[1].path = PathBuf::from("/definitely/not/here.png");
        let r = infer_scores(&model, Strategy::V, &samples, &store, &PromptSet::default()).unwrap();
        assert_eq!(r.missing, ["t/1"]);
        assert_eq!(r.scores.len(), 3);
    }

    #[test]
    fn prompt_score_is_the_similarity_softmax() {
        let model = FasModel::new(ModelConfig::toy(), 4).unwrap();
        let store = ImageStore::new(32, true);
        let samples = pool(&store);
        let emb = embed_prompt_set(&PromptSet::default(), &model).unwrap();
        let img = store.get(&samples[0].path).unwrap();
        let (_, x) = model.encode_image(&img).unwrap();
        let s_r = cosine_sim(&x.0, &emb.z_real.0).unwrap();
        let s_s = cosine_sim(&x.0, &emb.z_spoof.0).unwrap();
        let scale = model.logit_scale();
        let want = 1.0 / (1.0 + (scale * (s_s - s_r)).exp());
        let got = score_image(&model, Scorer::Prompts(&emb), &img).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}
