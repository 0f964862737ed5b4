use std::collections::HashSet;

use super::optim::{clip_global_norm, AdamW};
use super::{CeView, Strategy, TrainPlan};
use crate::autograd::{Graph, ParamId, Tensor, Var};
use crate::data::AugmentedPair;
use crate::encoders::{FaceImage, FasModel, NormMode, ParamGroup, RunningStatUpdate};
use crate::error::{Error, Result};
use crate::label::Class;
use crate::losses::{cross_entropy, joint_graph, mse_consistency_graph, nt_xent, similarity_logits};
use crate::nn::Grad;
use crate::prompts::{ensemble_from_table, ensemble_graph, prompt_table_graph, table_row, PromptSet};

/// Loss nodes of one forward pass. Terms a strategy does not use are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub ce: Var,
    pub simclr: Option<Var>,
    pub mse: Option<Var>,
    pub total: Var,
}

/// Loss values of one step; unused terms are reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub l_ce: f64,
    pub l_simclr: f64,
    pub l_mse: f64,
    pub l_total: f64,
}

impl StepLosses {
    fn read(g: &Graph, parts: &LossParts) -> Self {
        let opt = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
        Self {
            l_ce: g.scalar(parts.ce),
            l_simclr: opt(parts.simclr),
            l_mse: opt(parts.mse),
            l_total: g.scalar(parts.total),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_ce, self.l_simclr, self.l_mse, self.l_total].iter().all(|v| v.is_finite())
    }
}

/// Parameters `plan` updates. Parameters outside this set keep their
/// values bit for bit.
pub fn trainable_params(model: &FasModel, plan: &TrainPlan) -> Vec<ParamId> {
    let mut groups = vec![ParamGroup::ImageBackbone];
    match plan.strategy {
        Strategy::V => groups.push(ParamGroup::Head),
        Strategy::IT | Strategy::MCL => {
            groups.push(ParamGroup::ImageProjection);
            if !plan.freeze_text {
                groups.push(ParamGroup::Text);
            }
            if !plan.freeze_logit_scale {
                groups.push(ParamGroup::LogitScale);
            }
            if plan.strategy == Strategy::MCL {
                groups.push(ParamGroup::Projector);
            }
        }
    }
    let frozen: HashSet<ParamId> = if plan.freeze_position_embeddings {
        [model.image.position_embedding(), model.text.position_embedding()].into()
    } else {
        HashSet::new()
    };
    let mut ids: Vec<ParamId> = groups
        .into_iter()
        .flat_map(|g| model.group(g))
        .filter(|id| !frozen.contains(id))
        .collect();
    ids.sort();
    ids.dedup();
    ids
}

fn text_grad(plan: &TrainPlan) -> Grad {
    if plan.freeze_text {
        Grad::Frozen
    } else {
        Grad::Track
    }
}

fn class_indices(labels: &[Class]) -> Vec<usize> {
    labels.iter().map(|c| c.index()).collect()
}

/// Image embeddings (`n × d`) of a batch, with gradients.
fn embed_images(g: &mut Graph, model: &FasModel, images: &[&FaceImage]) -> Result<Var> {
    let rows = images
        .iter()
        .map(|img| Ok(model.image.forward(g, &model.store, img, Grad::Track)?.embedding))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.concat_rows(&rows))
}

fn logit_scale(g: &mut Graph, model: &FasModel, plan: &TrainPlan) -> Var {
    let ls = if plan.freeze_logit_scale {
        g.frozen(&model.store, model.logit_scale)
    } else {
        g.param(&model.store, model.logit_scale)
    };
    g.exp(ls)
}

/// Cross-entropy of the MLP head on the final class tokens.
pub fn loss_v(g: &mut Graph, model: &FasModel, images: &[&FaceImage], labels: &[Class]) -> Result<LossParts> {
    let tokens = images
        .iter()
        .map(|img| Ok(model.image.forward(g, &model.store, img, Grad::Track)?.class_token))
        .collect::<Result<Vec<_>>>()?;
    let tokens = g.concat_rows(&tokens);
    let logits = model.head.forward(g, &model.store, tokens, Grad::Track);
    let ce = cross_entropy(g, logits, &class_indices(labels))?;
    Ok(LossParts {
        ce,
        simclr: None,
        mse: None,
        total: ce,
    })
}

/// Cross-entropy over scaled cosine similarities to the prompt ensembles.
pub fn loss_it(
    g: &mut Graph,
    model: &FasModel,
    ps: &PromptSet,
    plan: &TrainPlan,
    images: &[&FaceImage],
    labels: &[Class],
) -> Result<LossParts> {
    let x = embed_images(g, model, images)?;
    let z = ensemble_graph(g, model, ps, text_grad(plan))?;
    let scale = logit_scale(g, model, plan);
    let logits = similarity_logits(g, x, z, scale);
    let ce = cross_entropy(g, logits, &class_indices(labels))?;
    Ok(LossParts {
        ce,
        simclr: None,
        mse: None,
        total: ce,
    })
}

/// Joint objective over augmented pairs: cross-entropy on similarity
/// logits, NT-Xent between the projected views, and the squared gap
/// between the two view/prompt similarities.
pub fn loss_mcl(
    g: &mut Graph,
    model: &FasModel,
    ps: &PromptSet,
    plan: &TrainPlan,
    pairs: &[AugmentedPair],
) -> Result<(LossParts, RunningStatUpdate)> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    let labels: Vec<Class> = pairs.iter().map(|p| p.label).collect();
    let v1: Vec<&FaceImage> = pairs.iter().map(|p| &p.view1).collect();
    let v2: Vec<&FaceImage> = pairs.iter().map(|p| &p.view2).collect();
    let x1 = embed_images(g, model, &v1)?;
    let x2 = embed_images(g, model, &v2)?;
    let x_ce = match plan.mcl_ce_view {
        CeView::Original => {
            let orig: Vec<&FaceImage> = pairs.iter().map(|p| &p.original).collect();
            embed_images(g, model, &orig)?
        }
        CeView::View1 => x1,
    };

    let table = prompt_table_graph(g, model, ps, text_grad(plan))?;
    let z = ensemble_from_table(g, table, ps);
    let scale = logit_scale(g, model, plan);
    let logits = similarity_logits(g, x_ce, z, scale);
    let ce = cross_entropy(g, logits, &class_indices(&labels))?;

    let (h1, mut stats) = model.projector.forward(g, &model.store, x1, NormMode::Train, Grad::Track)?;
    let (h2, stats2) = model.projector.forward(g, &model.store, x2, NormMode::Train, Grad::Track)?;
    stats.merge(stats2);
    let simclr = nt_xent(g, h1, h2, plan.simclr_temperature)?;

    let rows = |pick: fn(&AugmentedPair) -> &str| {
        pairs
            .iter()
            .map(|p| table_row(ps, p.label, pick(p)))
            .collect::<Result<Vec<_>>>()
    };
    let z1 = g.gather_rows(table, rows(|p| &p.prompt_view1)?);
    let z2 = g.gather_rows(table, rows(|p| &p.prompt_view2)?);
    let mse = mse_consistency_graph(g, x1, z1, x2, z2);

    let total = joint_graph(g, ce, simclr, mse, plan.weights);
    Ok((
        LossParts {
            ce,
            simclr: Some(simclr),
            mse: Some(mse),
            total,
        },
        stats,
    ))
}

/// Backpropagates `parts.total` and applies one optimizer update to the
/// trainable parameters.
fn commit(
    g: Graph,
    parts: LossParts,
    stats: Option<RunningStatUpdate>,
    model: &mut FasModel,
    opt: &mut AdamW,
    plan: &TrainPlan,
    lr: f64,
) -> Result<StepLosses> {
    let losses = StepLosses::read(&g, &parts);
    if !losses.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: opt.steps() as usize + 1,
            detail: format!(
                "l_ce={} l_simclr={} l_mse={} l_total={}",
                losses.l_ce, losses.l_simclr, losses.l_mse, losses.l_total
            ),
        });
    }
    let grads = g.backward(parts.total);
    let trainable = trainable_params(model, plan);
    let mut updates: Vec<(ParamId, Tensor)> = trainable
        .iter()
        .filter_map(|id| grads.param(*id).map(|t| (*id, t.clone())))
        .collect();
    if let Some(max) = plan.grad_clip {
        clip_global_norm(&mut updates, max);
    }
    opt.update(&mut model.store, &updates, lr);
    if let Some(stats) = stats {
        stats.apply(&mut model.store);
    }
    Ok(losses)
}

fn check_strategy(plan: &TrainPlan, want: Strategy) -> Result<()> {
    if plan.strategy != want {
        return Err(Error::Config(format!(
            "{} step called with a {} plan",
            want.name(),
            plan.strategy.name()
        )));
    }
    Ok(())
}

pub fn train_step_v(
    model: &mut FasModel,
    opt: &mut AdamW,
    plan: &TrainPlan,
    lr: f64,
    images: &[&FaceImage],
    labels: &[Class],
) -> Result<StepLosses> {
    check_strategy(plan, Strategy::V)?;
    let mut g = Graph::new();
    let parts = loss_v(&mut g, model, images, labels)?;
    commit(g, parts, None, model, opt, plan, lr)
}

pub fn train_step_it(
    model: &mut FasModel,
    opt: &mut AdamW,
    plan: &TrainPlan,
    lr: f64,
    ps: &PromptSet,
    images: &[&FaceImage],
    labels: &[Class],
) -> Result<StepLosses> {
    check_strategy(plan, Strategy::IT)?;
    let mut g = Graph::new();
    let parts = loss_it(&mut g, model, ps, plan, images, labels)?;
    commit(g, parts, None, model, opt, plan, lr)
}

pub fn train_step_mcl(
    model: &mut FasModel,
    opt: &mut AdamW,
    plan: &TrainPlan,
    lr: f64,
    ps: &PromptSet,
    pairs: &[AugmentedPair],
) -> Result<StepLosses> {
    check_strategy(plan, Strategy::MCL)?;
    let mut g = Graph::new();
    let (parts, stats) = loss_mcl(&mut g, model, ps, plan, pairs)?;
    commit(g, parts, Some(stats), model, opt, plan, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_views, AugmentConfig};
    use crate::encoders::ModelConfig;
    use crate::losses::LossWeights;
    use crate::seed::rng_for;

    fn toy() -> FasModel {
        FasModel::new(ModelConfig::toy(), 1).unwrap()
    }

    fn images(n: usize) -> Vec<FaceImage> {
        (0..n)
            .map(|i| {
                let px = ndarray::Array3::from_shape_fn((32, 32, 3), |(y, x, c)| {
                    (((x * (i + 1) + y + c) % 7) as f32) / 7.0
                });
                FaceImage::from_unit_rgb(px).unwrap()
            })
            .collect()
    }

    fn pairs(model_ps: &PromptSet, aug: &AugmentConfig, n: usize) -> Vec<AugmentedPair> {
        let mut rng = rng_for(5, &[]);
        images(n)
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let label = if i % 2 == 0 { Class::Real } else { Class::Spoof };
                make_views(img, label, model_ps, aug, &mut rng).unwrap()
            })
            .collect()
    }

    fn changed(before: &FasModel, after: &FasModel, group: ParamGroup) -> bool {
        before
            .group(group)
            .iter()
            .any(|id| before.store.get(*id) != after.store.get(*id))
    }

    #[test]
    fn each_strategy_touches_only_its_parameters() {
        let ps = PromptSet::default();
        let imgs = images(4);
        let refs: Vec<&FaceImage> = imgs.iter().collect();
        let labels = [Class::Real, Class::Spoof, Class::Real, Class::Spoof];
        let base = toy();

        let plan = TrainPlan { lr: 1e-3, ..TrainPlan::new(Strategy::V) };
        let mut m = base.clone();
        let mut opt = AdamW::new(plan.betas, plan.eps, plan.weight_decay, true);
        train_step_v(&mut m, &mut opt, &plan, plan.lr, &refs, &labels).unwrap();
        assert!(changed(&base, &m, ParamGroup::ImageBackbone));
        assert!(changed(&base, &m, ParamGroup::Head));
        for g in [ParamGroup::Text, ParamGroup::Projector, ParamGroup::LogitScale, ParamGroup::ImageProjection] {
            assert!(!changed(&base, &m, g), "V changed {g:?}");
        }

        let plan = TrainPlan { lr: 1e-3, ..TrainPlan::new(Strategy::IT) };
        let mut m = base.clone();
        train_step_it(&mut m, &mut opt.clone(), &plan, plan.lr, &ps, &refs, &labels).unwrap();
        assert!(changed(&base, &m, ParamGroup::Text));
        assert!(changed(&base, &m, ParamGroup::ImageProjection));
        assert!(!changed(&base, &m, ParamGroup::Head));
        assert!(!changed(&base, &m, ParamGroup::Projector));

        let plan = TrainPlan { lr: 1e-3, ..TrainPlan::new(Strategy::MCL) };
        let mut m = base.clone();
        let p = pairs(&ps, &plan.augment, 4);
        let mut opt = AdamW::new(plan.betas, plan.eps, plan.weight_decay, true);
        train_step_mcl(&mut m, &mut opt, &plan, plan.lr, &ps, &p).unwrap();
        assert!(changed(&base, &m, ParamGroup::Projector));
        assert!(changed(&base, &m, ParamGroup::Text));
        assert!(!changed(&base, &m, ParamGroup::Head));
    }

    #[test]
    fn zero_lr_with_frozen_text_keeps_loss_constant() {
        let ps = PromptSet::default();
        let imgs = images(2);
        let refs: Vec<&FaceImage> = imgs.iter().collect();
        let labels = [Class::Real, Class::Spoof];
        let plan = TrainPlan {
            lr: 0.0,
            freeze_text: true,
            ..TrainPlan::new(Strategy::IT)
        };
        let mut m = toy();
        let before = m.store.clone();
        let mut opt = AdamW::new(plan.betas, plan.eps, plan.weight_decay, true);
        let first = train_step_it(&mut m, &mut opt, &plan, 0.0, &ps, &refs, &labels).unwrap();
        for _ in 0..3 {
            let l = train_step_it(&mut m, &mut opt, &plan, 0.0, &ps, &refs, &labels).unwrap();
            assert_eq!(l, first);
        }
        for id in before.ids() {
            assert_eq!(before.get(id), m.store.get(id));
        }
    }

    #[test]
    fn identical_views_and_prompts_give_zero_consistency_loss() {
        let ps = PromptSet::default();
        let plan = TrainPlan::new(Strategy::MCL);
        let mut p = pairs(&ps, &AugmentConfig::identity(), 3);
        for pair in &mut p {
            pair.prompt_view2 = pair.prompt_view1.clone();
        }
        let model = toy();
        let mut g = Graph::new();
        let (parts, _) = loss_mcl(&mut g, &model, &ps, &plan, &p).unwrap();
        assert_eq!(g.scalar(parts.mse.unwrap()), 0.0);
    }

    #[test]
    fn ce_only_weights_make_the_total_equal_ce() {
        let ps = PromptSet::default();
        let plan = TrainPlan {
            weights: LossWeights::new(1.0, 0.0, 0.0).unwrap(),
            ..TrainPlan::new(Strategy::MCL)
        };
        let p = pairs(&ps, &plan.augment, 3);
        let model = toy();
        let mut g = Graph::new();
        let (parts, _) = loss_mcl(&mut g, &model, &ps, &plan, &p).unwrap();
        assert_eq!(g.scalar(parts.total), g.scalar(parts.ce));
        assert!(g.scalar(parts.simclr.unwrap()) > 0.0);
    }

    #[test]
    fn single_pair_batch_is_rejected() {
        let ps = PromptSet::default();
        let plan = TrainPlan::new(Strategy::MCL);
        let p = pairs(&ps, &plan.augment, 1);
        let mut g = Graph::new();
        assert!(matches!(
            loss_mcl(&mut g, &toy(), &ps, &plan, &p),
            Err(Error::DegenerateBatch(1))
        ));
    }

    #[test]
    fn similarity_logits_are_cosines_to_the_ensembles() {
        let ps = PromptSet::default();
        let model = toy();
        let imgs = images(1);
        let (_, x) = model.encode_image(&imgs[0]).unwrap();
        let emb = crate::prompts::embed_prompt_set(&ps, &model).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.to_row());
        let zv = g.constant(emb.matrix());
        let one = g.scalar_constant(1.0);
        let logits = similarity_logits(&mut g, xv, zv, one);
        let got = g.value(logits);
        let want_r = crate::losses::cosine_sim(&x.0, &emb.z_real.0).unwrap();
        let want_s = crate::losses::cosine_sim(&x.0, &emb.z_spoof.0).unwrap();
        assert!((got[[0, 0]] - want_r).abs() < 1e-12);
        assert!((got[[0, 1]] - want_s).abs() < 1e-12);
    }
}
