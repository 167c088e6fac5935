//! Episode assembly and the two-stage training loop.
//!
//! Every step re-embeds the support set, so prototypes carry gradients back
//! into the embedding net. Queries are augmented copies of support features
//! plus background proposals from a training scene; the background
//! prototype is the mean embedding of another scene's background pool.

use serde::{Deserialize, Serialize};

use crate::embedder::{EmbedCache, Model, NetConfig, ParamGrads};
use crate::error::{Error, Result};
use crate::losses::{total_loss, EmbeddingGrads, LossConfig, LossValues, QueryBatch, TotalLoss};
use crate::numeric::{axpy, mean_of, Rng};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::prototype::{background_pool, build_prototypes, PrototypeBank};
use crate::sim::{
    augment_feature, label_proposals, AugmentConfig, Dataset, ProposalLabel, Split, SupportSet,
};
use crate::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Prototypes from every support feature; queries are augmented copies.
    Full,
    /// 3/5 of the shots build prototypes, the other 2/5 become queries.
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub shots: usize,
    pub queries_per_support: usize,
    pub augmentation: bool,
    pub augment: AugmentConfig,
    pub split: SplitMode,
    /// Add background proposals as label-0 queries.
    pub background_queries: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            stage1_steps: 500,
            stage2_steps: 200,
            shots: 5,
            queries_per_support: 4,
            augmentation: true,
            augment: AugmentConfig::default(),
            split: SplitMode::Full,
            background_queries: true,
            clip_norm: Some(10.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("lr and weight_decay must be non-negative"));
        }
        if self.shots == 0 || self.queries_per_support == 0 {
            return Err(Error::config(
                "shots and queries_per_support must be at least 1",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::config("invalid Adam moments or epsilon"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("clip_norm must be positive"));
        }
        if self.split == SplitMode::Partial && self.shots < 5 {
            return Err(Error::config("split requires 5 shots"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Raw features for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Features whose embeddings are averaged into class prototypes.
    pub prototype_support: SupportSet,
    /// Features averaged into the background prototype.
    pub background_pool: Vec<Vec<f64>>,
    pub queries: Vec<(Vec<f64>, ClassId)>,
}

/// Builds the support/query split for one step; background parts are left
/// empty for the caller to fill.
pub fn make_episode(rng: &mut Rng, support: &SupportSet, cfg: &TrainConfig) -> Result<Episode> {
    if support.is_empty() {
        return Err(Error::input("empty support set"));
    }
    let mut prototype_support = SupportSet::new();
    let mut queries = Vec::new();
    for (&class_id, feats) in support {
        if feats.is_empty() {
            return Err(Error::EmptySupport(class_id.0));
        }
        let (proto_feats, query_src): (Vec<&Vec<f64>>, Vec<&Vec<f64>>) = match cfg.split {
            SplitMode::Full => (feats.iter().collect(), feats.iter().collect()),
            SplitMode::Partial => {
                let n = feats.len();
                if n < 5 {
                    return Err(Error::config("split requires 5 shots"));
                }
                let mut order: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut order);
                let k = 3 * n / 5;
                (
                    order[..k].iter().map(|&i| &feats[i]).collect(),
                    order[k..].iter().map(|&i| &feats[i]).collect(),
                )
            }
        };
        prototype_support.insert(class_id, proto_feats.into_iter().cloned().collect());
        for v in query_src {
            for _ in 0..cfg.queries_per_support {
                let q = if cfg.augmentation {
                    augment_feature(rng, v, &cfg.augment)
                } else {
                    v.clone()
                };
                queries.push((q, class_id));
            }
        }
    }
    Ok(Episode {
        prototype_support,
        background_pool: Vec::new(),
        queries,
    })
}

/// How the background prototype of a step was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundSource {
    Pool,
    Reused,
    Zero,
}

/// Forward state of an episode: embeddings, caches and the bank they form.
pub struct EpisodeForward {
    pub batch: QueryBatch,
    pub bank: PrototypeBank,
    pub background: BackgroundSource,
    query_caches: Vec<EmbedCache>,
    /// Per bank entry: caches of the features averaged into it.
    proto_caches: Vec<Vec<EmbedCache>>,
}

/// Embeds an episode. `fallback_background` stands in for an empty pool.
pub fn forward_episode(
    model: &Model,
    episode: &Episode,
    fallback_background: Option<&[f64]>,
) -> Result<EpisodeForward> {
    let net = &model.net;
    let dim = net.embed_dim();
    let mut bank = PrototypeBank::default();
    let mut caches_by_class: Vec<(ClassId, Vec<EmbedCache>)> = Vec::new();

    let embed_mean = |feats: &[Vec<f64>]| -> Result<(Vec<f64>, Vec<EmbedCache>)> {
        let mut outs = Vec::with_capacity(feats.len());
        let mut caches = Vec::with_capacity(feats.len());
        for v in feats {
            let (q, c) = net.forward(v)?;
            outs.push(q);
            caches.push(c);
        }
        Ok((mean_of(outs.iter().map(Vec::as_slice), dim)?, caches))
    };

    let background = if !episode.background_pool.is_empty() {
        let (p0, caches) = embed_mean(&episode.background_pool)?;
        bank.insert(ClassId::BACKGROUND, p0)?;
        caches_by_class.push((ClassId::BACKGROUND, caches));
        BackgroundSource::Pool
    } else if let Some(p0) = fallback_background {
        bank.insert(ClassId::BACKGROUND, p0.to_vec())?;
        caches_by_class.push((ClassId::BACKGROUND, Vec::new()));
        BackgroundSource::Reused
    } else {
        bank.insert(ClassId::BACKGROUND, vec![0.0; dim])?;
        caches_by_class.push((ClassId::BACKGROUND, Vec::new()));
        BackgroundSource::Zero
    };

    for (&class_id, feats) in &episode.prototype_support {
        if class_id.is_background() {
            return Err(Error::input(
                "support set may not contain the background class",
            ));
        }
        if feats.is_empty() {
            return Err(Error::EmptySupport(class_id.0));
        }
        let (p, caches) = embed_mean(feats)?;
        bank.insert(class_id, p)?;
        caches_by_class.push((class_id, caches));
    }

    let mut embeddings = Vec::with_capacity(episode.queries.len());
    let mut labels = Vec::with_capacity(episode.queries.len());
    let mut query_caches = Vec::with_capacity(episode.queries.len());
    for (v, y) in &episode.queries {
        let (q, c) = net.forward(v)?;
        embeddings.push(q);
        labels.push(*y);
        query_caches.push(c);
    }

    caches_by_class.sort_by_key(|(c, _)| *c);
    Ok(EpisodeForward {
        batch: QueryBatch { embeddings, labels },
        bank,
        background,
        query_caches,
        proto_caches: caches_by_class.into_iter().map(|(_, c)| c).collect(),
    })
}

impl EpisodeForward {
    /// Chains embedding-space gradients back to model parameters.
    pub fn backprop(&self, model: &Model, grads: &EmbeddingGrads) -> Result<ParamGrads> {
        let mut out = model.zero_grads();
        for (cache, dq) in self.query_caches.iter().zip(&grads.d_queries) {
            model
                .net
                .accumulate_backward(cache, dq, &mut out.embedder, false)?;
        }
        for (caches, dp) in self.proto_caches.iter().zip(&grads.d_prototypes) {
            if caches.is_empty() {
                continue;
            }
            let share: Vec<f64> = dp.iter().map(|g| g / caches.len() as f64).collect();
            for cache in caches {
                model
                    .net
                    .accumulate_backward(cache, &share, &mut out.embedder, false)?;
            }
        }
        if let Some(c) = &grads.classifier {
            axpy(1.0, &c.weight.data, &mut out.classifier.weight.data);
            axpy(1.0, &c.bias, &mut out.classifier.bias);
        }
        Ok(out)
    }

    /// Fraction of queries whose nearest prototype carries their label.
    pub fn accuracy(&self) -> f64 {
        let correct = self
            .batch
            .embeddings
            .iter()
            .zip(&self.batch.labels)
            .filter(|(q, y)| self.bank.nearest(q).is_ok_and(|(_, c)| c == **y))
            .count();
        correct as f64 / self.batch.len().max(1) as f64
    }
}

/// Loss values and parameter gradients of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    /// In the configured reduction.
    pub values: LossValues,
    pub raw: LossValues,
    pub grads: ParamGrads,
    pub accuracy: f64,
}

pub fn episode_loss(
    model: &Model,
    episode: &Episode,
    cfg: &LossConfig,
    fallback_background: Option<&[f64]>,
) -> Result<(LossBundle, EpisodeForward)> {
    let fwd = forward_episode(model, episode, fallback_background)?;
    let total: TotalLoss = total_loss(&fwd.batch, &fwd.bank, &model.clf, cfg)?;
    let grads = fwd.backprop(model, &total.grads)?;
    let bundle = LossBundle {
        values: total.values(),
        raw: total.raw,
        grads,
        accuracy: fwd.accuracy(),
    };
    Ok((bundle, fwd))
}

/// One JSON-lines record of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: u8,
    pub l_match: f64,
    pub l_kl: f64,
    pub l_align: f64,
    pub l_total: f64,
    /// Before clipping.
    pub grad_norm: f64,
    /// Nearest-prototype accuracy on the step's queries.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Rebuilt from the original support set with the final net.
    pub bank: PrototypeBank,
    pub log: Vec<StepRecord>,
    /// Nearest-prototype accuracy on foreground proposals of test scenes.
    pub heldout_accuracy: Option<f64>,
}

/// Seen-class support, truncated to the configured number of shots.
pub fn training_support(dataset: &Dataset, shots: usize) -> Result<SupportSet> {
    let seen = dataset.config.seen_ids();
    let mut support = dataset.support_for(&seen)?;
    for (c, feats) in support.iter_mut() {
        if feats.len() < shots {
            return Err(Error::config(format!(
                "class {c} has {} support features but {shots} shots are configured",
                feats.len()
            )));
        }
        feats.truncate(shots);
    }
    Ok(support)
}

fn background_features(dataset: &Dataset, split: Split) -> Vec<Vec<Vec<f64>>> {
    dataset
        .scenes_in(split)
        .map(|s| {
            let gt: Vec<_> = s.gt.iter().map(|g| g.bbox).collect();
            background_pool(&s.proposals, &gt)
                .into_iter()
                .map(|k| s.proposals[k].feature.clone())
                .collect()
        })
        .collect()
}

/// Two-stage optimization: matching loss alone, then with the configured
/// distillation and alignment weights.
pub fn train(
    dataset: &Dataset,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    net_cfg.validate()?;
    if net_cfg.input_dim != dataset.config.feature_dim {
        return Err(Error::config(format!(
            "net input_dim {} differs from dataset feature_dim {}",
            net_cfg.input_dim, dataset.config.feature_dim
        )));
    }
    let support = training_support(dataset, cfg.shots)?;
    let mut classes = vec![ClassId::BACKGROUND];
    classes.extend(support.keys().copied());

    let mut rng = Rng::new(cfg.seed);
    let mut model = Model::new(net_cfg, classes, &mut rng.fork())?;
    let mut state = AdamWState::new(&model);
    let opt = cfg.optimizer();
    let pools = background_features(dataset, Split::Train);

    let mut last_background: Option<Vec<f64>> = None;
    let mut log = Vec::with_capacity(cfg.stage1_steps + cfg.stage2_steps);
    for step in 0..cfg.stage1_steps + cfg.stage2_steps {
        let stage = if step < cfg.stage1_steps { 1 } else { 2 };
        let step_cfg = loss_cfg.with_stage(stage);
        let mut episode = make_episode(&mut rng, &support, cfg)?;
        if !pools.is_empty() {
            let k = rng.below(pools.len());
            episode.background_pool = pools[k].clone();
            if cfg.background_queries {
                let other = &pools[(k + 1) % pools.len()];
                episode
                    .queries
                    .extend(other.iter().map(|v| (v.clone(), ClassId::BACKGROUND)));
            }
        }

        let (mut bundle, fwd) =
            match episode_loss(&model, &episode, &step_cfg, last_background.as_deref()) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { step }),
                Err(e) => return Err(e),
            };
        if fwd.background == BackgroundSource::Pool {
            last_background = fwd.bank.get(ClassId::BACKGROUND).map(<[f64]>::to_vec);
        }
        let grad_norm = bundle.grads.global_norm();
        if !bundle.values.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged { step });
        }
        log.push(StepRecord {
            step,
            stage,
            l_match: bundle.values.l_match,
            l_kl: bundle.values.l_kl,
            l_align: bundle.values.l_align,
            l_total: bundle.values.l_total,
            grad_norm,
            accuracy: bundle.accuracy,
        });
        if let Some(max) = cfg.clip_norm {
            if grad_norm > max {
                bundle.grads.scale(max / grad_norm);
            }
        }
        adamw_step(&mut model, &bundle.grads, &mut state, &opt)?;
        if !model.is_finite() {
            return Err(Error::Diverged { step });
        }
    }

    let bank = final_bank(&model, &support, &pools, last_background)?;
    let heldout_accuracy = heldout_accuracy(&model, &bank, dataset)?;
    Ok(TrainOutcome {
        model,
        bank,
        log,
        heldout_accuracy,
    })
}

fn final_bank(
    model: &Model,
    support: &SupportSet,
    pools: &[Vec<Vec<f64>>],
    last_background: Option<Vec<f64>>,
) -> Result<PrototypeBank> {
    let mut bank = build_prototypes(&model.net, support)?;
    let all: Vec<&Vec<f64>> = pools.iter().flatten().collect();
    let p0 = if all.is_empty() {
        last_background.unwrap_or_else(|| vec![0.0; model.net.embed_dim()])
    } else {
        let embedded = all
            .iter()
            .map(|v| model.net.embed(v))
            .collect::<Result<Vec<_>>>()?;
        mean_of(embedded.iter().map(Vec::as_slice), model.net.embed_dim())?
    };
    bank.insert(ClassId::BACKGROUND, p0)?;
    Ok(bank)
}

/// Nearest-prototype accuracy over foreground proposals of the test split.
pub fn heldout_accuracy(
    model: &Model,
    bank: &PrototypeBank,
    dataset: &Dataset,
) -> Result<Option<f64>> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for scene in dataset.scenes_in(Split::Test) {
        for (k, label) in label_proposals(scene) {
            let ProposalLabel::Class(c) = label else {
                continue;
            };
            if c.is_background() || bank.index_of(c).is_none() {
                continue;
            }
            let q = model.net.embed(&scene.proposals[k].feature)?;
            total += 1;
            if bank.nearest(&q)?.1 == c {
                correct += 1;
            }
        }
    }
    Ok((total > 0).then(|| correct as f64 / total as f64))
}
