//! Central-difference verification of every loss against the analytic
//! parameter gradients, over random small episodes.

use serde::{Deserialize, Serialize};

use crate::embedder::{Model, NetConfig};
use crate::error::Result;
use crate::losses::{
    alignment_loss, kl_loss, matching_loss, total_loss, EmbeddingGrads, LossConfig, Reduction,
};
use crate::numeric::Rng;
use crate::sim::SupportSet;
use crate::trainer::{forward_episode, Episode};
use crate::ClassId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seeds: u64,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub classes: u32,
    pub shots: usize,
    pub background_pool: usize,
    pub batch: usize,
    /// Embedding depths to check; depth 0 (identity) uses `embed_dim = input_dim`.
    pub depths: Vec<usize>,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Instances with a hidden pre-activation closer than this to zero are
    /// redrawn, since the difference stencil would straddle the ReLU kink.
    pub kink_margin: f64,
    /// Test hook: perturb one analytic gradient entry.
    pub corrupt: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seeds: 20,
            input_dim: 8,
            hidden_dim: 10,
            embed_dim: 6,
            classes: 3,
            shots: 2,
            background_pool: 3,
            batch: 12,
            depths: vec![0, 1, 2, 3, 4],
            step: 1e-6,
            tolerance: 1e-4,
            floor: 1e-5,
            kink_margin: 1e-4,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Match,
    Kl,
    Align,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Match,
        LossKind::Kl,
        LossKind::Align,
        LossKind::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Match => "l_match",
            LossKind::Kl => "l_kl",
            LossKind::Align => "l_align",
            LossKind::Total => "l_total",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub loss: LossKind,
    pub depth: usize,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Blocks with at least one entry over tolerance.
    pub failing_blocks: Vec<String>,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.failing_blocks.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(GradcheckRow::passed)
    }

    /// Worst relative error per loss across depths.
    pub fn max_per_loss(&self) -> Vec<(LossKind, f64)> {
        LossKind::ALL
            .iter()
            .map(|&k| {
                let worst = self
                    .rows
                    .iter()
                    .filter(|r| r.loss == k)
                    .map(|r| r.max_rel_err)
                    .fold(0.0, f64::max);
                (k, worst)
            })
            .collect()
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<8} {:>5} {:>8} {:>12}  status\n",
            "loss", "depth", "params", "max_rel_err"
        );
        for r in &self.rows {
            let status = if r.passed() {
                "ok".to_string()
            } else {
                format!("FAIL {}", r.failing_blocks.join(","))
            };
            out.push_str(&format!(
                "{:<8} {:>5} {:>8} {:>12.3e}  {status}\n",
                r.loss.name(),
                r.depth,
                r.checked,
                r.max_rel_err
            ));
        }
        out
    }
}

/// Stage-2 weights of one, mean reduction: the objective the trainer optimizes.
pub fn check_loss_config() -> LossConfig {
    LossConfig {
        lambda_kl: 1.0,
        lambda_align: 1.0,
        temperature: 10.0,
        stage: 2,
        kl_stop_teacher: false,
        align_include_background: true,
        reduction: Reduction::Mean,
    }
}

/// Random model and episode for one seed, redrawn from the same stream
/// until no hidden unit sits within `kink_margin` of its ReLU kink.
pub fn random_instance(cfg: &GradcheckConfig, depth: usize, seed: u64) -> Result<(Model, Episode)> {
    let mut rng = Rng::new(seed);
    loop {
        let (model, episode) = draw_instance(cfg, depth, &mut rng)?;
        if min_hidden_preactivation(&model, &episode)? >= cfg.kink_margin {
            return Ok((model, episode));
        }
    }
}

fn draw_instance(cfg: &GradcheckConfig, depth: usize, rng: &mut Rng) -> Result<(Model, Episode)> {
    let embed_dim = if depth == 0 {
        cfg.input_dim
    } else {
        cfg.embed_dim
    };
    let net_cfg = NetConfig {
        input_dim: cfg.input_dim,
        hidden_dim: cfg.hidden_dim,
        embed_dim,
        depth,
    };
    let mut classes = vec![ClassId::BACKGROUND];
    classes.extend((1..=cfg.classes).map(ClassId));
    let mut model = Model::new(&net_cfg, classes, rng)?;
    // Nonzero biases move pre-activations off the origin.
    for l in model.net.layers.iter_mut() {
        l.bias = rng.normal_vec(l.bias.len(), 0.2);
    }
    model.clf.layer.bias = rng.normal_vec(model.clf.layer.bias.len(), 0.2);

    let centers: Vec<Vec<f64>> = (0..=cfg.classes)
        .map(|_| rng.normal_vec(cfg.input_dim, 1.0))
        .collect();
    let noisy = |c: usize, rng: &mut Rng| -> Vec<f64> {
        centers[c].iter().map(|x| x + 0.5 * rng.normal()).collect()
    };
    let mut support = SupportSet::new();
    for c in 1..=cfg.classes {
        support.insert(
            ClassId(c),
            (0..cfg.shots).map(|_| noisy(c as usize, rng)).collect(),
        );
    }
    let background_pool = (0..cfg.background_pool).map(|_| noisy(0, rng)).collect();
    let queries = (0..cfg.batch)
        .map(|_| {
            let y = rng.below(cfg.classes as usize + 1);
            (noisy(y, rng), ClassId(y as u32))
        })
        .collect();
    Ok((
        model,
        Episode {
            prototype_support: support,
            background_pool,
            queries,
        },
    ))
}

fn min_hidden_preactivation(model: &Model, episode: &Episode) -> Result<f64> {
    let layers = &model.net.layers;
    let feats = episode
        .prototype_support
        .values()
        .flatten()
        .chain(&episode.background_pool)
        .chain(episode.queries.iter().map(|(v, _)| v));
    let mut min = f64::INFINITY;
    for v in feats {
        let mut x = v.clone();
        for layer in layers.iter().take(layers.len().saturating_sub(1)) {
            let z = layer.forward(&x)?;
            min = z.iter().fold(min, |m, v| m.min(v.abs()));
            x = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    Ok(min)
}

/// Reduced value and embedding-space gradients of one loss.
fn objective(
    model: &Model,
    episode: &Episode,
    kind: LossKind,
    cfg: &LossConfig,
) -> Result<(f64, EmbeddingGrads)> {
    let fwd = forward_episode(model, episode, None)?;
    let n = fwd.batch.len() as f64;
    let (value, mut grads) = match kind {
        LossKind::Match => {
            let t = matching_loss(&fwd.batch, &fwd.bank)?;
            (t.value, t.grads)
        }
        LossKind::Kl => {
            let t = kl_loss(&fwd.batch, &fwd.bank, &model.clf, cfg.kl_stop_teacher)?;
            (t.value, t.grads)
        }
        LossKind::Align => {
            let t = alignment_loss(
                &fwd.batch,
                &fwd.bank,
                cfg.temperature,
                cfg.align_include_background,
            )?;
            (t.value, t.grads)
        }
        LossKind::Total => {
            let t = total_loss(&fwd.batch, &fwd.bank, &model.clf, cfg)?;
            return Ok((t.values().l_total, t.grads));
        }
    };
    let scale = 1.0 / n;
    grads
        .d_queries
        .iter_mut()
        .flatten()
        .for_each(|g| *g *= scale);
    grads
        .d_prototypes
        .iter_mut()
        .flatten()
        .for_each(|g| *g *= scale);
    if let Some(c) = &mut grads.classifier {
        c.weight
            .data
            .iter_mut()
            .chain(c.bias.iter_mut())
            .for_each(|g| *g *= scale);
    }
    Ok((value * scale, grads))
}

/// Analytic gradient blocks (named) and the worst relative error against
/// central differences, plus the names of blocks over tolerance.
pub fn check_instance(
    model: &Model,
    episode: &Episode,
    kind: LossKind,
    cfg: &GradcheckConfig,
) -> Result<(f64, usize, Vec<String>)> {
    let loss_cfg = check_loss_config();
    let (_, emb_grads) = objective(model, episode, kind, &loss_cfg)?;
    let fwd = forward_episode(model, episode, None)?;
    let mut analytic = fwd.backprop(model, &emb_grads)?;
    if cfg.corrupt {
        if let Some(g) = analytic.blocks_mut().into_iter().find(|b| !b.is_empty()) {
            g[0] += 1e-2;
        }
    }
    let names: Vec<String> = model.blocks().into_iter().map(|(n, _)| n).collect();
    let analytic_blocks: Vec<Vec<f64>> =
        analytic.blocks().into_iter().map(<[f64]>::to_vec).collect();

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut failing = Vec::new();
    for (b, name) in names.iter().enumerate() {
        let mut block_failed = false;
        for i in 0..analytic_blocks[b].len() {
            let orig = probe.blocks_mut()[b][i];
            probe.blocks_mut()[b][i] = orig + cfg.step;
            let fp = objective(&probe, episode, kind, &loss_cfg)?.0;
            probe.blocks_mut()[b][i] = orig - cfg.step;
            let fm = objective(&probe, episode, kind, &loss_cfg)?.0;
            probe.blocks_mut()[b][i] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let an = analytic_blocks[b][i];
            let err = (an - numeric).abs() / an.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max(err);
            checked += 1;
            if !(err <= cfg.tolerance) {
                block_failed = true;
            }
        }
        if block_failed {
            failing.push(name.clone());
        }
    }
    Ok((worst, checked, failing))
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rows = Vec::new();
    for &depth in &cfg.depths {
        for kind in LossKind::ALL {
            let mut row = GradcheckRow {
                loss: kind,
                depth,
                max_rel_err: 0.0,
                checked: 0,
                failing_blocks: Vec::new(),
            };
            for seed in 0..cfg.seeds {
                let (model, episode) = random_instance(cfg, depth, seed)?;
                let (worst, checked, failing) = check_instance(&model, &episode, kind, cfg)?;
                row.max_rel_err = row.max_rel_err.max(worst);
                row.checked += checked;
                for f in failing {
                    if !row.failing_blocks.contains(&f) {
                        row.failing_blocks.push(f);
                    }
                }
            }
            rows.push(row);
        }
    }
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        rows,
    })
}
