//! Synthetic proposal world standing in for a class-agnostic detector.
//!
//! Each class has a feature mean made of a foreground component shared by
//! every class plus a class-specific offset; background proposals are drawn
//! around the origin. Proposals aligned with ground truth get the class mean
//! plus Gaussian noise, background proposals get random boxes that overlap
//! no object by IoU 0.3 or more.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{axpy, norm, sq_euclidean_unchecked, Rng};
use crate::ClassId;

/// Foreground assignment threshold for proposal labeling.
pub const FOREGROUND_IOU: f64 = 0.5;
/// Proposals whose best overlap is below this are background.
pub const BACKGROUND_IOU: f64 = 0.3;

/// Axis-aligned box with `x2 > x1`, `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(Error::input(format!(
                "degenerate box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

fn max_iou(b: &BBox, gt: &[GtObject]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, g) in gt.iter().enumerate() {
        let v = iou(b, &g.bbox);
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((k, v));
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub feature_dim: usize,
    /// Minimum pairwise distance between class means, and minimum mean norm.
    pub separation: f64,
    /// Norm of the class-specific part of each mean.
    pub class_radius: f64,
    /// Norm of the component shared by all foreground classes.
    pub foreground_offset: f64,
    pub feature_noise: f64,
    pub background_std: f64,
    pub scene_size: f64,
    pub min_box: f64,
    pub max_box: f64,
    pub objects_per_scene: usize,
    pub proposals_per_scene: usize,
    /// Box jitter as a fraction of the box side.
    pub box_jitter: f64,
    pub shots: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub novel_scenes: usize,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seen_classes: 15,
            unseen_classes: 5,
            feature_dim: 64,
            separation: 10.0,
            class_radius: 10.0,
            foreground_offset: 10.0,
            feature_noise: 1.0,
            background_std: 1.0,
            scene_size: 100.0,
            min_box: 10.0,
            max_box: 25.0,
            objects_per_scene: 3,
            proposals_per_scene: 12,
            box_jitter: 0.05,
            shots: 5,
            train_scenes: 10,
            test_scenes: 20,
            novel_scenes: 20,
            max_retries: 1000,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(format!("world: {m}")));
        if self.seen_classes == 0 {
            return fail("seen_classes must be at least 1");
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive");
        }
        if !(self.separation > 0.0) {
            return fail("separation must be positive");
        }
        if !(self.feature_noise >= 0.0) || !(self.background_std >= 0.0) {
            return fail("noise scales must be non-negative");
        }
        if !(self.min_box > 0.0) || self.max_box < self.min_box || self.max_box >= self.scene_size {
            return fail("box size range must satisfy 0 < min_box <= max_box < scene_size");
        }
        if self.proposals_per_scene < self.objects_per_scene {
            return fail("proposals_per_scene must be at least objects_per_scene");
        }
        if !(0.0..0.5).contains(&self.box_jitter) {
            return fail("box_jitter must lie in [0, 0.5)");
        }
        if self.shots == 0 {
            return fail("shots must be at least 1");
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.seen_classes + self.unseen_classes
    }

    pub fn seen_ids(&self) -> Vec<ClassId> {
        (1..=self.seen_classes as u32).map(ClassId).collect()
    }

    pub fn unseen_ids(&self) -> Vec<ClassId> {
        let lo = self.seen_classes as u32 + 1;
        (lo..lo + self.unseen_classes as u32).map(ClassId).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassModel {
    pub class_id: ClassId,
    pub mean: Vec<f64>,
    pub noise_std: f64,
    pub box_size: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: ClassId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: usize,
    pub split: Split,
    pub gt: Vec<GtObject>,
    pub proposals: Vec<Proposal>,
}

/// Per-class support features keyed by class id.
pub type SupportSet = BTreeMap<ClassId, Vec<Vec<f64>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub config: WorldConfig,
    pub class_models: Vec<ClassModel>,
    pub scenes: Vec<Scene>,
    pub support: SupportSet,
}

impl Dataset {
    pub fn scenes_in(&self, split: Split) -> impl Iterator<Item = &Scene> {
        self.scenes.iter().filter(move |s| s.split == split)
    }

    /// Support restricted to `classes`; errors if any class is missing.
    pub fn support_for(&self, classes: &[ClassId]) -> Result<SupportSet> {
        classes
            .iter()
            .map(|c| match self.support.get(c) {
                Some(v) if !v.is_empty() => Ok((*c, v.clone())),
                _ => Err(Error::EmptySupport(c.0)),
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(s)?;
        ds.config.validate()?;
        let d = ds.config.feature_dim;
        let dims_ok = ds
            .scenes
            .iter()
            .flat_map(|s| &s.proposals)
            .all(|p| p.feature.len() == d)
            && ds.support.values().flatten().all(|v| v.len() == d);
        if !dims_ok {
            return Err(Error::input(
                "dataset feature dims disagree with its config",
            ));
        }
        Ok(ds)
    }
}

/// Builds class models, scenes and support features from the config alone.
pub fn generate_world(cfg: &WorldConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let d = cfg.feature_dim;
    let shared = rng.unit_vec(d);

    let mut class_models: Vec<ClassModel> = Vec::new();
    for id in 1..=cfg.num_classes() as u32 {
        let mut placed = None;
        for _ in 0..cfg.max_retries.max(1) {
            let mut mean = rng.unit_vec(d);
            mean.iter_mut().for_each(|x| *x *= cfg.class_radius);
            axpy(cfg.foreground_offset, &shared, &mut mean);
            let far_from_origin = norm(&mean) >= cfg.separation;
            let separated = class_models
                .iter()
                .all(|m| sq_euclidean_unchecked(&m.mean, &mean).sqrt() >= cfg.separation);
            if far_from_origin && separated {
                placed = Some(mean);
                break;
            }
        }
        let mean = placed.ok_or_else(|| {
            Error::config(format!(
                "could not place class {id} at separation {} after {} tries",
                cfg.separation, cfg.max_retries
            ))
        })?;
        class_models.push(ClassModel {
            class_id: ClassId(id),
            mean,
            noise_std: cfg.feature_noise,
            box_size: [cfg.min_box, cfg.max_box],
        });
    }

    let mut support = SupportSet::new();
    for m in &class_models {
        let feats = (0..cfg.shots)
            .map(|_| sample_feature(&mut rng, m))
            .collect();
        support.insert(m.class_id, feats);
    }

    let seen: Vec<&ClassModel> = class_models.iter().take(cfg.seen_classes).collect();
    let all: Vec<&ClassModel> = class_models.iter().collect();
    let plan = [
        (Split::Train, cfg.train_scenes, &seen),
        (Split::Test, cfg.test_scenes, &seen),
        (Split::Novel, cfg.novel_scenes, &all),
    ];
    let mut scenes = Vec::new();
    for (split, count, pool) in plan {
        for _ in 0..count {
            let id = scenes.len();
            scenes.push(generate_scene(cfg, &mut rng, id, split, pool)?);
        }
    }

    Ok(Dataset {
        config: cfg.clone(),
        class_models,
        scenes,
        support,
    })
}

fn sample_feature(rng: &mut Rng, m: &ClassModel) -> Vec<f64> {
    let mut v = rng.normal_vec(m.mean.len(), m.noise_std);
    axpy(1.0, &m.mean, &mut v);
    v
}

fn random_box(cfg: &WorldConfig, rng: &mut Rng) -> Result<BBox> {
    let w = rng.uniform_range(cfg.min_box, cfg.max_box);
    let h = rng.uniform_range(cfg.min_box, cfg.max_box);
    let x = rng.uniform_range(0.0, cfg.scene_size - w);
    let y = rng.uniform_range(0.0, cfg.scene_size - h);
    BBox::new(x, y, x + w, y + h)
}

fn jitter_box(cfg: &WorldConfig, rng: &mut Rng, b: &BBox) -> Result<BBox> {
    if cfg.box_jitter == 0.0 {
        return Ok(*b);
    }
    let (w, h) = (b.width(), b.height());
    let j = cfg.box_jitter;
    let mut c = b.coords();
    for (k, side) in [w, h, w, h].into_iter().enumerate() {
        c[k] += rng.uniform_range(-j, j) * side;
    }
    BBox::new(c[0], c[1], c[2], c[3])
}

fn generate_scene(
    cfg: &WorldConfig,
    rng: &mut Rng,
    id: usize,
    split: Split,
    pool: &[&ClassModel],
) -> Result<Scene> {
    let mut gt = Vec::with_capacity(cfg.objects_per_scene);
    let mut proposals = Vec::with_capacity(cfg.proposals_per_scene);
    if !pool.is_empty() {
        for _ in 0..cfg.objects_per_scene {
            let m = pool[rng.below(pool.len())];
            let bbox = random_box(cfg, rng)?;
            gt.push(GtObject {
                bbox,
                label: m.class_id,
            });
            proposals.push(Proposal {
                bbox: jitter_box(cfg, rng, &bbox)?,
                feature: sample_feature(rng, m),
            });
        }
    }
    while proposals.len() < cfg.proposals_per_scene {
        let mut bbox = None;
        for _ in 0..cfg.max_retries.max(1) {
            let b = random_box(cfg, rng)?;
            if max_iou(&b, &gt).is_none_or(|(_, v)| v < BACKGROUND_IOU) {
                bbox = Some(b);
                break;
            }
        }
        let bbox = bbox.ok_or_else(|| Error::config("could not place a background proposal"))?;
        proposals.push(Proposal {
            bbox,
            feature: rng.normal_vec(cfg.feature_dim, cfg.background_std),
        });
    }
    Ok(Scene {
        id,
        split,
        gt,
        proposals,
    })
}

/// Training label of a proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalLabel {
    /// Foreground class, or [`ClassId::BACKGROUND`].
    Class(ClassId),
    /// Overlap in the ambiguous band; excluded from training.
    Ignore,
}

pub fn label_proposals(scene: &Scene) -> Vec<(usize, ProposalLabel)> {
    scene
        .proposals
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let label = match max_iou(&p.bbox, &scene.gt) {
                Some((g, v)) if v >= FOREGROUND_IOU => ProposalLabel::Class(scene.gt[g].label),
                Some((_, v)) if v >= BACKGROUND_IOU => ProposalLabel::Ignore,
                _ => ProposalLabel::Class(ClassId::BACKGROUND),
            };
            (k, label)
        })
        .collect()
}

/// Feature-space stand-in for image augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub strength: f64,
    /// Noise std at strength 1; normally the world's feature noise.
    pub noise_std: f64,
    pub scale: bool,
    pub rotate: bool,
    pub noise: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            strength: 0.5,
            noise_std: 1.0,
            scale: true,
            rotate: true,
            noise: true,
        }
    }
}

/// `v' = R (γ v) + ε` with a random scale, a planar rotation in a random
/// coordinate pair and Gaussian noise, all proportional to `strength`.
pub fn augment_feature(rng: &mut Rng, v: &[f64], cfg: &AugmentConfig) -> Vec<f64> {
    let s = cfg.strength.max(0.0);
    let gamma = rng.uniform_range(1.0 - s, 1.0 + s);
    let mut out: Vec<f64> = if cfg.scale {
        v.iter().map(|x| gamma * x).collect()
    } else {
        v.to_vec()
    };
    if cfg.rotate && v.len() >= 2 {
        let i = rng.below(v.len());
        let mut j = rng.below(v.len() - 1);
        if j >= i {
            j += 1;
        }
        let max_angle = s * std::f64::consts::PI / 8.0;
        let theta = rng.uniform_range(-max_angle, max_angle);
        let (sin, cos) = theta.sin_cos();
        let (a, b) = (out[i], out[j]);
        out[i] = cos * a - sin * b;
        out[j] = sin * a + cos * b;
    }
    if cfg.noise {
        let std = s * cfg.noise_std;
        for x in out.iter_mut() {
            *x += std * rng.normal();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_eq!(iou(&a, &b(2.0, 0.0, 3.0, 2.0)), 0.0);
        assert_eq!(iou(&a, &b(1.0, 1.0, 3.0, 3.0)), 1.0 / 7.0);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 2.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(serde_json::from_str::<BBox>("[0,0,-1,1]").is_err());
        let ok: BBox = serde_json::from_str("[0,0,1,1]").unwrap();
        assert_eq!(ok.area(), 1.0);
    }

    #[test]
    fn zero_noise_features_equal_means() {
        let cfg = WorldConfig {
            seen_classes: 3,
            unseen_classes: 1,
            feature_noise: 0.0,
            ..WorldConfig::default()
        };
        let ds = generate_world(&cfg).unwrap();
        for scene in &ds.scenes {
            for (k, label) in label_proposals(scene) {
                if let ProposalLabel::Class(c) = label {
                    if c != ClassId::BACKGROUND {
                        let m = &ds.class_models[c.0 as usize - 1];
                        assert_eq!(scene.proposals[k].feature, m.mean);
                    }
                }
            }
        }
    }

    #[test]
    fn class_means_respect_separation() {
        let cfg = WorldConfig::default();
        let ds = generate_world(&cfg).unwrap();
        assert_eq!(ds.class_models.len(), 20);
        for (i, a) in ds.class_models.iter().enumerate() {
            assert!(norm(&a.mean) >= cfg.separation);
            for other in &ds.class_models[i + 1..] {
                assert!(sq_euclidean_unchecked(&a.mean, &other.mean).sqrt() >= cfg.separation);
            }
        }
        assert_eq!(ds.support.len(), 20);
        assert!(ds.support.values().all(|v| v.len() == cfg.shots));
    }

    #[test]
    fn impossible_separation_errors() {
        let cfg = WorldConfig {
            seen_classes: 5,
            separation: 1000.0,
            max_retries: 20,
            ..WorldConfig::default()
        };
        assert!(generate_world(&cfg).is_err());
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = WorldConfig {
            seen_classes: 4,
            unseen_classes: 2,
            seed: 9,
            ..WorldConfig::default()
        };
        let a = generate_world(&cfg).unwrap().to_json().unwrap();
        let b = generate_world(&cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let back = Dataset::from_json(&a).unwrap();
        assert_eq!(back.to_json().unwrap(), a);
    }

    #[test]
    fn splits_hold_expected_classes() {
        let cfg = WorldConfig {
            seen_classes: 3,
            unseen_classes: 2,
            novel_scenes: 40,
            ..WorldConfig::default()
        };
        let ds = generate_world(&cfg).unwrap();
        for s in ds.scenes_in(Split::Train).chain(ds.scenes_in(Split::Test)) {
            assert!(s.gt.iter().all(|g| g.label.0 <= 3));
        }
        assert!(ds
            .scenes_in(Split::Novel)
            .flat_map(|s| &s.gt)
            .any(|g| g.label.0 > 3));
        for s in &ds.scenes {
            assert_eq!(s.proposals.len(), cfg.proposals_per_scene);
        }
    }

    #[test]
    fn labeling_bands() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let scene = Scene {
            id: 0,
            split: Split::Test,
            gt: vec![GtObject {
                bbox: gt,
                label: ClassId(4),
            }],
            proposals: vec![
                Proposal {
                    bbox: gt,
                    feature: vec![],
                },
                Proposal {
                    bbox: b(50.0, 50.0, 60.0, 60.0),
                    feature: vec![],
                },
                // 40 / 100
                Proposal {
                    bbox: b(0.0, 0.0, 4.0, 10.0),
                    feature: vec![],
                },
            ],
        };
        let labels: Vec<ProposalLabel> = label_proposals(&scene)
            .into_iter()
            .map(|(_, l)| l)
            .collect();
        assert_eq!(
            labels,
            vec![
                ProposalLabel::Class(ClassId(4)),
                ProposalLabel::Class(ClassId::BACKGROUND),
                ProposalLabel::Ignore
            ]
        );
    }

    #[test]
    fn background_proposals_avoid_objects() {
        let ds = generate_world(&WorldConfig {
            seen_classes: 3,
            unseen_classes: 0,
            box_jitter: 0.0,
            ..WorldConfig::default()
        })
        .unwrap();
        for s in &ds.scenes {
            let labels = label_proposals(s);
            for (k, l) in labels {
                let expected = if k < s.gt.len() {
                    s.gt[k].label
                } else {
                    ClassId::BACKGROUND
                };
                assert_eq!(l, ProposalLabel::Class(expected));
            }
        }
    }

    #[test]
    fn zero_strength_augmentation_is_identity() {
        let mut rng = Rng::new(1);
        let v = rng.normal_vec(16, 3.0);
        let cfg = AugmentConfig {
            strength: 0.0,
            ..AugmentConfig::default()
        };
        assert_eq!(augment_feature(&mut rng, &v, &cfg), v);
    }

    #[test]
    fn rotation_only_preserves_norm() {
        let mut rng = Rng::new(2);
        let cfg = AugmentConfig {
            strength: 1.0,
            scale: false,
            noise: false,
            ..AugmentConfig::default()
        };
        for _ in 0..100 {
            let v = rng.normal_vec(8, 2.0);
            let w = augment_feature(&mut rng, &v, &cfg);
            assert!((norm(&v) - norm(&w)).abs() < 1e-9);
            assert_ne!(v, w);
        }
    }

    #[test]
    fn perturbation_grows_with_strength() {
        let v: Vec<f64> = (0..32).map(|i| (i as f64 * 0.7).sin() * 5.0).collect();
        let mean_shift = |strength: f64| {
            let mut rng = Rng::new(77);
            let cfg = AugmentConfig {
                strength,
                ..AugmentConfig::default()
            };
            (0..1000)
                .map(|_| sq_euclidean_unchecked(&augment_feature(&mut rng, &v, &cfg), &v).sqrt())
                .sum::<f64>()
                / 1000.0
        };
        let shifts: Vec<f64> = [0.0, 0.1, 0.25, 0.5, 1.0]
            .into_iter()
            .map(mean_shift)
            .collect();
        assert_eq!(shifts[0], 0.0);
        for w in shifts.windows(2) {
            assert!(w[1] > w[0], "{shifts:?}");
        }
    }
}
