//! Test-time pipeline: embed proposals, assign the nearest prototype, drop
//! proposals nearest to the background prototype, and assemble the
//! prototype bank for each evaluation protocol.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::EmbeddingNet;
use crate::error::{Error, Result};
use crate::prototype::{build_prototypes, compose_unknown_prototype, posteriors, PrototypeBank};
use crate::sim::{BBox, Scene, Split, SupportSet};
use crate::ClassId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Accept { class_id: ClassId, score: f64 },
    Reject,
}

/// Nearest-prototype decision; background wins ties because it has the
/// lowest id. The score is the posterior over the whole bank.
pub fn classify_proposal(q: &[f64], bank: &PrototypeBank) -> Result<Decision> {
    if !bank.has_background() {
        return Err(Error::input("bank has no background prototype"));
    }
    let (idx, class_id) = bank.nearest(q)?;
    if class_id.is_background() {
        return Ok(Decision::Reject);
    }
    let p = posteriors(q, bank)?;
    Ok(Decision::Accept {
        class_id,
        score: p[idx],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: ClassId,
    pub score: f64,
    /// Index of the source proposal within its scene.
    #[serde(default)]
    pub proposal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDetections {
    pub scene_id: usize,
    pub detections: Vec<Detection>,
}

/// One detection per accepted proposal, in proposal order. No duplicate
/// suppression is applied.
pub fn detect_scene(
    scene: &Scene,
    net: &EmbeddingNet,
    bank: &PrototypeBank,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (k, p) in scene.proposals.iter().enumerate() {
        let q = net.embed(&p.feature)?;
        if let Decision::Accept { class_id, score } = classify_proposal(&q, bank)? {
            out.push(Detection {
                bbox: p.bbox,
                class_id,
                score,
                proposal: k,
            });
        }
    }
    Ok(out)
}

/// Detects every scene; output follows input order for any thread count.
pub fn detect_scenes(
    scenes: &[&Scene],
    net: &EmbeddingNet,
    bank: &PrototypeBank,
    threads: usize,
) -> Result<Vec<SceneDetections>> {
    let run = |s: &&Scene| -> Result<SceneDetections> {
        Ok(SceneDetections {
            scene_id: s.id,
            detections: detect_scene(s, net, bank)?,
        })
    };
    if threads <= 1 {
        return scenes.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| scenes.par_iter().map(run).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProtocolMode {
    #[serde(rename = "fewshot")]
    FewShot,
    #[serde(rename = "openset")]
    OpenSet,
    /// Unseen prototypes only, unseen evaluation.
    #[serde(rename = "zs-uo")]
    UnseenOnly,
    /// Seen and unseen prototypes, unseen evaluation.
    #[serde(rename = "zs-mpu")]
    MixedUnseen,
    /// Seen and unseen prototypes, seen evaluation.
    #[serde(rename = "zs-mps")]
    MixedSeen,
}

impl ProtocolMode {
    pub const ALL: [ProtocolMode; 5] = [
        ProtocolMode::FewShot,
        ProtocolMode::OpenSet,
        ProtocolMode::UnseenOnly,
        ProtocolMode::MixedUnseen,
        ProtocolMode::MixedSeen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolMode::FewShot => "fewshot",
            ProtocolMode::OpenSet => "openset",
            ProtocolMode::UnseenOnly => "zs-uo",
            ProtocolMode::MixedUnseen => "zs-mpu",
            ProtocolMode::MixedSeen => "zs-mps",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown mode {s:?}")))
    }

    /// Scene split the protocol is evaluated on.
    pub fn split(self) -> Split {
        match self {
            ProtocolMode::FewShot => Split::Test,
            _ => Split::Novel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSpec {
    pub mode: ProtocolMode,
    /// Average the background prototype into the composed unknown one.
    pub unknown_includes_background: bool,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        ProtocolSpec {
            mode: ProtocolMode::FewShot,
            unknown_includes_background: true,
        }
    }
}

/// Everything the evaluator needs for one protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub mode: ProtocolMode,
    pub bank: PrototypeBank,
    pub eval_classes: Vec<ClassId>,
    /// Ground-truth relabeling applied before matching (unseen → unknown).
    pub gt_map: BTreeMap<ClassId, ClassId>,
    pub split: Split,
}

impl Protocol {
    /// Class a ground-truth label is evaluated as.
    pub fn gt_class(&self, label: ClassId) -> ClassId {
        self.gt_map.get(&label).copied().unwrap_or(label)
    }

    /// Classes reported in the "known" aggregate row.
    pub fn known_classes(&self) -> Vec<ClassId> {
        self.eval_classes
            .iter()
            .copied()
            .filter(|c| *c != ClassId::UNKNOWN)
            .collect()
    }
}

/// Builds the protocol's prototype bank with frozen parameters.
pub fn assemble_protocol(
    spec: &ProtocolSpec,
    seen: &SupportSet,
    unseen: &SupportSet,
    net: &EmbeddingNet,
    background: &[f64],
) -> Result<Protocol> {
    let require = |s: &SupportSet, what: &str| -> Result<()> {
        if s.is_empty() {
            return Err(Error::input(format!(
                "mode {} requires {what} support",
                spec.mode.name()
            )));
        }
        if let Some((c, _)) = s.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::EmptySupport(c.0));
        }
        Ok(())
    };
    let seen_ids: Vec<ClassId> = seen.keys().copied().collect();
    let unseen_ids: Vec<ClassId> = unseen.keys().copied().collect();
    let merged = || -> SupportSet {
        seen.iter()
            .chain(unseen)
            .map(|(k, v)| (*k, v.clone()))
            .collect()
    };

    let (sources, eval_classes) = match spec.mode {
        ProtocolMode::FewShot | ProtocolMode::OpenSet => {
            require(seen, "seen")?;
            (seen.clone(), seen_ids.clone())
        }
        ProtocolMode::UnseenOnly => {
            require(unseen, "unseen")?;
            (unseen.clone(), unseen_ids.clone())
        }
        ProtocolMode::MixedUnseen => {
            require(seen, "seen")?;
            require(unseen, "unseen")?;
            (merged(), unseen_ids.clone())
        }
        ProtocolMode::MixedSeen => {
            require(seen, "seen")?;
            require(unseen, "unseen")?;
            (merged(), seen_ids.clone())
        }
    };
    let mut bank = build_prototypes(net, &sources)?;
    bank.insert(ClassId::BACKGROUND, background.to_vec())?;

    let mut eval_classes = eval_classes;
    let mut gt_map = BTreeMap::new();
    if spec.mode == ProtocolMode::OpenSet {
        let unknown = compose_unknown_prototype(&bank, spec.unknown_includes_background)?;
        bank.insert(ClassId::UNKNOWN, unknown)?;
        eval_classes.push(ClassId::UNKNOWN);
        for c in unseen_ids {
            gt_map.insert(c, ClassId::UNKNOWN);
        }
    }
    Ok(Protocol {
        mode: spec.mode,
        bank,
        eval_classes,
        gt_map,
        split: spec.mode.split(),
    })
}
