//! Class, background and composed-unknown prototypes, and the energy
//! posterior `P(y = j | q) ∝ exp(-‖q - p_j‖²)` over a bank.

use serde::{Deserialize, Serialize};

use crate::embedder::EmbeddingNet;
use crate::error::{Error, Result};
use crate::numeric::{argmin, mean_of, softmax, sq_euclidean_unchecked};
use crate::sim::{iou, BBox, Proposal, SupportSet, BACKGROUND_IOU};
use crate::ClassId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: ClassId,
    pub vector: Vec<f64>,
}

/// Prototypes ordered by ascending class id, at most one per id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "BankRepr", into = "BankRepr")]
pub struct PrototypeBank {
    entries: Vec<Prototype>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankRepr {
    prototypes: Vec<Prototype>,
}

impl TryFrom<BankRepr> for PrototypeBank {
    type Error = Error;

    fn try_from(r: BankRepr) -> Result<Self> {
        let mut bank = PrototypeBank::default();
        for p in r.prototypes {
            bank.insert(p.class_id, p.vector)?;
        }
        Ok(bank)
    }
}

impl From<PrototypeBank> for BankRepr {
    fn from(b: PrototypeBank) -> Self {
        BankRepr {
            prototypes: b.entries,
        }
    }
}

impl PrototypeBank {
    pub fn insert(&mut self, class_id: ClassId, vector: Vec<f64>) -> Result<()> {
        if let Some(d) = self.dim() {
            if vector.len() != d {
                return Err(Error::shape(format!(
                    "prototype of dim {} in a bank of dim {d}",
                    vector.len()
                )));
            }
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prototype"));
        }
        match self.entries.binary_search_by_key(&class_id, |p| p.class_id) {
            Ok(_) => Err(Error::input(format!(
                "duplicate prototype for class {class_id}"
            ))),
            Err(pos) => {
                self.entries.insert(pos, Prototype { class_id, vector });
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|p| p.vector.len())
    }

    pub fn entries(&self) -> &[Prototype] {
        &self.entries
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.entries.iter().map(|p| p.class_id).collect()
    }

    pub fn index_of(&self, class_id: ClassId) -> Option<usize> {
        self.entries
            .binary_search_by_key(&class_id, |p| p.class_id)
            .ok()
    }

    pub fn get(&self, class_id: ClassId) -> Option<&[f64]> {
        self.index_of(class_id)
            .map(|i| self.entries[i].vector.as_slice())
    }

    pub fn has_background(&self) -> bool {
        self.index_of(ClassId::BACKGROUND).is_some()
    }

    /// Foreground class prototypes (neither background nor unknown).
    pub fn class_prototypes(&self) -> impl Iterator<Item = &Prototype> {
        self.entries
            .iter()
            .filter(|p| !p.class_id.is_background() && p.class_id != ClassId::UNKNOWN)
    }

    /// Copy restricted to the listed ids; missing ids are an error.
    pub fn subset(&self, ids: &[ClassId]) -> Result<PrototypeBank> {
        let mut out = PrototypeBank::default();
        for &id in ids {
            let v = self
                .get(id)
                .ok_or_else(|| Error::input(format!("bank has no prototype for class {id}")))?;
            out.insert(id, v.to_vec())?;
        }
        Ok(out)
    }

    fn check_query(&self, q: &[f64]) -> Result<()> {
        match self.dim() {
            None => Err(Error::input("empty prototype bank")),
            Some(d) if d != q.len() => Err(Error::shape(format!(
                "query of dim {} against a bank of dim {d}",
                q.len()
            ))),
            Some(_) => Ok(()),
        }
    }

    /// Energies `‖q - p_j‖²` in bank order.
    pub fn energies(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.check_query(q)?;
        Ok(self
            .entries
            .iter()
            .map(|p| sq_euclidean_unchecked(q, &p.vector))
            .collect())
    }

    /// Nearest prototype, ties broken toward the lowest class id.
    pub fn nearest(&self, q: &[f64]) -> Result<(usize, ClassId)> {
        let e = self.energies(q)?;
        let i = argmin(&e).expect("bank is nonempty");
        Ok((i, self.entries[i].class_id))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Posterior over the bank's classes, in bank order.
pub fn posteriors(q: &[f64], bank: &PrototypeBank) -> Result<Vec<f64>> {
    let neg: Vec<f64> = bank.energies(q)?.into_iter().map(|e| -e).collect();
    softmax(&neg)
}

/// Mean support embedding per class.
pub fn build_prototypes(net: &EmbeddingNet, support: &SupportSet) -> Result<PrototypeBank> {
    if support.is_empty() {
        return Err(Error::input("empty support set"));
    }
    let mut bank = PrototypeBank::default();
    for (&class_id, feats) in support {
        if feats.is_empty() {
            return Err(Error::EmptySupport(class_id.0));
        }
        let embedded = feats
            .iter()
            .map(|v| net.embed(v))
            .collect::<Result<Vec<_>>>()?;
        let p = mean_of(embedded.iter().map(Vec::as_slice), net.embed_dim())?;
        bank.insert(class_id, p)?;
    }
    Ok(bank)
}

/// Indices of proposals overlapping every ground-truth box by less than 0.3.
pub fn background_pool(proposals: &[Proposal], gt: &[BBox]) -> Vec<usize> {
    proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| gt.iter().all(|g| iou(&p.bbox, g) < BACKGROUND_IOU))
        .map(|(k, _)| k)
        .collect()
}

/// Mean embedding over the background pool.
pub fn build_background_prototype(
    net: &EmbeddingNet,
    proposals: &[Proposal],
    gt: &[BBox],
) -> Result<Vec<f64>> {
    let pool = background_pool(proposals, gt);
    if pool.is_empty() {
        return Err(Error::NoBackgroundPool);
    }
    let embedded = pool
        .iter()
        .map(|&k| net.embed(&proposals[k].feature))
        .collect::<Result<Vec<_>>>()?;
    mean_of(embedded.iter().map(Vec::as_slice), net.embed_dim())
}

/// Mean of all class prototypes, plus the background one when asked.
pub fn compose_unknown_prototype(
    bank: &PrototypeBank,
    include_background: bool,
) -> Result<Vec<f64>> {
    let mut ids: Vec<ClassId> = bank.class_prototypes().map(|p| p.class_id).collect();
    if ids.is_empty() {
        return Err(Error::input("no class prototypes to compose"));
    }
    if include_background && bank.has_background() {
        ids.push(ClassId::BACKGROUND);
    }
    compose_prototype(bank, &ids)
}

/// Mean over an explicit subset of the bank.
pub fn compose_prototype(bank: &PrototypeBank, ids: &[ClassId]) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Err(Error::input("empty prototype selection"));
    }
    let vecs = ids
        .iter()
        .map(|&id| {
            bank.get(id)
                .ok_or_else(|| Error::input(format!("bank has no prototype for class {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_of(vecs, bank.dim().unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::NetConfig;
    use crate::numeric::Rng;
    use crate::sim::Proposal;
    use proptest::prelude::{prop, prop_assert, proptest};

    fn net(seed: u64) -> EmbeddingNet {
        let cfg = NetConfig {
            input_dim: 6,
            hidden_dim: 9,
            embed_dim: 4,
            depth: 2,
        };
        EmbeddingNet::new(&cfg, &mut Rng::new(seed)).unwrap()
    }

    fn bank_of(vs: &[(u32, Vec<f64>)]) -> PrototypeBank {
        let mut b = PrototypeBank::default();
        for (c, v) in vs {
            b.insert(ClassId(*c), v.clone()).unwrap();
        }
        b
    }

    #[test]
    fn one_shot_prototype_is_the_embedding() {
        let net = net(1);
        let v = vec![0.3, -1.0, 2.0, 0.0, 1.5, -0.2];
        let mut support = SupportSet::new();
        support.insert(ClassId(1), vec![v.clone()]);
        support.insert(ClassId(2), vec![v.clone(); 4]);
        let bank = build_prototypes(&net, &support).unwrap();
        let q = net.embed(&v).unwrap();
        assert_eq!(bank.get(ClassId(1)).unwrap(), q.as_slice());
        for (a, b) in bank.get(ClassId(2)).unwrap().iter().zip(&q) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn five_shot_prototype_matches_loop_average() {
        let net = net(2);
        let mut rng = Rng::new(3);
        let feats: Vec<Vec<f64>> = (0..5).map(|_| rng.normal_vec(6, 1.0)).collect();
        let mut support = SupportSet::new();
        support.insert(ClassId(1), feats.clone());
        let bank = build_prototypes(&net, &support).unwrap();
        let mut oracle = [0.0; 4];
        for f in &feats {
            let e = net.embed(f).unwrap();
            for k in 0..4 {
                oracle[k] += e[k];
            }
        }
        for (k, o) in oracle.iter().enumerate() {
            assert!((bank.get(ClassId(1)).unwrap()[k] - o / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_class_support_errors() {
        let mut support = SupportSet::new();
        support.insert(ClassId(3), vec![]);
        let err = build_prototypes(&net(1), &support).unwrap_err();
        assert_eq!(err.to_string(), "class 3 has no support");
    }

    fn prop(bx: [f64; 4], feature: Vec<f64>) -> Proposal {
        Proposal {
            bbox: BBox::try_from(bx).unwrap(),
            feature,
        }
    }

    #[test]
    fn background_prototype_filters_by_overlap() {
        let net = net(4);
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0).unwrap()];
        let mut rng = Rng::new(5);
        let on_gt = prop([0.0, 0.0, 10.0, 10.0], rng.normal_vec(6, 1.0));
        let far = prop([50.0, 50.0, 60.0, 60.0], rng.normal_vec(6, 1.0));
        assert_eq!(
            build_background_prototype(&net, &[on_gt.clone(), far.clone()], &gt).unwrap(),
            net.embed(&far.feature).unwrap()
        );
        assert!(matches!(
            build_background_prototype(&net, std::slice::from_ref(&on_gt), &gt),
            Err(Error::NoBackgroundPool)
        ));

        // Mixed pool against a brute-force filter.
        let proposals: Vec<Proposal> = (0..20)
            .map(|_| {
                let x = rng.uniform_range(0.0, 20.0);
                let y = rng.uniform_range(0.0, 20.0);
                prop([x, y, x + 8.0, y + 8.0], rng.normal_vec(6, 1.0))
            })
            .collect();
        let mut sum = [0.0; 4];
        let mut n = 0;
        for p in &proposals {
            let mut best = 0.0f64;
            for g in &gt {
                best = best.max(iou(&p.bbox, g));
            }
            if best < 0.3 {
                let e = net.embed(&p.feature).unwrap();
                for k in 0..4 {
                    sum[k] += e[k];
                }
                n += 1;
            }
        }
        assert!(n > 0 && n < 20);
        let p0 = build_background_prototype(&net, &proposals, &gt).unwrap();
        for k in 0..4 {
            assert!((p0[k] - sum[k] / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_prototype_composition() {
        let b = bank_of(&[(1, vec![1.0, 2.0])]);
        assert_eq!(
            compose_unknown_prototype(&b, false).unwrap(),
            vec![1.0, 2.0]
        );

        let b = bank_of(&[(1, vec![1.0, -2.0]), (2, vec![-1.0, 2.0])]);
        assert_eq!(
            compose_unknown_prototype(&b, false).unwrap(),
            vec![0.0, 0.0]
        );

        let mut rng = Rng::new(8);
        let vs: Vec<(u32, Vec<f64>)> = (0..=5).map(|c| (c, rng.normal_vec(3, 1.0))).collect();
        let b = bank_of(&vs);
        let with_bg = compose_unknown_prototype(&b, true).unwrap();
        let without = compose_unknown_prototype(&b, false).unwrap();
        for k in 0..3 {
            let all: f64 = vs.iter().map(|(_, v)| v[k]).sum::<f64>() / 6.0;
            let classes: f64 = vs[1..].iter().map(|(_, v)| v[k]).sum::<f64>() / 5.0;
            assert!((with_bg[k] - all).abs() < 1e-12);
            assert!((without[k] - classes).abs() < 1e-12);
        }

        let only_bg = bank_of(&[(0, vec![1.0])]);
        assert!(compose_unknown_prototype(&only_bg, true).is_err());
    }

    #[test]
    fn posterior_examples() {
        let b = bank_of(&[(1, vec![-1.0, 0.0]), (2, vec![1.0, 0.0])]);
        assert_eq!(posteriors(&[0.0, 3.0], &b).unwrap(), vec![0.5, 0.5]);

        let b = bank_of(&[(0, vec![0.0]), (1, vec![1.0]), (2, vec![2.0])]);
        let p = posteriors(&[0.0], &b).unwrap();
        let z = 1.0 + (-1f64).exp() + (-4f64).exp();
        let expect = [1.0 / z, (-1f64).exp() / z, (-4f64).exp() / z];
        for (a, e) in p.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
        assert_eq!(b.nearest(&[2.0]).unwrap().1, ClassId(2));
        assert_eq!(b.nearest(&[0.5]).unwrap().1, ClassId(0));
        assert!(posteriors(&[0.0, 1.0], &b).is_err());
        assert!(posteriors(&[0.0], &PrototypeBank::default()).is_err());
    }

    #[test]
    fn bank_rejects_duplicates_and_bad_dims() {
        let mut b = bank_of(&[(2, vec![0.0, 1.0])]);
        assert!(b.insert(ClassId(2), vec![1.0, 1.0]).is_err());
        assert!(b.insert(ClassId(3), vec![1.0]).is_err());
        b.insert(ClassId(0), vec![5.0, 5.0]).unwrap();
        assert_eq!(b.class_ids(), vec![ClassId(0), ClassId(2)]);
        let json = b.to_json().unwrap();
        assert_eq!(PrototypeBank::from_json(&json).unwrap(), b);
        assert!(PrototypeBank::from_json(
            r#"{"prototypes":[{"class_id":1,"vector":[1]},{"class_id":1,"vector":[2]}]}"#
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn posterior_properties(
            q in prop::collection::vec(-5.0f64..5.0, 3),
            ps in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..6),
            shift in prop::collection::vec(-20.0f64..20.0, 3),
        ) {
            let vs: Vec<(u32, Vec<f64>)> = ps.iter().cloned().enumerate().map(|(i, v)| (i as u32, v)).collect();
            let bank = bank_of(&vs);
            let p = posteriors(&q, &bank).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

            // The most probable class is the nearest prototype.
            let (nearest, _) = bank.nearest(&q).unwrap();
            let best = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p[nearest] == best);

            let moved: Vec<(u32, Vec<f64>)> = vs.iter()
                .map(|(c, v)| (*c, v.iter().zip(&shift).map(|(a, s)| a + s).collect()))
                .collect();
            let qm: Vec<f64> = q.iter().zip(&shift).map(|(a, s)| a + s).collect();
            let pm = posteriors(&qm, &bank_of(&moved)).unwrap();
            for (a, b) in p.iter().zip(&pm) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn prototypes_scale_linearly(alpha in -3.0f64..3.0, seed in 0u64..50) {
            // A single linear layer makes the embedding output scale with its weights.
            let mut rng = Rng::new(seed);
            let cfg = NetConfig { input_dim: 4, hidden_dim: 0, embed_dim: 3, depth: 1 };
            let net = EmbeddingNet::new(&cfg, &mut rng).unwrap();
            let mut scaled = net.clone();
            scaled.layers[0].weight.data.iter_mut().for_each(|w| *w *= alpha);
            let mut support = SupportSet::new();
            support.insert(ClassId(1), (0..5).map(|_| rng.normal_vec(4, 1.0)).collect());
            let p = build_prototypes(&net, &support).unwrap();
            let ps = build_prototypes(&scaled, &support).unwrap();
            for (a, b) in p.get(ClassId(1)).unwrap().iter().zip(ps.get(ClassId(1)).unwrap()) {
                prop_assert!((alpha * a - b).abs() < 1e-12);
            }
        }
    }
}
