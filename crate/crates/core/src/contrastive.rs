//! Positive-pair augmentation, NT-Xent contrastive loss and the convex joint
//! objective.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{BoxCoords, FrameSample, SynonymTable, PAD};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Pos,
    Cv,
    Nlp,
}

/// Set of augmentation modes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Modes(BTreeSet<Modality>);

impl Default for Modes {
    fn default() -> Self {
        Self::all()
    }
}

impl Modes {
    pub fn all() -> Self {
        Self([Modality::Pos, Modality::Cv, Modality::Nlp].into_iter().collect())
    }

    pub fn of(modes: &[Modality]) -> Self {
        Self(modes.iter().copied().collect())
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.0.contains(&m)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn without(&self, m: Modality) -> Self {
        let mut s = self.0.clone();
        s.remove(&m);
        Self(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Half-range of the uniform jitter added to each coordinate.
    pub position_jitter: f64,
    pub contrast: (f64, f64),
    pub brightness: (f64, f64),
    pub synonym_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            position_jitter: 0.02,
            contrast: (0.8, 1.25),
            brightness: (-0.1, 0.1),
            synonym_prob: 0.3,
        }
    }
}

impl AugmentConfig {
    /// Parameters under which augmentation is the identity.
    pub fn null() -> Self {
        Self {
            position_jitter: 0.0,
            contrast: (1.0, 1.0),
            brightness: (0.0, 0.0),
            synonym_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.position_jitter >= 0.0
            && self.position_jitter < 0.5
            && 0.0 < self.contrast.0
            && self.contrast.0 <= self.contrast.1
            && self.brightness.0 <= self.brightness.1
            && (0.0..=1.0).contains(&self.synonym_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation settings {self:?}")))
        }
    }
}

/// Builds positive views of frames.
#[derive(Debug, Clone)]
pub struct Augmenter {
    pub config: AugmentConfig,
    pub modes: Modes,
    groups: Vec<Vec<u32>>,
    lookup: HashMap<u32, usize>,
}

impl Augmenter {
    pub fn new(config: &AugmentConfig, modes: &Modes, synonyms: Option<&SynonymTable>) -> Result<Self> {
        config.validate()?;
        if modes.is_empty() {
            return Err(Error::Config("augmentation needs at least one mode".into()));
        }
        if modes.contains(Modality::Nlp) && synonyms.is_none() {
            return Err(Error::Config("synonym augmentation needs a synonym table".into()));
        }
        let (groups, lookup) = match synonyms {
            Some(t) => (t.groups.clone(), t.lookup()),
            None => (Vec::new(), HashMap::new()),
        };
        Ok(Self {
            config: config.clone(),
            modes: modes.clone(),
            groups,
            lookup,
        })
    }

    fn jitter(&self, b: &BoxCoords, rng: &mut ChaCha8Rng) -> Result<BoxCoords> {
        let d = self.config.position_jitter;
        for _ in 0..2 {
            let mut j = |v: f64| (v + rng.gen_range(-d..=d)).clamp(0.0, 1.0);
            let cand = BoxCoords {
                x0: j(b.x0),
                y0: j(b.y0),
                x1: j(b.x1),
                y1: j(b.y1),
            };
            if cand.validate().is_ok() {
                return Ok(cand);
            }
        }
        Err(Error::DegenerateBox(b.to_array()))
    }

    /// Replaces a token by a different member of its synonym group.
    fn swap(&self, t: u32, rng: &mut ChaCha8Rng) -> u32 {
        match self.lookup.get(&t) {
            Some(&g) => {
                let members = &self.groups[g];
                let pick = rng.gen_range(0..members.len() - 1);
                let own = members.iter().position(|&m| m == t).expect("member");
                members[if pick >= own { pick + 1 } else { pick }]
            }
            None => t,
        }
    }

    /// Positive view of a whole frame. Token ids are authoritative; `raw_text`
    /// is carried over unchanged.
    pub fn augment(&self, sample: &FrameSample, rng: &mut ChaCha8Rng) -> Result<FrameSample> {
        let mut out = sample.clone();
        if self.modes.contains(Modality::Cv) {
            let (h, w) = (sample.frame.shape()[1], sample.frame.shape()[2]);
            let plane = h * w;
            for c in 0..3 {
                let gain = rng.gen_range(self.config.contrast.0..=self.config.contrast.1);
                let bias = rng.gen_range(self.config.brightness.0..=self.config.brightness.1);
                for v in &mut out.frame.data_mut()[c * plane..(c + 1) * plane] {
                    *v = (gain * *v + bias).clamp(0.0, 1.0);
                }
            }
        }
        for b in &mut out.boxes {
            if self.modes.contains(Modality::Pos) {
                b.coords = self.jitter(&b.coords, rng)?;
            }
            if self.modes.contains(Modality::Nlp) {
                for t in &mut b.tokens {
                    if *t != PAD && rng.gen_bool(self.config.synonym_prob) {
                        *t = self.swap(*t, rng);
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn augment(
    sample: &FrameSample,
    modes: &Modes,
    synonyms: Option<&SynonymTable>,
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FrameSample> {
    Augmenter::new(config, modes, synonyms)?.augment(sample, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    pub hidden: usize,
    pub dim: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self { hidden: 64, dim: 32 }
    }
}

/// Two-layer MLP between an embedding and the contrastive loss. The loss
/// shapes the projection; the embedding feeding the classifier keeps more
/// of what the augmentations perturb.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    hidden: Linear,
    out: Linear,
}

const LEAK: f64 = 0.01;

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, config: &ProjectionConfig) -> Result<Self> {
        if config.hidden == 0 || config.dim == 0 {
            return Err(Error::Config(format!("projection widths must be positive, got {config:?}")));
        }
        Ok(Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), d_in, config.hidden, true),
            out: Linear::new(store, rng, &format!("{name}.out"), config.hidden, config.dim, true),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        // Leaky so a head with every unit inactive still yields a nonzero embedding.
        let h = self.hidden.forward(g, p, x)?;
        let pos = g.relu(h)?;
        let pos = g.scale(pos, 1.0 - LEAK)?;
        let leak = g.scale(h, LEAK)?;
        let h = g.add(pos, leak)?;
        self.out.forward(g, p, h)
    }
}

/// Interleaves `anchors` and `positives` (both `N × d`) into `2N × d` rows
/// `a_0, p_0, a_1, p_1, …`.
pub fn interleave(g: &mut Graph, anchors: Var, positives: Var) -> Result<Var> {
    let n = g.shape(anchors)[0];
    if g.shape(positives) != g.shape(anchors) {
        return Err(Error::Config(format!(
            "anchor {:?} and positive {:?} embeddings differ in shape",
            g.shape(anchors),
            g.shape(positives)
        )));
    }
    let both = g.concat_rows(&[anchors, positives])?;
    let order: Vec<usize> = (0..n).flat_map(|i| [i, n + i]).collect();
    g.gather_rows(both, &order)
}

/// NT-Xent over `2N` interleaved embeddings: item `i`'s positive is `i ^ 1`,
/// every other item is a negative.
pub fn contrastive_loss(g: &mut Graph, embeddings: Var, temperature: f64) -> Result<Var> {
    let rows = g.shape(embeddings)[0];
    if rows < 4 || !rows.is_multiple_of(2) {
        return Err(Error::Data(format!(
            "contrastive batch needs an even number of at least 4 embeddings, got {rows}"
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let z = g.normalize_rows(embeddings)?;
    let sim = g.matmul_bt(z, z)?;
    let logits = g.scale(sim, 1.0 / temperature)?;
    let logits = g.remove_diagonal(logits)?;
    let targets: Vec<usize> = (0..rows)
        .map(|i| {
            let p = i ^ 1;
            if p < i {
                p
            } else {
                p - 1
            }
        })
        .collect();
    g.cross_entropy(logits, &targets)
}

/// Plain-value NT-Xent.
pub fn contrastive_loss_value(embeddings: &Tensor, temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let e = g.constant(embeddings.clone())?;
    let l = contrastive_loss(&mut g, e, temperature)?;
    Ok(g.value(l).data()[0])
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha {alpha} is outside [0, 1]")))
    }
}

/// `α·L_cont + (1 − α)·L_sup`.
pub fn joint_loss(g: &mut Graph, l_cont: Var, l_sup: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let a = g.scale(l_cont, alpha)?;
    let b = g.scale(l_sup, 1.0 - alpha)?;
    g.add(a, b)
}

pub fn joint_loss_value(l_cont: f64, l_sup: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * l_cont + (1.0 - alpha) * l_sup)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::data::{Label, Split, TextBox};
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use crate::nn::uniform;

    #[test]
    fn projection_head_stays_nonzero_when_every_unit_is_inactive() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = ProjectionConfig { hidden: 3, dim: 2 };
        let head = ProjectionHead::new(&mut store, &mut rng, "proj", 5, &config).unwrap();
        store.get_mut(head.hidden.bias.unwrap()).data_mut().fill(-100.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let x = g.constant(uniform(&mut rng, &[4, 5], 1.0)).unwrap();
        let y = head.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[4, 2]);
        for row in g.value(y).data().chunks(2) {
            assert!(row.iter().any(|v| *v != 0.0));
        }
        g.normalize_rows(y).unwrap();

        let zero = ProjectionConfig { hidden: 0, dim: 2 };
        assert!(matches!(ProjectionHead::new(&mut store, &mut rng, "bad", 5, &zero), Err(Error::Config(_))));
    }

    fn sample(tokens: Vec<u32>) -> FrameSample {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = uniform(&mut rng, &[3, 6, 8], 0.5).map(|v| v + 0.5);
        FrameSample {
            frame,
            boxes: vec![TextBox {
                coords: BoxCoords::new(0.2, 0.3, 0.6, 0.5).unwrap(),
                tokens,
                raw_text: String::new(),
                label: Label::Caption,
            }],
            split: Split::Train,
            program_id: 0,
        }
    }

    fn table() -> SynonymTable {
        SynonymTable::new((0..10).map(|i| vec![10 + 2 * i, 11 + 2 * i]).collect()).unwrap()
    }

    #[test]
    fn null_augmentation_is_identity() {
        let s = sample(vec![10, 12, 14, 0]);
        let out = augment(&s, &Modes::all(), Some(&table()), &AugmentConfig::null(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn modes_are_isolated() {
        let s = sample(vec![10, 12, 14, 0]);
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pos = augment(&s, &Modes::of(&[Modality::Pos]), None, &cfg, &mut rng).unwrap();
        assert_eq!(pos.frame, s.frame);
        assert_eq!(pos.boxes[0].tokens, s.boxes[0].tokens);
        assert_ne!(pos.boxes[0].coords, s.boxes[0].coords);
        for (a, b) in pos.boxes[0].coords.to_array().iter().zip(s.boxes[0].coords.to_array()) {
            assert!((a - b).abs() <= 0.02);
        }
        let cv = augment(&s, &Modes::of(&[Modality::Cv]), None, &cfg, &mut rng).unwrap();
        assert_eq!(cv.boxes, s.boxes);
        assert_ne!(cv.frame, s.frame);
        assert!(cv.frame.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn synonym_replacement_rate() {
        let s = sample((10..30).step_by(2).collect());
        let aug = Augmenter::new(&AugmentConfig::default(), &Modes::of(&[Modality::Nlp]), Some(&table())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut replaced = 0;
        for _ in 0..1000 {
            let out = aug.augment(&s, &mut rng).unwrap();
            for (a, b) in out.boxes[0].tokens.iter().zip(&s.boxes[0].tokens) {
                if a != b {
                    assert_eq!(a / 2, b / 2, "replacement stays inside the group");
                    replaced += 1;
                }
            }
        }
        let frac = replaced as f64 / 10_000.0;
        assert!((frac - 0.3).abs() <= 0.05, "{frac}");
    }

    #[test]
    fn nlp_without_table_and_empty_modes_are_rejected() {
        let cfg = AugmentConfig::default();
        assert!(matches!(Augmenter::new(&cfg, &Modes::of(&[Modality::Nlp]), None), Err(Error::Config(_))));
        assert!(matches!(Augmenter::new(&cfg, &Modes::of(&[]), None), Err(Error::Config(_))));
    }

    #[test]
    fn jitter_on_a_sliver_fails_after_retry() {
        let mut s = sample(vec![10]);
        s.boxes[0].coords = BoxCoords::new(0.5, 0.5, 0.5 + 1e-9, 0.6).unwrap();
        let cfg = AugmentConfig { position_jitter: 0.2, ..AugmentConfig::default() };
        let aug = Augmenter::new(&cfg, &Modes::of(&[Modality::Pos]), None).unwrap();
        let mut failures = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            if let Err(e) = aug.augment(&s, &mut rng) {
                assert!(matches!(e, Error::DegenerateBox(_)));
                failures += 1;
            }
        }
        assert!(failures > 0 && failures < 200);
    }

    #[test]
    fn nt_xent_closed_forms() {
        let same = Tensor::from_rows(&vec![vec![1.0, 2.0]; 4]).unwrap();
        assert!((contrastive_loss_value(&same, 0.2).unwrap() - 3f64.ln()).abs() < 1e-9);
        let same = Tensor::from_rows(&vec![vec![0.3, -1.0, 2.0]; 8]).unwrap();
        assert!((contrastive_loss_value(&same, 0.5).unwrap() - 7f64.ln()).abs() < 1e-9);
        let separated = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert!(contrastive_loss_value(&separated, 0.01).unwrap() < 1e-30);
    }

    #[test]
    fn nt_xent_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tau = 0.2;
        for _ in 0..20 {
            let e = uniform(&mut rng, &[4, 3], 1.0);
            let z: Vec<Vec<f64>> = (0..4)
                .map(|i| {
                    let r = e.row_slice(i);
                    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    r.iter().map(|v| v / n).collect()
                })
                .collect();
            let sim = |i: usize, k: usize| z[i].iter().zip(&z[k]).map(|(a, b)| a * b).sum::<f64>() / tau;
            let mut want = 0.0;
            for i in 0..4 {
                let denom: f64 = (0..4).filter(|&k| k != i).map(|k| sim(i, k).exp()).sum();
                want += -(sim(i, i ^ 1).exp() / denom).ln();
            }
            want /= 4.0;
            assert!((contrastive_loss_value(&e, tau).unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn nt_xent_gradient_and_errors() {
        let e = uniform(&mut ChaCha8Rng::seed_from_u64(8), &[6, 4], 1.0);
        let report = grad_check(|g, x| contrastive_loss(g, x[0], 0.2), &[e], GradCheckOptions::default());
        assert!(report.passed, "{report:?}");
        let zero = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        match contrastive_loss_value(&zero, 0.2) {
            Err(Error::Data(m)) => assert!(m.contains("row 1"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(contrastive_loss_value(&Tensor::zeros(&[2, 3]), 0.2).is_err());
    }

    #[test]
    fn nt_xent_rotation_invariant_and_pulls_positives() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = uniform(&mut rng, &[6, 2], 1.0);
        let (c, s) = (0.6f64, 0.8f64);
        let rotated = Tensor::from_rows(
            &(0..6).map(|i| {
                let r = e.row_slice(i);
                vec![c * r[0] - s * r[1], s * r[0] + c * r[1]]
            }).collect::<Vec<_>>(),
        )
        .unwrap();
        let base = contrastive_loss_value(&e, 0.2).unwrap();
        assert!((base - contrastive_loss_value(&rotated, 0.2).unwrap()).abs() < 1e-9);
    }

    fn anchor_term(e: &Tensor, i: usize, tau: f64) -> f64 {
        let z: Vec<Vec<f64>> = (0..e.rows())
            .map(|r| {
                let row = e.row_slice(r);
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter().map(|v| v / n).collect()
            })
            .collect();
        let sim = |k: usize| z[i].iter().zip(&z[k]).map(|(a, b)| a * b).sum::<f64>() / tau;
        let denom: f64 = (0..e.rows()).filter(|&k| k != i).map(|k| sim(k).exp()).sum();
        -(sim(i ^ 1).exp() / denom).ln()
    }

    #[test]
    fn moving_positive_toward_anchor_lowers_loss() {
        // The anchor's own term falls on every instance; the positive also acts
        // as a negative for other items, so the batch loss falls on almost all.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut batch_decreases = 0;
        for _ in 0..500 {
            let e = uniform(&mut rng, &[8, 4], 1.0);
            let mut moved = e.clone();
            for k in 0..4 {
                let (a, p) = (e.row_slice(2)[k], e.row_slice(3)[k]);
                moved.data_mut()[3 * 4 + k] = p + 0.1 * (a - p);
            }
            assert!(anchor_term(&moved, 2, 0.2) < anchor_term(&e, 2, 0.2));
            if contrastive_loss_value(&moved, 0.2).unwrap() < contrastive_loss_value(&e, 0.2).unwrap() {
                batch_decreases += 1;
            }
        }
        assert!(batch_decreases >= 490, "{batch_decreases}");
    }

    #[test]
    fn joint_loss_boundaries() {
        let (lc, ls) = (2.345678901234, 0.987654321);
        assert_eq!(joint_loss_value(lc, ls, 0.0).unwrap().to_bits(), ls.to_bits());
        assert_eq!(joint_loss_value(lc, ls, 1.0).unwrap().to_bits(), lc.to_bits());
        assert_eq!(joint_loss_value(2.0, 1.0, 0.5).unwrap(), 1.5);
        assert!(matches!(joint_loss_value(1.0, 1.0, 1.5), Err(Error::Config(_))));
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(lc)).unwrap();
        let b = g.constant(Tensor::scalar(ls)).unwrap();
        let j0 = joint_loss(&mut g, a, b, 0.0).unwrap();
        let j1 = joint_loss(&mut g, a, b, 1.0).unwrap();
        assert_eq!(g.value(j0).data()[0].to_bits(), ls.to_bits());
        assert_eq!(g.value(j1).data()[0].to_bits(), lc.to_bits());
        assert!(joint_loss(&mut g, a, b, -0.1).is_err());
    }

    #[test]
    fn interleave_orders_pairs() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap()).unwrap();
        let p = g.constant(Tensor::from_rows(&[vec![10.0], vec![20.0]]).unwrap()).unwrap();
        let z = interleave(&mut g, a, p).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, 10.0, 2.0, 20.0]);
    }
}
