//! Supervised, joint and contrastive training, evaluation and the ablation grid.
//!
//! A batch step runs in three phases. Every frame gets its own tape, built in
//! parallel. The frame outputs (logits, per-box embeddings) are copied into a
//! small batch-level tape that computes the loss. Its gradients are then fed
//! back into each frame tape as seeds, and the parameter gradients are summed
//! in frame order, so the result does not depend on the execution mode.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::contrastive::{contrastive_loss, interleave, joint_loss, AugmentConfig, Augmenter, Modality, Modes};
use crate::data::{Dataset, FrameSample, Label, Split, NUM_CLASSES, PAD};
use crate::error::{Error, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::metrics::{MetricsOptions, MetricsReport};
use crate::model::{ArchConfig, Cgmm, InputMask, ModelConfig};
use crate::nn::Bound;
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{stream, AUGMENT, EPOCH_ORDER};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Contrastive pre-training followed by supervised training.
    Finetune,
    /// Convex combination of the contrastive and supervised losses.
    Joint,
    SupervisedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Cv,
    Nlp,
    Pos,
    CorrelationNet,
    Contrastive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub name: String,
    #[serde(default)]
    pub drop: BTreeSet<Component>,
    pub strategy: Strategy,
}

impl AblationSpec {
    pub fn new(name: &str, drop: &[Component], strategy: Strategy) -> Self {
        Self {
            name: name.to_string(),
            drop: drop.iter().copied().collect(),
            strategy,
        }
    }

    pub fn full() -> Self {
        Self::new("full", &[], Strategy::Joint)
    }

    /// The full model and one row per removed component.
    pub fn default_grid() -> Vec<Self> {
        vec![
            Self::full(),
            Self::new("no_cv", &[Component::Cv], Strategy::Joint),
            Self::new("no_nlp", &[Component::Nlp], Strategy::Joint),
            Self::new("no_pos", &[Component::Pos], Strategy::Joint),
            Self::new("no_correlationnet", &[Component::CorrelationNet], Strategy::Joint),
            Self::new("no_contrastive", &[Component::Contrastive], Strategy::SupervisedOnly),
        ]
    }

    pub fn mask(&self) -> InputMask {
        InputMask {
            drop_cv: self.drop.contains(&Component::Cv),
            drop_nlp: self.drop.contains(&Component::Nlp),
            drop_pos: self.drop.contains(&Component::Pos),
            drop_correlation: self.drop.contains(&Component::CorrelationNet),
        }
    }

    /// Strategy actually run: dropping contrastive learning leaves supervision only.
    pub fn effective_strategy(&self) -> Strategy {
        if self.drop.contains(&Component::Contrastive) {
            Strategy::SupervisedOnly
        } else {
            self.strategy
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_frames: usize,
    pub adam: AdamConfig,
    /// Weight of the contrastive term in joint learning.
    pub alpha: f64,
    pub temperature: f64,
    pub augment: AugmentConfig,
    pub modes: Modes,
    /// Contrastive epochs run before supervised training under `finetune`.
    pub pretrain_epochs: usize,
    /// Evaluate on the standard split after every epoch.
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_frames: 8,
            adam: AdamConfig::default(),
            alpha: 0.1,
            temperature: 0.2,
            augment: AugmentConfig::default(),
            modes: Modes::all(),
            pretrain_epochs: 10,
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_frames == 0 {
            return Err(Error::Config("batch_frames must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {a:?}")));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub standard: Option<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Cgmm,
    pub optimizer: AdamState,
    pub steps: Vec<LossRecord>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Objective {
    Supervised,
    Joint { alpha: f64 },
    Contrastive,
}

/// Which embeddings take part in the contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Terms {
    visual: bool,
    text: bool,
}

impl Terms {
    fn new(modes: &Modes, mask: &InputMask) -> Self {
        Self {
            visual: !mask.drop_cv && (modes.contains(Modality::Cv) || modes.contains(Modality::Pos)),
            text: !mask.drop_nlp && modes.contains(Modality::Nlp),
        }
    }

    fn any(self) -> bool {
        self.visual || self.text
    }
}

struct Contrast<'a> {
    augmenter: &'a Augmenter,
    terms: Terms,
    temperature: f64,
    seed: u64,
}

/// One frame's tape with the nodes the batch loss reads.
struct FramePass {
    graph: Graph,
    bound: Bound,
    logits: Option<Var>,
    visual: Option<(Var, Var)>,
    text: Option<(Var, Var)>,
    /// Boxes with at least one real token; only these enter the text term.
    text_rows: Vec<usize>,
}

fn frame_pass(
    model: &Cgmm,
    sample: &FrameSample,
    aug_key: u64,
    mask: &InputMask,
    objective: Objective,
    contrast: Option<&Contrast>,
) -> Result<FramePass> {
    let mut graph = Graph::new();
    let bound = model.store.bind(&mut graph)?;
    let g = &mut graph;
    let (logits, anchor) = if objective == Objective::Contrastive {
        (None, model.embed(g, &bound, sample, mask)?)
    } else {
        let out = model.forward(g, &bound, sample, mask)?;
        (Some(out.logits), out.embeddings)
    };
    let (mut visual, mut text, mut text_rows) = (None, None, Vec::new());
    if let Some(c) = contrast.filter(|_| objective != Objective::Supervised) {
        let view = positive_view(c, sample, aug_key)?;
        let positive = model.embed(g, &bound, &view, mask)?;
        let project = |g: &mut Graph, head: &crate::contrastive::ProjectionHead, pair: Option<(Var, Var)>| -> Result<Option<(Var, Var)>> {
            match pair {
                Some((a, b)) => Ok(Some((head.forward(g, &bound, a)?, head.forward(g, &bound, b)?))),
                None => Ok(None),
            }
        };
        if c.terms.visual {
            visual = project(g, &model.proj_visual, anchor.f_vis.zip(positive.f_vis))?;
        }
        if c.terms.text {
            text = project(g, &model.proj_text, anchor.f_text.zip(positive.f_text))?;
            text_rows = (0..sample.boxes.len())
                .filter(|&i| sample.boxes[i].tokens.iter().any(|&t| t != PAD) && view.boxes[i].tokens.iter().any(|&t| t != PAD))
                .collect();
        }
    }
    Ok(FramePass {
        graph,
        bound,
        logits,
        visual,
        text,
        text_rows,
    })
}

/// Jitter can fail on thin boxes. Each retry uses its own keyed stream, so the
/// view stays a pure function of (seed, key).
const VIEW_ATTEMPTS: u64 = 8;

fn positive_view(c: &Contrast, sample: &FrameSample, key: u64) -> Result<FrameSample> {
    let mut last = None;
    for attempt in 0..VIEW_ATTEMPTS {
        let mut rng = stream(c.seed, AUGMENT, key ^ (attempt << 48));
        match c.augmenter.augment(sample, &mut rng) {
            Err(e @ Error::DegenerateBox(_)) => last = Some(e),
            other => return other,
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Leaves of the batch tape that mirror one frame output.
struct Mirror {
    source: Var,
    leaf: Var,
}

fn mirror(loss_tape: &mut Graph, frame: &Graph, v: Var, out: &mut Vec<Mirror>) -> Result<Var> {
    let leaf = loss_tape.leaf(frame.value(v).clone())?;
    out.push(Mirror { source: v, leaf });
    Ok(leaf)
}

/// Loss and parameter gradients of one batch.
fn batch_gradients(
    model: &Cgmm,
    batch: &[(&FrameSample, u64)],
    mask: &InputMask,
    objective: Objective,
    contrast: Option<&Contrast>,
    exec: Execution,
) -> Result<(f64, Vec<Tensor>)> {
    let passes = try_map_indexed(exec, batch, |_, (s, key)| frame_pass(model, s, *key, mask, objective, contrast))?;

    let mut tape = Graph::new();
    let mut mirrors: Vec<Vec<Mirror>> = passes.iter().map(|_| Vec::new()).collect();
    let mut sup = None;
    if objective != Objective::Contrastive {
        let mut parts = Vec::new();
        let mut labels = Vec::new();
        for (i, p) in passes.iter().enumerate() {
            let logits = p.logits.ok_or_else(|| Error::Internal("missing logits".into()))?;
            parts.push(mirror(&mut tape, &p.graph, logits, &mut mirrors[i])?);
            labels.extend(batch[i].0.labels());
        }
        let all = tape.concat_rows(&parts)?;
        sup = Some(tape.cross_entropy(all, &labels)?);
    }

    let mut cont_terms = Vec::new();
    if let Some(c) = contrast.filter(|_| objective != Objective::Supervised) {
        for text in [false, true] {
            let (mut anchors, mut positives) = (Vec::new(), Vec::new());
            for (i, p) in passes.iter().enumerate() {
                let pair = if text { p.text } else { p.visual };
                let Some((a, b)) = pair else { continue };
                let a = mirror(&mut tape, &p.graph, a, &mut mirrors[i])?;
                let b = mirror(&mut tape, &p.graph, b, &mut mirrors[i])?;
                if text {
                    if p.text_rows.is_empty() {
                        continue;
                    }
                    anchors.push(tape.gather_rows(a, &p.text_rows)?);
                    positives.push(tape.gather_rows(b, &p.text_rows)?);
                } else {
                    anchors.push(a);
                    positives.push(b);
                }
            }
            if anchors.is_empty() {
                continue;
            }
            let a = tape.concat_rows(&anchors)?;
            let b = tape.concat_rows(&positives)?;
            let rows = interleave(&mut tape, a, b)?;
            cont_terms.push(contrastive_loss(&mut tape, rows, c.temperature)?);
        }
    }
    let cont = match cont_terms.len() {
        0 => None,
        1 => Some(cont_terms[0]),
        k => {
            let mut s = cont_terms[0];
            for &t in &cont_terms[1..] {
                s = tape.add(s, t)?;
            }
            Some(tape.scale(s, 1.0 / k as f64)?)
        }
    };
    let loss = match (objective, cont, sup) {
        (Objective::Joint { alpha }, Some(c), Some(s)) => joint_loss(&mut tape, c, s, alpha)?,
        (Objective::Contrastive, Some(c), _) => c,
        (Objective::Contrastive, None, _) => {
            return Err(Error::Config("contrastive training has no active modality".into()));
        }
        (_, _, Some(s)) => s,
        _ => return Err(Error::Internal("batch produced no loss".into())),
    };
    let loss_value = tape.value(loss).data()[0];
    let loss_grads = tape.backward(loss)?;

    let per_frame = try_map_indexed(exec, &passes, |i, p| -> Result<Vec<Tensor>> {
        let seeds: Vec<(Var, Tensor)> = mirrors[i]
            .iter()
            .map(|m| (m.source, loss_grads.get_or_zeros(m.leaf)))
            .collect();
        let grads = p.graph.backward_seeded(&seeds)?;
        let mut acc = model.store.zeros_like();
        p.bound.accumulate(&grads, &mut acc);
        Ok(acc)
    })?;
    let mut total = model.store.zeros_like();
    for frame in &per_frame {
        for (t, g) in total.iter_mut().zip(frame) {
            t.add_assign(g);
        }
    }
    Ok((loss_value, total))
}

fn diverged(epoch: usize, step: usize, loss: f64) -> Error {
    Error::Divergence { epoch, step, loss }
}

struct Loop<'a> {
    frames: Vec<&'a FrameSample>,
    mask: InputMask,
    objective: Objective,
    contrast: Option<Contrast<'a>>,
    epochs: usize,
    /// Only parameters accepted by this filter are updated.
    trainable: fn(&str) -> bool,
}

fn run_loop(
    lp: &Loop,
    model: &mut Cgmm,
    optimizer: &mut AdamState,
    cfg: &TrainConfig,
    seed: u64,
    eval: Option<&[&FrameSample]>,
    exec: Execution,
) -> Result<(Vec<LossRecord>, Vec<EpochRecord>)> {
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let n = lp.frames.len();
    let frozen: Vec<bool> = model.store.names().iter().map(|name| !(lp.trainable)(name)).collect();
    for epoch in 0..lp.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, EPOCH_ORDER, epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(cfg.batch_frames).enumerate() {
            let batch: Vec<(&FrameSample, u64)> = chunk
                .iter()
                .map(|&i| (lp.frames[i], (epoch * n + i) as u64))
                .collect();
            let (loss, mut grads) = batch_gradients(model, &batch, &lp.mask, lp.objective, lp.contrast.as_ref(), exec)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => diverged(epoch, step, f64::NAN),
                    other => other,
                })?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged(epoch, step, loss));
            }
            for (g, &f) in grads.iter_mut().zip(&frozen) {
                if f {
                    g.data_mut().fill(0.0);
                }
            }
            optimizer.step(model.store.tensors_mut(), &grads)?;
            if model.store.tensors().iter().any(|t| !t.is_finite()) {
                return Err(diverged(epoch, step, loss));
            }
            steps.push(LossRecord {
                epoch,
                step,
                loss,
                lr: optimizer.config.lr,
            });
            epoch_loss += loss;
            batches += 1;
        }
        let standard = match eval {
            Some(frames) => Some(evaluate_frames(model, frames, "standard", &lp.mask, MetricsOptions::default(), exec)?),
            None => None,
        };
        epochs.push(EpochRecord {
            epoch,
            mean_loss: epoch_loss / batches.max(1) as f64,
            standard,
        });
    }
    Ok((steps, epochs))
}

fn check_classes(frames: &[&FrameSample]) -> Result<()> {
    let mut counts = [0usize; NUM_CLASSES];
    for s in frames {
        for b in &s.boxes {
            counts[b.label.index()] += 1;
        }
    }
    match Label::ALL.iter().find(|l| counts[l.index()] == 0) {
        Some(l) => Err(Error::Data(format!("training split has no '{}' boxes", l.as_str()))),
        None => Ok(()),
    }
}

fn new_model(dataset: &Dataset, arch: &ArchConfig, seed: u64) -> Result<Cgmm> {
    Cgmm::new(&ModelConfig::for_dataset(arch, &dataset.manifest.config), seed)
}

fn contrast_for<'a>(augmenter: &'a Augmenter, cfg: &TrainConfig, mask: &InputMask, seed: u64) -> Contrast<'a> {
    Contrast {
        augmenter,
        terms: Terms::new(&augmenter.modes, mask),
        temperature: cfg.temperature,
        seed,
    }
}

/// Modes left once dropped inputs are removed; POS jitter is meaningless without positions.
fn active_modes(modes: &Modes, mask: &InputMask) -> Modes {
    let mut m = modes.clone();
    if mask.drop_cv {
        m = m.without(Modality::Cv);
    }
    if mask.drop_nlp {
        m = m.without(Modality::Nlp);
    }
    if mask.drop_pos {
        m = m.without(Modality::Pos);
    }
    m
}

/// Contrastive pre-training of the encoders and fusion module. Labels are never read.
pub fn pretrain(
    dataset: &Dataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    epochs: usize,
    seed: u64,
    exec: Execution,
) -> Result<TrainOutcome> {
    pretrain_masked(dataset, arch, cfg, epochs, &InputMask::default(), seed, exec)
}

fn pretrain_masked(
    dataset: &Dataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    epochs: usize,
    mask: &InputMask,
    seed: u64,
    exec: Execution,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = new_model(dataset, arch, seed)?;
    let modes = active_modes(&cfg.modes, mask);
    let augmenter = Augmenter::new(&cfg.augment, &modes, Some(&dataset.synonyms))?;
    let lp = Loop {
        frames: dataset.split(Split::Train),
        mask: *mask,
        objective: Objective::Contrastive,
        contrast: Some(contrast_for(&augmenter, cfg, mask, seed)),
        epochs,
        trainable: Cgmm::is_encoder_param,
    };
    if lp.frames.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut optimizer = AdamState::new(cfg.adam, model.store.tensors());
    let (steps, epochs) = run_loop(&lp, &mut model, &mut optimizer, cfg, seed, None, exec)?;
    Ok(TrainOutcome {
        model,
        optimizer,
        steps,
        epochs,
    })
}

/// Supervised or joint training. `init` is the starting model; `finetune` requires one.
pub fn train(
    dataset: &Dataset,
    spec: &AblationSpec,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    seed: u64,
    init: Option<Cgmm>,
    exec: Execution,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let frames = dataset.split(Split::Train);
    check_classes(&frames)?;
    let mask = spec.mask();
    let strategy = spec.effective_strategy();
    let mut model = match init {
        Some(m) => m,
        None if strategy == Strategy::Finetune => {
            return Err(Error::Config("fine-tuning requires a pretrained checkpoint".into()));
        }
        None => new_model(dataset, arch, seed)?,
    };
    model.check_dataset(&dataset.manifest.config)?;
    let modes = active_modes(&cfg.modes, &mask);
    let terms = Terms::new(&modes, &mask);
    let augmenter = if strategy == Strategy::Joint && terms.any() {
        Some(Augmenter::new(&cfg.augment, &modes, Some(&dataset.synonyms))?)
    } else {
        None
    };
    let objective = match &augmenter {
        Some(_) => Objective::Joint { alpha: cfg.alpha },
        None => Objective::Supervised,
    };
    let lp = Loop {
        frames,
        mask,
        objective,
        contrast: augmenter.as_ref().map(|a| contrast_for(a, cfg, &mask, seed)),
        epochs: cfg.epochs,
        trainable: |_| true,
    };
    let standard = dataset.split(Split::Standard);
    let eval = (cfg.eval_every_epoch && !standard.is_empty()).then_some(standard.as_slice());
    let mut optimizer = AdamState::new(cfg.adam, model.store.tensors());
    let (steps, epochs) = run_loop(&lp, &mut model, &mut optimizer, cfg, seed, eval, exec)?;
    Ok(TrainOutcome {
        model,
        optimizer,
        steps,
        epochs,
    })
}

/// Runs the strategy of `spec` end to end, including pre-training for `finetune`.
pub fn train_spec(
    dataset: &Dataset,
    spec: &AblationSpec,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    seed: u64,
    exec: Execution,
) -> Result<TrainOutcome> {
    let init = if spec.effective_strategy() == Strategy::Finetune {
        Some(pretrain_masked(dataset, arch, cfg, cfg.pretrain_epochs, &spec.mask(), seed, exec)?.model)
    } else {
        None
    };
    train(dataset, spec, arch, cfg, seed, init, exec)
}

pub fn evaluate_frames(
    model: &Cgmm,
    frames: &[&FrameSample],
    split: &str,
    mask: &InputMask,
    options: MetricsOptions,
    exec: Execution,
) -> Result<MetricsReport> {
    let preds = try_map_indexed(exec, frames, |_, s| model.predict(s, mask))?;
    let truth: Vec<usize> = frames.iter().flat_map(|s| s.labels()).collect();
    let predicted: Vec<usize> = preds.into_iter().flatten().collect();
    MetricsReport::from_predictions(split, &truth, &predicted, options)
}

pub fn evaluate(
    model: &Cgmm,
    dataset: &Dataset,
    split: Split,
    mask: &InputMask,
    options: MetricsOptions,
    exec: Execution,
) -> Result<MetricsReport> {
    model.check_dataset(&dataset.manifest.config)?;
    let frames = dataset.split(split);
    if frames.is_empty() {
        return Err(Error::Data(format!("split '{}' is empty", split.as_str())));
    }
    evaluate_frames(model, &frames, split.as_str(), mask, options, exec)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub seed: u64,
    /// Standard and generalization reports, or the failure message.
    pub result: std::result::Result<Vec<MetricsReport>, String>,
}

impl AblationRow {
    pub fn run_id(&self) -> String {
        format!("{}-seed{}", self.spec.name, self.seed)
    }

    /// Mean summary F1 over the evaluated splits.
    pub fn mean_f1(&self) -> Option<f64> {
        let reports = self.result.as_ref().ok()?;
        Some(reports.iter().map(|r| r.f1()).sum::<f64>() / reports.len() as f64)
    }
}

/// Trains and evaluates every spec with the same seed and data order.
/// A failing spec becomes a failed row; the others still run.
pub fn ablate(
    dataset: &Dataset,
    grid: &[AblationSpec],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    options: MetricsOptions,
    seed: u64,
    exec: Execution,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let splits: Vec<Split> = [Split::Standard, Split::Generalization]
        .into_iter()
        .filter(|s| !dataset.split(*s).is_empty())
        .collect();
    let quiet = TrainConfig {
        eval_every_epoch: false,
        ..cfg.clone()
    };
    Ok(grid
        .iter()
        .map(|spec| {
            let result = train_spec(dataset, spec, arch, &quiet, seed, exec)
                .and_then(|out| {
                    splits
                        .iter()
                        .map(|&s| evaluate(&out.model, dataset, s, &spec.mask(), options, exec))
                        .collect::<Result<Vec<_>>>()
                })
                .map_err(|e| e.to_string());
            AblationRow {
                spec: spec.clone(),
                seed,
                result,
            }
        })
        .collect())
}

pub fn write_ablation_csv(path: &std::path::Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(crate::metrics::CSV_HEADER)?;
    for row in rows {
        let id = row.run_id();
        match &row.result {
            Ok(reports) => {
                for r in reports {
                    crate::metrics::write_rows(&mut w, &id, &row.spec.name, r)?;
                }
            }
            Err(msg) => w.write_record([id.as_str(), "", &row.spec.name, "failed", "", "", "", msg.as_str()])?,
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_loss_csv(path: &std::path::Path, steps: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "step", "loss", "lr"])?;
    for r in steps {
        w.write_record([r.epoch.to_string(), r.step.to_string(), r.loss.to_string(), r.lr.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
