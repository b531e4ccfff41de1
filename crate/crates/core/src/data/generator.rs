//! Synthetic news-frame generator.
//!
//! Every frame is rendered from a [`LayoutTemplate`] (one template per
//! program). Templates fix where each informative class sits vertically, its
//! tint (captions and subtitles share one), and which members of each synonym
//! group the program prefers. Boxes of one class in a frame form a single
//! line of side-by-side segments. The
//! generalization split uses templates never seen by the train/standard
//! splits; the vertical order caption < person info < subtitle holds in all
//! of them, while absolute positions, colors and word choice shift.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ppm::{quantize, write_frame};
use super::types::{BoxCoords, FrameSample, Label, Split, TextBox, MAX_BOXES, NUM_CLASSES};
use super::vocab::{tokenize, SynonymTable, Vocab};
use crate::error::{Error, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::rng::{stream, DATA_FRAME, DATA_GLOBAL, DATA_TEMPLATE};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub train_frames: usize,
    pub standard_frames: usize,
    pub generalization_frames: usize,
    pub train_templates: usize,
    pub generalization_templates: usize,
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Caption, subtitle, person info, others.
    pub class_proportions: [f64; NUM_CLASSES],
    pub vocab_size: usize,
    pub max_tokens: usize,
    /// Probability that a caption or subtitle word comes from the shared pool.
    pub shared_token_prob: f64,
    /// Half-range of the uniform jitter on an informative box's vertical center.
    pub position_jitter: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            frame_height: 96,
            frame_width: 128,
            train_frames: 250,
            standard_frames: 60,
            generalization_frames: 60,
            train_templates: 12,
            generalization_templates: 3,
            min_boxes: 4,
            max_boxes: 12,
            class_proportions: [0.25, 0.30, 0.20, 0.25],
            vocab_size: 256,
            max_tokens: 8,
            shared_token_prob: 0.6,
            position_jitter: 0.03,
        }
    }
}

impl DatasetConfig {
    /// The frame size used by the original training setup.
    pub fn full_scale() -> Self {
        Self {
            frame_height: 384,
            frame_width: 480,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.frame_height < 8 || self.frame_width < 8 {
            return fail(format!(
                "frame {}x{} is too small",
                self.frame_height, self.frame_width
            ));
        }
        if self.train_frames + self.standard_frames + self.generalization_frames == 0 {
            return fail("dataset must contain at least one frame".into());
        }
        if self.train_templates == 0 {
            return fail("at least one training template is required".into());
        }
        if self.generalization_frames > 0 && self.generalization_templates == 0 {
            return fail("generalization frames need at least one held-out template".into());
        }
        if self.min_boxes == 0 || self.min_boxes > self.max_boxes || self.max_boxes > MAX_BOXES {
            return fail(format!(
                "boxes per frame must satisfy 1 <= min ({}) <= max ({}) <= {MAX_BOXES}",
                self.min_boxes, self.max_boxes
            ));
        }
        let total: f64 = self.class_proportions.iter().sum();
        if self.class_proportions.iter().any(|p| !p.is_finite() || *p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return fail(format!(
                "class proportions {:?} must be non-negative and sum to 1",
                self.class_proportions
            ));
        }
        if self.vocab_size < 64 {
            return fail(format!("vocab_size {} < 64", self.vocab_size));
        }
        if self.max_tokens < 3 {
            return fail(format!("max_tokens {} < 3", self.max_tokens));
        }
        if !(0.5..=1.0).contains(&self.shared_token_prob) {
            return fail(format!(
                "shared_token_prob {} must lie in [0.5, 1] so caption/subtitle vocabularies overlap",
                self.shared_token_prob
            ));
        }
        if !(0.0..=0.05).contains(&self.position_jitter) {
            return fail(format!("position_jitter {} outside [0, 0.05]", self.position_jitter));
        }
        Ok(())
    }

    pub fn frames_in(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_frames,
            Split::Standard => self.standard_frames,
            Split::Generalization => self.generalization_frames,
        }
    }
}

/// Word-id ranges of the closed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabLayout {
    pub shared: std::ops::Range<u32>,
    pub caption: std::ops::Range<u32>,
    pub subtitle: std::ops::Range<u32>,
    pub names: std::ops::Range<u32>,
    pub size: u32,
}

impl VocabLayout {
    pub fn new(size: usize) -> Self {
        let avail = (size - 2) as u32;
        let take = |frac: f64| ((avail as f64 * frac) as u32) / 6 * 6;
        let (ns, nc, nsub, nn) = (take(0.24), take(0.20), take(0.20), take(0.16));
        let shared = 2..2 + ns;
        let caption = shared.end..shared.end + nc;
        let subtitle = caption.end..caption.end + nsub;
        let names = subtitle.end..subtitle.end + nn;
        Self {
            shared,
            caption,
            subtitle,
            names,
            size: size as u32,
        }
    }

    /// Shared words form groups of three; class-specific words groups of two.
    pub fn synonym_groups(&self) -> Vec<Vec<u32>> {
        let mut groups = Vec::new();
        for (range, width) in [
            (self.shared.clone(), 3u32),
            (self.caption.clone(), 2),
            (self.subtitle.clone(), 2),
        ] {
            let mut start = range.start;
            while start + width <= range.end {
                groups.push((start..start + width).collect());
                start += width;
            }
        }
        groups
    }
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Deterministic pronounceable word for a vocabulary id.
fn pseudo_word(id: u32) -> String {
    let mut n = id as usize;
    let mut w = String::new();
    for _ in 0..3 {
        w.push_str(ONSETS[n % ONSETS.len()]);
        n /= ONSETS.len();
        w.push_str(VOWELS[n % VOWELS.len()]);
        n /= VOWELS.len();
        if n == 0 {
            break;
        }
    }
    w
}

pub fn build_vocab(size: usize) -> Result<Vocab> {
    let mut words = vec!["<pad>".to_string(), "<unk>".to_string()];
    words.extend((2..size as u32).map(pseudo_word));
    Vocab::new(words)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLayout {
    /// Mean vertical center of the band.
    pub y_center: f64,
    /// Half-range of the uniform jitter around `y_center`.
    pub y_spread: f64,
    pub height: f64,
    pub x_center: f64,
    pub width: (f64, f64),
    pub tint: [f64; 3],
    pub ink: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutTemplate {
    pub program_id: u32,
    pub background: [f64; 3],
    pub caption: ClassLayout,
    pub person_info: ClassLayout,
    pub subtitle: ClassLayout,
    /// Per synonym group, relative preference for each member.
    pub token_preferences: Vec<Vec<f64>>,
}

impl LayoutTemplate {
    pub fn layout(&self, label: Label) -> Option<&ClassLayout> {
        match label {
            Label::Caption => Some(&self.caption),
            Label::PersonInfo => Some(&self.person_info),
            Label::Subtitle => Some(&self.subtitle),
            Label::Others => None,
        }
    }

    /// Caption band strictly above person info, person info strictly above subtitle.
    pub fn validate(&self) -> Result<()> {
        let bands = [&self.caption, &self.person_info, &self.subtitle];
        for pair in bands.windows(2) {
            let (upper, lower) = (pair[0], pair[1]);
            if upper.y_center + upper.y_spread >= lower.y_center - lower.y_spread {
                return Err(Error::Config(format!(
                    "template {}: bands overlap ({} +/- {} vs {} +/- {})",
                    self.program_id, upper.y_center, upper.y_spread, lower.y_center, lower.y_spread
                )));
            }
        }
        for b in bands {
            if b.y_center - b.y_spread - b.height / 2.0 < 0.0
                || b.y_center + b.y_spread + b.height / 2.0 > 1.0
            {
                return Err(Error::Config(format!(
                    "template {}: band at {} leaves the frame",
                    self.program_id, b.y_center
                )));
            }
        }
        Ok(())
    }
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

/// Ink that contrasts with `tint`.
fn contrasting_ink(rng: &mut ChaCha8Rng, tint: [f64; 3]) -> [f64; 3] {
    let luma = 0.299 * tint[0] + 0.587 * tint[1] + 0.114 * tint[2];
    if luma > 0.5 {
        color(rng, 0.0, 0.2)
    } else {
        color(rng, 0.8, 1.0)
    }
}

pub fn sample_template(seed: u64, program_id: u32, jitter: f64, groups: &[Vec<u32>]) -> LayoutTemplate {
    let mut rng = stream(seed, DATA_TEMPLATE, u64::from(program_id));
    let gap1 = rng.gen_range(0.16..0.26);
    let gap2 = rng.gen_range(0.16..0.26);
    let top = rng.gen_range(0.09..(0.91 - gap1 - gap2));
    // Captions and subtitles share the program's banner style; person info has its own.
    let banner = color(&mut rng, 0.05, 0.95);
    let banner_ink = contrasting_ink(&mut rng, banner);
    let name_tint = color(&mut rng, 0.05, 0.95);
    let name_ink = contrasting_ink(&mut rng, name_tint);
    let mut class = |y_center: f64, height: (f64, f64), width: (f64, f64), x: (f64, f64), tint, ink| ClassLayout {
        y_center,
        y_spread: jitter,
        height: rng.gen_range(height.0..height.1),
        x_center: rng.gen_range(x.0..x.1),
        width,
        tint,
        ink,
    };
    let caption = class(top, (0.05, 0.085), (0.35, 0.75), (0.35, 0.65), banner, banner_ink);
    let person_info = class(top + gap1, (0.04, 0.06), (0.15, 0.35), (0.15, 0.5), name_tint, name_ink);
    let subtitle = class(top + gap1 + gap2, (0.05, 0.085), (0.35, 0.75), (0.35, 0.65), banner, banner_ink);
    let background = color(&mut rng, 0.1, 0.6);
    let token_preferences = groups
        .iter()
        .map(|g| g.iter().map(|_| rng.gen_range(0.02f64..1.0).powi(3)).collect())
        .collect();
    LayoutTemplate {
        program_id,
        background,
        caption,
        person_info,
        subtitle,
        token_preferences,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub frames: usize,
    pub boxes: usize,
    pub class_counts: [usize; NUM_CLASSES],
    pub program_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config: DatasetConfig,
    pub train: SplitCounts,
    pub standard: SplitCounts,
    pub generalization: SplitCounts,
}

impl Manifest {
    pub fn counts(&self, split: Split) -> &SplitCounts {
        match split {
            Split::Train => &self.train,
            Split::Standard => &self.standard,
            Split::Generalization => &self.generalization,
        }
    }

    pub fn total_boxes(&self) -> usize {
        self.train.boxes + self.standard.boxes + self.generalization.boxes
    }
}

pub const DATASET_VERSION: u32 = 1;

pub struct GeneratedDataset {
    pub manifest: Manifest,
    pub vocab: Vocab,
    pub synonyms: SynonymTable,
    pub templates: Vec<LayoutTemplate>,
    pub samples: Vec<FrameSample>,
}

/// Splits `total` into per-class counts by largest remainder.
pub fn apportion(total: usize, proportions: &[f64; NUM_CLASSES]) -> [usize; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    let mut rema = [(0.0, 0usize); NUM_CLASSES];
    for (c, p) in proportions.iter().enumerate() {
        let exact = total as f64 * p;
        counts[c] = exact.floor() as usize;
        rema[c] = (exact - exact.floor(), c);
    }
    let mut left = total - counts.iter().sum::<usize>();
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in rema.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[c] += 1;
        left -= 1;
    }
    counts
}

struct FramePlan {
    split: Split,
    program_id: u32,
    labels: Vec<Label>,
}

fn plan_frames(cfg: &DatasetConfig, seed: u64) -> Vec<FramePlan> {
    let mut rng = stream(seed, DATA_GLOBAL, 0);
    let train_programs: Vec<u32> = (0..cfg.train_templates as u32).collect();
    let held_out: Vec<u32> = (0..cfg.generalization_templates as u32)
        .map(|i| cfg.train_templates as u32 + i)
        .collect();
    let mut plans = Vec::new();
    for split in Split::ALL {
        let n = cfg.frames_in(split);
        if n == 0 {
            continue;
        }
        let programs = if split == Split::Generalization {
            &held_out
        } else {
            &train_programs
        };
        let sizes: Vec<usize> = (0..n)
            .map(|_| rng.gen_range(cfg.min_boxes..=cfg.max_boxes))
            .collect();
        let counts = apportion(sizes.iter().sum(), &cfg.class_proportions);
        let mut labels: Vec<Label> = Label::ALL
            .iter()
            .zip(counts)
            .flat_map(|(&l, c)| std::iter::repeat_n(l, c))
            .collect();
        labels.shuffle(&mut rng);
        let mut it = labels.into_iter();
        for (i, size) in sizes.into_iter().enumerate() {
            plans.push(FramePlan {
                split,
                program_id: programs[i % programs.len()],
                labels: it.by_ref().take(size).collect(),
            });
        }
    }
    plans
}

fn pick_member(rng: &mut ChaCha8Rng, members: &[u32], prefs: &[f64]) -> u32 {
    let total: f64 = prefs.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (&m, &w) in members.iter().zip(prefs) {
        if u < w {
            return m;
        }
        u -= w;
    }
    *members.last().expect("non-empty group")
}

struct TextSampler<'a> {
    layout: &'a VocabLayout,
    groups: &'a [Vec<u32>],
    shared_groups: std::ops::Range<usize>,
    caption_groups: std::ops::Range<usize>,
    subtitle_groups: std::ops::Range<usize>,
    shared_prob: f64,
}

impl<'a> TextSampler<'a> {
    fn new(layout: &'a VocabLayout, groups: &'a [Vec<u32>], shared_prob: f64) -> Self {
        let in_range = |r: &std::ops::Range<u32>| {
            let idx: Vec<usize> = groups
                .iter()
                .enumerate()
                .filter(|(_, g)| r.contains(&g[0]))
                .map(|(i, _)| i)
                .collect();
            idx[0]..idx[idx.len() - 1] + 1
        };
        Self {
            shared_groups: in_range(&layout.shared),
            caption_groups: in_range(&layout.caption),
            subtitle_groups: in_range(&layout.subtitle),
            layout,
            groups,
            shared_prob,
        }
    }

    fn words(&self, rng: &mut ChaCha8Rng, label: Label, template: &LayoutTemplate) -> Vec<u32> {
        let grouped = |own: &std::ops::Range<usize>, n: usize, rng: &mut ChaCha8Rng| {
            (0..n)
                .map(|_| {
                    let pool = if rng.gen_bool(self.shared_prob) {
                        &self.shared_groups
                    } else {
                        own
                    };
                    let g = rng.gen_range(pool.clone());
                    pick_member(rng, &self.groups[g], &template.token_preferences[g])
                })
                .collect::<Vec<_>>()
        };
        match label {
            Label::Caption => {
                let n = rng.gen_range(5..=8);
                grouped(&self.caption_groups, n, rng)
            }
            Label::Subtitle => {
                let n = rng.gen_range(4..=8);
                grouped(&self.subtitle_groups, n, rng)
            }
            Label::PersonInfo => {
                let n = rng.gen_range(2..=3);
                (0..n).map(|_| rng.gen_range(self.layout.names.clone())).collect()
            }
            Label::Others => {
                let n = rng.gen_range(1..=6);
                (0..n).map(|_| rng.gen_range(2..self.layout.size)).collect()
            }
        }
    }
}

/// A box at a uniformly random spot, for scene text and background clutter.
fn place_scene_box(rng: &mut ChaCha8Rng) -> BoxCoords {
    let w = rng.gen_range(0.1..0.5);
    let h = rng.gen_range(0.03..0.08);
    let x0 = rng.gen_range(0.0..1.0 - w);
    let y0 = rng.gen_range(0.0..1.0 - h);
    BoxCoords {
        x0,
        y0,
        x1: x0 + w,
        y1: y0 + h,
    }
}

/// Boxes of one informative class share a line and are split into side-by-side
/// segments, the way OCR reports a long line in pieces. `others` boxes are
/// redrawn a few times to avoid landing on text that is already placed.
fn place_frame(rng: &mut ChaCha8Rng, labels: &[Label], template: &LayoutTemplate) -> Vec<BoxCoords> {
    const GAP: f64 = 0.01;
    const MIN_SEGMENT: f64 = 0.05;
    let mut coords: Vec<Option<BoxCoords>> = vec![None; labels.len()];
    for label in [Label::Caption, Label::PersonInfo, Label::Subtitle] {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        let (Some(l), m) = (template.layout(label), members.len()) else { continue };
        if m == 0 {
            continue;
        }
        let yc = l.y_center + rng.gen_range(-l.y_spread..=l.y_spread);
        let h = l.height * rng.gen_range(0.9..1.1);
        let need = m as f64 * (MIN_SEGMENT + GAP) - GAP;
        let w = rng.gen_range(l.width.0..l.width.1).max(need).min(1.0);
        let xc = l.x_center + rng.gen_range(-0.05..0.05);
        let x0 = (xc - w / 2.0).clamp(0.0, 1.0 - w);
        let seg = (w - GAP * (m - 1) as f64) / m as f64;
        for (k, &i) in members.iter().enumerate() {
            let sx = x0 + k as f64 * (seg + GAP);
            coords[i] = Some(BoxCoords {
                x0: sx,
                y0: (yc - h / 2.0).max(0.0),
                x1: (sx + seg).min(1.0),
                y1: (yc + h / 2.0).min(1.0),
            });
        }
    }
    for i in 0..labels.len() {
        if coords[i].is_some() {
            continue;
        }
        let mut b = place_scene_box(rng);
        for _ in 0..16 {
            if coords.iter().flatten().all(|c| !overlaps(c, &b)) {
                break;
            }
            b = place_scene_box(rng);
        }
        coords[i] = Some(b);
    }
    coords.into_iter().flatten().collect()
}

fn overlaps(a: &BoxCoords, b: &BoxCoords) -> bool {
    a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1
}

struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize, background: [f64; 3]) -> Self {
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                let shade = 0.85 + 0.3 * y as f64 / h as f64;
                let v = (background[c] * shade).clamp(0.0, 1.0);
                data[(c * h + y) * w..(c * h + y + 1) * w].fill(v);
            }
        }
        Self { h, w, data }
    }

    fn fill(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, rgb: [f64; 3]) {
        for (c, &v) in rgb.iter().enumerate() {
            for y in y0.min(self.h)..y1.min(self.h) {
                let row = (c * self.h + y) * self.w;
                self.data[row + x0.min(self.w)..row + x1.min(self.w)].fill(v);
            }
        }
    }

    fn pixel_rect(&self, b: &BoxCoords) -> (usize, usize, usize, usize) {
        let px = |v: f64, n: usize| ((v * n as f64).round() as usize).min(n);
        let (x0, y0) = (px(b.x0, self.w), px(b.y0, self.h));
        let (x1, y1) = (px(b.x1, self.w).max(x0 + 1), px(b.y1, self.h).max(y0 + 1));
        (x0, y0, x1.min(self.w), y1.min(self.h))
    }

    /// Solid tint plus one pixel-glyph block per token.
    fn draw_text_box(&mut self, b: &BoxCoords, tokens: &[u32], tint: [f64; 3], ink: [f64; 3]) {
        let (x0, y0, x1, y1) = self.pixel_rect(b);
        self.fill(x0, y0, x1, y1, tint);
        let inner_h = (y1 - y0).saturating_sub(2).max(1);
        let mut x = x0 + 1;
        for &t in tokens {
            let width = 2 + (t % 3) as usize;
            for col in 0..width {
                if x + col >= x1.saturating_sub(1) {
                    return;
                }
                let bits = (t.wrapping_mul(2654435761) >> (col * 4)) & 0xf;
                for row in 0..inner_h {
                    if bits & (1 << (row % 4)) != 0 {
                        self.fill(x + col, y0 + 1 + row, x + col + 1, y0 + 2 + row, ink);
                    }
                }
            }
            x += width + 1;
        }
    }

    fn into_tensor(self) -> Tensor {
        let data = self.data.into_iter().map(|v| f64::from(quantize(v)) / 255.0).collect();
        Tensor::new(vec![3, self.h, self.w], data).expect("canvas shape")
    }
}

pub fn generate(cfg: &DatasetConfig, seed: u64, exec: Execution) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let layout = VocabLayout::new(cfg.vocab_size);
    let vocab = build_vocab(cfg.vocab_size)?;
    let synonyms = SynonymTable::new(layout.synonym_groups())?;
    let n_templates = cfg.train_templates + cfg.generalization_templates;
    let templates: Vec<LayoutTemplate> = (0..n_templates as u32)
        .map(|p| sample_template(seed, p, cfg.position_jitter, &synonyms.groups))
        .collect();
    for t in &templates {
        t.validate()?;
    }
    let sampler = TextSampler::new(&layout, &synonyms.groups, cfg.shared_token_prob);
    let plans = plan_frames(cfg, seed);

    let samples = try_map_indexed(exec, &plans, |i, plan| -> Result<FrameSample> {
        let mut rng = stream(seed, DATA_FRAME, i as u64);
        let template = &templates[plan.program_id as usize];
        let mut canvas = Canvas::new(cfg.frame_height, cfg.frame_width, template.background);
        for _ in 0..rng.gen_range(2..=5) {
            let b = place_scene_box(&mut rng);
            let (x0, y0, x1, y1) = canvas.pixel_rect(&BoxCoords {
                y1: (b.y1 + 0.15).min(1.0),
                ..b
            });
            let shade = color(&mut rng, 0.1, 0.7);
            canvas.fill(x0, y0, x1, y1, shade);
        }
        let placed = place_frame(&mut rng, &plan.labels, template);
        let mut boxes = Vec::with_capacity(plan.labels.len());
        for (&label, coords) in plan.labels.iter().zip(placed) {
            coords.validate()?;
            let words = sampler.words(&mut rng, label, template);
            let raw_text = vocab.detokenize(&words);
            let (tint, ink) = match template.layout(label) {
                Some(l) => (l.tint, l.ink),
                None => {
                    let tint = color(&mut rng, 0.05, 0.95);
                    (tint, contrasting_ink(&mut rng, tint))
                }
            };
            canvas.draw_text_box(&coords, &words, tint, ink);
            boxes.push(TextBox {
                coords,
                tokens: tokenize(&raw_text, &vocab, cfg.max_tokens),
                raw_text,
                label,
            });
        }
        Ok(FrameSample {
            frame: canvas.into_tensor(),
            boxes,
            split: plan.split,
            program_id: plan.program_id,
        })
    })?;

    let counts = |split: Split| {
        let mut c = SplitCounts {
            frames: 0,
            boxes: 0,
            class_counts: [0; NUM_CLASSES],
            program_ids: Vec::new(),
        };
        for s in samples.iter().filter(|s| s.split == split) {
            c.frames += 1;
            c.boxes += s.boxes.len();
            for b in &s.boxes {
                c.class_counts[b.label.index()] += 1;
            }
            if !c.program_ids.contains(&s.program_id) {
                c.program_ids.push(s.program_id);
            }
        }
        c.program_ids.sort_unstable();
        c
    };
    let manifest = Manifest {
        version: DATASET_VERSION,
        seed,
        config: cfg.clone(),
        train: counts(Split::Train),
        standard: counts(Split::Standard),
        generalization: counts(Split::Generalization),
    };
    Ok(GeneratedDataset {
        manifest,
        vocab,
        synonyms,
        templates,
        samples,
    })
}

#[derive(Serialize)]
struct AnnotationOut<'a> {
    frame: &'a str,
    #[serde(rename = "box")]
    coords: [f64; 4],
    text: &'a str,
    label: Label,
    split: Split,
    program_id: u32,
}

pub fn frame_file_name(index: usize) -> String {
    format!("frames/{index:05}.ppm")
}

impl GeneratedDataset {
    /// Writes `manifest.json`, `vocab.json`, `synonyms.json`, `frames/*.ppm`
    /// and `annotations.jsonl` under `dir`.
    pub fn write(&self, dir: &Path, exec: Execution) -> Result<()> {
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        let write_text = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write_text("manifest.json", serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        write_text("vocab.json", self.vocab.to_json()? + "\n")?;
        write_text("synonyms.json", serde_json::to_string_pretty(&self.synonyms)? + "\n")?;
        try_map_indexed(exec, &self.samples, |i, s| {
            write_frame(&dir.join(frame_file_name(i)), &s.frame)
        })?;
        let mut lines = String::new();
        for (i, s) in self.samples.iter().enumerate() {
            let name = frame_file_name(i);
            for b in &s.boxes {
                let rec = AnnotationOut {
                    frame: &name,
                    coords: b.coords.to_array(),
                    text: &b.raw_text,
                    label: b.label,
                    split: s.split,
                    program_id: s.program_id,
                };
                lines.push_str(&serde_json::to_string(&rec)?);
                lines.push('\n');
            }
        }
        write_text("annotations.jsonl", lines)
    }
}

/// Generates a dataset and writes it to `dir`.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64, dir: &Path, exec: Execution) -> Result<Manifest> {
    let ds = generate(cfg, seed, exec)?;
    ds.write(dir, exec)?;
    Ok(ds.manifest)
}
