//! Compositional grid scenes, edits, templated modifiers and rasterization.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::lexicon::{Pos, ADD_VERBS, CHANGE_VERBS, REMOVE_VERBS};
use super::{seeded_rng, DataError};
use crate::encoders::ImageGrid;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }
        }
    };
}

word_enum!(Shape {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
    Cross => "cross",
    Ring => "ring",
    Diamond => "diamond",
    Star => "star",
    Bar => "bar",
});

word_enum!(Color {
    Red => "red",
    Blue => "blue",
    Green => "green",
    Yellow => "yellow",
    Purple => "purple",
    Orange => "orange",
    Cyan => "cyan",
    Pink => "pink",
});

word_enum!(Action {
    None => "none",
    Spin => "spin",
    Swim => "swim",
});

impl Color {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Blue => [0.1, 0.2, 0.9],
            Color::Green => [0.1, 0.8, 0.2],
            Color::Yellow => [0.9, 0.9, 0.1],
            Color::Purple => [0.6, 0.1, 0.8],
            Color::Orange => [1.0, 0.55, 0.0],
            Color::Cyan => [0.1, 0.85, 0.9],
            Color::Pink => [1.0, 0.5, 0.75],
        }
    }
}

impl Action {
    /// Word used in modifiers and concept sets for this action.
    pub fn verb(self) -> &'static str {
        match self {
            Action::None => "motionless",
            Action::Spin => "spinning",
            Action::Swim => "swimming",
        }
    }

    pub fn verb_pos(self) -> Pos {
        match self {
            Action::None => Pos::Adj,
            _ => Pos::Verb,
        }
    }

    /// Manner adverb that may accompany the action.
    pub fn adverb(self) -> Option<&'static str> {
        match self {
            Action::None => None,
            Action::Spin => Some("rapidly"),
            Action::Swim => Some("gently"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attrs {
    pub shape: Shape,
    pub color: Color,
    pub action: Action,
}

impl Attrs {
    /// Every concept word an occupied cell with these attributes carries.
    pub fn concept_words(&self) -> Vec<&'static str> {
        let mut w = vec![self.shape.word(), self.color.word(), self.action.verb()];
        w.extend(self.action.adverb());
        w
    }
}

/// Grid of cells, row-major; `None` is an empty cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Option<Attrs>>,
}

impl Scene {
    pub fn occupied(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn concepts(&self) -> BTreeSet<String> {
        self.cells
            .iter()
            .flatten()
            .flat_map(|a| a.concept_words())
            .map(str::to_string)
            .collect()
    }

    /// Cell indices that differ between two scenes of equal size.
    pub fn diff_cells(&self, other: &Scene) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| self.cells[i] != other.cells[i]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EditOp {
    Add,
    Remove,
    Change,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub op: EditOp,
    pub cell: usize,
    pub before: Option<Attrs>,
    pub after: Option<Attrs>,
}

impl Edit {
    pub fn apply(&self, scene: &Scene) -> Scene {
        let mut s = scene.clone();
        s.cells[self.cell] = self.after;
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub shapes: Vec<Shape>,
    pub colors: Vec<Color>,
    pub actions: Vec<Action>,
    /// Relative weights of ADD, REMOVE, CHANGE.
    pub edit_weights: [f64; 3],
    pub min_objects: usize,
    pub max_objects: usize,
    pub noise_sigma: f32,
    /// Colors that modifiers must never mention (zero-shot training splits).
    pub holdout_colors: Vec<Color>,
    pub edits_per_reference: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 4,
            patch: 8,
            shapes: Shape::ALL[..6].to_vec(),
            colors: Color::ALL[..6].to_vec(),
            actions: Action::ALL.to_vec(),
            edit_weights: [1.0, 1.0, 1.0],
            min_objects: 3,
            max_objects: 8,
            noise_sigma: 0.02,
            holdout_colors: Vec::new(),
            edits_per_reference: 4,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.shapes.is_empty() || self.colors.is_empty() || self.actions.is_empty() {
            return Err(DataError::Config("shape, color and action enumerations must be non-empty".into()));
        }
        if self.rows < 2 || self.cols < 2 || self.patch < 2 {
            return Err(DataError::Config("grid needs at least 2x2 cells of at least 2x2 pixels".into()));
        }
        let cells = self.rows * self.cols;
        if self.min_objects < 1 || self.min_objects > self.max_objects || self.max_objects >= cells {
            return Err(DataError::Config(format!(
                "object count range {}..={} invalid for {cells} cells",
                self.min_objects, self.max_objects
            )));
        }
        if self.edit_weights.iter().any(|w| *w < 0.0) || self.edit_weights.iter().sum::<f64>() <= 0.0 {
            return Err(DataError::Config("edit weights must be non-negative and not all zero".into()));
        }
        if self.edits_per_reference == 0 {
            return Err(DataError::Config("edits_per_reference must be at least 1".into()));
        }
        if self.colors.iter().all(|c| self.holdout_colors.contains(c)) {
            return Err(DataError::Config("every enabled color is held out".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// Which image(s) of the pair a concept word is grounded in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Reference,
    Target,
    Both,
}

/// A generated (reference, modifier, target) example with ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub id: String,
    pub ref_image: String,
    pub tgt_image: String,
    pub reference: Scene,
    pub target: Scene,
    pub modifier: String,
    pub edit: Edit,
    /// C(T): content words of the modifier.
    pub text_concepts: BTreeSet<String>,
    /// C(I^r) and C(I^t), including the edit verb grounded on its side.
    pub ref_concepts: BTreeSet<String>,
    pub tgt_concepts: BTreeSet<String>,
    /// Joint token indices (reference cells first, then target cells) where
    /// each text concept is visible.
    pub concept_patches: BTreeMap<String, Vec<usize>>,
    pub ref_noise_seed: u64,
    pub tgt_noise_seed: u64,
}

impl Triplet {
    /// `C(T) ⊆ C(I^r) ∪ C(I^t)`.
    pub fn containment_holds(&self) -> bool {
        self.text_concepts
            .iter()
            .all(|c| self.ref_concepts.contains(c) || self.tgt_concepts.contains(c))
    }
}

pub fn random_scene(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Scene {
    let cells = cfg.cells();
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let picked = rand::seq::index::sample(rng, cells, n);
    let mut scene = Scene {
        rows: cfg.rows,
        cols: cfg.cols,
        cells: vec![None; cells],
    };
    let mut idx: Vec<usize> = picked.into_iter().collect();
    idx.sort_unstable();
    for i in idx {
        scene.cells[i] = Some(random_attrs(rng, cfg));
    }
    scene
}

fn random_attrs(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Attrs {
    Attrs {
        shape: *cfg.shapes.choose(rng).unwrap(),
        color: *cfg.colors.choose(rng).unwrap(),
        action: *cfg.actions.choose(rng).unwrap(),
    }
}

/// Modifier words under construction, with the grounding side of each
/// content word.
struct Phrase {
    words: Vec<String>,
    grounding: Vec<(String, Side)>,
}

impl Phrase {
    fn new() -> Self {
        Self {
            words: Vec::new(),
            grounding: Vec::new(),
        }
    }

    fn function(&mut self, w: &str) {
        self.words.push(w.to_string());
    }

    fn content(&mut self, w: &str, side: Side) {
        self.words.push(w.to_string());
        self.grounding.push((w.to_string(), side));
    }

    fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// Appends `[color] shape [action [adverb]]` describing one cell.
fn describe(p: &mut Phrase, rng: &mut ChaCha8Rng, a: &Attrs, side: Side, p_color: f64, p_action: f64) {
    if rng.random_bool(p_color) {
        p.content(a.color.word(), side);
    }
    p.content(a.shape.word(), side);
    if a.action != Action::None && rng.random_bool(p_action) {
        p.content(a.action.verb(), side);
        if rng.random_bool(0.5) {
            p.content(a.action.adverb().unwrap(), side);
        }
    }
}

fn sample_op(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, scene: &Scene) -> EditOp {
    let occupied = scene.occupied();
    let feasible = [
        occupied < scene.cells.len(),
        occupied >= 2,
        occupied >= 1 && (cfg.colors.len() > 1 || cfg.actions.len() > 1),
    ];
    let w: Vec<f64> = cfg
        .edit_weights
        .iter()
        .zip(feasible)
        .map(|(w, ok)| if ok { *w } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (i, wi) in w.iter().enumerate() {
        if x < *wi {
            return [EditOp::Add, EditOp::Remove, EditOp::Change][i];
        }
        x -= wi;
    }
    EditOp::Change
}

fn pick_cell(rng: &mut ChaCha8Rng, scene: &Scene, occupied: bool) -> usize {
    let c: Vec<usize> = (0..scene.cells.len())
        .filter(|&i| scene.cells[i].is_some() == occupied)
        .collect();
    *c.choose(rng).unwrap()
}

/// Samples one edit of `scene` and its modifier phrase.
fn sample_edit(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, scene: &Scene) -> (Edit, Phrase) {
    let op = sample_op(rng, cfg, scene);
    let mut p = Phrase::new();
    let edit = match op {
        EditOp::Add => {
            let cell = pick_cell(rng, scene, false);
            let a = random_attrs(rng, cfg);
            let verb = *ADD_VERBS.choose(rng).unwrap();
            p.content(verb, Side::Target);
            p.function(["a", "another", "one"][rng.random_range(0..3)]);
            describe(&mut p, rng, &a, Side::Target, 0.85, 0.7);
            Edit {
                op,
                cell,
                before: None,
                after: Some(a),
            }
        }
        EditOp::Remove => {
            let cell = pick_cell(rng, scene, true);
            let a = scene.cells[cell].unwrap();
            let verb = *REMOVE_VERBS.choose(rng).unwrap();
            p.content(verb, Side::Reference);
            p.function("the");
            describe(&mut p, rng, &a, Side::Reference, 0.7, 0.5);
            if verb == "take" {
                p.function("out");
            }
            Edit {
                op,
                cell,
                before: Some(a),
                after: None,
            }
        }
        EditOp::Change => {
            let cell = pick_cell(rng, scene, true);
            let before = scene.cells[cell].unwrap();
            let can_color = cfg.colors.len() > 1;
            let can_action = cfg.actions.len() > 1;
            let (mut ch_color, mut ch_action) = match rng.random_range(0..10) {
                0..=3 => (true, false),
                4..=6 => (false, true),
                _ => (true, true),
            };
            if !can_color {
                ch_color = false;
                ch_action = true;
            }
            if !can_action {
                ch_action = false;
                ch_color = true;
            }
            let mut after = before;
            if ch_color {
                let others: Vec<Color> = cfg.colors.iter().copied().filter(|c| *c != before.color).collect();
                after.color = *others.choose(rng).unwrap();
            }
            if ch_action {
                let others: Vec<Action> = cfg.actions.iter().copied().filter(|a| *a != before.action).collect();
                after.action = *others.choose(rng).unwrap();
            }
            let template = if ch_color && !ch_action { rng.random_range(0..4) } else { rng.random_range(0..3) };
            let verb = match template {
                0 => "make",
                1 => "turn",
                2 => "change",
                _ => "paint",
            };
            debug_assert!(CHANGE_VERBS.contains(&verb));
            p.content(verb, Side::Both);
            p.function("the");
            if ch_color && rng.random_bool(0.5) {
                p.content(before.color.word(), Side::Reference);
            }
            p.content(before.shape.word(), Side::Both);
            if template == 2 {
                p.function("to");
            }
            if ch_color {
                p.content(after.color.word(), Side::Target);
            }
            if ch_action {
                if ch_color {
                    p.function("and");
                }
                p.content(after.action.verb(), Side::Target);
                if let Some(adv) = after.action.adverb() {
                    if rng.random_bool(0.4) {
                        p.content(adv, Side::Target);
                    }
                }
            }
            Edit {
                op,
                cell,
                before: Some(before),
                after: Some(after),
            }
        }
    };
    (edit, p)
}

fn mentions_holdout(p: &Phrase, cfg: &GeneratorConfig) -> bool {
    p.grounding
        .iter()
        .any(|(w, _)| cfg.holdout_colors.iter().any(|c| c.word() == w))
}

/// Builds the full triplet record for `edit` applied to `reference`.
fn assemble(
    id: String,
    ref_image: String,
    tgt_image: String,
    reference: &Scene,
    edit: Edit,
    phrase: Phrase,
    ref_noise_seed: u64,
    tgt_noise_seed: u64,
) -> Triplet {
    let target = edit.apply(reference);
    let cells = reference.cells.len();
    let mut text_concepts = BTreeSet::new();
    let mut concept_patches: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut ref_concepts = reference.concepts();
    let mut tgt_concepts = target.concepts();
    for (w, side) in &phrase.grounding {
        text_concepts.insert(w.clone());
        let patches = concept_patches.entry(w.clone()).or_default();
        // A word may be grounded on more than one side (e.g. a shape kept by a CHANGE).
        let on_ref = matches!(side, Side::Reference | Side::Both);
        let on_tgt = matches!(side, Side::Target | Side::Both);
        if on_ref {
            patches.push(edit.cell);
            ref_concepts.insert(w.clone());
        }
        if on_tgt {
            patches.push(cells + edit.cell);
            tgt_concepts.insert(w.clone());
        }
        patches.sort_unstable();
        patches.dedup();
    }
    Triplet {
        id,
        ref_image,
        tgt_image,
        reference: reference.clone(),
        target,
        modifier: phrase.text(),
        edit,
        text_concepts,
        ref_concepts,
        tgt_concepts,
        concept_patches,
        ref_noise_seed,
        tgt_noise_seed,
    }
}

const MAX_EDIT_ATTEMPTS: usize = 64;

/// Draws an edit of `reference` that respects the held-out colors and is
/// not already in `taken`.
fn draw_edit(
    rng: &mut ChaCha8Rng,
    cfg: &GeneratorConfig,
    reference: &Scene,
    taken: &[Edit],
) -> Option<(Edit, Phrase)> {
    for _ in 0..MAX_EDIT_ATTEMPTS {
        let (edit, phrase) = sample_edit(rng, cfg, reference);
        if mentions_holdout(&phrase, cfg) {
            continue;
        }
        if taken.iter().any(|e| e.cell == edit.cell) {
            continue;
        }
        return Some((edit, phrase));
    }
    None
}

/// One triplet from one seed: a fresh reference scene plus one edit.
pub fn generate_triplet(seed: u64, cfg: &GeneratorConfig) -> Result<Triplet, DataError> {
    cfg.validate()?;
    let mut rng = seeded_rng(seed, 0);
    for _ in 0..MAX_EDIT_ATTEMPTS {
        let reference = random_scene(&mut rng, cfg);
        if let Some((edit, phrase)) = draw_edit(&mut rng, cfg, &reference, &[]) {
            let id = format!("s{seed}");
            return Ok(assemble(
                id.clone(),
                format!("{id}_ref"),
                format!("{id}_tgt"),
                &reference,
                edit,
                phrase,
                seed ^ 0x5EED_0001,
                seed ^ 0x5EED_0002,
            ));
        }
    }
    Err(DataError::Config("could not sample an admissible edit".into()))
}

/// A split of `count` triplets in groups of `edits_per_reference` edits
/// sharing one reference scene, so galleries contain near-duplicate targets.
pub fn generate_split(cfg: &GeneratorConfig, seed: u64, prefix: &str, count: usize) -> Result<Vec<Triplet>, DataError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(count);
    let mut group = 0u64;
    while out.len() < count {
        let mut rng = seeded_rng(seed, group + 1);
        let reference = random_scene(&mut rng, cfg);
        let ref_image = format!("{prefix}r{group}");
        let mut taken: Vec<Edit> = Vec::new();
        for _ in 0..cfg.edits_per_reference {
            if out.len() >= count {
                break;
            }
            let Some((edit, phrase)) = draw_edit(&mut rng, cfg, &reference, &taken) else {
                break;
            };
            taken.push(edit.clone());
            let n = out.len();
            out.push(assemble(
                format!("{prefix}{n}"),
                ref_image.clone(),
                format!("{prefix}t{n}"),
                &reference,
                edit,
                phrase,
                super::mix(seed, 1_000_000 + group),
                super::mix(seed, 2_000_000 + n as u64),
            ));
        }
        group += 1;
    }
    Ok(out)
}

/// Background intensity of empty pixels.
pub const BACKGROUND: f32 = 0.1;

fn shape_mask(shape: Shape, p: usize, y: usize, x: usize) -> bool {
    // coordinates in [-1, 1] at pixel centers
    let u = (2.0 * x as f32 + 1.0) / p as f32 - 1.0;
    let v = (2.0 * y as f32 + 1.0) / p as f32 - 1.0;
    let r = (u * u + v * v).sqrt();
    match shape {
        Shape::Circle => r <= 0.8,
        Shape::Square => u.abs() <= 0.7 && v.abs() <= 0.7,
        Shape::Triangle => v >= -0.8 && v <= 0.8 && u.abs() <= (v + 0.8) * 0.5,
        Shape::Cross => (u.abs() <= 0.25 && v.abs() <= 0.85) || (v.abs() <= 0.25 && u.abs() <= 0.85),
        Shape::Ring => (0.45..=0.9).contains(&r),
        Shape::Diamond => u.abs() + v.abs() <= 0.85,
        Shape::Star => u.abs() + v.abs() <= 0.5 || (u.abs() - v.abs()).abs() <= 0.2 && r <= 0.9,
        Shape::Bar => u.abs() <= 0.9 && v.abs() <= 0.3,
    }
}

fn action_factor(action: Action, y: usize, x: usize) -> f32 {
    match action {
        Action::None => 1.0,
        Action::Spin => {
            if (x + y) % 3 == 0 {
                0.45
            } else {
                1.0
            }
        }
        Action::Swim => {
            if y % 2 == 0 {
                0.6
            } else {
                1.0
            }
        }
    }
}

/// Noise-free raster: each cell becomes a `patch × patch` block.
pub fn render_clean(scene: &Scene, patch: usize) -> ImageGrid {
    let (h, w, c) = (scene.rows * patch, scene.cols * patch, 3);
    let mut data = vec![BACKGROUND; h * w * c];
    for (cell, attrs) in scene.cells.iter().enumerate() {
        let Some(a) = attrs else { continue };
        let (cy, cx) = (cell / scene.cols, cell % scene.cols);
        let rgb = a.color.rgb();
        for y in 0..patch {
            for x in 0..patch {
                if !shape_mask(a.shape, patch, y, x) {
                    continue;
                }
                let f = action_factor(a.action, y, x);
                let (py, px) = (cy * patch + y, cx * patch + x);
                for ch in 0..c {
                    data[(py * w + px) * c + ch] = rgb[ch] * f;
                }
            }
        }
    }
    ImageGrid::new(h, w, c, data).expect("rendered values lie in [0,1]")
}

/// Raster plus seeded Gaussian pixel noise, clamped to `[0, 1]`.
pub fn render_scene(scene: &Scene, cfg: &GeneratorConfig, noise_seed: u64) -> ImageGrid {
    let clean = render_clean(scene, cfg.patch);
    if cfg.noise_sigma <= 0.0 {
        return clean;
    }
    let mut rng = seeded_rng(noise_seed, 7);
    let normal = Normal::new(0.0f32, cfg.noise_sigma).expect("valid sigma");
    let data = clean
        .data()
        .iter()
        .map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
        .collect();
    ImageGrid::new(clean.height(), clean.width(), clean.channels(), data).expect("clamped")
}
