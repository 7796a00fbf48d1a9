//! Procedural generator of rule-annotated matrices.
//!
//! Every panel holds one centred shape described by four attributes (kind,
//! size, shade, rotation). Rules act on attributes along rows; the correct
//! answer completes the last row under every rule and each distractor breaks
//! at least one rule.
//!
//! RPM-like instances apply one rule set to all three rows. VAP-like
//! instances apply each rule to one attribute in the first row and to a
//! different attribute in the second row.

mod raster;

pub use raster::{rasterize_shape, shade_byte, MIN_PANEL, SHADE_LEVELS, SIZE_FRACTIONS};

use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetManifest, DatasetSplits, Split, SplitCounts};
use crate::derive_seed;
use crate::instance::{Family, MatrixInstance, Panel, RuleVector, TaskStructure, MAX_ANSWERS, MIN_ANSWERS};

pub const RETRY_LIMIT: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum GenerationError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("gave up after {0} attempts to build distinct answers")]
    RetryLimit(usize),
}

#[derive(Debug, Error, PartialEq)]
#[error("rule {0} is not in the vocabulary")]
pub struct VocabularyError(pub String);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Triangle,
    Pentagon,
    Hexagon,
    Square,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] =
        [ShapeKind::Circle, ShapeKind::Triangle, ShapeKind::Pentagon, ShapeKind::Hexagon, ShapeKind::Square];

    pub fn sides(self) -> usize {
        match self {
            ShapeKind::Circle => 0,
            ShapeKind::Triangle => 3,
            ShapeKind::Pentagon => 5,
            ShapeKind::Hexagon => 6,
            ShapeKind::Square => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Kind,
    Size,
    Shade,
    Rotation,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [Attribute::Kind, Attribute::Size, Attribute::Shade, Attribute::Rotation];

    /// Number of levels; values are indices `0..levels`.
    pub fn levels(self) -> u8 {
        match self {
            Attribute::Kind | Attribute::Size | Attribute::Shade => 5,
            Attribute::Rotation => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Kind => "kind",
            Attribute::Size => "size",
            Attribute::Shade => "shade",
            Attribute::Rotation => "rotation",
        }
    }
}

/// One shape. `size` and `shade` are 1-based levels (1..=5), `rotation` is in
/// multiples of 45 degrees (0..=7). Panels hold a single shape at the centre,
/// so `position` is always 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub size: u8,
    pub shade: u8,
    pub rotation: u8,
    pub position: u8,
}

impl ShapeSpec {
    /// Attribute value as a 0-based level index.
    pub fn get(&self, attr: Attribute) -> u8 {
        match attr {
            Attribute::Kind => ShapeKind::ALL.iter().position(|&k| k == self.kind).unwrap() as u8,
            Attribute::Size => self.size - 1,
            Attribute::Shade => self.shade - 1,
            Attribute::Rotation => self.rotation,
        }
    }

    pub fn set(&mut self, attr: Attribute, value: u8) {
        debug_assert!(value < attr.levels());
        match attr {
            Attribute::Kind => self.kind = ShapeKind::ALL[value as usize],
            Attribute::Size => self.size = value + 1,
            Attribute::Shade => self.shade = value + 1,
            Attribute::Rotation => self.rotation = value,
        }
    }

    pub fn with(mut self, attr: Attribute, value: u8) -> Self {
        self.set(attr, value);
        self
    }

    fn from_levels(levels: [u8; 4]) -> Self {
        let mut s = ShapeSpec { kind: ShapeKind::Circle, size: 1, shade: 1, rotation: 0, position: 0 };
        for (a, v) in Attribute::ALL.into_iter().zip(levels) {
            s.set(a, v);
        }
        s
    }
}

/// Rule families. Progression carries its step (+1 or -1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Constant,
    Progression(i8),
    DistributeThree,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::Constant => "constant",
            Rule::Progression(_) => "progression",
            Rule::DistributeThree => "distribute_three",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RuleSpec {
    pub rule: Rule,
    pub attribute: Attribute,
}

impl RuleSpec {
    pub fn vocab_name(&self) -> String {
        format!("{}/{}", self.rule.name(), self.attribute.name())
    }
}

impl fmt::Display for RuleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rule {
            Rule::Progression(d) => write!(f, "progression({d:+})/{}", self.attribute.name()),
            r => write!(f, "{}/{}", r.name(), self.attribute.name()),
        }
    }
}

const RULE_KINDS: [Rule; 3] = [Rule::Constant, Rule::Progression(1), Rule::DistributeThree];

fn is_legal(family: Family, rule: Rule, attr: Attribute) -> bool {
    match (rule, attr) {
        (Rule::Progression(_), Attribute::Kind) => false,
        // a single row cannot pin the third value of a distribution
        (Rule::DistributeThree, _) => family == Family::Rpm3x3,
        _ => true,
    }
}

/// Legal (rule, attribute) pairs in vocabulary order: rule-major.
pub fn legal_pairs(family: Family) -> Vec<(Rule, Attribute)> {
    RULE_KINDS
        .iter()
        .flat_map(|&r| Attribute::ALL.iter().map(move |&a| (r, a)))
        .filter(|&(r, a)| is_legal(family, r, a))
        .collect()
}

pub fn rule_vocabulary(family: Family) -> Vec<String> {
    legal_pairs(family).into_iter().map(|(rule, attribute)| RuleSpec { rule, attribute }.vocab_name()).collect()
}

/// Multi-hot encoding; bit `i` is set iff `vocabulary[i]` occurs in `specs`.
pub fn encode_rules(specs: &[RuleSpec], vocabulary: &[String]) -> Result<RuleVector, VocabularyError> {
    let mut bits = vec![0u8; vocabulary.len()];
    for spec in specs {
        let name = spec.vocab_name();
        let i = vocabulary.iter().position(|v| *v == name).ok_or(VocabularyError(name))?;
        bits[i] = 1;
    }
    Ok(RuleVector(bits))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub family: Family,
    #[serde(default = "default_panel")]
    pub panel: (usize, usize),
    pub n_a: usize,
    /// Inclusive range of rules per instance.
    #[serde(default = "default_rules")]
    pub rules_per_instance: (usize, usize),
    pub splits: SplitCounts,
    pub seed: u64,
}

fn default_panel() -> (usize, usize) {
    (64, 64)
}

fn default_rules() -> (usize, usize) {
    (1, 3)
}

impl GeneratorConfig {
    pub fn new(family: Family, n_a: usize, splits: SplitCounts, seed: u64) -> Self {
        Self { family, panel: default_panel(), n_a, rules_per_instance: default_rules(), splits, seed }
    }

    pub fn structure(&self) -> TaskStructure {
        TaskStructure::for_family(self.family, self.n_a)
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        let err = |m: String| Err(GenerationError::Config(m));
        if !(MIN_ANSWERS..=MAX_ANSWERS).contains(&self.n_a) {
            return err(format!("n_a = {} outside [2, 8]", self.n_a));
        }
        let (lo, hi) = self.rules_per_instance;
        if lo < 1 || hi > 3 || lo > hi {
            return err(format!("rules_per_instance ({lo}, {hi}) must satisfy 1 <= lo <= hi <= 3"));
        }
        if self.panel.0 < MIN_PANEL || self.panel.1 < MIN_PANEL {
            return err(format!("panel {:?} smaller than {MIN_PANEL}x{MIN_PANEL}", self.panel));
        }
        Ok(())
    }
}

/// Rotation is only visible on shapes without 45-degree symmetry, so when it
/// is ruled the kind is restricted to these and may not vary by distribution.
const ROTATION_SAFE_KINDS: [u8; 2] = [1, 2];

fn compatible(chosen: &[RuleSpec], rule: Rule, attr: Attribute) -> bool {
    if chosen.iter().any(|s| s.attribute == attr) {
        return false;
    }
    let distributes_kind = |s: &RuleSpec| s.attribute == Attribute::Kind && s.rule == Rule::DistributeThree;
    match attr {
        Attribute::Rotation => !chosen.iter().any(distributes_kind),
        Attribute::Kind if rule == Rule::DistributeThree => !chosen.iter().any(|s| s.attribute == Attribute::Rotation),
        _ => true,
    }
}

/// Draws 1-3 rules with pairwise-distinct attributes. The first pair is
/// uniform over the legal table; later ones are uniform over the pairs still
/// compatible with those already drawn.
pub fn sample_rules<R: Rng + ?Sized>(rng: &mut R, config: &GeneratorConfig) -> Vec<RuleSpec> {
    let (lo, hi) = config.rules_per_instance;
    let count = rng.random_range(lo..=hi);
    let table = legal_pairs(config.family);
    let mut chosen: Vec<RuleSpec> = Vec::with_capacity(count);
    while chosen.len() < count {
        let options: Vec<_> = table.iter().filter(|&&(r, a)| compatible(&chosen, r, a)).collect();
        let Some(&&(rule, attribute)) = options.choose(rng) else { break };
        let rule = match rule {
            Rule::Progression(_) => Rule::Progression(if rng.random_bool(0.5) { 1 } else { -1 }),
            r => r,
        };
        chosen.push(RuleSpec { rule, attribute });
    }
    chosen
}

/// An instance together with the attribute-level description it was drawn
/// from.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedInstance {
    pub instance: MatrixInstance,
    /// Rules governing each context row (identical rows for RPMs).
    pub row_rules: Vec<Vec<RuleSpec>>,
    /// Shapes in the context grid, row-major; `None` at the missing slot.
    pub grid: Vec<Option<ShapeSpec>>,
    pub answers: Vec<ShapeSpec>,
}

fn wrap_add(value: u8, delta: i32, levels: u8) -> u8 {
    (value as i32 + delta).rem_euclid(levels as i32) as u8
}

/// Values of one attribute for a `rows x 3` block under `rule`.
fn rule_values<R: Rng + ?Sized>(rng: &mut R, rule: Rule, attr: Attribute, rows: usize, kinds: &[u8]) -> Vec<[u8; 3]> {
    let levels = attr.levels();
    let pick = |rng: &mut R| -> u8 {
        if attr == Attribute::Kind {
            *kinds.choose(rng).unwrap()
        } else {
            rng.random_range(0..levels)
        }
    };
    match rule {
        Rule::Constant => {
            let v = pick(rng);
            vec![[v; 3]; rows]
        }
        Rule::Progression(step) => (0..rows)
            .map(|_| {
                let start = if attr == Attribute::Rotation {
                    rng.random_range(0..levels)
                } else if step > 0 {
                    rng.random_range(0..levels - 2)
                } else {
                    rng.random_range(2..levels)
                };
                [0, 1, 2].map(|c| wrap_add(start, step as i32 * c, levels))
            })
            .collect(),
        Rule::DistributeThree => {
            let mut pool: Vec<u8> = if attr == Attribute::Kind { kinds.to_vec() } else { (0..levels).collect() };
            pool.shuffle(rng);
            let set = [pool[0], pool[1], pool[2]];
            let shift = rng.random_range(1..=2usize);
            (0..rows).map(|r| [0, 1, 2].map(|c| set[(c + r * shift) % 3])).collect()
        }
    }
}

/// Shapes for a `rows x 3` block governed by `rules`; free attributes are
/// held at one random level across the block.
fn block_shapes<R: Rng + ?Sized>(rng: &mut R, rules: &[RuleSpec], rows: usize) -> Vec<[ShapeSpec; 3]> {
    let rotation_ruled = rules.iter().any(|s| s.attribute == Attribute::Rotation);
    let all_kinds: Vec<u8> = (0..5).collect();
    let kinds: &[u8] = if rotation_ruled { &ROTATION_SAFE_KINDS } else { &all_kinds };
    let mut levels = vec![[[0u8; 4]; 3]; rows];
    for (ai, attr) in Attribute::ALL.into_iter().enumerate() {
        let rule = rules.iter().find(|s| s.attribute == attr).map_or(Rule::Constant, |s| s.rule);
        for (r, row) in rule_values(rng, rule, attr, rows, kinds).into_iter().enumerate() {
            for c in 0..3 {
                levels[r][c][ai] = row[c];
            }
        }
    }
    levels.into_iter().map(|row| row.map(ShapeSpec::from_levels)).collect()
}

/// VAP targets: each rule moves to a different, unused attribute.
fn vap_targets<R: Rng + ?Sized>(rng: &mut R, source: &[RuleSpec]) -> Option<Vec<RuleSpec>> {
    let mut out: Vec<RuleSpec> = Vec::new();
    for spec in source {
        let options: Vec<Attribute> = Attribute::ALL
            .into_iter()
            .filter(|&a| a != spec.attribute && is_legal(Family::Vap2x3, spec.rule, a) && compatible(&out, spec.rule, a))
            .collect();
        let &attribute = options.choose(rng)?;
        out.push(RuleSpec { rule: spec.rule, attribute });
    }
    Some(out)
}

/// Distractor candidates in preference order: one ruled attribute moved by
/// one level (wrapping); then the same combined with a one-level move of a
/// free attribute. Under a rotation rule the kind stays rotation-safe, so a
/// rotation move never disappears into a symmetric shape.
fn distractor_tiers(correct: &ShapeSpec, rules: &[RuleSpec]) -> [Vec<ShapeSpec>; 2] {
    let ruled: Vec<Attribute> = rules.iter().map(|s| s.attribute).collect();
    let rotation_ruled = ruled.contains(&Attribute::Rotation);
    let free: Vec<Attribute> = Attribute::ALL.into_iter().filter(|a| !ruled.contains(a)).collect();
    let mut first = Vec::new();
    for &a in &ruled {
        for d in [-1, 1] {
            first.push(correct.with(a, wrap_add(correct.get(a), d, a.levels())));
        }
    }
    let mut second = Vec::new();
    for base in &first {
        for &a in &free {
            for d in [-1, 1] {
                let cand = base.with(a, wrap_add(base.get(a), d, a.levels()));
                if !rotation_ruled || ROTATION_SAFE_KINDS.contains(&cand.get(Attribute::Kind)) {
                    second.push(cand);
                }
            }
        }
    }
    [first, second]
}

/// Builds one instance. Fails after [`RETRY_LIMIT`] attempts when the
/// answers cannot be made pixel-distinct.
pub fn generate_instance<R: Rng + ?Sized>(rng: &mut R, config: &GeneratorConfig) -> Result<GeneratedInstance, GenerationError> {
    config.validate()?;
    let structure = config.structure();
    let vocab = rule_vocabulary(config.family);
    let (ph, pw) = config.panel;
    for _ in 0..RETRY_LIMIT {
        let rules = sample_rules(rng, config);
        let (row_rules, shapes): (Vec<Vec<RuleSpec>>, Vec<[ShapeSpec; 3]>) = match config.family {
            Family::Rpm3x3 => (vec![rules.clone(); 3], block_shapes(rng, &rules, 3)),
            Family::Vap2x3 => {
                let Some(targets) = vap_targets(rng, &rules) else { continue };
                let mut rows = block_shapes(rng, &rules, 1);
                rows.extend(block_shapes(rng, &targets, 1));
                (vec![rules.clone(), targets], rows)
            }
        };
        let answer_rules = row_rules.last().unwrap();
        let correct_shape = shapes.last().unwrap()[2];
        let correct_panel = rasterize_shape(&correct_shape, ph, pw);

        let mut answers = vec![(correct_shape, correct_panel)];
        for mut tier in distractor_tiers(&correct_shape, answer_rules) {
            tier.shuffle(rng);
            for cand in tier {
                if answers.len() == config.n_a {
                    break;
                }
                let panel = rasterize_shape(&cand, ph, pw);
                if answers.iter().all(|(_, p)| *p != panel) {
                    answers.push((cand, panel));
                }
            }
        }
        if answers.len() < config.n_a {
            continue;
        }
        let mut order: Vec<usize> = (0..config.n_a).collect();
        order.shuffle(rng);
        let correct = order.iter().position(|&i| i == 0).unwrap();

        let mut grid: Vec<Option<ShapeSpec>> = shapes.iter().flat_map(|row| row.iter().copied().map(Some)).collect();
        let missing = structure.missing_slot.0 * structure.context_cols + structure.missing_slot.1;
        grid[missing] = None;
        let context: Vec<Panel> = grid.iter().flatten().map(|s| rasterize_shape(s, ph, pw)).collect();

        let all_rules: Vec<RuleSpec> = row_rules.iter().flatten().copied().collect();
        let encoded = encode_rules(&all_rules, &vocab).expect("generated rules are legal");
        return Ok(GeneratedInstance {
            instance: MatrixInstance {
                context,
                answers: order.iter().map(|&i| answers[i].1.clone()).collect(),
                correct,
                rules: encoded,
            },
            row_rules,
            grid,
            answers: order.iter().map(|&i| answers[i].0).collect(),
        });
    }
    Err(GenerationError::RetryLimit(RETRY_LIMIT))
}

/// Instance `index` of `split`: a pure function of the master seed, the
/// split and the index.
pub fn generate_indexed(config: &GeneratorConfig, split: Split, index: usize) -> Result<GeneratedInstance, GenerationError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[split.index(), index as u64]));
    generate_instance(&mut rng, config)
}

/// Generates every split of a dataset (in parallel, order preserved).
pub fn generate_dataset(config: &GeneratorConfig) -> Result<(DatasetManifest, DatasetSplits), GenerationError> {
    config.validate()?;
    let mut splits = DatasetSplits::default();
    for split in Split::ALL {
        let items: Result<Vec<_>, _> = (0..config.splits.get(split))
            .into_par_iter()
            .map(|i| generate_indexed(config, split, i).map(|g| g.instance))
            .collect();
        *splits.get_mut(split) = items?;
    }
    let manifest =
        DatasetManifest::new(config.structure(), config.panel, rule_vocabulary(config.family), config.splits, config.seed);
    Ok((manifest, splits))
}
