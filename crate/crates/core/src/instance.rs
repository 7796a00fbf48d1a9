//! Disjoint (panel-level) data model of an AVR problem instance.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum InstanceError {
    #[error("target answer count {target} out of range [2, {available}]")]
    AnswerCountOutOfRange { target: usize, available: usize },
    #[error("panel dimensions must be at least 1x1, got {0}x{1}")]
    EmptyPanel(usize, usize),
    #[error("pixel buffer holds {got} values, expected {expected}")]
    PixelCount { expected: usize, got: usize },
}

/// A single grayscale panel with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Panel {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self, InstanceError> {
        if height == 0 || width == 0 {
            return Err(InstanceError::EmptyPanel(height, width));
        }
        if pixels.len() != height * width {
            return Err(InstanceError::PixelCount { expected: height * width, got: pixels.len() });
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "empty panel");
        Self { height, width, pixels: vec![value; height * width] }
    }

    /// Builds a panel from 8-bit levels, mapping `k` to `k / 255`.
    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self, InstanceError> {
        Self::new(height, width, bytes.iter().map(|&b| u8_to_unit(b)).collect())
    }

    /// Quantises to 8-bit with round-to-nearest; values are clamped first.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| unit_to_u8(v)).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

pub fn u8_to_unit(b: u8) -> f32 {
    b as f32 / 255.0
}

pub fn unit_to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "RPM3x3")]
    Rpm3x3,
    #[serde(rename = "VAP2x3")]
    Vap2x3,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Rpm3x3 => f.write_str("RPM3x3"),
            Family::Vap2x3 => f.write_str("VAP2x3"),
        }
    }
}

pub const MIN_ANSWERS: usize = 2;
pub const MAX_ANSWERS: usize = 8;

/// Grid geometry and panel roles shared by every instance of a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStructure {
    pub family: Family,
    pub context_rows: usize,
    pub context_cols: usize,
    pub n_context: usize,
    pub n_a: usize,
    pub missing_slot: (usize, usize),
}

impl TaskStructure {
    pub fn rpm(n_a: usize) -> Self {
        Self::for_family(Family::Rpm3x3, n_a)
    }

    pub fn vap(n_a: usize) -> Self {
        Self::for_family(Family::Vap2x3, n_a)
    }

    pub fn for_family(family: Family, n_a: usize) -> Self {
        match family {
            Family::Rpm3x3 => Self {
                family,
                context_rows: 3,
                context_cols: 3,
                n_context: 8,
                n_a,
                missing_slot: (2, 2),
            },
            Family::Vap2x3 => Self {
                family,
                context_rows: 2,
                context_cols: 3,
                n_context: 5,
                n_a,
                missing_slot: (1, 2),
            },
        }
    }

    pub fn with_n_a(self, n_a: usize) -> Self {
        Self { n_a, ..self }
    }

    /// Total panel count `n_context + n_a`.
    pub fn panel_count(&self) -> usize {
        self.n_context + self.n_a
    }

    pub fn check(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let canonical = Self::for_family(self.family, self.n_a);
        if *self != canonical {
            out.push(Violation::StructureGeometry(self.family));
        }
        if !(MIN_ANSWERS..=MAX_ANSWERS).contains(&self.n_a) {
            out.push(Violation::AnswerCount(self.n_a));
        }
        out
    }
}

/// Multi-hot vector over a dataset's rule vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RuleVector(pub Vec<u8>);

impl RuleVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i)
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }
}

/// One disjoint problem: context panels, candidate answers and the label.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixInstance {
    pub context: Vec<Panel>,
    pub answers: Vec<Panel>,
    /// 0-based index into `answers`.
    pub correct: usize,
    pub rules: RuleVector,
}

impl MatrixInstance {
    pub fn n_a(&self) -> usize {
        self.answers.len()
    }

    pub fn panel_dims(&self) -> Option<(usize, usize)> {
        self.context.first().or(self.answers.first()).map(|p| (p.height(), p.width()))
    }

    pub fn panels(&self) -> impl Iterator<Item = &Panel> {
        self.context.iter().chain(self.answers.iter())
    }
}

/// Letter shown above answer `index` (`A`, `B`, ...).
pub fn answer_label(index: usize) -> char {
    (b'A' + index as u8) as char
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    StructureGeometry(Family),
    AnswerCount(usize),
    ContextCount { expected: usize, got: usize },
    AnswerCountMismatch { expected: usize, got: usize },
    AnswerIndexOutOfRange { correct: usize, n_a: usize },
    IntensityOutOfRange { panel: usize, value: f32 },
    PanelDims { panel: usize, expected: (usize, usize), got: (usize, usize) },
    RuleLength { expected: usize, got: usize },
    RuleBit { index: usize, value: u8 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::StructureGeometry(fam) => write!(f, "structure geometry does not match {fam}"),
            Violation::AnswerCount(n) => write!(f, "answer count {n} outside [2, 8]"),
            Violation::ContextCount { expected, got } => {
                write!(f, "context panel count {got}, expected {expected}")
            }
            Violation::AnswerCountMismatch { expected, got } => {
                write!(f, "answer panel count {got}, expected {expected}")
            }
            Violation::AnswerIndexOutOfRange { correct, n_a } => {
                write!(f, "answer index out of range: {correct} >= {n_a}")
            }
            Violation::IntensityOutOfRange { panel, value } => {
                write!(f, "intensity out of [0,1]: {value} in panel {panel}")
            }
            Violation::PanelDims { panel, expected, got } => write!(
                f,
                "panel {panel} is {}x{}, expected {}x{}",
                got.0, got.1, expected.0, expected.1
            ),
            Violation::RuleLength { expected, got } => {
                write!(f, "rule vector length {got}, expected {expected}")
            }
            Violation::RuleBit { index, value } => write!(f, "rule bit {index} is {value}, expected 0 or 1"),
        }
    }
}

/// Returns every invariant violation; an empty report means the instance is
/// well-formed for `structure`. `rule_len` is checked when given.
pub fn validate_instance(
    inst: &MatrixInstance,
    structure: &TaskStructure,
    rule_len: Option<usize>,
) -> Vec<Violation> {
    let mut out = structure.check();
    if inst.context.len() != structure.n_context {
        out.push(Violation::ContextCount { expected: structure.n_context, got: inst.context.len() });
    }
    if inst.answers.len() != structure.n_a {
        out.push(Violation::AnswerCountMismatch { expected: structure.n_a, got: inst.answers.len() });
    }
    if inst.answers.len() < MIN_ANSWERS {
        out.push(Violation::AnswerCount(inst.answers.len()));
    }
    if inst.correct >= inst.answers.len() {
        out.push(Violation::AnswerIndexOutOfRange { correct: inst.correct, n_a: inst.answers.len() });
    }
    if let Some(dims) = inst.panel_dims() {
        for (i, p) in inst.panels().enumerate() {
            if (p.height(), p.width()) != dims {
                out.push(Violation::PanelDims { panel: i, expected: dims, got: (p.height(), p.width()) });
            }
            if let Some(&v) = p.pixels().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                out.push(Violation::IntensityOutOfRange { panel: i, value: v });
            }
        }
    }
    if let Some(len) = rule_len {
        if inst.rules.len() != len {
            out.push(Violation::RuleLength { expected: len, got: inst.rules.len() });
        }
    }
    for (index, &value) in inst.rules.bits().iter().enumerate() {
        if value > 1 {
            out.push(Violation::RuleBit { index, value });
        }
    }
    out
}

/// Keeps the correct answer and `target_n_a - 1` incorrect answers, deleting
/// the others uniformly at random without replacement. Survivors keep their
/// relative order and the label is remapped.
pub fn reduce_answers<R: Rng + ?Sized>(
    inst: &MatrixInstance,
    target_n_a: usize,
    rng: &mut R,
) -> Result<MatrixInstance, InstanceError> {
    let n_a = inst.n_a();
    if target_n_a < MIN_ANSWERS || target_n_a > n_a {
        return Err(InstanceError::AnswerCountOutOfRange { target: target_n_a, available: n_a });
    }
    if target_n_a == n_a {
        return Ok(inst.clone());
    }
    let incorrect: Vec<usize> = (0..n_a).filter(|&i| i != inst.correct).collect();
    let removed = rand::seq::index::sample(rng, incorrect.len(), n_a - target_n_a);
    let mut keep = vec![true; n_a];
    for r in removed.iter() {
        keep[incorrect[r]] = false;
    }
    let mut answers = Vec::with_capacity(target_n_a);
    let mut correct = 0;
    for (i, panel) in inst.answers.iter().enumerate() {
        if keep[i] {
            if i == inst.correct {
                correct = answers.len();
            }
            answers.push(panel.clone());
        }
    }
    Ok(MatrixInstance { context: inst.context.clone(), answers, correct, rules: inst.rules.clone() })
}
