//! Shared helpers for the integration tests.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};
use std::path::Path;

use avru::dataset::{write_dataset, SplitCounts};
use avru::instance::{Family, Panel};
use avru::synthgen::{
    generate_dataset, rasterize_shape, Attribute, GeneratedInstance, GeneratorConfig, Rule, RuleSpec, ShapeKind,
    ShapeSpec,
};

/// Every shape spec that rasterises to a given panel, keyed by pixel bytes.
pub struct ShapeDecoder {
    table: HashMap<Vec<u8>, Vec<ShapeSpec>>,
}

impl ShapeDecoder {
    /// Rasterises all 5 x 5 x 5 x 8 attribute combinations once.
    pub fn new(panel: (usize, usize)) -> Self {
        let mut table: HashMap<Vec<u8>, Vec<ShapeSpec>> = HashMap::new();
        for kind in ShapeKind::ALL {
            for size in 1..=5 {
                for shade in 1..=5 {
                    for rotation in 0..8 {
                        let spec = ShapeSpec { kind, size, shade, rotation, position: 0 };
                        table.entry(rasterize_shape(&spec, panel.0, panel.1).to_u8()).or_default().push(spec);
                    }
                }
            }
        }
        ShapeDecoder { table }
    }

    pub fn decode(&self, panel: &Panel) -> &[ShapeSpec] {
        self.table.get(&panel.to_u8()).map_or(&[], Vec::as_slice)
    }
}

fn level(spec: &ShapeSpec, attr: Attribute) -> u8 {
    match attr {
        Attribute::Kind => ShapeKind::ALL.iter().position(|&k| k == spec.kind).unwrap() as u8,
        Attribute::Size => spec.size - 1,
        Attribute::Shade => spec.shade - 1,
        Attribute::Rotation => spec.rotation,
    }
}

fn levels(attr: Attribute) -> i32 {
    match attr {
        Attribute::Rotation => 8,
        _ => 5,
    }
}

/// Whether one row of three values obeys `rule` on its own. Distribution
/// only requires distinct values here; the shared set is checked across
/// rows.
fn row_obeys(rule: Rule, attr: Attribute, v: [u8; 3]) -> bool {
    let l = levels(attr);
    let step = |a: u8, b: u8| (b as i32 - a as i32).rem_euclid(l);
    match rule {
        Rule::Constant => v[0] == v[1] && v[1] == v[2],
        Rule::Progression(s) => {
            let want = (s as i32).rem_euclid(l);
            step(v[0], v[1]) == want && step(v[1], v[2]) == want
        }
        Rule::DistributeThree => v[0] != v[1] && v[1] != v[2] && v[0] != v[2],
    }
}

/// For one row of decoded panels, every way of reading it that obeys all
/// `rules`, summarised by the sorted value sets of distributed attributes.
fn row_readings(row: [&[ShapeSpec]; 3], rules: &[RuleSpec]) -> HashSet<Vec<[u8; 3]>> {
    let mut out = HashSet::new();
    for a in row[0] {
        for b in row[1] {
            for c in row[2] {
                let cells = [a, b, c];
                let ok = rules.iter().all(|r| row_obeys(r.rule, r.attribute, cells.map(|s| level(s, r.attribute))));
                if ok {
                    let sig = rules
                        .iter()
                        .filter(|r| r.rule == Rule::DistributeThree)
                        .map(|r| {
                            let mut v = cells.map(|s| level(s, r.attribute));
                            v.sort();
                            v
                        })
                        .collect();
                    out.insert(sig);
                }
            }
        }
    }
    out
}

/// Answers that complete the matrix under its recorded rules, decided from
/// pixels alone. Rows are checked independently; distributed attributes
/// must use one value set across all rows.
pub fn consistent_answers(g: &GeneratedInstance, decoder: &ShapeDecoder, cols: usize) -> Vec<usize> {
    let rows = g.row_rules.len();
    let context: Vec<&[ShapeSpec]> = g.instance.context.iter().map(|p| decoder.decode(p)).collect();
    (0..g.instance.answers.len())
        .filter(|&k| {
            let answer = decoder.decode(&g.instance.answers[k]);
            let mut common: Option<HashSet<Vec<[u8; 3]>>> = None;
            for r in 0..rows {
                let cell = |c: usize| if r == rows - 1 && c == cols - 1 { answer } else { context[r * cols + c] };
                let readings = row_readings([cell(0), cell(1), cell(2)], &g.row_rules[r]);
                common = Some(match common {
                    None => readings,
                    Some(prev) if g.instance.context.len() == 8 => prev.intersection(&readings).cloned().collect(),
                    Some(_) => readings,
                });
                if common.as_ref().is_some_and(HashSet::is_empty) {
                    return false;
                }
            }
            true
        })
        .collect()
}

pub fn rpm_config(n_a: usize, counts: (usize, usize, usize), seed: u64) -> GeneratorConfig {
    let splits = SplitCounts { train: counts.0, val: counts.1, test: counts.2 };
    GeneratorConfig::new(Family::Rpm3x3, n_a, splits, seed)
}

/// Generates and writes a dataset, returning its directory.
pub fn write_generated(dir: &Path, cfg: &GeneratorConfig) -> std::path::PathBuf {
    let (manifest, splits) = generate_dataset(cfg).expect("generation succeeds");
    write_dataset(dir, &manifest, &splits).expect("dataset written");
    dir.to_path_buf()
}

/// Collects every file under `dir` with its bytes, sorted by relative path.
pub fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
