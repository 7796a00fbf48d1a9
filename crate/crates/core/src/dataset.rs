//! On-disk dataset container.
//!
//! A dataset is a directory holding `manifest.json` and one binary file per
//! split (`train.bin`, `val.bin`, `test.bin`). Each split file is a plain
//! concatenation of records:
//!
//! ```text
//! "AVRU" | u16 version | u16 n_context | u16 n_a | u16 h | u16 w | u16 |r| | u16 correct
//! (n_context + n_a) * h * w panel bytes, context first, row-major
//! |r| rule bytes
//! ```
//!
//! All integers are little-endian. Panel bytes are 8-bit levels mapped to
//! `[0, 1]` by `/ 255`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::instance::{validate_instance, Family, MatrixInstance, Panel, RuleVector, TaskStructure};

pub const MAGIC: &[u8; 4] = b"AVRU";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 7 * 2;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("{split} record {record}: bad magic bytes {found:?}")]
    BadMagic { split: Split, record: usize, found: [u8; 4] },
    #[error("{split} record {record}: format version {found}, expected {expected}")]
    VersionMismatch { split: Split, record: usize, found: u16, expected: u16 },
    #[error("manifest format version {found}, expected {expected}")]
    ManifestVersion { found: u16, expected: u16 },
    #[error("{split} record {record}: truncated record")]
    TruncatedRecord { split: Split, record: usize },
    #[error("{split}: count mismatch, manifest says {expected} records, file holds {found}")]
    CountMismatch { split: Split, expected: usize, found: usize },
    #[error("{split} record {record}: header disagrees with manifest ({detail})")]
    HeaderMismatch { split: Split, record: usize, detail: String },
    #[error("{split} instance {record} is invalid: {detail}")]
    InvalidInstance { split: Split, record: usize, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.bin", self.name())
    }

    pub fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}' (expected train, val or test)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub family: Family,
    pub context_rows: usize,
    pub context_cols: usize,
    pub n_context: usize,
    pub n_a: usize,
    pub panel_h: usize,
    pub panel_w: usize,
    pub rule_vocab: Vec<String>,
    pub splits: SplitCounts,
    pub seed: u64,
    pub version: u16,
}

impl DatasetManifest {
    pub fn new(
        structure: TaskStructure,
        panel: (usize, usize),
        rule_vocab: Vec<String>,
        splits: SplitCounts,
        seed: u64,
    ) -> Self {
        Self {
            family: structure.family,
            context_rows: structure.context_rows,
            context_cols: structure.context_cols,
            n_context: structure.n_context,
            n_a: structure.n_a,
            panel_h: panel.0,
            panel_w: panel.1,
            rule_vocab,
            splits,
            seed,
            version: FORMAT_VERSION,
        }
    }

    pub fn structure(&self) -> TaskStructure {
        TaskStructure {
            family: self.family,
            context_rows: self.context_rows,
            context_cols: self.context_cols,
            n_context: self.n_context,
            n_a: self.n_a,
            missing_slot: TaskStructure::for_family(self.family, self.n_a).missing_slot,
        }
    }

    pub fn rule_len(&self) -> usize {
        self.rule_vocab.len()
    }
}

/// Instances grouped by split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<MatrixInstance>,
    pub val: Vec<MatrixInstance>,
    pub test: Vec<MatrixInstance>,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &[MatrixInstance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, split: Split) -> &mut Vec<MatrixInstance> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn counts(&self) -> SplitCounts {
        SplitCounts { train: self.train.len(), val: self.val.len(), test: self.test.len() }
    }
}

/// One record in its on-disk 8-bit form. Keeps memory at one byte per pixel
/// for large corpora; decode with [`PackedInstance::to_instance`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedInstance {
    pub n_context: usize,
    pub n_a: usize,
    pub h: usize,
    pub w: usize,
    pub correct: usize,
    pub pixels: Vec<u8>,
    pub rules: Vec<u8>,
}

impl PackedInstance {
    pub fn pack(inst: &MatrixInstance) -> Self {
        let (h, w) = inst.panel_dims().unwrap_or((0, 0));
        let mut pixels = Vec::with_capacity((inst.context.len() + inst.answers.len()) * h * w);
        for p in inst.panels() {
            pixels.extend(p.to_u8());
        }
        Self {
            n_context: inst.context.len(),
            n_a: inst.answers.len(),
            h,
            w,
            correct: inst.correct,
            pixels,
            rules: inst.rules.0.clone(),
        }
    }

    pub fn to_instance(&self) -> MatrixInstance {
        let size = self.h * self.w;
        let panel = |i: usize| {
            Panel::from_u8(self.h, self.w, &self.pixels[i * size..(i + 1) * size])
                .expect("record geometry checked at parse time")
        };
        MatrixInstance {
            context: (0..self.n_context).map(panel).collect(),
            answers: (self.n_context..self.n_context + self.n_a).map(panel).collect(),
            correct: self.correct,
            rules: RuleVector(self.rules.clone()),
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        for v in [FORMAT_VERSION as usize, self.n_context, self.n_a, self.h, self.w, self.rules.len(), self.correct] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out.extend_from_slice(&self.rules);
    }
}

/// Parses a whole split file.
pub fn decode_records(bytes: &[u8], split: Split) -> Result<Vec<PackedInstance>, DatasetError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let record = out.len();
        let rest = &bytes[pos..];
        if rest.len() < HEADER_LEN {
            if rest.len() >= 4 && &rest[..4] != MAGIC {
                return Err(DatasetError::BadMagic { split, record, found: rest[..4].try_into().unwrap() });
            }
            return Err(DatasetError::TruncatedRecord { split, record });
        }
        let magic: [u8; 4] = rest[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(DatasetError::BadMagic { split, record, found: magic });
        }
        let field = |i: usize| u16::from_le_bytes([rest[4 + 2 * i], rest[5 + 2 * i]]);
        let version = field(0);
        if version != FORMAT_VERSION {
            return Err(DatasetError::VersionMismatch { split, record, found: version, expected: FORMAT_VERSION });
        }
        let (n_context, n_a, h, w, r, correct) =
            (field(1) as usize, field(2) as usize, field(3) as usize, field(4) as usize, field(5) as usize, field(6) as usize);
        let n_pix = (n_context + n_a) * h * w;
        let total = HEADER_LEN + n_pix + r;
        if rest.len() < total {
            return Err(DatasetError::TruncatedRecord { split, record });
        }
        out.push(PackedInstance {
            n_context,
            n_a,
            h,
            w,
            correct,
            pixels: rest[HEADER_LEN..HEADER_LEN + n_pix].to_vec(),
            rules: rest[HEADER_LEN + n_pix..total].to_vec(),
        });
        pos += total;
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, manifest: &DatasetManifest, splits: &DatasetSplits) -> Result<(), DatasetError> {
    let structure = manifest.structure();
    let rule_len = manifest.rule_len();
    for split in Split::ALL {
        let instances = splits.get(split);
        if instances.len() != manifest.splits.get(split) {
            return Err(DatasetError::CountMismatch {
                split,
                expected: manifest.splits.get(split),
                found: instances.len(),
            });
        }
        for (record, inst) in instances.iter().enumerate() {
            let report = validate_instance(inst, &structure, Some(rule_len));
            if !report.is_empty() {
                let detail = report.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
                return Err(DatasetError::InvalidInstance { split, record, detail });
            }
            if inst.panel_dims() != Some((manifest.panel_h, manifest.panel_w)) {
                return Err(DatasetError::InvalidInstance {
                    split,
                    record,
                    detail: format!("panel dims {:?} differ from manifest", inst.panel_dims()),
                });
            }
        }
    }
    fs::create_dir_all(path).map_err(io_err(path))?;
    let manifest_path = path.join("manifest.json");
    let mut json = serde_json::to_vec_pretty(manifest)?;
    json.push(b'\n');
    fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
    for split in Split::ALL {
        let file = path.join(split.file_name());
        let mut bytes = Vec::new();
        for inst in splits.get(split) {
            PackedInstance::pack(inst).encode(&mut bytes);
        }
        let mut f = fs::File::create(&file).map_err(io_err(&file))?;
        f.write_all(&bytes).map_err(io_err(&file))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let manifest_path = path.join("manifest.json");
    let text = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: DatasetManifest = serde_json::from_slice(&text)?;
    if manifest.version != FORMAT_VERSION {
        return Err(DatasetError::ManifestVersion { found: manifest.version, expected: FORMAT_VERSION });
    }
    Ok(manifest)
}

/// Reads one split in packed form and checks it against the manifest.
pub fn read_split_packed(
    path: &Path,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<Vec<PackedInstance>, DatasetError> {
    let file = path.join(split.file_name());
    let bytes = fs::read(&file).map_err(io_err(&file))?;
    let records = decode_records(&bytes, split)?;
    let expected = manifest.splits.get(split);
    if records.len() != expected {
        return Err(DatasetError::CountMismatch { split, expected, found: records.len() });
    }
    for (record, r) in records.iter().enumerate() {
        let mismatch = |detail: String| DatasetError::HeaderMismatch { split, record, detail };
        if r.n_context != manifest.n_context || r.n_a != manifest.n_a {
            return Err(mismatch(format!("panel counts {}+{}", r.n_context, r.n_a)));
        }
        if (r.h, r.w) != (manifest.panel_h, manifest.panel_w) {
            return Err(mismatch(format!("panel dims {}x{}", r.h, r.w)));
        }
        if r.rules.len() != manifest.rule_len() {
            return Err(mismatch(format!("rule length {}", r.rules.len())));
        }
        if r.correct >= r.n_a {
            return Err(mismatch(format!("answer index {} >= {}", r.correct, r.n_a)));
        }
    }
    Ok(records)
}

pub fn read_dataset(path: &Path) -> Result<(DatasetManifest, DatasetSplits), DatasetError> {
    let manifest = read_manifest(path)?;
    let mut splits = DatasetSplits::default();
    for split in Split::ALL {
        *splits.get_mut(split) =
            read_split_packed(path, &manifest, split)?.iter().map(PackedInstance::to_instance).collect();
    }
    Ok((manifest, splits))
}

/// SHA-256 over the manifest and all split files, hex encoded.
pub fn dataset_digest(path: &Path) -> Result<String, DatasetError> {
    let mut hasher = Sha256::new();
    let mut files = vec![path.join("manifest.json")];
    files.extend(Split::ALL.iter().map(|s| path.join(s.file_name())));
    for file in files {
        let bytes = fs::read(&file).map_err(io_err(&file))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inst(seed: u8, n_a: usize, rule_len: usize) -> MatrixInstance {
        let panel = |k: u8| {
            let bytes: Vec<u8> = (0..12u8).map(|i| i.wrapping_mul(31).wrapping_add(k)).collect();
            Panel::from_u8(3, 4, &bytes).unwrap()
        };
        MatrixInstance {
            context: (0..8).map(|i| panel(seed.wrapping_add(i))).collect(),
            answers: (0..n_a as u8).map(|i| panel(seed.wrapping_add(100 + i))).collect(),
            correct: seed as usize % n_a,
            rules: RuleVector((0..rule_len).map(|i| ((seed as usize + i) % 2) as u8).collect()),
        }
    }

    fn manifest(counts: SplitCounts) -> DatasetManifest {
        DatasetManifest::new(TaskStructure::rpm(4), (3, 4), vec!["a".into(), "b".into(), "c".into()], counts, 17)
    }

    fn splits(train: usize, val: usize, test: usize) -> DatasetSplits {
        let make = |n: usize, off: u8| (0..n).map(|i| inst(off + i as u8, 4, 3)).collect();
        DatasetSplits { train: make(train, 0), val: make(val, 50), test: make(test, 90) }
    }

    #[test]
    fn round_trip_ten_instances() {
        let dir = tempfile::tempdir().unwrap();
        let data = splits(6, 2, 2);
        let m = manifest(data.counts());
        write_dataset(dir.path(), &m, &data).unwrap();
        let (m2, data2) = read_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(data, data2);
        for (a, b) in data.train.iter().zip(&data2.train) {
            for (p, q) in a.panels().zip(b.panels()) {
                assert_eq!(p.to_u8(), q.to_u8());
            }
        }
    }

    #[test]
    fn manifest_uses_documented_keys() {
        let m = manifest(SplitCounts { train: 1, val: 2, test: 3 });
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "context_cols", "context_rows", "family", "n_a", "n_context", "panel_h", "panel_w", "rule_vocab",
                "seed", "splits", "version"
            ]
        );
        assert_eq!(v["family"], "RPM3x3");
        assert_eq!(v["splits"]["test"], 3);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(SplitCounts::default());
        write_dataset(dir.path(), &m, &DatasetSplits::default()).unwrap();
        let (_, data) = read_dataset(dir.path()).unwrap();
        assert_eq!(data.counts(), SplitCounts::default());
        assert_eq!(fs::metadata(dir.path().join("train.bin")).unwrap().len(), 0);
    }

    #[test]
    fn count_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let data = splits(6, 0, 0);
        write_dataset(dir.path(), &manifest(data.counts()), &data).unwrap();
        let mut m = manifest(data.counts());
        m.splits.train = 7;
        fs::write(dir.path().join("manifest.json"), serde_json::to_vec(&m).unwrap()).unwrap();
        match read_dataset(dir.path()) {
            Err(DatasetError::CountMismatch { split: Split::Train, expected: 7, found: 6 }) => {}
            other => panic!("expected count mismatch, got {other:?}"),
        }
        let bad = DatasetSplits { train: data.train[..5].to_vec(), ..Default::default() };
        assert!(matches!(
            write_dataset(dir.path(), &manifest(data.counts()), &bad),
            Err(DatasetError::CountMismatch { .. })
        ));
    }

    #[test]
    fn corrupt_files_give_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let data = splits(2, 0, 0);
        write_dataset(dir.path(), &manifest(data.counts()), &data).unwrap();
        let file = dir.path().join("train.bin");
        let good = fs::read(&file).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&file, &bad_magic).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::BadMagic { record: 0, .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        fs::write(&file, &bad_version).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::VersionMismatch { found: 9, .. })));

        fs::write(&file, &good[..good.len() - 1]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::TruncatedRecord { record: 1, .. })));

        fs::write(&file, &good[..10]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::TruncatedRecord { record: 0, .. })));
    }

    #[test]
    fn record_header_is_little_endian() {
        let i = inst(3, 4, 3);
        let mut bytes = Vec::new();
        PackedInstance::pack(&i).encode(&mut bytes);
        assert_eq!(&bytes[..4], b"AVRU");
        assert_eq!(&bytes[4..18], &[1, 0, 8, 0, 4, 0, 3, 0, 4, 0, 3, 0, 3, 0]);
        assert_eq!(bytes.len(), 18 + 12 * 12 + 3);
        assert_eq!(&bytes[bytes.len() - 3..], &[1, 0, 1]);
    }

    #[test]
    fn invalid_instances_are_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = splits(1, 0, 0);
        data.train[0].correct = 7;
        assert!(matches!(
            write_dataset(dir.path(), &manifest(data.counts()), &data),
            Err(DatasetError::InvalidInstance { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn pack_decode_is_identity(bytes in proptest::collection::vec(any::<u8>(), 12 * 10), correct in 0usize..2, rules in proptest::collection::vec(0u8..=1, 0..6)) {
            let panels: Vec<Panel> = bytes.chunks(12).map(|c| Panel::from_u8(3, 4, c).unwrap()).collect();
            let inst = MatrixInstance { context: panels[..8].to_vec(), answers: panels[8..].to_vec(), correct, rules: RuleVector(rules) };
            let mut buf = Vec::new();
            PackedInstance::pack(&inst).encode(&mut buf);
            let back = decode_records(&buf, Split::Val).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(back[0].to_instance(), inst);
        }
    }
}
