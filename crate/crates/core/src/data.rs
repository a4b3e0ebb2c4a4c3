//! Dataset files, validation, normalization, splitting and the synthetic
//! clustered-protein generator.
//!
//! A dataset directory holds `ids.txt`, `terms.txt`, `ppi.tsv`,
//! `attributes.tsv`, `seq_embed.tsv`, `labels.tsv` and `splits.tsv`. Every
//! TSV starts with `#rows<TAB>cols`. `labels.tsv` rows lead with the protein
//! id so that pretraining-only proteins may be omitted; `splits.tsv` rows are
//! `id<TAB>tag`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModalInputs;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}:{line}: {detail}")]
    Parse { file: String, line: usize, detail: String },
    #[error("{file}: expected {expected} rows, found {found}")]
    RowCount { file: String, expected: usize, found: usize },
    #[error("{file}: expected {expected} columns, found {found}")]
    ColumnCount { file: String, expected: usize, found: usize },
    #[error("{file}: row {row}, column {col}: value {value} is not 0 or 1")]
    NonBinary { file: String, row: usize, col: usize, value: f64 },
    #[error("{file}: row {row}, column {col}: value is not finite")]
    NonFinite { file: String, row: usize, col: usize },
    #[error("{file}: row {row}, column {col}: negative interaction weight {value}")]
    Negative { file: String, row: usize, col: usize, value: f64 },
    #[error("duplicate protein id {0}")]
    DuplicateId(String),
    #[error("{file}: unknown protein id {id}")]
    UnknownId { file: String, id: String },
    #[error("protein {0} has no split tag")]
    MissingSplit(String),
    #[error("protein {0} is in a labeled split but has no row in labels.tsv")]
    MissingLabels(String),
    #[error("unknown split tag {0:?}")]
    BadTag(String),
    #[error("split fractions {0:?} must be nonnegative and sum to 1")]
    BadFractions([f64; 3]),
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Valid,
    Test,
    PretrainOnly,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
            Split::PretrainOnly => "pretrain-only",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            "pretrain-only" => Ok(Split::PretrainOnly),
            other => Err(DataError::BadTag(other.to_string())),
        }
    }

    pub fn is_labeled(self) -> bool {
        self != Split::PretrainOnly
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Canonical text form of one value: `0`/`1` for binary matrices, 17
/// significant digits otherwise.
fn format_value(v: f64, binary: bool) -> String {
    if binary {
        format!("{}", v as u8)
    } else {
        format!("{v:.16e}")
    }
}

fn parse_header(file: &str, line: Option<&str>) -> Result<(usize, usize)> {
    let parse_err = |detail: &str| DataError::Parse { file: file.to_string(), line: 1, detail: detail.to_string() };
    let line = line.ok_or_else(|| parse_err("missing #rows<TAB>cols header"))?;
    let rest = line.strip_prefix('#').ok_or_else(|| parse_err("header must start with '#'"))?;
    let mut parts = rest.split('\t');
    let mut next = || -> Result<usize> {
        parts.next().and_then(|s| s.trim().parse().ok()).ok_or_else(|| parse_err("header must be #rows<TAB>cols"))
    };
    Ok((next()?, next()?))
}

fn parse_row(file: &str, line_no: usize, fields: &[&str], cols: usize) -> Result<Vec<f64>> {
    if fields.len() != cols {
        return Err(DataError::ColumnCount { file: file.to_string(), expected: cols, found: fields.len() });
    }
    fields
        .iter()
        .map(|f| {
            f.trim().parse::<f64>().map_err(|e| DataError::Parse {
                file: file.to_string(),
                line: line_no,
                detail: format!("{f:?}: {e}"),
            })
        })
        .collect()
}

fn check_values(file: &str, row: usize, values: &[f64], binary: bool) -> Result<()> {
    for (col, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(DataError::NonFinite { file: file.to_string(), row, col });
        }
        if binary && v != 0.0 && v != 1.0 {
            return Err(DataError::NonBinary { file: file.to_string(), row, col, value: v });
        }
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Reads a headed numeric TSV matrix.
pub fn read_matrix(path: &Path, binary: bool) -> Result<Tensor> {
    let file = file_name(path);
    let text = read_text(path)?;
    let mut lines = text.lines();
    let (rows, cols) = parse_header(&file, lines.next())?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut found = 0;
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let values = parse_row(&file, i + 2, &fields, cols)?;
        check_values(&file, found, &values, binary)?;
        data.extend(values);
        found += 1;
    }
    if found != rows {
        return Err(DataError::RowCount { file, expected: rows, found });
    }
    Tensor::new(vec![rows, cols], data).map_err(|e| DataError::Parse { file, line: 1, detail: e.to_string() })
}

pub fn write_matrix(path: &Path, m: &Tensor, binary: bool) -> Result<()> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut out = format!("#{rows}\t{cols}\n");
    for row in m.data().chunks(cols) {
        let fields: Vec<String> = row.iter().map(|&v| format_value(v, binary)).collect();
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut out = lines.join("\n");
    out.push('\n');
    fs::write(path, out).map_err(io_err(path))
}

/// Per-column minimum and maximum of a matrix.
pub fn column_range(m: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let cols = m.shape()[1];
    let mut lo = vec![f64::INFINITY; cols];
    let mut hi = vec![f64::NEG_INFINITY; cols];
    for row in m.data().chunks(cols) {
        for (j, &v) in row.iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    (lo, hi)
}

/// `(x − min) / (max − min)` per column; constant columns map to 0.
pub fn normalize_with(m: &Tensor, lo: &[f64], hi: &[f64]) -> Tensor {
    let cols = m.shape()[1];
    let data = m
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let j = i % cols;
            let span = hi[j] - lo[j];
            if span > 0.0 {
                (v - lo[j]) / span
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(m.shape().to_vec(), data).expect("same shape")
}

fn select_rows(m: &Tensor, rows: &[usize]) -> Tensor {
    let cols = m.shape()[1];
    let data = rows.iter().flat_map(|&r| m.data()[r * cols..(r + 1) * cols].iter().copied()).collect();
    Tensor::new(vec![rows.len(), cols], data).expect("nonempty row selection")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProteinDataset {
    pub ids: Vec<String>,
    pub term_ids: Vec<String>,
    /// Symmetric `N × N` interaction weights.
    pub ppi: Tensor,
    /// Binary `N × A` subcellular-location and domain indicators.
    pub attributes: Tensor,
    pub seq_raw: Tensor,
    /// `seq_raw` min-max normalized per column into `[0, 1]`.
    pub seq_norm: Tensor,
    pub seq_min: Vec<f64>,
    pub seq_max: Vec<f64>,
    /// `N × M`; rows of proteins without labels are zero.
    pub labels: Tensor,
    pub has_labels: Vec<bool>,
    pub split: Vec<Split>,
}

impl ProteinDataset {
    /// Builds a validated dataset, symmetrizing `ppi` and normalizing the
    /// sequence embeddings.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ids: Vec<String>,
        term_ids: Vec<String>,
        ppi: Tensor,
        attributes: Tensor,
        seq_raw: Tensor,
        labels: Tensor,
        has_labels: Vec<bool>,
        split: Vec<Split>,
    ) -> Result<Self> {
        let n = ids.len();
        let mut seen = HashMap::new();
        for id in &ids {
            if seen.insert(id.as_str(), ()).is_some() {
                return Err(DataError::DuplicateId(id.clone()));
            }
        }
        for (file, m) in
            [("ppi.tsv", &ppi), ("attributes.tsv", &attributes), ("seq_embed.tsv", &seq_raw), ("labels.tsv", &labels)]
        {
            if m.shape()[0] != n {
                return Err(DataError::RowCount { file: file.into(), expected: n, found: m.shape()[0] });
            }
        }
        if ppi.shape()[1] != n {
            return Err(DataError::ColumnCount { file: "ppi.tsv".into(), expected: n, found: ppi.shape()[1] });
        }
        if labels.shape()[1] != term_ids.len() {
            return Err(DataError::ColumnCount {
                file: "labels.tsv".into(),
                expected: term_ids.len(),
                found: labels.shape()[1],
            });
        }
        for (i, (&tag, &labeled)) in split.iter().zip(&has_labels).enumerate() {
            if tag.is_labeled() && !labeled {
                return Err(DataError::MissingLabels(ids[i].clone()));
            }
        }
        for (r, row) in ppi.data().chunks(n).enumerate() {
            check_values("ppi.tsv", r, row, false)?;
            if let Some((c, &v)) = row.iter().enumerate().find(|(_, v)| **v < 0.0) {
                return Err(DataError::Negative { file: "ppi.tsv".into(), row: r, col: c, value: v });
            }
        }
        let mut sym = ppi.data().to_vec();
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = 0.5 * (ppi.data()[i * n + j] + ppi.data()[j * n + i]);
            }
        }
        let ppi = Tensor::new(vec![n, n], sym).expect("square");
        let (seq_min, seq_max) = column_range(&seq_raw);
        let seq_norm = normalize_with(&seq_raw, &seq_min, &seq_max);
        Ok(Self { ids, term_ids, ppi, attributes, seq_raw, seq_norm, seq_min, seq_max, labels, has_labels, split })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn terms(&self) -> usize {
        self.term_ids.len()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Model inputs for the given rows; PPI columns always span the full corpus.
    pub fn inputs(&self, rows: &[usize]) -> ModalInputs {
        ModalInputs {
            ppi: select_rows(&self.ppi, rows),
            attributes: select_rows(&self.attributes, rows),
            sequence: select_rows(&self.seq_norm, rows),
        }
    }

    pub fn labels_for(&self, rows: &[usize]) -> Tensor {
        select_rows(&self.labels, rows)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ids = read_lines(&dir.join("ids.txt"))?;
        let term_ids = read_lines(&dir.join("terms.txt"))?;
        let ppi = read_matrix(&dir.join("ppi.tsv"), false)?;
        let attributes = read_matrix(&dir.join("attributes.tsv"), true)?;
        let seq_raw = read_matrix(&dir.join("seq_embed.tsv"), false)?;
        let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let (labels, has_labels) = read_labels(&dir.join("labels.tsv"), &index, term_ids.len())?;
        let split = read_splits(&dir.join("splits.tsv"), &ids, &index)?;
        Self::new(ids, term_ids, ppi, attributes, seq_raw, labels, has_labels, split)
    }

    /// Writes the canonical on-disk form. Sequence embeddings are written raw.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_lines(&dir.join("ids.txt"), &self.ids)?;
        write_lines(&dir.join("terms.txt"), &self.term_ids)?;
        write_matrix(&dir.join("ppi.tsv"), &self.ppi, false)?;
        write_matrix(&dir.join("attributes.tsv"), &self.attributes, true)?;
        write_matrix(&dir.join("seq_embed.tsv"), &self.seq_raw, false)?;
        let m = self.terms();
        let labeled: Vec<usize> = (0..self.len()).filter(|&i| self.has_labels[i]).collect();
        let mut out = format!("#{}\t{m}\n", labeled.len());
        for &i in &labeled {
            out.push_str(&self.ids[i]);
            for &v in &self.labels.data()[i * m..(i + 1) * m] {
                out.push('\t');
                out.push_str(&format_value(v, true));
            }
            out.push('\n');
        }
        let path = dir.join("labels.tsv");
        fs::write(&path, out).map_err(io_err(&path))?;
        let mut out = format!("#{}\t2\n", self.len());
        for (id, s) in self.ids.iter().zip(&self.split) {
            out.push_str(&format!("{id}\t{s}\n"));
        }
        let path = dir.join("splits.tsv");
        fs::write(&path, out).map_err(io_err(&path))
    }

    /// Terms with no positive among training proteins.
    pub fn train_absent_terms(&self) -> Vec<usize> {
        let m = self.terms();
        let train = self.indices(Split::Train);
        (0..m).filter(|&j| train.iter().all(|&i| self.labels.data()[i * m + j] == 0.0)).collect()
    }
}

fn read_labels(path: &Path, index: &HashMap<&str, usize>, m: usize) -> Result<(Tensor, Vec<bool>)> {
    let file = file_name(path);
    let text = read_text(path)?;
    let mut lines = text.lines();
    let (rows, cols) = parse_header(&file, lines.next())?;
    if cols != m {
        return Err(DataError::ColumnCount { file, expected: m, found: cols });
    }
    let n = index.len();
    let mut data = vec![0.0; n * m];
    let mut has = vec![false; n];
    let mut found = 0;
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let id = fields[0];
        let &row = index.get(id).ok_or_else(|| DataError::UnknownId { file: file.clone(), id: id.to_string() })?;
        if has[row] {
            return Err(DataError::DuplicateId(id.to_string()));
        }
        let values = parse_row(&file, i + 2, &fields[1..], m)?;
        check_values(&file, found, &values, true)?;
        data[row * m..(row + 1) * m].copy_from_slice(&values);
        has[row] = true;
        found += 1;
    }
    if found != rows {
        return Err(DataError::RowCount { file, expected: rows, found });
    }
    let labels = Tensor::new(vec![n, m], data).map_err(|e| DataError::Parse {
        file: "labels.tsv".into(),
        line: 1,
        detail: e.to_string(),
    })?;
    Ok((labels, has))
}

fn read_splits(path: &Path, ids: &[String], index: &HashMap<&str, usize>) -> Result<Vec<Split>> {
    let file = file_name(path);
    let text = read_text(path)?;
    let mut lines = text.lines();
    let (rows, _) = parse_header(&file, lines.next())?;
    let mut split = vec![None; ids.len()];
    let mut found = 0;
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(DataError::Parse { file: file.clone(), line: i + 2, detail: "expected id<TAB>tag".into() });
        }
        let &row = index
            .get(fields[0])
            .ok_or_else(|| DataError::UnknownId { file: file.clone(), id: fields[0].to_string() })?;
        split[row] = Some(Split::parse(fields[1])?);
        found += 1;
    }
    if found != rows {
        return Err(DataError::RowCount { file, expected: rows, found });
    }
    split.into_iter().zip(ids).map(|(s, id)| s.ok_or_else(|| DataError::MissingSplit(id.clone()))).collect()
}

/// Protein counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// Shuffles the labeled proteins with `seed` and assigns train, valid and
/// test by cumulative floors: train gets `⌊f₀n⌋`, valid reaches
/// `⌊(f₀+f₁)n⌋`, test takes the rest. Pretrain-only proteins are untouched.
pub fn split_dataset(ds: &mut ProteinDataset, fractions: [f64; 3], seed: u64) -> Result<SplitCounts> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(fractions));
    }
    let mut labeled: Vec<usize> = (0..ds.len()).filter(|&i| ds.has_labels[i]).collect();
    let n = labeled.len();
    labeled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let b1 = ((fractions[0] * n as f64) + 1e-9).floor() as usize;
    let b2 = (((fractions[0] + fractions[1]) * n as f64) + 1e-9).floor().min(n as f64) as usize;
    let counts = SplitCounts { train: b1, valid: b2 - b1, test: n - b2 };
    for (split, count, f) in [
        (Split::Train, counts.train, fractions[0]),
        (Split::Valid, counts.valid, fractions[1]),
        (Split::Test, counts.test, fractions[2]),
    ] {
        if f > 0.0 && count == 0 {
            return Err(DataError::EmptySplit(split));
        }
    }
    for (k, &i) in labeled.iter().enumerate() {
        ds.split[i] = if k < b1 {
            Split::Train
        } else if k < b2 {
            Split::Valid
        } else {
            Split::Test
        };
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub proteins: usize,
    pub terms: usize,
    pub clusters: usize,
    pub attr_width: usize,
    pub seq_width: usize,
    pub noise: f64,
    pub seed: u64,
    pub split: [f64; 3],
}

impl SynthSpec {
    pub fn new(proteins: usize, terms: usize, clusters: usize, noise: f64, seed: u64) -> Self {
        Self { proteins, terms, clusters, attr_width: 24, seq_width: 32, noise, seed, split: [0.8, 0.1, 0.1] }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(DataError::InvalidSpec(s));
        if self.proteins == 0 || self.terms == 0 || self.attr_width == 0 || self.seq_width == 0 {
            return bad("protein, term and feature counts must be positive".into());
        }
        if self.clusters == 0 || self.clusters > self.proteins {
            return bad(format!("clusters must be in 1..={}, got {}", self.proteins, self.clusters));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad(format!("noise must be in [0, 1), got {}", self.noise));
        }
        if self.terms < 63 && self.clusters as u64 > (1u64 << self.terms) - 1 {
            return bad(format!("{} terms cannot give {} distinct label sets", self.terms, self.clusters));
        }
        Ok(())
    }
}

/// Draws `count` distinct binary prototypes of width `width`, each passed through `shape`.
fn distinct_patterns(
    count: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(usize, &mut ChaCha8Rng) -> Vec<bool>,
) -> Vec<Vec<bool>> {
    let mut out: Vec<Vec<bool>> = Vec::with_capacity(count);
    for c in 0..count {
        loop {
            let p = draw(c, rng);
            debug_assert_eq!(p.len(), width);
            if !out.contains(&p) {
                out.push(p);
                break;
            }
        }
    }
    out
}

/// Generates `clusters` groups of proteins assigned round-robin. Members of a
/// group share a label set, a dense PPI block, an attribute prototype and a
/// ±1 sequence prototype; each binary entry flips with probability
/// `noise / 2` and sequence entries get `0.1 · noise` Gaussian jitter.
pub fn synth_dataset(spec: &SynthSpec) -> Result<ProteinDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, m, k) = (spec.proteins, spec.terms, spec.clusters);
    let flip = spec.noise / 2.0;
    let cluster: Vec<usize> = (0..n).map(|i| i % k).collect();

    let label_sets =
        distinct_patterns(k, m, &mut rng, |c, r| (0..m).map(|j| j == c % m || r.random::<f64>() < 0.25).collect());
    let attr_protos = distinct_patterns(k, spec.attr_width, &mut rng, |_, r| {
        (0..spec.attr_width).map(|_| r.random::<f64>() < 0.3).collect()
    });
    let seq_protos = distinct_patterns(k, spec.seq_width, &mut rng, |_, r| {
        (0..spec.seq_width).map(|_| r.random::<bool>()).collect()
    });

    let mut ppi = vec![0.0; n * n];
    for i in 0..n {
        ppi[i * n + i] = 1.0;
        for j in i + 1..n {
            let same = cluster[i] == cluster[j];
            let v = (same != (r_flip(&mut rng, flip))) as u8 as f64;
            ppi[i * n + j] = v;
            ppi[j * n + i] = v;
        }
    }
    let mut attributes = Vec::with_capacity(n * spec.attr_width);
    let mut seq = Vec::with_capacity(n * spec.seq_width);
    for &c in &cluster {
        for &bit in &attr_protos[c] {
            attributes.push((bit != r_flip(&mut rng, flip)) as u8 as f64);
        }
        for &bit in &seq_protos[c] {
            let sign = if bit != r_flip(&mut rng, flip) { 1.0 } else { -1.0 };
            let z: f64 = StandardNormal.sample(&mut rng);
            seq.push(sign + 0.1 * spec.noise * z);
        }
    }
    let labels: Vec<f64> = cluster.iter().flat_map(|&c| label_sets[c].iter().map(|&b| b as u8 as f64)).collect();

    let ids = (0..n).map(|i| format!("P{i:05}")).collect();
    let term_ids = (0..m).map(|j| format!("GO:{:07}", j + 1)).collect();
    let mut ds = ProteinDataset::new(
        ids,
        term_ids,
        Tensor::new(vec![n, n], ppi).expect("square"),
        Tensor::new(vec![n, spec.attr_width], attributes).expect("attr"),
        Tensor::new(vec![n, spec.seq_width], seq).expect("seq"),
        Tensor::new(vec![n, m], labels).expect("labels"),
        vec![true; n],
        vec![Split::Train; n],
    )?;
    split_dataset(&mut ds, spec.split, spec.seed)?;
    Ok(ds)
}

fn r_flip(rng: &mut ChaCha8Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{davies_bouldin, label_set_clusters};

    fn small() -> ProteinDataset {
        synth_dataset(&SynthSpec::new(16, 4, 4, 0.2, 3)).unwrap()
    }

    #[test]
    fn split_counts_follow_cumulative_floors() {
        let mut ds = synth_dataset(&SynthSpec::new(64, 8, 8, 0.3, 1)).unwrap();
        let c = split_dataset(&mut ds, [0.8, 0.1, 0.1], 5).unwrap();
        assert_eq!((c.train, c.valid, c.test), (51, 6, 7));
        assert_eq!(ds.indices(Split::Train).len(), 51);
        let all = split_dataset(&mut ds, [1.0, 0.0, 0.0], 5).unwrap();
        assert_eq!((all.train, all.valid, all.test), (64, 0, 0));
    }

    #[test]
    fn split_is_seeded() {
        let mut a = small();
        let mut b = small();
        split_dataset(&mut a, [0.5, 0.25, 0.25], 9).unwrap();
        split_dataset(&mut b, [0.5, 0.25, 0.25], 9).unwrap();
        assert_eq!(a.split, b.split);
        split_dataset(&mut b, [0.5, 0.25, 0.25], 10).unwrap();
        assert_ne!(a.split, b.split);
    }

    #[test]
    fn split_errors() {
        let mut ds = small();
        assert!(matches!(split_dataset(&mut ds, [0.5, 0.5, 0.5], 0), Err(DataError::BadFractions(_))));
        assert!(matches!(split_dataset(&mut ds, [0.97, 0.02, 0.01], 0), Err(DataError::EmptySplit(Split::Valid))));
    }

    #[test]
    fn synth_is_deterministic_and_valid() {
        let a = small();
        assert_eq!(a, small());
        assert_eq!(a.len(), 16);
        assert!(a.seq_norm.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(a.ppi.data()[i * 16 + j], a.ppi.data()[j * 16 + i]);
            }
        }
        assert_ne!(a, synth_dataset(&SynthSpec { seed: 4, ..SynthSpec::new(16, 4, 4, 0.2, 3) }).unwrap());
    }

    #[test]
    fn synth_noise_zero_gives_identical_rows() {
        let ds = synth_dataset(&SynthSpec::new(12, 4, 3, 0.0, 2)).unwrap();
        let clusters = label_set_clusters(&ds.labels);
        assert_eq!(clusters.iter().max(), Some(&2));
        for raw in [&ds.ppi, &ds.attributes, &ds.seq_raw] {
            assert_eq!(davies_bouldin(raw, &clusters).unwrap(), 0.0);
        }
    }

    #[test]
    fn synth_spec_validation() {
        assert!(SynthSpec::new(8, 4, 4, 1.5, 0).validate().is_err());
        assert!(SynthSpec::new(8, 4, 9, 0.1, 0).validate().is_err());
        assert!(SynthSpec::new(8, 2, 4, 0.1, 0).validate().is_err());
        assert!(SynthSpec::new(8, 2, 3, 0.1, 0).validate().is_ok());
    }

    #[test]
    fn normalization_constants_reproduce() {
        let ds = small();
        let again = normalize_with(&ds.seq_raw, &ds.seq_min, &ds.seq_max);
        assert!(again.max_abs_diff(&ds.seq_norm) <= 1e-12);
    }

    #[test]
    fn save_load_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let ds = small();
        ds.save(&a).unwrap();
        let loaded = ProteinDataset::load(&a).unwrap();
        assert_eq!(loaded, ds);
        loaded.save(&b).unwrap();
        for f in ["ids.txt", "terms.txt", "ppi.tsv", "attributes.tsv", "seq_embed.tsv", "labels.tsv", "splits.tsv"] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn asymmetric_ppi_is_symmetrized() {
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        let ppi = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let ds = ProteinDataset::new(
            ids,
            vec!["t".into()],
            ppi,
            Tensor::zeros(vec![2, 1]),
            Tensor::zeros(vec![2, 1]),
            Tensor::ones(vec![2, 1]),
            vec![true, true],
            vec![Split::Train, Split::Test],
        )
        .unwrap();
        assert_eq!(ds.ppi.data(), &[0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn labeled_protein_without_labels_is_named() {
        let err = ProteinDataset::new(
            vec!["a".into(), "b".into()],
            vec!["t".into()],
            Tensor::zeros(vec![2, 2]),
            Tensor::zeros(vec![2, 1]),
            Tensor::zeros(vec![2, 1]),
            Tensor::zeros(vec![2, 1]),
            vec![true, false],
            vec![Split::Train, Split::Test],
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "protein b is in a labeled split but has no row in labels.tsv");
    }

    #[test]
    fn load_errors_are_specific() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        small().save(d).unwrap();
        let edit = |file: &str, f: &dyn Fn(String) -> String| {
            let p = d.join(file);
            let orig = fs::read_to_string(&p).unwrap();
            fs::write(&p, f(orig.clone())).unwrap();
            orig
        };
        let orig = edit("labels.tsv", &|s| s.replacen("\t1", "\t2", 1));
        assert!(matches!(ProteinDataset::load(d), Err(DataError::NonBinary { .. })));
        fs::write(d.join("labels.tsv"), orig).unwrap();

        let orig = edit("seq_embed.tsv", &|s| {
            let mut lines: Vec<String> = s.lines().map(String::from).collect();
            let mut f: Vec<String> = lines[1].split('\t').map(String::from).collect();
            f[0] = "NaN".into();
            lines[1] = f.join("\t");
            lines.join("\n") + "\n"
        });
        assert!(matches!(ProteinDataset::load(d), Err(DataError::NonFinite { .. })));
        fs::write(d.join("seq_embed.tsv"), orig).unwrap();

        let orig = edit("attributes.tsv", &|s| {
            let mut lines: Vec<&str> = s.lines().collect();
            lines.pop();
            lines.join("\n") + "\n"
        });
        assert!(matches!(ProteinDataset::load(d), Err(DataError::RowCount { .. })));
        fs::write(d.join("attributes.tsv"), orig).unwrap();

        fs::remove_file(d.join("ppi.tsv")).unwrap();
        assert!(matches!(ProteinDataset::load(d), Err(DataError::Io { .. })));
    }
}
