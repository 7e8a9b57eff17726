//! File formats and the pipelines behind the CLI commands.
//!
//! * annotations: `example_id,annotator_id,label`, one row per annotation
//! * classifier probabilities: `example_id,p_0,...,p_{K-1}`, one row per example
//! * ground truth: `example_id,label`
//! * optional label map: `class_index,label`, translating class names to indices
//!
//! Example and annotator ids are arbitrary strings. They are mapped to dense
//! indices in sorted order (numeric order when every id is an integer), and
//! outputs refer to them by their original strings. Outputs are written to a
//! temporary file in the target directory and renamed into place.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    majority_vote, validate, Annotation, AnnotationTable, ProbMatrix, Severity, ValidationSummary,
    ROW_SUM_TOLERANCE,
};
use crate::dawid_skene::DsConfig;
use crate::error::{Error, Result};
use crate::glad::GladConfig;
use crate::methods::{run, Diagnostics, Method, MethodConfig, MethodResult};
use crate::metrics::{
    annotator_truth_accuracy, consensus_accuracy, detection_metrics, spearman, EvalInput,
    DEFAULT_LIFT_CUTOFFS,
};
use crate::simulate::{simulate, SimConfig, SimDataset};

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_error(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Dense index over string ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdIndex {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdIndex {
    /// Deduplicates and sorts the ids: numerically if all of them are
    /// integers, lexicographically otherwise.
    pub fn from_names<I: IntoIterator<Item = String>>(names: I) -> Self {
        let mut names: Vec<String> = names.into_iter().collect();
        names.sort();
        names.dedup();
        if names.iter().all(|n| n.parse::<i64>().is_ok()) {
            names.sort_by_key(|n| n.parse::<i64>().unwrap());
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self { names, index }
    }

    /// Ids `0..n` in order.
    pub fn sequential(n: usize) -> Self {
        Self::from_names((0..n).map(|i| i.to_string()))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Translation between class names and class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::input(format!(
                    "label '{}' appears twice in the label map",
                    n
                )));
            }
        }
        Ok(Self { names, index })
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }
}

fn parse_label(raw: &str, map: Option<&LabelMap>, path: &Path, line: u64) -> Result<usize> {
    match map {
        Some(m) => m.index.get(raw).copied().ok_or_else(|| {
            Error::input(format!(
                "{}: line {}: label '{}' is not in the label map",
                path.display(),
                line,
                raw
            ))
        }),
        None => raw.parse::<usize>().map_err(|_| {
            Error::input(format!(
                "{}: line {}: label '{}' is not a class index (supply a label map for named classes)",
                path.display(),
                line,
                raw
            ))
        }),
    }
}

fn format_label(class: usize, map: Option<&LabelMap>) -> String {
    match map {
        Some(m) => m.name(class).to_string(),
        None => class.to_string(),
    }
}

/// CSV records paired with their line numbers.
type Records = Vec<(u64, Vec<String>)>;

/// Reads a headed CSV, checking that the header starts with `expected`.
/// Returns the header and the records with their line numbers.
fn read_csv(
    path: &Path,
    expected: &[&str],
    exact: bool,
) -> Result<(Vec<String>, Records)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error(path))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_error(path))?
        .iter()
        .map(str::to_string)
        .collect();
    let prefix_ok = header.len() >= expected.len()
        && header.iter().zip(expected).all(|(h, e)| h == e)
        && (!exact || header.len() == expected.len());
    if !prefix_ok {
        return Err(Error::input(format!(
            "{}: missing header: expected '{}', found '{}'",
            path.display(),
            expected.join(","),
            header.join(",")
        )));
    }
    let mut records = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error(path))?;
        let line = record.position().map_or(0, |p| p.line());
        records.push((line, record.iter().map(str::to_string).collect()));
    }
    Ok((header, records))
}

pub fn load_label_map(path: &Path) -> Result<LabelMap> {
    let (_, records) = read_csv(path, &["class_index", "label"], true)?;
    let mut pairs: Vec<(usize, String)> = Vec::with_capacity(records.len());
    for (line, fields) in records {
        let class = fields[0].parse::<usize>().map_err(|_| {
            Error::input(format!(
                "{}: line {}: class index '{}' is not a non-negative integer",
                path.display(),
                line,
                fields[0]
            ))
        })?;
        pairs.push((class, fields[1].clone()));
    }
    pairs.sort();
    if pairs.iter().enumerate().any(|(i, (c, _))| *c != i) {
        return Err(Error::input(format!(
            "{}: class indices must be exactly 0..K-1",
            path.display()
        )));
    }
    LabelMap::new(pairs.into_iter().map(|(_, n)| n).collect())
}

/// An annotation table together with the ids its indices stand for.
#[derive(Debug, Clone)]
pub struct LoadedAnnotations {
    pub table: AnnotationTable,
    pub examples: IdIndex,
    pub annotators: IdIndex,
}

fn read_annotations(
    path: &Path,
    labels: Option<&LabelMap>,
    num_classes: Option<usize>,
    strict: bool,
) -> Result<LoadedAnnotations> {
    let (_, records) = read_csv(path, &["example_id", "annotator_id", "label"], true)?;
    let examples = IdIndex::from_names(records.iter().map(|(_, f)| f[0].clone()));
    let annotators = IdIndex::from_names(records.iter().map(|(_, f)| f[1].clone()));
    let mut seen = HashMap::new();
    let mut entries = Vec::with_capacity(records.len());
    for (line, fields) in &records {
        let i = examples.get(&fields[0]).unwrap();
        let j = annotators.get(&fields[1]).unwrap();
        let label = parse_label(&fields[2], labels, path, *line)?;
        if let Some(first) = seen.insert((i, j), *line) {
            if strict {
                return Err(Error::input(format!(
                    "{}: duplicate annotation at line {} (example '{}', annotator '{}', first seen at line {})",
                    path.display(),
                    line,
                    fields[0],
                    fields[1],
                    first
                )));
            }
        }
        entries.push(Annotation::new(i, j, label));
    }
    let observed = entries.iter().map(|a| a.label + 1).max().unwrap_or(0);
    let k = match (num_classes, labels) {
        (Some(k), Some(map)) if k != map.num_classes() => {
            return Err(Error::config(format!(
                "num_classes is {} but the label map has {} classes",
                k,
                map.num_classes()
            )))
        }
        (Some(k), _) => k,
        (None, Some(map)) => map.num_classes(),
        (None, None) => observed,
    };
    if strict && observed > k {
        return Err(Error::input(format!(
            "{}: label {} out of range for {} classes",
            path.display(),
            observed - 1,
            k
        )));
    }
    let table = AnnotationTable::new(examples.len(), k, annotators.len(), entries)?;
    Ok(LoadedAnnotations {
        table,
        examples,
        annotators,
    })
}

/// Loads a long-format annotation file. Duplicate (example, annotator) pairs
/// and labels beyond `num_classes` are errors.
pub fn load_annotations(
    path: &Path,
    labels: Option<&LabelMap>,
    num_classes: Option<usize>,
) -> Result<LoadedAnnotations> {
    read_annotations(path, labels, num_classes, true)
}

/// Like [`load_annotations`] but keeps duplicates and out-of-range labels so
/// that [`validate`] can report them.
pub fn load_annotations_lenient(
    path: &Path,
    labels: Option<&LabelMap>,
    num_classes: Option<usize>,
) -> Result<LoadedAnnotations> {
    read_annotations(path, labels, num_classes, false)
}

/// Loads classifier probabilities aligned to `examples`.
pub fn load_probs(path: &Path, examples: &IdIndex) -> Result<ProbMatrix> {
    let (header, records) = read_csv(path, &["example_id"], false)?;
    let k = header.len() - 1;
    for (c, h) in header[1..].iter().enumerate() {
        if *h != format!("p_{}", c) {
            return Err(Error::input(format!(
                "{}: missing header: column {} should be 'p_{}', found '{}'",
                path.display(),
                c + 1,
                c,
                h
            )));
        }
    }
    if k < 2 {
        return Err(Error::input(format!(
            "{}: need at least two probability columns",
            path.display()
        )));
    }
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; examples.len()];
    for (line, fields) in records {
        let id = &fields[0];
        let i = examples.get(id).ok_or_else(|| {
            Error::input(format!(
                "{}: line {}: example '{}' does not appear in the annotations",
                path.display(),
                line,
                id
            ))
        })?;
        if rows[i].is_some() {
            return Err(Error::input(format!(
                "{}: line {}: second row for example '{}'",
                path.display(),
                line,
                id
            )));
        }
        let row = fields[1..]
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(|| {
                        Error::input(format!(
                            "{}: line {}: '{}' is not a probability (example '{}')",
                            path.display(),
                            line,
                            v,
                            id
                        ))
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::input(format!(
                "{}: line {}: row sum {} for example '{}' is not 1",
                path.display(),
                line,
                sum,
                id
            )));
        }
        rows[i] = Some(row);
    }
    let missing: Vec<&str> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_none())
        .map(|(i, _)| examples.name(i))
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(10).copied().collect();
        return Err(Error::input(format!(
            "{}: missing probabilities for {} example(s): {}{}",
            path.display(),
            missing.len(),
            shown.join(", "),
            if missing.len() > shown.len() {
                ", ..."
            } else {
                ""
            }
        )));
    }
    ProbMatrix::from_rows(rows.into_iter().map(Option::unwrap).collect())
}

/// Brings the table and the probabilities to a common class count. A
/// probability file may know classes nobody annotated; unless K was fixed
/// explicitly, the table widens to match.
pub fn reconcile_classes(
    loaded: &mut LoadedAnnotations,
    probs: &ProbMatrix,
    fixed_k: bool,
) -> Result<()> {
    let table_k = loaded.table.num_classes();
    let probs_k = probs.num_classes();
    if probs_k == table_k {
        return Ok(());
    }
    if probs_k < table_k || fixed_k {
        return Err(Error::input(format!(
            "class count mismatch: annotations use {} classes, probabilities have {}",
            table_k, probs_k
        )));
    }
    let t = &loaded.table;
    loaded.table = AnnotationTable::new(
        t.num_examples(),
        probs_k,
        t.num_annotators(),
        t.entries().to_vec(),
    )?;
    Ok(())
}

pub fn load_truth(
    path: &Path,
    examples: &IdIndex,
    labels: Option<&LabelMap>,
) -> Result<Vec<usize>> {
    let (_, records) = read_csv(path, &["example_id", "label"], true)?;
    let mut truth = vec![None; examples.len()];
    for (line, fields) in records {
        let i = examples.get(&fields[0]).ok_or_else(|| {
            Error::input(format!(
                "{}: line {}: example '{}' does not appear in the annotations",
                path.display(),
                line,
                fields[0]
            ))
        })?;
        truth[i] = Some(parse_label(&fields[1], labels, path, line)?);
    }
    let missing: Vec<&str> = truth
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_none())
        .map(|(i, _)| examples.name(i))
        .take(10)
        .collect();
    if !missing.is_empty() {
        return Err(Error::input(format!(
            "{}: no truth label for example(s): {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok(truth.into_iter().map(Option::unwrap).collect())
}

/// Writes `contents` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_error(dir))?;
    tmp.write_all(contents).map_err(io_error(path))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(fs::Permissions::from_mode(0o644))
            .map_err(io_error(path))?;
    }
    tmp.persist(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn write_csv(
    path: &Path,
    header: &[String],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_error(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_error(path))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into_error(),
    })?;
    write_atomic(path, &bytes)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Six significant digits, without trailing zeros.
pub fn format_sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{:.5e}", x).parse().unwrap();
    rounded.to_string()
}

pub fn write_annotations(
    path: &Path,
    table: &AnnotationTable,
    examples: &IdIndex,
    annotators: &IdIndex,
    labels: Option<&LabelMap>,
) -> Result<()> {
    let rows = (0..table.num_examples()).flat_map(|i| {
        table.example_annotations(i).iter().map(move |&(j, l)| {
            vec![
                examples.name(i).to_string(),
                annotators.name(j).to_string(),
                format_label(l, labels),
            ]
        })
    });
    write_csv(
        path,
        &strings(&["example_id", "annotator_id", "label"]),
        rows,
    )
}

/// Probabilities at full precision (shortest representation that reads back exactly).
pub fn write_probs(path: &Path, probs: &ProbMatrix, examples: &IdIndex) -> Result<()> {
    let mut header = vec!["example_id".to_string()];
    header.extend((0..probs.num_classes()).map(|c| format!("p_{}", c)));
    let rows = (0..probs.num_rows()).map(|i| {
        let mut row = vec![examples.name(i).to_string()];
        row.extend(probs.row(i).iter().map(|p| p.to_string()));
        row
    });
    write_csv(path, &header, rows)
}

pub fn write_truth(
    path: &Path,
    truth: &[usize],
    examples: &IdIndex,
    labels: Option<&LabelMap>,
) -> Result<()> {
    let rows = truth
        .iter()
        .enumerate()
        .map(|(i, &t)| vec![examples.name(i).to_string(), format_label(t, labels)]);
    write_csv(path, &strings(&["example_id", "label"]), rows)
}

pub fn write_consensus(
    path: &Path,
    table: &AnnotationTable,
    result: &MethodResult,
    examples: &IdIndex,
    labels: Option<&LabelMap>,
) -> Result<()> {
    let rows = (0..table.num_examples()).map(|i| {
        vec![
            examples.name(i).to_string(),
            format_label(result.consensus[i], labels),
            format_sig6(result.quality[i]),
            table.annotation_count(i).to_string(),
        ]
    });
    write_csv(
        path,
        &strings(&[
            "example_id",
            "consensus_label",
            "quality_score",
            "num_annotations",
        ]),
        rows,
    )
}

pub fn write_annotator_scores(
    path: &Path,
    table: &AnnotationTable,
    scores: &[f64],
    annotators: &IdIndex,
) -> Result<()> {
    let rows = scores.iter().enumerate().map(|(j, s)| {
        vec![
            annotators.name(j).to_string(),
            format_sig6(*s),
            table.annotator_labels(j).len().to_string(),
        ]
    });
    write_csv(
        path,
        &strings(&["annotator_id", "quality_score", "num_labeled"]),
        rows,
    )
}

/// Reads a `consensus.csv` written by `score`.
pub fn read_consensus(
    path: &Path,
    examples: &IdIndex,
    labels: Option<&LabelMap>,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (_, records) = read_csv(
        path,
        &[
            "example_id",
            "consensus_label",
            "quality_score",
            "num_annotations",
        ],
        true,
    )?;
    let mut rows = vec![None; examples.len()];
    for (line, fields) in records {
        let i = examples.get(&fields[0]).ok_or_else(|| {
            Error::input(format!(
                "{}: line {}: unknown example '{}'",
                path.display(),
                line,
                fields[0]
            ))
        })?;
        let label = parse_label(&fields[1], labels, path, line)?;
        let quality = fields[2].parse::<f64>().map_err(|_| {
            Error::input(format!(
                "{}: line {}: bad quality score '{}'",
                path.display(),
                line,
                fields[2]
            ))
        })?;
        rows[i] = Some((label, quality));
    }
    if let Some(i) = rows.iter().position(Option::is_none) {
        return Err(Error::input(format!(
            "{}: no consensus row for example '{}'",
            path.display(),
            examples.name(i)
        )));
    }
    Ok(rows.into_iter().map(Option::unwrap).unzip())
}

/// Reads an `annotators.csv` written by `score`.
pub fn read_annotator_scores(path: &Path, annotators: &IdIndex) -> Result<Vec<f64>> {
    let (_, records) = read_csv(
        path,
        &["annotator_id", "quality_score", "num_labeled"],
        true,
    )?;
    let mut scores = vec![None; annotators.len()];
    for (line, fields) in records {
        let j = annotators.get(&fields[0]).ok_or_else(|| {
            Error::input(format!(
                "{}: line {}: unknown annotator '{}'",
                path.display(),
                line,
                fields[0]
            ))
        })?;
        scores[j] = Some(fields[1].parse::<f64>().map_err(|_| {
            Error::input(format!(
                "{}: line {}: bad quality score '{}'",
                path.display(),
                line,
                fields[1]
            ))
        })?);
    }
    if let Some(j) = scores.iter().position(Option::is_none) {
        return Err(Error::input(format!(
            "{}: no score for annotator '{}'",
            path.display(),
            annotators.name(j)
        )));
    }
    Ok(scores.into_iter().map(Option::unwrap).collect())
}

/// Reads a TOML or JSON file, chosen by extension.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => {
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {}", path.display(), e)))
        }
        Some("json") => serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {}", path.display(), e))),
        _ => Err(Error::config(format!(
            "{}: config files must end in .toml or .json",
            path.display()
        ))),
    }
}

/// Settings shared by `score`, `evaluate` and `validate`. Every field can
/// come from a config file and be overridden on the command line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Option<Method>,
    pub annotations: Option<PathBuf>,
    pub pred_probs: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    /// Directory holding a finished `score` run, for `evaluate`.
    pub scores: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub label_map: Option<PathBuf>,
    pub num_classes: Option<usize>,
    pub lift_cutoffs: Option<Vec<usize>>,
    /// Adds wall-clock timings to run.json (which then differs between runs).
    pub record_timings: bool,
    pub dawid_skene: DsConfig,
    pub glad: GladConfig,
}

impl RunConfig {
    pub fn method_config(&self) -> MethodConfig {
        MethodConfig {
            dawid_skene: self.dawid_skene,
            glad: self.glad,
        }
    }

    fn require<'a, T>(value: &'a Option<T>, what: &str) -> Result<&'a T> {
        value
            .as_ref()
            .ok_or_else(|| Error::config(format!("missing required setting: {}", what)))
    }

    fn label_map(&self) -> Result<Option<LabelMap>> {
        self.label_map.as_deref().map(load_label_map).transpose()
    }

    fn out_dir(&self) -> Result<&Path> {
        let out = Self::require(&self.out, "--out")?;
        fs::create_dir_all(out).map_err(io_error(out))?;
        Ok(out)
    }
}

/// Annotations plus optional probabilities, loaded and reconciled.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub annotations: LoadedAnnotations,
    pub probs: Option<ProbMatrix>,
    pub labels: Option<LabelMap>,
}

pub fn load_inputs(config: &RunConfig, need_probs: bool) -> Result<Inputs> {
    let labels = config.label_map()?;
    let path = RunConfig::require(&config.annotations, "--annotations")?;
    let mut annotations = load_annotations(path, labels.as_ref(), config.num_classes)?;
    let probs = match &config.pred_probs {
        Some(p) => {
            let probs = load_probs(p, &annotations.examples)?;
            let fixed = config.num_classes.is_some() || labels.is_some();
            reconcile_classes(&mut annotations, &probs, fixed)?;
            Some(probs)
        }
        None if need_probs => {
            return Err(Error::config(
                "this method needs classifier probabilities (--pred-probs)",
            ))
        }
        None => None,
    };
    Ok(Inputs {
        annotations,
        probs,
        labels,
    })
}

fn warn_on_violations(summary: &ValidationSummary) {
    let warnings = summary
        .violations
        .iter()
        .filter(|v| v.severity() == Severity::Warning)
        .count();
    if warnings > 0 {
        log::warn!(
            "{} validation warning(s), e.g. {}",
            warnings,
            summary.violations[0]
        );
    }
}

#[derive(Debug, Serialize)]
struct DatasetCounts {
    num_examples: usize,
    num_annotators: usize,
    num_classes: usize,
    num_annotations: usize,
    num_multi_annotated: usize,
}

impl DatasetCounts {
    fn of(table: &AnnotationTable) -> Self {
        Self {
            num_examples: table.num_examples(),
            num_annotators: table.num_annotators(),
            num_classes: table.num_classes(),
            num_annotations: table.num_annotations(),
            num_multi_annotated: table.num_multi_annotated(),
        }
    }
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    method: Method,
    version: &'static str,
    inputs: InputEcho<'a>,
    dataset: DatasetCounts,
    hyperparameters: MethodConfig,
    diagnostics: &'a Diagnostics,
    outputs: Vec<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    timings_ms: Option<BTreeMap<&'static str, f64>>,
}

#[derive(Debug, Serialize)]
struct InputEcho<'a> {
    annotations: Option<&'a Path>,
    pred_probs: Option<&'a Path>,
    label_map: Option<&'a Path>,
    num_classes: Option<usize>,
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}

/// `score`: runs one method and writes consensus.csv, annotators.csv and run.json.
pub fn run_score(config: &RunConfig) -> Result<MethodResult> {
    let method = *RunConfig::require(&config.method, "--method")?;
    let out = config.out_dir()?;
    let start = Instant::now();
    let inputs = load_inputs(config, method.needs_probs())?;
    let load_ms = elapsed_ms(start);
    let table = &inputs.annotations.table;
    warn_on_violations(&validate(table, inputs.probs.as_ref()));

    let start = Instant::now();
    let result = run(
        method,
        table,
        inputs.probs.as_ref(),
        &config.method_config(),
    )?;
    let fit_ms = elapsed_ms(start);

    write_consensus(
        &out.join("consensus.csv"),
        table,
        &result,
        &inputs.annotations.examples,
        inputs.labels.as_ref(),
    )?;
    let mut outputs = vec!["consensus.csv"];
    let annotators_path = out.join("annotators.csv");
    match &result.annotator_scores {
        Some(scores) => {
            write_annotator_scores(
                &annotators_path,
                table,
                scores,
                &inputs.annotations.annotators,
            )?;
            outputs.push("annotators.csv");
        }
        // Do not leave a stale file from an earlier run with another method.
        None if annotators_path.exists() => {
            fs::remove_file(&annotators_path).map_err(io_error(&annotators_path))?
        }
        None => {}
    }
    outputs.push("run.json");

    let record = RunRecord {
        method,
        version: env!("CARGO_PKG_VERSION"),
        inputs: InputEcho {
            annotations: config.annotations.as_deref(),
            pred_probs: config.pred_probs.as_deref(),
            label_map: config.label_map.as_deref(),
            num_classes: config.num_classes,
        },
        dataset: DatasetCounts::of(table),
        hyperparameters: config.method_config(),
        diagnostics: &result.diagnostics,
        outputs,
        timings_ms: config
            .record_timings
            .then(|| BTreeMap::from([("load", load_ms), ("fit", fit_ms)])),
    };
    write_json(&out.join("run.json"), &record)?;
    Ok(result)
}

/// Contents of metrics.json.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: Option<Method>,
    /// Which labels the quality scores were evaluated on: `majority-vote`
    /// when a method runs inline, `consensus` for a finished score directory.
    pub scored_labels: &'static str,
    pub num_examples: usize,
    pub num_errors: usize,
    pub consensus_accuracy: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    #[serde(flatten)]
    pub lift: BTreeMap<String, Option<f64>>,
    pub spearman: Option<f64>,
    pub inputs: EvalInputs,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalInputs {
    pub annotations: Option<PathBuf>,
    pub pred_probs: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub lift_cutoffs: Vec<usize>,
}

/// Metrics for one method against ground truth.
///
/// Consensus accuracy is measured on the method's own consensus labels.
/// Error detection follows the benchmark protocol: every method scores the
/// same majority-vote labels, so only the quality estimates differ.
pub fn evaluate_result(
    table: &AnnotationTable,
    truth: &[usize],
    result: &MethodResult,
    cutoffs: &[usize],
) -> Result<EvalReport> {
    let mv = majority_vote(table);
    let quality = result.score_labels(table, &mv)?;
    build_report(
        table,
        truth,
        &result.consensus,
        &mv,
        &quality,
        result.annotator_scores.as_deref(),
        cutoffs,
        "majority-vote",
    )
    .map(|mut r| {
        r.method = Some(result.method);
        r
    })
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    table: &AnnotationTable,
    truth: &[usize],
    consensus: &[usize],
    scored_labels: &[usize],
    quality: &[f64],
    annotator_scores: Option<&[f64]>,
    cutoffs: &[usize],
    scored_name: &'static str,
) -> Result<EvalReport> {
    let accuracy = consensus_accuracy(truth, consensus)?;
    let truth_acc = annotator_truth_accuracy(table, truth)?;
    let input = EvalInput {
        truth,
        consensus: scored_labels,
        quality,
        annotator_scores,
        annotator_truth_acc: &truth_acc,
    };
    let detection = detection_metrics(&input, cutoffs)?;
    let spearman = match annotator_scores {
        Some(scores) => match spearman(scores, &truth_acc) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("spearman correlation not reported: {}", e);
                None
            }
        },
        None => None,
    };
    Ok(EvalReport {
        method: None,
        scored_labels: scored_name,
        num_examples: truth.len(),
        num_errors: detection.num_errors,
        consensus_accuracy: accuracy,
        auroc: detection.auroc,
        auprc: detection.auprc,
        lift: detection
            .lift
            .iter()
            .map(|l| (format!("lift@{}", l.cutoff), l.value))
            .collect(),
        spearman,
        inputs: EvalInputs {
            annotations: None,
            pred_probs: None,
            truth: None,
            scores: None,
            lift_cutoffs: cutoffs.to_vec(),
        },
    })
}

/// `evaluate`: scores a method inline, or reads a finished `score` directory,
/// and writes metrics.json.
pub fn run_evaluate(config: &RunConfig) -> Result<EvalReport> {
    let out = config.out_dir()?;
    let cutoffs = config
        .lift_cutoffs
        .clone()
        .unwrap_or_else(|| DEFAULT_LIFT_CUTOFFS.to_vec());
    let truth_path = RunConfig::require(&config.truth, "--truth")?;
    let mut report = match &config.scores {
        Some(dir) => {
            let inputs = load_inputs(config, false)?;
            let ann = &inputs.annotations;
            let truth = load_truth(truth_path, &ann.examples, inputs.labels.as_ref())?;
            let (consensus, quality) = read_consensus(
                &dir.join("consensus.csv"),
                &ann.examples,
                inputs.labels.as_ref(),
            )?;
            let annotators_path = dir.join("annotators.csv");
            let scores = if annotators_path.exists() {
                Some(read_annotator_scores(&annotators_path, &ann.annotators)?)
            } else {
                None
            };
            build_report(
                &ann.table,
                &truth,
                &consensus,
                &consensus,
                &quality,
                scores.as_deref(),
                &cutoffs,
                "consensus",
            )?
        }
        None => {
            let method = *RunConfig::require(&config.method, "--method or --scores")?;
            let inputs = load_inputs(config, method.needs_probs())?;
            let ann = &inputs.annotations;
            let truth = load_truth(truth_path, &ann.examples, inputs.labels.as_ref())?;
            let result = run(
                method,
                &ann.table,
                inputs.probs.as_ref(),
                &config.method_config(),
            )?;
            evaluate_result(&ann.table, &truth, &result, &cutoffs)?
        }
    };
    report.inputs = EvalInputs {
        annotations: config.annotations.clone(),
        pred_probs: config.pred_probs.clone(),
        truth: config.truth.clone(),
        scores: config.scores.clone(),
        lift_cutoffs: cutoffs,
    };
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
struct SimRecord<'a> {
    version: &'static str,
    seed: u64,
    config: &'a SimConfig,
    realized_model_accuracy: f64,
    annotator_accuracy: Vec<AnnotatorAccuracy<'a>>,
}

#[derive(Debug, Serialize)]
struct AnnotatorAccuracy<'a> {
    annotator_id: &'a str,
    parameter: f64,
    realized: f64,
    num_labeled: usize,
}

/// `simulate`: writes annotations.csv, pred_probs.csv, truth.csv and sim.json.
pub fn run_simulate(config: &SimConfig, out: &Path) -> Result<SimDataset> {
    fs::create_dir_all(out).map_err(io_error(out))?;
    let sim = simulate(config)?;
    let examples = IdIndex::sequential(sim.table.num_examples());
    let annotators = IdIndex::sequential(sim.table.num_annotators());
    write_annotations(
        &out.join("annotations.csv"),
        &sim.table,
        &examples,
        &annotators,
        None,
    )?;
    write_probs(&out.join("pred_probs.csv"), &sim.probs, &examples)?;
    write_truth(&out.join("truth.csv"), &sim.truth, &examples, None)?;
    let record = SimRecord {
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config,
        realized_model_accuracy: sim.model_accuracy(),
        annotator_accuracy: (0..sim.table.num_annotators())
            .map(|j| AnnotatorAccuracy {
                annotator_id: annotators.name(j),
                parameter: sim.annotator_accuracy_params[j],
                realized: sim.true_annotator_acc[j],
                num_labeled: sim.table.annotator_labels(j).len(),
            })
            .collect(),
    };
    write_json(&out.join("sim.json"), &record)?;
    Ok(sim)
}

/// `validate`: reports counts and every violation without failing on them.
pub fn run_validate(config: &RunConfig) -> Result<ValidationSummary> {
    let labels = config.label_map()?;
    let path = RunConfig::require(&config.annotations, "--annotations")?;
    let loaded = load_annotations_lenient(path, labels.as_ref(), config.num_classes)?;
    let probs = config
        .pred_probs
        .as_deref()
        .map(|p| load_probs_unchecked(p, &loaded.examples))
        .transpose()?;
    let summary = validate(&loaded.table, probs.as_ref());
    if let Some(out) = &config.out {
        fs::create_dir_all(out).map_err(io_error(out))?;
        write_json(&out.join("validation.json"), &summary)?;
    }
    Ok(summary)
}

/// Reads probabilities without any checks so that [`validate`] can report
/// every problem. Examples without a row get an empty row.
fn load_probs_unchecked(path: &Path, examples: &IdIndex) -> Result<ProbMatrix> {
    let (header, records) = read_csv(path, &["example_id"], false)?;
    let k = header.len() - 1;
    let mut rows = vec![vec![f64::NAN; k]; examples.len()];
    for (line, fields) in records {
        let Some(i) = examples.get(&fields[0]) else {
            log::warn!(
                "{}: line {}: unknown example '{}'",
                path.display(),
                line,
                fields[0]
            );
            continue;
        };
        rows[i] = fields[1..]
            .iter()
            .map(|v| v.parse::<f64>().unwrap_or(f64::NAN))
            .collect();
    }
    Ok(ProbMatrix::from_rows_unchecked(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_a_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.csv",
            "example_id,annotator_id,label\nx,alice,0\nx,bob,1\ny,alice,1\n",
        );
        let loaded = load_annotations(&p, None, None).unwrap();
        assert_eq!(loaded.table.num_examples(), 2);
        assert_eq!(loaded.table.num_annotators(), 2);
        assert_eq!(loaded.table.num_classes(), 2);
        assert_eq!(loaded.examples.names(), &["x", "y"]);
    }

    #[test]
    fn duplicate_pair_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.csv",
            "example_id,annotator_id,label\n0,a,0\n1,a,1\n0,a,1\n",
        );
        let err = load_annotations(&p, None, None).unwrap_err().to_string();
        assert!(err.contains("duplicate annotation at line 4"), "{}", err);
        let lenient = load_annotations_lenient(&p, None, None).unwrap();
        assert!(validate(&lenient.table, None).has_errors());
    }

    #[test]
    fn missing_header_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "0,a,0\n1,a,1\n");
        let err = load_annotations(&p, None, None).unwrap_err().to_string();
        assert!(err.contains("missing header"), "{}", err);
    }

    #[test]
    fn label_map_translates_and_rejects_unknown_names() {
        let dir = tempfile::tempdir().unwrap();
        let map = write(
            dir.path(),
            "m.csv",
            "class_index,label\n1,dog\n0,cat\n2,bird\n",
        );
        let map = load_label_map(&map).unwrap();
        let p = write(
            dir.path(),
            "a.csv",
            "example_id,annotator_id,label\n0,a,dog\n1,a,cat\n",
        );
        let loaded = load_annotations(&p, Some(&map), None).unwrap();
        assert_eq!(loaded.table.num_classes(), 3);
        assert_eq!(loaded.table.example_annotations(0), &[(0, 1)]);
        let p = write(
            dir.path(),
            "b.csv",
            "example_id,annotator_id,label\n0,a,cow\n",
        );
        let err = load_annotations(&p, Some(&map), None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("cow"), "{}", err);
    }

    #[test]
    fn probability_rows_are_checked_against_the_table() {
        let dir = tempfile::tempdir().unwrap();
        let ids = IdIndex::from_names(["e1".to_string(), "e2".to_string()]);
        let ok = write(
            dir.path(),
            "p.csv",
            "example_id,p_0,p_1\ne2,0.4,0.6000003\ne1,0.5,0.5\n",
        );
        let probs = load_probs(&ok, &ids).unwrap();
        assert_eq!(probs.row(0), &[0.5, 0.5]);
        assert!((probs.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-15);

        let bad = write(
            dir.path(),
            "q.csv",
            "example_id,p_0,p_1\ne1,0.4,0.4\ne2,0.5,0.5\n",
        );
        let err = load_probs(&bad, &ids).unwrap_err().to_string();
        assert!(err.contains("row sum") && err.contains("e1"), "{}", err);

        let missing = write(dir.path(), "r.csv", "example_id,p_0,p_1\ne1,0.5,0.5\n");
        let err = load_probs(&missing, &ids).unwrap_err().to_string();
        assert!(err.contains("e2"), "{}", err);

        let unknown = write(
            dir.path(),
            "s.csv",
            "example_id,p_0,p_1\ne1,0.5,0.5\ne2,0.5,0.5\ne3,0.5,0.5\n",
        );
        assert!(load_probs(&unknown, &ids).is_err());
    }

    #[test]
    fn probabilities_can_add_unannotated_classes() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(
            dir.path(),
            "a.csv",
            "example_id,annotator_id,label\n0,a,0\n1,a,1\n",
        );
        let p = write(
            dir.path(),
            "p.csv",
            "example_id,p_0,p_1,p_2\n0,0.2,0.3,0.5\n1,0.1,0.1,0.8\n",
        );
        let mut loaded = load_annotations(&a, None, None).unwrap();
        let probs = load_probs(&p, &loaded.examples).unwrap();
        reconcile_classes(&mut loaded, &probs, false).unwrap();
        assert_eq!(loaded.table.num_classes(), 3);
        let mut fixed = load_annotations(&a, None, Some(2)).unwrap();
        assert!(reconcile_classes(&mut fixed, &probs, true).is_err());
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.7846153846), "0.784615");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(-1.977502211), "-1.9775");
        assert_eq!(format_sig6(123456789.0), "123457000");
    }

    #[test]
    fn integer_ids_sort_numerically() {
        let ids = IdIndex::from_names(["10", "9", "2", "9"].map(String::from));
        assert_eq!(ids.names(), &["2", "9", "10"]);
        let ids = IdIndex::from_names(["b", "10", "a"].map(String::from));
        assert_eq!(ids.names(), &["10", "a", "b"]);
    }
}
