//! ROI time-series I/O, synthetic cohorts, cross-validation folds and
//! segment sampling.
//!
//! Time-series files are headerless CSV with one ROI per row and one
//! timepoint per column. A dataset is described by a JSON-lines manifest,
//! one subject per line:
//!
//! ```text
//! {"subject_id":"sub-000","path":"sub-000.csv","labels":{"class":1,"target":0.42}}
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tape::Mat;

/// One subject's ROI x time signal matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiTimeSeries {
    pub subject_id: String,
    data: Mat,
}

impl RoiTimeSeries {
    pub fn new(subject_id: impl Into<String>, data: Mat) -> Result<Self> {
        let (n, t) = data.dim();
        if n < 2 || t < 2 {
            return Err(Error::data(format!(
                "time-series needs at least 2 ROIs and 2 timepoints, got {n}x{t}"
            )));
        }
        if let Some(((r, c), v)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::data(format!(
                "non-finite value {v} at row {}, column {}",
                r + 1,
                c + 1
            )));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            data,
        })
    }

    pub fn n_rois(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_timepoints(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Mat {
        &self.data
    }

    /// Columns `start..start+len` as a new series with the same id.
    pub fn columns(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.n_timepoints() {
            return Err(Error::data(format!(
                "column range {start}..{} exceeds {} timepoints",
                start + len,
                self.n_timepoints()
            )));
        }
        Self::new(
            self.subject_id.clone(),
            self.data.slice(s![.., start..start + len]).to_owned(),
        )
    }
}

/// Reads a headerless CSV time-series. The subject id is the file stem.
pub fn load_timeseries(path: impl AsRef<Path>) -> Result<RoiTimeSeries> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Format(format!(
                    "{}: row {row} has {} columns, expected {w}",
                    path.display(),
                    record.len()
                )))
            }
            _ => {}
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row,
                col: c + 1,
                msg: format!("{}: not a number: {field:?}", path.display()),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let cols = width.unwrap_or(0);
    let data = Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    RoiTimeSeries::new(id, data)
}

/// Writes the canonical CSV form: shortest round-trip decimal for every
/// value, `,` separators, `\n` line endings.
pub fn save_timeseries(ts: &RoiTimeSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        for row in ts.data.rows() {
            let mut first = true;
            for v in row {
                if !first {
                    w.write_all(b",")?;
                }
                first = false;
                write!(w, "{v}")?;
            }
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub path: String,
    #[serde(default)]
    pub labels: Labels,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.subject_id.as_str()) {
                return Err(Error::data(format!(
                    "duplicate subject_id {:?} in manifest",
                    e.subject_id
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
            entries.push(entry);
        }
        let manifest = Self {
            entries,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        manifest.check_unique()?;
        for e in &manifest.entries {
            let p = manifest.resolve(e);
            if !p.is_file() {
                return Err(Error::data(format!(
                    "subject {:?}: file {} not found",
                    e.subject_id,
                    p.display()
                )));
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.check_unique()?;
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// A subject with its series and labels, in memory.
#[derive(Clone, Debug)]
pub struct Subject {
    pub series: RoiTimeSeries,
    pub labels: Labels,
}

impl Subject {
    pub fn id(&self) -> &str {
        &self.series.subject_id
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
}

impl Dataset {
    /// Loads every series referenced by a manifest. Subject ids come from
    /// the manifest, not the file names.
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let subjects = manifest
            .entries
            .iter()
            .map(|e| {
                let mut series = load_timeseries(manifest.resolve(e))?;
                series.subject_id = e.subject_id.clone();
                Ok(Subject {
                    series,
                    labels: e.labels.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Self { subjects };
        ds.check_shapes()?;
        Ok(ds)
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        Self::from_manifest(&DatasetManifest::load(manifest_path)?)
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn n_rois(&self) -> Option<usize> {
        self.subjects.first().map(|s| s.series.n_rois())
    }

    fn check_shapes(&self) -> Result<()> {
        if let Some(n) = self.n_rois() {
            if let Some(bad) = self.subjects.iter().find(|s| s.series.n_rois() != n) {
                return Err(Error::data(format!(
                    "subject {:?} has {} ROIs, expected {n}",
                    bad.id(),
                    bad.series.n_rois()
                )));
            }
        }
        Ok(())
    }

    /// Sub-dataset with the given subject indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }

    pub fn ids_and_classes(&self) -> Vec<(String, Option<u8>)> {
        self.subjects
            .iter()
            .map(|s| (s.id().to_string(), s.labels.class))
            .collect()
    }
}

/// Parameters of the synthetic community-coupled cohort.
///
/// Community `c` carries a latent signal `s_c(t)`: a width-`smoothing`
/// moving average of unit Gaussian noise. ROI `i` in community `c(i)` emits
/// `s_c(i)(t) + k * s_c'(t) + noise * e(t)` where `c' = c(i) + 1 mod C` and
/// the subject's cross-coupling is `k = coupling_contrast * y + target_gain * target`
/// with class `y` and regression target `target ~ U[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub communities: usize,
    pub smoothing: usize,
    pub coupling_contrast: f64,
    pub noise: f64,
    pub target_gain: f64,
    /// Shortest window the cohort must support twice over.
    pub reference_window: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            communities: 4,
            smoothing: 5,
            coupling_contrast: 0.6,
            noise: 0.5,
            target_gain: 0.3,
            reference_window: 50,
        }
    }
}

/// Generates a labeled synthetic cohort in memory. Pure in `(seed, spec)`.
pub fn synth_subjects(
    n_subjects: usize,
    n_rois: usize,
    n_timepoints: usize,
    seed: u64,
    spec: &SynthSpec,
) -> Result<Vec<Subject>> {
    if n_subjects < 2 {
        return Err(Error::config("need at least 2 subjects"));
    }
    if n_rois < 4 {
        return Err(Error::config("need at least 4 ROIs"));
    }
    if spec.communities == 0 || spec.communities > n_rois {
        return Err(Error::config(format!(
            "{} communities cannot be placed on {n_rois} ROIs",
            spec.communities
        )));
    }
    if spec.smoothing == 0 {
        return Err(Error::config("smoothing width must be positive"));
    }
    if n_timepoints < 2 * spec.reference_window {
        return Err(Error::config(format!(
            "{n_timepoints} timepoints is shorter than twice the reference window {}",
            spec.reference_window
        )));
    }

    let mut classes: Vec<u8> = (0..n_subjects).map(|i| (i % 2) as u8).collect();
    classes.shuffle(&mut rng::derive(seed, &[u64::MAX]));

    let community = |i: usize| i * spec.communities / n_rois;
    (0..n_subjects)
        .map(|i| {
            let mut rng = rng::derive(seed, &[i as u64]);
            let class = classes[i];
            let target: f64 = rng.random();
            let coupling = spec.coupling_contrast * class as f64 + spec.target_gain * target;

            let w = spec.smoothing;
            let mut latent = Mat::zeros((spec.communities, n_timepoints));
            for c in 0..spec.communities {
                let raw: Vec<f64> = (0..n_timepoints + w - 1)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                for t in 0..n_timepoints {
                    latent[[c, t]] = raw[t..t + w].iter().sum::<f64>() / w as f64;
                }
            }
            let mut data = Mat::zeros((n_rois, n_timepoints));
            for r in 0..n_rois {
                let c = community(r);
                let cn = (c + 1) % spec.communities;
                for t in 0..n_timepoints {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    data[[r, t]] = latent[[c, t]] + coupling * latent[[cn, t]] + spec.noise * e;
                }
            }
            Ok(Subject {
                series: RoiTimeSeries::new(format!("sub-{i:04}"), data)?,
                labels: Labels {
                    class: Some(class),
                    target: Some(target),
                },
            })
        })
        .collect()
}

/// Generates a cohort and writes one CSV per subject plus `manifest.jsonl`
/// into `out_dir`.
pub fn synth_dataset(
    n_subjects: usize,
    n_rois: usize,
    n_timepoints: usize,
    seed: u64,
    spec: &SynthSpec,
    out_dir: impl AsRef<Path>,
) -> Result<(DatasetManifest, Vec<PathBuf>)> {
    let out_dir = out_dir.as_ref();
    let subjects = synth_subjects(n_subjects, n_rois, n_timepoints, seed, spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(subjects.len());
    let mut files = Vec::with_capacity(subjects.len());
    for s in &subjects {
        let name = format!("{}.csv", s.id());
        let path = out_dir.join(&name);
        save_timeseries(&s.series, &path)?;
        entries.push(ManifestEntry {
            subject_id: s.id().to_string(),
            path: name,
            labels: s.labels.clone(),
        });
        files.push(path);
    }
    let manifest = DatasetManifest {
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join("manifest.jsonl"))?;
    Ok((manifest, files))
}

/// Assignment of subjects to cross-validation folds.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, subject_id: &str) -> Option<usize> {
        self.assignments.get(subject_id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Stratified k-fold split when every subject has a class label, a plain
/// shuffled split otherwise. Deterministic in `seed`.
pub fn split_folds(subjects: &[(String, Option<u8>)], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::config(format!(
            "fold count must be at least 2, got {k}"
        )));
    }
    if k > subjects.len() {
        return Err(Error::config(format!(
            "{k} folds requested for {} subjects",
            subjects.len()
        )));
    }
    let mut seen = HashSet::new();
    for (id, _) in subjects {
        if !seen.insert(id) {
            return Err(Error::data(format!("duplicate subject_id {id:?}")));
        }
    }
    let mut rng = rng::derive(seed, &[0xf01d]);
    let stratify = subjects.iter().all(|(_, c)| c.is_some());
    let mut groups: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, (_, c)) in subjects.iter().enumerate() {
        let key = if stratify { c.unwrap_or(0) } else { 0 };
        groups.entry(key).or_default().push(i);
    }
    let mut assignments = BTreeMap::new();
    let mut pos = 0;
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assignments.insert(subjects[i].0.clone(), pos % k);
            pos += 1;
        }
    }
    Ok(FoldSplit { k, assignments })
}

/// A uniformly placed contiguous segment of `length` timepoints. Returns
/// the segment and its start column.
pub fn sample_segment(
    ts: &RoiTimeSeries,
    length: usize,
    rng: &mut Rng,
) -> Result<(RoiTimeSeries, usize)> {
    let total = ts.n_timepoints();
    if length > total {
        return Err(Error::data(format!(
            "subject {:?}: segment length {length} exceeds its {total} timepoints; pad the series or skip the subject",
            ts.subject_id
        )));
    }
    let start = rng.random_range(0..=total - length);
    Ok((ts.columns(start, length)?, start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn parses_plain_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s1.csv", "1,2,3\n4,5,6\n");
        let ts = load_timeseries(&p).unwrap();
        assert_eq!(ts.subject_id, "s1");
        assert_eq!(ts.data(), &array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn ragged_rows_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.csv", "1,2,3\n4,5,6,7\n");
        let err = load_timeseries(&p).unwrap_err();
        assert!(
            matches!(err, Error::Format(ref m) if m.contains("row 2")),
            "{err}"
        );
    }

    #[test]
    fn bad_cell_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.csv", "1,2,3\n4,x,6\n");
        match load_timeseries(&p).unwrap_err() {
            Error::Parse { row, col, .. } => assert_eq!((row, col), (2, 2)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_finite_cell_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.csv", "1,2,NaN\n4,5,6\n");
        assert!(matches!(load_timeseries(&p), Err(Error::Data(_))));
    }

    #[test]
    fn synth_rejects_too_many_communities() {
        let spec = SynthSpec {
            communities: 9,
            ..SynthSpec::default()
        };
        assert!(matches!(
            synth_subjects(4, 8, 200, 0, &spec),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn synth_classes_are_balanced() {
        let subjects = synth_subjects(11, 8, 100, 3, &SynthSpec::default()).unwrap();
        let ones = subjects
            .iter()
            .filter(|s| s.labels.class == Some(1))
            .count();
        assert!((ones as i64 - (11 - ones) as i64).abs() <= 1);
    }

    #[test]
    fn balanced_folds_hold_one_of_each_class() {
        let subjects: Vec<_> = (0..10)
            .map(|i| (format!("s{i}"), Some((i % 2) as u8)))
            .collect();
        let split = split_folds(&subjects, 5, 1).unwrap();
        for f in 0..5 {
            for c in 0..2u8 {
                let n = subjects
                    .iter()
                    .filter(|(id, cl)| *cl == Some(c) && split.fold_of(id) == Some(f))
                    .count();
                assert_eq!(n, 1, "fold {f} class {c}");
            }
        }
    }

    #[test]
    fn odd_split_sizes() {
        let subjects: Vec<_> = (0..9).map(|i| (format!("s{i}"), None)).collect();
        let split = split_folds(&subjects, 2, 4).unwrap();
        let mut sizes = split.fold_sizes();
        sizes.sort();
        assert_eq!(sizes, vec![4, 5]);
        assert_eq!(split, split_folds(&subjects, 2, 4).unwrap());
    }

    #[test]
    fn too_many_folds_is_config_error() {
        let subjects: Vec<_> = (0..3).map(|i| (format!("s{i}"), None)).collect();
        assert!(matches!(
            split_folds(&subjects, 4, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn full_length_segment_starts_at_zero() {
        let ts = RoiTimeSeries::new("a", Mat::from_shape_fn((3, 7), |(i, j)| (i * 7 + j) as f64))
            .unwrap();
        let mut rng = rng::seeded(0);
        let (seg, start) = sample_segment(&ts, 7, &mut rng).unwrap();
        assert_eq!(start, 0);
        assert_eq!(seg, ts);
        assert!(matches!(
            sample_segment(&ts, 8, &mut rng),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn segment_equals_reported_slice() {
        let ts = RoiTimeSeries::new(
            "a",
            Mat::from_shape_fn((3, 20), |(i, j)| (i * 20 + j) as f64),
        )
        .unwrap();
        let mut rng = rng::seeded(9);
        for _ in 0..50 {
            let (seg, start) = sample_segment(&ts, 6, &mut rng).unwrap();
            assert_eq!(seg.data(), &ts.data().slice(s![.., start..start + 6]));
        }
    }
}
