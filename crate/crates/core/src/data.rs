//! Problem-specification types: the subsystem-signals map, windowed sensor
//! batches, binary health vectors, and on-disk dataset persistence.
//!
//! Column order is owned by [`SubsystemSignalsMap`] everywhere: the simulator
//! writes columns in map order, models consume them in map order, and reports
//! name targets in map order. Nothing else is allowed to reorder signals.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::sim::{FaultKind, SimConfig};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Partition of signal identifiers into subsystems.
///
/// The overall signal order is the concatenation of the per-subsystem signal
/// lists in subsystem order, and it defines the column order of every
/// [`WindowBatch`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsystemSignalsMap {
    subsystems: Vec<String>,
    signals: Vec<String>,
    /// Column indices per subsystem, aligned with `subsystems`.
    columns: Vec<Vec<usize>>,
}

impl SubsystemSignalsMap {
    /// Build a map from `(subsystem id, signal ids)` groups. Signal ids must
    /// be unique across the whole map and every group must be nonempty.
    pub fn new(groups: Vec<(String, Vec<String>)>) -> Result<Self> {
        if groups.is_empty() {
            return Err(CoreError::Config("map needs at least one subsystem".into()));
        }
        let mut subsystems = Vec::new();
        let mut signals = Vec::new();
        let mut columns = Vec::new();
        let mut seen_subsystems = BTreeSet::new();
        let mut seen_signals = BTreeSet::new();
        for (sub, sigs) in groups {
            if !seen_subsystems.insert(sub.clone()) {
                return Err(CoreError::Config(format!("duplicate subsystem id '{sub}'")));
            }
            if sigs.is_empty() {
                return Err(CoreError::Config(format!("subsystem '{sub}' has no signals")));
            }
            let mut cols = Vec::with_capacity(sigs.len());
            for sig in sigs {
                if !seen_signals.insert(sig.clone()) {
                    return Err(CoreError::Config(format!("signal '{sig}' assigned twice")));
                }
                cols.push(signals.len());
                signals.push(sig);
            }
            subsystems.push(sub);
            columns.push(cols);
        }
        Ok(SubsystemSignalsMap { subsystems, signals, columns })
    }

    /// The canonical two-subsystem, six-signal map of the simulated system.
    pub fn simulated() -> Self {
        SubsystemSignalsMap::new(vec![
            ("a".into(), vec!["a1".into(), "a2".into(), "a3".into()]),
            ("b".into(), vec!["b1".into(), "b2".into(), "b3".into()]),
        ])
        .expect("static map is valid")
    }

    pub fn subsystems(&self) -> &[String] {
        &self.subsystems
    }

    pub fn signals(&self) -> &[String] {
        &self.signals
    }

    pub fn n_signals(&self) -> usize {
        self.signals.len()
    }

    pub fn subsystem_index(&self, id: &str) -> Result<usize> {
        self.subsystems
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| CoreError::UnknownSubsystem(id.to_string()))
    }

    /// Column indices of the signals assigned to `id`, in map order.
    pub fn columns_of(&self, id: &str) -> Result<&[usize]> {
        Ok(&self.columns[self.subsystem_index(id)?])
    }

    pub fn signals_of(&self, id: &str) -> Result<Vec<String>> {
        Ok(self.columns_of(id)?.iter().map(|&c| self.signals[c].clone()).collect())
    }

    pub fn signal_index(&self, sig: &str) -> Result<usize> {
        self.signals
            .iter()
            .position(|s| s == sig)
            .ok_or_else(|| CoreError::UnknownSignal(sig.to_string()))
    }

    /// Serialize as the ordered `{"subsystem": ["sig", ...]}` object used in
    /// `meta.json`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        for (i, sub) in self.subsystems.iter().enumerate() {
            let sigs: Vec<serde_json::Value> = self.columns[i]
                .iter()
                .map(|&c| serde_json::Value::String(self.signals[c].clone()))
                .collect();
            obj.insert(sub.clone(), serde_json::Value::Array(sigs));
        }
        serde_json::Value::Object(obj)
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let obj = value.as_object().ok_or_else(|| CoreError::Schema {
            file: "meta.json".into(),
            message: "subsystems must be an object".into(),
        })?;
        let mut groups = Vec::new();
        for (sub, sigs) in obj {
            let list = sigs.as_array().ok_or_else(|| CoreError::Schema {
                file: "meta.json".into(),
                message: format!("subsystem '{sub}' must map to an array"),
            })?;
            let mut names = Vec::new();
            for s in list {
                names.push(
                    s.as_str()
                        .ok_or_else(|| CoreError::Schema {
                            file: "meta.json".into(),
                            message: "signal ids must be strings".into(),
                        })?
                        .to_string(),
                );
            }
            groups.push((sub.clone(), names));
        }
        SubsystemSignalsMap::new(groups)
    }
}

/// A batch of sensor windows: values of shape `(n_windows, window_len,
/// n_signals)` with columns in map order, plus the window ids.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub ids: Vec<u64>,
    pub values: Array3<f64>,
}

impl WindowBatch {
    pub fn new(ids: Vec<u64>, values: Array3<f64>) -> Result<Self> {
        if ids.len() != values.shape()[0] {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{} ids", values.shape()[0]),
                got: format!("{}", ids.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { term: "window values".into() });
        }
        Ok(WindowBatch { ids, values })
    }

    pub fn n_windows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn window_len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n_signals(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Select the columns of one subsystem, preserving map order.
pub fn slice_subsystem(
    batch: &WindowBatch,
    map: &SubsystemSignalsMap,
    subsystem: &str,
) -> Result<WindowBatch> {
    let cols = map.columns_of(subsystem)?;
    let values = batch.values.select(Axis(2), cols);
    Ok(WindowBatch { ids: batch.ids.clone(), values })
}

/// Concatenate per-subsystem batches back into the full signal matrix. With
/// the contiguous column layout produced by [`SubsystemSignalsMap::new`] this
/// is the inverse of slicing every subsystem in map order.
pub fn concat_subsystems(
    map: &SubsystemSignalsMap,
    parts: &[(&str, &WindowBatch)],
) -> Result<WindowBatch> {
    if parts.is_empty() {
        return Err(CoreError::Config("nothing to concatenate".into()));
    }
    let n = parts[0].1.n_windows();
    let t = parts[0].1.window_len();
    let mut values = Array3::<f64>::zeros((n, t, map.n_signals()));
    for (sub, part) in parts {
        let cols = map.columns_of(sub)?;
        if part.n_signals() != cols.len() || part.n_windows() != n || part.window_len() != t {
            return Err(CoreError::ShapeMismatch {
                expected: format!("({n}, {t}, {})", cols.len()),
                got: format!("({}, {}, {})", part.n_windows(), part.window_len(), part.n_signals()),
            });
        }
        for (k, &c) in cols.iter().enumerate() {
            values
                .index_axis_mut(Axis(2), c)
                .assign(&part.values.index_axis(Axis(2), k));
        }
    }
    WindowBatch::new(parts[0].1.ids.clone(), values)
}

/// Binary health state per subsystem plus a global flag. `false` = OK,
/// `true` = not OK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HealthVector {
    /// One entry per subsystem, in map order.
    pub per_subsystem: Vec<(String, bool)>,
    pub global: bool,
}

impl HealthVector {
    pub fn get(&self, subsystem: &str) -> Result<bool> {
        self.per_subsystem
            .iter()
            .find(|(s, _)| s == subsystem)
            .map(|(_, v)| *v)
            .ok_or_else(|| CoreError::UnknownSubsystem(subsystem.to_string()))
    }
}

/// Ground-truth labels for one test window (Table-1 scheme).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowLabel {
    pub window_id: u64,
    pub fault_kind: FaultKind,
    pub label_a: u8,
    pub label_b: u8,
    pub label_all: u8,
}

/// Per-signal standardization parameters (train-set statistics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A fully materialized dataset: splits, labels, map and the config echo.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub config: SimConfig,
    pub map: SubsystemSignalsMap,
    pub train: WindowBatch,
    pub val: WindowBatch,
    pub test: WindowBatch,
    pub labels: Vec<WindowLabel>,
    pub standardization: Standardization,
}

impl DatasetBundle {
    /// Label bits for a named target: a subsystem id or "all".
    pub fn label_bits(&self, target: &str) -> Result<Vec<u8>> {
        self.labels
            .iter()
            .map(|l| match target {
                "all" => Ok(l.label_all),
                "a" => Ok(l.label_a),
                "b" => Ok(l.label_b),
                other => Err(CoreError::UnknownSubsystem(other.to_string())),
            })
            .collect()
    }
}

fn format_value(v: f64) -> String {
    // Decimal notation with 12 fractional digits keeps at least 9
    // significant digits for the standardized O(1) signal range.
    format!("{v:.12}")
}

fn write_split_csv(path: &Path, map: &SubsystemSignalsMap, batch: &WindowBatch) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["window_id".to_string(), "t".to_string()];
    header.extend(map.signals().iter().cloned());
    w.write_record(&header)?;
    let (n, t_len, p) = {
        let s = batch.values.shape();
        (s[0], s[1], s[2])
    };
    for i in 0..n {
        for t in 0..t_len {
            let mut rec = Vec::with_capacity(p + 2);
            rec.push(batch.ids[i].to_string());
            rec.push(t.to_string());
            for c in 0..p {
                rec.push(format_value(batch.values[[i, t, c]]));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_split_csv(
    path: &Path,
    map: &SubsystemSignalsMap,
    window_len: usize,
) -> Result<WindowBatch> {
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let schema_err = |message: String| CoreError::Schema { file: file_name.clone(), message };

    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let mut expected = vec!["window_id".to_string(), "t".to_string()];
    expected.extend(map.signals().iter().cloned());
    let got: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
    if got != expected {
        for (g, e) in got.iter().zip(expected.iter()) {
            if g != e {
                return Err(schema_err(format!("expected column '{e}', found '{g}'")));
            }
        }
        return Err(schema_err(format!(
            "expected {} columns, found {}",
            expected.len(),
            got.len()
        )));
    }

    let p = map.n_signals();
    let mut ids: Vec<u64> = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut current: Option<u64> = None;
    let mut t_expected = 0usize;
    for rec in r.records() {
        let rec = rec?;
        let wid: u64 = rec[0]
            .parse()
            .map_err(|_| schema_err(format!("bad window_id '{}'", &rec[0])))?;
        let t: usize = rec[1]
            .parse()
            .map_err(|_| schema_err(format!("bad t '{}'", &rec[1])))?;
        if current != Some(wid) {
            if t_expected != 0 && t_expected != window_len {
                return Err(schema_err(format!(
                    "window {} has {} rows, expected {}",
                    current.unwrap(),
                    t_expected,
                    window_len
                )));
            }
            ids.push(wid);
            current = Some(wid);
            t_expected = 0;
        }
        if t != t_expected {
            return Err(schema_err(format!("window {wid}: expected t={t_expected}, found t={t}")));
        }
        t_expected += 1;
        for c in 0..p {
            let v: f64 = rec[2 + c]
                .parse()
                .map_err(|_| schema_err(format!("bad numeric '{}' at window {wid}", &rec[2 + c])))?;
            if !v.is_finite() {
                return Err(schema_err(format!(
                    "non-finite value in column '{}' at window {wid}",
                    map.signals()[c]
                )));
            }
            rows.push(v);
        }
    }
    if t_expected != 0 && t_expected != window_len {
        return Err(schema_err(format!(
            "window {} has {} rows, expected {}",
            current.unwrap(),
            t_expected,
            window_len
        )));
    }
    let n = ids.len();
    let values = Array3::from_shape_vec((n, window_len, p), rows)
        .map_err(|e| schema_err(format!("shape error: {e}")))?;
    WindowBatch::new(ids, values)
}

fn write_labels_csv(path: &Path, labels: &[WindowLabel]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["window_id", "fault_kind", "label_a", "label_b", "label_all"])?;
    for l in labels {
        w.write_record(&[
            l.window_id.to_string(),
            l.fault_kind.name().to_string(),
            l.label_a.to_string(),
            l.label_b.to_string(),
            l.label_all.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn read_labels_csv(path: &Path) -> Result<Vec<WindowLabel>> {
    let schema_err = |message: String| CoreError::Schema {
        file: "test_labels.csv".into(),
        message,
    };
    let mut r = csv::Reader::from_path(path)?;
    let expected = ["window_id", "fault_kind", "label_a", "label_b", "label_all"];
    let got: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
    if got != expected {
        return Err(schema_err(format!("bad header {got:?}")));
    }
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse_bit = |s: &str| -> Result<u8> {
            match s {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(schema_err(format!("bad label bit '{other}'"))),
            }
        };
        labels.push(WindowLabel {
            window_id: rec[0]
                .parse()
                .map_err(|_| schema_err(format!("bad window_id '{}'", &rec[0])))?,
            fault_kind: FaultKind::parse(&rec[1])
                .ok_or_else(|| schema_err(format!("unknown fault_kind '{}'", &rec[1])))?,
            label_a: parse_bit(&rec[2])?,
            label_b: parse_bit(&rec[3])?,
            label_all: parse_bit(&rec[4])?,
        });
    }
    Ok(labels)
}

/// Write a dataset directory: `meta.json`, the three split CSVs and
/// `test_labels.csv`.
pub fn write_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = serde_json::json!({
        "schema_version": DATASET_SCHEMA_VERSION,
        "config": bundle.config,
        "subsystems": bundle.map.to_json(),
        "standardization": {
            "signals": bundle.map.signals(),
            "mean": bundle.standardization.mean,
            "std": bundle.standardization.std,
        },
        "splits": {
            "train": bundle.train.n_windows(),
            "val": bundle.val.n_windows(),
            "test": bundle.test.n_windows(),
        },
    });
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("meta.json"))?);
    serde_json::to_writer_pretty(&mut f, &meta)?;
    f.write_all(b"\n")?;
    f.flush()?;
    write_split_csv(&dir.join("train.csv"), &bundle.map, &bundle.train)?;
    write_split_csv(&dir.join("val.csv"), &bundle.map, &bundle.val)?;
    write_split_csv(&dir.join("test.csv"), &bundle.map, &bundle.test)?;
    write_labels_csv(&dir.join("test_labels.csv"), &bundle.labels)?;
    Ok(())
}

/// Load a dataset directory written by [`write_dataset`]. Labels are joined
/// to test windows by `window_id`; any mismatch is an error listing the ids.
pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(CoreError::Schema {
            file: "meta.json".into(),
            message: format!("missing in {}", dir.display()),
        });
    }
    let meta: serde_json::Value =
        serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(&meta_path)?))?;
    let version = meta["schema_version"].as_u64().unwrap_or(0) as u32;
    if version != DATASET_SCHEMA_VERSION {
        return Err(CoreError::Schema {
            file: "meta.json".into(),
            message: format!(
                "schema_version {version} unsupported (expected {DATASET_SCHEMA_VERSION})"
            ),
        });
    }
    let config: SimConfig = serde_json::from_value(meta["config"].clone())?;
    let map = SubsystemSignalsMap::from_json(&meta["subsystems"])?;
    let standardization = Standardization {
        mean: serde_json::from_value(meta["standardization"]["mean"].clone())?,
        std: serde_json::from_value(meta["standardization"]["std"].clone())?,
    };
    let window_len = config.window_len;
    for f in ["train.csv", "val.csv", "test.csv", "test_labels.csv"] {
        if !dir.join(f).exists() {
            return Err(CoreError::Schema {
                file: f.into(),
                message: format!("missing in {}", dir.display()),
            });
        }
    }
    let train = read_split_csv(&dir.join("train.csv"), &map, window_len)?;
    let val = read_split_csv(&dir.join("val.csv"), &map, window_len)?;
    let test = read_split_csv(&dir.join("test.csv"), &map, window_len)?;
    let mut labels = read_labels_csv(&dir.join("test_labels.csv"))?;

    // Join labels to test windows by id, in test-window order.
    let mut by_id: std::collections::BTreeMap<u64, WindowLabel> =
        labels.drain(..).map(|l| (l.window_id, l)).collect();
    let mut joined = Vec::with_capacity(test.ids.len());
    let mut missing = Vec::new();
    for &id in &test.ids {
        match by_id.remove(&id) {
            Some(l) => joined.push(l),
            None => missing.push(id),
        }
    }
    let extra: Vec<u64> = by_id.into_keys().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(CoreError::LabelJoin { missing, extra });
    }

    Ok(DatasetBundle { config, map, train, val, test, labels: joined, standardization })
}

/// Turn a `(windows, len, signals)` batch into per-window 2-D views.
pub fn window_view(batch: &WindowBatch, i: usize) -> Array2<f64> {
    batch.values.index_axis(Axis(0), i).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn demo_map() -> SubsystemSignalsMap {
        SubsystemSignalsMap::simulated()
    }

    fn demo_batch(n: usize, t: usize, p: usize) -> WindowBatch {
        let values = Array3::from_shape_fn((n, t, p), |(i, j, k)| {
            (i * 1000 + j * 10 + k) as f64 * 0.25
        });
        WindowBatch::new((0..n as u64).collect(), values).unwrap()
    }

    #[test]
    fn slice_shapes() {
        let map = demo_map();
        let batch = demo_batch(4, 500, 6);
        let a = slice_subsystem(&batch, &map, "a").unwrap();
        assert_eq!(a.values.shape(), &[4, 500, 3]);
        let b = slice_subsystem(&batch, &map, "b").unwrap();
        assert_eq!(b.values.shape(), &[4, 500, 3]);
    }

    #[test]
    fn slice_concat_roundtrip() {
        let map = demo_map();
        let batch = demo_batch(3, 20, 6);
        let a = slice_subsystem(&batch, &map, "a").unwrap();
        let b = slice_subsystem(&batch, &map, "b").unwrap();
        let back = concat_subsystems(&map, &[("a", &a), ("b", &b)]).unwrap();
        assert_eq!(back.values, batch.values);
    }

    #[test]
    fn slice_unknown_subsystem_errors() {
        let map = demo_map();
        let batch = demo_batch(1, 8, 6);
        let err = slice_subsystem(&batch, &map, "c").unwrap_err();
        assert!(matches!(err, CoreError::UnknownSubsystem(s) if s == "c"));
    }

    #[test]
    fn map_rejects_duplicates_and_empties() {
        assert!(SubsystemSignalsMap::new(vec![
            ("a".into(), vec!["x".into()]),
            ("b".into(), vec!["x".into()]),
        ])
        .is_err());
        assert!(SubsystemSignalsMap::new(vec![("a".into(), vec![])]).is_err());
        assert!(SubsystemSignalsMap::new(vec![]).is_err());
    }

    #[test]
    fn batch_rejects_non_finite() {
        let mut values = Array3::zeros((1, 4, 2));
        values[[0, 2, 1]] = f64::NAN;
        assert!(matches!(
            WindowBatch::new(vec![0], values),
            Err(CoreError::NonFinite { .. })
        ));
    }

    proptest! {
        /// Random partitions always satisfy the partition property, and
        /// slicing every subsystem then concatenating reproduces the batch.
        #[test]
        fn partition_property(seed in 0u64..500, n_subs in 1usize..5, n_extra in 0usize..8) {
            use rand::seq::SliceRandom;
            use rand::Rng;
            let mut rng = crate::rng::substream(seed, crate::rng::StreamDomain::Trace, 99);
            let total = n_subs + n_extra;
            let mut sig_ids: Vec<String> = (0..total).map(|i| format!("s{i}")).collect();
            sig_ids.shuffle(&mut rng);
            // random partition: every subsystem gets at least one signal
            let mut groups: Vec<(String, Vec<String>)> =
                (0..n_subs).map(|i| (format!("sub{i}"), vec![sig_ids[i].clone()])).collect();
            for sig in sig_ids.iter().skip(n_subs) {
                let g = rng.gen_range(0..n_subs);
                groups[g].1.push(sig.clone());
            }
            let map = SubsystemSignalsMap::new(groups).unwrap();

            // pairwise disjoint + union = P
            let mut seen = BTreeSet::new();
            for sub in map.subsystems() {
                for sig in map.signals_of(sub).unwrap() {
                    prop_assert!(seen.insert(sig));
                }
            }
            prop_assert_eq!(seen.len(), map.n_signals());

            // bijection between full matrix and subsystem tuple
            let batch = demo_batch(2, 6, map.n_signals());
            let parts: Vec<(String, WindowBatch)> = map
                .subsystems()
                .iter()
                .map(|s| (s.clone(), slice_subsystem(&batch, &map, s).unwrap()))
                .collect();
            let refs: Vec<(&str, &WindowBatch)> =
                parts.iter().map(|(s, b)| (s.as_str(), b)).collect();
            let back = concat_subsystems(&map, &refs).unwrap();
            prop_assert_eq!(back.values, batch.values);
        }
    }
}
