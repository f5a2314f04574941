//! CSV and file helpers for the CLI's own table formats.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use trainmap_core::paramstats::{read_stats_csv, StatSeries};
use trainmap_core::stability::{AccuracyRow, AccuracyTable};

use crate::{CliError, CliResult};

pub fn read_text(path: &Path) -> CliResult<String> {
    if !path.exists() {
        return Err(CliError::Usage(format!("input file {} does not exist", path.display())));
    }
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Appends `suffix` to the file name of `path`.
pub fn sibling(path: &Path, suffix: &str) -> std::path::PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Renders rows as CSV text with the csv crate's quoting rules.
pub fn csv_text<I, R>(header: &[&str], rows: I) -> CliResult<String>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Data(e.to_string()))
}

pub fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

/// Series of one size; `size` may be omitted when only one is present.
pub fn load_series(path: &Path, size: Option<&str>) -> CliResult<(String, Vec<StatSeries>)> {
    let all = read_stats_csv(&read_text(path)?)?;
    let mut sizes: Vec<String> = all.iter().map(|s| s.size.clone()).collect();
    sizes.sort();
    sizes.dedup();
    let chosen = match size {
        Some(s) => s.to_string(),
        None if sizes.len() == 1 => sizes[0].clone(),
        None if sizes.is_empty() => return Err(CliError::Data(format!("{} holds no statistics", path.display()))),
        None => {
            return Err(CliError::Usage(format!(
                "{} holds sizes {}; pick one with --size",
                path.display(),
                sizes.join(", ")
            )))
        }
    };
    let picked: Vec<StatSeries> = all.into_iter().filter(|s| s.size == chosen).collect();
    if picked.is_empty() {
        return Err(CliError::Data(format!("no statistics for size `{chosen}` in {}", path.display())));
    }
    Ok((chosen, picked))
}

#[derive(Debug, Deserialize)]
struct AccuracyCsvRow {
    size: String,
    seed: u64,
    task: String,
    #[serde(default)]
    step: Option<u64>,
    accuracy: f64,
}

/// Reads an accuracy CSV, keeping the last step of every (size, seed, task).
pub fn read_final_accuracy(path: &Path) -> CliResult<AccuracyTable> {
    let text = read_text(path)?;
    let mut latest: BTreeMap<(String, u64, String), (Option<u64>, f64)> = BTreeMap::new();
    for row in csv::Reader::from_reader(text.as_bytes()).deserialize::<AccuracyCsvRow>() {
        let r = row?;
        let key = (r.size, r.seed, r.task);
        match latest.get(&key) {
            Some((s, _)) if *s == r.step => {
                return Err(CliError::Data(format!("duplicate accuracy for {}/{}/{}", key.0, key.1, key.2)))
            }
            Some((s, _)) if *s > r.step => {}
            _ => {
                latest.insert(key, (r.step, r.accuracy));
            }
        }
    }
    let rows: Vec<AccuracyRow> = latest
        .into_iter()
        .map(|((size, seed, task), (_, accuracy))| AccuracyRow { size, seed, task, accuracy })
        .collect();
    Ok(AccuracyTable::from_rows(&rows)?)
}

#[derive(Debug, Clone, Deserialize)]
pub struct MetricRow {
    pub size: String,
    pub task: String,
    pub step: u64,
    pub value: f64,
}

pub fn read_metric_long(path: &Path) -> CliResult<Vec<MetricRow>> {
    let text = read_text(path)?;
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(CliError::from))
        .collect()
}

#[derive(Debug, Clone, Deserialize)]
pub struct PairRow {
    pub task: String,
    pub size: String,
    pub seed: u64,
    pub step: u64,
    pub stereotypical: f64,
    pub anti_stereotypical: f64,
}

pub fn read_pairs(path: &Path) -> CliResult<Vec<PairRow>> {
    let text = read_text(path)?;
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(CliError::from))
        .collect()
}

/// A long table `key columns..., value` read without a fixed schema: the
/// last column is the value and `task,size,seed,step` must be present.
pub struct LongTable {
    pub value_name: String,
    pub rows: Vec<(String, String, u64, u64, f64)>,
}

pub fn read_long_table(path: &Path) -> CliResult<LongTable> {
    let text = read_text(path)?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("{}: missing column `{name}`", path.display())))
    };
    let (task, size, seed, step) = (col("task")?, col("size")?, col("seed")?, col("step")?);
    let value = headers.len() - 1;
    let value_name = headers.get(value).unwrap_or("value").to_string();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let get = |c: usize| rec.get(c).unwrap_or("").trim().to_string();
        let bad = |c: &str| CliError::Data(format!("{} row {}: bad {c}", path.display(), i + 2));
        rows.push((
            get(task),
            get(size),
            get(seed).parse().map_err(|_| bad("seed"))?,
            get(step).parse().map_err(|_| bad("step"))?,
            get(value).parse().map_err(|_| bad(&value_name))?,
        ));
    }
    Ok(LongTable { value_name, rows })
}
