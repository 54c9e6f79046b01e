use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::plan::{Cell, ExperimentPlan, Strategy};
use super::runs::Workspace;

/// One (dataset, shots, column) entry: test mAP per seed and its summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub dataset: String,
    pub shots: usize,
    pub column: String,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    /// Seeds without a completed run.
    pub missing: Vec<u64>,
    pub mean: Option<f64>,
    /// Population standard deviation over seeds.
    pub std: Option<f64>,
    /// Highest mean in its row.
    pub best: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub cells: Vec<TableCell>,
}

pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

fn split_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|v| v.parse().map_err(|_| Error::Format(format!("bad list entry `{v}`"))))
        .collect()
}

const HEADER: [&str; 9] = ["dataset", "shots", "column", "n", "mean", "std", "seeds", "values", "missing"];

impl ResultTable {
    /// Builds a table from `(column, shots, seed) → test mAP`. Cells are
    /// ordered by shots, then column as listed.
    pub fn build(dataset: &str, columns: &[String], shots: &[usize], seeds: &[u64], values: &BTreeMap<(String, usize, u64), f64>) -> Self {
        let mut cells = Vec::new();
        for &k in shots {
            let start = cells.len();
            for col in columns {
                let mut got_seeds = Vec::new();
                let mut got = Vec::new();
                let mut missing = Vec::new();
                for &s in seeds {
                    match values.get(&(col.clone(), k, s)) {
                        Some(&v) => {
                            got_seeds.push(s);
                            got.push(v);
                        }
                        None => missing.push(s),
                    }
                }
                let summary = if missing.is_empty() { mean_std(&got) } else { None };
                cells.push(TableCell {
                    dataset: dataset.to_owned(),
                    shots: k,
                    column: col.clone(),
                    seeds: got_seeds,
                    values: got,
                    missing,
                    mean: summary.map(|s| s.0),
                    std: summary.map(|s| s.1),
                    best: false,
                });
            }
            let row = &mut cells[start..];
            if let Some(top) = row.iter().filter_map(|c| c.mean).max_by(f64::total_cmp) {
                for c in row.iter_mut() {
                    c.best = c.mean == Some(top);
                }
            }
        }
        Self {
            columns: columns.to_vec(),
            cells,
        }
    }

    pub fn get(&self, shots: usize, column: &str) -> Option<&TableCell> {
        self.cells.iter().find(|c| c.shots == shots && c.column == column)
    }

    pub fn shots(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.cells.iter().map(|c| c.shots).collect();
        out.dedup();
        out
    }

    pub fn missing_cells(&self) -> Vec<String> {
        self.cells
            .iter()
            .flat_map(|c| c.missing.iter().map(move |s| format!("{}-k{}-s{s}", c.column.replace('@', "-r"), c.shots)))
            .collect()
    }

    /// Long-form CSV, one line per cell. Floats use the shortest
    /// round-trip representation, so [`ResultTable::from_csv`] restores
    /// the table exactly.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for c in &self.cells {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                c.dataset.clone(),
                c.shots.to_string(),
                c.column.clone(),
                c.values.len().to_string(),
                opt(c.mean),
                opt(c.std),
                join(&c.seeds),
                join(&c.values),
                join(&c.missing),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        let header = r.headers().map_err(fmt)?.clone();
        if header.iter().ne(HEADER) {
            return Err(Error::Format(format!("unexpected table header {header:?}")));
        }
        let mut rows: Vec<(String, usize, String, Vec<u64>, Vec<f64>, Vec<u64>)> = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(fmt)?;
            let shots = rec[1].parse().map_err(|_| Error::Format(format!("bad shots `{}`", &rec[1])))?;
            rows.push((
                rec[0].to_owned(),
                shots,
                rec[2].to_owned(),
                split_list(&rec[6])?,
                split_list(&rec[7])?,
                split_list(&rec[8])?,
            ));
        }
        let mut columns: Vec<String> = Vec::new();
        let mut shots: Vec<usize> = Vec::new();
        let mut values = BTreeMap::new();
        let mut all_seeds: Vec<u64> = Vec::new();
        let dataset = rows.first().map(|r| r.0.clone()).unwrap_or_default();
        for (_, k, col, seeds, vals, missing) in &rows {
            if !columns.contains(col) {
                columns.push(col.clone());
            }
            if !shots.contains(k) {
                shots.push(*k);
            }
            if all_seeds.is_empty() {
                all_seeds = seeds.iter().chain(missing).copied().collect();
                all_seeds.sort_unstable();
            }
            for (s, v) in seeds.iter().zip(vals) {
                values.insert((col.clone(), *k, *s), *v);
            }
        }
        Ok(Self::build(&dataset, &columns, &shots, &all_seeds, &values))
    }

    /// Wide table with one row per shot count, percent mAP, the best mean
    /// of each row in bold.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "| Dataset | Shots |");
        for c in &self.columns {
            let _ = write!(out, " {c} |");
        }
        out.push_str("\n|---|---:|");
        out.push_str(&"---:|".repeat(self.columns.len()));
        out.push('\n');
        for k in self.shots() {
            let dataset = self.cells.iter().find(|c| c.shots == k).map_or("", |c| c.dataset.as_str());
            let _ = write!(out, "| {dataset} | {k} |");
            for col in &self.columns {
                let text = match self.get(k, col) {
                    Some(TableCell {
                        mean: Some(m),
                        std: Some(s),
                        best,
                        ..
                    }) => {
                        let v = format!("{:.2} ± {:.2}", m * 100.0, s * 100.0);
                        if *best {
                            format!("**{v}**")
                        } else {
                            v
                        }
                    }
                    Some(c) if !c.missing.is_empty() => format!("missing ({}/{})", c.values.len(), c.values.len() + c.missing.len()),
                    _ => "n/a".to_owned(),
                };
                let _ = write!(out, " {text} |");
            }
            out.push('\n');
        }
        out
    }
}

/// Folds the stored run results of every table cell of the plan. Fails
/// with the list of missing cells unless `allow_partial` is set.
pub fn aggregate(ws: &Workspace, allow_partial: bool) -> Result<ResultTable> {
    let plan: &ExperimentPlan = ws.plan();
    let mut values = BTreeMap::new();
    let mut missing = Vec::new();
    for cell in plan.cells() {
        if !plan.strategies.contains(&cell.strategy) {
            continue;
        }
        if ws.is_complete(&cell) {
            let r = ws.result(&cell)?;
            values.insert((cell.column(), cell.shots, cell.seed), r.test_map50);
        } else {
            missing.push(cell.to_string());
        }
    }
    if !missing.is_empty() && !allow_partial {
        return Err(Error::Incomplete(missing));
    }
    Ok(ResultTable::build(&plan.dataset, &plan.columns(), &plan.shots, &plan.seeds, &values))
}

/// Writes `table.csv` and `table.md` under the workspace root.
pub fn write_table(ws: &Workspace, table: &ResultTable) -> Result<()> {
    let root = ws.root();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (name, text) in [("table.csv", table.to_csv()), ("table.md", table.to_markdown())] {
        let path = root.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_table(path: &Path) -> Result<ResultTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ResultTable::from_csv(&text)
}

/// Whether adapters on the fine-tuned checkpoint match or beat adapters on
/// the pretrained model, per shot count and rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub shots: usize,
    /// `None` for the mean over ranks.
    pub rank: Option<usize>,
    pub lora_after_ft: f64,
    pub lora_direct: f64,
    pub margin: f64,
    pub holds: bool,
}

pub fn trend(table: &ResultTable, ranks: &[usize]) -> Vec<TrendRow> {
    let mut rows = Vec::new();
    let mean = |k: usize, s: Strategy, r: usize| {
        let col = Cell {
            strategy: s,
            rank: Some(r),
            shots: k,
            seed: 0,
        }
        .column();
        table.get(k, &col).and_then(|c| c.mean)
    };
    for k in table.shots() {
        let mut pairs = Vec::new();
        for &r in ranks {
            if let (Some(a), Some(d)) = (mean(k, Strategy::LoraAfterFt, r), mean(k, Strategy::LoraDirect, r)) {
                pairs.push((a, d));
                rows.push(TrendRow {
                    shots: k,
                    rank: Some(r),
                    lora_after_ft: a,
                    lora_direct: d,
                    margin: a - d,
                    holds: a >= d,
                });
            }
        }
        if !pairs.is_empty() {
            let n = pairs.len() as f64;
            let a = pairs.iter().map(|p| p.0).sum::<f64>() / n;
            let d = pairs.iter().map(|p| p.1).sum::<f64>() / n;
            rows.push(TrendRow {
                shots: k,
                rank: None,
                lora_after_ft: a,
                lora_direct: d,
                margin: a - d,
                holds: a >= d,
            });
        }
    }
    rows
}

pub fn trend_markdown(rows: &[TrendRow]) -> String {
    let mut out = String::from(
        "| Shots | Rank | lora_after_ft | lora_direct | margin (pts) | after ≥ direct |\n|---:|---:|---:|---:|---:|:---:|\n",
    );
    for r in rows {
        let rank = r.rank.map_or("mean".to_owned(), |v| v.to_string());
        let _ = writeln!(
            out,
            "| {} | {rank} | {:.2} | {:.2} | {:+.2} | {} |",
            r.shots,
            r.lora_after_ft * 100.0,
            r.lora_direct * 100.0,
            r.margin * 100.0,
            if r.holds { "yes" } else { "no" }
        );
    }
    out
}
