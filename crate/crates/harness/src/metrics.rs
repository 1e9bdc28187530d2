//! Metrics CSV: a schema comment line, a header, one row per evaluation.
//!
//! Columns: `run, seed, learner_step, mean_return, td, aux, kl,
//! wall_clock_s`, then one `return_<task>` column per task. The wall-clock
//! column is empty unless explicitly enabled.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{HarnessError, HarnessResult};

pub const SCHEMA: &str = "# r2a-metrics v1";
const FIXED: [&str; 8] = ["run", "seed", "learner_step", "mean_return", "td", "aux", "kl", "wall_clock_s"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run: String,
    pub seed: u64,
    pub learner_step: u64,
    pub mean_return: f64,
    pub td: f64,
    pub aux: f64,
    pub kl: f64,
    pub wall_clock_s: Option<f64>,
    pub task_returns: Vec<(String, f64)>,
}

impl MetricsRow {
    fn fields(&self) -> Vec<String> {
        let mut f = vec![
            self.run.clone(),
            self.seed.to_string(),
            self.learner_step.to_string(),
            self.mean_return.to_string(),
            self.td.to_string(),
            self.aux.to_string(),
            self.kl.to_string(),
            self.wall_clock_s.map(|w| format!("{w:.3}")).unwrap_or_default(),
        ];
        f.extend(self.task_returns.iter().map(|(_, r)| r.to_string()));
        f
    }
}

pub fn header(tasks: &[String]) -> Vec<String> {
    FIXED
        .iter()
        .map(|s| s.to_string())
        .chain(tasks.iter().map(|t| format!("return_{t}")))
        .collect()
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::Metrics(e.to_string())
}

/// Appends rows to a metrics file, creating it with its header when new.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, tasks: &[String]) -> HarnessResult<Self> {
        let mut f = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        writeln!(f, "{SCHEMA}").map_err(|e| HarnessError::io(path, e))?;
        let mut inner = csv::Writer::from_writer(f);
        inner.write_record(header(tasks)).map_err(csv_err)?;
        inner.flush().map_err(|e| HarnessError::io(path, e))?;
        Ok(Self { inner })
    }

    /// Keep the header and the rows up to `step`, then append after them.
    pub fn resume(path: &Path, tasks: &[String], step: u64) -> HarnessResult<Self> {
        let kept: Vec<String> = match File::open(path) {
            Ok(f) => BufReader::new(f)
                .lines()
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| HarnessError::io(path, e))?,
            Err(_) => return Self::create(path, tasks),
        };
        let mut out = Vec::new();
        for (i, line) in kept.into_iter().enumerate() {
            if i < 2 {
                out.push(line);
                continue;
            }
            let s: u64 = line
                .split(',')
                .nth(2)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| HarnessError::Metrics(format!("bad row `{line}`")))?;
            if s <= step {
                out.push(line);
            }
        }
        if out.first().map(String::as_str) != Some(SCHEMA) {
            return Err(HarnessError::Metrics("missing schema line".into()));
        }
        let mut f = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        for l in &out {
            writeln!(f, "{l}").map_err(|e| HarnessError::io(path, e))?;
        }
        drop(f);
        let f = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| HarnessError::io(path, e))?;
        Ok(Self {
            inner: csv::Writer::from_writer(f),
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> HarnessResult<()> {
        self.inner.write_record(row.fields()).map_err(csv_err)?;
        self.inner.flush().map_err(|e| HarnessError::Metrics(e.to_string()))
    }
}

/// The columns needed for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub run: String,
    pub seed: u64,
    pub learner_step: u64,
    pub mean_return: f64,
}

pub fn parse_metrics(text: &str) -> HarnessResult<Vec<CurvePoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l.trim() == SCHEMA => {}
        Some(l) => return Err(HarnessError::Metrics(format!("unknown schema line `{l}`"))),
        None => return Err(HarnessError::Metrics("empty file".into())),
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::Metrics(format!("missing column {name}")))
    };
    let (run, seed, step, ret) = (col("run")?, col("seed")?, col("learner_step")?, col("mean_return")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| -> HarnessResult<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| HarnessError::Metrics(format!("bad value in row {:?}", rec.position())))
        };
        let int = |i: usize| -> HarnessResult<u64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| HarnessError::Metrics(format!("bad integer in row {:?}", rec.position())))
        };
        out.push(CurvePoint {
            run: rec.get(run).unwrap_or_default().to_string(),
            seed: int(seed)?,
            learner_step: int(step)?,
            mean_return: num(ret)?,
        });
    }
    if out.is_empty() {
        return Err(HarnessError::Metrics("no rows".into()));
    }
    Ok(out)
}
