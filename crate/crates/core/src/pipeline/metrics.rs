use std::io::{Read, Write};

use super::Stage;
use crate::synthworld::EvalReport;

pub const METRICS_HEADER: [&str; 8] = [
    "step",
    "stage",
    "loss",
    "margin",
    "defect_rate",
    "follow_rate",
    "mean_quality",
    "nfe",
];

/// One line of the metrics CSV. Columns without a value are left empty.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: Stage,
    pub loss: Option<f64>,
    pub margin: Option<f64>,
    pub defect_rate: Option<f64>,
    pub follow_rate: Option<f64>,
    pub mean_quality: Option<f64>,
    pub nfe: Option<usize>,
}

impl MetricsRow {
    pub fn new(stage: Stage, step: usize) -> Self {
        Self {
            step,
            stage,
            loss: None,
            margin: None,
            defect_rate: None,
            follow_rate: None,
            mean_quality: None,
            nfe: None,
        }
    }

    pub fn with_eval(mut self, report: &EvalReport) -> Self {
        self.defect_rate = Some(report.defect_rate);
        self.follow_rate = Some(report.follow_rate);
        self.mean_quality = Some(report.mean_quality);
        self.nfe = Some(report.nfe_per_sample);
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn for_stage(&self, stage: Stage) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(move |r| r.stage == stage)
    }

    /// Last evaluated row of `stage`.
    pub fn last_eval(&self, stage: Stage) -> Option<&MetricsRow> {
        self.for_stage(stage).filter(|r| r.defect_rate.is_some()).last()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MetricsError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(METRICS_HEADER)?;
        for r in &self.rows {
            out.write_record([
                r.step.to_string(),
                r.stage.name().to_string(),
                opt(r.loss),
                opt(r.margin),
                opt(r.defect_rate),
                opt(r.follow_rate),
                opt(r.mean_quality),
                opt(r.nfe),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is UTF-8")
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, MetricsError> {
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(r);
        let header = reader.headers()?.clone();
        if header.iter().ne(METRICS_HEADER) {
            return Err(MetricsError::Malformed {
                line: 1,
                message: format!("expected header {}", METRICS_HEADER.join(",")),
            });
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |message: String| MetricsError::Malformed { line, message };
            if rec.len() != METRICS_HEADER.len() {
                return Err(bad(format!("expected {} fields, got {}", METRICS_HEADER.len(), rec.len())));
            }
            let float = |i: usize| -> Result<Option<f64>, MetricsError> {
                match &rec[i] {
                    "" => Ok(None),
                    s => s
                        .parse()
                        .map(Some)
                        .map_err(|_| bad(format!("{}: not a number: {s:?}", METRICS_HEADER[i]))),
                }
            };
            let step = rec[0].parse().map_err(|_| bad(format!("bad step {:?}", &rec[0])))?;
            let stage = Stage::from_name(&rec[1]).ok_or_else(|| bad(format!("unknown stage {:?}", &rec[1])))?;
            let nfe = match &rec[7] {
                "" => None,
                s => Some(s.parse().map_err(|_| bad(format!("bad nfe {s:?}")))?),
            };
            rows.push(MetricsRow {
                step,
                stage,
                loss: float(2)?,
                margin: float(3)?,
                defect_rate: float(4)?,
                follow_rate: float(5)?,
                mean_quality: float(6)?,
                nfe,
            });
        }
        Ok(Self { rows })
    }
}
