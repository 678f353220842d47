use std::io::{Read, Write};

use rand::Rng;

use super::{follows_instruction, is_defect, quality, sample_clean, TaskSpec};
use crate::apo::{PairSource, PreferencePair};
use crate::ndtensor::Tensor;

/// Label of an offline anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    ChosenAnchor,
    RejectedAnchor,
}

impl AnchorLabel {
    pub fn tag(self) -> &'static str {
        match self {
            AnchorLabel::ChosenAnchor => "P",
            AnchorLabel::RejectedAnchor => "N",
        }
    }
}

/// A single labeled sample from the offline buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineRecord {
    pub condition: usize,
    pub sample: Tensor,
    pub label: AnchorLabel,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OfflineDataset {
    pub records: Vec<OfflineRecord>,
    pub pairs: Vec<PreferencePair>,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A sample that is wrong for condition `c`: either displaced from `μ_c` by a
/// distance in `[0.5, 1.0]` along a uniformly random direction, or a clean
/// sample of a different mode, with equal probability.
pub fn corrupt_sample<R: Rng + ?Sized>(c: usize, task: &TaskSpec, rng: &mut R) -> Tensor {
    loop {
        let displaced = task.num_modes < 2 || rng.random_bool(0.5);
        let x = if displaced {
            let mu = task.center(c);
            let angle = 2.0 * std::f64::consts::PI * rng.random::<f64>();
            let d = 0.5 + 0.5 * rng.random::<f64>();
            Tensor::from_vec(vec![mu[0] + d * angle.cos(), mu[1] + d * angle.sin()])
        } else {
            let offset = rng.random_range(1..task.num_modes);
            sample_clean((c + offset) % task.num_modes, task, rng)
        };
        if is_defect(x.data(), c, task) || !follows_instruction(x.data(), c, task) {
            return x;
        }
    }
}

/// Positive anchors are clean samples, negative anchors corrupted ones;
/// `n_pos` complete pairs (clean vs corrupted, same condition) are emitted
/// alongside. Every pair's rejected sample has strictly lower quality than
/// its chosen sample.
pub fn gen_offline_dataset<R: Rng + ?Sized>(
    n_pos: usize,
    n_neg: usize,
    task: &TaskSpec,
    rng: &mut R,
) -> OfflineDataset {
    let mut records = Vec::with_capacity(n_pos + n_neg);
    for _ in 0..n_pos {
        let c = rng.random_range(0..task.num_modes);
        records.push(OfflineRecord {
            condition: c,
            sample: sample_clean(c, task, rng),
            label: AnchorLabel::ChosenAnchor,
        });
    }
    for _ in 0..n_neg {
        let c = rng.random_range(0..task.num_modes);
        records.push(OfflineRecord {
            condition: c,
            sample: corrupt_sample(c, task, rng),
            label: AnchorLabel::RejectedAnchor,
        });
    }
    let mut pairs = Vec::with_capacity(n_pos);
    while pairs.len() < n_pos {
        let c = rng.random_range(0..task.num_modes);
        let chosen = sample_clean(c, task, rng);
        let rejected = corrupt_sample(c, task, rng);
        if quality(rejected.data(), c, task) < quality(chosen.data(), c, task) {
            pairs.push(
                PreferencePair::new(c, chosen, rejected, PairSource::Offline)
                    .expect("both samples are 2-D points"),
            );
        }
    }
    OfflineDataset { records, pairs }
}

const RECORD_HEADER: [&str; 4] = ["condition", "x", "y", "label"];
const PAIR_HEADER: [&str; 6] = ["condition", "chosen_x", "chosen_y", "rejected_x", "rejected_y", "source"];

fn tsv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().delimiter(b'\t').from_writer(w)
}

fn tsv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().delimiter(b'\t').from_reader(r)
}

pub fn write_offline_records<W: Write>(records: &[OfflineRecord], w: W) -> Result<(), DataError> {
    let mut out = tsv_writer(w);
    out.write_record(RECORD_HEADER)?;
    for r in records {
        let d = r.sample.data();
        out.write_record([
            r.condition.to_string(),
            d[0].to_string(),
            d[1].to_string(),
            r.label.tag().to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_pairs<W: Write>(pairs: &[PreferencePair], w: W) -> Result<(), DataError> {
    let mut out = tsv_writer(w);
    out.write_record(PAIR_HEADER)?;
    for p in pairs {
        let (a, b) = (p.chosen.data(), p.rejected.data());
        out.write_record([
            p.condition.to_string(),
            a[0].to_string(),
            a[1].to_string(),
            b[0].to_string(),
            b[1].to_string(),
            p.source.tag().to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> Result<T, DataError> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| DataError::Malformed {
            line,
            message: format!("bad field {i}"),
        })
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

pub fn read_offline_records<R: Read>(r: R) -> Result<Vec<OfflineRecord>, DataError> {
    let mut out = Vec::new();
    for rec in tsv_reader(r).records() {
        let rec = rec?;
        let line = line_of(&rec);
        let label = match rec.get(3) {
            Some("P") => AnchorLabel::ChosenAnchor,
            Some("N") => AnchorLabel::RejectedAnchor,
            other => {
                return Err(DataError::Malformed {
                    line,
                    message: format!("unknown label {other:?}"),
                })
            }
        };
        out.push(OfflineRecord {
            condition: field(&rec, 0, line)?,
            sample: Tensor::from_vec(vec![field(&rec, 1, line)?, field(&rec, 2, line)?]),
            label,
        });
    }
    Ok(out)
}

pub fn read_pairs<R: Read>(r: R) -> Result<Vec<PreferencePair>, DataError> {
    let mut out = Vec::new();
    for rec in tsv_reader(r).records() {
        let rec = rec?;
        let line = line_of(&rec);
        let source = rec
            .get(5)
            .and_then(PairSource::from_tag)
            .ok_or_else(|| DataError::Malformed {
                line,
                message: "unknown source tag".into(),
            })?;
        let chosen = Tensor::from_vec(vec![field(&rec, 1, line)?, field(&rec, 2, line)?]);
        let rejected = Tensor::from_vec(vec![field(&rec, 3, line)?, field(&rec, 4, line)?]);
        out.push(PreferencePair {
            condition: field(&rec, 0, line)?,
            chosen,
            rejected,
            source,
        });
    }
    Ok(out)
}
