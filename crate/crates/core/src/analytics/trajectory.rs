use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};

pub const TRAJECTORY_HEADER: [&str; 9] = [
    "layer_id",
    "epoch",
    "rf",
    "lambda_mu_in",
    "lambda_mu_ln",
    "lambda_mu_bn",
    "lambda_sigma_in",
    "lambda_sigma_ln",
    "lambda_sigma_bn",
];

const SIMPLEX_TOL: f64 = 1e-9;

/// Ratios of one layer at one epoch, in IN, LN, BN slot order. Members
/// outside the layer's candidate set hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioRecord {
    pub layer_id: usize,
    pub epoch: usize,
    pub rf: usize,
    pub lambda_mu: [f64; 3],
    pub lambda_sigma: [f64; 3],
}

fn check_simplex(v: &[f64; 3], what: &str) -> std::result::Result<(), String> {
    if v.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(format!("{what} {v:?} has an entry outside [0, 1]"));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(format!("{what} {v:?} sums to {s}"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RatioTrajectory {
    records: Vec<RatioRecord>,
    keys: BTreeSet<(usize, usize)>,
}

impl RatioTrajectory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record; each (layer, epoch) may appear once.
    pub fn push(&mut self, r: RatioRecord) -> Result<()> {
        check_simplex(&r.lambda_mu, "lambda_mu").map_err(Error::Input)?;
        check_simplex(&r.lambda_sigma, "lambda_sigma").map_err(Error::Input)?;
        if !self.keys.insert((r.layer_id, r.epoch)) {
            return Err(Error::Input(format!("duplicate record for layer {} epoch {}", r.layer_id, r.epoch)));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[RatioRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(layer_id, rf)` for every layer, ascending by id.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut seen: Vec<(usize, usize)> = Vec::new();
        for r in &self.records {
            if !seen.iter().any(|s| s.0 == r.layer_id) {
                seen.push((r.layer_id, r.rf));
            }
        }
        seen.sort_unstable();
        seen
    }

    /// Records of one layer sorted by epoch.
    pub fn series(&self, layer_id: usize) -> Vec<&RatioRecord> {
        let mut s: Vec<&RatioRecord> = self.records.iter().filter(|r| r.layer_id == layer_id).collect();
        s.sort_by_key(|r| r.epoch);
        s
    }

    pub fn last_epoch(&self) -> Option<usize> {
        self.records.iter().map(|r| r.epoch).max()
    }

    /// Records of the given epoch, ordered by layer.
    pub fn at_epoch(&self, epoch: usize) -> Vec<&RatioRecord> {
        let mut s: Vec<&RatioRecord> = self.records.iter().filter(|r| r.epoch == epoch).collect();
        s.sort_by_key(|r| r.layer_id);
        s
    }
}

fn fmt_value(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else {
        format!("{v:.11e}")
    }
}

pub fn write_trajectory<W: std::io::Write>(traj: &RatioTrajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(TRAJECTORY_HEADER).map_err(to_io)?;
    for r in traj.records() {
        let mut row = vec![r.layer_id.to_string(), r.epoch.to_string(), r.rf.to_string()];
        row.extend(r.lambda_mu.iter().chain(&r.lambda_sigma).map(|&v| fmt_value(v)));
        w.write_record(&row).map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_trajectory(traj: &RatioTrajectory, path: &Path) -> Result<()> {
    write_trajectory(traj, std::fs::File::create(path)?)
}

pub fn read_trajectory<R: std::io::Read>(input: R) -> Result<RatioTrajectory> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut traj = RatioTrajectory::new();
    let mut saw_header = false;
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 1;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let line = rec.position().map_or(line, |p| p.line());
        let perr = |msg: String| Error::Parse { line, msg };
        if !saw_header {
            if rec.iter().map(str::trim).ne(TRAJECTORY_HEADER) {
                return Err(perr(format!("expected header `{}`", TRAJECTORY_HEADER.join(","))));
            }
            saw_header = true;
            continue;
        }
        if rec.len() != TRAJECTORY_HEADER.len() {
            return Err(perr(format!("expected {} fields, found {}", TRAJECTORY_HEADER.len(), rec.len())));
        }
        let int = |k: usize| {
            rec[k]
                .trim()
                .parse::<usize>()
                .map_err(|_| perr(format!("{} `{}` is not a non-negative integer", TRAJECTORY_HEADER[k], &rec[k])))
        };
        let real = |k: usize| {
            rec[k]
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(format!("{} `{}` is not a finite number", TRAJECTORY_HEADER[k], &rec[k])))
        };
        let r = RatioRecord {
            layer_id: int(0)?,
            epoch: int(1)?,
            rf: int(2)?,
            lambda_mu: [real(3)?, real(4)?, real(5)?],
            lambda_sigma: [real(6)?, real(7)?, real(8)?],
        };
        traj.push(r).map_err(|e| match e {
            Error::Input(msg) => perr(msg),
            other => other,
        })?;
    }
    if !saw_header {
        return Err(Error::Parse { line: 1, msg: format!("empty file; expected header `{}`", TRAJECTORY_HEADER.join(",")) });
    }
    Ok(traj)
}

pub fn import_trajectory(path: &Path) -> Result<RatioTrajectory> {
    read_trajectory(std::fs::File::open(path)?)
}
