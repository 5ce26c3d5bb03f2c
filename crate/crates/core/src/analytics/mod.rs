//! Ratio trajectories and the measurements taken on them: KL-based
//! divergences, receptive fields and receptive-field binning.

mod rf;
mod trajectory;

pub use rf::{norm_layers, receptive_fields, resnet50_graph, RfGraph, RfInfo, RfNode, RfOp};
pub use trajectory::{
    export_trajectory, import_trajectory, read_trajectory, write_trajectory, RatioRecord, RatioTrajectory, TRAJECTORY_HEADER,
};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logarithms.
/// A range with its binned mean per epoch.
pub type BinnedSeries = (RfRange, Vec<(usize, Option<f64>)>);

pub const PROB_FLOOR: f64 = 1e-12;

/// Per-layer metadata attached to every normalization layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerMeta {
    pub layer_id: usize,
    pub rf: usize,
    pub kernel_size: usize,
    pub is_shortcut: bool,
}

/// `sum p_i ln(p_i / q_i)` with both arguments clamped at [`PROB_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Input(format!("kl_divergence: length mismatch ({} vs {})", p.len(), q.len())));
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.max(PROB_FLOOR), b.max(PROB_FLOOR));
            a * (a / b).ln()
        })
        .sum())
}

/// `KL(p||q) + KL(q||p)`.
pub fn sym_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    Ok(kl_divergence(p, q)? + kl_divergence(q, p)?)
}

/// Which ratio vector a cross-run comparison looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Mu,
    Sigma,
}

impl Which {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mu" => Ok(Which::Mu),
            "sigma" => Ok(Which::Sigma),
            other => Err(Error::Config(format!("expected `mu` or `sigma`, got `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Which::Mu => "mu",
            Which::Sigma => "sigma",
        }
    }

    fn pick(self, r: &RatioRecord) -> &[f64; 3] {
        match self {
            Which::Mu => &r.lambda_mu,
            Which::Sigma => &r.lambda_sigma,
        }
    }
}

/// One layer's divergence values over epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSeries {
    pub layer_id: usize,
    pub rf: usize,
    pub points: Vec<(usize, f64)>,
}

impl LayerSeries {
    pub fn final_value(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DivergenceReport {
    pub layers: Vec<LayerSeries>,
}

impl DivergenceReport {
    /// Epochs present in any layer, ascending.
    pub fn epochs(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self.layers.iter().flat_map(|l| l.points.iter().map(|p| p.0)).collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// `(rf, value)` pairs taken from each layer's last point.
    pub fn final_values(&self) -> Vec<(usize, f64)> {
        self.layers.iter().filter_map(|l| l.final_value().map(|v| (l.rf, v))).collect()
    }

    /// `(rf, value)` pairs at one epoch.
    pub fn values_at(&self, epoch: usize) -> Vec<(usize, f64)> {
        self.layers.iter().filter_map(|l| l.points.iter().find(|p| p.0 == epoch).map(|p| (l.rf, p.1))).collect()
    }

    /// Binned means for every epoch, one series per range.
    pub fn binned_per_epoch(&self, ranges: &[RfRange]) -> Result<Vec<BinnedSeries>> {
        validate_ranges(ranges)?;
        let epochs = self.epochs();
        let per_epoch: Vec<Vec<Option<f64>>> = epochs
            .iter()
            .map(|&e| bin_by_rf(&self.values_at(e), ranges).map(|b| b.into_iter().map(|x| x.1).collect()))
            .collect::<Result<_>>()?;
        Ok(ranges
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), epochs.iter().zip(&per_epoch).map(|(&e, v)| (e, v[i])).collect()))
            .collect())
    }
}

/// `D(lambda_mu || lambda_sigma)` for every record of a trajectory.
pub fn mu_sigma_divergence(traj: &RatioTrajectory) -> Result<DivergenceReport> {
    let mut layers = Vec::new();
    for (layer_id, rf) in traj.layers() {
        let points = traj
            .series(layer_id)
            .into_iter()
            .map(|r| Ok((r.epoch, sym_divergence(&r.lambda_mu, &r.lambda_sigma)?)))
            .collect::<Result<_>>()?;
        layers.push(LayerSeries { layer_id, rf, points });
    }
    Ok(DivergenceReport { layers })
}

/// Per-layer divergence between two runs' ratios.
///
/// Layers must match exactly. When both runs logged the same epochs every
/// epoch is compared; otherwise only the final records are, reported at the
/// later of the two final epochs.
pub fn trajectory_divergence(a: &RatioTrajectory, b: &RatioTrajectory, which: Which) -> Result<DivergenceReport> {
    let (la, lb) = (a.layers(), b.layers());
    let ids = |l: &[(usize, usize)]| l.iter().map(|x| x.0).collect::<Vec<_>>();
    if ids(&la) != ids(&lb) {
        let shared = ids(&la).iter().filter(|i| ids(&lb).contains(i)).count();
        return Err(Error::Incompatible(format!("layer sets differ: {} vs {} layers, {shared} shared", la.len(), lb.len())));
    }
    let mut layers = Vec::new();
    for &(layer_id, rf) in &la {
        let (sa, sb) = (a.series(layer_id), b.series(layer_id));
        let same_epochs = sa.len() == sb.len() && sa.iter().zip(&sb).all(|(x, y)| x.epoch == y.epoch);
        let points = if same_epochs {
            sa.iter()
                .zip(&sb)
                .map(|(x, y)| Ok((x.epoch, sym_divergence(which.pick(x), which.pick(y))?)))
                .collect::<Result<Vec<_>>>()?
        } else {
            match (sa.last(), sb.last()) {
                (Some(x), Some(y)) => vec![(x.epoch.max(y.epoch), sym_divergence(which.pick(x), which.pick(y))?)],
                _ => Vec::new(),
            }
        };
        layers.push(LayerSeries { layer_id, rf, points });
    }
    Ok(DivergenceReport { layers })
}

/// A half-open receptive-field interval `[lo, hi)`, or the catch-all range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfRange {
    pub label: String,
    pub bounds: Option<(usize, usize)>,
}

impl RfRange {
    pub fn new(lo: usize, hi: usize) -> Self {
        Self { label: format!("{lo}-{hi}"), bounds: Some((lo, hi)) }
    }

    pub fn all() -> Self {
        Self { label: "ALL".into(), bounds: None }
    }

    pub fn contains(&self, rf: usize) -> bool {
        self.bounds.is_none_or(|(lo, hi)| lo <= rf && rf < hi)
    }

    /// The six default ranges. The upper one is closed at 427 so that the
    /// deepest ResNet50 layer falls inside it.
    pub fn defaults() -> Vec<RfRange> {
        let labelled = |label: &str, lo, hi| RfRange { label: label.into(), bounds: Some((lo, hi)) };
        vec![
            labelled("<49", 0, 49),
            labelled("49-99", 49, 99),
            labelled("99-199", 99, 199),
            labelled("199-299", 199, 299),
            labelled("299-427", 299, 428),
            RfRange::all(),
        ]
    }

    /// Parses `lo:hi,lo:hi,all`.
    pub fn parse_list(s: &str) -> Result<Vec<RfRange>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part.eq_ignore_ascii_case("all") {
                out.push(RfRange::all());
                continue;
            }
            let (lo, hi) = part.split_once(':').ok_or_else(|| Error::Config(format!("rf range `{part}` is not `lo:hi`")))?;
            let num = |t: &str| {
                t.trim().parse::<usize>().map_err(|_| Error::Config(format!("rf range `{part}` has a non-integer bound")))
            };
            out.push(RfRange::new(num(lo)?, num(hi)?));
        }
        validate_ranges(&out)?;
        Ok(out)
    }
}

fn validate_ranges(ranges: &[RfRange]) -> Result<()> {
    if ranges.is_empty() {
        return Err(Error::Config("no rf ranges given".into()));
    }
    let mut bounded: Vec<(usize, usize)> = ranges.iter().filter_map(|r| r.bounds).collect();
    if let Some(&(lo, hi)) = bounded.iter().find(|(lo, hi)| lo >= hi) {
        return Err(Error::Config(format!("rf range [{lo}, {hi}) is empty")));
    }
    bounded.sort_unstable();
    if let Some(w) = bounded.windows(2).find(|w| w[0].1 > w[1].0) {
        return Err(Error::Config(format!("rf ranges [{}, {}) and [{}, {}) overlap", w[0].0, w[0].1, w[1].0, w[1].1)));
    }
    Ok(())
}

/// Mean of the values whose rf falls in each range; `None` for empty ranges.
pub fn bin_by_rf(values: &[(usize, f64)], ranges: &[RfRange]) -> Result<Vec<(RfRange, Option<f64>)>> {
    validate_ranges(ranges)?;
    Ok(ranges
        .iter()
        .map(|r| {
            let hits: Vec<f64> = values.iter().filter(|(rf, _)| r.contains(*rf)).map(|v| v.1).collect();
            let mean = (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64);
            (r.clone(), mean)
        })
        .collect())
}
