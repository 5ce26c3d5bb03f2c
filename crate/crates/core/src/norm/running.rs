use super::{Moments, NormalizerKind};
use crate::error::{Error, Result};

/// How evaluation-time BN statistics are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMode {
    /// Arithmetic mean of per-batch moments collected after training with
    /// frozen parameters.
    BatchAverage,
    /// Exponential moving average updated after every training step.
    MovingAverage,
}

impl StatsMode {
    pub fn name(&self) -> &'static str {
        match self {
            StatsMode::BatchAverage => "batch_average",
            StatsMode::MovingAverage => "moving_average",
        }
    }
}

/// Per-channel BN statistics used at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunningStats {
    pub mode: StatsMode,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    pub decay: f64,
    pub batches_seen: u64,
    pub finalized: bool,
}

impl BnRunningStats {
    pub fn batch_average(channels: usize) -> Self {
        Self {
            mode: StatsMode::BatchAverage,
            means: vec![0.0; channels],
            vars: vec![0.0; channels],
            decay: 0.0,
            batches_seen: 0,
            finalized: false,
        }
    }

    /// Moving-average statistics starting from mean 0 and variance 1.
    pub fn moving(channels: usize, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("moving-average decay {decay} outside (0,1)")));
        }
        Ok(Self {
            mode: StatsMode::MovingAverage,
            means: vec![0.0; channels],
            vars: vec![1.0; channels],
            decay,
            batches_seen: 0,
            finalized: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.means.len()
    }

    /// Per-channel moments of one batch, averaging over its shards.
    fn batch_moments(&self, m: &Moments) -> Result<(Vec<f64>, Vec<f64>)> {
        if m.kind != NormalizerKind::Bn {
            return Err(Error::Usage(format!("running statistics fed {} moments", m.kind)));
        }
        let c = self.channels();
        if !m.means.len().is_multiple_of(c) || m.shape.c != c {
            return Err(Error::Usage(format!("running statistics for {c} channels fed moments for {} channels", m.shape.c)));
        }
        let shards = m.means.len() / c;
        let inv = 1.0 / shards as f64;
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        for s in 0..shards {
            for ch in 0..c {
                means[ch] += m.means[s * c + ch];
                vars[ch] += m.vars[s * c + ch];
            }
        }
        means.iter_mut().for_each(|v| *v *= inv);
        vars.iter_mut().for_each(|v| *v *= inv);
        Ok((means, vars))
    }

    /// Moving mode: `running = decay * running + (1 - decay) * batch`.
    /// Batch-average mode: accumulates the batch into the running sum.
    pub fn observe(&mut self, m: &Moments) -> Result<()> {
        let (means, vars) = self.batch_moments(m)?;
        match self.mode {
            StatsMode::MovingAverage => {
                let d = self.decay;
                for (r, b) in self.means.iter_mut().zip(&means) {
                    *r = d * *r + (1.0 - d) * b;
                }
                for (r, b) in self.vars.iter_mut().zip(&vars) {
                    *r = d * *r + (1.0 - d) * b;
                }
            }
            StatsMode::BatchAverage => {
                if self.finalized {
                    return Err(Error::Usage("batch-average statistics are already finalized".into()));
                }
                for (r, b) in self.means.iter_mut().zip(&means) {
                    *r += b;
                }
                for (r, b) in self.vars.iter_mut().zip(&vars) {
                    *r += b;
                }
            }
        }
        self.batches_seen += 1;
        Ok(())
    }

    /// Clears a batch-average accumulator so it can be re-estimated.
    pub fn reset(&mut self) {
        if self.mode == StatsMode::BatchAverage {
            self.means.fill(0.0);
            self.vars.fill(0.0);
            self.batches_seen = 0;
            self.finalized = false;
        }
    }

    /// Divides the accumulated sums by the number of batches.
    pub fn finalize(&mut self) -> Result<()> {
        if self.mode != StatsMode::BatchAverage || self.finalized {
            return Ok(());
        }
        if self.batches_seen == 0 {
            return Err(Error::Config("batch average over zero batches".into()));
        }
        let inv = 1.0 / self.batches_seen as f64;
        self.means.iter_mut().for_each(|v| *v *= inv);
        self.vars.iter_mut().for_each(|v| *v *= inv);
        self.finalized = true;
        Ok(())
    }

    /// Whether the statistics may be used for evaluation.
    pub fn ready(&self) -> bool {
        match self.mode {
            StatsMode::BatchAverage => self.finalized,
            StatsMode::MovingAverage => true,
        }
    }
}
