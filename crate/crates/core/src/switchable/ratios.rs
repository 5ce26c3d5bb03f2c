use crate::error::{Error, Result};
use crate::norm::NormalizerKind;

/// A candidate normalizer of a switchable layer. The declaration order
/// (IN, LN, BN) is the canonical ordering of every ratio vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Member {
    In,
    Ln,
    Bn,
}

impl Member {
    pub const ALL: [Member; 3] = [Member::In, Member::Ln, Member::Bn];

    pub fn kind(self) -> NormalizerKind {
        match self {
            Member::In => NormalizerKind::In,
            Member::Ln => NormalizerKind::Ln,
            Member::Bn => NormalizerKind::Bn,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Member::In => "in",
            Member::Ln => "ln",
            Member::Bn => "bn",
        }
    }

    /// Position in the canonical (IN, LN, BN) order.
    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "in" => Ok(Member::In),
            "ln" => Ok(Member::Ln),
            "bn" => Ok(Member::Bn),
            other => Err(Error::Config(format!("unknown normalizer '{other}' (expected in, ln or bn)"))),
        }
    }
}

impl std::fmt::Display for Member {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Non-empty, canonically ordered set of candidate normalizers.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Omega(Vec<Member>);

impl Omega {
    pub fn full() -> Self {
        Omega(Member::ALL.to_vec())
    }

    pub fn new(members: &[Member]) -> Result<Self> {
        let mut m = members.to_vec();
        m.sort();
        m.dedup();
        if m.is_empty() {
            return Err(Error::Config("normalizer set must not be empty".into()));
        }
        Ok(Omega(m))
    }

    /// Parses a comma-separated list such as `ln,bn`.
    pub fn parse(s: &str) -> Result<Self> {
        let members = s.split(',').filter(|p| !p.trim().is_empty()).map(Member::parse).collect::<Result<Vec<_>>>()?;
        Omega::new(&members)
    }

    pub fn members(&self) -> &[Member] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn position(&self, m: Member) -> Option<usize> {
        self.0.iter().position(|&x| x == m)
    }

    pub fn contains(&self, m: Member) -> bool {
        self.0.contains(&m)
    }

    /// Spreads a ratio vector over the canonical three slots, writing 0 for
    /// absent members.
    pub fn expand(&self, ratios: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (m, r) in self.0.iter().zip(ratios) {
            out[m.slot()] = *r;
        }
        out
    }

    pub fn label(&self) -> String {
        self.0.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
    }
}

/// `exp(l_i - max l) / sum_j exp(l_j - max l)`.
pub fn softmax_ratios(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Config("softmax over an empty logit vector".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Pulls a gradient with respect to softmax outputs back to the logits:
/// `dl_i = p_i * (dp_i - sum_j p_j dp_j)`.
pub fn softmax_backward(ratios: &[f64], dratios: &[f64]) -> Vec<f64> {
    let dot: f64 = ratios.iter().zip(dratios).map(|(p, d)| p * d).sum();
    ratios.iter().zip(dratios).map(|(p, d)| p * (d - dot)).collect()
}

/// Index of the largest entry; ties resolve to the earliest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One-hot selection of a single normalizer for the mean and one for the
/// variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HardRatio {
    pub mu: Member,
    pub sigma: Member,
}

/// Magnitude of the logits used when ratios start from a hard selection.
pub const HARD_INIT_LOGIT: f64 = 10.0;

/// Learnable mixture logits of one switchable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioState {
    omega: Omega,
    logits_mu: Vec<f64>,
    /// `None` when tied: the variance ratios read `logits_mu`.
    logits_sigma: Option<Vec<f64>>,
    hard: Option<HardRatio>,
}

impl RatioState {
    /// All logits zero, so every ratio starts at `1/|omega|`.
    pub fn uniform(omega: Omega, tied: bool) -> Self {
        let n = omega.len();
        Self { omega, logits_mu: vec![0.0; n], logits_sigma: (!tied).then(|| vec![0.0; n]), hard: None }
    }

    /// Trainable logits set to `+L` on the selected member and `-L`
    /// elsewhere.
    pub fn hard_init(omega: Omega, choice: HardRatio, tied: bool) -> Result<Self> {
        for m in [choice.mu, choice.sigma] {
            if !omega.contains(m) {
                return Err(Error::Config(format!("hard choice {m} is not in {{{}}}", omega.label())));
            }
        }
        if tied && choice.mu != choice.sigma {
            return Err(Error::Config("tied ratios need the same choice for mean and variance".into()));
        }
        let peaked = |m: Member| -> Vec<f64> {
            omega.members().iter().map(|&x| if x == m { HARD_INIT_LOGIT } else { -HARD_INIT_LOGIT }).collect()
        };
        Ok(Self { logits_mu: peaked(choice.mu), logits_sigma: (!tied).then(|| peaked(choice.sigma)), hard: None, omega })
    }

    pub fn from_logits(omega: Omega, logits_mu: Vec<f64>, logits_sigma: Option<Vec<f64>>) -> Result<Self> {
        if logits_mu.len() != omega.len() || logits_sigma.as_ref().is_some_and(|l| l.len() != omega.len()) {
            return Err(Error::Config(format!(
                "logit vectors do not match the {} members of {{{}}}",
                omega.len(),
                omega.label()
            )));
        }
        Ok(Self { omega, logits_mu, logits_sigma, hard: None })
    }

    pub fn omega(&self) -> &Omega {
        &self.omega
    }

    pub fn is_tied(&self) -> bool {
        self.logits_sigma.is_none()
    }

    pub fn hard(&self) -> Option<HardRatio> {
        self.hard
    }

    pub fn logits_mu(&self) -> &[f64] {
        &self.logits_mu
    }

    pub fn logits_sigma(&self) -> &[f64] {
        self.logits_sigma.as_deref().unwrap_or(&self.logits_mu)
    }

    pub fn logits_mu_mut(&mut self) -> &mut Vec<f64> {
        &mut self.logits_mu
    }

    /// `None` when tied.
    pub fn logits_sigma_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.logits_sigma.as_mut()
    }

    fn one_hot(&self, m: Member) -> Vec<f64> {
        self.omega.members().iter().map(|&x| if x == m { 1.0 } else { 0.0 }).collect()
    }

    pub fn lambda_mu(&self) -> Vec<f64> {
        match self.hard {
            Some(h) => self.one_hot(h.mu),
            None => softmax_ratios(&self.logits_mu).expect("omega is non-empty"),
        }
    }

    pub fn lambda_sigma(&self) -> Vec<f64> {
        match self.hard {
            Some(h) => self.one_hot(h.sigma),
            None => softmax_ratios(self.logits_sigma()).expect("omega is non-empty"),
        }
    }

    /// Freezes the ratios to a one-hot selection.
    pub fn apply_hard(&mut self, h: HardRatio) -> Result<()> {
        if !self.omega.contains(h.mu) || !self.omega.contains(h.sigma) {
            return Err(Error::Config(format!("hard ratio ({}, {}) outside {{{}}}", h.mu, h.sigma, self.omega.label())));
        }
        self.hard = Some(h);
        Ok(())
    }

    /// Members whose statistics contribute to the output.
    pub fn active_members(&self) -> Vec<Member> {
        match self.hard {
            Some(h) => self.omega.members().iter().copied().filter(|&m| m == h.mu || m == h.sigma).collect(),
            None => self.omega.members().to_vec(),
        }
    }
}

/// Arg-max of `lambda_mu` and of `lambda_sigma` separately, ties broken
/// toward the earlier member in (IN, LN, BN) order.
pub fn harden(state: &RatioState) -> HardRatio {
    let members = state.omega.members();
    HardRatio { mu: members[argmax(&state.lambda_mu())], sigma: members[argmax(&state.lambda_sigma())] }
}

/// Drops the logits of members outside `subset`; the surviving ratios are
/// the softmax of the surviving logits.
pub fn restrict_omega(state: &RatioState, subset: &Omega) -> Result<RatioState> {
    if subset.is_empty() {
        return Err(Error::Config("empty normalizer subset".into()));
    }
    if let Some(m) = subset.members().iter().find(|m| !state.omega.contains(**m)) {
        return Err(Error::Config(format!("{m} is not in the current set {{{}}}", state.omega.label())));
    }
    let pick = |logits: &[f64]| -> Vec<f64> {
        subset.members().iter().map(|m| logits[state.omega.position(*m).expect("checked above")]).collect()
    };
    let hard = match state.hard {
        Some(h) if subset.contains(h.mu) && subset.contains(h.sigma) => Some(h),
        Some(_) => {
            return Err(Error::Config("subset removes a member selected by the hard ratio".into()));
        }
        None => None,
    };
    Ok(RatioState {
        omega: subset.clone(),
        logits_mu: pick(&state.logits_mu),
        logits_sigma: state.logits_sigma.as_deref().map(pick),
        hard,
    })
}
