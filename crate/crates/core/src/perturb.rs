//! Visual-agnostic token perturbation (the inner maximization step).
//!
//! Per example: score each query token by its best alignment with any scene
//! object, measure the gap between the two best-aligned tokens, turn that gap
//! into a budget `N_t = ⌊ω / ΔP⌋ + 1`, then mask or replace the `N_t`
//! least-aligned non-special tokens. Everything else is copied verbatim.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{RelevanceScorer, TokenSeq, VisualScene, MASK, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Floor on the margin before it is inverted.
pub const MARGIN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    Mask,
    Replace,
}

impl std::str::FromStr for PerturbMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(PerturbMode::Mask),
            "replace" => Ok(PerturbMode::Replace),
            other => Err(Error::Parse(format!("unknown perturbation mode `{other}`"))),
        }
    }
}

/// Everything decided for one (scene, query) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPlan {
    /// Sorted token positions that were perturbed.
    pub agnostic_set: Vec<usize>,
    /// Budget after clamping to the eligible count.
    pub budget: usize,
    /// `⌊ω / max(ΔP, ε)⌋ + 1` before clamping.
    pub raw_budget: u64,
    pub margin: f64,
    pub omega: f64,
    pub mode: PerturbMode,
    /// Number of non-special positions in the query.
    pub eligible: usize,
}

/// Best alignment of each token with any visual row: column maxima of an
/// `n × m` relevance matrix.
pub fn token_relevance(s: &Tensor) -> Result<Vec<f64>> {
    let (n, m) = s.check_matrix("token_relevance")?;
    if n == 0 || m == 0 {
        return Err(Error::contract("token_relevance on an empty matrix"));
    }
    Ok((0..m)
        .map(|j| (0..n).map(|i| s.at(i, j)).fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Gap between the largest and second-largest entries. Fewer than two
/// entries yield [`MARGIN_EPS`].
pub fn uncertainty_margin(p: &[f64]) -> f64 {
    if p.len() < 2 {
        return MARGIN_EPS;
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    first - second
}

/// `⌊ω / max(ΔP, ε)⌋ + 1` with no clamping.
pub fn raw_budget(omega: f64, margin: f64) -> u64 {
    (omega / margin.max(MARGIN_EPS)).floor() as u64 + 1
}

/// The raw budget clamped into `[1, eligible]` (or 1 when nothing is
/// eligible).
pub fn perturbation_budget(omega: f64, margin: f64, eligible: usize) -> Result<usize> {
    if omega.is_nan() || omega <= 0.0 {
        return Err(Error::contract(format!(
            "omega must be positive, got {omega}"
        )));
    }
    let raw = raw_budget(omega, margin);
    let capped = raw.min(eligible as u64) as usize;
    Ok(capped.max(1))
}

/// Result of [`select_agnostic_tokens`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub indices: Vec<usize>,
    /// Set when every position was special, so nothing could be chosen.
    pub no_eligible: bool,
}

/// The `budget` non-special positions with the lowest relevance, ties going
/// to the lower index. Returned sorted by position.
pub fn select_agnostic_tokens(
    p: &[f64],
    budget: usize,
    special_mask: &[bool],
) -> Result<Selection> {
    if p.len() != special_mask.len() {
        return Err(Error::Dimension {
            op: "select_agnostic_tokens",
            left: vec![p.len()],
            right: vec![special_mask.len()],
        });
    }
    let mut eligible: Vec<usize> = (0..p.len()).filter(|&i| !special_mask[i]).collect();
    if eligible.is_empty() {
        return Ok(Selection {
            indices: vec![],
            no_eligible: true,
        });
    }
    eligible.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    eligible.truncate(budget);
    eligible.sort_unstable();
    Ok(Selection {
        indices: eligible,
        no_eligible: false,
    })
}

/// Applies the perturbation to positions in `agnostic` and copies every other
/// position. Replacement draws uniformly from the content range
/// `[NUM_SPECIAL, vocab_size)` excluding the original id.
pub fn apply_perturbation<R: Rng + ?Sized>(
    q: &TokenSeq,
    agnostic: &[usize],
    mode: PerturbMode,
    vocab_size: usize,
    rng: &mut R,
) -> Result<TokenSeq> {
    let mut out = q.clone();
    for &i in agnostic {
        if i >= q.len() {
            return Err(Error::Index {
                id: i,
                bound: q.len(),
            });
        }
        if q.special_mask()[i] {
            return Err(Error::contract(format!(
                "position {i} holds a special token and cannot be perturbed"
            )));
        }
        match mode {
            PerturbMode::Mask => out.set(i, MASK, true),
            PerturbMode::Replace => {
                let content = vocab_size.saturating_sub(NUM_SPECIAL);
                if content < 2 {
                    return Err(Error::contract(
                        "replace mode needs at least two content tokens",
                    ));
                }
                let orig = q.ids()[i];
                // Draw from content-minus-one slots and skip over the original.
                let mut id = NUM_SPECIAL + rng.random_range(0..content - 1);
                if id >= orig {
                    id += 1;
                }
                out.set(i, id, false);
            }
        }
    }
    Ok(out)
}

/// Full inner step for one example: relevance, margin, budget, selection and
/// application. The margin is taken over non-special positions only.
pub fn perturb<R: Rng + ?Sized>(
    scorer: &RelevanceScorer,
    scene: &VisualScene,
    q: &TokenSeq,
    omega: f64,
    mode: PerturbMode,
    vocab_size: usize,
    rng: &mut R,
) -> Result<(TokenSeq, PerturbationPlan)> {
    let relevance = scorer.relevance(scene, q)?;
    let p = token_relevance(&relevance)?;
    let eligible_scores: Vec<f64> = p
        .iter()
        .zip(q.special_mask())
        .filter(|(_, &s)| !s)
        .map(|(&v, _)| v)
        .collect();
    let margin = uncertainty_margin(&eligible_scores);
    let budget = perturbation_budget(omega, margin, eligible_scores.len())?;
    let selection = select_agnostic_tokens(&p, budget, q.special_mask())?;
    let perturbed = apply_perturbation(q, &selection.indices, mode, vocab_size, rng)?;
    let plan = PerturbationPlan {
        agnostic_set: selection.indices,
        budget,
        raw_budget: raw_budget(omega, margin),
        margin,
        omega,
        mode,
        eligible: eligible_scores.len(),
    };
    Ok((perturbed, plan))
}
