//! Preference losses: pairwise DPO, the spectral preference term and their
//! weighted sum.
//!
//! Reference-policy quantities enter every loss as constants.

use serde::{Deserialize, Serialize};

use crate::encoders::{TokenSeq, VisualScene};
use crate::error::{Error, Result};
use crate::numcore::fft::spectral_magnitude as spectrum;
use crate::numcore::{Graph, Tensor, Var};
use crate::policy::{
    forward_values, response_logprob, response_logprob_var, ModelParams, PolicyVars,
    ReferencePolicy,
};

/// Frequencies with any magnitude below this are dropped from the reduction.
pub const SPECTRAL_FLOOR: f64 = 1e-8;

/// Temperature of the token-level InfoNCE alternative.
pub const CONTRASTIVE_TEMPERATURE: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Which consistency term is weighted by `lambda`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentLoss {
    /// Log-ratio of FFT magnitude spectra of hidden states.
    #[default]
    Spectral,
    /// Position-wise InfoNCE between perturbed-policy and reference states.
    Contrastive,
}

impl std::str::FromStr for Reduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(Error::Parse(format!("unknown reduction `{other}`"))),
        }
    }
}

impl std::str::FromStr for AlignmentLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral" => Ok(AlignmentLoss::Spectral),
            "contrastive" => Ok(AlignmentLoss::Contrastive),
            other => Err(Error::Parse(format!("unknown alignment loss `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub reduction: Reduction,
    pub alignment: AlignmentLoss,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            lambda: 0.2,
            reduction: Reduction::Mean,
            alignment: AlignmentLoss::Spectral,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::contract("alpha and beta must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::contract("lambda must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dpo: f64,
    pub freq: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

/// One preference tuple with its perturbed query.
#[derive(Clone, Copy, Debug)]
pub struct PreferenceInputs<'a> {
    pub scene: &'a VisualScene,
    pub query: &'a TokenSeq,
    pub perturbed: &'a TokenSeq,
    pub chosen: &'a TokenSeq,
    pub rejected: &'a TokenSeq,
}

/// Loss nodes recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveNodes {
    pub dpo: Var,
    pub freq: Var,
    pub total: Var,
}

fn neg_log_sigmoid(g: &mut Graph, x: Var) -> Var {
    let ls = g.log_sigmoid(x);
    g.neg(ls)
}

/// Records `−log σ(α·[(lπ(y_w) − lref(y_w)) − (lπ(y_r) − lref(y_r))])`,
/// with every log-likelihood conditioned on `query`.
#[allow(clippy::too_many_arguments)]
fn dpo_node(
    g: &mut Graph,
    vars: &PolicyVars,
    policy: &ModelParams,
    reference: &ReferencePolicy,
    scene: &VisualScene,
    query: &TokenSeq,
    chosen: &TokenSeq,
    rejected: &TokenSeq,
    alpha: f64,
) -> Result<(Var, Var)> {
    let cfg = &policy.config;
    let (lw, fw) = response_logprob_var(g, vars, cfg, scene, query, chosen)?;
    let (lr, _) = response_logprob_var(g, vars, cfg, scene, query, rejected)?;
    let rw = response_logprob(reference.params(), scene, query, chosen)?;
    let rr = response_logprob(reference.params(), scene, query, rejected)?;
    let cw = g.constant(Tensor::scalar(rw));
    let cr = g.constant(Tensor::scalar(rr));
    let ratio_w = g.sub(lw, cw)?;
    let ratio_r = g.sub(lr, cr)?;
    let margin = g.sub(ratio_w, ratio_r)?;
    let scaled = g.scale(margin, alpha);
    Ok((neg_log_sigmoid(g, scaled), fw.hidden))
}

/// Spectrum of `z` zero-padded to `len` rows.
fn padded_spectrum(z: &Tensor, len: usize) -> Result<Vec<f64>> {
    let mut data = z.data().to_vec();
    data.resize(len * z.cols(), 0.0);
    Ok(spectrum(&Tensor::matrix(len, z.cols(), data)?))
}

/// Records the spectral preference term given the policy's hidden states on
/// `(x, q', y_w)`.
///
/// Chosen and rejected responses generally differ in length, so all three
/// hidden sequences are zero-padded to the longer one before transforming.
/// Note that the policy spectrum appears in both log-ratios and cancels, so
/// this term carries no gradient to the policy apart from which frequencies
/// pass the floor.
fn spectral_node(
    g: &mut Graph,
    policy_hidden: Var,
    reference: &ReferencePolicy,
    inputs: &PreferenceInputs<'_>,
    beta: f64,
    reduction: Reduction,
) -> Result<Var> {
    let len = inputs.chosen.len().max(inputs.rejected.len());
    let (_, h_w) = forward_values(
        reference.params(),
        inputs.scene,
        inputs.query,
        inputs.chosen,
    )?;
    let (_, h_r) = forward_values(
        reference.params(),
        inputs.scene,
        inputs.query,
        inputs.rejected,
    )?;
    let b = padded_spectrum(&h_w, len)?;
    let c = padded_spectrum(&h_r, len)?;

    let padded = g.pad_rows(policy_hidden, len)?;
    let a = g.spectral_magnitude(padded)?;
    let av = g.value(a).data().to_vec();
    let keep: Vec<usize> = (0..len)
        .filter(|&k| av[k] >= SPECTRAL_FLOOR && b[k] >= SPECTRAL_FLOOR && c[k] >= SPECTRAL_FLOOR)
        .collect();
    if keep.is_empty() {
        return Err(Error::contract(
            "every frequency fell below the spectral floor; hidden states are degenerate",
        ));
    }

    let a_kept = g.select(a, &keep)?;
    let log_a = g.log(a_kept);
    let log_b = g.constant(Tensor::vector(keep.iter().map(|&k| b[k].ln()).collect()));
    let log_c = g.constant(Tensor::vector(keep.iter().map(|&k| c[k].ln()).collect()));
    let vs_chosen = g.sub(log_a, log_b)?;
    let vs_rejected = g.sub(log_a, log_c)?;
    let diff = g.sub(vs_chosen, vs_rejected)?;
    let reduced = match reduction {
        Reduction::Mean => g.mean(diff)?,
        Reduction::Sum => g.sum(diff),
    };
    let scaled = g.scale(reduced, beta);
    Ok(neg_log_sigmoid(g, scaled))
}

/// Token-level InfoNCE between the policy's states on `(x, q', y_w)` and the
/// reference states on `(x, q, y_w)`; position `l` is the positive for `l`.
fn contrastive_node(
    g: &mut Graph,
    policy_hidden: Var,
    reference: &ReferencePolicy,
    inputs: &PreferenceInputs<'_>,
) -> Result<Var> {
    let (_, h_ref) = forward_values(
        reference.params(),
        inputs.scene,
        inputs.query,
        inputs.chosen,
    )?;
    let target = g.constant(h_ref.l2_normalize_rows().transpose()?);
    let u = g.row_normalize(policy_hidden)?;
    let sim = g.matmul(u, target)?;
    let sim = g.scale(sim, 1.0 / CONTRASTIVE_TEMPERATURE);
    let logp = g.log_softmax_rows(sim)?;
    let l = g.value(logp).rows();
    let diag: Vec<(usize, usize)> = (0..l).map(|i| (i, i)).collect();
    let s = g.pick_sum(logp, &diag)?;
    Ok(g.scale(s, -1.0 / l as f64))
}

/// Records the full objective `dpo(x, q') + λ·align(x, q, q')` on `g`.
pub fn build_objective(
    g: &mut Graph,
    vars: &PolicyVars,
    policy: &ModelParams,
    reference: &ReferencePolicy,
    inputs: &PreferenceInputs<'_>,
    weights: &LossWeights,
) -> Result<ObjectiveNodes> {
    weights.validate()?;
    let (dpo, hidden_w) = dpo_node(
        g,
        vars,
        policy,
        reference,
        inputs.scene,
        inputs.perturbed,
        inputs.chosen,
        inputs.rejected,
        weights.alpha,
    )?;
    let freq = match weights.alignment {
        AlignmentLoss::Spectral => spectral_node(
            g,
            hidden_w,
            reference,
            inputs,
            weights.beta,
            weights.reduction,
        )?,
        AlignmentLoss::Contrastive => contrastive_node(g, hidden_w, reference, inputs)?,
    };
    let weighted = g.scale(freq, weights.lambda);
    let total = g.add(dpo, weighted)?;
    Ok(ObjectiveNodes { dpo, freq, total })
}

/// Values of the objective's parts, without gradient tracking.
pub fn tars_loss(
    policy: &ModelParams,
    reference: &ReferencePolicy,
    inputs: &PreferenceInputs<'_>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let vars = PolicyVars::frozen(&mut g, policy)?;
    let nodes = build_objective(&mut g, &vars, policy, reference, inputs, weights)?;
    Ok(LossBreakdown {
        dpo: g.scalar(nodes.dpo),
        freq: g.scalar(nodes.freq),
        total: g.scalar(nodes.total),
        alpha: weights.alpha,
        beta: weights.beta,
        lambda: weights.lambda,
    })
}

/// Pairwise DPO loss with both policies conditioned on `query`.
pub fn dpo_loss(
    policy: &ModelParams,
    reference: &ReferencePolicy,
    scene: &VisualScene,
    query: &TokenSeq,
    chosen: &TokenSeq,
    rejected: &TokenSeq,
    alpha: f64,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::contract("alpha must be positive"));
    }
    let mut g = Graph::new();
    let vars = PolicyVars::frozen(&mut g, policy)?;
    let (loss, _) = dpo_node(
        &mut g, &vars, policy, reference, scene, query, chosen, rejected, alpha,
    )?;
    Ok(g.scalar(loss))
}

/// Spectral preference loss: policy on `(x, q')`, reference on `(x, q)`.
pub fn freq_loss(
    policy: &ModelParams,
    reference: &ReferencePolicy,
    inputs: &PreferenceInputs<'_>,
    beta: f64,
    reduction: Reduction,
) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::contract("beta must be positive"));
    }
    let mut g = Graph::new();
    let vars = PolicyVars::frozen(&mut g, policy)?;
    let out = crate::policy::forward(
        &mut g,
        &vars,
        &policy.config,
        inputs.scene,
        inputs.perturbed,
        inputs.chosen,
    )?;
    let loss = spectral_node(&mut g, out.hidden, reference, inputs, beta, reduction)?;
    Ok(g.scalar(loss))
}

/// `−log σ(β · reduce_k[log(a_k/b_k) − log(a_k/c_k)])` over plain spectra,
/// with the same floor rule as the training objective.
pub fn spectral_preference(
    a: &[f64],
    b: &[f64],
    c: &[f64],
    beta: f64,
    reduction: Reduction,
) -> Result<f64> {
    if a.len() != b.len() || a.len() != c.len() {
        return Err(Error::Dimension {
            op: "spectral_preference",
            left: vec![a.len(), b.len()],
            right: vec![c.len()],
        });
    }
    let terms: Vec<f64> = (0..a.len())
        .filter(|&k| a[k] >= SPECTRAL_FLOOR && b[k] >= SPECTRAL_FLOOR && c[k] >= SPECTRAL_FLOOR)
        .map(|k| (a[k].ln() - b[k].ln()) - (a[k].ln() - c[k].ln()))
        .collect();
    if terms.is_empty() {
        return Err(Error::contract(
            "every frequency fell below the spectral floor",
        ));
    }
    let r: f64 = terms.iter().sum();
    let r = match reduction {
        Reduction::Mean => r / terms.len() as f64,
        Reduction::Sum => r,
    };
    Ok(-crate::numcore::log_sigmoid(beta * r))
}
