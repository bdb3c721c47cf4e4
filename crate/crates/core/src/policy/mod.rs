//! The toy autoregressive multimodal policy.
//!
//! Layout per position `i` of the joint sequence `q ++ y`:
//!
//! ```text
//! e_i = token_embed[s_i] + position_embed[i] + mean_j(feature_j · visual_proj)
//! u_i = e_i + mean_{k ≤ i} e_k
//! h_i = u_i + silu(u_i · fuse_w1) · fuse_w2
//! logits_i = h_i · out_head
//! ```
//!
//! Position `|q| − 1 + t` predicts response token `y_t`, so logits for `y_t`
//! only see the scene, the query and `y_{<t}`.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{TokenSeq, VisualScene, EOS, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamSet, Tensor, Var};
use crate::rng;

pub const TOKEN_EMBED: &str = "token_embed";
pub const VISUAL_PROJ: &str = "visual_proj";
pub const FUSE_W1: &str = "fuse_w1";
pub const FUSE_W2: &str = "fuse_w2";
pub const OUT_HEAD: &str = "out_head";
pub const POSITION_EMBED: &str = "position_embed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub max_len: usize,
    /// Width of raw object features.
    pub d_raw: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64 + NUM_SPECIAL,
            d_model: 16,
            d_hidden: 32,
            max_len: 64,
            d_raw: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.d_model,
            self.d_hidden,
            self.max_len,
            self.d_raw,
        ];
        if dims.contains(&0) {
            return Err(Error::contract(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    fn shapes(&self) -> [(&'static str, [usize; 2]); 6] {
        [
            (FUSE_W1, [self.d_model, self.d_hidden]),
            (FUSE_W2, [self.d_hidden, self.d_model]),
            (OUT_HEAD, [self.d_model, self.vocab_size]),
            (POSITION_EMBED, [self.max_len, self.d_model]),
            (TOKEN_EMBED, [self.vocab_size, self.d_model]),
            (VISUAL_PROJ, [self.d_raw, self.d_model]),
        ]
    }
}

/// All learnable weights of the policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: ParamSet,
}

/// A frozen snapshot used as the reference policy. It can be read but never
/// updated.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePolicy(ModelParams);

impl ReferencePolicy {
    pub fn params(&self) -> &ModelParams {
        &self.0
    }
}

/// Deep copy of `params` that later policy updates cannot touch.
pub fn clone_frozen(params: &ModelParams) -> ReferencePolicy {
    ReferencePolicy(params.clone())
}

/// Uniform init in `±1/√fan`, where `fan` is the input width of a projection
/// or `d_model` for embedding tables.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut tensors = ParamSet::new();
    for (i, (name, [r, c])) in config.shapes().into_iter().enumerate() {
        let fan = match name {
            TOKEN_EMBED | POSITION_EMBED => config.d_model,
            _ => r,
        };
        let bound = 1.0 / (fan as f64).sqrt();
        let mut rng = rng::stream(seed, "init", &[i as u64]);
        let data = (0..r * c)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        tensors.insert(name, Tensor::matrix(r, c, data)?);
    }
    Ok(ModelParams {
        config: *config,
        tensors,
    })
}

impl ModelParams {
    /// Checks every tensor against the configured shapes.
    pub fn validate(&self) -> Result<()> {
        for (name, shape) in self.config.shapes() {
            let t = self.tensors.expect(name)?;
            if t.shape() != shape {
                return Err(Error::Dimension {
                    op: "model_params",
                    left: t.shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Graph handles for one copy of the weights.
#[derive(Clone, Copy, Debug)]
pub struct PolicyVars {
    token_embed: Var,
    visual_proj: Var,
    fuse_w1: Var,
    fuse_w2: Var,
    out_head: Var,
    position_embed: Var,
}

impl PolicyVars {
    fn from_map(m: &BTreeMap<String, Var>) -> Result<Self> {
        let get = |n: &str| {
            m.get(n)
                .copied()
                .ok_or_else(|| Error::contract(format!("missing parameter `{n}`")))
        };
        Ok(PolicyVars {
            token_embed: get(TOKEN_EMBED)?,
            visual_proj: get(VISUAL_PROJ)?,
            fuse_w1: get(FUSE_W1)?,
            fuse_w2: get(FUSE_W2)?,
            out_head: get(OUT_HEAD)?,
            position_embed: get(POSITION_EMBED)?,
        })
    }

    /// Registers the weights as differentiable parameters.
    pub fn trainable(g: &mut Graph, params: &ModelParams) -> Result<Self> {
        PolicyVars::from_map(&g.bind(&params.tensors))
    }

    /// Registers the weights as constants.
    pub fn frozen(g: &mut Graph, params: &ModelParams) -> Result<Self> {
        PolicyVars::from_map(&g.bind_frozen(&params.tensors))
    }
}

/// Output of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    /// `L × V`, row t scoring `y_t`.
    pub logits: Var,
    /// `L × d`, fused pre-head states at the response positions.
    pub hidden: Var,
}

fn check_lengths(
    config: &ModelConfig,
    scene: &VisualScene,
    q_len: usize,
    y_len: usize,
) -> Result<()> {
    let total = scene.objects.len() + q_len + y_len;
    if total > config.max_len {
        return Err(Error::contract(format!(
            "sequence of {total} tokens exceeds max_len {}",
            config.max_len
        )));
    }
    Ok(())
}

/// Fused hidden states for every position of `tokens`.
fn fused_states(
    g: &mut Graph,
    vars: &PolicyVars,
    scene: &VisualScene,
    tokens: &[usize],
) -> Result<Var> {
    let feats = g.constant(scene.feature_matrix()?);
    let projected = g.matmul(feats, vars.visual_proj)?;
    let visual = g.mean_rows(projected)?;

    let tok = g.gather_rows(vars.token_embed, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = g.gather_rows(vars.position_embed, &positions)?;
    let e = g.add(tok, pos)?;
    let e = g.add_row(e, visual)?;

    let ctx = g.prefix_mean(e)?;
    let u = g.add(e, ctx)?;
    let a = g.matmul(u, vars.fuse_w1)?;
    let a = g.silu(a);
    let mixed = g.matmul(a, vars.fuse_w2)?;
    g.add(u, mixed)
}

/// Teacher-forced pass over `y` given scene and query.
pub fn forward(
    g: &mut Graph,
    vars: &PolicyVars,
    config: &ModelConfig,
    scene: &VisualScene,
    q: &TokenSeq,
    y: &TokenSeq,
) -> Result<ForwardOut> {
    if y.is_empty() {
        return Err(Error::contract("response must contain at least one token"));
    }
    if q.is_empty() {
        return Err(Error::contract("query must contain at least one token"));
    }
    check_lengths(config, scene, q.len(), y.len())?;
    q.check_vocab(config.vocab_size)?;
    y.check_vocab(config.vocab_size)?;

    let m = q.len();
    let l = y.len();
    let mut tokens = Vec::with_capacity(m + l - 1);
    tokens.extend_from_slice(q.ids());
    tokens.extend_from_slice(&y.ids()[..l - 1]);

    let states = fused_states(g, vars, scene, &tokens)?;
    let hidden = g.slice_rows(states, m - 1, m - 1 + l)?;
    let logits = g.matmul(hidden, vars.out_head)?;
    Ok(ForwardOut { logits, hidden })
}

/// `Σ_t log π(y_t | y_<t, x, q)` as a graph node.
pub fn response_logprob_var(
    g: &mut Graph,
    vars: &PolicyVars,
    config: &ModelConfig,
    scene: &VisualScene,
    q: &TokenSeq,
    y: &TokenSeq,
) -> Result<(Var, ForwardOut)> {
    let out = forward(g, vars, config, scene, q, y)?;
    let logp = g.log_softmax_rows(out.logits)?;
    let coords: Vec<(usize, usize)> = y.ids().iter().copied().enumerate().collect();
    Ok((g.pick_sum(logp, &coords)?, out))
}

/// Log-likelihood of `y` under `params`.
pub fn response_logprob(
    params: &ModelParams,
    scene: &VisualScene,
    q: &TokenSeq,
    y: &TokenSeq,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = PolicyVars::frozen(&mut g, params)?;
    let (lp, _) = response_logprob_var(&mut g, &vars, &params.config, scene, q, y)?;
    Ok(g.scalar(lp))
}

/// Plain-valued logits and hidden states.
pub fn forward_values(
    params: &ModelParams,
    scene: &VisualScene,
    q: &TokenSeq,
    y: &TokenSeq,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let vars = PolicyVars::frozen(&mut g, params)?;
    let out = forward(&mut g, &vars, &params.config, scene, q, y)?;
    Ok((g.value(out.logits).clone(), g.value(out.hidden).clone()))
}

/// Next-token logits after `q ++ prefix`.
pub fn next_token_logits(
    params: &ModelParams,
    scene: &VisualScene,
    q: &TokenSeq,
    prefix: &[usize],
) -> Result<Vec<f64>> {
    if q.is_empty() {
        return Err(Error::contract("query must contain at least one token"));
    }
    check_lengths(&params.config, scene, q.len(), prefix.len() + 1)?;
    let mut tokens = q.ids().to_vec();
    tokens.extend_from_slice(prefix);
    let mut g = Graph::new();
    let vars = PolicyVars::frozen(&mut g, params)?;
    let states = fused_states(&mut g, &vars, scene, &tokens)?;
    let last = g.slice_rows(states, tokens.len() - 1, tokens.len())?;
    let logits = g.matmul(last, vars.out_head)?;
    Ok(g.value(logits).data().to_vec())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: argmax per step, stopping after EOS or `max_len` tokens.
pub fn greedy_decode(
    params: &ModelParams,
    scene: &VisualScene,
    q: &TokenSeq,
    max_len: usize,
) -> Result<TokenSeq> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let mut out = Vec::new();
    while out.len() < max_len {
        let next = argmax(&next_token_logits(params, scene, q, &out)?);
        out.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(TokenSeq::new(out))
}
