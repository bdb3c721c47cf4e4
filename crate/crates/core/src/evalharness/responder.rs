use rand::Rng;

use crate::encoders::{TokenSeq, VisualScene};
use crate::error::{Error, Result};
use crate::policy::{greedy_decode, next_token_logits, ModelParams};
use crate::rng;
use crate::synthdata::WorldSpec;

/// Anything that can describe a scene and answer existence questions.
pub trait Responder: Sync {
    fn describe(&self, scene: &VisualScene, query: &TokenSeq) -> Result<TokenSeq>;

    /// Answers an existence question; `true` means "yes".
    fn answer(&self, scene: &VisualScene, query: &TokenSeq) -> Result<bool>;
}

/// Greedy decoding from a trained policy.
pub struct PolicyResponder<'a> {
    pub params: &'a ModelParams,
    pub yes: usize,
    pub no: usize,
    pub max_len: usize,
}

impl<'a> PolicyResponder<'a> {
    pub fn new(params: &'a ModelParams, world: &WorldSpec) -> Self {
        PolicyResponder {
            params,
            yes: world.vocab.yes,
            no: world.vocab.no,
            max_len: world.config.n_objects + 1,
        }
    }
}

impl Responder for PolicyResponder<'_> {
    fn describe(&self, scene: &VisualScene, query: &TokenSeq) -> Result<TokenSeq> {
        greedy_decode(self.params, scene, query, self.max_len)
    }

    /// Greedy choice restricted to the two answer tokens; ties answer "no".
    fn answer(&self, scene: &VisualScene, query: &TokenSeq) -> Result<bool> {
        let logits = next_token_logits(self.params, scene, query, &[])?;
        Ok(logits[self.yes] > logits[self.no])
    }
}

/// Reads the answer straight off the scene's object ids.
pub struct OracleResponder<'a> {
    pub world: &'a WorldSpec,
}

fn asked_object(world: &WorldSpec, query: &TokenSeq) -> Result<usize> {
    query
        .ids()
        .iter()
        .rev()
        .find_map(|&t| world.vocab.object_of(t))
        .ok_or_else(|| Error::contract("existence question names no object"))
}

impl Responder for OracleResponder<'_> {
    fn describe(&self, scene: &VisualScene, _query: &TokenSeq) -> Result<TokenSeq> {
        Ok(self.world.describe(&scene.object_ids()))
    }

    fn answer(&self, scene: &VisualScene, query: &TokenSeq) -> Result<bool> {
        Ok(scene
            .object_ids()
            .contains(&asked_object(self.world, query)?))
    }
}

/// Always answers the same way and describes with an empty list.
pub struct ConstantResponder(pub bool);

impl Responder for ConstantResponder {
    fn describe(&self, _scene: &VisualScene, _query: &TokenSeq) -> Result<TokenSeq> {
        Ok(TokenSeq::new(vec![crate::encoders::EOS]))
    }

    fn answer(&self, _scene: &VisualScene, _query: &TokenSeq) -> Result<bool> {
        Ok(self.0)
    }
}

/// Coin-flip answers, keyed by scene id and query so they are reproducible.
pub struct RandomResponder {
    pub seed: u64,
}

impl Responder for RandomResponder {
    fn describe(&self, _scene: &VisualScene, _query: &TokenSeq) -> Result<TokenSeq> {
        Ok(TokenSeq::new(vec![crate::encoders::EOS]))
    }

    fn answer(&self, scene: &VisualScene, query: &TokenSeq) -> Result<bool> {
        let mut key: Vec<u64> = vec![scene.scene_id];
        key.extend(query.ids().iter().map(|&t| t as u64));
        Ok(rng::stream(self.seed, "random-responder", &key).random_bool(0.5))
    }
}
