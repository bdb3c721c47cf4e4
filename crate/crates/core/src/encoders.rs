//! Frozen visual/text scorers and the token and scene containers they read.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
/// Size of the reserved special-token range `[0, NUM_SPECIAL)`.
pub const NUM_SPECIAL: usize = 4;

/// A token sequence with a parallel flag for reserved (special) positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    ids: Vec<usize>,
    special_mask: Vec<bool>,
}

impl TokenSeq {
    /// Marks every id in the reserved range as special.
    pub fn new(ids: Vec<usize>) -> Self {
        let special_mask = ids.iter().map(|&i| i < NUM_SPECIAL).collect();
        TokenSeq { ids, special_mask }
    }

    pub fn from_parts(ids: Vec<usize>, special_mask: Vec<bool>) -> Result<Self> {
        if ids.len() != special_mask.len() {
            return Err(Error::Dimension {
                op: "token_seq",
                left: vec![ids.len()],
                right: vec![special_mask.len()],
            });
        }
        Ok(TokenSeq { ids, special_mask })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn special_mask(&self) -> &[bool] {
        &self.special_mask
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub(crate) fn set(&mut self, i: usize, id: usize, special: bool) {
        self.ids[i] = id;
        self.special_mask[i] = special;
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.ids.iter().find(|&&i| i >= vocab) {
            Some(&id) => Err(Error::Index { id, bound: vocab }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object_id: usize,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualScene {
    pub scene_id: u64,
    pub objects: Vec<SceneObject>,
}

impl VisualScene {
    pub fn new(scene_id: u64, objects: Vec<SceneObject>) -> Result<Self> {
        let scene = VisualScene { scene_id, objects };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::contract("scene has no objects"));
        }
        let mut ids: Vec<usize> = self.objects.iter().map(|o| o.object_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract(format!(
                "duplicate object id in scene {}",
                self.scene_id
            )));
        }
        Ok(())
    }

    pub fn object_ids(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.object_id).collect()
    }

    /// Stacks the raw features into an `n × d_raw` matrix.
    pub fn feature_matrix(&self) -> Result<Tensor> {
        if self.objects.is_empty() {
            return Err(Error::contract("scene has no objects"));
        }
        let rows: Vec<Vec<f64>> = self.objects.iter().map(|o| o.feature.clone()).collect();
        Tensor::from_rows(&rows)
    }
}

/// Token embedding table of the frozen text scorer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub weights: Tensor,
}

/// Projects object features through `proj` and L2-normalizes each row.
pub fn encode_visual(scene: &VisualScene, proj: &Tensor) -> Result<Tensor> {
    let feats = scene.feature_matrix()?;
    Ok(feats.matmul(proj)?.l2_normalize_rows())
}

/// Looks up token embeddings and L2-normalizes each row.
pub fn encode_tokens(q: &TokenSeq, table: &EmbeddingTable) -> Result<Tensor> {
    Ok(table.weights.gather_rows(q.ids())?.l2_normalize_rows())
}

/// Raw similarity `gv · gtᵀ`, shape `n × m`.
pub fn relevance_matrix(gv: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if gv.cols() != gt.cols() {
        return Err(Error::Dimension {
            op: "relevance_matrix",
            left: gv.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    gv.matmul(&gt.transpose()?)
}

/// The frozen cross-modal scorer used to pick visual-agnostic tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScorer {
    pub proj: Tensor,
    pub table: EmbeddingTable,
}

impl RelevanceScorer {
    pub fn relevance(&self, scene: &VisualScene, q: &TokenSeq) -> Result<Tensor> {
        let gv = encode_visual(scene, &self.proj)?;
        let gt = encode_tokens(q, &self.table)?;
        relevance_matrix(&gv, &gt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(features: &[Vec<f64>]) -> VisualScene {
        VisualScene::new(
            0,
            features
                .iter()
                .enumerate()
                .map(|(i, f)| SceneObject {
                    object_id: i,
                    feature: f.clone(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_projection_keeps_unit_features() {
        let s = scene(&[vec![0.6, 0.8], vec![1.0, 0.0]]);
        let out = encode_visual(&s, &Tensor::identity(2)).unwrap();
        assert_eq!(out.row(0), &[0.6, 0.8]);
        assert_eq!(out.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn single_object_shape() {
        let s = scene(&[vec![3.0, 4.0, 0.0]]);
        let proj = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(encode_visual(&s, &proj).unwrap().shape(), &[1, 2]);
    }

    #[test]
    fn empty_scene_is_contract_error() {
        assert!(VisualScene::new(1, vec![]).is_err());
        let s = VisualScene {
            scene_id: 1,
            objects: vec![],
        };
        assert!(matches!(
            encode_visual(&s, &Tensor::identity(2)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn repeated_token_gives_identical_rows() {
        let table = EmbeddingTable {
            weights: Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap(),
        };
        let out = encode_tokens(&TokenSeq::new(vec![1, 1]), &table).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn relevance_identical_and_orthogonal() {
        let gv = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let gt = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = relevance_matrix(&gv, &gt).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn relevance_dimension_mismatch() {
        let gv = Tensor::zeros(&[1, 2]);
        let gt = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            relevance_matrix(&gv, &gt),
            Err(Error::Dimension { .. })
        ));
    }
}
