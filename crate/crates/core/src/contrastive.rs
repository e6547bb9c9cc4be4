//! Temperature-scaled similarity and the symmetric contrastive loss.

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// `logits[i][j] = scale_used · ⟨image_i, text_j⟩`.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityMatrix {
    pub logits: Var,
    pub scale_used: f64,
}

/// Builds the similarity logits between row-normalised image and text
/// embeddings. `scale` is the already-exponentiated (and clamped) scalar.
pub fn similarity<T: Element>(g: &mut Graph<T>, image_emb: Var, text_emb: Var, scale: Var) -> Result<SimilarityMatrix> {
    let si = g.shape(image_emb).to_vec();
    let st = g.shape(text_emb).to_vec();
    if si.len() != 2 || si != st {
        return Err(Error::dim("similarity", &si, &st));
    }
    if g.value(scale).numel() != 1 {
        return Err(Error::dim("similarity", &si, g.shape(scale)));
    }
    let scale_used = g.value(scale).data()[0].to_f64();
    let text_t = g.transpose(text_emb)?;
    let dots = g.matmul(image_emb, text_t)?;
    let logits = g.mul(dots, scale)?;
    Ok(SimilarityMatrix { logits, scale_used })
}

/// Mean of the image→text (rows) and text→image (columns) cross-entropies
/// with the diagonal as targets.
pub fn clip_loss<T: Element>(g: &mut Graph<T>, sim: &SimilarityMatrix) -> Result<Var> {
    clip_loss_logits(g, sim.logits)
}

pub fn clip_loss_logits<T: Element>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim("clip_loss", &s, &[s.first().copied().unwrap_or(0); 2]));
    }
    let targets: Vec<usize> = (0..s[0]).collect();
    let rows = g.softmax_cross_entropy(logits, &targets)?;
    let transposed = g.transpose(logits)?;
    let cols = g.softmax_cross_entropy(transposed, &targets)?;
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, 0.5))
}

/// Loss value for a plain logits matrix, without gradients.
pub fn clip_loss_value(logits: &Tensor) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let l = g.constant(logits.clone());
    let loss = clip_loss_logits(&mut g, l)?;
    Ok(g.value(loss).data()[0] as f64)
}
