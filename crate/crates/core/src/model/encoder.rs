use super::{Binder, DualEncoderModel, TowerLayout, LAYER_NORM_EPS, LOGIT_SCALE_MAX, NORMALIZE_EPS};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Element, Graph, Tensor, Var};

/// Additive attention bias for padded keys. Large enough that `exp` underflows
/// to exactly zero, small enough to stay finite.
const MASK_BIAS: f64 = -1e9;

/// Rows inferred per graph in the read-only `encode_*` paths.
const INFER_CHUNK: usize = 128;

/// Padded token ids with per-row valid lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    lengths: Vec<usize>,
    seq_len: usize,
}

impl TokenBatch {
    /// Builds a batch from token rows, padding with id 0 to the longest row.
    pub fn new(rows: &[Vec<usize>], lengths: &[usize]) -> Result<Self> {
        if rows.len() != lengths.len() {
            return Err(Error::dim("token_batch", &[rows.len()], &[lengths.len()]));
        }
        let seq_len = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * seq_len);
        for (row, &len) in rows.iter().zip(lengths) {
            if len == 0 || len > row.len() {
                return Err(Error::Contract(format!(
                    "token length {len} outside 1..={}",
                    row.len()
                )));
            }
            ids.extend_from_slice(row);
            ids.extend(std::iter::repeat_n(0, seq_len - row.len()));
        }
        Ok(Self {
            ids,
            lengths: lengths.to_vec(),
            seq_len,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Rows `start..end` as a new batch, trimmed to their own longest length.
    pub fn slice(&self, start: usize, end: usize) -> TokenBatch {
        let seq_len = self.lengths[start..end].iter().copied().max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity((end - start) * seq_len);
        for i in start..end {
            ids.extend_from_slice(&self.row(i)[..seq_len]);
        }
        TokenBatch {
            ids,
            lengths: self.lengths[start..end].to_vec(),
            seq_len,
        }
    }

    pub fn select(&self, rows: &[usize]) -> TokenBatch {
        let seq_len = rows.iter().map(|&r| self.lengths[r]).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(rows.len() * seq_len);
        for &r in rows {
            ids.extend_from_slice(&self.row(r)[..seq_len]);
        }
        TokenBatch {
            ids,
            lengths: rows.iter().map(|&r| self.lengths[r]).collect(),
            seq_len,
        }
    }
}

/// Rearranges `[batch, channels, size, size]` pixels into
/// `[batch, patches, channels * patch * patch]`, patches in row-major order.
pub(crate) fn patchify<T: Element>(images: &Tensor<T>, size: usize, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[2] != size || s[3] != size {
        return Err(Error::dim("encode_image", s, &[s.first().copied().unwrap_or(0), 3, size, size]));
    }
    let (batch, channels) = (s[0], s[1]);
    let side = size / patch;
    let patch_dim = channels * patch * patch;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..batch {
        for py in 0..side {
            for px in 0..side {
                for c in 0..channels {
                    for y in 0..patch {
                        let row = ((b * channels + c) * size + py * patch + y) * size + px * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch, side * side, patch_dim], out)
}

fn linear<T: Element>(g: &mut Graph<T>, b: &mut Binder<T>, x: Var, weight: usize, bias: usize) -> Result<Var> {
    let w = b.get(g, weight);
    let bias = b.get(g, bias);
    let y = g.matmul(x, w)?;
    g.add(y, bias)
}

fn layer_norm<T: Element>(g: &mut Graph<T>, b: &mut Binder<T>, x: Var, gain: usize, bias: usize) -> Result<Var> {
    let gain = b.get(g, gain);
    let bias = b.get(g, bias);
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

/// Pre-norm transformer stack over `x[batch, seq, dim]`.
fn tower<T: Element>(
    g: &mut Graph<T>,
    b: &mut Binder<T>,
    layout: &TowerLayout,
    mut x: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (batch, seq, dim) = (shape[0], shape[1], shape[2]);
    let heads = layout.heads;
    let head_dim = dim / heads;
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    for bl in &layout.blocks {
        let h = layer_norm(g, b, x, bl.ln1_gain, bl.ln1_bias)?;
        let q = linear(g, b, h, bl.q_weight, bl.q_bias)?;
        let k = linear(g, b, h, bl.k_weight, bl.k_bias)?;
        let v = linear(g, b, h, bl.v_weight, bl.v_bias)?;
        let q = g.reshape(q, &[batch, seq, heads, head_dim])?;
        let q = g.permute(q, &[0, 2, 1, 3])?;
        let k = g.reshape(k, &[batch, seq, heads, head_dim])?;
        let k = g.permute(k, &[0, 2, 3, 1])?;
        let v = g.reshape(v, &[batch, seq, heads, head_dim])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        let scores = g.matmul(q, k)?;
        let mut scores = g.scale(scores, inv_sqrt);
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let attn = g.softmax(scores);
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch, seq, dim])?;
        let out = linear(g, b, ctx, bl.o_weight, bl.o_bias)?;
        x = g.add(x, out)?;

        let h = layer_norm(g, b, x, bl.ln2_gain, bl.ln2_bias)?;
        let h = linear(g, b, h, bl.fc1_weight, bl.fc1_bias)?;
        let h = g.gelu(h);
        let h = linear(g, b, h, bl.fc2_weight, bl.fc2_bias)?;
        x = g.add(x, h)?;
    }
    layer_norm(g, b, x, layout.final_gain, layout.final_bias)
}

/// Weighted mean over the sequence axis: `weights[batch, seq]` → `[batch, dim]`.
fn pool<T: Element>(g: &mut Graph<T>, x: Var, weights: Vec<T>) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (batch, seq, dim) = (shape[0], shape[1], shape[2]);
    let w = g.constant(Tensor::new(vec![batch, 1, seq], weights)?);
    let pooled = g.matmul(w, x)?;
    g.reshape(pooled, &[batch, dim])
}

impl DualEncoderModel {
    /// Pooled image-tower output `[batch, image_dim]`, before projection.
    pub fn image_features_graph<T: Element>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        images: &Tensor<T>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let patches = patchify(images, cfg.image_size, cfg.patch_size)?;
        let batch = patches.shape()[0];
        let n = cfg.num_patches();
        let l = &self.layout;
        let x = g.constant(patches);
        let x = linear(g, b, x, l.patch_weight, l.patch_bias)?;
        let pos = b.get(g, l.image_pos);
        let x = g.add(x, pos)?;
        let x = tower(g, b, &l.image_tower, x, None)?;
        let w = T::from_f64(1.0 / n as f64);
        pool(g, x, vec![w; batch * n])
    }

    /// Masked-mean-pooled text-tower output `[batch, text_dim]`, before projection.
    pub fn text_features_graph<T: Element>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<T>,
        tokens: &TokenBatch,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (batch, seq) = (tokens.len(), tokens.seq_len);
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Index {
                op: "encode_text",
                index: bad,
                bound: cfg.vocab_size,
            });
        }
        if let Some(&bad) = tokens.lengths.iter().find(|&&l| l > cfg.max_text_len) {
            return Err(Error::Contract(format!(
                "text length {bad} exceeds max_text_len {}",
                cfg.max_text_len
            )));
        }
        if seq > cfg.max_text_len {
            return Err(Error::dim("encode_text", &[batch, seq], &[batch, cfg.max_text_len]));
        }
        let l = &self.layout;
        let table = b.get(g, l.token_embed);
        let x = g.embedding(table, &tokens.ids)?;
        let x = g.reshape(x, &[batch, seq, cfg.text_dim])?;
        let pos_table = b.get(g, l.text_pos);
        let positions: Vec<usize> = (0..seq).collect();
        let pos = g.embedding(pos_table, &positions)?;
        let x = g.add(x, pos)?;

        let heads = l.text_tower.heads;
        let bias = T::from_f64(MASK_BIAS);
        let mut mask = Vec::with_capacity(batch * heads * seq * seq);
        let mut weights = Vec::with_capacity(batch * seq);
        for &len in &tokens.lengths {
            let row: Vec<T> = (0..seq).map(|j| if j < len { T::zero() } else { bias }).collect();
            for _ in 0..heads * seq {
                mask.extend_from_slice(&row);
            }
            let w = T::from_f64(1.0 / len as f64);
            weights.extend((0..seq).map(|j| if j < len { w } else { T::zero() }));
        }
        let mask = g.constant(Tensor::new(vec![batch, heads, seq, seq], mask)?);
        let x = tower(g, b, &l.text_tower, x, Some(mask))?;
        pool(g, x, weights)
    }

    /// Projects pooled image features and L2-normalises each row.
    pub fn project_image_graph<T: Element>(&self, g: &mut Graph<T>, b: &mut Binder<T>, features: Var) -> Result<Var> {
        let w = b.get(g, self.layout.visual_projection);
        let y = g.matmul(features, w)?;
        Ok(g.l2_normalize(y, NORMALIZE_EPS))
    }

    pub fn project_text_graph<T: Element>(&self, g: &mut Graph<T>, b: &mut Binder<T>, features: Var) -> Result<Var> {
        let w = b.get(g, self.layout.text_projection);
        let y = g.matmul(features, w)?;
        Ok(g.l2_normalize(y, NORMALIZE_EPS))
    }

    /// Scalar `min(exp(logit_scale), 100)` as a graph node.
    pub fn logit_scale_graph<T: Element>(&self, g: &mut Graph<T>, b: &mut Binder<T>) -> Var {
        let raw = b.get(g, self.layout.logit_scale);
        let e = g.exp(raw);
        g.clamp_max(e, LOGIT_SCALE_MAX)
    }

    fn infer<F>(&self, rows: usize, f: F) -> Result<Tensor>
    where
        F: Fn(&mut Graph<f32>, &mut Binder<f32>, usize, usize) -> Result<Var> + Send + Sync,
    {
        let frozen = vec![false; self.params.len()];
        let chunks = rows.div_ceil(INFER_CHUNK);
        let parts = parallel::map_indices(chunks, |c| {
            let start = c * INFER_CHUNK;
            let end = (start + INFER_CHUNK).min(rows);
            let mut g = Graph::new();
            let mut b = Binder::new(&self.params, &frozen);
            let v = f(&mut g, &mut b, start, end)?;
            Ok::<_, Error>(g.value(v).clone())
        });
        let mut width = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = p?;
            width = t.shape()[1];
            data.extend_from_slice(t.data());
        }
        Tensor::new(vec![rows, width], data)
    }

    /// Pooled image features `[batch, image_dim]` (no projection).
    pub fn image_features(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::dim("encode_image", &s, &[0, 3, self.config.image_size, self.config.image_size]));
        }
        let per = s[1] * s[2] * s[3];
        self.infer(s[0], |g, b, start, end| {
            let chunk = Tensor::new(
                vec![end - start, s[1], s[2], s[3]],
                images.data()[start * per..end * per].to_vec(),
            )?;
            self.image_features_graph(g, b, &chunk)
        })
    }

    /// Pooled text features `[batch, text_dim]` (no projection).
    pub fn text_features(&self, tokens: &TokenBatch) -> Result<Tensor> {
        self.infer(tokens.len(), |g, b, start, end| {
            self.text_features_graph(g, b, &tokens.slice(start, end))
        })
    }

    /// Unit-norm image embeddings `[batch, embed_dim]`.
    pub fn encode_image(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::dim("encode_image", &s, &[0, 3, self.config.image_size, self.config.image_size]));
        }
        let per = s[1] * s[2] * s[3];
        self.infer(s[0], |g, b, start, end| {
            let chunk = Tensor::new(
                vec![end - start, s[1], s[2], s[3]],
                images.data()[start * per..end * per].to_vec(),
            )?;
            let f = self.image_features_graph(g, b, &chunk)?;
            self.project_image_graph(g, b, f)
        })
    }

    /// Unit-norm text embeddings `[batch, embed_dim]`.
    pub fn encode_text(&self, tokens: &TokenBatch) -> Result<Tensor> {
        self.infer(tokens.len(), |g, b, start, end| {
            let f = self.text_features_graph(g, b, &tokens.slice(start, end))?;
            self.project_text_graph(g, b, f)
        })
    }

    /// Projects precomputed pooled image features.
    pub fn project_image_features(&self, features: &Tensor) -> Result<Tensor> {
        self.infer(features.shape()[0], |g, b, start, end| {
            let w = features.shape()[1];
            let f = g.constant(Tensor::new(vec![end - start, w], features.data()[start * w..end * w].to_vec())?);
            self.project_image_graph(g, b, f)
        })
    }

    pub fn project_text_features(&self, features: &Tensor) -> Result<Tensor> {
        self.infer(features.shape()[0], |g, b, start, end| {
            let w = features.shape()[1];
            let f = g.constant(Tensor::new(vec![end - start, w], features.data()[start * w..end * w].to_vec())?);
            self.project_text_graph(g, b, f)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> DualEncoderModel {
        let cfg = ModelConfig::from_presets("b-b".parse().unwrap(), 8, 4, 30, 8).unwrap();
        DualEncoderModel::new(cfg, 3).unwrap()
    }

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, 3, 8, 8], data).unwrap()
    }

    #[test]
    fn patchify_layout() {
        let data: Vec<f32> = (0..3 * 16).map(|v| v as f32).collect();
        let img = Tensor::new(vec![1, 3, 4, 4], data).unwrap();
        let p = patchify(&img, 4, 2).unwrap();
        assert_eq!(p.shape(), &[1, 4, 12]);
        // first patch, channel 0: pixels (0,0),(0,1),(1,0),(1,1)
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        // first patch, channel 1 starts at 16
        assert_eq!(&p.data()[4..8], &[16.0, 17.0, 20.0, 21.0]);
    }

    #[test]
    fn image_embeddings_shape_and_norm() {
        let m = model();
        let mut imgs = images(2, 1).into_data();
        let (a, _) = imgs.split_at_mut(3 * 64);
        let first = a.to_vec();
        imgs[3 * 64..].copy_from_slice(&first);
        let e = m.encode_image(&Tensor::new(vec![2, 3, 8, 8], imgs).unwrap()).unwrap();
        assert_eq!(e.shape(), &[2, m.config().embed_dim]);
        assert_eq!(e.row(0), e.row(1));
        for i in 0..2 {
            let n: f32 = e.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn wrong_image_size_is_dimension_error() {
        let m = model();
        let bad = Tensor::zeros(vec![1, 3, 6, 6]);
        assert!(matches!(m.encode_image(&bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn text_padding_invariance() {
        let m = model();
        let short = TokenBatch::new(&[vec![1, 7, 9, 2]], &[4]).unwrap();
        let padded = TokenBatch::new(&[vec![1, 7, 9, 2, 0, 0, 0, 0]], &[4]).unwrap();
        let a = m.encode_text(&short).unwrap();
        let b = m.encode_text(&padded).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn identical_tokens_identical_rows() {
        let m = model();
        let batch = TokenBatch::new(&[vec![1, 5, 2], vec![1, 5, 2]], &[3, 3]).unwrap();
        let e = m.encode_text(&batch).unwrap();
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn out_of_vocab_token_is_index_error() {
        let m = model();
        let batch = TokenBatch::new(&[vec![1, 30, 2]], &[3]).unwrap();
        assert!(matches!(m.encode_text(&batch), Err(Error::Index { index: 30, .. })));
    }

    #[test]
    fn embedding_rows_get_gradient_only_when_used() {
        let m = model();
        let mut g = Graph::<f64>::new();
        let params: Vec<Tensor<f64>> = m.params().iter().map(|p| p.cast()).collect();
        let mut b = Binder::new(&params, m.trainable_mask());
        let batch = TokenBatch::new(&[vec![1, 5, 6, 2], vec![1, 7, 2, 0]], &[4, 3]).unwrap();
        let f = m.text_features_graph(&mut g, &mut b, &batch).unwrap();
        let e = m.project_text_graph(&mut g, &mut b, f).unwrap();
        let w = g.constant(Tensor::from_f64_slice(vec![2, 64], &(0..128).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap());
        let p = g.mul(e, w).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        let grads = b.grads(&mut g);
        let table = grads[m.layout.token_embed].as_ref().unwrap();
        let d = m.config().text_dim;
        let row_norm = |r: usize| table[r * d..(r + 1) * d].iter().map(|v| v.abs()).sum::<f64>();
        for used in [1, 2, 5, 6, 7] {
            assert!(row_norm(used) > 0.0, "row {used}");
        }
        for unused in [3, 4, 8, 20, 29] {
            assert_eq!(row_norm(unused), 0.0, "row {unused}");
        }
    }
}
