use super::kernels;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Gelu { x: Var },
    Exp { x: Var },
    ClampMax { x: Var, max: T },
    Embedding { table: Var, ids: Vec<usize> },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Sum { x: Var },
    Mean { x: Var },
    Softmax { x: Var },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    L2Normalize { x: Var, norms: Vec<T>, eps: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Exp { .. } => "exp",
            Op::ClampMax { .. } => "clamp_max",
            Op::Embedding { .. } => "embedding",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "softmax_cross_entropy",
            Op::L2Normalize { .. } => "l2_normalize",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { x, .. }
            | Op::Gelu { x }
            | Op::Exp { x }
            | Op::ClampMax { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Softmax { x }
            | Op::L2Normalize { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Append-only computation graph. Nodes are stored in creation order, which
/// is a topological order by construction.
#[derive(Debug)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    // ---- forward ops -------------------------------------------------------

    /// Batched matrix product `a[.., m, k] · b[.., k, n]`. `b` may be rank 2,
    /// in which case it is shared across all leading batch dimensions of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batches, m, k, n, shared) = matmul_dims(&sa, &sb)?;
        let out = kernels::batched_gemm(
            self.value(a).data(),
            batches,
            m,
            k,
            self.value(b).data(),
            shared,
            n,
        );
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }))
    }

    /// Elementwise `a + b`; `b` broadcasts over leading axes of `a` when its
    /// shape is a suffix of `a`'s, or everywhere when it has one element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = check_broadcast("add", self.shape(a), self.shape(b))?;
        let bd = self.value(b).data();
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }))
    }

    /// Elementwise `a * b` with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = check_broadcast("mul", self.shape(a), self.shape(b))?;
        let bd = self.value(b).data();
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::from_f64(factor);
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * factor).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::Scale { x, factor })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&e| half * e * (T::one() + (c * (e + a * e * e * e)).tanh()))
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::Gelu { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|e| e.exp()).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::Exp { x })
    }

    /// `min(x, max)`; the gradient is zero where the clamp is active.
    pub fn clamp_max(&mut self, x: Var, max: f64) -> Var {
        let max = T::from_f64(max);
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e.min(max)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::ClampMax { x, max })
    }

    /// Gathers rows of `table[v, d]`, producing `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::dim("embedding", &st, &[ids.len()]));
        }
        let (rows, d) = (st[0], st[1]);
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(Error::dim("reshape", v.shape(), shape));
        }
        let t = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::dim("permute", &shape, axes));
        }
        let data = kernels::permute(self.value(x).data(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::dim("transpose", self.shape(x), &[2]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_f64(v.numel() as f64);
        let s = v.data().iter().fold(T::zero(), |acc, &e| acc + e);
        self.push(Tensor::scalar(s / n), Op::Mean { x })
    }

    /// Softmax along the last axis, stabilised by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = *v.shape().last().unwrap_or(&1);
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::Softmax { x })
    }

    /// Normalises each last-axis row to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::dim("layer_norm", &sx, &[]))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::dim("layer_norm", &sx, self.shape(p)));
            }
        }
        let eps = T::from_f64(eps);
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let rows = xd.len() / d;
        let dn = T::from_f64(d as f64);
        let mut out = Vec::with_capacity(xd.len());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in xd.chunks(d) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / dn;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                out.push((row[j] - mean) * rstd * gd[j] + bd[j]);
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::new(sx, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::dim("softmax_cross_entropy", &s, &[targets.len()]));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                op: "softmax_cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let shifted_target = row[t] - max;
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            total += z.ln() - shifted_target;
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let loss = total / T::from_f64(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Divides each last-axis row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let eps = T::from_f64(eps);
        let v = self.value(x);
        let d = *v.shape().last().unwrap_or(&1);
        let mut data = v.data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / d.max(1));
        for row in data.chunks_mut(d.max(1)) {
            let norm = row.iter().fold(T::zero(), |a, &e| a + e * e).sqrt();
            let denom = norm.max(eps);
            row.iter_mut().for_each(|e| *e = *e / denom);
            norms.push(norm);
        }
        let t = Tensor::new(v.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::L2Normalize { x, norms, eps })
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients of every node reachable from the scalar `root`.
    /// Gradients from previous calls are cleared first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "backward root {} is not in the graph",
                root.0
            )));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (input, grad) in contributions {
                let node = &mut self.nodes[input.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (batches, m, k, n, shared) = matmul_dims(sa, sb).expect("validated in forward");
                if self.wants(*a) {
                    let bt_batches = if shared { 1 } else { batches };
                    let bt = kernels::transpose_batched(self.value(*b).data(), bt_batches, k, n);
                    let da = kernels::batched_gemm(g, batches, m, n, &bt, shared, k);
                    res.push((*a, da));
                }
                if self.wants(*b) {
                    let ad = self.value(*a).data();
                    let db = if shared {
                        let at = kernels::transpose_batched(ad, 1, batches * m, k);
                        kernels::batched_gemm(&at, 1, k, batches * m, g, true, n)
                    } else {
                        let at = kernels::transpose_batched(ad, batches, m, k);
                        kernels::batched_gemm(&at, batches, k, m, g, false, n)
                    };
                    res.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    res.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    let nb = self.value(*b).numel();
                    let mut db = vec![T::zero(); nb];
                    for (j, &gv) in g.iter().enumerate() {
                        db[j % nb] += gv;
                    }
                    res.push((*b, db));
                }
            }
            Op::Mul { a, b } => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let nb = bd.len();
                if self.wants(*a) {
                    let da = g.iter().enumerate().map(|(j, &gv)| gv * bd[j % nb]).collect();
                    res.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); nb];
                    for (j, &gv) in g.iter().enumerate() {
                        db[j % nb] += gv * ad[j];
                    }
                    res.push((*b, db));
                }
            }
            Op::Scale { x, factor } => {
                res.push((*x, g.iter().map(|&gv| gv * *factor).collect()));
            }
            Op::Gelu { x } => {
                let c = T::from_f64(GELU_C);
                let a = T::from_f64(GELU_A);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let xd = self.value(*x).data();
                let dx = xd
                    .iter()
                    .zip(g)
                    .map(|(&e, &gv)| {
                        let t = (c * (e + a * e * e * e)).tanh();
                        let du = c * (T::one() + three * a * e * e);
                        gv * (half * (T::one() + t) + half * e * (T::one() - t * t) * du)
                    })
                    .collect();
                res.push((*x, dx));
            }
            Op::Exp { x } => {
                res.push((*x, g.iter().zip(out).map(|(&gv, &y)| gv * y).collect()));
            }
            Op::ClampMax { x, max } => {
                let xd = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &e)| if e < *max { gv } else { T::zero() })
                    .collect();
                res.push((*x, dx));
            }
            Op::Embedding { table, ids } => {
                let st = self.shape(*table);
                let d = st[1];
                let mut dt = vec![T::zero(); st[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, &b)| *a += b);
                }
                res.push((*table, dt));
            }
            Op::Reshape { x } => res.push((*x, g.to_vec())),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                res.push((*x, kernels::permute(g, node.value.shape(), &inverse)));
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                res.push((*x, vec![g[0]; n]));
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                let v = g[0] / T::from_f64(n as f64);
                res.push((*x, vec![v; n]));
            }
            Op::Softmax { x } => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                    let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&gv, &y)| a + gv * y);
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                res.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xd = self.value(*x).data();
                let gd = self.value(*gain).data();
                let d = gd.len();
                let dn = T::from_f64(d as f64);
                let mut dx = vec![T::zero(); xd.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..mean.len() {
                    let xr = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean[r]) * rstd[r];
                        dxhat[j] = gr[j] * gd[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    let m1 = sum_dxhat / dn;
                    let m2 = sum_dxhat_xhat / dn;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.wants(*x) {
                    res.push((*x, dx));
                }
                if self.wants(*gain) {
                    res.push((*gain, dgain));
                }
                if self.wants(*bias) {
                    res.push((*bias, dbias));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / T::from_f64(targets.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * c + t] = dl[r * c + t] - scale;
                }
                res.push((*logits, dl));
            }
            Op::L2Normalize { x, norms, eps } => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); g.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &out[r * d..(r + 1) * d];
                    let dr = &mut dx[r * d..(r + 1) * d];
                    if norm > *eps {
                        let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&gv, &y)| a + gv * y);
                        for j in 0..d {
                            dr[j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..d {
                            dr[j] = gr[j] / *eps;
                        }
                    }
                }
                res.push((*x, dx));
            }
        }
        res.retain(|(v, _)| self.wants(*v));
        res
    }
}

fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

fn check_broadcast(op: &'static str, sa: &[usize], sb: &[usize]) -> Result<usize> {
    let nb: usize = sb.iter().product();
    let suffix = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
    if suffix || nb == 1 {
        Ok(nb)
    } else {
        Err(Error::dim(op, sa, sb))
    }
}

/// Returns `(batches, m, k, n, b_shared)`.
fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(Error::dim("matmul", sa, sb));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(Error::dim("matmul", sa, sb));
    }
    let batch_a = &sa[..sa.len() - 2];
    let batch_b = &sb[..sb.len() - 2];
    let shared = batch_b.is_empty();
    if !shared && batch_a != batch_b {
        return Err(Error::dim("matmul", sa, sb));
    }
    Ok((batch_a.iter().product(), m, k, n, shared))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 5]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![3], vec![5.0, 5.0, 5.0]).unwrap());
        let gain = g.constant(Tensor::filled(vec![3], 1.0));
        let bias = g.constant(Tensor::zeros(vec![3]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_centres() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let gain = g.constant(Tensor::filled(vec![3], 1.0));
        let bias = g.constant(Tensor::zeros(vec![3]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let mean: f32 = g.value(y).data().iter().sum::<f32>() / 3.0;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn layer_norm_rejects_bad_gain_and_eps() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![2, 3]));
        let gain = g.constant(Tensor::zeros(vec![4]));
        let bias = g.constant(Tensor::zeros(vec![3]));
        assert!(matches!(
            g.layer_norm(x, gain, bias, 1e-5),
            Err(Error::Dimension { .. })
        ));
        let gain = g.constant(Tensor::zeros(vec![3]));
        assert!(matches!(
            g.layer_norm(x, gain, bias, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(vec![4, 4]));
        let l = g.softmax_cross_entropy(z, &[0, 1, 2, 3]).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);

        let mut diag = vec![0.0; 16];
        for i in 0..4 {
            diag[i * 5] = 50.0;
        }
        let z = g.constant(t(&[4, 4], &diag));
        let l = g.softmax_cross_entropy(z, &[0, 1, 2, 3]).unwrap();
        assert!(g.value(l).data()[0] < 1e-6);

        let z = g.constant(t(&[2, 2], &[2.0, 0.0, 0.0, 2.0]));
        let l = g.softmax_cross_entropy(z, &[0, 1]).unwrap();
        let expected = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
        assert!((expected - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            g.softmax_cross_entropy(z, &[0, 2]),
            Err(Error::Index { index: 2, .. })
        ));
    }

    #[test]
    fn backward_identity_and_square() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[], &[3.0]));
        let y = g.reshape(x, &[]).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn topological_order_holds() {
        let mut g = Graph::<f32>::new();
        let a = g.param(Tensor::filled(vec![2, 2], 0.5));
        let b = g.matmul(a, a).unwrap();
        let c = g.gelu(b);
        let d = g.add(c, a).unwrap();
        let _ = g.mean(d);
        for i in 0..g.len() {
            for input in g.inputs(Var(i)) {
                assert!(input.index() < i);
            }
        }
    }
}
