//! A small tape-based reverse-mode differentiation engine.
//!
//! Activations are row-major matrices (`rows = tokens or examples`). Every op
//! records what its backward pass needs; [`Tape::backward`] walks the tape in
//! reverse and returns gradients for the parameter leaves only.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Tensor = ArrayD<f64>;

/// Which parameter collection a leaf belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    StressHead,
    EmotionHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [
        ParamGroup::Encoder,
        ParamGroup::StressHead,
        ParamGroup::EmotionHead,
    ];

    pub fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub group: ParamGroup,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

struct AttentionSaved {
    probs: Vec<Array2<f64>>,
    drop: Option<Vec<Array2<f64>>>,
}

enum Op {
    Constant,
    Param(ParamKey),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Gelu(NodeId),
    Tanh(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Array2<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        saved: AttentionSaved,
    },
    SoftmaxNll {
        logits: NodeId,
        probs: Array2<f64>,
        targets: Vec<usize>,
    },
    SigmoidBce {
        logits: NodeId,
        sig: Array2<f64>,
        targets: Array2<f64>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Dropout randomness plus the train/eval switch for one forward pass.
pub struct ForwardCtx<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self { rng: Some(rng) }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted-dropout keep mask, already scaled by `1/(1-p)`.
    fn dropout_mask(&mut self, rows: usize, cols: usize, p: f64) -> Option<Array2<f64>> {
        let rng = self.rng.as_deref_mut()?;
        if p <= 0.0 {
            return None;
        }
        if p >= 1.0 {
            return Some(Array2::zeros((rows, cols)));
        }
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        Some(Array2::from_shape_fn((rows, cols), |_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                0.0
            }
        }))
    }
}

/// Gradients of a scalar with respect to the parameter leaves of a tape.
#[derive(Debug, Default)]
pub struct Gradients {
    by_group: [Vec<Option<Tensor>>; 3],
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        self.by_group[key.group.slot()]
            .get(key.index)
            .and_then(Option::as_ref)
    }

    pub fn group(&self, group: ParamGroup) -> &[Option<Tensor>] {
        &self.by_group[group.slot()]
    }

    fn accumulate(&mut self, key: ParamKey, g: Tensor) {
        let slot = &mut self.by_group[key.group.slot()];
        if slot.len() <= key.index {
            slot.resize(key.index + 1, None);
        }
        match &mut slot[key.index] {
            Some(acc) => *acc += &g,
            empty => *empty = Some(g),
        }
    }

    /// Largest absolute entry over a group, 0 when nothing reached it.
    pub fn max_abs(&self, group: ParamGroup) -> f64 {
        self.group(group)
            .iter()
            .flatten()
            .flat_map(|t| t.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("2-d activation")
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn value2(&self, id: NodeId) -> ArrayView2<'_, f64> {
        as2(self.value(id))
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        *self.value(id).iter().next().expect("scalar node")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, key: ParamKey, value: &Arc<Tensor>) -> NodeId {
        self.nodes.push(Node {
            value: Arc::clone(value),
            op: Op::Param(key),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = va + vb;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out = self.value(x) * factor;
        self.push(out, Op::Scale(x, factor))
    }

    /// `x · wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xv = self.value2(x);
        let wv = self.value2(w);
        if xv.ncols() != wv.ncols() {
            return Err(Error::Shape(format!(
                "linear: input width {} but weight expects {}",
                xv.ncols(),
                wv.ncols()
            )));
        }
        let mut out = xv.dot(&wv.t());
        if let Some(b) = b {
            let bv = self
                .value(b)
                .view()
                .into_dimensionality::<Ix1>()
                .map_err(|e| Error::Shape(format!("linear bias: {e}")))?;
            if bv.len() != out.ncols() {
                return Err(Error::Shape(format!(
                    "linear: bias width {} vs output width {}",
                    bv.len(),
                    out.ncols()
                )));
            }
            out += &bv;
        }
        Ok(self.push(out.into_dyn(), Op::Linear { x, w, b }))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self
            .value(x)
            .mapv(|v| 0.5 * v * (1.0 + erf(v * INV_SQRT_2)));
        self.push(out, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).mapv(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    /// Row-wise layer normalization.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value2(x);
        let g = self.value(gamma).view().into_dimensionality::<Ix1>();
        let b = self.value(beta).view().into_dimensionality::<Ix1>();
        let (g, b) = match (g, b) {
            (Ok(g), Ok(b)) if g.len() == xv.ncols() && b.len() == xv.ncols() => (g, b),
            _ => return Err(Error::Shape("layer_norm: affine width mismatch".into())),
        };
        let n = xv.ncols() as f64;
        let mut xhat = Array2::zeros(xv.raw_dim());
        let mut inv_std = Array1::zeros(xv.nrows());
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            xhat.row_mut(r)
                .iter_mut()
                .zip(row.iter())
                .for_each(|(o, v)| *o = (v - mean) * is);
        }
        let out = &xhat * &g + &b;
        Ok(self.push(
            out.into_dyn(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout; identity in eval mode or at `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64, ctx: &mut ForwardCtx<'_>) -> NodeId {
        let (r, c) = self.value2(x).dim();
        match ctx.dropout_mask(r, c, p) {
            None => x,
            Some(mask) => {
                let out = &self.value2(x) * &mask;
                self.push(out.into_dyn(), Op::Dropout { x, mask })
            }
        }
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value2(table);
        let mut out = Array2::zeros((ids.len(), tv.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            if id >= tv.nrows() {
                return Err(Error::Shape(format!(
                    "embedding id {id} outside table of {} rows",
                    tv.nrows()
                )));
            }
            out.row_mut(r).assign(&tv.row(id));
        }
        Ok(self.push(
            out.into_dyn(),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let xv = self.value2(x);
        let out = xv.select(Axis(0), rows);
        self.push(
            out.into_dyn(),
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Multi-head scaled dot-product self-attention over `batch` sequences of
    /// `seq` rows each. `key_mask[b * seq + t]` is false for padding; padded
    /// keys receive exactly zero weight.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        key_mask: &[bool],
        p_drop: f64,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value2(q), self.value2(k), self.value2(v));
        let width = qv.ncols();
        if qv.nrows() != batch * seq || key_mask.len() != batch * seq || width % heads != 0 {
            return Err(Error::Shape(format!(
                "attention: {} rows for batch {batch} x seq {seq}, width {width}, heads {heads}",
                qv.nrows()
            )));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((batch * seq, width));
        let mut probs = Vec::with_capacity(batch * heads);
        let mut drops = Vec::new();
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            let mask = &key_mask[rows.clone()];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![rows.clone(), cols.clone()]);
                let ks = kv.slice(s![rows.clone(), cols.clone()]);
                let vs = vv.slice(s![rows.clone(), cols.clone()]);
                let mut p = qs.dot(&ks.t());
                for mut row in p.outer_iter_mut() {
                    let mut max = f64::NEG_INFINITY;
                    for (j, x) in row.iter_mut().enumerate() {
                        *x *= scale;
                        if mask[j] {
                            max = max.max(*x);
                        }
                    }
                    let mut sum = 0.0;
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = if mask[j] { (*x - max).exp() } else { 0.0 };
                        sum += *x;
                    }
                    if sum > 0.0 {
                        row.mapv_inplace(|x| x / sum);
                    }
                }
                let ctx_bh = match ctx.dropout_mask(seq, seq, p_drop) {
                    Some(dm) => {
                        let pd = &p * &dm;
                        drops.push(dm);
                        pd.dot(&vs)
                    }
                    None => p.dot(&vs),
                };
                out.slice_mut(s![rows.clone(), cols]).assign(&ctx_bh);
                probs.push(p);
            }
        }
        let drop = if drops.is_empty() { None } else { Some(drops) };
        Ok(self.push(
            out.into_dyn(),
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                saved: AttentionSaved { probs, drop },
            },
        ))
    }

    /// Batch-mean negative log-likelihood of softmax-normalized logits.
    pub fn softmax_nll(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value2(logits);
        if lv.nrows() != targets.len() || lv.nrows() == 0 {
            return Err(Error::Shape(format!(
                "nll: {} logit rows vs {} targets",
                lv.nrows(),
                targets.len()
            )));
        }
        if lv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stress logits".into()));
        }
        let mut probs = Array2::zeros(lv.raw_dim());
        let mut total = 0.0;
        for (r, row) in lv.outer_iter().enumerate() {
            let t = targets[r];
            if t >= row.len() {
                return Err(Error::Shape(format!("nll target {t} out of range")));
            }
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            probs
                .row_mut(r)
                .iter_mut()
                .zip(row.iter())
                .for_each(|(p, v)| *p = (v - lse).exp());
        }
        let loss = total / targets.len() as f64;
        Ok(self.push(
            ArrayD::from_elem(vec![1, 1], loss),
            Op::SoftmaxNll {
                logits,
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean over all entries of independent sigmoid binary cross-entropies.
    pub fn sigmoid_bce(&mut self, logits: NodeId, targets: Array2<f64>) -> Result<NodeId> {
        let lv = self.value2(logits);
        if lv.dim() != targets.dim() || lv.is_empty() {
            return Err(Error::Shape(format!(
                "bce: logits {:?} vs targets {:?}",
                lv.dim(),
                targets.dim()
            )));
        }
        if lv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("emotion logits".into()));
        }
        let mut total = 0.0;
        Zip::from(&lv).and(&targets).for_each(|&z, &y| {
            // max(z,0) - z*y + ln(1 + e^{-|z|})
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        });
        let sig = lv.mapv(sigmoid);
        let loss = total / lv.len() as f64;
        Ok(self.push(
            ArrayD::from_elem(vec![1, 1], loss),
            Op::SigmoidBce {
                logits,
                sig,
                targets,
            },
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape("backward needs a scalar root".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), 1.0));
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(a) => *a += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(key) => out.accumulate(*key, g),
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Scale(x, f) => acc(&mut grads, *x, g * *f),
                Op::Linear { x, w, b } => {
                    let g2 = as2(&g);
                    let xv = self.value2(*x);
                    let wv = self.value2(*w);
                    if let Some(b) = b {
                        acc(&mut grads, *b, g2.sum_axis(Axis(0)).into_dyn());
                    }
                    acc(&mut grads, *w, g2.t().dot(&xv).into_dyn());
                    acc(&mut grads, *x, g2.dot(&wv).into_dyn());
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut d = xv.mapv(|v| {
                        0.5 * (1.0 + erf(v * INV_SQRT_2)) + v * INV_SQRT_2PI * (-0.5 * v * v).exp()
                    });
                    d *= &g;
                    acc(&mut grads, *x, d);
                }
                Op::Tanh(x) => {
                    let mut d = node.value.mapv(|y| 1.0 - y * y);
                    d *= &g;
                    acc(&mut grads, *x, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let g2 = as2(&g);
                    let gam = self
                        .value(*gamma)
                        .view()
                        .into_dimensionality::<Ix1>()
                        .expect("1-d gamma");
                    acc(&mut grads, *beta, g2.sum_axis(Axis(0)).into_dyn());
                    acc(&mut grads, *gamma, (&g2 * xhat).sum_axis(Axis(0)).into_dyn());
                    let n = xhat.ncols() as f64;
                    let dxhat = &g2 * &gam;
                    let mut dx = Array2::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let m1 = dh.sum() / n;
                        let m2 = dh.dot(&xh) / n;
                        let is = inv_std[r];
                        dx.row_mut(r)
                            .iter_mut()
                            .zip(dh.iter().zip(xh.iter()))
                            .for_each(|(o, (d, xh))| *o = is * (d - m1 - xh * m2));
                    }
                    acc(&mut grads, *x, dx.into_dyn());
                }
                Op::Dropout { x, mask } => {
                    let d = &as2(&g) * mask;
                    acc(&mut grads, *x, d.into_dyn());
                }
                Op::Embedding { table, ids } => {
                    let tv = self.value2(*table);
                    let g2 = as2(&g);
                    let mut d = Array2::zeros(tv.raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = d.row_mut(id);
                        row += &g2.row(r);
                    }
                    acc(&mut grads, *table, d.into_dyn());
                }
                Op::SelectRows { x, rows } => {
                    let xv = self.value2(*x);
                    let g2 = as2(&g);
                    let mut d = Array2::zeros(xv.raw_dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g2.row(r);
                    }
                    acc(&mut grads, *x, d.into_dyn());
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    heads,
                    saved,
                } => {
                    let (qv, kv, vv) = (self.value2(*q), self.value2(*k), self.value2(*v));
                    let g2 = as2(&g);
                    let width = qv.ncols();
                    let dh = width / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros(qv.raw_dim());
                    let mut dk = Array2::zeros(kv.raw_dim());
                    let mut dv = Array2::zeros(vv.raw_dim());
                    for b in 0..*batch {
                        let rows = b * seq..(b + 1) * seq;
                        for h in 0..*heads {
                            let idx = b * heads + h;
                            let cols = h * dh..(h + 1) * dh;
                            let p = &saved.probs[idx];
                            let go = g2.slice(s![rows.clone(), cols.clone()]);
                            let qs = qv.slice(s![rows.clone(), cols.clone()]);
                            let ks = kv.slice(s![rows.clone(), cols.clone()]);
                            let vs = vv.slice(s![rows.clone(), cols.clone()]);
                            let (pd, mut dp) = match &saved.drop {
                                Some(dm) => {
                                    let dm = &dm[idx];
                                    let dp = go.dot(&vs.t()) * dm;
                                    (p * dm, dp)
                                }
                                None => (p.clone(), go.dot(&vs.t())),
                            };
                            dv.slice_mut(s![rows.clone(), cols.clone()])
                                .assign(&pd.t().dot(&go));
                            // softmax Jacobian: dS = P * (dP - rowsum(dP * P))
                            for (mut drow, prow) in dp.outer_iter_mut().zip(p.outer_iter()) {
                                let dot = drow.dot(&prow);
                                drow.iter_mut()
                                    .zip(prow.iter())
                                    .for_each(|(d, &pp)| *d = pp * (*d - dot) * scale);
                            }
                            dq.slice_mut(s![rows.clone(), cols.clone()])
                                .assign(&dp.dot(&ks));
                            dk.slice_mut(s![rows.clone(), cols.clone()])
                                .assign(&dp.t().dot(&qs));
                        }
                    }
                    acc(&mut grads, *v, dv.into_dyn());
                    acc(&mut grads, *k, dk.into_dyn());
                    acc(&mut grads, *q, dq.into_dyn());
                }
                Op::SoftmaxNll {
                    logits,
                    probs,
                    targets,
                } => {
                    let upstream = g.iter().next().copied().unwrap_or(0.0);
                    let n = targets.len() as f64;
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        d[[r, t]] -= 1.0;
                    }
                    d *= upstream / n;
                    acc(&mut grads, *logits, d.into_dyn());
                }
                Op::SigmoidBce {
                    logits,
                    sig,
                    targets,
                } => {
                    let upstream = g.iter().next().copied().unwrap_or(0.0);
                    let n = sig.len() as f64;
                    let d = (sig - targets) * (upstream / n);
                    acc(&mut grads, *logits, d.into_dyn());
                }
            }
        }
        Ok(out)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::SeedableRng;

    fn key(i: usize) -> ParamKey {
        ParamKey {
            group: ParamGroup::Encoder,
            index: i,
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks every parameter entry of `build` against central differences.
    fn check_grads(params: Vec<Tensor>, build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let arcs: Vec<_> = params.iter().cloned().map(Arc::new).collect();
        let mut tape = Tape::new();
        let ids: Vec<_> = arcs
            .iter()
            .enumerate()
            .map(|(i, a)| tape.param(key(i), a))
            .collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root).unwrap();
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads.get(key(pi)).cloned().unwrap_or_else(|| p.mapv(|_| 0.0));
            for (flat, _) in p.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut shifted = params.clone();
                    *shifted[pi].iter_mut().nth(flat).unwrap() += delta;
                    let arcs: Vec<_> = shifted.into_iter().map(Arc::new).collect();
                    let mut t = Tape::new();
                    let ids: Vec<_> = arcs
                        .iter()
                        .enumerate()
                        .map(|(i, a)| t.param(key(i), a))
                        .collect();
                    let r = build(&mut t, &ids);
                    t.scalar(r)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = *analytic.iter().nth(flat).unwrap();
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "param {pi}[{flat}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn linear_gelu_nll_gradients() {
        check_grads(
            vec![
                rand_tensor(&[3, 4], 1),
                rand_tensor(&[2, 4], 2),
                rand_tensor(&[2], 3),
            ],
            |t, ids| {
                let h = t.gelu(ids[0]);
                let z = t.linear(h, ids[1], Some(ids[2])).unwrap();
                t.softmax_nll(z, &[0, 1, 1]).unwrap()
            },
        );
    }

    #[test]
    fn layer_norm_tanh_bce_gradients() {
        check_grads(
            vec![
                rand_tensor(&[2, 5], 4),
                rand_tensor(&[5], 5),
                rand_tensor(&[5], 6),
            ],
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
                let y = t.tanh(y);
                let targets = array![[1.0, 0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 1.0, 1.0, 1.0]];
                t.sigmoid_bce(y, targets).unwrap()
            },
        );
    }

    #[test]
    fn attention_embedding_gradients() {
        // two sequences of three tokens, second one padded at the end
        let mask = [true, true, true, true, true, false];
        check_grads(
            vec![
                rand_tensor(&[5, 4], 7),
                rand_tensor(&[4, 4], 8),
                rand_tensor(&[4, 4], 9),
                rand_tensor(&[4, 4], 10),
                rand_tensor(&[2, 4], 11),
            ],
            |t, ids| {
                let x = t.embedding(ids[0], &[0, 3, 4, 1, 2, 0]).unwrap();
                let q = t.linear(x, ids[1], None).unwrap();
                let k = t.linear(x, ids[2], None).unwrap();
                let v = t.linear(x, ids[3], None).unwrap();
                let mut ctx = ForwardCtx::eval();
                let a = t.attention(q, k, v, 2, 3, 2, &mask, 0.1, &mut ctx).unwrap();
                let r = t.add(a, x).unwrap();
                let pooled = t.select_rows(r, &[0, 3]);
                let z = t.linear(pooled, ids[4], None).unwrap();
                let z = t.scale(z, 0.7);
                t.softmax_nll(z, &[1, 0]).unwrap()
            },
        );
    }

    #[test]
    fn padded_keys_get_no_weight() {
        let x = rand_tensor(&[4, 4], 12);
        let mut t = Tape::new();
        let xs = t.constant(x.clone());
        let mut ctx = ForwardCtx::eval();
        let full = t
            .attention(xs, xs, xs, 1, 4, 2, &[true, true, false, false], 0.0, &mut ctx)
            .unwrap();
        let short = t.constant(x.slice(s![0..2, ..]).to_owned().into_dyn());
        let trimmed = t
            .attention(short, short, short, 1, 2, 2, &[true, true], 0.0, &mut ctx)
            .unwrap();
        let a = t.value2(full).slice(s![0..2, ..]).to_owned();
        let b = t.value2(trimmed).to_owned();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_is_identity_in_eval_and_masks_in_train() {
        let mut t = Tape::new();
        let x = t.constant(ArrayD::from_elem(vec![50, 20], 1.0));
        let mut ctx = ForwardCtx::eval();
        assert_eq!(t.dropout(x, 0.5, &mut ctx), x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::train(&mut rng);
        let y = t.dropout(x, 0.5, &mut ctx);
        let v = t.value(y);
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        assert!(v.iter().any(|&e| e == 0.0));
        let all = t.dropout(x, 1.0, &mut ctx);
        assert!(t.value(all).iter().all(|&e| e == 0.0));
    }

    #[test]
    fn non_finite_logits_rejected() {
        let mut t = Tape::new();
        let z = t.constant(array![[f64::NAN, 0.0]].into_dyn());
        assert!(matches!(t.softmax_nll(z, &[0]), Err(Error::NonFinite(_))));
    }
}
