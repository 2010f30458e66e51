//! Dense f64 tensors and a reverse-mode evaluation trace.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated. Calling
//! [`Tape::backward`] on a scalar node replays the trace in reverse and leaves
//! a gradient on every node that the loss depends on.
//!
//! Feature maps use the layout `[batch, channels, pixels]`, where `pixels`
//! is the flattened `H*W` spatial extent. Only the op kinds the encoder and
//! the losses need are provided.

use crate::error::{Error, Result};

/// Variance floor used inside every standard-deviation computation.
pub const STD_EPS: f64 = 1e-5;

/// Added under the square root of pairwise distances so the gradient of a
/// zero distance stays finite.
pub const DIST_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", values.len()),
            ));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.values.len() / self.shape[0];
        &self.values[i * w..(i + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    ChannelMix { x: Var, w: Var, b: Var },
    Relu(Var),
    GlobalAvgPool(Var),
    Dense { x: Var, w: Var, b: Var },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    SoftmaxRows(Var),
    MatMulNt { a: Var, b: Var },
    DivScalar { x: Var, s: Var },
    Scale { x: Var, c: f64 },
    Add { a: Var, b: Var },
    Sum(Var),
    Mean(Var),
    SelectRows { x: Var, rows: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    PairwiseDistance(Var),
    TripletHard { dist: Var, active: Vec<(usize, usize, usize)>, valid: usize },
    StyleJitter { x: Var, jittered: Vec<Option<JitterCache>> },
}

#[derive(Clone, Debug)]
struct JitterCache {
    /// Normalized content per channel, same layout as one sample's map.
    xhat: Vec<f64>,
    /// sqrt(var + eps) per channel.
    sigma: Vec<f64>,
    target_sigma: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Target style for one sample passing through [`Tape::style_jitter`].
#[derive(Clone, Debug, PartialEq)]
pub struct StyleTarget {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push(value, op))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    /// Per-pixel affine map mixing channels: `y[n,o,p] = sum_i w[o,i] x[n,i,p] + b[o]`.
    pub fn channel_mix(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[1] || bs[0] != ws[0] {
            return Err(Error::shape(
                "channel_mix",
                format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            ));
        }
        let (n, ci, p, co) = (xs[0], xs[1], xs[2], ws[0]);
        let (xv, wv, bv) = (self.vals(x), self.vals(w), self.vals(b));
        let mut out = vec![0.0; n * co * p];
        for s in 0..n {
            for o in 0..co {
                let dst = &mut out[(s * co + o) * p..(s * co + o + 1) * p];
                dst.fill(bv[o]);
                for i in 0..ci {
                    let wi = wv[o * ci + i];
                    let src = &xv[(s * ci + i) * p..(s * ci + i + 1) * p];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += wi * v;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, co, p], out)?;
        self.push_checked("channel_mix", t, Op::ChannelMix { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let out = Tensor::new(
            t.shape().to_vec(),
            t.values().iter().map(|&v| v.max(0.0)).collect(),
        )?;
        self.push_checked("relu", out, Op::Relu(x))
    }

    /// `[n, c, p] -> [n, c]`, averaging over pixels.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::shape("global_avg_pool", format!("x {xs:?}")));
        }
        let (n, c, p) = (xs[0], xs[1], xs[2]);
        let out: Vec<f64> = self
            .vals(x)
            .chunks(p)
            .map(|ch| ch.iter().sum::<f64>() / p as f64)
            .collect();
        let t = Tensor::new(vec![n, c], out)?;
        self.push_checked("global_avg_pool", t, Op::GlobalAvgPool(x))
    }

    /// `y = x w^T + b` for `x: [n, di]`, `w: [do, di]`, `b: [do]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[1] || bs[0] != ws[0] {
            return Err(Error::shape("dense", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, di, dout) = (xs[0], xs[1], ws[0]);
        let (xv, wv, bv) = (self.vals(x), self.vals(w), self.vals(b));
        let mut out = vec![0.0; n * dout];
        for s in 0..n {
            let xr = &xv[s * di..(s + 1) * di];
            for o in 0..dout {
                let wr = &wv[o * di..(o + 1) * di];
                out[s * dout + o] = bv[o] + dot(xr, wr);
            }
        }
        let t = Tensor::new(vec![n, dout], out)?;
        self.push_checked("dense", t, Op::Dense { x, w, b })
    }

    /// Divides every row of a 2-D tensor by its Euclidean norm. Zero rows are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("l2_normalize_rows", format!("x {xs:?}")));
        }
        let d = xs[1];
        let xv = self.vals(x);
        let mut norms = Vec::with_capacity(xs[0]);
        let mut out = Vec::with_capacity(xv.len());
        for (i, row) in xv.chunks(d).enumerate() {
            let nrm = dot(row, row).sqrt();
            if nrm == 0.0 {
                return Err(Error::invalid(format!(
                    "l2_normalize_rows: row {i} has zero norm"
                )));
            }
            norms.push(nrm);
            out.extend(row.iter().map(|v| v / nrm));
        }
        let t = Tensor::new(xs, out)?;
        self.push_checked("l2_normalize_rows", t, Op::L2NormalizeRows { x, norms })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("softmax_rows", format!("x {xs:?}")));
        }
        let out: Vec<f64> = self.vals(x).chunks(xs[1]).flat_map(softmax).collect();
        let t = Tensor::new(xs, out)?;
        self.push_checked("softmax_rows", t, Op::SoftmaxRows(x))
    }

    /// `a b^T` for `a: [n, d]`, `b: [m, d]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(Error::shape("matmul_nt", format!("a {as_:?}, b {bs:?}")));
        }
        let (n, m, d) = (as_[0], bs[0], as_[1]);
        let (av, bv) = (self.vals(a), self.vals(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = dot(&av[i * d..(i + 1) * d], &bv[j * d..(j + 1) * d]);
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push_checked("matmul_nt", t, Op::MatMulNt { a, b })
    }

    /// Divides every entry of `x` by the one-element tensor `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.nodes[s.0].value.is_scalar() {
            return Err(Error::shape(
                "div_scalar",
                format!("divisor shape {:?}", self.shape(s)),
            ));
        }
        let sv = self.vals(s)[0];
        let xt = &self.nodes[x.0].value;
        let t = Tensor::new(
            xt.shape().to_vec(),
            xt.values().iter().map(|v| v / sv).collect(),
        )?;
        self.push_checked("div_scalar", t, Op::DivScalar { x, s })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xt = &self.nodes[x.0].value;
        let t = Tensor::new(
            xt.shape().to_vec(),
            xt.values().iter().map(|v| v * c).collect(),
        )?;
        self.push_checked("scale", t, Op::Scale { x, c })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("a {:?}, b {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push_checked("add", t, Op::Add { a, b })
    }

    /// `sum_i c_i x_i` over same-shaped inputs.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, c0)) = terms.first() else {
            return Err(Error::shape("lincomb", "no terms"));
        };
        let mut acc = self.scale(first, c0)?;
        for &(v, c) in &terms[1..] {
            let s = self.scale(v, c)?;
            acc = self.add(acc, s)?;
        }
        Ok(acc)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.vals(x).iter().sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.vals(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(x))
    }

    /// Gathers rows (first-axis slices) of `x`; rows may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if rows.is_empty() || rows.iter().any(|&r| r >= xs[0]) {
            return Err(Error::shape(
                "select_rows",
                format!("rows {rows:?} out of range for {xs:?}"),
            ));
        }
        let w: usize = xs[1..].iter().product();
        let xv = self.vals(x);
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            out.extend_from_slice(&xv[r * w..(r + 1) * w]);
        }
        let mut shape = xs;
        shape[0] = rows.len();
        let t = Tensor::new(shape, out)?;
        self.push_checked(
            "select_rows",
            t,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Mean over rows of `-log softmax(logits_i)[label_i]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || labels.iter().any(|&y| y >= ls[1]) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {ls:?}, {} labels (max class {})", labels.len(), ls.get(1).copied().unwrap_or(0)),
            ));
        }
        let c = ls[1];
        let mut probs = Vec::with_capacity(ls[0] * c);
        let mut total = 0.0;
        for (row, &y) in self.vals(logits).chunks(c).zip(labels) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let t = Tensor::scalar(total / ls[0] as f64);
        self.push_checked(
            "softmax_cross_entropy",
            t,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Euclidean distance matrix between the rows of `x: [n, d]`.
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("pairwise_distance", format!("x {xs:?}")));
        }
        let (n, d) = (xs[0], xs[1]);
        let xv = self.vals(x);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let sq: f64 = xv[i * d..(i + 1) * d]
                    .iter()
                    .zip(&xv[j * d..(j + 1) * d])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                out[i * n + j] = (sq + DIST_EPS).sqrt();
            }
        }
        let t = Tensor::new(vec![n, n], out)?;
        self.push_checked("pairwise_distance", t, Op::PairwiseDistance(x))
    }

    /// Batch-hard triplet hinge over a distance matrix.
    ///
    /// For each anchor the farthest same-label sample (excluding itself) and
    /// the nearest different-label sample are selected; ties go to the lower
    /// index. Anchors lacking either are skipped. The result is the mean of
    /// `max(0, d_pos - d_neg + margin)` over the remaining anchors.
    pub fn triplet_hard(&mut self, dist: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let ds = self.shape(dist).to_vec();
        if ds.len() != 2 || ds[0] != ds[1] || ds[0] != labels.len() {
            return Err(Error::shape(
                "triplet_hard",
                format!("dist {ds:?}, {} labels", labels.len()),
            ));
        }
        let n = ds[0];
        let dv = self.vals(dist);
        let mut total = 0.0;
        let mut valid = 0;
        let mut active = Vec::new();
        for a in 0..n {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                let d = dv[a * n + j];
                if labels[j] == labels[a] {
                    if j != a && pos.is_none_or(|p| d > dv[a * n + p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|q| d < dv[a * n + q]) {
                    neg = Some(j);
                }
            }
            if let (Some(p), Some(q)) = (pos, neg) {
                valid += 1;
                let h = dv[a * n + p] - dv[a * n + q] + margin;
                if h > 0.0 {
                    total += h;
                    active.push((a, p, q));
                }
            }
        }
        if valid == 0 {
            return Err(Error::invalid(
                "triplet_hard: no anchor has both a positive and a negative",
            ));
        }
        let t = Tensor::scalar(total / valid as f64);
        self.push_checked(
            "triplet_hard",
            t,
            Op::TripletHard {
                dist,
                active,
                valid,
            },
        )
    }

    /// Replaces the per-channel style statistics of selected samples of a
    /// `[n, c, p]` map: `y = sigma_t * (x - mu(x)) / sigma(x) + mu_t`.
    ///
    /// `targets[s] == None` passes sample `s` through unchanged. Targets are
    /// constants; gradients flow through `mu(x)` and `sigma(x)`.
    pub fn style_jitter(&mut self, x: Var, targets: &[Option<StyleTarget>]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || targets.len() != xs[0] {
            return Err(Error::shape(
                "style_jitter",
                format!("x {xs:?}, {} targets", targets.len()),
            ));
        }
        let (c, p) = (xs[1], xs[2]);
        let xv = self.vals(x);
        let mut out = xv.to_vec();
        let mut caches = Vec::with_capacity(xs[0]);
        for (s, tgt) in targets.iter().enumerate() {
            let Some(tgt) = tgt else {
                caches.push(None);
                continue;
            };
            if tgt.mu.len() != c || tgt.sigma.len() != c {
                return Err(Error::shape(
                    "style_jitter",
                    format!("sample {s}: target has {} / {} channels, map has {c}", tgt.mu.len(), tgt.sigma.len()),
                ));
            }
            let mut xhat = vec![0.0; c * p];
            let mut sig = vec![0.0; c];
            for ch in 0..c {
                let off = (s * c + ch) * p;
                let src = &xv[off..off + p];
                let (mu, sd) = channel_stats(src, STD_EPS);
                sig[ch] = sd;
                for k in 0..p {
                    let h = (src[k] - mu) / sd;
                    xhat[ch * p + k] = h;
                    out[off + k] = tgt.sigma[ch] * h + tgt.mu[ch];
                }
            }
            caches.push(Some(JitterCache {
                xhat,
                sigma: sig,
                target_sigma: tgt.sigma.clone(),
            }));
        }
        let t = Tensor::new(xs, out)?;
        self.push_checked(
            "style_jitter",
            t,
            Op::StyleJitter {
                x,
                jittered: caches,
            },
        )
    }

    /// Reverse pass from a scalar node. Gradients of earlier passes are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads.into_iter().chain(std::iter::repeat(None))) {
            node.value.grad = g;
        }
        for node in &self.nodes {
            if let Some(g) = &node.value.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::ChannelMix { x, w, b } => {
                let xs = self.shape(*x);
                let (n, ci, p) = (xs[0], xs[1], xs[2]);
                let co = self.shape(*w)[0];
                let (xv, wv) = (self.vals(*x), self.vals(*w));
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; co];
                for s in 0..n {
                    for o in 0..co {
                        let go = &g[(s * co + o) * p..(s * co + o + 1) * p];
                        db[o] += go.iter().sum::<f64>();
                        for i in 0..ci {
                            let xi = &xv[(s * ci + i) * p..(s * ci + i + 1) * p];
                            dw[o * ci + i] += dot(go, xi);
                            let wi = wv[o * ci + i];
                            for (d, &gv) in dx[(s * ci + i) * p..(s * ci + i + 1) * p]
                                .iter_mut()
                                .zip(go)
                            {
                                *d += wi * gv;
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
            }
            Op::Relu(x) => {
                let dx = self
                    .vals(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let p = self.shape(*x)[2];
                let dx = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / p as f64, p))
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Dense { x, w, b } => {
                let xs = self.shape(*x);
                let (n, di) = (xs[0], xs[1]);
                let dout = self.shape(*w)[0];
                let (xv, wv) = (self.vals(*x), self.vals(*w));
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; dout];
                for s in 0..n {
                    for o in 0..dout {
                        let gv = g[s * dout + o];
                        db[o] += gv;
                        for i in 0..di {
                            dw[o * di + i] += gv * xv[s * di + i];
                            dx[s * di + i] += gv * wv[o * di + i];
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
            }
            Op::L2NormalizeRows { x, norms } => {
                let d = self.shape(*x)[1];
                let y = node.value.values();
                let mut dx = vec![0.0; y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let proj = dot(yr, gr);
                    for k in 0..d {
                        dx[r * d + k] = (gr[k] - yr[k] * proj) / nrm;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let d = self.shape(*x)[1];
                let y = node.value.values();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / d {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let proj = dot(yr, gr);
                    for k in 0..d {
                        dx[r * d + k] = yr[k] * (gr[k] - proj);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::MatMulNt { a, b } => {
                let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                let (av, bv) = (self.vals(*a), self.vals(*b));
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for i in 0..n {
                    for j in 0..m {
                        let gv = g[i * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            da[i * d + k] += gv * bv[j * d + k];
                            db[j * d + k] += gv * av[i * d + k];
                        }
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::DivScalar { x, s } => {
                let sv = self.vals(*s)[0];
                let xv = self.vals(*x);
                let dx = g.iter().map(|gv| gv / sv).collect();
                let ds = -g.iter().zip(xv).map(|(gv, xv)| gv * xv).sum::<f64>() / (sv * sv);
                accumulate(grads, *x, dx);
                accumulate(grads, *s, vec![ds]);
            }
            Op::Scale { x, c } => {
                accumulate(grads, *x, g.iter().map(|gv| gv * c).collect());
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Sum(x) => {
                accumulate(grads, *x, vec![g[0]; self.vals(*x).len()]);
            }
            Op::Mean(x) => {
                let n = self.vals(*x).len();
                accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::SelectRows { x, rows } => {
                let xs = self.shape(*x);
                let w: usize = xs[1..].iter().product();
                let mut dx = vec![0.0; self.vals(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..w {
                        dx[r * w + c] += g[k * w + c];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let n = labels.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * g[0] / n).collect();
                for (r, &y) in labels.iter().enumerate() {
                    dx[r * c + y] -= g[0] / n;
                }
                accumulate(grads, *logits, dx);
            }
            Op::PairwiseDistance(x) => {
                let xs = self.shape(*x);
                let (n, d) = (xs[0], xs[1]);
                let xv = self.vals(*x);
                let dist = node.value.values();
                let mut dx = vec![0.0; xv.len()];
                for i in 0..n {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv == 0.0 || i == j {
                            continue;
                        }
                        let scale = gv / dist[i * n + j];
                        for k in 0..d {
                            let diff = xv[i * d + k] - xv[j * d + k];
                            dx[i * d + k] += scale * diff;
                            dx[j * d + k] -= scale * diff;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::TripletHard {
                dist,
                active,
                valid,
            } => {
                let n = self.shape(*dist)[0];
                let mut dd = vec![0.0; n * n];
                let w = g[0] / *valid as f64;
                for &(a, p, q) in active {
                    dd[a * n + p] += w;
                    dd[a * n + q] -= w;
                }
                accumulate(grads, *dist, dd);
            }
            Op::StyleJitter { x, jittered } => {
                let xs = self.shape(*x);
                let (c, p) = (xs[1], xs[2]);
                let mut dx = g.to_vec();
                for (s, cache) in jittered.iter().enumerate() {
                    let Some(cache) = cache else { continue };
                    for ch in 0..c {
                        let off = (s * c + ch) * p;
                        let xhat = &cache.xhat[ch * p..(ch + 1) * p];
                        let gh: Vec<f64> = g[off..off + p]
                            .iter()
                            .map(|gv| gv * cache.target_sigma[ch])
                            .collect();
                        let mean_g = gh.iter().sum::<f64>() / p as f64;
                        let mean_gx = dot(&gh, xhat) / p as f64;
                        for k in 0..p {
                            dx[off + k] = (gh[k] - mean_g - xhat[k] * mean_gx) / cache.sigma[ch];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean and `sqrt(biased variance + eps)` of one channel.
pub fn channel_stats(values: &[f64], eps: f64) -> (f64, f64) {
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, (var + eps).sqrt())
}
