//! Minimal reverse-mode automatic differentiation over `ndarray` matrices.
//!
//! Every tensor on the tape is a 2-D `f64` array; vectors are `[1, n]` rows
//! and scalars `[1, 1]`. A forward pass appends nodes in topological order,
//! so the backward sweep is a single reverse iteration over the arena. The
//! op set is exactly what the TTS transformer, the x-vector network and the
//! training losses need; nothing here is generic beyond that.
//!
//! Parameters enter a tape via [`Tape::param`], which tags the node with the
//! [`ParamId`] of its owning [`crate::nn::ParamStore`]. Frozen parameters
//! (e.g. the x-vector weights inside the cross-lingual loss) are bound with
//! [`Tape::leaf`] instead, so no gradient can structurally reach them.

use ndarray::{s, Array2};

use crate::nn::ParamId;

pub type NodeId = usize;

pub struct Tape {
    nodes: Vec<Node>,
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

enum Op {
    Leaf,
    Param(ParamId),
    /// a [m,k] @ b [k,n]
    MatMul(NodeId, NodeId),
    /// a [m,k] @ b[n,k]^T
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// a [m,n] + row [1,n] broadcast over rows
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// a + fixed matrix (positional encodings, attention masks)
    AddConst(NodeId),
    Relu(NodeId),
    /// softmax along each row
    SoftmaxRows(NodeId),
    /// select rows of a table; duplicates accumulate in backward
    GatherRows(NodeId, Vec<usize>),
    ConcatCols(NodeId, NodeId),
    /// row [1,n] -> [m,n]
    BroadcastRow(NodeId),
    SliceRows(NodeId, usize, usize),
    /// sliding context windows: [t,c] -> [t-k+1, k*c]
    Unfold(NodeId, usize),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    /// per-column mean over rows: [t,c] -> [1,c]
    MeanRows(NodeId),
    /// per-column sqrt(population variance + eps): [t,c] -> [1,c]
    StdRows(NodeId, f64),
    /// mean squared error over all entries -> [1,1]
    Mse(NodeId, NodeId),
    /// logits [1,k] vs class index -> [1,1]
    SoftmaxCrossEntropy(NodeId, usize),
    /// per-element weighted binary cross-entropy, averaged -> [1,1]
    SigmoidBceMean {
        logits: NodeId,
        targets: Array2<f64>,
        weights: Array2<f64>,
    },
    /// Euclidean distance between two equal-shape tensors -> [1,1]
    L2Dist(NodeId, NodeId),
    /// mask entries are 0 or 1/(1-p), fixed at forward time
    Dropout(NodeId, Array2<f64>),
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
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

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    /// Scalar value of a [1,1] node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.dim(), (1, 1), "node is not a scalar");
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Constant or input: receives a gradient but propagates nowhere.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Trainable parameter bound from a store.
    pub fn param(&mut self, id: ParamId, value: &Array2<f64>) -> NodeId {
        self.push(value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.nodes[a].value.dim();
        let (rb, cb) = self.nodes[b].value.dim();
        assert_eq!(ca, rb, "matmul shape mismatch: [{ra},{ca}] @ [{rb},{cb}]");
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (_, ca) = self.nodes[a].value.dim();
        let (_, cb) = self.nodes[b].value.dim();
        assert_eq!(ca, cb, "matmul_nt inner dims differ");
        let v = self.nodes[a].value.dot(&self.nodes[b].value.t());
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (_, ca) = self.nodes[a].value.dim();
        let (rr, cr) = self.nodes[row].value.dim();
        assert_eq!((rr, cr), (1, ca), "add_row expects a [1,{ca}] row");
        let v = &self.nodes[a].value + &self.nodes[row].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, m: Array2<f64>) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), m.dim());
        let v = &self.nodes[a].value + &m;
        self.push(v, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let t = &self.nodes[table].value;
        let (rows, cols) = t.dim();
        let mut v = Array2::zeros((idx.len(), cols));
        for (out, &i) in idx.iter().enumerate() {
            assert!(i < rows, "gather index {i} out of {rows} rows");
            v.row_mut(out).assign(&t.row(i));
        }
        self.push(v, Op::GatherRows(table, idx.to_vec()))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.nodes[a].value.dim();
        let (rb, cb) = self.nodes[b].value.dim();
        assert_eq!(ra, rb, "concat_cols row mismatch");
        let mut v = Array2::zeros((ra, ca + cb));
        v.slice_mut(s![.., ..ca]).assign(&self.nodes[a].value);
        v.slice_mut(s![.., ca..]).assign(&self.nodes[b].value);
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn broadcast_row(&mut self, row: NodeId, m: usize) -> NodeId {
        let (rr, cr) = self.nodes[row].value.dim();
        assert_eq!(rr, 1, "broadcast_row expects [1,n]");
        let mut v = Array2::zeros((m, cr));
        for mut r in v.rows_mut() {
            r.assign(&self.nodes[row].value.row(0));
        }
        self.push(v, Op::BroadcastRow(row))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (ra, _) = self.nodes[a].value.dim();
        assert!(start + len <= ra, "slice_rows out of range");
        let v = self.nodes[a]
            .value
            .slice(s![start..start + len, ..])
            .to_owned();
        self.push(v, Op::SliceRows(a, start, len))
    }

    /// Valid (unpadded) temporal unfold with context `k`.
    pub fn unfold(&mut self, a: NodeId, k: usize) -> NodeId {
        let (t, c) = self.nodes[a].value.dim();
        assert!(k >= 1 && t >= k, "unfold needs at least {k} rows, got {t}");
        let out_t = t - k + 1;
        let mut v = Array2::zeros((out_t, k * c));
        for ot in 0..out_t {
            for j in 0..k {
                v.slice_mut(s![ot, j * c..(j + 1) * c])
                    .assign(&self.nodes[a].value.row(ot + j));
            }
        }
        self.push(v, Op::Unfold(a, k))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x].value;
        let (t, d) = xv.dim();
        assert_eq!(self.nodes[gain].value.dim(), (1, d));
        assert_eq!(self.nodes[bias].value.dim(), (1, d));
        let mut v = Array2::zeros((t, d));
        for r in 0..t {
            let row = xv.row(r);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
            let sd = (var + eps).sqrt();
            for c in 0..d {
                v[[r, c]] = (row[c] - mean) / sd * self.nodes[gain].value[[0, c]]
                    + self.nodes[bias].value[[0, c]];
            }
        }
        self.push(v, Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let (t, c) = x.dim();
        let mut v = Array2::zeros((1, c));
        for col in 0..c {
            let mut acc = 0.0;
            for row in 0..t {
                acc += x[[row, col]];
            }
            v[[0, col]] = acc / t as f64;
        }
        self.push(v, Op::MeanRows(a))
    }

    /// Per-column standard deviation over rows with a variance floor:
    /// `sqrt(mean((x - mean)^2) + eps)`.
    pub fn std_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = &self.nodes[a].value;
        let (t, c) = x.dim();
        let mut v = Array2::zeros((1, c));
        for col in 0..c {
            let mut mean = 0.0;
            for row in 0..t {
                mean += x[[row, col]];
            }
            mean /= t as f64;
            let mut var = 0.0;
            for row in 0..t {
                let d = x[[row, col]] - mean;
                var += d * d;
            }
            var /= t as f64;
            v[[0, col]] = (var + eps).sqrt();
        }
        self.push(v, Op::StdRows(a, eps))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let diff = &self.nodes[a].value - &self.nodes[b].value;
        let n = diff.len() as f64;
        let v = Array2::from_elem((1, 1), diff.iter().map(|d| d * d).sum::<f64>() / n);
        self.push(v, Op::Mse(a, b))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> NodeId {
        let x = &self.nodes[logits].value;
        assert_eq!(x.dim().0, 1, "logits must be a [1,k] row");
        assert!(target < x.dim().1, "target class out of range");
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = x.iter().map(|e| (e - max).exp()).sum::<f64>().ln() + max;
        let loss = logsum - x[[0, target]];
        let v = Array2::from_elem((1, 1), loss);
        self.push(v, Op::SoftmaxCrossEntropy(logits, target))
    }

    /// Numerically stable per-element BCE-with-logits, weighted then averaged
    /// over all elements.
    pub fn sigmoid_bce_mean(
        &mut self,
        logits: NodeId,
        targets: Array2<f64>,
        weights: Array2<f64>,
    ) -> NodeId {
        let x = &self.nodes[logits].value;
        assert_eq!(x.dim(), targets.dim());
        assert_eq!(x.dim(), weights.dim());
        let n = x.len() as f64;
        let mut acc = 0.0;
        for ((&xi, &zi), &wi) in x.iter().zip(targets.iter()).zip(weights.iter()) {
            acc += wi * (xi.max(0.0) - xi * zi + (1.0 + (-xi.abs()).exp()).ln());
        }
        let v = Array2::from_elem((1, 1), acc / n);
        self.push(
            v,
            Op::SigmoidBceMean {
                logits,
                targets,
                weights,
            },
        )
    }

    pub fn l2_dist(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let diff = &self.nodes[a].value - &self.nodes[b].value;
        let v = Array2::from_elem((1, 1), diff.iter().map(|d| d * d).sum::<f64>().sqrt());
        self.push(v, Op::L2Dist(a, b))
    }

    /// Dropout with a pre-drawn mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, a: NodeId, mask: Array2<f64>) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), mask.dim());
        let v = &self.nodes[a].value * &mask;
        self.push(v, Op::Dropout(a, mask))
    }

    /// Reverse sweep from `root` (a [1,1] scalar node).
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[root].value.dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, id: NodeId, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let add_to = |grads: &mut [Option<Array2<f64>>], node: NodeId, delta: Array2<f64>| {
            match &mut grads[node] {
                Some(acc) => *acc += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.nodes[*b].value.t());
                let gb = self.nodes[*a].value.t().dot(g);
                add_to(grads, *a, ga);
                add_to(grads, *b, gb);
            }
            Op::MatMulNt(a, b) => {
                // out = a @ b^T
                let ga = g.dot(&self.nodes[*b].value);
                let gb = g.t().dot(&self.nodes[*a].value);
                add_to(grads, *a, ga);
                add_to(grads, *b, gb);
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, -g.clone());
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, g * &self.nodes[*b].value);
                add_to(grads, *b, g * &self.nodes[*a].value);
            }
            Op::AddRow(a, row) => {
                add_to(grads, *a, g.clone());
                let mut gr = Array2::zeros((1, g.dim().1));
                for r in g.rows() {
                    gr.row_mut(0).zip_mut_with(&r, |acc, &v| *acc += v);
                }
                add_to(grads, *row, gr);
            }
            Op::Scale(a, c) => add_to(grads, *a, g * *c),
            Op::AddConst(a) => add_to(grads, *a, g.clone()),
            Op::Relu(a) => {
                let mut ga = g.clone();
                ga.zip_mut_with(&self.nodes[*a].value, |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                add_to(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let mut ga = Array2::zeros(y.dim());
                for r in 0..y.dim().0 {
                    let dot: f64 = y.row(r).iter().zip(g.row(r).iter()).map(|(a, b)| a * b).sum();
                    for c in 0..y.dim().1 {
                        ga[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                    }
                }
                add_to(grads, *a, ga);
            }
            Op::GatherRows(table, idx) => {
                let mut gt = Array2::zeros(self.nodes[*table].value.dim());
                for (out, &i) in idx.iter().enumerate() {
                    gt.row_mut(i).zip_mut_with(&g.row(out), |acc, &v| *acc += v);
                }
                add_to(grads, *table, gt);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[*a].value.dim().1;
                add_to(grads, *a, g.slice(s![.., ..ca]).to_owned());
                add_to(grads, *b, g.slice(s![.., ca..]).to_owned());
            }
            Op::BroadcastRow(row) => {
                let mut gr = Array2::zeros((1, g.dim().1));
                for r in g.rows() {
                    gr.row_mut(0).zip_mut_with(&r, |acc, &v| *acc += v);
                }
                add_to(grads, *row, gr);
            }
            Op::SliceRows(a, start, len) => {
                let mut ga = Array2::zeros(self.nodes[*a].value.dim());
                ga.slice_mut(s![*start..*start + *len, ..]).assign(g);
                add_to(grads, *a, ga);
            }
            Op::Unfold(a, k) => {
                let (_, c) = self.nodes[*a].value.dim();
                let mut ga: Array2<f64> = Array2::zeros(self.nodes[*a].value.dim());
                for ot in 0..g.dim().0 {
                    for j in 0..*k {
                        let gslice = g.slice(s![ot, j * c..(j + 1) * c]);
                        ga.row_mut(ot + j).zip_mut_with(&gslice, |acc, &v| *acc += v);
                    }
                }
                add_to(grads, *a, ga);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gain].value;
                let (t, d) = xv.dim();
                let mut gx = Array2::zeros((t, d));
                let mut ggain = Array2::zeros((1, d));
                let mut gbias = Array2::zeros((1, d));
                for r in 0..t {
                    let row = xv.row(r);
                    let mean = row.sum() / d as f64;
                    let var =
                        row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d as f64;
                    let sd = (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|e| (e - mean) / sd).collect();
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    for c in 0..d {
                        let gg = g[[r, c]] * gv[[0, c]];
                        mean_gg += gg;
                        mean_ggx += gg * xhat[c];
                        ggain[[0, c]] += g[[r, c]] * xhat[c];
                        gbias[[0, c]] += g[[r, c]];
                    }
                    mean_gg /= d as f64;
                    mean_ggx /= d as f64;
                    for c in 0..d {
                        let gg = g[[r, c]] * gv[[0, c]];
                        gx[[r, c]] = (gg - mean_gg - xhat[c] * mean_ggx) / sd;
                    }
                }
                add_to(grads, *x, gx);
                add_to(grads, *gain, ggain);
                add_to(grads, *bias, gbias);
            }
            Op::MeanRows(a) => {
                let (t, c) = self.nodes[*a].value.dim();
                let mut ga = Array2::zeros((t, c));
                for r in 0..t {
                    for col in 0..c {
                        ga[[r, col]] = g[[0, col]] / t as f64;
                    }
                }
                add_to(grads, *a, ga);
            }
            Op::StdRows(a, _eps) => {
                let x = &self.nodes[*a].value;
                let sdev = &self.nodes[id].value;
                let (t, c) = x.dim();
                let mut ga = Array2::zeros((t, c));
                for col in 0..c {
                    let mut mean = 0.0;
                    for r in 0..t {
                        mean += x[[r, col]];
                    }
                    mean /= t as f64;
                    for r in 0..t {
                        ga[[r, col]] =
                            g[[0, col]] * (x[[r, col]] - mean) / (t as f64 * sdev[[0, col]]);
                    }
                }
                add_to(grads, *a, ga);
            }
            Op::Mse(a, b) => {
                let diff = &self.nodes[*a].value - &self.nodes[*b].value;
                let n = diff.len() as f64;
                let ga = diff.mapv(|d| 2.0 * d / n) * g[[0, 0]];
                add_to(grads, *b, -ga.clone());
                add_to(grads, *a, ga);
            }
            Op::SoftmaxCrossEntropy(logits, target) => {
                let x = &self.nodes[*logits].value;
                let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = x.iter().map(|e| (e - max).exp()).collect();
                let sum: f64 = exp.iter().sum();
                let mut gl = Array2::zeros(x.dim());
                for c in 0..x.dim().1 {
                    let p = exp[c] / sum;
                    gl[[0, c]] = g[[0, 0]] * (p - if c == *target { 1.0 } else { 0.0 });
                }
                add_to(grads, *logits, gl);
            }
            Op::SigmoidBceMean {
                logits,
                targets,
                weights,
            } => {
                let x = &self.nodes[*logits].value;
                let n = x.len() as f64;
                let mut gl = Array2::zeros(x.dim());
                for (i, ((&xi, &zi), &wi)) in x
                    .iter()
                    .zip(targets.iter())
                    .zip(weights.iter())
                    .enumerate()
                {
                    let sig = 1.0 / (1.0 + (-xi).exp());
                    let (r, c) = (i / x.dim().1, i % x.dim().1);
                    gl[[r, c]] = g[[0, 0]] * wi * (sig - zi) / n;
                }
                add_to(grads, *logits, gl);
            }
            Op::L2Dist(a, b) => {
                let dist = self.nodes[id].value[[0, 0]];
                let diff = &self.nodes[*a].value - &self.nodes[*b].value;
                // subgradient 0 at coincident points
                let ga = if dist > 0.0 {
                    diff.mapv(|d| d / dist) * g[[0, 0]]
                } else {
                    Array2::zeros(diff.dim())
                };
                add_to(grads, *b, -ga.clone());
                add_to(grads, *a, ga);
            }
            Op::Dropout(a, mask) => {
                add_to(grads, *a, g * mask);
            }
        }
    }

    /// Accumulated gradients per bound parameter, summed over all bindings.
    pub fn param_grads<'g>(
        &self,
        grads: &'g Gradients,
    ) -> impl Iterator<Item = (ParamId, &'g Array2<f64>)> + use<'g, '_> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| {
            if let Op::Param(pid) = n.op {
                grads.grads[i].as_ref().map(|g| (pid, g))
            } else {
                None
            }
        })
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_err};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Finite-difference check of a scalar-valued tape program against the
    /// backward pass, perturbing every entry of every input.
    fn check_grads(inputs: &[Array2<f64>], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root);

        for (k, input) in inputs.iter().enumerate() {
            let g = grads
                .wrt(ids[k])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(input.dim()));
            for r in 0..input.dim().0 {
                for c in 0..input.dim().1 {
                    let fd = central_diff(
                        &mut |x| {
                            let mut perturbed: Vec<Array2<f64>> = inputs.to_vec();
                            perturbed[k][[r, c]] = x;
                            let mut t = Tape::new();
                            let ids: Vec<NodeId> =
                                perturbed.iter().map(|m| t.leaf(m.clone())).collect();
                            let root = build(&mut t, &ids);
                            t.scalar(root)
                        },
                        input[[r, c]],
                        1e-4,
                    );
                    let err = rel_err(g[[r, c]], fd);
                    assert!(
                        err < 1e-3,
                        "input {k} [{r},{c}]: ad={} fd={} rel_err={err}",
                        g[[r, c]],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_chain_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_matrix(&mut rng, 3, 4);
        let b = rand_matrix(&mut rng, 4, 2);
        let t = rand_matrix(&mut rng, 3, 2);
        check_grads(&[a, b, t], |tape, ids| {
            let y = tape.matmul(ids[0], ids[1]);
            tape.mse(y, ids[2])
        });
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_matrix(&mut rng, 3, 5);
        let b = rand_matrix(&mut rng, 4, 5);
        let mut tape = Tape::new();
        let ia = tape.leaf(a.clone());
        let ib = tape.leaf(b.clone());
        let y = tape.matmul_nt(ia, ib);
        assert_eq!(tape.value(y).dim(), (3, 4));
        let expected = a.dot(&b.t());
        assert!(tape
            .value(y)
            .iter()
            .zip(expected.iter())
            .all(|(x, y)| (x - y).abs() < 1e-12));

        let t = rand_matrix(&mut rng, 3, 4);
        check_grads(&[a, b, t], |tape, ids| {
            let y = tape.matmul_nt(ids[0], ids[1]);
            tape.mse(y, ids[2])
        });
    }

    #[test]
    fn softmax_relu_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_matrix(&mut rng, 3, 5);
        let gain = rand_matrix(&mut rng, 1, 5);
        let bias = rand_matrix(&mut rng, 1, 5);
        let t = rand_matrix(&mut rng, 3, 5);
        check_grads(&[x, gain, bias, t], |tape, ids| {
            let n = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5);
            let r = tape.relu(n);
            let sm = tape.softmax_rows(r);
            tape.mse(sm, ids[3])
        });
    }

    #[test]
    fn pooling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_matrix(&mut rng, 6, 3);
        let tm = rand_matrix(&mut rng, 1, 3);
        let ts = rand_matrix(&mut rng, 1, 3);
        check_grads(&[x, tm, ts], |tape, ids| {
            let mean = tape.mean_rows(ids[0]);
            let sd = tape.std_rows(ids[0], 1e-6);
            let a = tape.mse(mean, ids[1]);
            let b = tape.mse(sd, ids[2]);
            tape.add(a, b)
        });
    }

    #[test]
    fn unfold_gather_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_matrix(&mut rng, 7, 2);
        let table = rand_matrix(&mut rng, 4, 6);
        let t = rand_matrix(&mut rng, 5, 12);
        check_grads(&[x, table, t], |tape, ids| {
            let u = tape.unfold(ids[0], 3); // [5, 6]
            let rows = tape.gather_rows(ids[1], &[0, 2, 2, 1, 3]); // [5, 6]
            let cat = tape.concat_cols(u, rows); // [5, 12]
            tape.mse(cat, ids[2])
        });
    }

    #[test]
    fn loss_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = rand_matrix(&mut rng, 1, 5);
        check_grads(&[logits], |tape, ids| tape.softmax_cross_entropy(ids[0], 2));

        let stop_logits = rand_matrix(&mut rng, 4, 1);
        let targets = array![[0.0], [0.0], [0.0], [1.0]];
        let weights = array![[1.0], [1.0], [1.0], [5.0]];
        check_grads(&[stop_logits], |tape, ids| {
            tape.sigmoid_bce_mean(ids[0], targets.clone(), weights.clone())
        });

        let a = rand_matrix(&mut rng, 1, 6);
        let b = rand_matrix(&mut rng, 1, 6);
        check_grads(&[a, b], |tape, ids| tape.l2_dist(ids[0], ids[1]));
    }

    #[test]
    fn l2_dist_zero_at_coincident_points() {
        let mut tape = Tape::new();
        let v = array![[1.0, -2.0, 3.0]];
        let a = tape.leaf(v.clone());
        let b = tape.leaf(v);
        let d = tape.l2_dist(a, b);
        assert_eq!(tape.scalar(d), 0.0);
        // backward must not produce NaN
        let grads = tape.backward(d);
        assert!(grads.wrt(a).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Array2::zeros((1, 7)));
        let ce = tape.softmax_cross_entropy(logits, 3);
        assert!((tape.scalar(ce) - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn broadcast_and_slice_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let row = rand_matrix(&mut rng, 1, 4);
        let t = rand_matrix(&mut rng, 2, 4);
        check_grads(&[row, t], |tape, ids| {
            let b = tape.broadcast_row(ids[0], 5);
            let sl = tape.slice_rows(b, 1, 2);
            tape.mse(sl, ids[1])
        });
    }

    #[test]
    fn gather_duplicate_rows_accumulates() {
        let table = array![[1.0, 2.0], [1.0, 2.0]];
        let mut tape = Tape::new();
        let t = tape.leaf(table);
        let g = tape.gather_rows(t, &[0, 0, 1]);
        let target = tape.leaf(Array2::zeros((3, 2)));
        let loss = tape.mse(g, target);
        let grads = tape.backward(loss);
        let gt = grads.wrt(t).unwrap();
        // row 0 used twice, so its gradient is double row 1's
        assert!((gt[[0, 0]] - 2.0 * gt[[1, 0]]).abs() < 1e-12);
        assert!(gt[[1, 0]].abs() > 0.0);
    }
}
