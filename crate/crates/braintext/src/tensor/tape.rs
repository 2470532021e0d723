//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes in
//! topological order. [`Tape::backward`] walks the list in reverse and
//! calls each node's pullback with the parent values read straight off the
//! tape, so nothing is cloned at record time. One tape is built per
//! training batch and dropped afterwards.
//!
//! Every op's pullback is exercised against central finite differences in
//! the unit tests at the bottom of this file; the full-model gradient
//! checks live in the acceptance suite.

use super::Mat;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

/// Pullback: given (parent values, own value, gradient wrt own value),
/// return gradients wrt each parent, in parent order.
type Backward = Box<dyn Fn(&[&Mat], &Mat, &Mat) -> Vec<Mat>>;

struct Node {
    value: Mat,
    parents: Vec<usize>,
    backward: Option<Backward>,
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, parents: Vec<usize>, backward: Option<Backward>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node: an input or parameter. Gradients accumulate here.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, vec![], None)
    }

    /// Constant: like a leaf, but semantically not differentiated.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, vec![], None)
    }

    // ---- arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|_, _, g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).sub(self.value(b));
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|_, _, g| vec![g.clone(), g.scale(-1.0)])),
        )
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|p, _, g| {
                vec![g.zip(p[1], |gv, bv| gv * bv), g.zip(p[0], |gv, av| gv * av)]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |_, _, g| vec![g.scale(c)])),
        )
    }

    /// Add a constant matrix (not differentiated); used for attention masks.
    pub fn add_const(&mut self, a: Var, m: Mat) -> Var {
        assert_eq!(self.value(a).shape(), m.shape(), "add_const: shape mismatch");
        let out = self.value(a).add(&m);
        self.push(out, vec![a.0], Some(Box::new(|_, _, g| vec![g.clone()])))
    }

    /// Elementwise product with a constant mask.
    pub fn mul_const(&mut self, a: Var, m: Mat) -> Var {
        assert_eq!(self.value(a).shape(), m.shape(), "mul_const: shape mismatch");
        let out = self.value(a).zip(&m, |x, y| x * y);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |_, _, g| vec![g.zip(&m, |gv, mv| gv * mv)])),
        )
    }

    /// Broadcast-add a 1xN row vector to every row of an MxN matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows, 1, "add_row: second arg must be 1xN");
        assert_eq!(av.cols, rv.cols, "add_row: column mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(
            out,
            vec![a.0, row.0],
            Some(Box::new(|_, _, g| {
                let mut rg = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (acc, &gv) in rg.data.iter_mut().zip(g.row(r)) {
                        *acc += gv;
                    }
                }
                vec![g.clone(), rg]
            })),
        )
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|p, _, g| {
                vec![g.matmul_nt(p[1]), p[0].matmul_tn(g)]
            })),
        )
    }

    /// A @ B^T.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|p, _, g| {
                vec![g.matmul(p[1]), g.matmul_tn(p[0])]
            })),
        )
    }

    // ---- shape ----

    pub fn concat_rows(&mut self, top: Var, bottom: Var) -> Var {
        let out = self.value(top).vstack(self.value(bottom));
        let split = self.value(top).rows;
        self.push(
            out,
            vec![top.0, bottom.0],
            Some(Box::new(move |_, _, g| {
                vec![g.slice_rows(0, split), g.slice_rows(split, g.rows)]
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, from: usize, to: usize) -> Var {
        let total = self.value(a).rows;
        let out = self.value(a).slice_rows(from, to);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |p, _, g| {
                let mut full = Mat::zeros(total, p[0].cols);
                full.data[from * g.cols..to * g.cols].copy_from_slice(&g.data);
                vec![full]
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let av = self.value(a);
        assert!(from <= to && to <= av.cols, "slice_cols out of range");
        let mut out = Mat::zeros(av.rows, to - from);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[from..to]);
        }
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |p, _, g| {
                let mut full = Mat::zeros(p[0].rows, p[0].cols);
                for r in 0..g.rows {
                    full.row_mut(r)[from..to].copy_from_slice(g.row(r));
                }
                vec![full]
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols).collect();
        let total: usize = widths.iter().sum();
        let mut out = Mat::zeros(rows, total);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        self.push(
            out,
            parts.iter().map(|v| v.0).collect(),
            Some(Box::new(move |_, _, g| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    let mut part = Mat::zeros(g.rows, w);
                    for r in 0..g.rows {
                        part.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    grads.push(part);
                    off += w;
                }
                grads
            })),
        )
    }

    /// Gather rows of an embedding table: out[i] = table[ids[i]].
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Mat::zeros(ids.len(), tv.cols);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows, "gather_rows: id {id} out of range {}", tv.rows);
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let ids = ids.to_vec();
        self.push(
            out,
            vec![table.0],
            Some(Box::new(move |p, _, g| {
                let mut tg = Mat::zeros(p[0].rows, p[0].cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, &gv) in tg.row_mut(id).iter_mut().zip(g.row(r)) {
                        *acc += gv;
                    }
                }
                vec![tg]
            })),
        )
    }

    // ---- nonlinearities and normalization ----

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        self.push(
            out,
            vec![a.0],
            Some(Box::new(|_, y, g| {
                let mut dx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// GELU with the tanh approximation (forward and pullback use the same
    /// expression, so gradient checks see one consistent function).
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_val);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(|p, _, g| {
                vec![g.zip(p[0], |gv, x| gv * gelu_grad(x))]
            })),
        )
    }

    /// Row-wise layer norm with learned gain and bias (both 1xN).
    pub fn layer_norm_rows(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (av, gv, bv) = (self.value(a), self.value(gain), self.value(bias));
        assert_eq!(gv.rows, 1, "layer_norm_rows: gain must be 1xN");
        assert_eq!(bv.rows, 1, "layer_norm_rows: bias must be 1xN");
        assert_eq!(av.cols, gv.cols);
        assert_eq!(av.cols, bv.cols);
        let n = av.cols as f64;
        let mut out = Mat::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            let row = av.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + EPS).sqrt();
            for (o, (&x, (&g, &b))) in out
                .row_mut(r)
                .iter_mut()
                .zip(row.iter().zip(gv.data.iter().zip(&bv.data)))
            {
                *o = (x - mean) * inv * g + b;
            }
        }
        self.push(
            out,
            vec![a.0, gain.0, bias.0],
            Some(Box::new(|p, _, g| {
                let (av, gainv) = (p[0], p[1]);
                let n = av.cols as f64;
                let mut dx = Mat::zeros(av.rows, av.cols);
                let mut dgain = Mat::zeros(1, av.cols);
                let mut dbias = Mat::zeros(1, av.cols);
                for r in 0..av.rows {
                    let row = av.row(r);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&x| (x - mean) * inv).collect();
                    let gr = g.row(r);
                    // dbias += g; dgain += g * xhat
                    for ((db, dg), (&gvv, &xh)) in dbias
                        .data
                        .iter_mut()
                        .zip(dgain.data.iter_mut())
                        .zip(gr.iter().zip(&xhat))
                    {
                        *db += gvv;
                        *dg += gvv * xh;
                    }
                    // dxhat = g * gain
                    let dxhat: Vec<f64> = gr
                        .iter()
                        .zip(&gainv.data)
                        .map(|(&gvv, &ga)| gvv * ga)
                        .collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for ((d, &dxh), &xh) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(&xhat) {
                        *d = inv * (dxh - sum_dxhat / n - xh * sum_dxhat_xhat / n);
                    }
                }
                vec![dx, dgain, dbias]
            })),
        )
    }

    /// Normalize each row to unit L2 norm; zero rows stay zero (and get
    /// zero gradient), matching the cosine convention for zero prompts.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows {
            let norm = out.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in out.row_mut(r) {
                    *v /= norm;
                }
            }
        }
        self.push(
            out,
            vec![a.0],
            Some(Box::new(|p, _, g| {
                let av = p[0];
                let mut dx = Mat::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    let row = av.row(r);
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let gr = g.row(r);
                    let dot: f64 = gr.iter().zip(row).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &x) in dx.row_mut(r).iter_mut().zip(gr).zip(row) {
                        *d = gv / norm - x * dot / (norm * norm * norm);
                    }
                }
                vec![dx]
            })),
        )
    }

    // ---- elementwise transcendental ----

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(|_, y, g| vec![g.zip(y, |gv, yv| gv * yv)])),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(|p, _, g| vec![g.zip(p[0], |gv, x| gv / x)])),
        )
    }

    // ---- reductions ----

    /// Row-major reshape; element count must be preserved.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(
            av.len(),
            rows * cols,
            "reshape: {}x{} -> {rows}x{cols}",
            av.rows,
            av.cols
        );
        let out = Mat::from_vec(rows, cols, av.data.clone());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(|p, _, g| {
                vec![Mat::from_vec(p[0].rows, p[0].cols, g.data.clone())]
            })),
        )
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Mat::col((0..av.rows).map(|r| av.row(r).iter().sum()).collect());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(|p, _, g| {
                let mut dx = Mat::zeros(p[0].rows, p[0].cols);
                for r in 0..dx.rows {
                    let gv = g.data[r];
                    for d in dx.row_mut(r) {
                        *d = gv;
                    }
                }
                vec![dx]
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Mat::scalar(self.value(a).sum());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(|p, _, g| {
                vec![Mat::filled(p[0].rows, p[0].cols, g.item())]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Diagonal of a square matrix as an Nx1 column.
    pub fn diag(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, av.cols, "diag: matrix not square");
        let out = Mat::col((0..av.rows).map(|i| av.at(i, i)).collect());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(|p, _, g| {
                let mut dx = Mat::zeros(p[0].rows, p[0].cols);
                for i in 0..dx.rows {
                    *dx.at_mut(i, i) = g.data[i];
                }
                vec![dx]
            })),
        )
    }

    /// Sum of -log softmax(logits)[target] over rows. Returns a scalar;
    /// callers divide by their token count for mean reduction.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(
            lv.rows,
            targets.len(),
            "cross_entropy_sum: {} logit rows vs {} targets",
            lv.rows,
            targets.len()
        );
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < lv.cols, "target id {t} out of vocab {}", lv.cols);
            total += -log_softmax_at(lv.row(r), t);
        }
        let targets = targets.to_vec();
        self.push(
            Mat::scalar(total),
            vec![logits.0],
            Some(Box::new(move |p, _, g| {
                let lv = p[0];
                let gs = g.item();
                let mut dx = Mat::zeros(lv.rows, lv.cols);
                for (r, &t) in targets.iter().enumerate() {
                    let row = lv.row(r);
                    let drow = dx.row_mut(r);
                    softmax_into(row, drow);
                    drow[t] -= 1.0;
                    for d in drow.iter_mut() {
                        *d *= gs;
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Run the reverse pass from a scalar root. Returns per-node gradients;
    /// index with `Var.0` (leaves keep their accumulated gradient).
    pub fn backward(&self, root: Var) -> Vec<Option<Mat>> {
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Mat::scalar(1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(back) = &node.backward {
                let pvals: Vec<&Mat> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let pgrads = back(&pvals, &node.value, &g);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(pgrads) {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            if !node.parents.is_empty() {
                continue;
            }
            // leaf: keep gradient for the caller
            grads[id] = Some(g);
        }
        grads
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    out.copy_from_slice(row);
    softmax_in_place(out);
}

/// log softmax(row)[idx], numerically stable.
pub(crate) fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    row[idx] - lse
}

fn gelu_val(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
