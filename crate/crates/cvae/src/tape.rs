//! Reverse-mode differentiation over a tape of fused matrix operations.
//!
//! Sequence tensors are laid out time-major with the batch inside each time
//! step: row `t * batch + b` holds step `t` of sample `b`.

use crate::tensor::{gemm_acc, Mat};

pub type NodeId = usize;

/// Probability floor inside the reproduction loss logarithms.
pub const PROB_EPS: f64 = 1e-9;

/// Named parameter tensors and their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.values.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect()
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone)]
struct GruCache {
    z: Mat,
    r: Mat,
    n: Mat,
    pre_n: Mat,
    hu_n: Mat,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Elu { x: NodeId },
    Concat { parts: Vec<NodeId> },
    /// Output row `i` is the concatenation of the listed input rows.
    Regroup { x: NodeId, rows: Vec<Vec<usize>> },
    Gru {
        x: NodeId,
        w: NodeId,
        u: NodeId,
        b: NodeId,
        batch: usize,
        reverse: bool,
        cache: Box<GruCache>,
    },
    Reparam { mu: NodeId, lv: NodeId, eps: Mat },
    Kl { mu: NodeId, lv: NodeId },
    Reproduction { logits: NodeId, targets: Vec<(u8, bool)>, probs: Mat },
    WeightedSum { terms: Vec<(NodeId, f64)> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<NodeId>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Softmax over the first `k` entries of `row`, written to `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn rows_of(m: &Mat, start: usize, count: usize) -> Mat {
    Mat::from_vec(count, m.cols, m.data[start * m.cols..(start + count) * m.cols].to_vec())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Node for parameter `index`, created once per tape.
    pub fn param(&mut self, store: &ParamStore, index: usize) -> NodeId {
        if self.params.len() < store.values.len() {
            self.params.resize(store.values.len(), None);
        }
        if let Some(id) = self.params[index] {
            return id;
        }
        let id = self.push(store.values[index].clone(), Op::Param(index));
        self.params[index] = Some(id);
        id
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xv, wv, bv) = (&self.nodes[x].value, &self.nodes[w].value, &self.nodes[b].value);
        let mut y = Mat::zeros(xv.rows, wv.cols);
        for r in 0..y.rows {
            y.row_mut(r).copy_from_slice(&bv.data);
        }
        gemm_acc(xv, false, wv, false, &mut y);
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn elu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let y = Mat::from_vec(xv.rows, xv.cols, xv.data.iter().map(|&v| elu(v)).collect());
        self.push(y, Op::Elu { x })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.nodes[parts[0]].value.rows;
        let cols: usize = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        let mut y = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            assert_eq!(pv.rows, rows, "concat row mismatch");
            for r in 0..rows {
                y.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn regroup(&mut self, x: NodeId, rows: Vec<Vec<usize>>) -> NodeId {
        let xv = &self.nodes[x].value;
        let width = rows.first().map_or(0, |r| r.len()) * xv.cols;
        let mut y = Mat::zeros(rows.len(), width);
        for (i, src) in rows.iter().enumerate() {
            assert_eq!(src.len() * xv.cols, width, "ragged regroup");
            for (k, &s) in src.iter().enumerate() {
                y.data[i * width + k * xv.cols..i * width + (k + 1) * xv.cols].copy_from_slice(xv.row(s));
            }
        }
        self.push(y, Op::Regroup { x, rows })
    }

    /// One direction of a GRU layer over a `(steps * batch) x in` sequence.
    ///
    /// Gates: `z, r = sigmoid(x W + h U + b)`; candidate
    /// `n = elu(x W_n + b_n + r * (h U_n))`; `h' = (1 - z) n + z h`.
    pub fn gru(&mut self, x: NodeId, w: NodeId, u: NodeId, b: NodeId, batch: usize, reverse: bool) -> NodeId {
        let (xv, wv, uv, bv) = (
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[u].value,
            &self.nodes[b].value,
        );
        let hidden = uv.rows;
        assert_eq!(wv.cols, 3 * hidden);
        assert_eq!(xv.rows % batch, 0);
        let steps = xv.rows / batch;
        let mut a = Mat::zeros(xv.rows, 3 * hidden);
        for r in 0..a.rows {
            a.row_mut(r).copy_from_slice(&bv.data);
        }
        gemm_acc(xv, false, wv, false, &mut a);

        let n_rows = xv.rows;
        let mut out = Mat::zeros(n_rows, hidden);
        let mut cache = GruCache {
            z: Mat::zeros(n_rows, hidden),
            r: Mat::zeros(n_rows, hidden),
            n: Mat::zeros(n_rows, hidden),
            pre_n: Mat::zeros(n_rows, hidden),
            hu_n: Mat::zeros(n_rows, hidden),
        };
        let mut h_prev = Mat::zeros(batch, hidden);
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            let mut hu = Mat::zeros(batch, 3 * hidden);
            gemm_acc(&h_prev, false, uv, false, &mut hu);
            for bi in 0..batch {
                let row = t * batch + bi;
                let ar = a.row(row);
                let hr = hu.row(bi);
                for j in 0..hidden {
                    let z = sigmoid(ar[j] + hr[j]);
                    let r = sigmoid(ar[hidden + j] + hr[hidden + j]);
                    let hun = hr[2 * hidden + j];
                    let pre = ar[2 * hidden + j] + r * hun;
                    let n = elu(pre);
                    let hp = h_prev.data[bi * hidden + j];
                    let i = row * hidden + j;
                    cache.z.data[i] = z;
                    cache.r.data[i] = r;
                    cache.n.data[i] = n;
                    cache.pre_n.data[i] = pre;
                    cache.hu_n.data[i] = hun;
                    out.data[i] = (1.0 - z) * n + z * hp;
                }
            }
            h_prev = rows_of(&out, t * batch, batch);
        }
        self.push(
            out,
            Op::Gru {
                x,
                w,
                u,
                b,
                batch,
                reverse,
                cache: Box::new(cache),
            },
        )
    }

    /// `z = mu + exp(lv / 2) * eps`.
    pub fn reparam(&mut self, mu: NodeId, lv: NodeId, eps: Mat) -> NodeId {
        let (m, l) = (&self.nodes[mu].value, &self.nodes[lv].value);
        assert_eq!(m.shape(), eps.shape());
        let data = m
            .data
            .iter()
            .zip(&l.data)
            .zip(&eps.data)
            .map(|((m, l), e)| m + (0.5 * l).exp() * e)
            .collect();
        let z = Mat::from_vec(m.rows, m.cols, data);
        self.push(z, Op::Reparam { mu, lv, eps })
    }

    /// Summed KL divergence of every row's diagonal Gaussian from `N(0, I)`.
    pub fn kl(&mut self, mu: NodeId, lv: NodeId) -> NodeId {
        let (m, l) = (&self.nodes[mu].value, &self.nodes[lv].value);
        let v: f64 = m
            .data
            .iter()
            .zip(&l.data)
            .map(|(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l))
            .sum();
        self.push(Mat::scalar(v), Op::Kl { mu, lv })
    }

    /// Summed reproduction loss of `(rows x 35)` logits against
    /// `(slot, attack)` targets: 34-way cross-entropy plus attack BCE.
    pub fn reproduction(&mut self, logits: NodeId, targets: Vec<(u8, bool)>) -> NodeId {
        let lv = &self.nodes[logits].value;
        let cats = lv.cols - 1;
        assert_eq!(targets.len(), lv.rows);
        let mut probs = Mat::zeros(lv.rows, lv.cols);
        let mut total = 0.0;
        for (r, &(slot, attack)) in targets.iter().enumerate() {
            let row = lv.row(r);
            let pr = probs.row_mut(r);
            softmax_into(&row[..cats], &mut pr[..cats]);
            let s = sigmoid(row[cats]);
            pr[cats] = s;
            total -= pr[usize::from(slot)].max(PROB_EPS).ln();
            total -= if attack { s.max(PROB_EPS).ln() } else { (1.0 - s).max(PROB_EPS).ln() };
        }
        self.push(Mat::scalar(total), Op::Reproduction { logits, targets, probs })
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let v = terms.iter().map(|&(id, k)| k * self.nodes[id].value.data[0]).sum();
        self.push(
            Mat::scalar(v),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        )
    }

    /// Back-propagates from scalar node `root`, adding into `param_grads`.
    pub fn backward(&self, root: NodeId, param_grads: &mut [Mat]) {
        let mut grads: Vec<Option<Mat>> = vec![None; root + 1];
        grads[root] = Some(Mat::scalar(1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => param_grads[*p].add_assign(&g),
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let mut dw = Mat::zeros(wv.rows, wv.cols);
                    gemm_acc(xv, true, &g, false, &mut dw);
                    let mut db = Mat::zeros(1, wv.cols);
                    for r in 0..g.rows {
                        for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    gemm_acc(&g, false, wv, true, &mut dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                    self.accumulate_unless_input(&mut grads, *x, dx);
                }
                Op::Elu { x } => {
                    let xv = &self.nodes[*x].value;
                    let data = g.data.iter().zip(&xv.data).map(|(g, &v)| g * elu_grad(v)).collect();
                    self.accumulate_unless_input(&mut grads, *x, Mat::from_vec(g.rows, g.cols, data));
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.nodes[p].value.cols;
                        if !matches!(self.nodes[p].op, Op::Input) {
                            let mut dp = Mat::zeros(g.rows, cols);
                            for r in 0..g.rows {
                                dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                            }
                            accumulate(&mut grads, p, dp);
                        }
                        off += cols;
                    }
                }
                Op::Regroup { x, rows } => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for (i, src) in rows.iter().enumerate() {
                        for (k, &s) in src.iter().enumerate() {
                            let seg = &g.row(i)[k * xv.cols..(k + 1) * xv.cols];
                            for (d, v) in dx.row_mut(s).iter_mut().zip(seg) {
                                *d += v;
                            }
                        }
                    }
                    self.accumulate_unless_input(&mut grads, *x, dx);
                }
                Op::Gru {
                    x,
                    w,
                    u,
                    b,
                    batch,
                    reverse,
                    cache,
                } => self.gru_backward(&mut grads, &g, node, (*x, *w, *u, *b), *batch, *reverse, cache),
                Op::Reparam { mu, lv, eps } => {
                    let l = &self.nodes[*lv].value;
                    let dlv = g
                        .data
                        .iter()
                        .zip(&l.data)
                        .zip(&eps.data)
                        .map(|((g, l), e)| g * e * 0.5 * (0.5 * l).exp())
                        .collect();
                    accumulate(&mut grads, *mu, g.clone());
                    accumulate(&mut grads, *lv, Mat::from_vec(g.rows, g.cols, dlv));
                }
                Op::Kl { mu, lv } => {
                    let s = g.data[0];
                    let (m, l) = (&self.nodes[*mu].value, &self.nodes[*lv].value);
                    let dm = m.data.iter().map(|m| s * m).collect();
                    let dl = l.data.iter().map(|l| s * 0.5 * (l.exp() - 1.0)).collect();
                    accumulate(&mut grads, *mu, Mat::from_vec(m.rows, m.cols, dm));
                    accumulate(&mut grads, *lv, Mat::from_vec(l.rows, l.cols, dl));
                }
                Op::Reproduction { logits, targets, probs } => {
                    let s = g.data[0];
                    let cats = probs.cols - 1;
                    let mut d = Mat::zeros(probs.rows, probs.cols);
                    for (r, &(slot, attack)) in targets.iter().enumerate() {
                        let p = probs.row(r);
                        let dr = d.row_mut(r);
                        if p[usize::from(slot)] >= PROB_EPS {
                            for j in 0..cats {
                                dr[j] = s * p[j];
                            }
                            dr[usize::from(slot)] -= s;
                        }
                        let sig = p[cats];
                        let clamped = if attack { sig < PROB_EPS } else { 1.0 - sig < PROB_EPS };
                        if !clamped {
                            dr[cats] = s * (sig - f64::from(u8::from(attack)));
                        }
                    }
                    accumulate(&mut grads, *logits, d);
                }
                Op::WeightedSum { terms } => {
                    for &(t, k) in terms {
                        accumulate(&mut grads, t, Mat::scalar(k * g.data[0]));
                    }
                }
            }
        }
    }

    fn accumulate_unless_input(&self, grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
        if !matches!(self.nodes[id].op, Op::Input) {
            accumulate(grads, id, g);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn gru_backward(
        &self,
        grads: &mut [Option<Mat>],
        g: &Mat,
        node: &Node,
        (x, w, u, b): (NodeId, NodeId, NodeId, NodeId),
        batch: usize,
        reverse: bool,
        c: &GruCache,
    ) {
        let (xv, wv, uv) = (&self.nodes[x].value, &self.nodes[w].value, &self.nodes[u].value);
        let out = &node.value;
        let hidden = uv.rows;
        let steps = xv.rows / batch;
        let mut da = Mat::zeros(xv.rows, 3 * hidden);
        let mut du = Mat::zeros(hidden, 3 * hidden);
        let mut carry = Mat::zeros(batch, hidden);
        for k in (0..steps).rev() {
            let t = if reverse { steps - 1 - k } else { k };
            let h_prev = if k == 0 {
                Mat::zeros(batch, hidden)
            } else {
                let tp = if reverse { t + 1 } else { t - 1 };
                rows_of(out, tp * batch, batch)
            };
            let mut dhu = Mat::zeros(batch, 3 * hidden);
            let mut next_carry = Mat::zeros(batch, hidden);
            for bi in 0..batch {
                let row = t * batch + bi;
                for j in 0..hidden {
                    let i = row * hidden + j;
                    let dh = g.data[i] + carry.data[bi * hidden + j];
                    let (z, r, n) = (c.z.data[i], c.r.data[i], c.n.data[i]);
                    let hp = h_prev.data[bi * hidden + j];
                    let dn = dh * (1.0 - z);
                    let dz = dh * (hp - n);
                    next_carry.data[bi * hidden + j] = dh * z;
                    let dpre = dn * elu_grad(c.pre_n.data[i]);
                    let dr = dpre * c.hu_n.data[i];
                    let da_z = dz * z * (1.0 - z);
                    let da_r = dr * r * (1.0 - r);
                    let ar = da.row_mut(row);
                    ar[j] = da_z;
                    ar[hidden + j] = da_r;
                    ar[2 * hidden + j] = dpre;
                    let hr = dhu.row_mut(bi);
                    hr[j] = da_z;
                    hr[hidden + j] = da_r;
                    hr[2 * hidden + j] = dpre * r;
                }
            }
            gemm_acc(&h_prev, true, &dhu, false, &mut du);
            gemm_acc(&dhu, false, uv, true, &mut next_carry);
            carry = next_carry;
        }
        let mut dw = Mat::zeros(wv.rows, wv.cols);
        gemm_acc(xv, true, &da, false, &mut dw);
        let mut db = Mat::zeros(1, 3 * hidden);
        for r in 0..da.rows {
            for (d, v) in db.data.iter_mut().zip(da.row(r)) {
                *d += v;
            }
        }
        accumulate(grads, w, dw);
        accumulate(grads, u, du);
        accumulate(grads, b, db);
        if !matches!(self.nodes[x].op, Op::Input) {
            let mut dx = Mat::zeros(xv.rows, xv.cols);
            gemm_acc(&da, false, wv, true, &mut dx);
            accumulate(grads, x, dx);
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_check(build: impl Fn(&mut Tape, &ParamStore) -> NodeId, store: &mut ParamStore) {
        let mut tape = Tape::new();
        let root = build(&mut tape, store);
        let mut grads = store.zeros_like();
        tape.backward(root, &mut grads);
        let h = 1e-6;
        for p in 0..store.values.len() {
            for i in 0..store.values[p].data.len() {
                let orig = store.values[p].data[i];
                store.values[p].data[i] = orig + h;
                let mut t1 = Tape::new();
                let r1 = build(&mut t1, store);
                let up = t1.value(r1).data[0];
                store.values[p].data[i] = orig - h;
                let mut t2 = Tape::new();
                let r2 = build(&mut t2, store);
                let down = t2.value(r2).data[0];
                store.values[p].data[i] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = grads[p].data[i];
                assert!(
                    (num - ana).abs() <= 1e-6 * (1.0 + num.abs().max(ana.abs())),
                    "{}[{i}]: numeric {num} analytic {ana}",
                    store.names[p]
                );
            }
        }
    }

    fn filled(rows: usize, cols: usize, seed: f64) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|i| ((i as f64 + seed) * 0.7).sin() * 0.5).collect())
    }

    #[test]
    fn gru_and_linear_gradients() {
        let mut store = ParamStore::new();
        store.push("w", filled(3, 6, 1.0));
        store.push("u", filled(2, 6, 2.0));
        store.push("b", filled(1, 6, 3.0));
        store.push("head_w", filled(2, 35, 4.0));
        store.push("head_b", filled(1, 35, 5.0));
        let x = filled(8, 3, 6.0);
        let targets: Vec<(u8, bool)> = (0..8).map(|i| ((i * 5 % 34) as u8, i % 3 == 0)).collect();
        for reverse in [false, true] {
            numeric_check(
                |tape, s| {
                    let xi = tape.input(x.clone());
                    let (w, u, b) = (tape.param(s, 0), tape.param(s, 1), tape.param(s, 2));
                    let h = tape.gru(xi, w, u, b, 2, reverse);
                    let e = tape.elu(h);
                    let (hw, hb) = (tape.param(s, 3), tape.param(s, 4));
                    let logits = tape.linear(e, hw, hb);
                    tape.reproduction(logits, targets.clone())
                },
                &mut store,
            );
        }
    }

    #[test]
    fn latent_path_gradients() {
        let mut store = ParamStore::new();
        store.push("mu", filled(2, 3, 1.0));
        store.push("lv", filled(2, 3, 2.0));
        store.push("w", filled(6, 4, 3.0));
        store.push("b", filled(1, 4, 4.0));
        let eps = filled(2, 3, 9.0);
        numeric_check(
            |tape, s| {
                let (mu, lv) = (tape.param(s, 0), tape.param(s, 1));
                let z = tape.reparam(mu, lv, eps.clone());
                let c = tape.concat(&[z, mu]);
                let rows = tape.regroup(c, vec![vec![1], vec![0], vec![0]]);
                let (w, b) = (tape.param(s, 2), tape.param(s, 3));
                let y = tape.linear(rows, w, b);
                let y = tape.elu(y);
                let y = tape.regroup(y, vec![vec![0, 1]]);
                let pad = tape.input(Mat::zeros(1, 35 - 8));
                let logits = tape.concat(&[y, pad]);
                let rep = tape.reproduction(logits, vec![(3, true)]);
                let kl = tape.kl(mu, lv);
                tape.weighted_sum(&[(rep, 0.5), (kl, 0.3)])
            },
            &mut store,
        );
    }
}
