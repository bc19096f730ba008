//! Reverse-mode automatic differentiation over vector-valued nodes.
//!
//! A [`Tape`] records operations as they are evaluated. Parameter tensors
//! live outside the tape in a [`ParamSet`]; ops that use them name them by
//! [`ParamId`], and [`Tape::backward`] accumulates their gradients into a
//! [`ParamGrads`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{dot, gru_cell_backward, gru_cell_forward, gru_cell_scratch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Row-major parameter matrix (a vector when `cols == 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    /// Frozen tensors (input normalizers) are saved with the weights but
    /// never updated.
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>, trainable: bool) -> ParamId {
        assert_eq!(data.len(), rows * cols);
        self.tensors.push(Tensor {
            name: name.into(),
            rows,
            cols,
            data,
            trainable,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.tensors[id.0].data
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers shaped like a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub grads: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros(params: &ParamSet) -> Self {
        ParamGrads {
            grads: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Pinhole camera constants for [`Tape::reprojection`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraConst {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major rotation.
    pub r: [f64; 9],
    pub t: [f64; 3],
}

/// Residual magnitude (pixels) charged for a point behind the camera.
pub const BEHIND_CAMERA_RESIDUAL: f64 = 1e4;
const MIN_DEPTH: f64 = 1e-6;
/// Norm floor keeping Gram-Schmidt finite on degenerate inputs.
const GS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    /// `W * concat(args) + b`; `args` indexes `Tape::idx`.
    Linear { w: ParamId, b: Option<ParamId>, args: (usize, usize) },
    Gru { w: ParamId, u: ParamId, b: ParamId, x: Var, h: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumSq(Var),
    Norm(Var),
    Slice(Var, usize),
    /// Weighted gather: output `i` sums `w * x[k]` over `gather[ranges[i]..ranges[i+1]]`.
    Gather { ranges: usize },
    GramSchmidt(Var),
    Mat3Mul(Var, Var),
    Mat3Vec(Var, Var),
    Euler(Var),
    /// `sum_k sigma_k |pi(x_k + offset) - p_k|^2`; `data` holds `(px, py, sigma)` per point.
    Reproj { x: Var, offset: Option<Var>, cam: usize, data: usize },
}

#[derive(Debug, Clone, Copy)]
struct Node {
    off: usize,
    len: usize,
    /// Start of saved intermediates (GRU gates, norms).
    aux: usize,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    vals: Vec<f64>,
    nodes: Vec<Node>,
    idx: Vec<usize>,
    gather: Vec<(usize, usize, f64)>,
    ranges: Vec<usize>,
    cams: Vec<CameraConst>,
    data: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forgets all nodes but keeps the allocations.
    pub fn clear(&mut self) {
        self.vals.clear();
        self.nodes.clear();
        self.idx.clear();
        self.gather.clear();
        self.ranges.clear();
        self.cams.clear();
        self.data.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        &self.vals[n.off..n.off + n.len]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].len
    }

    fn push(&mut self, len: usize, aux_len: usize, op: Op) -> (Var, usize) {
        let off = self.vals.len();
        self.vals.resize(off + len + aux_len, 0.0);
        self.nodes.push(Node {
            off,
            len,
            aux: off + len,
            op,
        });
        (Var(self.nodes.len() - 1), off)
    }

    fn range(&self, v: Var) -> std::ops::Range<usize> {
        let n = &self.nodes[v.0];
        n.off..n.off + n.len
    }

    pub fn leaf(&mut self, x: &[f64]) -> Var {
        let (v, off) = self.push(x.len(), 0, Op::Leaf);
        self.vals[off..off + x.len()].copy_from_slice(x);
        v
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.push(n, 0, Op::Leaf).0
    }

    pub fn linear(&mut self, params: &ParamSet, w: ParamId, b: Option<ParamId>, args: &[Var]) -> Var {
        let wt = params.get(w);
        let cols: usize = args.iter().map(|a| self.dim(*a)).sum();
        assert_eq!(cols, wt.cols, "linear input width for {}", wt.name);
        let rows = wt.rows;
        let start = self.idx.len();
        self.idx.extend(args.iter().map(|a| a.0));
        let (v, off) = self.push(rows, 0, Op::Linear { w, b, args: (start, args.len()) });
        let mut out = vec![0.0; rows];
        if let Some(b) = b {
            out.copy_from_slice(params.data(b));
        }
        for r in 0..rows {
            let row = &wt.data[r * cols..(r + 1) * cols];
            let mut c0 = 0;
            let mut acc = 0.0;
            for a in args {
                let x = self.value(*a);
                acc += dot(&row[c0..c0 + x.len()], x);
                c0 += x.len();
            }
            out[r] += acc;
        }
        self.vals[off..off + rows].copy_from_slice(&out);
        v
    }

    pub fn gru(&mut self, params: &ParamSet, w: ParamId, u: ParamId, b: ParamId, x: Var, h: Var) -> Var {
        let hd = self.dim(h);
        let (v, off) = self.push(hd, gru_cell_scratch(hd), Op::Gru { w, u, b, x, h });
        let (head, tail) = self.vals.split_at_mut(off);
        let xr = &head[self.nodes[x.0].off..self.nodes[x.0].off + self.nodes[x.0].len];
        let hr = &head[self.nodes[h.0].off..self.nodes[h.0].off + hd];
        gru_cell_forward(params.data(w), params.data(u), params.data(b), xr, hr, tail);
        v
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let n = self.dim(a);
        assert_eq!(n, self.dim(b), "operand sizes differ");
        let (v, off) = self.push(n, 0, op);
        let (ra, rb) = (self.range(a), self.range(b));
        for i in 0..n {
            self.vals[off + i] = f(self.vals[ra.start + i], self.vals[rb.start + i]);
        }
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let n = self.dim(a);
        let (v, off) = self.push(n, 0, Op::Scale(a, s));
        let r = self.range(a);
        for i in 0..n {
            self.vals[off + i] = self.vals[r.start + i] * s;
        }
        v
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        let (v, off) = self.push(1, 0, Op::Sum(a));
        self.vals[off] = s;
        v
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|x| x * x).sum();
        let (v, off) = self.push(1, 0, Op::SumSq(a));
        self.vals[off] = s;
        v
    }

    pub fn norm(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        let (v, off) = self.push(1, 0, Op::Norm(a));
        self.vals[off] = s;
        v
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        match terms {
            [] => self.zeros(1),
            [one] => *one,
            _ => {
                let mut acc = terms[0];
                for t in &terms[1..] {
                    acc = self.add(acc, *t);
                }
                acc
            }
        }
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.dim(a));
        let (v, off) = self.push(len, 0, Op::Slice(a, start));
        let r = self.range(a);
        self.vals.copy_within(r.start + start..r.start + start + len, off);
        v
    }

    /// Weighted gather. Each output element is a list of `(var, index, weight)`.
    pub fn gather(&mut self, outputs: &[Vec<(Var, usize, f64)>]) -> Var {
        let ranges = self.ranges.len();
        self.ranges.push(self.gather.len());
        for o in outputs {
            for &(var, k, w) in o {
                assert!(k < self.dim(var));
                self.gather.push((var.0, k, w));
            }
            self.ranges.push(self.gather.len());
        }
        let (v, off) = self.push(outputs.len(), 0, Op::Gather { ranges });
        for i in 0..outputs.len() {
            let (a, b) = (self.ranges[ranges + i], self.ranges[ranges + i + 1]);
            let mut s = 0.0;
            for e in a..b {
                let (var, k, w) = self.gather[e];
                s += w * self.vals[self.nodes[var].off + k];
            }
            self.vals[off + i] = s;
        }
        v
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let outputs: Vec<Vec<(Var, usize, f64)>> = parts
            .iter()
            .flat_map(|p| (0..self.dim(*p)).map(move |k| vec![(*p, k, 1.0)]))
            .collect();
        self.gather(&outputs)
    }

    /// 6D rotation to a row-major 3x3 matrix by Gram-Schmidt.
    pub fn gram_schmidt(&mut self, a: Var) -> Var {
        assert_eq!(self.dim(a), 6);
        let x: [f64; 6] = self.value(a).try_into().unwrap();
        let (v, off) = self.push(9, 2, Op::GramSchmidt(a));
        let (m, n1, n2) = gs_forward(&x);
        self.vals[off..off + 9].copy_from_slice(&m);
        self.vals[off + 9] = n1;
        self.vals[off + 10] = n2;
        v
    }

    pub fn mat3_mul(&mut self, a: Var, b: Var) -> Var {
        let x: [f64; 9] = self.value(a).try_into().unwrap();
        let y: [f64; 9] = self.value(b).try_into().unwrap();
        let (v, off) = self.push(9, 0, Op::Mat3Mul(a, b));
        for r in 0..3 {
            for c in 0..3 {
                self.vals[off + 3 * r + c] = x[3 * r] * y[c] + x[3 * r + 1] * y[3 + c] + x[3 * r + 2] * y[6 + c];
            }
        }
        v
    }

    pub fn mat3_vec(&mut self, a: Var, b: Var) -> Var {
        let x: [f64; 9] = self.value(a).try_into().unwrap();
        let y: [f64; 3] = self.value(b).try_into().unwrap();
        let (v, off) = self.push(3, 0, Op::Mat3Vec(a, b));
        for r in 0..3 {
            self.vals[off + r] = x[3 * r] * y[0] + x[3 * r + 1] * y[1] + x[3 * r + 2] * y[2];
        }
        v
    }

    /// Intrinsic XYZ Euler angles to a row-major rotation matrix.
    pub fn euler(&mut self, a: Var) -> Var {
        let x: [f64; 3] = self.value(a).try_into().unwrap();
        let (v, off) = self.push(9, 0, Op::Euler(a));
        let m = euler_parts(&x).0;
        self.vals[off..off + 9].copy_from_slice(&m);
        v
    }

    /// Confidence-weighted squared reprojection error of the points in `x`
    /// (3 per point), shifted by `offset`, against `targets` `(px, py, sigma)`.
    /// Points behind the camera are charged a constant residual of
    /// [`BEHIND_CAMERA_RESIDUAL`] pixels and pass no gradient.
    pub fn reprojection(&mut self, x: Var, offset: Option<Var>, cam: CameraConst, targets: &[[f64; 3]]) -> Var {
        let k = targets.len();
        assert_eq!(self.dim(x), 3 * k);
        let ci = self.cams.len();
        self.cams.push(cam);
        let data = self.data.len();
        for t in targets {
            self.data.extend_from_slice(t);
        }
        let o = offset.map(|o| self.value(o).to_vec()).unwrap_or(vec![0.0; 3]);
        let xs = self.value(x).to_vec();
        let mut total = 0.0;
        for i in 0..k {
            let p = [xs[3 * i] + o[0], xs[3 * i + 1] + o[1], xs[3 * i + 2] + o[2]];
            let t = &targets[i];
            total += t[2] * reproj_point(&cam, &p, t).0;
        }
        let (v, off) = self.push(1, 0, Op::Reproj { x, offset, cam: ci, data });
        self.vals[off] = total;
        v
    }

    /// Reverse pass from scalar `loss`. Parameter gradients are added into
    /// `grads`; the returned buffer holds the gradient of every node.
    pub fn backward(&self, loss: Var, params: &ParamSet, grads: &mut ParamGrads) -> NodeGrads {
        assert_eq!(self.dim(loss), 1, "loss must be scalar");
        let mut g = vec![0.0; self.vals.len()];
        g[self.nodes[loss.0].off] = 1.0;
        let mut scratch = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = self.nodes[i];
            let gr = node.off..node.off + node.len;
            if matches!(node.op, Op::Leaf) || g[gr.clone()].iter().all(|v| *v == 0.0) {
                continue;
            }
            let dy: Vec<f64> = g[gr.clone()].to_vec();
            match node.op {
                Op::Leaf => {}
                Op::Linear { w, b, args } => {
                    let wt = params.get(w);
                    let cols = wt.cols;
                    if let Some(b) = b {
                        for (gb, d) in grads.grads[b.0].iter_mut().zip(&dy) {
                            *gb += d;
                        }
                    }
                    let mut c0 = 0;
                    for a in &self.idx[args.0..args.0 + args.1] {
                        let an = self.nodes[*a];
                        let x = &self.vals[an.off..an.off + an.len];
                        let gw = &mut grads.grads[w.0];
                        for (r, d) in dy.iter().enumerate() {
                            if *d == 0.0 {
                                continue;
                            }
                            let row = &wt.data[r * cols + c0..r * cols + c0 + an.len];
                            let grow = &mut gw[r * cols + c0..r * cols + c0 + an.len];
                            for k in 0..an.len {
                                grow[k] += d * x[k];
                                g[an.off + k] += d * row[k];
                            }
                        }
                        c0 += an.len;
                    }
                }
                Op::Gru { w, u, b, x, h } => {
                    let xn = self.nodes[x.0];
                    let hn = self.nodes[h.0];
                    let hd = hn.len;
                    let saved = &self.vals[node.off..node.aux + gru_cell_scratch(hd)];
                    let mut dx = vec![0.0; xn.len];
                    let mut dh = vec![0.0; hd];
                    let (gw, gu, gb) = three_mut(&mut grads.grads, w.0, u.0, b.0);
                    gru_cell_backward(
                        params.data(w),
                        params.data(u),
                        &self.vals[xn.off..xn.off + xn.len],
                        &self.vals[hn.off..hn.off + hd],
                        saved,
                        &dy,
                        gw,
                        gu,
                        gb,
                        &mut dx,
                        &mut dh,
                        &mut scratch,
                    );
                    add_into(&mut g[xn.off..xn.off + xn.len], &dx);
                    add_into(&mut g[hn.off..hn.off + hd], &dh);
                }
                Op::Add(a, b) => {
                    let (oa, ob) = (self.nodes[a.0].off, self.nodes[b.0].off);
                    for k in 0..dy.len() {
                        g[oa + k] += dy[k];
                        g[ob + k] += dy[k];
                    }
                }
                Op::Sub(a, b) => {
                    let (oa, ob) = (self.nodes[a.0].off, self.nodes[b.0].off);
                    for k in 0..dy.len() {
                        g[oa + k] += dy[k];
                        g[ob + k] -= dy[k];
                    }
                }
                Op::Mul(a, b) => {
                    let (oa, ob) = (self.nodes[a.0].off, self.nodes[b.0].off);
                    for k in 0..dy.len() {
                        let (va, vb) = (self.vals[oa + k], self.vals[ob + k]);
                        g[oa + k] += dy[k] * vb;
                        g[ob + k] += dy[k] * va;
                    }
                }
                Op::Scale(a, s) => {
                    let oa = self.nodes[a.0].off;
                    for k in 0..dy.len() {
                        g[oa + k] += dy[k] * s;
                    }
                }
                Op::Sum(a) => {
                    let an = self.nodes[a.0];
                    for k in 0..an.len {
                        g[an.off + k] += dy[0];
                    }
                }
                Op::SumSq(a) => {
                    let an = self.nodes[a.0];
                    for k in 0..an.len {
                        g[an.off + k] += 2.0 * dy[0] * self.vals[an.off + k];
                    }
                }
                Op::Norm(a) => {
                    let an = self.nodes[a.0];
                    let n = self.vals[node.off];
                    if n > 0.0 {
                        for k in 0..an.len {
                            g[an.off + k] += dy[0] * self.vals[an.off + k] / n;
                        }
                    }
                }
                Op::Slice(a, start) => {
                    let oa = self.nodes[a.0].off + start;
                    for k in 0..dy.len() {
                        g[oa + k] += dy[k];
                    }
                }
                Op::Gather { ranges } => {
                    for (i, d) in dy.iter().enumerate() {
                        for e in self.ranges[ranges + i]..self.ranges[ranges + i + 1] {
                            let (var, k, w) = self.gather[e];
                            g[self.nodes[var].off + k] += w * d;
                        }
                    }
                }
                Op::GramSchmidt(a) => {
                    let an = self.nodes[a.0];
                    let x: [f64; 6] = self.vals[an.off..an.off + 6].try_into().unwrap();
                    let m: [f64; 9] = self.vals[node.off..node.off + 9].try_into().unwrap();
                    let (n1, n2) = (self.vals[node.aux], self.vals[node.aux + 1]);
                    let dx = gs_backward(&x, &m, n1, n2, &dy);
                    add_into(&mut g[an.off..an.off + 6], &dx);
                }
                Op::Mat3Mul(a, b) => {
                    let (oa, ob) = (self.nodes[a.0].off, self.nodes[b.0].off);
                    let x: [f64; 9] = self.vals[oa..oa + 9].try_into().unwrap();
                    let y: [f64; 9] = self.vals[ob..ob + 9].try_into().unwrap();
                    for r in 0..3 {
                        for c in 0..3 {
                            let d = dy[3 * r + c];
                            for k in 0..3 {
                                g[oa + 3 * r + k] += d * y[3 * k + c];
                                g[ob + 3 * k + c] += d * x[3 * r + k];
                            }
                        }
                    }
                }
                Op::Mat3Vec(a, b) => {
                    let (oa, ob) = (self.nodes[a.0].off, self.nodes[b.0].off);
                    let x: [f64; 9] = self.vals[oa..oa + 9].try_into().unwrap();
                    let y: [f64; 3] = self.vals[ob..ob + 3].try_into().unwrap();
                    for r in 0..3 {
                        for k in 0..3 {
                            g[oa + 3 * r + k] += dy[r] * y[k];
                            g[ob + k] += dy[r] * x[3 * r + k];
                        }
                    }
                }
                Op::Euler(a) => {
                    let oa = self.nodes[a.0].off;
                    let x: [f64; 3] = self.vals[oa..oa + 3].try_into().unwrap();
                    let d = euler_parts(&x).1;
                    for k in 0..3 {
                        g[oa + k] += (0..9).map(|e| dy[e] * d[k][e]).sum::<f64>();
                    }
                }
                Op::Reproj { x, offset, cam, data } => {
                    let xn = self.nodes[x.0];
                    let cam = self.cams[cam];
                    let o: [f64; 3] = match offset {
                        Some(o) => {
                            let on = self.nodes[o.0].off;
                            self.vals[on..on + 3].try_into().unwrap()
                        }
                        None => [0.0; 3],
                    };
                    let mut go = [0.0; 3];
                    for i in 0..xn.len / 3 {
                        let b = xn.off + 3 * i;
                        let p = [self.vals[b] + o[0], self.vals[b + 1] + o[1], self.vals[b + 2] + o[2]];
                        let t: [f64; 3] = self.data[data + 3 * i..data + 3 * i + 3].try_into().unwrap();
                        let (_, grad) = reproj_point(&cam, &p, &t);
                        for k in 0..3 {
                            let d = dy[0] * t[2] * grad[k];
                            g[b + k] += d;
                            go[k] += d;
                        }
                    }
                    if let Some(o) = offset {
                        let on = self.nodes[o.0].off;
                        for k in 0..3 {
                            g[on + k] += go[k];
                        }
                    }
                }
            }
        }
        NodeGrads { g }
    }
}

/// Gradients of every recorded node.
pub struct NodeGrads {
    g: Vec<f64>,
}

impl NodeGrads {
    pub fn wrt<'a>(&'a self, tape: &Tape, v: Var) -> &'a [f64] {
        let n = &tape.nodes[v.0];
        &self.g[n.off..n.off + n.len]
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn three_mut(v: &mut [Vec<f64>], a: usize, b: usize, c: usize) -> (&mut [f64], &mut [f64], &mut [f64]) {
    assert!(a != b && b != c && a != c);
    let pa: *mut Vec<f64> = &mut v[a];
    let pb: *mut Vec<f64> = &mut v[b];
    let pc: *mut Vec<f64> = &mut v[c];
    // SAFETY: the three indices are distinct, so the borrows do not alias.
    unsafe { ((*pa).as_mut_slice(), (*pb).as_mut_slice(), (*pc).as_mut_slice()) }
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Returns the row-major matrix `[b1 b2 b3]` (columns) and the two norms.
fn gs_forward(x: &[f64; 6]) -> ([f64; 9], f64, f64) {
    let a1 = [x[0], x[1], x[2]];
    let a2 = [x[3], x[4], x[5]];
    let n1 = dot3(&a1, &a1).sqrt().max(GS_EPS);
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let d = dot3(&b1, &a2);
    let u = [a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]];
    let n2 = dot3(&u, &u).sqrt().max(GS_EPS);
    let b2 = [u[0] / n2, u[1] / n2, u[2] / n2];
    let b3 = cross(&b1, &b2);
    let mut m = [0.0; 9];
    for r in 0..3 {
        m[3 * r] = b1[r];
        m[3 * r + 1] = b2[r];
        m[3 * r + 2] = b3[r];
    }
    (m, n1, n2)
}

fn gs_backward(x: &[f64; 6], m: &[f64; 9], n1: f64, n2: f64, dy: &[f64]) -> [f64; 6] {
    let col = |c: usize, v: &[f64]| [v[c], v[3 + c], v[6 + c]];
    let (b1, b2, b3) = (col(0, m), col(1, m), col(2, m));
    let _ = b3;
    let (mut g1, mut g2, g3) = (col(0, dy), col(1, dy), col(2, dy));
    // b3 = b1 x b2
    let t1 = cross(&b2, &g3);
    let t2 = cross(&g3, &b1);
    for k in 0..3 {
        g1[k] += t1[k];
        g2[k] += t2[k];
    }
    // b2 = u / |u|
    let p = dot3(&b2, &g2);
    let gu = [(g2[0] - p * b2[0]) / n2, (g2[1] - p * b2[1]) / n2, (g2[2] - p * b2[2]) / n2];
    // u = a2 - (b1 . a2) b1
    let a2 = [x[3], x[4], x[5]];
    let d = dot3(&b1, &a2);
    let bg = dot3(&b1, &gu);
    let ga2 = [gu[0] - bg * b1[0], gu[1] - bg * b1[1], gu[2] - bg * b1[2]];
    for k in 0..3 {
        g1[k] -= d * gu[k] + bg * a2[k];
    }
    // b1 = a1 / |a1|
    let q = dot3(&b1, &g1);
    let ga1 = [(g1[0] - q * b1[0]) / n1, (g1[1] - q * b1[1]) / n1, (g1[2] - q * b1[2]) / n1];
    [ga1[0], ga1[1], ga1[2], ga2[0], ga2[1], ga2[2]]
}

fn mat3(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = a[3 * r] * b[c] + a[3 * r + 1] * b[3 + c] + a[3 * r + 2] * b[6 + c];
        }
    }
    out
}

/// `Rx(a) Ry(b) Rz(c)` and its three partial derivatives.
fn euler_parts(x: &[f64; 3]) -> ([f64; 9], [[f64; 9]; 3]) {
    let (sa, ca) = x[0].sin_cos();
    let (sb, cb) = x[1].sin_cos();
    let (sc, cc) = x[2].sin_cos();
    let rx = [1.0, 0.0, 0.0, 0.0, ca, -sa, 0.0, sa, ca];
    let ry = [cb, 0.0, sb, 0.0, 1.0, 0.0, -sb, 0.0, cb];
    let rz = [cc, -sc, 0.0, sc, cc, 0.0, 0.0, 0.0, 1.0];
    let drx = [0.0, 0.0, 0.0, 0.0, -sa, -ca, 0.0, ca, -sa];
    let dry = [-sb, 0.0, cb, 0.0, 0.0, 0.0, -cb, 0.0, -sb];
    let drz = [-sc, -cc, 0.0, cc, -sc, 0.0, 0.0, 0.0, 0.0];
    let yz = mat3(&ry, &rz);
    (
        mat3(&rx, &yz),
        [mat3(&drx, &yz), mat3(&rx, &mat3(&dry, &rz)), mat3(&rx, &mat3(&ry, &drz))],
    )
}

/// Squared residual of one point and its gradient w.r.t. the point.
fn reproj_point(cam: &CameraConst, p: &[f64; 3], t: &[f64; 3]) -> (f64, [f64; 3]) {
    let r = &cam.r;
    let xc = [
        r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + cam.t[0],
        r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + cam.t[1],
        r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + cam.t[2],
    ];
    if !(xc[2] > MIN_DEPTH) {
        return (BEHIND_CAMERA_RESIDUAL * BEHIND_CAMERA_RESIDUAL, [0.0; 3]);
    }
    let iz = 1.0 / xc[2];
    let u = cam.fx * xc[0] * iz + cam.cx;
    let v = cam.fy * xc[1] * iz + cam.cy;
    let (eu, ev) = (u - t[0], v - t[1]);
    // d(u, v)/d(xc)
    let du = [cam.fx * iz, 0.0, -cam.fx * xc[0] * iz * iz];
    let dv = [0.0, cam.fy * iz, -cam.fy * xc[1] * iz * iz];
    let gc = [2.0 * (eu * du[0] + ev * dv[0]), 2.0 * (eu * du[1] + ev * dv[1]), 2.0 * (eu * du[2] + ev * dv[2])];
    // back through R
    let gp = [
        r[0] * gc[0] + r[3] * gc[1] + r[6] * gc[2],
        r[1] * gc[0] + r[4] * gc[1] + r[7] * gc[2],
        r[2] * gc[0] + r[5] * gc[1] + r[8] * gc[2],
    ];
    (eu * eu + ev * ev, gp)
}

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Denominator floor of the relative error, so that entries whose true
/// gradient is zero are compared in absolute terms. Multiplied by the loss
/// magnitude when that exceeds one, which makes the check invariant to loss
/// scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;
pub const GRAD_CHECK_STEP: f64 = 1e-5;

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `grad` against central differences of `f` at `x` on the given
/// coordinates.
pub fn check_against_fd(x: &[f64], grad: &[f64], coords: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> GradCheckReport {
    let mut xs = x.to_vec();
    let floor = GRAD_CHECK_FLOOR * f(&xs).abs().max(1.0);
    let mut worst = (0.0, 0);
    for &i in coords {
        let x0 = xs[i];
        xs[i] = x0 + GRAD_CHECK_STEP;
        let fp = f(&xs);
        xs[i] = x0 - GRAD_CHECK_STEP;
        let fm = f(&xs);
        xs[i] = x0;
        let num = (fp - fm) / (2.0 * GRAD_CHECK_STEP);
        let e = rel_error(grad[i], num, floor);
        if !(e <= worst.0) {
            worst = (e, i);
        }
    }
    GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked: coords.len(),
    }
}

fn pick_coords(n: usize, limit: Option<usize>, seed: u64) -> Vec<usize> {
    match limit {
        Some(k) if k < n => {
            let mut v = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

/// Gradient check of a scalar loss built by `build` with respect to every
/// (or a seeded sample of `limit`) trainable parameter entries.
pub fn grad_check_params(
    params: &ParamSet,
    limit: Option<usize>,
    seed: u64,
    build: impl Fn(&mut Tape, &ParamSet) -> Var,
) -> GradCheckReport {
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    let mut grads = ParamGrads::zeros(params);
    tape.backward(loss, params, &mut grads);
    let flat: Vec<f64> = params.tensors.iter().flat_map(|t| t.data.iter().copied()).collect();
    let gflat: Vec<f64> = grads.grads.iter().flatten().copied().collect();
    let trainable: Vec<usize> = params
        .tensors
        .iter()
        .flat_map(|t| std::iter::repeat_n(t.trainable, t.data.len()))
        .enumerate()
        .filter(|(_, tr)| *tr)
        .map(|(i, _)| i)
        .collect();
    let coords: Vec<usize> = pick_coords(trainable.len(), limit, seed).into_iter().map(|i| trainable[i]).collect();
    let mut work = params.clone();
    check_against_fd(&flat, &gflat, &coords, |x| {
        let mut k = 0;
        for t in &mut work.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&x[k..k + n]);
            k += n;
        }
        let mut tape = Tape::new();
        let l = build(&mut tape, &work);
        tape.scalar(l)
    })
}

/// Gradient check with respect to a flat input vector.
pub fn grad_check_inputs(
    params: &ParamSet,
    x: &[f64],
    limit: Option<usize>,
    seed: u64,
    build: impl Fn(&mut Tape, &ParamSet, Var) -> Var,
) -> GradCheckReport {
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let loss = build(&mut tape, params, xv);
    let mut grads = ParamGrads::zeros(params);
    let g = tape.backward(loss, params, &mut grads);
    let gx = g.wrt(&tape, xv).to_vec();
    let coords = pick_coords(x.len(), limit, seed);
    check_against_fd(x, &gx, &coords, |xs| {
        let mut tape = Tape::new();
        let xv = tape.leaf(xs);
        let l = build(&mut tape, params, xv);
        tape.scalar(l)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{euler_to_matrix, rotation6d_to_matrix, Rotation6D};
    use nalgebra::Vector3;
    use rand::Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", 2, 3, vec![1.0; 6], true);
        let mut tape = Tape::new();
        let x = tape.leaf(&[1.0, 2.0, 3.0]);
        let y = tape.linear(&ps, w, None, &[x]);
        let z = tape.scale(y, 0.0);
        let l = tape.sum(z);
        let mut g = ParamGrads::zeros(&ps);
        let ng = tape.backward(l, &ps, &mut g);
        assert!(g.get(w).iter().all(|v| *v == 0.0));
        assert!(ng.wrt(&tape, x).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gram_schmidt_matches_kinematics_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = rand_vec(&mut rng, 6);
            let mut tape = Tape::new();
            let v = tape.leaf(&x);
            let m = tape.gram_schmidt(v);
            let r = rotation6d_to_matrix(&Rotation6D(x.clone().try_into().unwrap())).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((tape.value(m)[3 * i + j] - r[(i, j)]).abs() < 1e-14);
                }
            }
            let w = rand_vec(&mut rng, 9);
            let rep = grad_check_inputs(&ParamSet::new(), &x, None, 0, |t, _, xv| {
                let m = t.gram_schmidt(xv);
                let wl = t.leaf(&w);
                let p = t.mul(m, wl);
                let s = t.sum(p);
                let q = t.sum_sq(m);
                t.add(s, q)
            });
            assert!(rep.max_rel_error < 1e-6, "{:?}", rep);
        }
    }

    #[test]
    fn euler_matches_kinematics_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = rand_vec(&mut rng, 3);
            let mut tape = Tape::new();
            let v = tape.leaf(&x);
            let m = tape.euler(v);
            let r = euler_to_matrix(&Vector3::new(x[0], x[1], x[2]));
            for i in 0..3 {
                for j in 0..3 {
                    assert!((tape.value(m)[3 * i + j] - r[(i, j)]).abs() < 1e-15);
                }
            }
            let w = rand_vec(&mut rng, 9);
            let rep = grad_check_inputs(&ParamSet::new(), &x, None, 0, |t, _, xv| {
                let m = t.euler(xv);
                let wl = t.leaf(&w);
                let p = t.mul(m, wl);
                t.sum(p)
            });
            assert!(rep.max_rel_error < 1e-7, "{:?}", rep);
        }
    }

    #[test]
    fn elementary_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let w = ps.add("w", 4, 7, rand_vec(&mut rng, 28), true);
        let b = ps.add("b", 4, 1, rand_vec(&mut rng, 4), true);
        let x = rand_vec(&mut rng, 12);
        let build = |t: &mut Tape, ps: &ParamSet, xv: Var| {
            let a = t.slice(xv, 0, 3);
            let c = t.slice(xv, 3, 4);
            let y = t.linear(ps, w, Some(b), &[a, c]);
            let m1 = t.slice(xv, 3, 9);
            let s6 = t.slice(xv, 6, 6);
            let m2 = t.gram_schmidt(s6);
            let mm = t.mat3_mul(m1, m2);
            let v3 = t.slice(xv, 0, 3);
            let mv = t.mat3_vec(mm, v3);
            let g = t.gather(&[vec![(y, 0, 0.5), (mv, 2, -1.5)], vec![(y, 3, 2.0)], vec![]]);
            let n = t.norm(mv);
            let d = t.sub(y, y);
            let e = t.mul(y, y);
            let f = t.sum(e);
            let s = t.sum_sq(g);
            let k = t.scale(n, 3.0);
            let q = t.sum(d);
            t.add_all(&[f, s, k, q])
        };
        let rep = grad_check_inputs(&ps, &x, None, 0, build);
        assert!(rep.max_rel_error < 1e-6, "{:?}", rep);
        let rep = grad_check_params(&ps, None, 0, |t, ps| {
            let xv = t.leaf(&x);
            build(t, ps, xv)
        });
        assert!(rep.max_rel_error < 1e-6, "{:?}", rep);
    }

    #[test]
    fn reprojection_value_and_gradients() {
        let cam = CameraConst {
            fx: 1000.0,
            fy: 1000.0,
            cx: 500.0,
            cy: 400.0,
            r: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            t: [0.0; 3],
        };
        let mut tape = Tape::new();
        let x = tape.leaf(&[0.0, 0.0, 2.0]);
        let l = tape.reprojection(x, None, cam, &[[501.0, 400.0, 1.0]]);
        assert!((tape.scalar(l) - 1.0).abs() < 1e-12);
        let behind = tape.leaf(&[0.0, 0.0, -2.0]);
        let l = tape.reprojection(behind, None, cam, &[[501.0, 400.0, 0.5]]);
        assert_eq!(tape.scalar(l), 0.5e8);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<f64> = (0..4).flat_map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(2.0..4.0)]).collect();
        let targets: Vec<[f64; 3]> = (0..4).map(|_| [rng.random_range(300.0..700.0), rng.random_range(200.0..600.0), rng.random_range(0.0..1.0)]).collect();
        let mut x = pts.clone();
        x.extend_from_slice(&[0.1, -0.2, 0.3]);
        let rot = crate::kinematics::rotation::to_row_major(&crate::kinematics::euler_to_matrix(&Vector3::new(0.1, 0.2, -0.3)));
        let cam = CameraConst { r: rot, t: [0.05, 0.0, 0.4], ..cam };
        let rep = grad_check_inputs(&ParamSet::new(), &x, None, 0, |t, _, xv| {
            let p = t.slice(xv, 0, 12);
            let o = t.slice(xv, 12, 3);
            let l = t.reprojection(p, Some(o), cam, &targets);
            t.scale(l, 1e-4)
        });
        assert!(rep.max_rel_error < 1e-6, "{:?}", rep);
    }
}
