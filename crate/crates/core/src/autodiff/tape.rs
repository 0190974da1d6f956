use std::rc::Rc;

use super::kernels::{gemm, linear_resample_weights, permute_index, ConvGeom, ConvSpec};
use super::params::ParamStore;
use super::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink)>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Gradient accumulators handed to backward closures.
pub struct GradSink {
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    lens: Vec<usize>,
}

impl GradSink {
    /// Mutable gradient buffer for `v`, allocated on first use. `None` when `v`
    /// does not participate in differentiation.
    fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.requires[v.0] {
            return None;
        }
        let len = self.lens[v.0];
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn add(&mut self, v: Var, g: &[f64]) {
        if let Some(s) = self.slot(v) {
            for (a, b) in s.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients aligned with `store`; unused parameters get zeros.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.values().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        for &(pid, var) in &self.params {
            if let Some(g) = self.get(var) {
                for (a, b) in out[pid].data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        out
    }
}

/// Reverse-mode differentiation tape over `f64` tensors.
///
/// Every operation evaluates eagerly and, when any input requires a gradient,
/// records a closure that maps the output gradient onto its inputs.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: Vec<(usize, Var)>,
    relu_masks: ReluMasks,
}

/// Activation patterns of successive `relu` calls, for differencing without
/// crossing kinks.
#[derive(Debug, Default)]
enum ReluMasks {
    #[default]
    Off,
    Record(Vec<Vec<bool>>),
    Replay(Vec<Vec<bool>>, usize),
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true, params: Vec::new(), relu_masks: ReluMasks::Off }
    }

    /// A tape that records values only; `backward` yields no gradients.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false, params: Vec::new(), relu_masks: ReluMasks::Off }
    }

    /// Keeps the activation pattern of every later `relu` call.
    pub fn record_relu_masks(&mut self) {
        self.relu_masks = ReluMasks::Record(Vec::new());
    }

    pub fn take_relu_masks(&mut self) -> Vec<Vec<bool>> {
        match std::mem::take(&mut self.relu_masks) {
            ReluMasks::Record(m) | ReluMasks::Replay(m, _) => m,
            ReluMasks::Off => Vec::new(),
        }
    }

    /// Makes the i-th later `relu` call multiply by the i-th recorded mask
    /// instead of thresholding its input.
    pub fn replay_relu_masks(&mut self, masks: Vec<Vec<bool>>) {
        self.relu_masks = ReluMasks::Replay(masks, 0);
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    fn leaf_rc(&mut self, value: Rc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad: requires_grad && self.grad_enabled, backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf_rc(Rc::new(value), false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf_rc(Rc::new(value), true)
    }

    /// Leaf bound to parameter `name` of `store`; its gradient is reported by
    /// [`Gradients::for_params`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        let (pid, value) = store
            .get_full(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let v = self.leaf_rc(value, true);
        self.params.push((pid, v));
        v
    }

    fn push<F>(&mut self, value: Tensor, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&[f64], &mut GradSink) + 'static,
    {
        self.push_rc(Rc::new(value), inputs, backward)
    }

    fn push_rc<F>(&mut self, value: Rc<Tensor>, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&[f64], &mut GradSink) + 'static,
    {
        let requires = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward: Option<BackwardFn> = if requires { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node { value, requires_grad: requires, backward });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let n = loss.0 + 1;
        let mut sink = GradSink {
            grads: vec![None; n],
            requires: self.nodes[..n].iter().map(|node| node.requires_grad).collect(),
            lens: self.nodes[..n].iter().map(|node| node.value.len()).collect(),
        };
        if sink.requires[loss.0] {
            sink.grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let Some(backward) = &self.nodes[i].backward else { continue };
            if let Some(g) = sink.grads[i].take() {
                backward(&g, &mut sink);
            }
        }
        Gradients { grads: sink.grads, params: self.params.clone() }
    }

    // ---- elementwise ----

    fn binary_same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        self.push(out, &[a, b], move |g, s| {
            s.add(a, g);
            s.add(b, g);
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        self.push(out, &[a, b], move |g, s| {
            s.add(a, g);
            if let Some(d) = s.slot(b) {
                for (x, y) in d.iter_mut().zip(g) {
                    *x -= y;
                }
            }
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let (ar, br) = (self.rc(a), self.rc(b));
        let data = ar.data().iter().zip(br.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ar.shape().to_vec(), data);
        self.push(out, &[a, b], move |g, s| {
            if let Some(d) = s.slot(a) {
                for ((x, gv), bv) in d.iter_mut().zip(g).zip(br.data()) {
                    *x += gv * bv;
                }
            }
            if let Some(d) = s.slot(b) {
                for ((x, gv), av) in d.iter_mut().zip(g).zip(ar.data()) {
                    *x += gv * av;
                }
            }
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "div");
        let (ar, br) = (self.rc(a), self.rc(b));
        let data = ar.data().iter().zip(br.data()).map(|(x, y)| x / y).collect();
        let out = Tensor::new(ar.shape().to_vec(), data);
        self.push(out, &[a, b], move |g, s| {
            if let Some(d) = s.slot(a) {
                for ((x, gv), bv) in d.iter_mut().zip(g).zip(br.data()) {
                    *x += gv / bv;
                }
            }
            if let Some(d) = s.slot(b) {
                for (((x, gv), av), bv) in d.iter_mut().zip(g).zip(ar.data()).zip(br.data()) {
                    *x -= gv * av / (bv * bv);
                }
            }
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect());
        self.push(out, &[a], move |g, s| {
            if let Some(d) = s.slot(a) {
                for (x, gv) in d.iter_mut().zip(g) {
                    *x += gv * c;
                }
            }
        })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x + c).collect());
        self.push(out, &[a], move |g, s| s.add(a, g))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        // df(x, y) is the derivative at input x with output y
        let ar = self.rc(a);
        let out = Tensor::new(ar.shape().to_vec(), ar.data().iter().map(|&x| f(x)).collect());
        let out = Rc::new(out);
        let yr = Rc::clone(&out);
        self.push_rc(out, &[a], move |g, s| {
            if let Some(d) = s.slot(a) {
                for (((x, gv), &xv), &yv) in d.iter_mut().zip(g).zip(ar.data()).zip(yr.data()) {
                    *x += gv * df(xv, yv);
                }
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        match &mut self.relu_masks {
            ReluMasks::Off => {}
            ReluMasks::Record(masks) => {
                masks.push(self.nodes[a.0].value.data().iter().map(|&x| x > 0.0).collect());
            }
            ReluMasks::Replay(masks, next) => {
                let mask = masks.get(*next).expect("more relu calls than recorded masks");
                assert_eq!(mask.len(), self.nodes[a.0].value.len(), "relu mask length changed");
                let m = Tensor::new(
                    self.nodes[a.0].value.shape().to_vec(),
                    mask.iter().map(|&on| f64::from(u8::from(on))).collect(),
                );
                *next += 1;
                let m = self.constant(m);
                return self.mul(a, m);
            }
        }
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    // ---- broadcasting and reductions ----

    /// Adds `b` (length = last axis of `x`) to every row of `x`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Var {
        let n = self.value(x).last_dim();
        assert_eq!(self.value(b).len(), n, "bias_add: bias length");
        let xv = self.value(x);
        let bv = self.value(b).data();
        let data = xv.data().chunks(n).flat_map(|row| row.iter().zip(bv).map(|(p, q)| p + q)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data);
        self.push(out, &[x, b], move |g, s| {
            s.add(x, g);
            if let Some(d) = s.slot(b) {
                for row in g.chunks(n) {
                    for (a, gv) in d.iter_mut().zip(row) {
                        *a += gv;
                    }
                }
            }
        })
    }

    /// Multiplies row `r` of `x` (rows along the last axis) by `s[r]`.
    pub fn row_scale(&mut self, x: Var, sc: Var) -> Var {
        let (xr, sr) = (self.rc(x), self.rc(sc));
        let n = xr.last_dim();
        assert_eq!(xr.len() / n, sr.len(), "row_scale: one scale per row");
        let data = xr
            .data()
            .chunks(n)
            .zip(sr.data())
            .flat_map(|(row, &f)| row.iter().map(move |v| v * f))
            .collect();
        let out = Tensor::new(xr.shape().to_vec(), data);
        self.push(out, &[x, sc], move |g, s| {
            if let Some(d) = s.slot(x) {
                for ((drow, grow), &f) in d.chunks_mut(n).zip(g.chunks(n)).zip(sr.data()) {
                    for (a, gv) in drow.iter_mut().zip(grow) {
                        *a += gv * f;
                    }
                }
            }
            if let Some(d) = s.slot(sc) {
                for ((a, grow), xrow) in d.iter_mut().zip(g.chunks(n)).zip(xr.data().chunks(n)) {
                    *a += grow.iter().zip(xrow).map(|(p, q)| p * q).sum::<f64>();
                }
            }
        })
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut shape = xv.shape()[..xv.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let data = xv.data().chunks(n).map(|r| r.iter().sum()).collect();
        let out = Tensor::new(shape, data);
        self.push(out, &[x], move |g, s| {
            if let Some(d) = s.slot(x) {
                for (drow, &gv) in d.chunks_mut(n).zip(g) {
                    for a in drow {
                        *a += gv;
                    }
                }
            }
        })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), &[x], move |g, s| {
            if let Some(d) = s.slot(x) {
                for a in d {
                    *a += g[0];
                }
            }
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let sum = self.sum_all(x);
        self.scale(sum, 1.0 / n)
    }

    /// Repeats a single-element tensor into `shape`.
    pub fn broadcast(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let v = self.value(x).item();
        self.push(Tensor::full(shape, v), &[x], move |g, s| {
            if let Some(d) = s.slot(x) {
                d[0] += g.iter().sum::<f64>();
            }
        })
    }

    // ---- linear algebra ----

    /// `x @ w` (or `x @ wᵀ` with `transpose_w`), treating all leading axes of `x` as rows.
    pub fn matmul(&mut self, x: Var, w: Var, transpose_w: bool) -> Var {
        let (xr, wr) = (self.rc(x), self.rc(w));
        assert_eq!(wr.shape().len(), 2, "matmul: weight must be 2-D");
        let (wk, wn) = if transpose_w { (wr.shape()[1], wr.shape()[0]) } else { (wr.shape()[0], wr.shape()[1]) };
        let k = xr.last_dim();
        assert_eq!(k, wk, "matmul: inner dims {k} vs {wk}");
        let m = xr.len() / k;
        let n = wn;
        let mut data = vec![0.0; m * n];
        gemm(false, transpose_w, m, n, k, xr.data(), wr.data(), &mut data);
        let mut shape = xr.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data);
        self.push(out, &[x, w], move |g, s| {
            if let Some(d) = s.slot(x) {
                if transpose_w {
                    gemm(false, false, m, k, n, g, wr.data(), d);
                } else {
                    gemm(false, true, m, k, n, g, wr.data(), d);
                }
            }
            if let Some(d) = s.slot(w) {
                if transpose_w {
                    gemm(true, false, n, k, m, g, xr.data(), d);
                } else {
                    gemm(true, false, k, n, m, xr.data(), g, d);
                }
            }
        })
    }

    /// Batched product of `(B, m, k)` with `(B, k, n)`, or `(B, n, k)` when `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (ar, br) = (self.rc(a), self.rc(b));
        assert_eq!(ar.shape().len(), 3, "bmm: lhs must be 3-D");
        assert_eq!(br.shape().len(), 3, "bmm: rhs must be 3-D");
        let (bs, m, k) = (ar.shape()[0], ar.shape()[1], ar.shape()[2]);
        assert_eq!(br.shape()[0], bs, "bmm: batch mismatch");
        let (bk, n) = if transpose_b { (br.shape()[2], br.shape()[1]) } else { (br.shape()[1], br.shape()[2]) };
        assert_eq!(bk, k, "bmm: inner dims");
        let mut data = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                false,
                transpose_b,
                m,
                n,
                k,
                &ar.data()[i * m * k..(i + 1) * m * k],
                &br.data()[i * k * n..(i + 1) * k * n],
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::new(vec![bs, m, n], data);
        self.push(out, &[a, b], move |g, s| {
            if let Some(d) = s.slot(a) {
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &br.data()[i * k * n..(i + 1) * k * n];
                    gemm(false, !transpose_b, m, k, n, gi, bi, &mut d[i * m * k..(i + 1) * m * k]);
                }
            }
            if let Some(d) = s.slot(b) {
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &ar.data()[i * m * k..(i + 1) * m * k];
                    let di = &mut d[i * k * n..(i + 1) * k * n];
                    if transpose_b {
                        gemm(true, false, n, k, m, gi, ai, di);
                    } else {
                        gemm(true, false, k, n, m, ai, gi, di);
                    }
                }
            }
        })
    }

    // ---- normalisation ----

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut total = 0.0;
            for &v in row {
                let e = (v - mx).exp();
                total += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e /= total;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data);
        let out = Rc::new(out);
        let yr = Rc::clone(&out);
        self.push_rc(out, &[x], move |g, s| {
            if let Some(d) = s.slot(x) {
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(yr.data().chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv += yv * (gv - dot);
                    }
                }
            }
        })
    }

    /// Layer normalisation over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        assert_eq!(self.value(gain).len(), n);
        assert_eq!(self.value(shift).len(), n);
        let gr = self.rc(gain);
        let br = self.value(shift).data().to_vec();
        let rows = xv.len() / n;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        for row in xv.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|v| (v - mean) * is));
        }
        let data = xhat
            .chunks(n)
            .flat_map(|row| row.iter().zip(gr.data()).zip(&br).map(|((h, g), b)| h * g + b))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data);
        self.push(out, &[x, gain, shift], move |g, s| {
            if let Some(d) = s.slot(x) {
                for (r, (drow, grow)) in d.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                    let hrow = &xhat[r * n..(r + 1) * n];
                    let dh: Vec<f64> = grow.iter().zip(gr.data()).map(|(a, b)| a * b).collect();
                    let mean_dh = dh.iter().sum::<f64>() / n as f64;
                    let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for ((dv, dhv), hv) in drow.iter_mut().zip(&dh).zip(hrow) {
                        *dv += inv_std[r] * (dhv - mean_dh - hv * mean_dh_h);
                    }
                }
            }
            if let Some(d) = s.slot(gain) {
                for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for ((dv, gv), hv) in d.iter_mut().zip(grow).zip(hrow) {
                        *dv += gv * hv;
                    }
                }
            }
            if let Some(d) = s.slot(shift) {
                for grow in g.chunks(n) {
                    for (dv, gv) in d.iter_mut().zip(grow) {
                        *dv += gv;
                    }
                }
            }
        })
    }

    /// Zeroes entries where `mask` is zero and rescales each row to sum to one.
    pub fn masked_renorm(&mut self, p: Var, mask: Rc<Vec<f64>>) -> Var {
        let pv = self.value(p);
        let n = pv.last_dim();
        assert_eq!(mask.len(), pv.len());
        let masked: Vec<f64> = pv.data().iter().zip(mask.iter()).map(|(a, m)| a * m).collect();
        let sums: Vec<f64> = masked.chunks(n).map(|r| r.iter().sum()).collect();
        let data: Vec<f64> = masked
            .chunks(n)
            .zip(&sums)
            .flat_map(|(r, &t)| r.iter().map(move |v| v / t))
            .collect();
        let out = Tensor::new(pv.shape().to_vec(), data);
        let out = Rc::new(out);
        let yr = Rc::clone(&out);
        self.push_rc(out, &[p], move |g, s| {
            if let Some(d) = s.slot(p) {
                for (r, ((drow, grow), yrow)) in
                    d.chunks_mut(n).zip(g.chunks(n)).zip(yr.data().chunks(n)).enumerate()
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    let mrow = &mask[r * n..(r + 1) * n];
                    for ((dv, gv), mv) in drow.iter_mut().zip(grow).zip(mrow) {
                        *dv += mv * (gv - dot) / sums[r];
                    }
                }
            }
        })
    }

    // ---- layout ----

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let xv = self.value(x);
        assert_eq!(shape.iter().product::<usize>(), xv.len(), "reshape {:?} -> {shape:?}", xv.shape());
        let out = Tensor::new(shape, xv.data().to_vec());
        self.push(out, &[x], move |g, s| s.add(x, g))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(axes.len(), xv.shape().len(), "permute: rank");
        let map = permute_index(xv.shape(), axes);
        let shape: Vec<usize> = axes.iter().map(|&a| xv.shape()[a]).collect();
        let data = map.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(shape, data);
        self.push(out, &[x], move |g, s| {
            if let Some(d) = s.slot(x) {
                for (gv, &i) in g.iter().zip(&map) {
                    d[i] += gv;
                }
            }
        })
    }

    /// Rows `idx` of `x` viewed as `(rows, last_dim)`.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &r in idx.iter() {
            data.extend_from_slice(&xv.data()[r * n..(r + 1) * n]);
        }
        let out = Tensor::new(vec![idx.len(), n], data);
        self.push(out, &[x], move |g, s| {
            if let Some(d) = s.slot(x) {
                for (grow, &r) in g.chunks(n).zip(idx.iter()) {
                    for (a, b) in d[r * n..(r + 1) * n].iter_mut().zip(grow) {
                        *a += b;
                    }
                }
            }
        })
    }

    /// Adds row `i` of `x` into row `idx[i]` of a zero `(rows, last_dim)` tensor.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Rc<Vec<usize>>, rows: usize) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        assert_eq!(xv.len() / n, idx.len());
        let mut data = vec![0.0; rows * n];
        for (row, &r) in xv.data().chunks(n).zip(idx.iter()) {
            for (a, b) in data[r * n..(r + 1) * n].iter_mut().zip(row) {
                *a += b;
            }
        }
        let out = Tensor::new(vec![rows, n], data);
        self.push(out, &[x], move |g, s| {
            if let Some(d) = s.slot(x) {
                for (drow, &r) in d.chunks_mut(n).zip(idx.iter()) {
                    for (a, b) in drow.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *a += b;
                    }
                }
            }
        })
    }

    /// Entries `x[rows[i], col]` of `x` viewed as `(rows, last_dim)`.
    pub fn select_column(&mut self, x: Var, rows: Rc<Vec<usize>>, col: usize) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        assert!(col < n);
        let data = rows.iter().map(|&r| xv.data()[r * n + col]).collect();
        let out = Tensor::new(vec![rows.len()], data);
        self.push(out, &[x], move |g, s| {
            if let Some(d) = s.slot(x) {
                for (gv, &r) in g.iter().zip(rows.iter()) {
                    d[r * n + col] += gv;
                }
            }
        })
    }

    // ---- convolution and resampling ----

    /// 2-D convolution of NHWC `x` with `(kh, kw, c_in, c_out)` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Var {
        let (xr, wr) = (self.rc(x), self.rc(w));
        assert_eq!(xr.shape().len(), 4, "conv2d: input must be NHWC");
        assert_eq!(wr.shape().len(), 4, "conv2d: weight must be HWIO");
        let (n, h, wd, c) = (xr.shape()[0], xr.shape()[1], xr.shape()[2], xr.shape()[3]);
        let (kh, kw, ci, co) = (wr.shape()[0], wr.shape()[1], wr.shape()[2], wr.shape()[3]);
        assert_eq!(c, ci, "conv2d: channel mismatch");
        let ho = spec.output_len(h, kh, 0).expect("conv2d: kernel larger than padded input");
        let wo = spec.output_len(wd, kw, 1).expect("conv2d: kernel larger than padded input");
        let geom = ConvGeom { n, h, w: wd, c, kh, kw, co, ho, wo, spec };
        let mut data = vec![0.0; n * ho * wo * co];
        geom.forward(xr.data(), wr.data(), &mut data);
        let out = Tensor::new(vec![n, ho, wo, co], data);
        let conv = self.push(out, &[x, w], move |g, s| {
            if let Some(d) = s.slot(x) {
                geom.backward_input(g, wr.data(), d);
            }
            if let Some(d) = s.slot(w) {
                geom.backward_weight(g, xr.data(), d);
            }
        });
        match bias {
            Some(b) => self.bias_add(conv, b),
            None => conv,
        }
    }

    /// Linear resampling of axis `axis` to `out_len` samples (half-pixel centres).
    pub fn resample_linear(&mut self, x: Var, axis: usize, out_len: usize) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let in_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let weights = linear_resample_weights(in_len, out_len);
        let mut data = vec![0.0; outer * out_len * inner];
        for o in 0..outer {
            let src = &xv.data()[o * in_len * inner..(o + 1) * in_len * inner];
            let dst = &mut data[o * out_len * inner..(o + 1) * out_len * inner];
            for (i, &(i0, i1, w0, w1)) in weights.iter().enumerate() {
                for j in 0..inner {
                    dst[i * inner + j] = w0 * src[i0 * inner + j] + w1 * src[i1 * inner + j];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = out_len;
        let out = Tensor::new(out_shape, data);
        self.push(out, &[x], move |g, s| {
            if let Some(d) = s.slot(x) {
                for o in 0..outer {
                    let gsrc = &g[o * out_len * inner..(o + 1) * out_len * inner];
                    let ddst = &mut d[o * in_len * inner..(o + 1) * in_len * inner];
                    for (i, &(i0, i1, w0, w1)) in weights.iter().enumerate() {
                        for j in 0..inner {
                            let gv = gsrc[i * inner + j];
                            ddst[i0 * inner + j] += w0 * gv;
                            ddst[i1 * inner + j] += w1 * gv;
                        }
                    }
                }
            }
        })
    }
}
