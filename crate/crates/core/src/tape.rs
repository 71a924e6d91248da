//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation eagerly. Each recorded node keeps its
//! forward value and a closure that pushes the output gradient back onto its
//! inputs. Only nodes that (transitively) depend on a gradient-requiring leaf
//! take part in the backward sweep.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [m, n] => (*m, *n),
            s => panic!("expected a matrix, found shape {s:?}"),
        }
    }

    fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape.as_slice() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => panic!("expected a rank-4 tensor, found shape {s:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient accumulators for a backward sweep.
pub struct Grads {
    needs: Vec<bool>,
    slots: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Grads {
    #[inline]
    pub fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Accumulator for `v`, allocated as zeros on first use.
    pub fn acc(&mut self, v: Var) -> &mut [f64] {
        let n = self.sizes[v.0];
        self.slots[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots[v.0].as_deref()
    }

    /// Gradient of `v`, zeros if nothing reached it.
    pub fn get_or_zeros(&self, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.sizes[v.0]])
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &mut Grads)>;

struct Node {
    value: Tensor,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad: requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], backward: BackwardFn) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad,
            backward: needs_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a single-element output.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.nodes[output.0].value.len(), 1, "backward from a non-scalar");
        let mut grads = Grads {
            needs: self.nodes.iter().map(|n| n.needs_grad).collect(),
            slots: (0..self.nodes.len()).map(|_| None).collect(),
            sizes: self.nodes.iter().map(|n| n.value.len()).collect(),
        };
        grads.slots[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            if let Some(g) = grads.slots[i].take() {
                back(&g, &mut grads);
                grads.slots[i] = Some(g);
            }
        }
        grads
    }

    // ---- element-wise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape, y.shape, "add shape mismatch");
        let out = Tensor::new(x.shape.clone(), x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect());
        self.push(
            out,
            &[a, b],
            Box::new(move |g, gr| {
                for v in [a, b] {
                    if gr.wants(v) {
                        for (acc, gi) in gr.acc(v).iter_mut().zip(g) {
                            *acc += gi;
                        }
                    }
                }
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape, y.shape, "sub shape mismatch");
        let out = Tensor::new(x.shape.clone(), x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect());
        self.push(
            out,
            &[a, b],
            Box::new(move |g, gr| {
                if gr.wants(a) {
                    for (acc, gi) in gr.acc(a).iter_mut().zip(g) {
                        *acc += gi;
                    }
                }
                if gr.wants(b) {
                    for (acc, gi) in gr.acc(b).iter_mut().zip(g) {
                        *acc -= gi;
                    }
                }
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a).clone(), self.value(b).clone());
        assert_eq!(x.shape, y.shape, "mul shape mismatch");
        let out = Tensor::new(x.shape.clone(), x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect());
        self.push(
            out,
            &[a, b],
            Box::new(move |g, gr| {
                if gr.wants(a) {
                    for ((acc, gi), yi) in gr.acc(a).iter_mut().zip(g).zip(&y.data) {
                        *acc += gi * yi;
                    }
                }
                if gr.wants(b) {
                    for ((acc, gi), xi) in gr.acc(b).iter_mut().zip(g).zip(&x.data) {
                        *acc += gi * xi;
                    }
                }
            }),
        )
    }

    /// `a * mul + add` with constant coefficients.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape.clone(), x.data.iter().map(|v| v * mul + add).collect());
        self.push(
            out,
            &[a],
            Box::new(move |g, gr| {
                for (acc, gi) in gr.acc(a).iter_mut().zip(g) {
                    *acc += gi * mul;
                }
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a).clone();
        let sig: Vec<f64> = x.data.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let out = Tensor::new(x.shape.clone(), x.data.iter().zip(&sig).map(|(v, s)| v * s).collect());
        self.push(
            out,
            &[a],
            Box::new(move |g, gr| {
                for ((acc, gi), (v, s)) in gr.acc(a).iter_mut().zip(g).zip(x.data.iter().zip(&sig)) {
                    *acc += gi * s * (1.0 + v * (1.0 - s));
                }
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let x = self.value(a);
        let out = Tensor::new(shape, x.data.clone());
        self.push(
            out,
            &[a],
            Box::new(move |g, gr| {
                for (acc, gi) in gr.acc(a).iter_mut().zip(g) {
                    *acc += gi;
                }
            }),
        )
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(
            Tensor::scalar(s),
            &[a],
            Box::new(move |g, gr| {
                for acc in gr.acc(a).iter_mut() {
                    *acc += g[0];
                }
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        assert!(n > 0, "mean of an empty tensor");
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean squared difference to a constant target.
    pub fn mse(&mut self, a: Var, target: &[f64]) -> Var {
        let mask = vec![true; target.len()];
        self.masked_mse(a, target, &mask)
    }

    /// Mean squared difference over the flagged elements; zero if none are
    /// flagged.
    pub fn masked_mse(&mut self, a: Var, target: &[f64], mask: &[bool]) -> Var {
        let x = self.value(a).clone();
        assert_eq!(x.len(), target.len(), "mse length mismatch");
        assert_eq!(x.len(), mask.len(), "mask length mismatch");
        let n = mask.iter().filter(|&&m| m).count();
        let diff: Vec<f64> = x
            .data
            .iter()
            .zip(target)
            .zip(mask)
            .map(|((p, q), &m)| if m { p - q } else { 0.0 })
            .collect();
        let loss = if n == 0 {
            0.0
        } else {
            diff.iter().map(|d| d * d).sum::<f64>() / n as f64
        };
        self.push(
            Tensor::scalar(loss),
            &[a],
            Box::new(move |g, gr| {
                if n == 0 {
                    return;
                }
                let k = 2.0 * g[0] / n as f64;
                for (acc, d) in gr.acc(a).iter_mut().zip(&diff) {
                    *acc += k * d;
                }
            }),
        )
    }

    // ---- matrices -----------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let x = self.value(a).clone();
        let y = self.value(b).clone();
        let (m, k) = x.dims2();
        let (k2, n) = y.dims2();
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let xv = x.data[i * k + p];
                if xv == 0.0 {
                    continue;
                }
                for (o, yv) in row.iter_mut().zip(&y.data[p * n..(p + 1) * n]) {
                    *o += xv * yv;
                }
            }
        }
        self.push(
            Tensor::new(vec![m, n], out),
            &[a, b],
            Box::new(move |g, gr| {
                if gr.wants(a) {
                    let ga = gr.acc(a);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let yrow = &y.data[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(yrow).map(|(u, v)| u * v).sum::<f64>();
                        }
                    }
                }
                if gr.wants(b) {
                    let gb = gr.acc(b);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let xv = x.data[i * k + p];
                            for (acc, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *acc += xv * gv;
                            }
                        }
                    }
                }
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = x.dims2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x.data[i * n + j];
            }
        }
        self.push(
            Tensor::new(vec![n, m], out),
            &[a],
            Box::new(move |g, gr| {
                let ga = gr.acc(a);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }),
        )
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let x = self.value(a);
        let (m, n) = x.dims2();
        let b = self.value(bias);
        assert_eq!(b.len(), n, "bias length mismatch");
        let mut out = x.data.clone();
        for row in out.chunks_exact_mut(n) {
            for (o, bv) in row.iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        self.push(
            Tensor::new(vec![m, n], out),
            &[a, bias],
            Box::new(move |g, gr| {
                if gr.wants(a) {
                    for (acc, gi) in gr.acc(a).iter_mut().zip(g) {
                        *acc += gi;
                    }
                }
                if gr.wants(bias) {
                    let gb = gr.acc(bias);
                    for row in g.chunks_exact(n) {
                        for (acc, gi) in gb.iter_mut().zip(row) {
                            *acc += gi;
                        }
                    }
                }
            }),
        )
    }

    /// `x W + b` for a row-major batch `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let y = self.matmul(x, weight);
        self.add_row(y, bias)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = x.dims2();
        let mut out = x.data.clone();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let probs = out.clone();
        self.push(
            Tensor::new(vec![m, n], out),
            &[a],
            Box::new(move |g, gr| {
                let ga = gr.acc(a);
                for ((grow, prow), arow) in g.chunks_exact(n).zip(probs.chunks_exact(n)).zip(ga.chunks_exact_mut(n)) {
                    let dot: f64 = grow.iter().zip(prow).map(|(u, p)| u * p).sum();
                    for ((acc, gi), p) in arow.iter_mut().zip(grow).zip(prow) {
                        *acc += p * (gi - dot);
                    }
                }
            }),
        )
    }

    /// Mean cross-entropy of integer targets under per-row logits.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        let (m, n) = x.dims2();
        assert_eq!(m, targets.len(), "one target per logit row");
        let mut probs = x.data.clone();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_exact_mut(n).zip(targets) {
            assert!(t < n, "target {t} outside {n} classes");
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss += max + z.ln() - row[t];
            for v in row.iter_mut() {
                *v = (*v - max).exp() / z;
            }
        }
        let loss = if m == 0 { 0.0 } else { loss / m as f64 };
        let targets = targets.to_vec();
        self.push(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |g, gr| {
                if m == 0 {
                    return;
                }
                let k = g[0] / m as f64;
                let ga = gr.acc(logits);
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..n {
                        let ind = if j == t { 1.0 } else { 0.0 };
                        ga[i * n + j] += k * (probs[i * n + j] - ind);
                    }
                }
            }),
        )
    }

    /// Rows `ids` of a `V x d` table, as an `L x d` matrix.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let x = self.value(table);
        let (v, d) = x.dims2();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < v, "row {i} outside table of {v}");
            out.extend_from_slice(&x.data[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        self.push(
            Tensor::new(vec![ids.len(), d], out),
            &[table],
            Box::new(move |g, gr| {
                let gt = gr.acc(table);
                for (r, &i) in ids.iter().enumerate() {
                    for (acc, gi) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *acc += gi;
                    }
                }
            }),
        )
    }

    /// Column-wise mean of an `m x n` matrix, as `1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = x.dims2();
        assert!(m > 0, "mean over zero rows");
        let mut out = vec![0.0; n];
        for row in x.data.chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        self.push(
            Tensor::new(vec![1, n], out),
            &[a],
            Box::new(move |g, gr| {
                let ga = gr.acc(a);
                for row in ga.chunks_exact_mut(n) {
                    for (acc, gi) in row.iter_mut().zip(g) {
                        *acc += gi / m as f64;
                    }
                }
            }),
        )
    }

    /// Joins `1 x p` and `1 x q` into `1 x (p + q)`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let (p, q) = (x.len(), y.len());
        let mut out = x.data.clone();
        out.extend_from_slice(&y.data);
        self.push(
            Tensor::new(vec![1, p + q], out),
            &[a, b],
            Box::new(move |g, gr| {
                if gr.wants(a) {
                    for (acc, gi) in gr.acc(a).iter_mut().zip(&g[..p]) {
                        *acc += gi;
                    }
                }
                if gr.wants(b) {
                    for (acc, gi) in gr.acc(b).iter_mut().zip(&g[p..]) {
                        *acc += gi;
                    }
                }
            }),
        )
    }

    /// Packs single-element nodes into a `1 x n` row.
    pub fn stack(&mut self, items: &[Var]) -> Var {
        let vals: Vec<f64> = items.iter().map(|&v| self.value(v).item()).collect();
        let items = items.to_vec();
        let inputs = items.clone();
        self.push(
            Tensor::row(vals),
            &inputs,
            Box::new(move |g, gr| {
                for (&v, gi) in items.iter().zip(g) {
                    if gr.wants(v) {
                        gr.acc(v)[0] += gi;
                    }
                }
            }),
        )
    }

    // ---- convolution --------------------------------------------------------

    /// 3x3 same-padded convolution over `T x Cin x H x W` with weights
    /// `Cout x Cin x 3 x 3` and bias `Cout`.
    pub fn conv3x3(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let x = self.value(input).clone();
        let w = self.value(weight).clone();
        let (t_n, ci_n, h, wd) = x.dims4();
        let (co_n, ci_w, kh, kw) = w.dims4();
        assert_eq!((ci_w, kh, kw), (ci_n, 3, 3), "conv weight shape mismatch");
        let b = self.value(bias);
        assert_eq!(b.len(), co_n, "conv bias length mismatch");
        let plane = h * wd;
        let mut out = vec![0.0; t_n * co_n * plane];
        for t in 0..t_n {
            for co in 0..co_n {
                let o = &mut out[(t * co_n + co) * plane..][..plane];
                o.fill(b.data[co]);
                for ci in 0..ci_n {
                    let xin = &x.data[(t * ci_n + ci) * plane..][..plane];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wv = w.data[((co * ci_n + ci) * 3 + ky) * 3 + kx];
                            conv_tap(o, xin, h, wd, ky, kx, wv);
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![t_n, co_n, h, wd], out),
            &[input, weight, bias],
            Box::new(move |g, gr| {
                if gr.wants(bias) {
                    let gb = gr.acc(bias);
                    for t in 0..t_n {
                        for (co, acc) in gb.iter_mut().enumerate() {
                            *acc += g[(t * co_n + co) * plane..][..plane].iter().sum::<f64>();
                        }
                    }
                }
                if gr.wants(weight) {
                    let gw = gr.acc(weight);
                    for t in 0..t_n {
                        for co in 0..co_n {
                            let go = &g[(t * co_n + co) * plane..][..plane];
                            for ci in 0..ci_n {
                                let xin = &x.data[(t * ci_n + ci) * plane..][..plane];
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        gw[((co * ci_n + ci) * 3 + ky) * 3 + kx] +=
                                            tap_correlation(go, xin, h, wd, ky, kx);
                                    }
                                }
                            }
                        }
                    }
                }
                if gr.wants(input) {
                    let gx = gr.acc(input);
                    for t in 0..t_n {
                        for co in 0..co_n {
                            let go = &g[(t * co_n + co) * plane..][..plane];
                            for ci in 0..ci_n {
                                let gi = &mut gx[(t * ci_n + ci) * plane..][..plane];
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let wv = w.data[((co * ci_n + ci) * 3 + ky) * 3 + kx];
                                        tap_transpose(gi, go, h, wd, ky, kx, wv);
                                    }
                                }
                            }
                        }
                    }
                }
            }),
        )
    }

    /// Feature-wise affine modulation: `x * (1 + scale[c]) + shift[c]` over
    /// a `T x C x H x W` tensor.
    pub fn modulate(&mut self, input: Var, scale: Var, shift: Var) -> Var {
        let x = self.value(input).clone();
        let (t_n, c_n, h, w) = x.dims4();
        let s = self.value(scale).data.clone();
        let b = self.value(shift).data.clone();
        assert_eq!(s.len(), c_n, "scale length mismatch");
        assert_eq!(b.len(), c_n, "shift length mismatch");
        let plane = h * w;
        let mut out = x.data.clone();
        for t in 0..t_n {
            for c in 0..c_n {
                for v in &mut out[(t * c_n + c) * plane..][..plane] {
                    *v = *v * (1.0 + s[c]) + b[c];
                }
            }
        }
        self.push(
            Tensor::new(x.shape.clone(), out),
            &[input, scale, shift],
            Box::new(move |g, gr| {
                if gr.wants(input) {
                    let gi = gr.acc(input);
                    for t in 0..t_n {
                        for c in 0..c_n {
                            let k = 1.0 + s[c];
                            let off = (t * c_n + c) * plane;
                            for (acc, gv) in gi[off..off + plane].iter_mut().zip(&g[off..off + plane]) {
                                *acc += gv * k;
                            }
                        }
                    }
                }
                if gr.wants(scale) {
                    let gs = gr.acc(scale);
                    for t in 0..t_n {
                        for (c, acc) in gs.iter_mut().enumerate() {
                            let off = (t * c_n + c) * plane;
                            *acc += g[off..off + plane]
                                .iter()
                                .zip(&x.data[off..off + plane])
                                .map(|(u, v)| u * v)
                                .sum::<f64>();
                        }
                    }
                }
                if gr.wants(shift) {
                    let gb = gr.acc(shift);
                    for t in 0..t_n {
                        for (c, acc) in gb.iter_mut().enumerate() {
                            *acc += g[(t * c_n + c) * plane..][..plane].iter().sum::<f64>();
                        }
                    }
                }
            }),
        )
    }
}

/// Valid output range along one axis for kernel offset `k` (0..3) with
/// padding 1: output index `o` reads input `o + k - 1`.
#[inline]
fn tap_range(k: usize, n: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { n.saturating_sub(1) } else { n };
    (lo, hi)
}

#[inline]
fn conv_tap(out: &mut [f64], input: &[f64], h: usize, w: usize, ky: usize, kx: usize, wv: f64) {
    let (y0, y1) = tap_range(ky, h);
    let (x0, x1) = tap_range(kx, w);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let iy = y + ky - 1;
        let orow = &mut out[y * w + x0..y * w + x1];
        let irow = &input[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
        for (o, i) in orow.iter_mut().zip(irow) {
            *o += wv * i;
        }
    }
}

#[inline]
fn tap_correlation(go: &[f64], input: &[f64], h: usize, w: usize, ky: usize, kx: usize) -> f64 {
    let (y0, y1) = tap_range(ky, h);
    let (x0, x1) = tap_range(kx, w);
    if x0 >= x1 {
        return 0.0;
    }
    let mut s = 0.0;
    for y in y0..y1 {
        let iy = y + ky - 1;
        let grow = &go[y * w + x0..y * w + x1];
        let irow = &input[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
        s += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
    }
    s
}

#[inline]
fn tap_transpose(gi: &mut [f64], go: &[f64], h: usize, w: usize, ky: usize, kx: usize, wv: f64) {
    let (y0, y1) = tap_range(ky, h);
    let (x0, x1) = tap_range(kx, w);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let iy = y + ky - 1;
        let grow = &go[y * w + x0..y * w + x1];
        let irow = &mut gi[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
        for (i, g) in irow.iter_mut().zip(grow) {
            *i += wv * g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(shape: Vec<usize>, seed: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect())
    }

    /// Central-difference check of d(sum(f * probe))/d(leaf) for every element.
    fn check(shapes: &[Vec<usize>], build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let leaves: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| filled(s.clone(), 0.37 + 0.11 * i as f64))
            .collect();
        let eval = |vals: &[Tensor]| -> (f64, Option<Vec<Vec<f64>>>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
            let out = build(&mut tape, &vars);
            let n = tape.value(out).len();
            let probe = tape.constant(filled(tape.value(out).shape.clone(), 0.91));
            let _ = n;
            let prod = tape.mul(out, probe);
            let loss = tape.sum(prod);
            let g = tape.backward(loss);
            (tape.value(loss).item(), Some(vars.iter().map(|&v| g.get_or_zeros(v)).collect()))
        };
        let (_, grads) = eval(&leaves);
        let grads = grads.unwrap();
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            for j in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data[j] += h;
                let mut minus = leaves.clone();
                minus[li].data[j] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = grads[li][j];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                    "leaf {li}[{j}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn grad_elementwise() {
        check(&[vec![2, 3], vec![2, 3]], |t, v| {
            let a = t.add(v[0], v[1]);
            let b = t.mul(a, v[1]);
            let c = t.sub(b, v[0]);
            let d = t.silu(c);
            t.affine(d, 1.5, 0.2)
        });
    }

    #[test]
    fn grad_matrix_ops() {
        check(&[vec![3, 4], vec![4, 2], vec![2]], |t, v| {
            let y = t.linear(v[0], v[1], v[2]);
            let s = t.softmax_rows(y);
            let tr = t.transpose(s);
            let m = t.matmul(tr, y);
            t.mean_rows(m)
        });
    }

    #[test]
    fn grad_gather_concat_stack_ce() {
        check(&[vec![5, 3], vec![1, 2]], |t, v| {
            let g = t.gather_rows(v[0], &[4, 1, 4]);
            let m = t.mean_rows(g);
            let c = t.concat_cols(m, v[1]);
            let ce = t.cross_entropy_rows(c, &[3]);
            let g2 = t.reshape(g, vec![1, 9]);
            let ce2 = t.cross_entropy_rows(g2, &[0]);
            let mean = t.mean(v[0]);
            t.stack(&[ce, ce2, mean])
        });
    }

    #[test]
    fn grad_conv_and_modulate() {
        check(&[vec![2, 2, 4, 5], vec![3, 2, 3, 3], vec![3], vec![3], vec![3]], |t, v| {
            let y = t.conv3x3(v[0], v[1], v[2]);
            t.modulate(y, v[3], v[4])
        });
    }

    #[test]
    fn grad_masked_mse() {
        let target: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
        let mask = vec![true, false, true, true, false, false];
        check(&[vec![2, 3]], move |t, v| {
            let a = t.masked_mse(v[0], &target, &mask);
            let b = t.mse(v[0], &target);
            t.stack(&[a, b])
        });
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = filled(vec![1, 2, 4, 3], 0.7);
        let w = filled(vec![2, 2, 3, 3], 0.3);
        let b = Tensor::new(vec![2], vec![0.5, -0.25]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv3x3(xv, wv, bv);
        let out = tape.value(y);
        for co in 0..2 {
            for yy in 0..4i64 {
                for xx in 0..3i64 {
                    let mut s = b.data[co];
                    for ci in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (iy, ix) = (yy + ky - 1, xx + kx - 1);
                                if (0..4).contains(&iy) && (0..3).contains(&ix) {
                                    s += w.data[((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize]
                                        * x.data[(ci * 4 + iy as usize) * 3 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = out.data[(co * 4 + yy as usize) * 3 + xx as usize];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let b = tape.param(Tensor::row(vec![3.0, 4.0]));
        let c = tape.mul(a, b);
        let s = tape.sum(c);
        let g = tape.backward(s);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &[1.0, 2.0]);
    }
}
