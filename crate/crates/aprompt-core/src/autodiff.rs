//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] replays it in
//! reverse and accumulates gradients for every node, including leaves. Ops
//! capture clones of the values they need, so backward closures never touch
//! the tape itself. Everything is `f64`; analytic gradients are validated
//! against central finite differences in the test suites.

use std::cell::{Ref, RefCell};

use crate::tensor::Tensor;

type BackFn = Box<dyn Fn(&Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    value: Tensor,
    back: Option<BackFn>,
}

/// Records a single forward computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of a scalar root with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when the root does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.shape().as_slice()),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Registers a leaf value (input or parameter).
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, None)
    }

    fn push(&self, value: Tensor, back: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, back });
        Var { tape: self, id }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Backpropagates from a scalar root; returns gradients for all nodes.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.numel(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::from_vec(nodes[root.id].value.shape(), vec![1.0]));
        for id in (0..=root.id).rev() {
            let Some(gout) = grads[id].clone() else {
                continue;
            };
            if let Some(back) = nodes[id].back.as_ref() {
                for (pid, contrib) in back(&gout) {
                    match &mut grads[pid] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot => *slot = Some(contrib),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value_cloned(&self) -> Tensor {
        self.value().clone()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value_cloned(), other.value_cloned());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = Tensor::from_vec(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        );
        let (ia, ib) = (self.id, other.id);
        self.tape.push(
            out,
            Some(Box::new(move |g| vec![(ia, g.clone()), (ib, g.clone())])),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value_cloned(), other.value_cloned());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = Tensor::from_vec(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
        );
        let (ia, ib) = (self.id, other.id);
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                vec![(ia, g.clone()), (ib, g.map(|v| -v))]
            })),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value_cloned(), other.value_cloned());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = Tensor::from_vec(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
        );
        let (ia, ib) = (self.id, other.id);
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
                );
                let db = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(a.data()).map(|(x, y)| x * y).collect(),
                );
                vec![(ia, da), (ib, db)]
            })),
        )
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        let ia = self.id;
        self.tape
            .push(out, Some(Box::new(move |g| vec![(ia, g.map(|v| v * c))])))
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value_cloned();
        let out = x.map(|v| v.max(0.0));
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
                vec![(ia, dx)]
            })),
        )
    }

    pub fn softplus(self) -> Var<'t> {
        let x = self.value_cloned();
        let out = x.map(softplus);
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let dx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| gv * sigmoid(*xv))
                        .collect(),
                );
                vec![(ia, dx)]
            })),
        )
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value_cloned(), other.value_cloned());
        let (m, k) = (a.rows(), a.cols());
        let (k2, n) = (b.rows(), b.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for l in 0..k {
                let av = a.at2(i, l);
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let v = out.at2(i, j) + av * b.at2(l, j);
                    out.set2(i, j, v);
                }
            }
        }
        let (ia, ib) = (self.id, other.id);
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                // dA = g Bᵀ, dB = Aᵀ g
                let mut da = Tensor::zeros(&[m, k]);
                let mut db = Tensor::zeros(&[k, n]);
                for i in 0..m {
                    for j in 0..n {
                        let gv = g.at2(i, j);
                        if gv == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            da.set2(i, l, da.at2(i, l) + gv * b.at2(l, j));
                            db.set2(l, j, db.at2(l, j) + gv * a.at2(i, l));
                        }
                    }
                }
                vec![(ia, da), (ib, db)]
            })),
        )
    }

    pub fn transpose(self) -> Var<'t> {
        let a = self.value_cloned();
        let (m, n) = (a.rows(), a.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.set2(j, i, a.at2(i, j));
            }
        }
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    for j in 0..n {
                        dx.set2(i, j, g.at2(j, i));
                    }
                }
                vec![(ia, dx)]
            })),
        )
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row_broadcast(self, bias: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value_cloned(), bias.value_cloned());
        let (m, n) = (a.rows(), a.cols());
        assert_eq!(b.shape(), &[n], "bias must be [cols]");
        let mut out = a.clone();
        for i in 0..m {
            for j in 0..n {
                out.set2(i, j, a.at2(i, j) + b.data()[j]);
            }
        }
        let (ia, ib) = (self.id, bias.id);
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let mut dbias = Tensor::zeros(&[n]);
                for i in 0..m {
                    for j in 0..n {
                        dbias.data_mut()[j] += g.at2(i, j);
                    }
                }
                vec![(ia, g.clone()), (ib, dbias)]
            })),
        )
    }

    /// Row-wise softmax of an `[m, n]` matrix.
    pub fn softmax_rows(self) -> Var<'t> {
        let a = self.value_cloned();
        let (m, n) = (a.rows(), a.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = a.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - mx).exp();
            }
            for j in 0..n {
                out.set2(i, j, (a.at2(i, j) - mx).exp() / denom);
            }
        }
        let y = out.clone();
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g.at2(i, j) * y.at2(i, j);
                    }
                    for j in 0..n {
                        dx.set2(i, j, y.at2(i, j) * (g.at2(i, j) - dot));
                    }
                }
                vec![(ia, dx)]
            })),
        )
    }

    /// Full reduction to a scalar.
    pub fn sum(self) -> Var<'t> {
        let a = self.value_cloned();
        let total = a.sum();
        let shape = a.shape().to_vec();
        let ia = self.id;
        self.tape.push(
            Tensor::scalar(total),
            Some(Box::new(move |g| {
                vec![(ia, Tensor::full(&shape, g.item()))]
            })),
        )
    }

    /// `|s - c|` of a scalar node.
    pub fn abs_sub_const(self, c: f64) -> Var<'t> {
        let s = self.value().item();
        let ia = self.id;
        self.tape.push(
            Tensor::scalar((s - c).abs()),
            Some(Box::new(move |g| {
                let sign = if s > c {
                    1.0
                } else if s < c {
                    -1.0
                } else {
                    0.0
                };
                vec![(ia, Tensor::scalar(g.item() * sign))]
            })),
        )
    }

    /// Sum of absolute differences to a constant target of the same shape.
    pub fn l1_to(self, target: &Tensor) -> Var<'t> {
        let x = self.value_cloned();
        assert_eq!(x.shape(), target.shape(), "l1 target shape mismatch");
        let total: f64 = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        let t = target.clone();
        let ia = self.id;
        self.tape.push(
            Tensor::scalar(total),
            Some(Box::new(move |g| {
                let gv = g.item();
                let dx = Tensor::from_vec(
                    x.shape(),
                    x.data()
                        .iter()
                        .zip(t.data())
                        .map(|(a, b)| {
                            let d = a - b;
                            if d > 0.0 {
                                gv
                            } else if d < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
                vec![(ia, dx)]
            })),
        )
    }

    /// Selects rows of an `[m, n]` matrix; indices may repeat.
    pub fn gather_rows(self, indices: &[usize]) -> Var<'t> {
        let a = self.value_cloned();
        let (m, n) = (a.rows(), a.cols());
        let idx = indices.to_vec();
        let mut out = Tensor::zeros(&[idx.len(), n]);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < m, "gather index {i} out of {m} rows");
            for j in 0..n {
                out.set2(r, j, a.at2(i, j));
            }
        }
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[m, n]);
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        dx.set2(i, j, dx.at2(i, j) + g.at2(r, j));
                    }
                }
                vec![(ia, dx)]
            })),
        )
    }

    /// Row `i` of an `[m, n]` matrix as a rank-1 tensor.
    pub fn slice_row(self, i: usize) -> Var<'t> {
        let a = self.value_cloned();
        let (m, n) = (a.rows(), a.cols());
        assert!(i < m);
        let out = Tensor::from_vec(&[n], a.row(i).to_vec());
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[m, n]);
                for j in 0..n {
                    dx.set2(i, j, g.data()[j]);
                }
                vec![(ia, dx)]
            })),
        )
    }

    /// `[C, h, w]` feature map flattened to `[C, h*w]`.
    pub fn flatten_spatial(self) -> Var<'t> {
        let a = self.value_cloned();
        let shape = a.shape().to_vec();
        assert_eq!(shape.len(), 3);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let out = a.reshaped(&[c, h * w]);
        let ia = self.id;
        self.tape.push(
            out,
            Some(Box::new(move |g| vec![(ia, g.reshaped(&[c, h, w]))])),
        )
    }

    /// 2-D convolution: input `[Cin, H, W]`, weight `[Cout, Cin, kh, kw]`,
    /// bias `[Cout]`, zero padding.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let x = self.value_cloned();
        let w = weight.value_cloned();
        let b = bias.value_cloned();
        assert_eq!(x.shape().len(), 3, "conv2d input must be [C,H,W]");
        assert_eq!(w.shape().len(), 4, "conv2d weight must be [Co,Ci,kh,kw]");
        let (cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, cin2, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        assert_eq!(b.shape(), &[cout]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[cout, ho, wo]);
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                if xx < 0 || xx >= wid as isize {
                                    continue;
                                }
                                acc += w.at4(co, ci, ky, kx) * x.at3(ci, y as usize, xx as usize);
                            }
                        }
                    }
                    out.set3(co, oy, ox, acc);
                }
            }
        }
        let (ix, iw, ib) = (self.id, weight.id, bias.id);
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[cin, h, wid]);
                let mut dw = Tensor::zeros(&[cout, cin, kh, kw]);
                let mut db = Tensor::zeros(&[cout]);
                for co in 0..cout {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g.at3(co, oy, ox);
                            if gv == 0.0 {
                                continue;
                            }
                            db.data_mut()[co] += gv;
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    let y = (oy * stride + ky) as isize - pad as isize;
                                    if y < 0 || y >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let xx = (ox * stride + kx) as isize - pad as isize;
                                        if xx < 0 || xx >= wid as isize {
                                            continue;
                                        }
                                        let (yu, xu) = (y as usize, xx as usize);
                                        dx.set3(
                                            ci,
                                            yu,
                                            xu,
                                            dx.at3(ci, yu, xu) + gv * w.at4(co, ci, ky, kx),
                                        );
                                        dw.set4(
                                            co,
                                            ci,
                                            ky,
                                            kx,
                                            dw.at4(co, ci, ky, kx) + gv * x.at3(ci, yu, xu),
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(ix, dx), (iw, dw), (ib, db)]
            })),
        )
    }

    /// Per-position layer normalization over the channel axis of `[C, H, W]`
    /// with learnable per-channel gain and bias.
    pub fn channel_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Var<'t> {
        let x = self.value_cloned();
        let g0 = gain.value_cloned();
        let b0 = bias.value_cloned();
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(g0.shape(), &[c]);
        assert_eq!(b0.shape(), &[c]);
        let mut out = Tensor::zeros(&[c, h, w]);
        let mut xhat = Tensor::zeros(&[c, h, w]);
        let mut istds = vec![0.0; h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += x.at3(ci, y, xx);
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = x.at3(ci, y, xx) - mean;
                    var += d * d;
                }
                var /= c as f64;
                let istd = 1.0 / (var + eps).sqrt();
                istds[y * w + xx] = istd;
                for ci in 0..c {
                    let xh = (x.at3(ci, y, xx) - mean) * istd;
                    xhat.set3(ci, y, xx, xh);
                    out.set3(ci, y, xx, g0.data()[ci] * xh + b0.data()[ci]);
                }
            }
        }
        let (ix, ig, ib) = (self.id, gain.id, bias.id);
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let n = c as f64;
                let mut dx = Tensor::zeros(&[c, h, w]);
                let mut dgain = Tensor::zeros(&[c]);
                let mut dbias = Tensor::zeros(&[c]);
                for y in 0..h {
                    for xx in 0..w {
                        let istd = istds[y * w + xx];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for ci in 0..c {
                            let gv = g.at3(ci, y, xx);
                            let xh = xhat.at3(ci, y, xx);
                            dgain.data_mut()[ci] += gv * xh;
                            dbias.data_mut()[ci] += gv;
                            let dxh = gv * g0.data()[ci];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        for ci in 0..c {
                            let gv = g.at3(ci, y, xx);
                            let xh = xhat.at3(ci, y, xx);
                            let dxh = gv * g0.data()[ci];
                            let v = istd * (dxh - sum_dxh / n - xh * sum_dxh_xh / n);
                            dx.set3(ci, y, xx, v);
                        }
                    }
                }
                vec![(ix, dx), (ig, dgain), (ib, dbias)]
            })),
        )
    }

    /// Scales every channel of `[C, h, w]` by a per-position map given as a
    /// flat `[h*w]` vector, times a constant factor.
    pub fn spatial_scale(self, attn: Var<'t>, factor: f64) -> Var<'t> {
        let f = self.value_cloned();
        let a = attn.value_cloned();
        let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        assert_eq!(a.shape(), &[h * w], "attention row must match h*w");
        let mut out = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            for p in 0..h * w {
                out.data_mut()[ci * h * w + p] = f.data()[ci * h * w + p] * a.data()[p] * factor;
            }
        }
        let (ifm, ia) = (self.id, attn.id);
        self.tape.push(
            out,
            Some(Box::new(move |g| {
                let mut df = Tensor::zeros(&[c, h, w]);
                let mut da = Tensor::zeros(&[h * w]);
                for ci in 0..c {
                    for p in 0..h * w {
                        let gv = g.data()[ci * h * w + p];
                        df.data_mut()[ci * h * w + p] = gv * a.data()[p] * factor;
                        da.data_mut()[p] += gv * f.data()[ci * h * w + p] * factor;
                    }
                }
                vec![(ifm, df), (ia, da)]
            })),
        )
    }

    /// Weighted cross-entropy with integer labels, summed over rows.
    ///
    /// `loss = Σ_k w[label_k] · (logsumexp(S_k) - S_k[label_k])`
    pub fn weighted_ce(self, labels: &[usize], class_weights: &[f64]) -> Var<'t> {
        let s = self.value_cloned();
        let (k, m) = (s.rows(), s.cols());
        assert_eq!(labels.len(), k, "one label per row");
        assert_eq!(class_weights.len(), m, "one weight per class");
        for &l in labels {
            assert!(l < m, "label {l} out of range {m}");
        }
        let labels = labels.to_vec();
        let weights = class_weights.to_vec();
        let mut total = 0.0;
        for i in 0..k {
            let row = s.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += weights[labels[i]] * (lse - row[labels[i]]);
        }
        let ia = self.id;
        self.tape.push(
            Tensor::scalar(total),
            Some(Box::new(move |g| {
                let gv = g.item();
                let mut dx = Tensor::zeros(&[k, m]);
                for i in 0..k {
                    let row = s.row(i);
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    let wl = weights[labels[i]];
                    for j in 0..m {
                        let p = (row[j] - mx).exp() / denom;
                        let ind = if j == labels[i] { 1.0 } else { 0.0 };
                        dx.set2(i, j, gv * wl * (p - ind));
                    }
                }
                vec![(ia, dx)]
            })),
        )
    }

    /// Concatenates `[K, D_i]` blocks along the column axis.
    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value_cloned()).collect();
        let k = vals[0].rows();
        for v in &vals {
            assert_eq!(v.rows(), k, "concat_cols row mismatch");
        }
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[k, total]);
        for i in 0..k {
            let mut off = 0;
            for v in &vals {
                for j in 0..v.cols() {
                    out.set2(i, off + j, v.at2(i, j));
                }
                off += v.cols();
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(
            out,
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(ids.len());
                let mut off = 0;
                for (&pid, &w) in ids.iter().zip(widths.iter()) {
                    let mut dp = Tensor::zeros(&[k, w]);
                    for i in 0..k {
                        for j in 0..w {
                            dp.set2(i, j, g.at2(i, off + j));
                        }
                    }
                    grads.push((pid, dp));
                    off += w;
                }
                grads
            })),
        )
    }
}

/// Bilinear sampling of a `[C, h, w]` feature map at `[K, 2]` image-frame
/// coordinates `(x, y)`.
///
/// Feature coordinates are `image / stride - 0.5`, so a point at the center
/// of feature cell `(i, j)` samples that cell exactly. Out-of-grid
/// coordinates clamp to the border (zero coordinate gradient there).
/// Differentiable with respect to both the feature map and the coordinates.
pub fn bilinear_sample<'t>(features: Var<'t>, coords: Var<'t>, stride: f64) -> Var<'t> {
    let f = features.value_cloned();
    let c = coords.value_cloned();
    assert_eq!(f.shape().len(), 3, "features must be [C,h,w]");
    assert_eq!(c.shape().len(), 2, "coords must be [K,2]");
    assert_eq!(c.cols(), 2);
    let (ch, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let k = c.rows();
    debug_assert!(c.is_finite(), "bilinear_sample coords must be finite");

    struct Site {
        x0: usize,
        x1: usize,
        y0: usize,
        y1: usize,
        wx: f64,
        wy: f64,
        // d(feature coord)/d(image coord); zero when clamped to the border
        dux: f64,
        dvy: f64,
    }
    let mut sites = Vec::with_capacity(k);
    let mut out = Tensor::zeros(&[k, ch]);
    for i in 0..k {
        let u = c.at2(i, 0) / stride - 0.5;
        let v = c.at2(i, 1) / stride - 0.5;
        let (x0, x1, wx, dux) = axis_site(u, w, stride);
        let (y0, y1, wy, dvy) = axis_site(v, h, stride);
        for cc in 0..ch {
            let v00 = f.at3(cc, y0, x0);
            let v01 = f.at3(cc, y0, x1);
            let v10 = f.at3(cc, y1, x0);
            let v11 = f.at3(cc, y1, x1);
            let val = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                + wy * ((1.0 - wx) * v10 + wx * v11);
            out.set2(i, cc, val);
        }
        sites.push(Site {
            x0,
            x1,
            y0,
            y1,
            wx,
            wy,
            dux,
            dvy,
        });
    }
    let (iff, ic) = (features.id, coords.id);
    features.tape.push(
        out,
        Some(Box::new(move |g| {
            let mut df = Tensor::zeros(&[ch, h, w]);
            let mut dc = Tensor::zeros(&[k, 2]);
            for (i, s) in sites.iter().enumerate() {
                let mut du = 0.0;
                let mut dv = 0.0;
                for cc in 0..ch {
                    let gv = g.at2(i, cc);
                    if gv == 0.0 {
                        continue;
                    }
                    let v00 = f.at3(cc, s.y0, s.x0);
                    let v01 = f.at3(cc, s.y0, s.x1);
                    let v10 = f.at3(cc, s.y1, s.x0);
                    let v11 = f.at3(cc, s.y1, s.x1);
                    df.set3(
                        cc,
                        s.y0,
                        s.x0,
                        df.at3(cc, s.y0, s.x0) + gv * (1.0 - s.wy) * (1.0 - s.wx),
                    );
                    df.set3(
                        cc,
                        s.y0,
                        s.x1,
                        df.at3(cc, s.y0, s.x1) + gv * (1.0 - s.wy) * s.wx,
                    );
                    df.set3(
                        cc,
                        s.y1,
                        s.x0,
                        df.at3(cc, s.y1, s.x0) + gv * s.wy * (1.0 - s.wx),
                    );
                    df.set3(cc, s.y1, s.x1, df.at3(cc, s.y1, s.x1) + gv * s.wy * s.wx);
                    du += gv * ((1.0 - s.wy) * (v01 - v00) + s.wy * (v11 - v10));
                    dv += gv * ((1.0 - s.wx) * (v10 - v00) + s.wx * (v11 - v01));
                }
                dc.set2(i, 0, du * s.dux);
                dc.set2(i, 1, dv * s.dvy);
            }
            vec![(iff, df), (ic, dc)]
        })),
    )
}

/// Clamped bilinear footprint along one axis: cell pair, fractional weight,
/// and the coordinate derivative (0 outside the open interior).
fn axis_site(u: f64, extent: usize, stride: f64) -> (usize, usize, f64, f64) {
    if extent == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let hi = (extent - 1) as f64;
    let uc = u.clamp(0.0, hi);
    let active = u > 0.0 && u < hi;
    let mut i0 = uc.floor() as usize;
    if i0 > extent - 2 {
        i0 = extent - 2;
    }
    let frac = uc - i0 as f64;
    let d = if active { 1.0 / stride } else { 0.0 };
    (i0, i0 + 1, frac, d)
}

/// Linear layer `x·W + b` for `x: [m, in]`, `W: [in, out]`, `b: [out]`.
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Var<'t> {
    x.matmul(w).add_row_broadcast(b)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
