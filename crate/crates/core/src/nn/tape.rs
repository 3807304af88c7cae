use ndarray::{s, Array2, Array4, ArrayD, ArrayView2, Axis, Ix2, Ix3, Ix4, IxDyn};

use crate::num::Scalar;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Bmm {
        a: usize,
        b: usize,
        transpose_b: bool,
    },
    Softmax(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    TemporalConv {
        x: usize,
        w: usize,
        b: usize,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        eps: f64,
    },
    Concat {
        a: usize,
        b: usize,
        axis: usize,
    },
    UpsampleNearest(usize),
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    SelectRows {
        x: usize,
        indices: Vec<usize>,
    },
    AddToFrames {
        base: usize,
        addend: usize,
        indices: Vec<usize>,
    },
    PerFrameBias {
        x: usize,
        bias: usize,
    },
    RepeatRows {
        x: usize,
        n: usize,
    },
    SumAll(usize),
    MseLoss {
        a: usize,
        b: usize,
    },
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op,
}

/// Append-only computation tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    trainable: Vec<(String, usize)>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Grads<T: Scalar> {
    by_node: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn of(&self, v: Var) -> Option<&ArrayD<T>> {
        self.by_node[v.0].as_ref()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            trainable: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that will not be reported in [`Grads::trainable`].
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable leaf registered under `name`.
    pub fn param(&mut self, name: &str, value: ArrayD<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.trainable.push((name.to_string(), v.0));
        v
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        val.iter().next().unwrap().into_f64()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = &self.nodes[x.0].value * T::from_f64(c);
        self.push(v, Op::Scale(x.0, c))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|t| {
            let sig = T::one() / (T::one() + (-t).exp());
            t * sig
        });
        self.push(v, Op::Silu(x.0))
    }

    // ----- dense -----

    /// `y = x · w (+ b)`, `x: (N, I)`, `w: (I, O)`, `b: (O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.as2(x);
        let wv = self.as2(w);
        assert_eq!(xv.shape()[1], wv.shape()[0], "linear inner dim mismatch");
        let mut y = xv.dot(&wv);
        if let Some(bi) = b {
            let bv = &self.nodes[bi.0].value;
            assert_eq!(bv.len(), y.shape()[1], "linear bias dim mismatch");
            for mut row in y.rows_mut() {
                for (o, val) in row.iter_mut().enumerate() {
                    *val = *val + bv[[o]];
                }
            }
        }
        self.push(
            y.into_dyn(),
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
            },
        )
    }

    /// Batched matmul. `a: (B, N, K)`. `b` is either `(B, K, M)` / `(B, M, K)`
    /// (per-batch) or `(K, M)` / `(M, K)` (shared across the batch);
    /// `transpose_b` selects the transposed orientation.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm lhs must be rank 3");
        let (batch, n, k) = av.dim();
        let bv = &self.nodes[b.0].value;
        let m = match (bv.ndim(), transpose_b) {
            (3, false) => {
                assert_eq!(bv.shape()[0], batch);
                assert_eq!(bv.shape()[1], k);
                bv.shape()[2]
            }
            (3, true) => {
                assert_eq!(bv.shape()[0], batch);
                assert_eq!(bv.shape()[2], k);
                bv.shape()[1]
            }
            (2, false) => {
                assert_eq!(bv.shape()[0], k);
                bv.shape()[1]
            }
            (2, true) => {
                assert_eq!(bv.shape()[1], k);
                bv.shape()[0]
            }
            _ => panic!("bmm rhs must be rank 2 or 3"),
        };
        let mut out = ArrayD::<T>::zeros(IxDyn(&[batch, n, m]));
        for i in 0..batch {
            let ai = av.index_axis(Axis(0), i);
            let prod = match (bv.ndim(), transpose_b) {
                (3, false) => {
                    let bi = bv
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap()
                        .index_axis_move(Axis(0), i);
                    ai.dot(&bi)
                }
                (3, true) => {
                    let bi = bv
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap()
                        .index_axis_move(Axis(0), i);
                    ai.dot(&bi.t())
                }
                (2, false) => ai.dot(&bv.view().into_dimensionality::<Ix2>().unwrap()),
                (2, true) => ai.dot(&bv.view().into_dimensionality::<Ix2>().unwrap().t()),
                _ => unreachable!(),
            };
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        self.push(
            out,
            Op::Bmm {
                a: a.0,
                b: b.0,
                transpose_b,
            },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut y = xv.clone();
        let last = y.ndim() - 1;
        for mut lane in y.lanes_mut(Axis(last)) {
            let max = lane.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in lane.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in lane.iter_mut() {
                *v = *v / sum;
            }
        }
        self.push(y, Op::Softmax(x.0))
    }

    // ----- convolutions -----

    /// 2-D convolution, `x: (B, Cin, H, W)`, `w: (Cout, Cin, k, k)`, `b: (Cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.as4(x);
        let wv = self.as4(w);
        let (batch, cin, h, wdt) = xv.dim();
        let (cout, wcin, kh, kw) = wv.dim();
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        assert!(h + 2 * pad >= kh && wdt + 2 * pad >= kw, "conv2d input too small");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wdt + 2 * pad - kw) / stride + 1;
        let bv = &self.nodes[b.0].value;
        assert_eq!(bv.len(), cout, "conv2d bias mismatch");

        let w_mat = wv
            .to_shape((cout, cin * kh * kw))
            .expect("conv weight reshape")
            .to_owned();
        let mut out = Array4::<T>::zeros((batch, cout, ho, wo));
        for bi in 0..batch {
            let cols = im2col(&xv.index_axis(Axis(0), bi), kh, kw, stride, pad, ho, wo);
            let y = w_mat.dot(&cols); // (cout, ho*wo)
            let mut slot = out.index_axis_mut(Axis(0), bi);
            for c in 0..cout {
                let bias = bv[[c]];
                for oy in 0..ho {
                    for ox in 0..wo {
                        slot[[c, oy, ox]] = y[[c, oy * wo + ox]] + bias;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
        )
    }

    /// 1-D convolution over the frame axis (kernel 3, zero padding),
    /// `x: (F, Cin, H, W)`, `w: (Cout, Cin, 3)`, `b: (Cout)`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.as4(x);
        let (frames, cin, h, wdt) = xv.dim();
        let wv = &self.nodes[w.0].value;
        assert_eq!(wv.ndim(), 3, "temporal conv weight must be rank 3");
        let (cout, wcin, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(wcin, cin);
        assert_eq!(k, 3, "temporal kernel is fixed to 3");
        let bv = &self.nodes[b.0].value;
        assert_eq!(bv.len(), cout);

        let hw = h * wdt;
        let xm = xv.to_shape((frames, cin, hw)).expect("reshape");
        let taps: Vec<Array2<T>> = (0..3)
            .map(|t| {
                let mut m = Array2::<T>::zeros((cout, cin));
                for o in 0..cout {
                    for i in 0..cin {
                        m[[o, i]] = wv[[o, i, t]];
                    }
                }
                m
            })
            .collect();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[frames, cout, h, wdt]));
        let mut om = out
            .view_mut()
            .into_shape_with_order((frames, cout, hw))
            .expect("reshape");
        for f in 0..frames {
            let mut acc = Array2::<T>::zeros((cout, hw));
            for (t, tap) in taps.iter().enumerate() {
                let g = f as isize + t as isize - 1;
                if g < 0 || g >= frames as isize {
                    continue;
                }
                acc = acc + tap.dot(&xm.index_axis(Axis(0), g as usize));
            }
            for c in 0..cout {
                let bias = bv[[c]];
                for j in 0..hw {
                    om[[f, c, j]] = acc[[c, j]] + bias;
                }
            }
        }
        self.push(
            out,
            Op::TemporalConv {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        )
    }

    /// Group normalization with per-channel affine, `x: (B, C, H, W)`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = self.as4(x);
        let (batch, c, h, w) = xv.dim();
        assert!(c % groups == 0, "channels not divisible by groups");
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let cg = c / groups;
        let n = (cg * h * w) as f64;
        let mut out = Array4::<T>::zeros((batch, c, h, w));
        for bi in 0..batch {
            for g in 0..groups {
                let xs = xv.slice(s![bi, g * cg..(g + 1) * cg, .., ..]);
                let mean = xs.iter().map(|v| v.into_f64()).sum::<f64>() / n;
                let var = xs
                    .iter()
                    .map(|v| {
                        let d = v.into_f64() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n;
                let invstd = 1.0 / (var + eps).sqrt();
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let gam = gv[[ch]].into_f64();
                    let bet = bv[[ch]].into_f64();
                    for y in 0..h {
                        for xq in 0..w {
                            let xh = (xv[[bi, ch, y, xq]].into_f64() - mean) * invstd;
                            out[[bi, ch, y, xq]] = T::from_f64(gam * xh + bet);
                        }
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                eps,
            },
        )
    }

    // ----- structure -----

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let v = ndarray::concatenate(Axis(axis), &[av.view(), bv.view()])
            .expect("concat shape mismatch");
        self.push(
            v,
            Op::Concat {
                a: a.0,
                b: b.0,
                axis,
            },
        )
    }

    /// Nearest-neighbor resize to `(th, tw)`, `x: (B, C, H, W)`.
    pub fn upsample_nearest(&mut self, x: Var, th: usize, tw: usize) -> Var {
        let xv = self.as4(x);
        let (batch, c, h, w) = xv.dim();
        let mut out = Array4::<T>::zeros((batch, c, th, tw));
        for bi in 0..batch {
            for ch in 0..c {
                for oy in 0..th {
                    let sy = oy * h / th;
                    for ox in 0..tw {
                        let sx = ox * w / tw;
                        out[[bi, ch, oy, ox]] = xv[[bi, ch, sy, sx]];
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::UpsampleNearest(x.0))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(
            xv.len(),
            shape.iter().product::<usize>(),
            "reshape element count mismatch"
        );
        let v = xv
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        self.push(v, Op::Reshape(x.0))
    }

    /// Reorder axes; the result is materialized in standard layout.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.ndim(), perm.len(), "permute rank mismatch");
        let v = xv
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        self.push(
            v,
            Op::Permute {
                x: x.0,
                perm: perm.to_vec(),
            },
        )
    }

    /// Gather rows of a rank-2 tensor: `out[j] = x[indices[j]]`.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        let xv = self.as2(x);
        let (n, d) = xv.dim();
        assert!(indices.iter().all(|&i| i < n), "row index out of range");
        let mut out = ArrayD::<T>::zeros(IxDyn(&[indices.len(), d]));
        for (j, &i) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), j)
                .assign(&xv.index_axis(Axis(0), i));
        }
        self.push(
            out,
            Op::SelectRows {
                x: x.0,
                indices: indices.to_vec(),
            },
        )
    }

    /// Add `addend[j]` into `base[indices[j]]` along the first axis.
    pub fn add_to_frames(&mut self, base: Var, addend: Var, indices: &[usize]) -> Var {
        let bvs = self.shape(base).to_vec();
        let avs = self.shape(addend).to_vec();
        assert_eq!(avs[0], indices.len(), "addend rows vs indices");
        assert_eq!(&bvs[1..], &avs[1..], "trailing dims mismatch");
        assert!(indices.windows(2).all(|w| w[0] < w[1]), "indices not strictly increasing");
        assert!(indices.iter().all(|&i| i < bvs[0]), "frame index out of range");
        let mut v = self.nodes[base.0].value.clone();
        let av = self.nodes[addend.0].value.clone();
        for (j, &fi) in indices.iter().enumerate() {
            let mut row = v.index_axis_mut(Axis(0), fi);
            row += &av.index_axis(Axis(0), j);
        }
        self.push(
            v,
            Op::AddToFrames {
                base: base.0,
                addend: addend.0,
                indices: indices.to_vec(),
            },
        )
    }

    /// `x: (F, C, H, W)` plus `bias: (F, C)` broadcast over the spatial dims.
    pub fn per_frame_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.as4(x);
        let (frames, c, h, w) = xv.dim();
        let bv = self.as2(bias);
        assert_eq!(bv.dim(), (frames, c), "per-frame bias shape mismatch");
        let mut out = xv.to_owned();
        for f in 0..frames {
            for ch in 0..c {
                let b = bv[[f, ch]];
                for y in 0..h {
                    for xq in 0..w {
                        out[[f, ch, y, xq]] = out[[f, ch, y, xq]] + b;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::PerFrameBias { x: x.0, bias: bias.0 })
    }

    /// `x: (D)` stacked `n` times into `(n, D)`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.ndim(), 1, "repeat_rows expects a vector");
        let d = xv.len();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[n, d]));
        for i in 0..n {
            out.index_axis_mut(Axis(0), i)
                .assign(&xv.view().into_dimensionality::<ndarray::Ix1>().unwrap());
        }
        self.push(out, Op::RepeatRows { x: x.0, n })
    }

    // ----- reductions -----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: f64 = self.nodes[x.0].value.iter().map(|v| v.into_f64()).sum();
        let v = ArrayD::from_elem(IxDyn(&[]), T::from_f64(total));
        self.push(v, Op::SumAll(x.0))
    }

    /// Mean squared error between `a` and `b` (scalar node).
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shape mismatch");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let n = av.len() as f64;
        let total: f64 = av
            .iter()
            .zip(bv.iter())
            .map(|(x, y)| {
                let d = x.into_f64() - y.into_f64();
                d * d
            })
            .sum();
        let v = ArrayD::from_elem(IxDyn(&[]), T::from_f64(total / n));
        self.push(v, Op::MseLoss { a: a.0, b: b.0 })
    }

    // ----- backward -----

    /// Reverse-mode sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward target must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(
            self.nodes[loss.0].value.raw_dim(),
            T::one(),
        ));
        for idx in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Grads { by_node: grads }
    }

    /// Gradients of trainable parameters, keyed by name.
    pub fn trainable_grads(&self, grads: &Grads<T>) -> std::collections::BTreeMap<String, ArrayD<T>> {
        let mut out = std::collections::BTreeMap::new();
        for (name, idx) in &self.trainable {
            let g = grads.by_node[*idx]
                .clone()
                .unwrap_or_else(|| ArrayD::zeros(self.nodes[*idx].value.raw_dim()));
            out.insert(name.clone(), g);
        }
        out
    }

    fn add_grad(grads: &mut [Option<ArrayD<T>>], idx: usize, g: ArrayD<T>) {
        match &mut grads[idx] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate(&self, idx: usize, gy: &ArrayD<T>, grads: &mut Vec<Option<ArrayD<T>>>) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::add_grad(grads, *a, gy.clone());
                Self::add_grad(grads, *b, gy.clone());
            }
            Op::Mul(a, b) => {
                let ga = gy * &self.nodes[*b].value;
                let gb = gy * &self.nodes[*a].value;
                Self::add_grad(grads, *a, ga);
                Self::add_grad(grads, *b, gb);
            }
            Op::Scale(x, c) => {
                Self::add_grad(grads, *x, gy * T::from_f64(*c));
            }
            Op::Silu(x) => {
                let g = self.nodes[*x].value.mapv(|t| {
                    let sig = T::one() / (T::one() + (-t).exp());
                    sig * (T::one() + t * (T::one() - sig))
                });
                Self::add_grad(grads, *x, gy * &g);
            }
            Op::Linear { x, w, b } => {
                let xv = self.idx2(*x);
                let wv = self.idx2(*w);
                let gyv = gy.view().into_dimensionality::<Ix2>().unwrap();
                let gx = gyv.dot(&wv.t());
                let gw = xv.t().dot(&gyv);
                Self::add_grad(grads, *x, gx.into_dyn());
                Self::add_grad(grads, *w, gw.into_dyn());
                if let Some(bi) = b {
                    let gb = gyv.sum_axis(Axis(0));
                    Self::add_grad(grads, *bi, gb.into_dyn());
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let av = self.nodes[*a]
                    .value
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let (batch, _n, _k) = av.dim();
                let bv = &self.nodes[*b].value;
                let gyv = gy.view().into_dimensionality::<Ix3>().unwrap();
                let mut ga = ArrayD::<T>::zeros(self.nodes[*a].value.raw_dim());
                let mut gav = ga.view_mut().into_dimensionality::<Ix3>().unwrap();
                let mut gb = ArrayD::<T>::zeros(bv.raw_dim());
                for i in 0..batch {
                    let gyi = gyv.index_axis(Axis(0), i);
                    let ai = av.index_axis(Axis(0), i);
                    match (bv.ndim(), *transpose_b) {
                        (3, false) => {
                            let bview = bv.view().into_dimensionality::<Ix3>().unwrap();
                            let bi = bview.index_axis(Axis(0), i);
                            gav.index_axis_mut(Axis(0), i).assign(&gyi.dot(&bi.t()));
                            let mut gbv = gb.view_mut().into_dimensionality::<Ix3>().unwrap();
                            let contrib = ai.t().dot(&gyi);
                            let mut slot = gbv.index_axis_mut(Axis(0), i);
                            slot += &contrib;
                        }
                        (3, true) => {
                            let bview = bv.view().into_dimensionality::<Ix3>().unwrap();
                            let bi = bview.index_axis(Axis(0), i);
                            gav.index_axis_mut(Axis(0), i).assign(&gyi.dot(&bi));
                            let mut gbv = gb.view_mut().into_dimensionality::<Ix3>().unwrap();
                            let contrib = gyi.t().dot(&ai);
                            let mut slot = gbv.index_axis_mut(Axis(0), i);
                            slot += &contrib;
                        }
                        (2, false) => {
                            let bview = bv.view().into_dimensionality::<Ix2>().unwrap();
                            gav.index_axis_mut(Axis(0), i).assign(&gyi.dot(&bview.t()));
                            let mut gbv = gb.view_mut().into_dimensionality::<Ix2>().unwrap();
                            gbv += &ai.t().dot(&gyi);
                        }
                        (2, true) => {
                            let bview = bv.view().into_dimensionality::<Ix2>().unwrap();
                            gav.index_axis_mut(Axis(0), i).assign(&gyi.dot(&bview));
                            let mut gbv = gb.view_mut().into_dimensionality::<Ix2>().unwrap();
                            gbv += &gyi.t().dot(&ai);
                        }
                        _ => unreachable!(),
                    }
                }
                drop(gav);
                Self::add_grad(grads, *a, ga);
                Self::add_grad(grads, *b, gb);
            }
            Op::Softmax(x) => {
                let y = &self.nodes[idx].value;
                let last = y.ndim() - 1;
                let mut gx = gy.clone();
                for (mut glane, ylane) in gx.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last))) {
                    let dot: f64 = glane
                        .iter()
                        .zip(ylane.iter())
                        .map(|(g, yv)| g.into_f64() * yv.into_f64())
                        .sum();
                    let dot = T::from_f64(dot);
                    for (g, yv) in glane.iter_mut().zip(ylane.iter()) {
                        *g = (*g - dot) * *yv;
                    }
                }
                Self::add_grad(grads, *x, gx);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = self.idx4(*x);
                let wv = self.idx4(*w);
                let (batch, cin, h, wd) = xv.dim();
                let (cout, _, kh, kw) = wv.dim();
                let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                let (_, _, ho, wo) = gyv.dim();
                let w_mat = wv
                    .to_shape((cout, cin * kh * kw))
                    .unwrap()
                    .to_owned();
                let mut gx = Array4::<T>::zeros((batch, cin, h, wd));
                let mut gw_mat = Array2::<T>::zeros((cout, cin * kh * kw));
                let mut gb = ArrayD::<T>::zeros(IxDyn(&[cout]));
                for bi in 0..batch {
                    let gyi = gyv.index_axis(Axis(0), bi);
                    let gym = gyi.to_shape((cout, ho * wo)).unwrap().to_owned();
                    let cols = im2col(&xv.index_axis(Axis(0), bi), kh, kw, *stride, *pad, ho, wo);
                    gw_mat += &gym.dot(&cols.t());
                    let gcols = w_mat.t().dot(&gym);
                    col2im(
                        &gcols,
                        &mut gx.index_axis_mut(Axis(0), bi),
                        kh,
                        kw,
                        *stride,
                        *pad,
                        ho,
                        wo,
                    );
                    for c in 0..cout {
                        let mut s = T::zero();
                        for j in 0..ho * wo {
                            s = s + gym[[c, j]];
                        }
                        gb[[c]] = gb[[c]] + s;
                    }
                }
                let gw = gw_mat
                    .into_shape_with_order((cout, cin, kh, kw))
                    .unwrap();
                Self::add_grad(grads, *x, gx.into_dyn());
                Self::add_grad(grads, *w, gw.into_dyn());
                Self::add_grad(grads, *b, gb);
            }
            Op::TemporalConv { x, w, b } => {
                let xv = self.idx4(*x);
                let (frames, cin, h, wd) = xv.dim();
                let wv = &self.nodes[*w].value;
                let cout = wv.shape()[0];
                let hw = h * wd;
                let xm = xv.to_shape((frames, cin, hw)).unwrap();
                let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                let gym = gyv.to_shape((frames, cout, hw)).unwrap();
                let taps: Vec<Array2<T>> = (0..3)
                    .map(|t| {
                        let mut m = Array2::<T>::zeros((cout, cin));
                        for o in 0..cout {
                            for i in 0..cin {
                                m[[o, i]] = wv[[o, i, t]];
                            }
                        }
                        m
                    })
                    .collect();
                let mut gx_full = ArrayD::<T>::zeros(self.nodes[*x].value.raw_dim());
                {
                    let mut gxm = gx_full
                        .view_mut()
                        .into_shape_with_order((frames, cin, hw))
                        .unwrap();
                    for f in 0..frames {
                        let mut gx = Array2::<T>::zeros((cin, hw));
                        for (t, tap) in taps.iter().enumerate() {
                            // y[g] consumed x[f] with tap t when g = f + 1 - t
                            let g = f as isize + 1 - t as isize;
                            if g < 0 || g >= frames as isize {
                                continue;
                            }
                            gx = gx + tap.t().dot(&gym.index_axis(Axis(0), g as usize));
                        }
                        gxm.index_axis_mut(Axis(0), f).assign(&gx);
                    }
                }
                let mut gw = ArrayD::<T>::zeros(wv.raw_dim());
                for t in 0..3 {
                    let mut acc = Array2::<T>::zeros((cout, cin));
                    for f in 0..frames {
                        let g = f as isize + t as isize - 1;
                        if g < 0 || g >= frames as isize {
                            continue;
                        }
                        acc = acc
                            + gym
                                .index_axis(Axis(0), f)
                                .dot(&xm.index_axis(Axis(0), g as usize).t());
                    }
                    for o in 0..cout {
                        for i in 0..cin {
                            gw[[o, i, t]] = acc[[o, i]];
                        }
                    }
                }
                let mut gb = ArrayD::<T>::zeros(IxDyn(&[cout]));
                for f in 0..frames {
                    for c in 0..cout {
                        let mut s = T::zero();
                        for j in 0..hw {
                            s = s + gym[[f, c, j]];
                        }
                        gb[[c]] = gb[[c]] + s;
                    }
                }
                Self::add_grad(grads, *x, gx_full);
                Self::add_grad(grads, *w, gw);
                Self::add_grad(grads, *b, gb);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            } => {
                let xv = self.idx4(*x);
                let (batch, c, h, w) = xv.dim();
                let cg = c / groups;
                let n = (cg * h * w) as f64;
                let gv = &self.nodes[*gamma].value;
                let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = Array4::<T>::zeros((batch, c, h, w));
                let mut ggamma = ArrayD::<T>::zeros(IxDyn(&[c]));
                let mut gbeta = ArrayD::<T>::zeros(IxDyn(&[c]));
                for bi in 0..batch {
                    for g in 0..*groups {
                        let xs = xv.slice(s![bi, g * cg..(g + 1) * cg, .., ..]);
                        let mean = xs.iter().map(|v| v.into_f64()).sum::<f64>() / n;
                        let var = xs
                            .iter()
                            .map(|v| {
                                let d = v.into_f64() - mean;
                                d * d
                            })
                            .sum::<f64>()
                            / n;
                        let invstd = 1.0 / (var + eps).sqrt();
                        // First pass: accumulate the two reductions.
                        let mut sum_dxhat = 0.0f64;
                        let mut sum_dxhat_xhat = 0.0f64;
                        for ci in 0..cg {
                            let ch = g * cg + ci;
                            let gam = gv[[ch]].into_f64();
                            for y in 0..h {
                                for xq in 0..w {
                                    let xhat = (xv[[bi, ch, y, xq]].into_f64() - mean) * invstd;
                                    let dxhat = gyv[[bi, ch, y, xq]].into_f64() * gam;
                                    sum_dxhat += dxhat;
                                    sum_dxhat_xhat += dxhat * xhat;
                                }
                            }
                        }
                        // Second pass: per-element gradient.
                        for ci in 0..cg {
                            let ch = g * cg + ci;
                            let gam = gv[[ch]].into_f64();
                            for y in 0..h {
                                for xq in 0..w {
                                    let xhat = (xv[[bi, ch, y, xq]].into_f64() - mean) * invstd;
                                    let dy = gyv[[bi, ch, y, xq]].into_f64();
                                    let dxhat = dy * gam;
                                    let dx = invstd
                                        * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / n);
                                    gx[[bi, ch, y, xq]] = T::from_f64(dx);
                                    ggamma[[ch]] =
                                        ggamma[[ch]] + T::from_f64(dy * xhat);
                                    gbeta[[ch]] = gbeta[[ch]] + T::from_f64(dy);
                                }
                            }
                        }
                    }
                }
                Self::add_grad(grads, *x, gx.into_dyn());
                Self::add_grad(grads, *gamma, ggamma);
                Self::add_grad(grads, *beta, gbeta);
            }
            Op::Concat { a, b, axis } => {
                let asz = self.nodes[*a].value.shape()[*axis];
                let ga = gy
                    .slice_axis(Axis(*axis), ndarray::Slice::new(0, Some(asz as isize), 1))
                    .to_owned();
                let gb = gy
                    .slice_axis(Axis(*axis), ndarray::Slice::new(asz as isize, None, 1))
                    .to_owned();
                Self::add_grad(grads, *a, ga);
                Self::add_grad(grads, *b, gb);
            }
            Op::UpsampleNearest(x) => {
                let xv = self.idx4(*x);
                let (batch, c, h, w) = xv.dim();
                let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                let (_, _, th, tw) = gyv.dim();
                let mut gx = Array4::<T>::zeros((batch, c, h, w));
                for bi in 0..batch {
                    for ch in 0..c {
                        for oy in 0..th {
                            let sy = oy * h / th;
                            for ox in 0..tw {
                                let sx = ox * w / tw;
                                gx[[bi, ch, sy, sx]] =
                                    gx[[bi, ch, sy, sx]] + gyv[[bi, ch, oy, ox]];
                            }
                        }
                    }
                }
                Self::add_grad(grads, *x, gx.into_dyn());
            }
            Op::Reshape(x) => {
                let shape = self.nodes[*x].value.shape().to_vec();
                let g = gy
                    .clone()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("reshape grad");
                Self::add_grad(grads, *x, g);
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let g = gy
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                Self::add_grad(grads, *x, g);
            }
            Op::SelectRows { x, indices } => {
                let mut gx = ArrayD::<T>::zeros(self.nodes[*x].value.raw_dim());
                for (j, &i) in indices.iter().enumerate() {
                    let mut row = gx.index_axis_mut(Axis(0), i);
                    row += &gy.index_axis(Axis(0), j);
                }
                Self::add_grad(grads, *x, gx);
            }
            Op::AddToFrames {
                base,
                addend,
                indices,
            } => {
                Self::add_grad(grads, *base, gy.clone());
                let mut ga = ArrayD::<T>::zeros(self.nodes[*addend].value.raw_dim());
                for (j, &fi) in indices.iter().enumerate() {
                    ga.index_axis_mut(Axis(0), j)
                        .assign(&gy.index_axis(Axis(0), fi));
                }
                Self::add_grad(grads, *addend, ga);
            }
            Op::PerFrameBias { x, bias } => {
                Self::add_grad(grads, *x, gy.clone());
                let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                let (frames, c, h, w) = gyv.dim();
                let mut gb = ArrayD::<T>::zeros(IxDyn(&[frames, c]));
                for f in 0..frames {
                    for ch in 0..c {
                        let mut s = T::zero();
                        for y in 0..h {
                            for xq in 0..w {
                                s = s + gyv[[f, ch, y, xq]];
                            }
                        }
                        gb[[f, ch]] = s;
                    }
                }
                Self::add_grad(grads, *bias, gb);
            }
            Op::RepeatRows { x, n } => {
                let gyv = gy.view().into_dimensionality::<Ix2>().unwrap();
                let d = gyv.dim().1;
                let mut gx = ArrayD::<T>::zeros(IxDyn(&[d]));
                for i in 0..*n {
                    for j in 0..d {
                        gx[[j]] = gx[[j]] + gyv[[i, j]];
                    }
                }
                Self::add_grad(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let g = gy.iter().next().unwrap();
                let gx = ArrayD::from_elem(self.nodes[*x].value.raw_dim(), *g);
                Self::add_grad(grads, *x, gx);
            }
            Op::MseLoss { a, b } => {
                let g = gy.iter().next().unwrap().into_f64();
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let scale = T::from_f64(2.0 * g / av.len() as f64);
                let diff = (av - bv) * scale;
                Self::add_grad(grads, *a, diff.clone());
                Self::add_grad(grads, *b, diff * T::from_f64(-1.0));
            }
        }
    }

    fn as2(&self, v: Var) -> ArrayView2<'_, T> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected rank-2 value")
    }

    fn as4(&self, v: Var) -> ndarray::ArrayView4<'_, T> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("expected rank-4 value")
    }

    fn idx2(&self, i: usize) -> ArrayView2<'_, T> {
        self.nodes[i]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
    }

    fn idx4(&self, i: usize) -> ndarray::ArrayView4<'_, T> {
        self.nodes[i]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn im2col<T: Scalar>(
    x: &ndarray::ArrayView3<'_, T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<T> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::<T>::zeros((cin * kh * kw, ho * wo));
    for ci in 0..cin {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ci * kh + dy) * kw + dx;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * wo + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &Array2<T>,
    gx: &mut ndarray::ArrayViewMut3<'_, T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (cin, h, w) = gx.dim();
    for ci in 0..cin {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ci * kh + dy) * kw + dx;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[[ci, iy as usize, ix as usize]] =
                            gx[[ci, iy as usize, ix as usize]] + cols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}
