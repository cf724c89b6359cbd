use std::collections::HashMap;

use super::kernels::{axpy, col2im_acc, dot, gemm_nn_acc, gemm_nt, gemm_tn_acc, im2col};
use super::optim::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Which displacement objective a loss node evaluates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    /// Cosine direction term plus clipped magnitude difference.
    Directional { lambda1: f64, lambda2: f64, tau: f64 },
    /// Squared error against the target clipped to length `tau`.
    ClippedL2 { tau: f64 },
}

const COS_EPS: f64 = 1e-8;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LinearGather {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<usize>,
    },
    MatMul(Var, Var),
    WeightNorm {
        v: Var,
        g: Var,
        norms: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    ReluMaskMul {
        pre: Var,
        t: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        ks: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Bilinear {
        map: Var,
        pts: Var,
    },
    BilinearTangent {
        map: Var,
        pts: Vec<f64>,
        dpts: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    Concat0(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    MeanOf(Vec<Var>),
    Sum(Var),
    Mean(Var),
    AbsMean(Var),
    SoftmaxRows(Var),
    WeightedRelSum {
        w: Var,
        rel: Var,
    },
    SelfAttention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
    },
    Displacement {
        pred: Var,
        target: Vec<f64>,
        kind: LossKind,
    },
    BceLogits {
        logits: Var,
        target: Vec<f64>,
    },
    UnitNormPenalty(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Single-threaded record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<(u64, usize), Var>,
    bindings: Vec<(u64, usize, Var)>,
}

fn shape2(t: &Tensor, layer: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::shape(layer, format!("expected a 2-D tensor, got {s:?}"))),
    }
}

fn shape3(t: &Tensor, layer: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::shape(layer, format!("expected a [C,H,W] tensor, got {s:?}"))),
    }
}

/// Pixel-space bilinear footprint of one normalized sample point.
struct Footprint {
    x0: usize,
    y0: usize,
    fx: f64,
    fy: f64,
    // d(px)/du and d(py)/dv; zero when clamped
    dx: f64,
    dy: f64,
}

fn footprint(u: f64, v: f64, h: usize, w: usize) -> Footprint {
    let axis = |c: f64, n: usize| -> (usize, f64, f64) {
        let mut d = n as f64 / 2.0;
        let cc = if c < -1.0 || c > 1.0 {
            d = 0.0;
            c.clamp(-1.0, 1.0)
        } else {
            c
        };
        let mut p = (cc + 1.0) / 2.0 * n as f64 - 0.5;
        let hi = (n - 1) as f64;
        if p <= 0.0 {
            if p < 0.0 {
                d = 0.0;
            }
            p = 0.0;
        } else if p >= hi {
            if p > hi {
                d = 0.0;
            }
            p = hi;
        }
        let i0 = (p.floor() as usize).min(n - 2);
        (i0, p - i0 as f64, d)
    };
    let (x0, fx, dx) = axis(u, w);
    let (y0, fy, dy) = axis(v, h);
    Footprint {
        x0,
        y0,
        fx,
        fy,
        dx,
        dy,
    }
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

    /// Drop every node from index `len` on, with the parameter bindings made
    /// after it. Handles to dropped nodes must not be used again.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.bound.retain(|_, v| v.0 < len);
        self.bindings.retain(|(_, _, v)| v.0 < len);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant leaf; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf (used for inputs under gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a stored parameter. Frozen stores yield constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(v) = self.bound.get(&key) {
            return *v;
        }
        let p = store.get(id);
        let frozen = store.is_frozen();
        let v = self.push(p.value.clone(), Op::Leaf, !frozen);
        self.bound.insert(key, v);
        if !frozen {
            self.bindings.push((store.uid(), id.0, v));
        }
        v
    }

    pub(crate) fn bindings_for(&self, uid: u64) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.bindings
            .iter()
            .filter(move |(u, _, _)| *u == uid)
            .map(|(_, i, v)| (*i, *v))
    }

    fn same_shape(&self, a: Var, b: Var, layer: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(layer, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, layer: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, layer)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Elementwise product with a constant array of the same size.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let v = self.value(a);
        if c.len() != v.numel() {
            return Err(Error::shape(
                "mul_const",
                format!("{} constants for {:?}", c.len(), v.shape()),
            ));
        }
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().zip(&c).map(|(x, y)| x * y).collect(),
        )?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::MulConst(a, c), rg))
    }

    /// `x[m, in] · w[out, in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, kin) = shape2(self.value(x), "linear")?;
        let (n, kw) = shape2(self.value(w), "linear")?;
        if kin != kw {
            return Err(Error::shape(
                "linear",
                format!("input has {kin} features but weight expects {kw} ({n}x{kw})"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(x).data(), self.value(w).data(), m, kin, n, &mut out);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != n {
                return Err(Error::shape(
                    "linear",
                    format!("bias has {} entries, expected {n}", bv.numel()),
                ));
            }
            for row in out.chunks_mut(n) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Selected outputs of a linear layer: row `p` of the result holds
    /// `x[p] · w[c] + b[c]` for the `width` columns `c` listed in
    /// `cols[p·width ..]`. Every entry equals the matching entry of
    /// [`Tape::linear`] bitwise.
    pub fn linear_gather(&mut self, x: Var, w: Var, b: Var, cols: Vec<usize>, width: usize) -> Result<Var> {
        let (m, kin) = shape2(self.value(x), "linear_gather")?;
        let (n, kw) = shape2(self.value(w), "linear_gather")?;
        if kin != kw || self.value(b).numel() != n || cols.len() != m * width || cols.iter().any(|c| *c >= n) {
            return Err(Error::shape(
                "linear_gather",
                format!("input [{m},{kin}], weight [{n},{kw}], {} columns of width {width}", cols.len()),
            ));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let out: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let p = i / width.max(1);
                dot(&xv[p * kin..(p + 1) * kin], &wv[c * kin..(c + 1) * kin]) + bv[*c]
            })
            .collect();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, width], out)?, Op::LinearGather { x, w, b, cols }, rg))
    }

    /// `a[m, k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = shape2(self.value(a), "matmul")?;
        let (k2, n) = shape2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Reparameterized weight `g_j · v_j / ‖v_j‖` per output row.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let (rows, cols) = shape2(self.value(v), "weight_norm_linear")?;
        if self.value(g).numel() != rows {
            return Err(Error::shape(
                "weight_norm_linear",
                format!("{} scales for {rows} rows", self.value(g).numel()),
            ));
        }
        let vv = self.value(v).data();
        let gv = self.value(g).data();
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &vv[r * cols..(r + 1) * cols];
            let n = dot(row, row).sqrt().max(1e-12);
            norms.push(n);
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = gv[r] * x / n;
            }
        }
        let rg = self.rg(v) || self.rg(g);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::WeightNorm { v, g, norms },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.max(0.0)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|a| sigmoid(*a)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// Tangent of a ReLU: `t ⊙ 1[pre > 0]`. The mask is treated as locally constant.
    pub fn relu_mask_mul(&mut self, pre: Var, t: Var) -> Result<Var> {
        self.same_shape(pre, t, "relu_tangent")?;
        let pv = self.value(pre).data();
        let tv = self.value(t);
        let data = tv
            .data()
            .iter()
            .zip(pv)
            .map(|(x, p)| if *p > 0.0 { *x } else { 0.0 })
            .collect();
        let out = Tensor::new(tv.shape().to_vec(), data)?;
        let rg = self.rg(t);
        Ok(self.push(out, Op::ReluMaskMul { pre, t }, rg))
    }

    /// Same-padded stride-1 convolution. `w` is `[out, in*ks*ks]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, ks: usize) -> Result<Var> {
        let (c, h, wd) = shape3(self.value(x), "conv2d")?;
        let (o, kk) = shape2(self.value(w), "conv2d")?;
        if kk != c * ks * ks {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but kernel is {o}x{kk} for size {ks}"),
            ));
        }
        if self.value(b).numel() != o {
            return Err(Error::shape("conv2d", format!("bias must have {o} entries")));
        }
        let hw = h * wd;
        let mut cols = vec![0.0; hw * kk];
        im2col(self.value(x).data(), c, h, wd, ks, &mut cols);
        let mut out_t = vec![0.0; hw * o];
        gemm_nt(&cols, self.value(w).data(), hw, kk, o, &mut out_t);
        let bv = self.value(b).data();
        let mut out = vec![0.0; o * hw];
        for p in 0..hw {
            for ch in 0..o {
                out[ch * hw + p] = out_t[p * o + ch] + bv[ch];
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![o, h, wd], out)?, Op::Conv2d { x, w, b, ks }, rg))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (c, h, w) = shape3(self.value(x), "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{groups} groups do not divide {c} channels"),
            ));
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("group_norm", format!("affine params must have {c} entries")));
        }
        let xs = self.value(x).data();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let per = c / groups * h * w;
        let hw = h * w;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = Vec::with_capacity(groups);
        let mut out = vec![0.0; xs.len()];
        for g in 0..groups {
            let s = &xs[g * per..(g + 1) * per];
            let mean = s.iter().sum::<f64>() / per as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (i, v) in s.iter().enumerate() {
                let idx = g * per + i;
                let ch = idx / hw;
                xhat[idx] = (v - mean) * r;
                out[idx] = gm[ch] * xhat[idx] + bt[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(vec![c, h, w], out)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = shape3(self.value(x), "max_pool")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("max_pool", format!("spatial size {h}x{w} is not even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * y + dy) * w + 2 * xx + dx;
                        if xs[idx] > best {
                            best = xs[idx];
                            bi = idx;
                        }
                    }
                    let o = ch * oh * ow + y * ow + xx;
                    out[o] = best;
                    argmax[o] = bi;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = shape3(self.value(x), "nearest_upsample")?;
        let xs = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[ch * oh * ow + y * ow + xx] = xs[ch * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, oh, ow], out)?, Op::Upsample2(x), rg))
    }

    /// Bilinear lookup of `map[C,H,W]` at normalized points `pts[P,2]` (x, y in [-1,1]).
    /// Texel centers sit at `(2i+1)/n - 1`; out-of-range points clamp to the border.
    pub fn bilinear(&mut self, map: Var, pts: Var) -> Result<Var> {
        let (c, h, w) = shape3(self.value(map), "bilinear_sample")?;
        if h < 2 || w < 2 {
            return Err(Error::shape("bilinear_sample", format!("feature map {h}x{w} is smaller than 2x2")));
        }
        let pv = self.value(pts);
        let p = match pv.shape() {
            [p, 2] => *p,
            [0] => 0,
            s => return Err(Error::shape("bilinear_sample", format!("points must be [P,2], got {s:?}"))),
        };
        let m = self.value(map).data();
        let pd = pv.data();
        let hw = h * w;
        let mut out = vec![0.0; p * c];
        for i in 0..p {
            let f = footprint(pd[2 * i], pd[2 * i + 1], h, w);
            let w00 = (1.0 - f.fx) * (1.0 - f.fy);
            let w01 = f.fx * (1.0 - f.fy);
            let w10 = (1.0 - f.fx) * f.fy;
            let w11 = f.fx * f.fy;
            let base = f.y0 * w + f.x0;
            for ch in 0..c {
                let mm = &m[ch * hw..];
                out[i * c + ch] =
                    w00 * mm[base] + w01 * mm[base + 1] + w10 * mm[base + w] + w11 * mm[base + w + 1];
            }
        }
        let rg = self.rg(map) || self.rg(pts);
        Ok(self.push(Tensor::new(vec![p, c], out)?, Op::Bilinear { map, pts }, rg))
    }

    /// Directional derivative of [`Tape::bilinear`] at fixed points along `dpts`
    /// (normalized-coordinate tangents, `[P,2]` flattened). Linear in `map`.
    pub fn bilinear_tangent(&mut self, map: Var, pts: &[f64], dpts: &[f64]) -> Result<Var> {
        let (c, h, w) = shape3(self.value(map), "bilinear_sample")?;
        if pts.len() != dpts.len() || pts.len() % 2 != 0 {
            return Err(Error::shape("bilinear_sample", "tangent and point arrays differ"));
        }
        let p = pts.len() / 2;
        let m = self.value(map).data();
        let hw = h * w;
        let mut out = vec![0.0; p * c];
        for i in 0..p {
            let [t00, t01, t10, t11, base] = tangent_weights(pts, dpts, i, h, w);
            let base = base as usize;
            for ch in 0..c {
                let mm = &m[ch * hw..];
                out[i * c + ch] =
                    t00 * mm[base] + t01 * mm[base + 1] + t10 * mm[base + w] + t11 * mm[base + w + 1];
            }
        }
        let rg = self.rg(map);
        Ok(self.push(
            Tensor::new(vec![p, c], out)?,
            Op::BilinearTangent {
                map,
                pts: pts.to_vec(),
                dpts: dpts.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenate 2-D tensors along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let m = shape2(self.value(parts[0]), "concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pw) = shape2(self.value(p), "concat")?;
            if pm != m {
                return Err(Error::shape("concat", format!("row counts {m} and {pm} differ")));
            }
            widths.push(pw);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &pw) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for r in 0..m {
                out[r * total + off..r * total + off + pw].copy_from_slice(&d[r * pw..(r + 1) * pw]);
            }
            off += pw;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Concatenate along the leading axis (channels for `[C,H,W]`).
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().is_empty() || v.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("trailing dims {:?} vs {tail:?}", v.shape()),
                ));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat0(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = shape2(self.value(x), "slice")?;
        if start + len > n {
            return Err(Error::shape("slice", format!("columns {start}..{} of {n}", start + len)));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&d[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Elementwise mean of same-shaped tensors.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("mean", "no inputs"));
        }
        for &p in &parts[1..] {
            self.same_shape(parts[0], p, "mean")?;
        }
        let n = parts.len() as f64;
        let mut out = self.value(parts[0]).data().to_vec();
        for &p in &parts[1..] {
            for (o, x) in out.iter_mut().zip(self.value(p).data()) {
                *o += x;
            }
        }
        if parts.len() > 1 {
            for o in &mut out {
                *o /= n;
            }
        }
        let shape = self.value(parts[0]).shape().to_vec();
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanOf(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn abs_mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().map(|a| a.abs()).sum::<f64>() / v.numel().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::AbsMean(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(x), "softmax")?;
        let d = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &d[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            for o in &mut out[r * n..(r + 1) * n] {
                *o /= z;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::SoftmaxRows(x), rg))
    }

    /// `out[p] = Σ_k w[p,k] · rel[p,k,:]` with `rel` laid out `[P, K*3]`.
    pub fn weighted_rel_sum(&mut self, w: Var, rel: Var) -> Result<Var> {
        let (p, k) = shape2(self.value(w), "attention_encoding")?;
        let (p2, k3) = shape2(self.value(rel), "attention_encoding")?;
        if p != p2 || k3 != 3 * k {
            return Err(Error::shape(
                "attention_encoding",
                format!("weights [{p},{k}] vs relative vectors [{p2},{k3}]"),
            ));
        }
        let (wd, rd) = (self.value(w).data(), self.value(rel).data());
        let mut out = vec![0.0; p * 3];
        for i in 0..p {
            for j in 0..k {
                let a = wd[i * k + j];
                for c in 0..3 {
                    out[i * 3 + c] += a * rd[i * k3 + j * 3 + c];
                }
            }
        }
        let rg = self.rg(w) || self.rg(rel);
        Ok(self.push(Tensor::new(vec![p, 3], out)?, Op::WeightedRelSum { w, rel }, rg))
    }

    /// Scaled dot-product self-attention over rows: `softmax(q kᵀ/√d) v`.
    pub fn self_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (n, d) = shape2(self.value(q), "attention_layer")?;
        let (n2, d2) = shape2(self.value(k), "attention_layer")?;
        let (n3, dv) = shape2(self.value(v), "attention_layer")?;
        if n != n2 || n != n3 || d != d2 {
            return Err(Error::shape(
                "attention_layer",
                format!("q [{n},{d}], k [{n2},{d2}], v [{n3},{dv}]"),
            ));
        }
        let mut probs = vec![0.0; n * n];
        gemm_nt(self.value(q).data(), self.value(k).data(), n, d, n, &mut probs);
        let scale = 1.0 / (d as f64).sqrt();
        for row in probs.chunks_mut(n) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b)) * scale;
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x * scale - mx).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let mut out = vec![0.0; n * dv];
        gemm_nn_acc(&probs, self.value(v).data(), n, n, dv, &mut out);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(Tensor::new(vec![n, dv], out)?, Op::SelfAttention { q, k, v, probs }, rg))
    }

    /// Mean displacement objective over all `(query, target)` pairs.
    /// `pred` is `[M, T*3]`; `target` holds the matching ground-truth vectors.
    pub fn displacement_loss(&mut self, pred: Var, target: Vec<f64>, kind: LossKind) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != target.len() || pv.numel() % 3 != 0 {
            return Err(Error::shape(
                "displacement_loss",
                format!("prediction {:?} vs {} target values", pv.shape(), target.len()),
            ));
        }
        let pairs = pv.numel() / 3;
        let pd = pv.data();
        let mut total = 0.0;
        for i in 0..pairs {
            let p = [pd[3 * i], pd[3 * i + 1], pd[3 * i + 2]];
            let q = [target[3 * i], target[3 * i + 1], target[3 * i + 2]];
            total += pair_loss(p, q, kind).0;
        }
        let value = if pairs == 0 { 0.0 } else { total / pairs as f64 };
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(value), Op::Displacement { pred, target, kind }, rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target` in [0,1].
    pub fn bce_logits(&mut self, logits: Var, target: Vec<f64>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != target.len() {
            return Err(Error::shape(
                "bce",
                format!("{} logits vs {} targets", lv.numel(), target.len()),
            ));
        }
        let n = target.len().max(1) as f64;
        let s: f64 = lv
            .data()
            .iter()
            .zip(&target)
            .map(|(z, t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(s / n), Op::BceLogits { logits, target }, rg))
    }

    /// `mean_i (‖g_i‖ − 1)²` over rows of a `[P,3]` tensor.
    pub fn unit_norm_penalty(&mut self, g: Var) -> Result<Var> {
        let (p, d) = shape2(self.value(g), "eikonal")?;
        let gd = self.value(g).data();
        let s: f64 = (0..p)
            .map(|i| {
                let n = dot(&gd[i * d..(i + 1) * d], &gd[i * d..(i + 1) * d]).sqrt();
                (n - 1.0) * (n - 1.0)
            })
            .sum();
        let rg = self.rg(g);
        Ok(self.push(Tensor::scalar(s / p.max(1) as f64), Op::UnitNormPenalty(g), rg))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.backward_node(i, g, lower);
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::MulConst(a, c) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * c[k];
                }
            }),
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let (m, kin) = (xs[0], xs[1]);
                let n = self.nodes[w.0].value.shape()[0];
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |s| gemm_nn_acc(g, wv, m, n, kin, s));
                acc(*w, &mut |s| gemm_tn_acc(g, xv, m, n, kin, s));
                if let Some(b) = b {
                    acc(*b, &mut |s| {
                        for row in g.chunks(n) {
                            add_into(s, row);
                        }
                    });
                }
            }
            Op::LinearGather { x, w, b, cols } => {
                let kin = self.nodes[x.0].value.shape()[1];
                let width = node.value.shape()[1];
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |s| {
                    for (i, c) in cols.iter().enumerate() {
                        let p = i / width;
                        axpy(g[i], &wv[c * kin..(c + 1) * kin], &mut s[p * kin..(p + 1) * kin]);
                    }
                });
                acc(*w, &mut |s| {
                    for (i, c) in cols.iter().enumerate() {
                        let p = i / width;
                        axpy(g[i], &xv[p * kin..(p + 1) * kin], &mut s[c * kin..(c + 1) * kin]);
                    }
                });
                acc(*b, &mut |s| {
                    for (i, c) in cols.iter().enumerate() {
                        s[*c] += g[i];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[1];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    let mut tmp = vec![0.0; m * k];
                    gemm_nt(g, bv, m, n, k, &mut tmp);
                    add_into(s, &tmp);
                });
                acc(*b, &mut |s| gemm_tn_acc(av, g, m, k, n, s));
            }
            Op::WeightNorm { v, g: gs, norms } => {
                let cols = self.nodes[v.0].value.shape()[1];
                let (vv, gv) = (val(*v), val(*gs));
                // projection of the upstream row onto the unit direction
                let proj: Vec<f64> = norms
                    .iter()
                    .enumerate()
                    .map(|(r, n)| dot(&g[r * cols..(r + 1) * cols], &vv[r * cols..(r + 1) * cols]) / n)
                    .collect();
                acc(*v, &mut |s| {
                    for (r, n) in norms.iter().enumerate() {
                        let k = gv[r] / n;
                        for c in 0..cols {
                            let idx = r * cols + c;
                            s[idx] += k * (g[idx] - proj[r] * vv[idx] / n);
                        }
                    }
                });
                acc(*gs, &mut |s| add_into(s, &proj));
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        if xv[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::ReluMaskMul { pre, t } => {
                let pv = val(*pre);
                acc(*t, &mut |s| {
                    for k in 0..s.len() {
                        if pv[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, ks } => {
                let sh = self.nodes[x.0].value.shape();
                let (c, h, wd) = (sh[0], sh[1], sh[2]);
                let o = self.nodes[w.0].value.shape()[0];
                let hw = h * wd;
                let kk = c * ks * ks;
                let mut g_t = vec![0.0; hw * o];
                for ch in 0..o {
                    for p in 0..hw {
                        g_t[p * o + ch] = g[ch * hw + p];
                    }
                }
                let wv = val(*w);
                acc(*w, &mut |s| {
                    let mut cols = vec![0.0; hw * kk];
                    im2col(val(*x), c, h, wd, *ks, &mut cols);
                    gemm_tn_acc(&g_t, &cols, hw, o, kk, s);
                });
                acc(*x, &mut |s| {
                    let mut dcols = vec![0.0; hw * kk];
                    gemm_nn_acc(&g_t, wv, hw, o, kk, &mut dcols);
                    col2im_acc(&dcols, c, h, wd, *ks, s);
                });
                acc(*b, &mut |s| {
                    for ch in 0..o {
                        s[ch] += g[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let sh = self.nodes[x.0].value.shape();
                let (c, hw) = (sh[0], sh[1] * sh[2]);
                let per = c / groups * hw;
                let gm = val(*gamma);
                acc(*beta, &mut |s| {
                    for ch in 0..c {
                        s[ch] += g[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                });
                acc(*gamma, &mut |s| {
                    for ch in 0..c {
                        s[ch] += (ch * hw..(ch + 1) * hw).map(|k| g[k] * xhat[k]).sum::<f64>();
                    }
                });
                acc(*x, &mut |s| {
                    for gi in 0..*groups {
                        let range = gi * per..(gi + 1) * per;
                        let dxhat: Vec<f64> = range.clone().map(|k| g[k] * gm[k / hw]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(&xhat[range.clone()]).map(|(a, b)| a * b).sum();
                        let n = per as f64;
                        let r = rstd[gi];
                        for (j, k) in range.enumerate() {
                            s[k] += r / n * (n * dxhat[j] - sum_d - xhat[k] * sum_dx);
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => acc(*x, &mut |s| {
                for (o, &src) in argmax.iter().enumerate() {
                    s[src] += g[o];
                }
            }),
            Op::Upsample2(x) => {
                let sh = self.nodes[x.0].value.shape();
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                acc(*x, &mut |s| {
                    let (oh, ow) = (2 * h, 2 * w);
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                s[ch * h * w + (y / 2) * w + xx / 2] += g[ch * oh * ow + y * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::Bilinear { map, pts } => {
                let sh = self.nodes[map.0].value.shape();
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                let hw = h * w;
                let (mv, pd) = (val(*map), val(*pts));
                let p = pd.len() / 2;
                acc(*map, &mut |s| {
                    for i in 0..p {
                        let f = footprint(pd[2 * i], pd[2 * i + 1], h, w);
                        let base = f.y0 * w + f.x0;
                        let ws = [
                            (1.0 - f.fx) * (1.0 - f.fy),
                            f.fx * (1.0 - f.fy),
                            (1.0 - f.fx) * f.fy,
                            f.fx * f.fy,
                        ];
                        for ch in 0..c {
                            let gg = g[i * c + ch];
                            let sm = &mut s[ch * hw..];
                            sm[base] += ws[0] * gg;
                            sm[base + 1] += ws[1] * gg;
                            sm[base + w] += ws[2] * gg;
                            sm[base + w + 1] += ws[3] * gg;
                        }
                    }
                });
                acc(*pts, &mut |s| {
                    for i in 0..p {
                        let f = footprint(pd[2 * i], pd[2 * i + 1], h, w);
                        let base = f.y0 * w + f.x0;
                        let (mut du, mut dv) = (0.0, 0.0);
                        for ch in 0..c {
                            let mm = &mv[ch * hw..];
                            let (m00, m01, m10, m11) = (mm[base], mm[base + 1], mm[base + w], mm[base + w + 1]);
                            let dfx = (1.0 - f.fy) * (m01 - m00) + f.fy * (m11 - m10);
                            let dfy = (1.0 - f.fx) * (m10 - m00) + f.fx * (m11 - m01);
                            du += g[i * c + ch] * dfx;
                            dv += g[i * c + ch] * dfy;
                        }
                        s[2 * i] += du * f.dx;
                        s[2 * i + 1] += dv * f.dy;
                    }
                });
            }
            Op::BilinearTangent { map, pts, dpts } => {
                let sh = self.nodes[map.0].value.shape();
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                let hw = h * w;
                acc(*map, &mut |s| {
                    for i in 0..pts.len() / 2 {
                        let [t00, t01, t10, t11, base] = tangent_weights(pts, dpts, i, h, w);
                        let base = base as usize;
                        for ch in 0..c {
                            let gg = g[i * c + ch];
                            let sm = &mut s[ch * hw..];
                            sm[base] += t00 * gg;
                            sm[base + 1] += t01 * gg;
                            sm[base + w] += t10 * gg;
                            sm[base + w + 1] += t11 * gg;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let m = node.value.shape()[0];
                let mut off = 0;
                for p in parts {
                    let pw = self.nodes[p.0].value.shape()[1];
                    acc(*p, &mut |s| {
                        for r in 0..m {
                            add_into(&mut s[r * pw..(r + 1) * pw], &g[r * total + off..r * total + off + pw]);
                        }
                    });
                    off += pw;
                }
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    acc(*p, &mut |s| add_into(s, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, len) = (node.value.shape()[0], node.value.shape()[1]);
                let n = self.nodes[x.0].value.shape()[1];
                acc(*x, &mut |s| {
                    for r in 0..m {
                        add_into(&mut s[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::MeanOf(parts) => {
                let k = 1.0 / parts.len() as f64;
                for p in parts {
                    acc(*p, &mut |s| s.iter_mut().zip(g).for_each(|(a, b)| *a += k * b));
                }
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::AbsMean(x) => {
                let xv = val(*x);
                let n = xv.len() as f64;
                acc(*x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[0] * xv[k].signum() * if xv[k] == 0.0 { 0.0 } else { 1.0 } / n;
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.shape()[1];
                acc(*x, &mut |s| {
                    for (r, (yr, gr)) in out.chunks(n).zip(g.chunks(n)).enumerate() {
                        let d = dot(yr, gr);
                        for k in 0..n {
                            s[r * n + k] += yr[k] * (gr[k] - d);
                        }
                    }
                });
            }
            Op::WeightedRelSum { w, rel } => {
                let k = self.nodes[w.0].value.shape()[1];
                let p = self.nodes[w.0].value.shape()[0];
                let (wd, rd) = (val(*w), val(*rel));
                acc(*w, &mut |s| {
                    for i in 0..p {
                        for j in 0..k {
                            s[i * k + j] += (0..3).map(|c| g[i * 3 + c] * rd[i * 3 * k + j * 3 + c]).sum::<f64>();
                        }
                    }
                });
                acc(*rel, &mut |s| {
                    for i in 0..p {
                        for j in 0..k {
                            for c in 0..3 {
                                s[i * 3 * k + j * 3 + c] += wd[i * k + j] * g[i * 3 + c];
                            }
                        }
                    }
                });
            }
            Op::SelfAttention { q, k, v, probs } => {
                let (n, d) = (self.nodes[q.0].value.shape()[0], self.nodes[q.0].value.shape()[1]);
                let dv = self.nodes[v.0].value.shape()[1];
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                acc(*v, &mut |s| gemm_tn_acc(probs, g, n, n, dv, s));
                // dP = g vᵀ, dS = P ⊙ (dP − rowsum(dP ⊙ P)) / √d
                let mut dp = vec![0.0; n * n];
                gemm_nt(g, vv, n, dv, n, &mut dp);
                let scale = 1.0 / (d as f64).sqrt();
                for r in 0..n {
                    let pr = &probs[r * n..(r + 1) * n];
                    let row = &mut dp[r * n..(r + 1) * n];
                    let c = dot(pr, row);
                    for j in 0..n {
                        row[j] = pr[j] * (row[j] - c) * scale;
                    }
                }
                acc(*q, &mut |s| gemm_nn_acc(&dp, kv, n, n, d, s));
                acc(*k, &mut |s| gemm_tn_acc(&dp, qv, n, n, d, s));
            }
            Op::Displacement { pred, target, kind } => {
                let pd = val(*pred);
                let pairs = pd.len() / 3;
                let k = g[0] / pairs.max(1) as f64;
                acc(*pred, &mut |s| {
                    for i in 0..pairs {
                        let p = [pd[3 * i], pd[3 * i + 1], pd[3 * i + 2]];
                        let q = [target[3 * i], target[3 * i + 1], target[3 * i + 2]];
                        let d = pair_loss(p, q, *kind).1;
                        for c in 0..3 {
                            s[3 * i + c] += k * d[c];
                        }
                    }
                });
            }
            Op::BceLogits { logits, target } => {
                let lv = val(*logits);
                let n = target.len().max(1) as f64;
                acc(*logits, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[0] * (sigmoid(lv[k]) - target[k]) / n;
                    }
                });
            }
            Op::UnitNormPenalty(x) => {
                let gd = val(*x);
                let d = self.nodes[x.0].value.shape()[1];
                let p = gd.len() / d;
                acc(*x, &mut |s| {
                    for i in 0..p {
                        let row = &gd[i * d..(i + 1) * d];
                        let n = dot(row, row).sqrt();
                        if n > 0.0 {
                            let f = g[0] * 2.0 * (n - 1.0) / n / p as f64;
                            for c in 0..d {
                                s[i * d + c] += f * row[c];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Corner weights of the bilinear tangent plus the base texel index.
fn tangent_weights(pts: &[f64], dpts: &[f64], i: usize, h: usize, w: usize) -> [f64; 5] {
    let f = footprint(pts[2 * i], pts[2 * i + 1], h, w);
    let dfx = dpts[2 * i] * f.dx;
    let dfy = dpts[2 * i + 1] * f.dy;
    [
        -(1.0 - f.fy) * dfx - (1.0 - f.fx) * dfy,
        (1.0 - f.fy) * dfx - f.fx * dfy,
        -f.fy * dfx + (1.0 - f.fx) * dfy,
        f.fy * dfx + f.fx * dfy,
        (f.y0 * w + f.x0) as f64,
    ]
}

/// Per-pair loss value and its gradient with respect to the prediction.
pub(crate) fn pair_loss(p: [f64; 3], q: [f64; 3], kind: LossKind) -> (f64, [f64; 3]) {
    let np = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    let nq = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
    match kind {
        LossKind::Directional { lambda1, lambda2, tau } => {
            let mut value = 0.0;
            let mut grad = [0.0; 3];
            if nq > 0.0 {
                let pq = p[0] * q[0] + p[1] * q[1] + p[2] * q[2];
                let den = np * nq;
                if den > COS_EPS {
                    let cos = pq / den;
                    value += lambda1 * (1.0 - cos);
                    for c in 0..3 {
                        grad[c] -= lambda1 * (q[c] / den - cos * p[c] / (np * np));
                    }
                } else {
                    value += lambda1 * (1.0 - pq / COS_EPS);
                    for c in 0..3 {
                        grad[c] -= lambda1 * q[c] / COS_EPS;
                    }
                }
            }
            let (cp, cq) = (np.min(tau), nq.min(tau));
            let diff = cp - cq;
            value += lambda2 * diff.abs();
            if np < tau && np > 0.0 && diff != 0.0 {
                let sgn = diff.signum();
                for c in 0..3 {
                    grad[c] += lambda2 * sgn * p[c] / np;
                }
            }
            (value, grad)
        }
        LossKind::ClippedL2 { tau } => {
            let k = if nq > tau { tau / nq } else { 1.0 };
            let mut value = 0.0;
            let mut grad = [0.0; 3];
            for c in 0..3 {
                let d = p[c] - k * q[c];
                value += d * d;
                grad[c] = 2.0 * d;
            }
            (value, grad)
        }
    }
}
