//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation as a node holding its output value and
//! a closure that maps the output gradient to input gradients. Nodes whose
//! inputs are all constants store no closure, so an inference pass with
//! constant parameters costs only the forward arithmetic.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::losses::{bce, bce_grad, SplatPlan};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
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

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

#[derive(serde::Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

/// Handle to a tape node.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Silu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient accumulator handed to backward closures.
pub struct Grads<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    needs: &'a [bool],
    sizes: &'a [usize],
}

impl Grads<'_> {
    /// Mutable gradient buffer of `v`, or `None` if `v` is a constant.
    pub fn acc(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.needs[v.0] {
            return None;
        }
        let n = self.sizes[v.0];
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }
}

type BackwardFn = Box<dyn Fn(&[Tensor], &[f64], &mut Grads<'_>)>;

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    needs: Vec<bool>,
    sizes: Vec<usize>,
    backward: Vec<Option<BackwardFn>>,
}

/// Gradients of a scalar with respect to every differentiable leaf.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `v` is a constant or does not influence the output.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when it does not influence the output.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.values[v.0].shape
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.insert(t, true, None)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.insert(t, false, None)
    }

    fn insert(&mut self, t: Tensor, needs: bool, backward: Option<BackwardFn>) -> Var {
        self.sizes.push(t.len());
        self.values.push(t);
        self.needs.push(needs);
        self.backward.push(backward);
        Var(self.values.len() - 1)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], f: impl Fn(&[Tensor], &[f64], &mut Grads<'_>) + 'static) -> Var {
        let needs = inputs.iter().any(|v| self.needs[v.0]);
        let bf: Option<BackwardFn> = if needs { Some(Box::new(f)) } else { None };
        self.insert(value, needs, bf)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.values[output.0].len() != 1 {
            return shape_err(format!(
                "backward needs a scalar output, got shape {:?}",
                self.values[output.0].shape
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        if self.needs[output.0] {
            grads[output.0] = Some(vec![1.0]);
        }
        for i in (0..=output.0).rev() {
            let Some(bf) = &self.backward[i] else { continue };
            let Some(g) = grads[i].take() else { continue };
            let mut acc = Grads {
                grads: &mut grads,
                needs: &self.needs,
                sizes: &self.sizes,
            };
            bf(&self.values, &g, &mut acc);
        }
        Ok(Gradients { grads })
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape.clone(), data)?;
        Ok(self.push(out, &[a, b], move |_, g, gr| {
            for v in [a, b] {
                if let Some(d) = gr.acc(v) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape.clone(), data)?;
        Ok(self.push(out, &[a, b], move |vals, g, gr| {
            let (x, y) = (&vals[a.0].data, &vals[b.0].data);
            if let Some(d) = gr.acc(a) {
                for i in 0..g.len() {
                    d[i] += g[i] * y[i];
                }
            }
            if let Some(d) = gr.acc(b) {
                for i in 0..g.len() {
                    d[i] += g[i] * x[i];
                }
            }
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| v * s).collect(),
        };
        self.push(out, &[a], move |_, g, gr| {
            if let Some(d) = gr.acc(a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
            }
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(out, &[a], move |_, g, gr| {
            if let Some(d) = gr.acc(a) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        })
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let x = self.value(a);
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| act.apply(v)).collect(),
        };
        self.push(out, &[a], move |vals, g, gr| {
            let x = &vals[a.0].data;
            if let Some(d) = gr.acc(a) {
                for i in 0..g.len() {
                    d[i] += g[i] * act.derivative(x[i]);
                }
            }
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| sigmoid(v)).collect(),
        };
        let me = Var(self.values.len());
        self.push(out, &[a], move |vals, g, gr| {
            let y = &vals[me.0].data;
            if let Some(d) = gr.acc(a) {
                for i in 0..g.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = Tensor::new(shape, self.value(a).data.clone())?;
        Ok(self.push(out, &[a], move |_, g, gr| {
            if let Some(d) = gr.acc(a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }))
    }

    /// `x [B, Ci, H, W]`, `w [Co, Ci, Kh, Kw]`, `b [Co]` -> `[B, Co, Ho, Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 4 || ws.len() != 4 || bs != [ws[0]] || ws[1] != xs[1] || stride == 0 {
            return shape_err(format!("conv2d: x {xs:?}, w {ws:?}, b {bs:?}"));
        }
        let (nb, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err(format!("conv2d: kernel larger than padded input {xs:?}"));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            ci,
            h,
            wd,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        };
        let (k, p) = (geom.rows(), ho * wo);
        let (in_len, out_len) = (ci * h * wd, co * p);
        let mut cols = vec![0.0; nb * k * p];
        let mut out = vec![0.0; nb * out_len];
        {
            let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
            for bi in 0..nb {
                let c = &mut cols[bi * k * p..(bi + 1) * k * p];
                geom.im2col(&xv[bi * in_len..(bi + 1) * in_len], c);
                let o = &mut out[bi * out_len..(bi + 1) * out_len];
                for (ch, row) in o.chunks_mut(p).enumerate() {
                    row.fill(bv[ch]);
                }
                gemm(co, k, p, wv, (k, 1), c, (p, 1), 1.0, o, (p, 1));
            }
        }
        let out = Tensor::new(vec![nb, co, ho, wo], out)?;
        Ok(self.push(out, &[x, w, b], move |vals, g, gr| {
            if let Some(d) = gr.acc(x) {
                let wv = &vals[w.0].data;
                let mut dcols = vec![0.0; k * p];
                for bi in 0..nb {
                    let gb = &g[bi * out_len..(bi + 1) * out_len];
                    gemm(k, co, p, wv, (1, k), gb, (p, 1), 0.0, &mut dcols, (p, 1));
                    geom.col2im_add(&dcols, &mut d[bi * in_len..(bi + 1) * in_len]);
                }
            }
            if let Some(d) = gr.acc(w) {
                for bi in 0..nb {
                    let gb = &g[bi * out_len..(bi + 1) * out_len];
                    let c = &cols[bi * k * p..(bi + 1) * k * p];
                    gemm(co, p, k, gb, (p, 1), c, (1, p), 1.0, d, (k, 1));
                }
            }
            if let Some(d) = gr.acc(b) {
                for gb in g.chunks(out_len) {
                    for (ch, row) in gb.chunks(p).enumerate() {
                        d[ch] += row.iter().sum::<f64>();
                    }
                }
            }
        }))
    }

    /// Transposed convolution with a 2x2 kernel and stride 2.
    /// `x [B, Ci, H, W]`, `w [Ci, Co, 2, 2]`, `b [Co]` -> `[B, Co, 2H, 2W]`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2..] != [2, 2] || bs != [ws[1]] {
            return shape_err(format!("conv_transpose2x2: x {xs:?}, w {ws:?}, b {bs:?}"));
        }
        let (nb, ci, h, wd, co) = (xs[0], xs[1], xs[2], xs[3], ws[1]);
        let (ho, wo) = (2 * h, 2 * wd);
        // Row q = (c_out * 2 + di) * 2 + dj of the per-image product
        // `w^T x` holds output channel c_out at offset (di, dj).
        let (q, p) = (4 * co, h * wd);
        let (in_len, out_len) = (ci * p, co * ho * wo);
        let out_index = move |qi: usize, pi: usize| {
            let (c_out, di, dj) = (qi / 4, (qi / 2) % 2, qi % 2);
            let (i, j) = (pi / wd, pi % wd);
            (c_out * ho + 2 * i + di) * wo + 2 * j + dj
        };
        let mut out = vec![0.0; nb * out_len];
        {
            let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
            let mut y = vec![0.0; q * p];
            for bi in 0..nb {
                gemm(
                    q,
                    ci,
                    p,
                    wv,
                    (1, q),
                    &xv[bi * in_len..(bi + 1) * in_len],
                    (p, 1),
                    0.0,
                    &mut y,
                    (p, 1),
                );
                let o = &mut out[bi * out_len..(bi + 1) * out_len];
                for (qi, row) in y.chunks(p).enumerate() {
                    for (pi, v) in row.iter().enumerate() {
                        o[out_index(qi, pi)] = v + bv[qi / 4];
                    }
                }
            }
        }
        let out = Tensor::new(vec![nb, co, ho, wo], out)?;
        Ok(self.push(out, &[x, w, b], move |vals, g, gr| {
            let mut gq = vec![0.0; nb * q * p];
            for bi in 0..nb {
                let gb = &g[bi * out_len..(bi + 1) * out_len];
                for (n, v) in gq[bi * q * p..(bi + 1) * q * p].iter_mut().enumerate() {
                    *v = gb[out_index(n / p, n % p)];
                }
            }
            if let Some(d) = gr.acc(x) {
                let wv = &vals[w.0].data;
                for bi in 0..nb {
                    let gb = &gq[bi * q * p..(bi + 1) * q * p];
                    gemm(
                        ci,
                        q,
                        p,
                        wv,
                        (q, 1),
                        gb,
                        (p, 1),
                        1.0,
                        &mut d[bi * in_len..(bi + 1) * in_len],
                        (p, 1),
                    );
                }
            }
            if let Some(d) = gr.acc(w) {
                let xv = &vals[x.0].data;
                for bi in 0..nb {
                    let gb = &gq[bi * q * p..(bi + 1) * q * p];
                    gemm(
                        ci,
                        p,
                        q,
                        &xv[bi * in_len..(bi + 1) * in_len],
                        (p, 1),
                        gb,
                        (1, p),
                        1.0,
                        d,
                        (q, 1),
                    );
                }
            }
            if let Some(d) = gr.acc(b) {
                for gb in g.chunks(out_len) {
                    for (ch, plane) in gb.chunks(ho * wo).enumerate() {
                        d[ch] += plane.iter().sum::<f64>();
                    }
                }
            }
        }))
    }

    /// `[B, C, H, W]` -> `[B, H*W, C]`: spatial positions become tokens.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err(format!("to_tokens: {s:?}"));
        }
        let (nb, c, t) = (s[0], s[1], s[2] * s[3]);
        let perm = move |bi: usize, ch: usize, tok: usize| ((bi * c + ch) * t + tok, (bi * t + tok) * c + ch);
        let xv = &self.value(x).data;
        let mut out = vec![0.0; xv.len()];
        for bi in 0..nb {
            for ch in 0..c {
                for tok in 0..t {
                    let (src, dst) = perm(bi, ch, tok);
                    out[dst] = xv[src];
                }
            }
        }
        let out = Tensor::new(vec![nb, t, c], out)?;
        Ok(self.push(out, &[x], move |_, g, gr| {
            if let Some(d) = gr.acc(x) {
                for bi in 0..nb {
                    for ch in 0..c {
                        for tok in 0..t {
                            let (src, dst) = perm(bi, ch, tok);
                            d[src] += g[dst];
                        }
                    }
                }
            }
        }))
    }

    /// `[B, T, C]` -> `[B, C, H, W]` with `T = H * W`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != h * w {
            return shape_err(format!("from_tokens: {s:?} into {h}x{w}"));
        }
        let (nb, t, c) = (s[0], s[1], s[2]);
        let xv = &self.value(x).data;
        let mut out = vec![0.0; xv.len()];
        for bi in 0..nb {
            for tok in 0..t {
                for ch in 0..c {
                    out[(bi * c + ch) * t + tok] = xv[(bi * t + tok) * c + ch];
                }
            }
        }
        let out = Tensor::new(vec![nb, c, h, w], out)?;
        Ok(self.push(out, &[x], move |_, g, gr| {
            if let Some(d) = gr.acc(x) {
                for bi in 0..nb {
                    for tok in 0..t {
                        for ch in 0..c {
                            d[(bi * t + tok) * c + ch] += g[(bi * c + ch) * t + tok];
                        }
                    }
                }
            }
        }))
    }

    /// Batched `a [B, M, K] x b [B, K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err(format!("matmul: {sa:?} x {sb:?}"));
        }
        let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; nb * m * n];
        {
            let (av, bv) = (&self.value(a).data, &self.value(b).data);
            for bi in 0..nb {
                for i in 0..m {
                    for p in 0..k {
                        let x = av[(bi * m + i) * k + p];
                        let row = &bv[(bi * k + p) * n..(bi * k + p + 1) * n];
                        let o = &mut out[(bi * m + i) * n..(bi * m + i + 1) * n];
                        o.iter_mut().zip(row).for_each(|(o, y)| *o += x * y);
                    }
                }
            }
        }
        let out = Tensor::new(vec![nb, m, n], out)?;
        Ok(self.push(out, &[a, b], move |vals, g, gr| {
            let (av, bv) = (&vals[a.0].data, &vals[b.0].data);
            if let Some(d) = gr.acc(a) {
                for bi in 0..nb {
                    for i in 0..m {
                        for p in 0..k {
                            let row = &bv[(bi * k + p) * n..(bi * k + p + 1) * n];
                            let gr_row = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            d[(bi * m + i) * k + p] += row.iter().zip(gr_row).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
            }
            if let Some(d) = gr.acc(b) {
                for bi in 0..nb {
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[(bi * m + i) * k + p];
                            let gr_row = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            let drow = &mut d[(bi * k + p) * n..(bi * k + p + 1) * n];
                            drow.iter_mut().zip(gr_row).for_each(|(d, y)| *d += x * y);
                        }
                    }
                }
            }
        }))
    }

    /// Batched `a [B, M, K] x b[B, N, K]^T` -> `[B, M, N]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return shape_err(format!("matmul_nt: {sa:?} x {sb:?}^T"));
        }
        let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let dotk = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        let mut out = vec![0.0; nb * m * n];
        {
            let (av, bv) = (&self.value(a).data, &self.value(b).data);
            for bi in 0..nb {
                for i in 0..m {
                    let ar = &av[(bi * m + i) * k..(bi * m + i + 1) * k];
                    for j in 0..n {
                        out[(bi * m + i) * n + j] = dotk(ar, &bv[(bi * n + j) * k..(bi * n + j + 1) * k]);
                    }
                }
            }
        }
        let out = Tensor::new(vec![nb, m, n], out)?;
        Ok(self.push(out, &[a, b], move |vals, g, gr| {
            let (av, bv) = (&vals[a.0].data, &vals[b.0].data);
            if let Some(d) = gr.acc(a) {
                for bi in 0..nb {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[(bi * m + i) * n + j];
                            let br = &bv[(bi * n + j) * k..(bi * n + j + 1) * k];
                            let dr = &mut d[(bi * m + i) * k..(bi * m + i + 1) * k];
                            dr.iter_mut().zip(br).for_each(|(d, y)| *d += gv * y);
                        }
                    }
                }
            }
            if let Some(d) = gr.acc(b) {
                for bi in 0..nb {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[(bi * m + i) * n + j];
                            let ar = &av[(bi * m + i) * k..(bi * m + i + 1) * k];
                            let dr = &mut d[(bi * n + j) * k..(bi * n + j + 1) * k];
                            dr.iter_mut().zip(ar).for_each(|(d, x)| *d += gv * x);
                        }
                    }
                }
            }
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let Some(&n) = s.last() else {
            return shape_err("softmax of a scalar".into());
        };
        let x = &self.value(a).data;
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in o.iter_mut().zip(row) {
                *o = (v - max).exp();
                z += *o;
            }
            o.iter_mut().for_each(|o| *o /= z);
        }
        let out = Tensor::new(s, out)?;
        let me = Var(self.values.len());
        Ok(self.push(out, &[a], move |vals, g, gr| {
            let y = &vals[me.0].data;
            if let Some(d) = gr.acc(a) {
                for ((yr, gr_), dr) in y.chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)) {
                    let dotv: f64 = yr.iter().zip(gr_).map(|(p, q)| p * q).sum();
                    for i in 0..n {
                        dr[i] += yr[i] * (gr_[i] - dotv);
                    }
                }
            }
        }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap_or(&0);
        if c == 0 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!("layer_norm: x {s:?}, gamma {:?}", self.shape(gamma)));
        }
        let xv = &self.value(x).data;
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..c {
                let h = (row[i] - mean) * is;
                xhat[r * c + i] = h;
                out[r * c + i] = gv[i] * h + bv[i];
            }
        }
        let out = Tensor::new(s, out)?;
        Ok(self.push(out, &[x, gamma, beta], move |vals, g, gr| {
            if let Some(d) = gr.acc(gamma) {
                for (i, (gv, h)) in g.iter().zip(&xhat).enumerate() {
                    d[i % c] += gv * h;
                }
            }
            if let Some(d) = gr.acc(beta) {
                for (i, gv) in g.iter().enumerate() {
                    d[i % c] += gv;
                }
            }
            if let Some(d) = gr.acc(x) {
                let gam = &vals[gamma.0].data;
                let mut dh = vec![0.0; c];
                for r in 0..rows {
                    for i in 0..c {
                        dh[i] = g[r * c + i] * gam[i];
                    }
                    let h = &xhat[r * c..(r + 1) * c];
                    let m1 = dh.iter().sum::<f64>() / c as f64;
                    let m2 = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for i in 0..c {
                        d[r * c + i] += inv_std[r] * (dh[i] - m1 - h[i] * m2);
                    }
                }
            }
        }))
    }

    /// `[B, T, C]` -> `[B, C]`, mean over tokens.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return shape_err(format!("mean_tokens: {s:?}"));
        }
        let (nb, t, c) = (s[0], s[1], s[2]);
        let xv = &self.value(x).data;
        let mut out = vec![0.0; nb * c];
        for bi in 0..nb {
            for tok in 0..t {
                for ch in 0..c {
                    out[bi * c + ch] += xv[(bi * t + tok) * c + ch] / t as f64;
                }
            }
        }
        let out = Tensor::new(vec![nb, c], out)?;
        Ok(self.push(out, &[x], move |_, g, gr| {
            if let Some(d) = gr.acc(x) {
                for bi in 0..nb {
                    for tok in 0..t {
                        for ch in 0..c {
                            d[(bi * t + tok) * c + ch] += g[bi * c + ch] / t as f64;
                        }
                    }
                }
            }
        }))
    }

    /// `x [R, I]`, `w [O, I]`, `b [O]` -> `[R, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return shape_err(format!("linear: x {xs:?}, w {ws:?}, b {bs:?}"));
        }
        let (r, i_dim, o_dim) = (xs[0], xs[1], ws[0]);
        let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        let mut out = vec![0.0; r * o_dim];
        for row in 0..r {
            let xr = &xv[row * i_dim..(row + 1) * i_dim];
            for o in 0..o_dim {
                let wr = &wv[o * i_dim..(o + 1) * i_dim];
                out[row * o_dim + o] = bv[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let out = Tensor::new(vec![r, o_dim], out)?;
        Ok(self.push(out, &[x, w, b], move |vals, g, gr| {
            let (xv, wv) = (&vals[x.0].data, &vals[w.0].data);
            if let Some(d) = gr.acc(x) {
                for row in 0..r {
                    for o in 0..o_dim {
                        let gv = g[row * o_dim + o];
                        let wr = &wv[o * i_dim..(o + 1) * i_dim];
                        let dr = &mut d[row * i_dim..(row + 1) * i_dim];
                        dr.iter_mut().zip(wr).for_each(|(d, w)| *d += gv * w);
                    }
                }
            }
            if let Some(d) = gr.acc(w) {
                for row in 0..r {
                    let xr = &xv[row * i_dim..(row + 1) * i_dim];
                    for o in 0..o_dim {
                        let gv = g[row * o_dim + o];
                        let dr = &mut d[o * i_dim..(o + 1) * i_dim];
                        dr.iter_mut().zip(xr).for_each(|(d, x)| *d += gv * x);
                    }
                }
            }
            if let Some(d) = gr.acc(b) {
                for row in 0..r {
                    for o in 0..o_dim {
                        d[o] += g[row * o_dim + o];
                    }
                }
            }
        }))
    }

    /// `[B, T, C]` -> `[B * heads, T, C / heads]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.permute_heads(x, heads, true)
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.permute_heads(x, heads, false)
    }

    fn permute_heads(&mut self, x: Var, heads: usize, split: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 {
            return shape_err(format!("heads: {s:?}"));
        }
        let (nb, t, c, out_shape) = if split {
            if s[2] % heads != 0 {
                return shape_err(format!("{} channels do not split into {heads} heads", s[2]));
            }
            (s[0], s[1], s[2], vec![s[0] * heads, s[1], s[2] / heads])
        } else {
            if s[0] % heads != 0 {
                return shape_err(format!("batch {} does not merge {heads} heads", s[0]));
            }
            (s[0] / heads, s[1], s[2] * heads, vec![s[0] / heads, s[1], s[2] * heads])
        };
        let dh = c / heads;
        // (merged index, split index)
        let map = move |bi: usize, tok: usize, ch: usize| {
            let (h, cc) = (ch / dh, ch % dh);
            ((bi * t + tok) * c + ch, ((bi * heads + h) * t + tok) * dh + cc)
        };
        let xv = &self.value(x).data;
        let mut out = vec![0.0; xv.len()];
        for bi in 0..nb {
            for tok in 0..t {
                for ch in 0..c {
                    let (m, sp) = map(bi, tok, ch);
                    if split {
                        out[sp] = xv[m];
                    } else {
                        out[m] = xv[sp];
                    }
                }
            }
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, &[x], move |_, g, gr| {
            if let Some(d) = gr.acc(x) {
                for bi in 0..nb {
                    for tok in 0..t {
                        for ch in 0..c {
                            let (m, sp) = map(bi, tok, ch);
                            if split {
                                d[m] += g[sp];
                            } else {
                                d[sp] += g[m];
                            }
                        }
                    }
                }
            }
        }))
    }

    /// Mean over the active rows of the per-row mean BCE between
    /// probabilities `p [B, N]` and constant targets.
    pub fn bce_rows(&mut self, p: Var, targets: &[f64], active: &[bool]) -> Result<Var> {
        let s = self.shape(p).to_vec();
        if s.len() != 2 || targets.len() != s[0] * s[1] || active.len() != s[0] {
            return shape_err(format!("bce_rows: p {s:?}, {} targets", targets.len()));
        }
        let (nb, n) = (s[0], s[1]);
        let count = active.iter().filter(|&&a| a).count();
        if count == 0 || n == 0 {
            return Err(Error::InvalidArgument("bce over no active rows".into()));
        }
        let pv = &self.value(p).data;
        let mut total = 0.0;
        for bi in (0..nb).filter(|&bi| active[bi]) {
            for i in bi * n..(bi + 1) * n {
                total += bce(pv[i], targets[i]);
            }
        }
        let norm = 1.0 / (count * n) as f64;
        let targets = targets.to_vec();
        let active = active.to_vec();
        Ok(self.push(Tensor::scalar(total * norm), &[p], move |vals, g, gr| {
            let pv = &vals[p.0].data;
            if let Some(d) = gr.acc(p) {
                for bi in (0..nb).filter(|&bi| active[bi]) {
                    for i in bi * n..(bi + 1) * n {
                        d[i] += g[0] * norm * bce_grad(pv[i], targets[i]);
                    }
                }
            }
        }))
    }

    /// Mean per-pixel softmax cross-entropy over active samples.
    /// `logits [B, K, H, W]`, `labels` holds `B * H * W` class ids.
    pub fn softmax_ce_rows(&mut self, logits: Var, labels: &[u16], active: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 4 || labels.len() != s[0] * s[2] * s[3] || active.len() != s[0] {
            return shape_err(format!("softmax_ce: logits {s:?}, {} labels", labels.len()));
        }
        let (nb, k, hw) = (s[0], s[1], s[2] * s[3]);
        if let Some(l) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::InvalidArgument(format!("label {l} outside {k} channels")));
        }
        let count = active.iter().filter(|&&a| a).count();
        if count == 0 {
            return Err(Error::InvalidArgument("cross-entropy over no active rows".into()));
        }
        let lv = &self.value(logits).data;
        let norm = 1.0 / (count * hw) as f64;
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for bi in (0..nb).filter(|&bi| active[bi]) {
            let rows = &lv[bi * k * hw..(bi + 1) * k * hw];
            let pr = &mut probs[bi * k * hw..(bi + 1) * k * hw];
            let mut max = vec![f64::NEG_INFINITY; hw];
            for row in rows.chunks(hw) {
                max.iter_mut().zip(row).for_each(|(m, &v)| *m = m.max(v));
            }
            let mut z = vec![0.0; hw];
            for (row, out) in rows.chunks(hw).zip(pr.chunks_mut(hw)) {
                for px in 0..hw {
                    out[px] = (row[px] - max[px]).exp();
                    z[px] += out[px];
                }
            }
            for out in pr.chunks_mut(hw) {
                out.iter_mut().zip(&z).for_each(|(p, z)| *p /= z);
            }
            for px in 0..hw {
                total += max[px] + z[px].ln() - rows[labels[bi * hw + px] as usize * hw + px];
            }
        }
        let labels = labels.to_vec();
        let active = active.to_vec();
        Ok(self.push(Tensor::scalar(total * norm), &[logits], move |_, g, gr| {
            if let Some(d) = gr.acc(logits) {
                let scale = g[0] * norm;
                for bi in (0..nb).filter(|&bi| active[bi]) {
                    let base = bi * k * hw;
                    d[base..base + k * hw]
                        .iter_mut()
                        .zip(&probs[base..base + k * hw])
                        .for_each(|(d, p)| *d += scale * p);
                    for px in 0..hw {
                        d[base + labels[bi * hw + px] as usize * hw + px] -= scale;
                    }
                }
            }
        }))
    }

    /// Pixel anchoring term: each sample with a plan splats its row of
    /// `p [B, N]` and scores the map against its binary mask with mean BCE;
    /// the result is the mean over those samples.
    pub fn pal_rows(
        &mut self,
        p: Var,
        plans: &[Option<Arc<SplatPlan>>],
        masks: &[Option<Arc<Vec<f64>>>],
    ) -> Result<Var> {
        let s = self.shape(p).to_vec();
        if s.len() != 2 || plans.len() != s[0] || masks.len() != s[0] {
            return shape_err(format!("pal: p {s:?}, {} plans", plans.len()));
        }
        let (nb, n) = (s[0], s[1]);
        let pv = &self.value(p).data;
        let mut maps = Vec::with_capacity(nb);
        let mut total = 0.0;
        let mut count = 0usize;
        for bi in 0..nb {
            match (&plans[bi], &masks[bi]) {
                (Some(plan), Some(mask)) => {
                    let (h, w) = plan.image_size();
                    if plan.num_points() != n || mask.len() != h * w {
                        return shape_err(format!("pal: sample {bi} plan or mask size mismatch"));
                    }
                    let map = plan.render(&pv[bi * n..(bi + 1) * n])?.values;
                    total += map.iter().zip(mask.iter()).map(|(&q, &y)| bce(q, y)).sum::<f64>() / map.len() as f64;
                    count += 1;
                    maps.push(Some(map));
                }
                _ => maps.push(None),
            }
        }
        if count == 0 {
            return Err(Error::InvalidArgument("pixel anchoring over no samples".into()));
        }
        let plans = plans.to_vec();
        let masks = masks.to_vec();
        Ok(
            self.push(Tensor::scalar(total / count as f64), &[p], move |vals, g, gr| {
                let pv = &vals[p.0].data;
                let Some(d) = gr.acc(p) else { return };
                for bi in 0..nb {
                    let (Some(plan), Some(mask), Some(map)) = (&plans[bi], &masks[bi], &maps[bi]) else {
                        continue;
                    };
                    let scale = g[0] / (count * map.len()) as f64;
                    let gmap: Vec<f64> = map
                        .iter()
                        .zip(mask.iter())
                        .map(|(&q, &y)| scale * bce_grad(q, y))
                        .collect();
                    let gv = plan
                        .backward_values(&pv[bi * n..(bi + 1) * n], &gmap)
                        .expect("shapes checked in forward");
                    d[bi * n..(bi + 1) * n].iter_mut().zip(gv).for_each(|(d, g)| *d += g);
                }
            }),
        )
    }

    /// `sum_i w_i * x_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        if let Some((v, _)) = terms.iter().find(|(v, _)| self.value(*v).len() != 1) {
            return shape_err(format!("weighted_sum term {:?} is not a scalar", self.shape(*v)));
        }
        let total = terms.iter().map(|(v, w)| w * self.value(*v).item()).sum();
        let inputs: Vec<Var> = terms.iter().map(|(v, _)| *v).collect();
        let terms = terms.to_vec();
        Ok(self.push(Tensor::scalar(total), &inputs, move |_, g, gr| {
            for &(v, w) in &terms {
                if let Some(d) = gr.acc(v) {
                    d[0] += w * g[0];
                }
            }
        }))
    }
}

/// `c = a b + beta c` on strided row-major views; strides are `(row, col)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k == 0 || (last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len()));
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: every index the kernel touches is bounded by the asserts above,
    // and `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Per-image convolution geometry for the im2col lowering.
#[derive(Copy, Clone, Debug)]
struct ConvGeom {
    ci: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    /// Calls `f(col_index, in_index)` for every in-bounds tap; column row
    /// `(ic * kh + ki) * kw + kj` matches the weight layout.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let ConvGeom {
            ci,
            h,
            wd,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        } = *self;
        let p = ho * wo;
        for ic in 0..ci {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ((ic * kh + ki) * kw + kj) * p;
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let in_row = (ic * h + ii as usize) * wd;
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= wd as isize {
                                continue;
                            }
                            f(row + oi * wo + oj, in_row + jj as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        self.for_each_tap(|c, i| cols[c] = x[i]);
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        self.for_each_tap(|c, i| dx[i] += cols[c]);
    }
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
