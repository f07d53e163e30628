//! Layer kernels with a forward-over-reverse mode.
//!
//! Activations are stored channel-major (`C x B x H x W`), so a dense layer is
//! the `H = W = 1` special case of a convolution and every convolution is a
//! single GEMM against an im2col buffer.
//!
//! Every kernel optionally carries a tangent: the derivative of its value with
//! respect to a scalar `t` where the parameters move as `theta + t * u`. Running
//! the backward pass on such tangents yields `d/dt grad_x loss`, which equals
//! `grad_x <u, grad_theta loss>`.

use crate::real::Real;

/// Activation tensor in `C x B x H x W` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Act<F> {
    pub data: Vec<F>,
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
}

impl<F: Real> Act<F> {
    pub fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Act {
            data: vec![F::zero(); c * b * h * w],
            c,
            b,
            h,
            w,
        }
    }

    fn like(&self) -> Self {
        Self::zeros(self.c, self.b, self.h, self.w)
    }

    fn shape(&self) -> [usize; 4] {
        [self.c, self.b, self.h, self.w]
    }

    /// Build from a batch in `B x C x H x W` order.
    pub fn from_bchw(data: &[F], b: usize, c: usize, h: usize, w: usize) -> Self {
        let hw = h * w;
        let mut out = vec![F::zero(); data.len()];
        for bi in 0..b {
            for ci in 0..c {
                let src = &data[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                out[(ci * b + bi) * hw..(ci * b + bi + 1) * hw].copy_from_slice(src);
            }
        }
        Act { data: out, c, b, h, w }
    }

    pub fn to_bchw(&self) -> Vec<F> {
        let hw = self.h * self.w;
        let mut out = vec![F::zero(); self.data.len()];
        for ci in 0..self.c {
            for bi in 0..self.b {
                let src = &self.data[(ci * self.b + bi) * hw..(ci * self.b + bi + 1) * hw];
                out[(bi * self.c + ci) * hw..(bi * self.c + ci + 1) * hw].copy_from_slice(src);
            }
        }
        out
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Convolution with a square `k x k` kernel, stride 1 and `pad` zero padding
/// (`k = 1, pad = 0` on `1 x 1` maps is a dense layer).
#[derive(Debug, Clone)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
    pub w_off: usize,
    pub b_off: usize,
    pub init_gain: f64,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h + 2 * self.pad + 1 - self.k, w + 2 * self.pad + 1 - self.k)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }

    fn im2col<F: Real>(&self, x: &Act<F>) -> Vec<F> {
        if self.is_pointwise() {
            return x.data.clone();
        }
        let (oh, ow) = self.out_hw(x.h, x.w);
        let cols = x.b * oh * ow;
        let mut col = vec![F::zero(); self.rows() * cols];
        let pad = self.pad as isize;
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst_row = &mut col[row * cols..(row + 1) * cols];
                    let dx = kx as isize - pad;
                    let dy = ky as isize - pad;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((x.w as isize - dx).min(ow as isize)).max(0) as usize;
                    for bi in 0..x.b {
                        let plane = &x.data[(ci * x.b + bi) * x.h * x.w..][..x.h * x.w];
                        for y in 0..oh {
                            let yy = y as isize + dy;
                            if yy < 0 || yy >= x.h as isize || x_lo >= x_hi {
                                continue;
                            }
                            let src_start = yy as usize * x.w + (x_lo as isize + dx) as usize;
                            let dst_start = (bi * oh + y) * ow + x_lo;
                            dst_row[dst_start..dst_start + (x_hi - x_lo)]
                                .copy_from_slice(&plane[src_start..src_start + (x_hi - x_lo)]);
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<F: Real>(&self, col: Vec<F>, b: usize, h: usize, w: usize) -> Act<F> {
        if self.is_pointwise() {
            return Act {
                data: col,
                c: self.cin,
                b,
                h,
                w,
            };
        }
        let (oh, ow) = self.out_hw(h, w);
        let cols = b * oh * ow;
        let mut out = Act::zeros(self.cin, b, h, w);
        let pad = self.pad as isize;
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src_row = &col[row * cols..(row + 1) * cols];
                    let dx = kx as isize - pad;
                    let dy = ky as isize - pad;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(ow as isize)).max(0) as usize;
                    for bi in 0..b {
                        let plane = &mut out.data[(ci * b + bi) * h * w..][..h * w];
                        for y in 0..oh {
                            let yy = y as isize + dy;
                            if yy < 0 || yy >= h as isize || x_lo >= x_hi {
                                continue;
                            }
                            let dst_start = yy as usize * w + (x_lo as isize + dx) as usize;
                            let src_start = (bi * oh + y) * ow + x_lo;
                            add_into(
                                &mut plane[dst_start..dst_start + (x_hi - x_lo)],
                                &src_row[src_start..src_start + (x_hi - x_lo)],
                            );
                        }
                    }
                }
            }
        }
        out
    }

    fn param_grad<F: Real>(&self, n_params: usize, dy: &Act<F>, col: &[F], sink: &mut ParamSink<'_, F>) {
        let cols = dy.b * dy.h * dy.w;
        match sink {
            ParamSink::Discard => {}
            ParamSink::Sum(g) => {
                assert_eq!(g.len(), n_params);
                let gw = &mut g[self.w_off..self.w_off + self.weight_len()];
                F::gemm(false, true, self.cout, self.rows(), cols, F::one(), &dy.data, col, F::one(), gw);
                for (co, row) in dy.data.chunks(cols).enumerate() {
                    let s: F = row.iter().copied().sum();
                    g[self.b_off + co] += s;
                }
            }
            ParamSink::PerSample(stats) => {
                let per = dy.h * dy.w;
                let tw = &stats.target[self.w_off..self.w_off + self.weight_len()];
                let tb = &stats.target[self.b_off..self.b_off + self.cout];
                let mut scratch = vec![F::zero(); self.weight_len()];
                for bi in 0..dy.b {
                    let off = bi * per;
                    F::gemm_strided(
                        self.cout,
                        self.rows(),
                        per,
                        F::one(),
                        (&dy.data[off..], cols, 1),
                        (&col[off..], 1, cols),
                        F::zero(),
                        (&mut scratch, self.rows(), 1),
                    );
                    let mut sq = 0.0;
                    let mut dot = 0.0;
                    for (g, t) in scratch.iter().zip(tw) {
                        let g = g.f64();
                        sq += g * g;
                        dot += g * t.f64();
                    }
                    for co in 0..self.cout {
                        let g: f64 = dy.data[co * cols + off..co * cols + off + per].iter().map(|v| v.f64()).sum();
                        sq += g * g;
                        dot += g * tb[co].f64();
                    }
                    stats.sq_norms[bi] += sq;
                    stats.dots[bi] += dot;
                }
            }
        }
    }

    /// `W * col + bias` with `W` the `cout x rows` block at `w_off` of `p`.
    fn apply<F: Real>(&self, p: &[F], col: &[F], cols: usize, with_bias: bool, out: &mut [F]) {
        let wmat = &p[self.w_off..self.w_off + self.weight_len()];
        F::gemm(false, false, self.cout, cols, self.rows(), F::one(), wmat, col, F::one(), out);
        if with_bias {
            let bias = &p[self.b_off..self.b_off + self.cout];
            for (co, row) in out.chunks_mut(cols).enumerate() {
                for v in row {
                    *v += bias[co];
                }
            }
        }
    }
}

/// Pixel statistics the input layer centers and scales by.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct Residual {
    pub body: Vec<Layer>,
    pub shortcut: Option<Conv>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    /// Fixed `(x - INPUT_MEAN) / INPUT_STD`, no parameters.
    Standardize,
    Conv(Conv),
    Relu,
    MaxPool2,
    AvgPool2,
    GlobalAvgPool,
    Flatten,
    Residual(Residual),
}

#[derive(Debug)]
pub enum Cache<F> {
    Standardize,
    Conv { col: Option<Vec<F>>, in_shape: [usize; 4] },
    Relu { mask: Vec<bool> },
    MaxPool { argmax: Vec<u32>, in_shape: [usize; 4] },
    AvgPool { in_shape: [usize; 4] },
    Gap { in_shape: [usize; 4] },
    Flatten { in_shape: [usize; 4] },
    Residual { body: Vec<Cache<F>>, shortcut: Option<Box<Cache<F>>> },
}

/// Where parameter gradients of a backward pass go.
pub enum ParamSink<'a, F> {
    Discard,
    /// Accumulate the batch-summed gradient.
    Sum(&'a mut [F]),
    /// Per-sample squared norms and inner products with a fixed direction.
    PerSample(PerSampleStats<'a, F>),
}

impl<F> ParamSink<'_, F> {
    fn active(&self) -> bool {
        !matches!(self, ParamSink::Discard)
    }
}

pub struct PerSampleStats<'a, F> {
    pub target: &'a [F],
    pub sq_norms: Vec<f64>,
    pub dots: Vec<f64>,
}

/// Which derivative products a pass must support.
#[derive(Debug, Clone, Copy)]
pub struct PassMode<'a, F> {
    /// Keep what is needed to accumulate parameter gradients.
    pub param_grad: bool,
    /// Parameter tangent direction `u`.
    pub tangent: Option<&'a [F]>,
}

impl Layer {
    pub fn forward<F: Real>(
        &self,
        p: &[F],
        mode: PassMode<'_, F>,
        x: Act<F>,
        xt: Option<Act<F>>,
        caches: &mut Vec<Cache<F>>,
    ) -> (Act<F>, Option<Act<F>>) {
        match self {
            Layer::Conv(conv) => {
                let in_shape = x.shape();
                let (oh, ow) = conv.out_hw(x.h, x.w);
                let cols = x.b * oh * ow;
                let col = conv.im2col(&x);
                let mut z = Act::zeros(conv.cout, x.b, oh, ow);
                conv.apply(p, &col, cols, true, &mut z.data);
                let zt = mode.tangent.map(|u| {
                    let mut zt = Act::zeros(conv.cout, x.b, oh, ow);
                    conv.apply(u, &col, cols, true, &mut zt.data);
                    if let Some(xt) = &xt {
                        let colt = conv.im2col(xt);
                        conv.apply(p, &colt, cols, false, &mut zt.data);
                    }
                    zt
                });
                caches.push(Cache::Conv {
                    col: mode.param_grad.then_some(col),
                    in_shape,
                });
                (z, zt)
            }
            Layer::Relu => {
                let mut y = x;
                let mask: Vec<bool> = y.data.iter().map(|v| *v > F::zero()).collect();
                for (v, m) in y.data.iter_mut().zip(&mask) {
                    if !m {
                        *v = F::zero();
                    }
                }
                let yt = xt.map(|mut t| {
                    for (v, m) in t.data.iter_mut().zip(&mask) {
                        if !m {
                            *v = F::zero();
                        }
                    }
                    t
                });
                caches.push(Cache::Relu { mask });
                (y, yt)
            }
            Layer::MaxPool2 => {
                let (oh, ow) = (x.h / 2, x.w / 2);
                let mut y = Act::zeros(x.c, x.b, oh, ow);
                let mut argmax = vec![0u32; y.data.len()];
                for plane in 0..x.c * x.b {
                    let ib = plane * x.h * x.w;
                    let ob = plane * oh * ow;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = ib + 2 * oy * x.w + 2 * ox;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = ib + (2 * oy + dy) * x.w + 2 * ox + dx;
                                if x.data[idx] > x.data[best] {
                                    best = idx;
                                }
                            }
                            y.data[ob + oy * ow + ox] = x.data[best];
                            argmax[ob + oy * ow + ox] = best as u32;
                        }
                    }
                }
                let yt = xt.map(|t| {
                    let mut yt = y.like();
                    for (o, &a) in yt.data.iter_mut().zip(&argmax) {
                        *o = t.data[a as usize];
                    }
                    yt
                });
                caches.push(Cache::MaxPool {
                    argmax,
                    in_shape: x.shape(),
                });
                (y, yt)
            }
            Layer::AvgPool2 => {
                let in_shape = x.shape();
                let y = avg_pool2(&x);
                let yt = xt.map(|t| avg_pool2(&t));
                caches.push(Cache::AvgPool { in_shape });
                (y, yt)
            }
            Layer::GlobalAvgPool => {
                let in_shape = x.shape();
                let y = global_avg(&x);
                let yt = xt.map(|t| global_avg(&t));
                caches.push(Cache::Gap { in_shape });
                (y, yt)
            }
            Layer::Standardize => {
                let (m, s) = (F::of(INPUT_MEAN), F::of(1.0 / INPUT_STD));
                let mut y = x;
                y.data.iter_mut().for_each(|v| *v = (*v - m) * s);
                let yt = xt.map(|mut t| {
                    t.data.iter_mut().for_each(|v| *v = *v * s);
                    t
                });
                caches.push(Cache::Standardize);
                (y, yt)
            }
            Layer::Flatten => {
                let in_shape = x.shape();
                let y = flatten(&x);
                let yt = xt.map(|t| flatten(&t));
                caches.push(Cache::Flatten { in_shape });
                (y, yt)
            }
            Layer::Residual(res) => {
                let mut body_caches = Vec::with_capacity(res.body.len());
                let (mut y, mut yt) = (x.clone(), xt.clone());
                for layer in &res.body {
                    (y, yt) = layer.forward(p, mode, y, yt, &mut body_caches);
                }
                let (s, st, short_cache) = match &res.shortcut {
                    Some(conv) => {
                        let mut c = Vec::with_capacity(1);
                        let (s, st) = Layer::Conv(conv.clone()).forward(p, mode, x, xt, &mut c);
                        (s, st, c.pop().map(Box::new))
                    }
                    None => (x, xt, None),
                };
                add_into(&mut y.data, &s.data);
                let yt = match (yt, st) {
                    (Some(mut a), Some(b)) => {
                        add_into(&mut a.data, &b.data);
                        Some(a)
                    }
                    (a, b) => a.or(b),
                };
                caches.push(Cache::Residual {
                    body: body_caches,
                    shortcut: short_cache,
                });
                (y, yt)
            }
        }
    }

    /// Backpropagate `dy` (and its tangent), routing parameter gradients to `sink`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<F: Real>(
        &self,
        p: &[F],
        mode: PassMode<'_, F>,
        cache: Cache<F>,
        dy: Act<F>,
        dyt: Option<Act<F>>,
        sink: &mut ParamSink<'_, F>,
        need_input: bool,
    ) -> (Option<Act<F>>, Option<Act<F>>) {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Conv { col, in_shape }) => {
                let [_, b, h, w] = in_shape;
                let cols = dy.b * dy.h * dy.w;
                if sink.active() {
                    let col = col.expect("conv cache lacks im2col buffer for parameter gradient");
                    conv.param_grad(p.len(), &dy, &col, sink);
                }
                if !need_input {
                    return (None, None);
                }
                let wmat = &p[conv.w_off..conv.w_off + conv.weight_len()];
                let mut dcol = vec![F::zero(); conv.rows() * cols];
                F::gemm(true, false, conv.rows(), cols, conv.cout, F::one(), wmat, &dy.data, F::zero(), &mut dcol);
                let dxt = mode.tangent.map(|u| {
                    let umat = &u[conv.w_off..conv.w_off + conv.weight_len()];
                    let mut dcolt = vec![F::zero(); conv.rows() * cols];
                    F::gemm(true, false, conv.rows(), cols, conv.cout, F::one(), umat, &dy.data, F::zero(), &mut dcolt);
                    if let Some(dyt) = &dyt {
                        F::gemm(true, false, conv.rows(), cols, conv.cout, F::one(), wmat, &dyt.data, F::one(), &mut dcolt);
                    }
                    conv.col2im(dcolt, b, h, w)
                });
                (Some(conv.col2im(dcol, b, h, w)), dxt)
            }
            (Layer::Relu, Cache::Relu { mask }) => {
                let gate = |mut a: Act<F>| {
                    for (v, m) in a.data.iter_mut().zip(&mask) {
                        if !m {
                            *v = F::zero();
                        }
                    }
                    a
                };
                (Some(gate(dy)), dyt.map(gate))
            }
            (Layer::MaxPool2, Cache::MaxPool { argmax, in_shape }) => {
                let [c, b, h, w] = in_shape;
                let scatter = |d: Act<F>| {
                    let mut dx = Act::zeros(c, b, h, w);
                    for (v, &a) in d.data.iter().zip(&argmax) {
                        dx.data[a as usize] += *v;
                    }
                    dx
                };
                (Some(scatter(dy)), dyt.map(scatter))
            }
            (Layer::AvgPool2, Cache::AvgPool { in_shape }) => {
                (Some(avg_pool2_back(&dy, in_shape)), dyt.map(|t| avg_pool2_back(&t, in_shape)))
            }
            (Layer::GlobalAvgPool, Cache::Gap { in_shape }) => {
                (Some(global_avg_back(&dy, in_shape)), dyt.map(|t| global_avg_back(&t, in_shape)))
            }
            (Layer::Standardize, Cache::Standardize) => {
                if !need_input {
                    return (None, None);
                }
                let s = F::of(1.0 / INPUT_STD);
                let scale = |mut a: Act<F>| {
                    a.data.iter_mut().for_each(|v| *v = *v * s);
                    a
                };
                (Some(scale(dy)), dyt.map(scale))
            }
            (Layer::Flatten, Cache::Flatten { in_shape }) => {
                (Some(unflatten(&dy, in_shape)), dyt.map(|t| unflatten(&t, in_shape)))
            }
            (Layer::Residual(res), Cache::Residual { body, shortcut }) => {
                let (mut d, mut dt) = (dy.clone(), dyt.clone());
                for (layer, cache) in res.body.iter().zip(body).rev() {
                    let (nd, ndt) = layer.backward(p, mode, cache, d, dt, sink, true);
                    d = nd.expect("interior layers return input gradients");
                    dt = ndt;
                }
                let (sd, sdt) = match (&res.shortcut, shortcut) {
                    (Some(conv), Some(cache)) => {
                        let (sd, sdt) = Layer::Conv(conv.clone()).backward(
                            p,
                            mode,
                            *cache,
                            dy,
                            dyt,
                            sink,
                            true,
                        );
                        (sd.expect("shortcut input gradient"), sdt)
                    }
                    _ => (dy, dyt),
                };
                add_into(&mut d.data, &sd.data);
                let dt = match (dt, sdt) {
                    (Some(mut a), Some(b)) => {
                        add_into(&mut a.data, &b.data);
                        Some(a)
                    }
                    (a, b) => a.or(b),
                };
                (Some(d), dt)
            }
            (layer, _) => panic!("cache does not belong to layer {layer:?}"),
        }
    }
}

fn avg_pool2<F: Real>(x: &Act<F>) -> Act<F> {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Act::zeros(x.c, x.b, oh, ow);
    let quarter = F::of(0.25);
    for plane in 0..x.c * x.b {
        let ib = plane * x.h * x.w;
        let ob = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let i = ib + 2 * oy * x.w + 2 * ox;
                y.data[ob + oy * ow + ox] =
                    (x.data[i] + x.data[i + 1] + x.data[i + x.w] + x.data[i + x.w + 1]) * quarter;
            }
        }
    }
    y
}

fn avg_pool2_back<F: Real>(dy: &Act<F>, in_shape: [usize; 4]) -> Act<F> {
    let [c, b, h, w] = in_shape;
    let (oh, ow) = (dy.h, dy.w);
    let mut dx = Act::zeros(c, b, h, w);
    let quarter = F::of(0.25);
    for plane in 0..c * b {
        let ib = plane * h * w;
        let ob = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy.data[ob + oy * ow + ox] * quarter;
                let i = ib + 2 * oy * w + 2 * ox;
                dx.data[i] += g;
                dx.data[i + 1] += g;
                dx.data[i + w] += g;
                dx.data[i + w + 1] += g;
            }
        }
    }
    dx
}

fn global_avg<F: Real>(x: &Act<F>) -> Act<F> {
    let hw = x.h * x.w;
    let inv = F::one() / F::from_usize(hw).unwrap();
    let data = x
        .data
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<F>() * inv)
        .collect();
    Act {
        data,
        c: x.c,
        b: x.b,
        h: 1,
        w: 1,
    }
}

fn global_avg_back<F: Real>(dy: &Act<F>, in_shape: [usize; 4]) -> Act<F> {
    let [c, b, h, w] = in_shape;
    let hw = h * w;
    let inv = F::one() / F::from_usize(hw).unwrap();
    let mut data = Vec::with_capacity(c * b * hw);
    for v in &dy.data {
        data.extend(std::iter::repeat_n(*v * inv, hw));
    }
    Act { data, c, b, h, w }
}

fn flatten<F: Real>(x: &Act<F>) -> Act<F> {
    let hw = x.h * x.w;
    let mut data = vec![F::zero(); x.data.len()];
    for ci in 0..x.c {
        for bi in 0..x.b {
            let src = &x.data[(ci * x.b + bi) * hw..][..hw];
            for (pix, v) in src.iter().enumerate() {
                data[(ci * hw + pix) * x.b + bi] = *v;
            }
        }
    }
    Act {
        data,
        c: x.c * hw,
        b: x.b,
        h: 1,
        w: 1,
    }
}

fn unflatten<F: Real>(dy: &Act<F>, in_shape: [usize; 4]) -> Act<F> {
    let [c, b, h, w] = in_shape;
    let hw = h * w;
    let mut out = Act::zeros(c, b, h, w);
    for ci in 0..c {
        for bi in 0..b {
            let dst = &mut out.data[(ci * b + bi) * hw..][..hw];
            for (pix, v) in dst.iter_mut().enumerate() {
                *v = dy.data[(ci * hw + pix) * b + bi];
            }
        }
    }
    out
}
