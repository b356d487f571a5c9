//! Minimal reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Tape`] records a computation as a flat list of nodes; [`Tape::backward`]
//! walks it in reverse and accumulates gradients. Ops are fused at the
//! granularity the restoration network needs (pointwise conv, depthwise conv,
//! channel layer norm, gates, losses) rather than being fully general.
//! Everything is generic over [`Element`] so tests can run the exact same
//! graph in double precision.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, ScalarOperand};

/// Scalar type the tape operates on.
pub trait Element: ndarray::NdFloat + ScalarOperand + std::iter::Sum + 'static {}
impl Element for f32 {}
impl Element for f64 {}

/// Lift an `f64` literal into the tape's element type.
pub fn c<E: Element>(x: f64) -> E {
    E::from(x).expect("literal conversion")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type GradFn<E> = Box<dyn Fn(&ArrayD<E>) -> Vec<ArrayD<E>>>;

struct Node<E: Element> {
    value: ArrayD<E>,
    parents: Vec<Var>,
    grad_fn: Option<GradFn<E>>,
    needs_grad: bool,
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by the `Var` they belong to.
pub struct Grads<E: Element> {
    grads: Vec<Option<ArrayD<E>>>,
}

impl<E: Element> Grads<E> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<E>> {
        self.grads[v.0].as_ref()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &ArrayD<E> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> E {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        *self.nodes[v.0].value.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<E>, parents: Vec<Var>, grad_fn: Option<GradFn<E>>) -> Var {
        let needs_grad =
            grad_fn.is_some() && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            grad_fn: if needs_grad { grad_fn } else { None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A node that never receives gradients.
    pub fn constant(&mut self, value: ArrayD<E>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            grad_fn: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: ArrayD<E>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            grad_fn: None,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Grads<E> {
        let mut grads: Vec<Option<ArrayD<E>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(f) = &self.nodes[i].grad_fn {
                let parent_grads = f(&g);
                debug_assert_eq!(parent_grads.len(), self.nodes[i].parents.len());
                for (p, pg) in self.nodes[i].parents.iter().zip(parent_grads) {
                    if !self.nodes[p.0].needs_grad {
                        continue;
                    }
                    match &mut grads[p.0] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let k: E = c(k);
        let v = self.nodes[a.0].value.mapv(|x| x * k);
        self.push(v, vec![a], Some(Box::new(move |g| vec![g.mapv(|x| x * k)])))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one: E = c(1.0);
        let y = self.nodes[a.0].value.mapv(|x| one / (one + (-x).exp()));
        let yc = y.clone();
        self.push(
            y,
            vec![a],
            Some(Box::new(move |g| {
                let one: E = c(1.0);
                vec![g * &yc.mapv(|s| s * (one - s))]
            })),
        )
    }

    /// Smooth GELU (tanh approximation).
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.nodes[a.0].value.clone();
        let y = x.mapv(gelu_val);
        self.push(
            y,
            vec![a],
            Some(Box::new(move |g| vec![g * &x.mapv(gelu_grad)])),
        )
    }

    // ---- linear algebra ----

    /// `y = x w^T + b` with `x: (B, I)`, `w: (O, I)`, `b: (O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.as2(x);
        let wv = self.as2(w);
        let mut y = xv.dot(&wv.t());
        if let Some(b) = b {
            let bv = self.as1(b);
            y += &bv.broadcast((y.nrows(), y.ncols())).unwrap();
        }
        let (xc, wc) = (xv.to_owned(), wv.to_owned());
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        self.push(
            y.into_dyn(),
            parents,
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let dx = g2.dot(&wc).into_dyn();
                let dw = g2.t().dot(&xc).into_dyn();
                let mut out = vec![dx, dw];
                if has_bias {
                    out.push(g2.sum_axis(Axis(0)).into_dyn());
                }
                out
            })),
        )
    }

    /// Pointwise (1x1) convolution: `x: (B, I, H, W)`, `w: (O, I)`, `b: (O)`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.as4(x);
        let (bs, ci, h, wd) = xv.dim();
        let wv = self.as2(w);
        let co = wv.nrows();
        debug_assert_eq!(wv.ncols(), ci);
        // (B, I, H, W) -> (B*H*W, I)
        let xm = to_rows(&xv);
        let mut ym = xm.dot(&wv.t());
        if let Some(b) = b {
            let bv = self.as1(b);
            ym += &bv.broadcast((ym.nrows(), co)).unwrap();
        }
        let y = from_rows(ym, bs, co, h, wd);
        let (xc, wc) = (xm, wv.to_owned());
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        self.push(
            y.into_dyn(),
            parents,
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let gm = to_rows(&g4);
                let dx = from_rows(gm.dot(&wc), bs, ci, h, wd).into_dyn();
                let dw = gm.t().dot(&xc).into_dyn();
                let mut out = vec![dx, dw];
                if has_bias {
                    out.push(gm.sum_axis(Axis(0)).into_dyn());
                }
                out
            })),
        )
    }

    /// Depthwise 3x3 convolution with zero padding 1. `w: (C, 3, 3)`, `b: (C)`.
    pub fn dwconv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.as4(x).to_owned();
        let wv = self
            .nodes[w.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        let bv = self.as1(b).to_owned();
        let (bs, ch, h, wd) = xv.dim();
        // Valid output window for tap (di, dj): output index i maps to input
        // i + di - 1, so i ranges over [max(0, 1-di), min(h, h+1-di)).
        let rows = |d: usize, len: usize| -> (usize, usize) {
            ((1usize.saturating_sub(d)), len.min(len + 1 - d))
        };
        let mut y = Array4::<E>::zeros((bs, ch, h, wd));
        for n in 0..bs {
            for cc in 0..ch {
                let xs = xv.index_axis(Axis(0), n);
                let xs = xs.index_axis(Axis(0), cc);
                let mut ys = y.index_axis_mut(Axis(0), n);
                let mut ys = ys.index_axis_mut(Axis(0), cc);
                ys.fill(bv[cc]);
                for di in 0..3usize {
                    for dj in 0..3usize {
                        let (i0, i1) = rows(di, h);
                        let (j0, j1) = rows(dj, wd);
                        if i0 >= i1 || j0 >= j1 {
                            continue;
                        }
                        let src = xs.slice(ndarray::s![
                            i0 + di - 1..i1 + di - 1,
                            j0 + dj - 1..j1 + dj - 1
                        ]);
                        ys.slice_mut(ndarray::s![i0..i1, j0..j1])
                            .scaled_add(wv[(cc, di, dj)], &src);
                    }
                }
            }
        }
        self.push(
            y.into_dyn(),
            vec![x, w, b],
            Some(Box::new(move |g| {
                let g4 = g
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned();
                let mut dx = Array4::<E>::zeros((bs, ch, h, wd));
                let mut dw = ndarray::Array3::<E>::zeros((ch, 3, 3));
                let mut db = Array1::<E>::zeros(ch);
                for n in 0..bs {
                    for cc in 0..ch {
                        let gs = g4.index_axis(Axis(0), n);
                        let gs = gs.index_axis(Axis(0), cc);
                        let xs = xv.index_axis(Axis(0), n);
                        let xs = xs.index_axis(Axis(0), cc);
                        let mut dxs = dx.index_axis_mut(Axis(0), n);
                        let mut dxs = dxs.index_axis_mut(Axis(0), cc);
                        db[cc] = db[cc] + gs.sum();
                        for di in 0..3usize {
                            for dj in 0..3usize {
                                let (i0, i1) = rows(di, h);
                                let (j0, j1) = rows(dj, wd);
                                if i0 >= i1 || j0 >= j1 {
                                    continue;
                                }
                                let inp = ndarray::s![
                                    i0 + di - 1..i1 + di - 1,
                                    j0 + dj - 1..j1 + dj - 1
                                ];
                                let out = ndarray::s![i0..i1, j0..j1];
                                let gwin = gs.slice(out);
                                dxs.slice_mut(inp).scaled_add(wv[(cc, di, dj)], &gwin);
                                let mut acc = E::zero();
                                ndarray::Zip::from(&xs.slice(inp))
                                    .and(&gwin)
                                    .for_each(|&a, &b| acc = acc + a * b);
                                dw[(cc, di, dj)] = dw[(cc, di, dj)] + acc;
                            }
                        }
                    }
                }
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            })),
        )
    }

    /// Dense 3x3 convolution with zero padding 1 via im2col. `w: (O, I, 3, 3)`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.as4(x).to_owned();
        let (bs, ci, h, wd) = xv.dim();
        let wv = self.as4(w).to_owned();
        let co = wv.dim().0;
        debug_assert_eq!(wv.dim().1, ci);
        let cols = im2col3(&xv); // (B*H*W, I*9)
        let wm = wv.view().into_shape_with_order((co, ci * 9)).unwrap().to_owned();
        let bv = self.as1(b).to_owned();
        let mut ym = cols.dot(&wm.t());
        ym += &bv.broadcast((ym.nrows(), co)).unwrap();
        let y = from_rows(ym, bs, co, h, wd);
        self.push(
            y.into_dyn(),
            vec![x, w, b],
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let gm = to_rows(&g4); // (B*H*W, O)
                let dwm = gm.t().dot(&cols); // (O, I*9)
                let dw = dwm.into_shape_with_order((co, ci, 3, 3)).unwrap();
                let db = gm.sum_axis(Axis(0));
                let dcols = gm.dot(&wm); // (B*H*W, I*9)
                let dx = col2im3(&dcols, bs, ci, h, wd);
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            })),
        )
    }

    /// Space-to-depth: `(B, C, 2H, 2W)` -> `(B, 4C, H, W)`.
    pub fn pixel_unshuffle(&mut self, x: Var) -> Var {
        let xv = self.as4(x);
        let (bs, ch, h2, w2) = xv.dim();
        debug_assert!(h2 % 2 == 0 && w2 % 2 == 0);
        let (h, wd) = (h2 / 2, w2 / 2);
        let mut y = Array4::<E>::zeros((bs, 4 * ch, h, wd));
        for n in 0..bs {
            for cc in 0..ch {
                for di in 0..2usize {
                    for dj in 0..2usize {
                        let oc = cc * 4 + di * 2 + dj;
                        for i in 0..h {
                            for j in 0..wd {
                                y[(n, oc, i, j)] = xv[(n, cc, 2 * i + di, 2 * j + dj)];
                            }
                        }
                    }
                }
            }
        }
        self.push(
            y.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<E>::zeros((bs, ch, h2, w2));
                for n in 0..bs {
                    for cc in 0..ch {
                        for di in 0..2usize {
                            for dj in 0..2usize {
                                let oc = cc * 4 + di * 2 + dj;
                                for i in 0..h {
                                    for j in 0..wd {
                                        dx[(n, cc, 2 * i + di, 2 * j + dj)] = g4[(n, oc, i, j)];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Depth-to-space: `(B, 4C, H, W)` -> `(B, C, 2H, 2W)`.
    pub fn pixel_shuffle(&mut self, x: Var) -> Var {
        let xv = self.as4(x);
        let (bs, c4, h, wd) = xv.dim();
        debug_assert!(c4 % 4 == 0);
        let ch = c4 / 4;
        let mut y = Array4::<E>::zeros((bs, ch, 2 * h, 2 * wd));
        for n in 0..bs {
            for cc in 0..ch {
                for di in 0..2usize {
                    for dj in 0..2usize {
                        let ic = cc * 4 + di * 2 + dj;
                        for i in 0..h {
                            for j in 0..wd {
                                y[(n, cc, 2 * i + di, 2 * j + dj)] = xv[(n, ic, i, j)];
                            }
                        }
                    }
                }
            }
        }
        self.push(
            y.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<E>::zeros((bs, c4, h, wd));
                for n in 0..bs {
                    for cc in 0..ch {
                        for di in 0..2usize {
                            for dj in 0..2usize {
                                let ic = cc * 4 + di * 2 + dj;
                                for i in 0..h {
                                    for j in 0..wd {
                                        dx[(n, ic, i, j)] = g4[(n, cc, 2 * i + di, 2 * j + dj)];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// LayerNorm over the channel axis at each spatial position, with
    /// per-channel affine. `x: (B, C, H, W)`, `gamma, beta: (C)`.
    pub fn layernorm_chan(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.as4(x).to_owned();
        let ch = xv.dim().1;
        let gv = self.as1(gamma).to_owned();
        let bv = self.as1(beta).to_owned();
        let eps: E = c(1e-6);
        let inv_cn: E = c(1.0 / ch as f64);
        // per-position statistics over the channel axis
        let mean = xv.sum_axis(Axis(1)).mapv(|v| v * inv_cn); // (B, H, W)
        let xc = &xv - &mean.clone().insert_axis(Axis(1));
        let var = xc.mapv(|v| v * v).sum_axis(Axis(1)).mapv(|v| v * inv_cn);
        let inv_std = var.mapv(|v| (v + eps).sqrt().recip()); // (B, H, W)
        let istd_b = inv_std.clone().insert_axis(Axis(1));
        let xhat = &xc * &istd_b;
        let g_b = gv.view().into_shape_with_order((1, ch, 1, 1)).unwrap().to_owned();
        let b_b = bv.view().into_shape_with_order((1, ch, 1, 1)).unwrap().to_owned();
        let y = &xhat * &g_b + &b_b;
        let xhat_b = xhat.clone();
        self.push(
            y.into_dyn(),
            vec![x, gamma, beta],
            Some(Box::new(move |g| {
                let g4 = g
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned();
                let sum_chw =
                    |a: Array4<E>| a.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                let dgamma = sum_chw(&g4 * &xhat_b);
                let dbeta = sum_chw(g4.clone());
                // standard LN backward per spatial position
                let dxhat = &g4 * &g_b;
                let sum_dxh = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
                let sum_dxh_xh = (&dxhat * &xhat_b).sum_axis(Axis(1)).insert_axis(Axis(1));
                let dx = &istd_b
                    * &(&dxhat
                        - &(&sum_dxh * inv_cn)
                        - &(&xhat_b * &(&sum_dxh_xh * inv_cn)));
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            })),
        )
    }

    /// Split channels in half and multiply the halves elementwise.
    pub fn simple_gate(&mut self, x: Var) -> Var {
        let xv = self.as4(x);
        let (bs, ch, h, wd) = xv.dim();
        assert!(ch % 2 == 0, "SimpleGate requires an even channel count");
        let half = ch / 2;
        let a = xv.slice(ndarray::s![.., ..half, .., ..]).to_owned();
        let b2 = xv.slice(ndarray::s![.., half.., .., ..]).to_owned();
        let y = &a * &b2;
        self.push(
            y.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<E>::zeros((bs, ch, h, wd));
                dx.slice_mut(ndarray::s![.., ..half, .., ..])
                    .assign(&(&g4 * &b2));
                dx.slice_mut(ndarray::s![.., half.., .., ..])
                    .assign(&(&g4 * &a));
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Global average pool: `(B, C, H, W)` -> `(B, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.as4(x);
        let (bs, ch, h, wd) = xv.dim();
        let inv: E = c(1.0 / (h * wd) as f64);
        let mut y = Array2::<E>::zeros((bs, ch));
        for n in 0..bs {
            for cc in 0..ch {
                let mut s = E::zero();
                for i in 0..h {
                    for j in 0..wd {
                        s = s + xv[(n, cc, i, j)];
                    }
                }
                y[(n, cc)] = s * inv;
            }
        }
        self.push(
            y.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array4::<E>::zeros((bs, ch, h, wd));
                for n in 0..bs {
                    for cc in 0..ch {
                        let v = g2[(n, cc)] * inv;
                        for i in 0..h {
                            for j in 0..wd {
                                dx[(n, cc, i, j)] = v;
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Multiply a feature map by a per-sample per-channel scale, broadcast over
    /// the spatial axes. `x: (B, C, H, W)`, `s: (B, C)`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Var {
        let xv = self.as4(x).to_owned();
        let sv = self.as2(s).to_owned();
        let (bs, ch, h, wd) = xv.dim();
        debug_assert_eq!(sv.dim(), (bs, ch));
        let mut y = xv.clone();
        for n in 0..bs {
            for cc in 0..ch {
                let k = sv[(n, cc)];
                y.slice_mut(ndarray::s![n, cc, .., ..]).mapv_inplace(|v| v * k);
            }
        }
        self.push(
            y.into_dyn(),
            vec![x, s],
            Some(Box::new(move |g| {
                let _ = (h, wd);
                let g4 = g
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_owned();
                let s_b = sv
                    .view()
                    .into_shape_with_order((bs, ch, 1, 1))
                    .unwrap()
                    .to_owned();
                let dx = &g4 * &s_b;
                let ds = (&g4 * &xv).sum_axis(Axis(3)).sum_axis(Axis(2));
                vec![dx.into_dyn(), ds.into_dyn()]
            })),
        )
    }

    /// Keep the top-left `(h, w)` window of a feature map.
    pub fn crop2d(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.as4(x);
        let (bs, ch, hh, ww) = xv.dim();
        debug_assert!(h <= hh && w <= ww);
        let y = xv.slice(ndarray::s![.., .., ..h, ..w]).to_owned();
        self.push(
            y.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<E>::zeros((bs, ch, hh, ww));
                dx.slice_mut(ndarray::s![.., .., ..h, ..w]).assign(&g4);
                vec![dx.into_dyn()]
            })),
        )
    }

    /// Negative-PSNR loss against a constant target.
    ///
    /// `loss = mean_b 10 log10(mse_b + eps)` with `eps = 1e-8`, which equals
    /// `-mean_b 10 log10(1 / (mse_b + eps))`.
    pub fn psnr_loss(&mut self, pred: Var, target: &ArrayD<E>) -> Var {
        let pv = self.value(pred).clone();
        debug_assert_eq!(pv.shape(), target.shape());
        let bs = pv.shape()[0];
        let per = pv.len() / bs;
        let eps: E = c(1e-8);
        let ln10: E = c(std::f64::consts::LN_10);
        let p2 = pv.view().into_shape_with_order((bs, per)).unwrap();
        let t2 = target.view().into_shape_with_order((bs, per)).unwrap();
        let mut mse = Array1::<E>::zeros(bs);
        for n in 0..bs {
            let mut s = E::zero();
            for i in 0..per {
                let d = p2[(n, i)] - t2[(n, i)];
                s = s + d * d;
            }
            mse[n] = s / c(per as f64);
        }
        let ten: E = c(10.0);
        let loss = mse
            .iter()
            .map(|&m| ten * (m + eps).ln() / ln10)
            .sum::<E>()
            / c(bs as f64);
        let diff = &pv - target;
        self.push(
            ArrayD::from_elem(ndarray::IxDyn(&[]), loss),
            vec![pred],
            Some(Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                let mut dx = diff.clone();
                let d2 = dx.view_mut().into_shape_with_order((bs, per)).unwrap();
                let mut d2 = d2;
                for n in 0..bs {
                    // d/dp of 10 ln(mse+eps)/ln10 / B = 20 (p - t) / (B (mse+eps) per ln10)
                    let k = gs * c::<E>(20.0)
                        / (c::<E>(bs as f64) * (mse[n] + eps) * c::<E>(per as f64) * ln10);
                    d2.row_mut(n).mapv_inplace(|v| v * k);
                }
                vec![dx]
            })),
        )
    }

    /// Mean softmax cross-entropy. `logits: (B, n)`.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.as2(logits).to_owned();
        let (bs, n) = lv.dim();
        debug_assert_eq!(labels.len(), bs);
        let mut probs = Array2::<E>::zeros((bs, n));
        let mut loss = E::zero();
        for b in 0..bs {
            let row = lv.row(b);
            let m = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut z = E::zero();
            for j in 0..n {
                let e = (row[j] - m).exp();
                probs[(b, j)] = e;
                z = z + e;
            }
            for j in 0..n {
                probs[(b, j)] = probs[(b, j)] / z;
            }
            loss = loss - probs[(b, labels[b])].max(c(1e-30)).ln();
        }
        loss = loss / c(bs as f64);
        let labels = labels.to_vec();
        self.push(
            ArrayD::from_elem(ndarray::IxDyn(&[]), loss),
            vec![logits],
            Some(Box::new(move |g| {
                let gs = *g.iter().next().unwrap();
                let mut dx = probs.clone();
                for b in 0..bs {
                    dx[(b, labels[b])] = dx[(b, labels[b])] - c(1.0);
                }
                let k = gs / c::<E>(bs as f64);
                dx.mapv_inplace(|v| v * k);
                vec![dx.into_dyn()]
            })),
        )
    }

    // ---- view helpers ----

    fn as1(&self, v: Var) -> ndarray::ArrayView1<'_, E> {
        self.nodes[v.0].value.view().into_dimensionality::<Ix1>().unwrap()
    }
    fn as2(&self, v: Var) -> ndarray::ArrayView2<'_, E> {
        self.nodes[v.0].value.view().into_dimensionality::<Ix2>().unwrap()
    }
    fn as4(&self, v: Var) -> ndarray::ArrayView4<'_, E> {
        self.nodes[v.0].value.view().into_dimensionality::<Ix4>().unwrap()
    }
}

fn gelu_val<E: Element>(x: E) -> E {
    let k: E = c(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a: E = c(0.044715);
    let half: E = c(0.5);
    let one: E = c(1.0);
    half * x * (one + (k * (x + a * x * x * x)).tanh())
}

fn gelu_grad<E: Element>(x: E) -> E {
    let k: E = c(0.797_884_560_802_865_4);
    let a: E = c(0.044715);
    let half: E = c(0.5);
    let one: E = c(1.0);
    let three: E = c(3.0);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let du = k * (one + three * a * x * x);
    half * (one + t) + half * x * (one - t * t) * du
}

/// `(B, C, H, W)` -> `(B*H*W, C)` with row order `(b, h, w)`.
fn to_rows<E: Element>(x: &ndarray::ArrayView4<'_, E>) -> Array2<E> {
    let (bs, ch, h, wd) = x.dim();
    let mut out = Array2::<E>::zeros((bs * h * wd, ch));
    for n in 0..bs {
        for cc in 0..ch {
            for i in 0..h {
                for j in 0..wd {
                    out[(n * h * wd + i * wd + j, cc)] = x[(n, cc, i, j)];
                }
            }
        }
    }
    out
}

fn from_rows<E: Element>(m: Array2<E>, bs: usize, ch: usize, h: usize, wd: usize) -> Array4<E> {
    let mut out = Array4::<E>::zeros((bs, ch, h, wd));
    for n in 0..bs {
        for cc in 0..ch {
            for i in 0..h {
                for j in 0..wd {
                    out[(n, cc, i, j)] = m[(n * h * wd + i * wd + j, cc)];
                }
            }
        }
    }
    out
}

fn im2col3<E: Element>(x: &Array4<E>) -> Array2<E> {
    let (bs, ci, h, wd) = x.dim();
    let mut cols = Array2::<E>::zeros((bs * h * wd, ci * 9));
    for n in 0..bs {
        for i in 0..h {
            for j in 0..wd {
                let row = n * h * wd + i * wd + j;
                for cc in 0..ci {
                    for di in 0..3usize {
                        for dj in 0..3usize {
                            let (ii, jj) = (i + di, j + dj);
                            if ii >= 1 && jj >= 1 && ii - 1 < h && jj - 1 < wd {
                                cols[(row, cc * 9 + di * 3 + dj)] = x[(n, cc, ii - 1, jj - 1)];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im3<E: Element>(cols: &Array2<E>, bs: usize, ci: usize, h: usize, wd: usize) -> Array4<E> {
    let mut x = Array4::<E>::zeros((bs, ci, h, wd));
    for n in 0..bs {
        for i in 0..h {
            for j in 0..wd {
                let row = n * h * wd + i * wd + j;
                for cc in 0..ci {
                    for di in 0..3usize {
                        for dj in 0..3usize {
                            let (ii, jj) = (i + di, j + dj);
                            if ii >= 1 && jj >= 1 && ii - 1 < h && jj - 1 < wd {
                                x[(n, cc, ii - 1, jj - 1)] =
                                    x[(n, cc, ii - 1, jj - 1)] + cols[(row, cc * 9 + di * 3 + dj)];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
