//! Reverse-mode autodiff tape.
//!
//! A `Tape` records the forward computation of one training step as a flat
//! list of nodes; `backward` walks it in reverse and accumulates gradients
//! into the leaves that were registered with `param`. Frozen weights and
//! data enter through `value` and never receive gradients, so the trainable
//! surface is fixed by construction at graph-build time.

use std::rc::Rc;

use crate::tensor::{
    avg_pool2, avg_pool2_backward, bmm_nn, bmm_nt, bmm_tn, concat_channels, conv3x3,
    conv3x3_backward, lchw_to_slc, matmul, matmul_nt, matmul_tn, nchw_to_nsc, nsc_to_nchw,
    slc_to_lchw, softmax_lastdim, split_channels, sum_nhw, sum_rows, upsample2,
    upsample2_backward, Tensor,
};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    value: Rc<Tensor>,
    needs_grad: bool,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by `Var`.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tensor value of a node.
    pub fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { value: Rc::new(value), needs_grad, back });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient (inputs, frozen weights).
    pub fn value(&mut self, t: Tensor) -> Var {
        self.push(t, false, None)
    }

    /// Leaf that accumulates a gradient (trainable parameter).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, None)
    }

    /// Run reverse accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.val(root).numel(), 1, "backward root must be scalar");
        let mut by_node: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        by_node[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let Some(back) = self.nodes[id].back.as_ref() else { continue };
            let Some(g) = by_node[id].take() else { continue };
            for (pid, pg) in back(&g) {
                match &mut by_node[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            by_node[id] = Some(g);
        }
        Grads { by_node }
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.val(a).add(self.val(b));
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if na {
                    out.push((a.0, g.clone()));
                }
                if nb {
                    out.push((b.0, g.clone()));
                }
                out
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.val(a).sub(self.val(b));
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if na {
                    out.push((a.0, g.clone()));
                }
                if nb {
                    out.push((b.0, g.scale(-1.0)));
                }
                out
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.val(a).mul(self.val(b));
        let (na, nb) = (self.needs(a), self.needs(b));
        let (av, bv) = (self.rc(a), self.rc(b));
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if na {
                    out.push((a.0, g.mul(&bv)));
                }
                if nb {
                    out.push((b.0, g.mul(&av)));
                }
                out
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.val(a).scale(s);
        let na = self.needs(a);
        let back: Option<BackFn> =
            if na { Some(Box::new(move |g| vec![(a.0, g.scale(s))])) } else { None };
        self.push(out, na, back)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.val(a).map(|x| x / (1.0 + (-x).exp()));
        let na = self.needs(a);
        let av = self.rc(a);
        let back: Option<BackFn> = if na {
            Some(Box::new(move |g| {
                let d = av.map(|x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    s * (1.0 + x * (1.0 - s))
                });
                vec![(a.0, g.mul(&d))]
            }))
        } else {
            None
        };
        self.push(out, na, back)
    }

    // -- matrix products -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.val(a), self.val(b));
        let (na, nb) = (self.needs(a), self.needs(b));
        let (av, bv) = (self.rc(a), self.rc(b));
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if na {
                    out.push((a.0, matmul_nt(g, &bv)));
                }
                if nb {
                    out.push((b.0, matmul_tn(&av, g)));
                }
                out
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }

    pub fn bmm_nn(&mut self, a: Var, b: Var) -> Var {
        let out = bmm_nn(self.val(a), self.val(b));
        let (na, nb) = (self.needs(a), self.needs(b));
        let (av, bv) = (self.rc(a), self.rc(b));
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if na {
                    out.push((a.0, bmm_nt(g, &bv)));
                }
                if nb {
                    out.push((b.0, bmm_tn(&av, g)));
                }
                out
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }

    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let out = bmm_nt(self.val(a), self.val(b));
        let (na, nb) = (self.needs(a), self.needs(b));
        let (av, bv) = (self.rc(a), self.rc(b));
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if na {
                    out.push((a.0, bmm_nn(g, &bv)));
                }
                if nb {
                    out.push((b.0, bmm_tn(g, &av)));
                }
                out
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let out = softmax_lastdim(self.val(a));
        let na = self.needs(a);
        let y = Rc::new(out.clone());
        let back: Option<BackFn> = if na {
            Some(Box::new(move |g| {
                let n = *y.shape().last().unwrap();
                let rows = y.numel() / n;
                let mut dx = vec![0.0; y.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for i in 0..n {
                        dx[r * n + i] = yr[i] * (gr[i] - dot);
                    }
                }
                vec![(a.0, Tensor::from_vec(y.shape(), dx).unwrap())]
            }))
        } else {
            None
        };
        self.push(out, na, back)
    }

    // -- convolution / resampling on [N, C, H, W] -----------------------------

    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = conv3x3(self.val(x), self.val(w), self.val(b));
        let (nx, nw, nb) = (self.needs(x), self.needs(w), self.needs(b));
        let (xv, wv) = (self.rc(x), self.rc(w));
        let back: Option<BackFn> = if nx || nw || nb {
            Some(Box::new(move |g| {
                let (gin, gw, gb) = conv3x3_backward(&xv, &wv, g);
                let mut out = Vec::new();
                if nx {
                    out.push((x.0, gin));
                }
                if nw {
                    out.push((w.0, gw));
                }
                if nb {
                    out.push((b.0, gb));
                }
                out
            }))
        } else {
            None
        };
        self.push(out, nx || nw || nb, back)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = avg_pool2(self.val(x));
        let nx = self.needs(x);
        let shape = self.val(x).shape().to_vec();
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |g| vec![(x.0, avg_pool2_backward(g, &shape))]))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = upsample2(self.val(x));
        let nx = self.needs(x);
        let shape = self.val(x).shape().to_vec();
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |g| vec![(x.0, upsample2_backward(g, &shape))]))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    /// Channel RMS normalization with a per-channel scale: for every
    /// (sample, site), x over C is divided by sqrt(mean(x^2) + eps).
    pub fn rmsnorm_channels(&mut self, x: Var, gamma: Var, eps: f64) -> Var {
        let xv = self.val(x);
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let plane = h * w;
        let mut ynorm = vec![0.0; xv.numel()];
        let mut rinv = vec![0.0; n * plane];
        for ni in 0..n {
            for si in 0..plane {
                let mut ss = 0.0;
                for ci in 0..c {
                    let v = xv.data()[(ni * c + ci) * plane + si];
                    ss += v * v;
                }
                let r = (ss / c as f64 + eps).sqrt();
                let ri = 1.0 / r;
                rinv[ni * plane + si] = ri;
                for ci in 0..c {
                    let idx = (ni * c + ci) * plane + si;
                    ynorm[idx] = xv.data()[idx] * ri;
                }
            }
        }
        let ynorm = Rc::new(Tensor::from_vec(xv.shape(), ynorm).unwrap());
        let gv = self.val(gamma);
        let mut outd = vec![0.0; xv.numel()];
        for ni in 0..n {
            for ci in 0..c {
                let gamma_c = gv.data()[ci];
                let base = (ni * c + ci) * plane;
                for si in 0..plane {
                    outd[base + si] = ynorm.data()[base + si] * gamma_c;
                }
            }
        }
        let out = Tensor::from_vec(xv.shape(), outd).unwrap();
        let (nx, ng) = (self.needs(x), self.needs(gamma));
        let gammav = self.rc(gamma);
        let yb = Rc::clone(&ynorm);
        let back: Option<BackFn> = if nx || ng {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if ng {
                    // dgamma_c = sum over (n, h, w) of g * ynorm
                    let prod = g.mul(&yb);
                    out.push((gamma.0, sum_nhw(&prod)));
                }
                if nx {
                    let mut dx = vec![0.0; yb.numel()];
                    for ni in 0..n {
                        for si in 0..plane {
                            let ri = rinv[ni * plane + si];
                            let mut dot = 0.0;
                            for ci in 0..c {
                                let idx = (ni * c + ci) * plane + si;
                                let gy = g.data()[idx] * gammav.data()[ci];
                                dot += gy * yb.data()[idx];
                            }
                            dot /= c as f64;
                            for ci in 0..c {
                                let idx = (ni * c + ci) * plane + si;
                                let gy = g.data()[idx] * gammav.data()[ci];
                                dx[idx] = ri * (gy - yb.data()[idx] * dot);
                            }
                        }
                    }
                    out.push((x.0, Tensor::from_vec(yb.shape(), dx).unwrap()));
                }
                out
            }))
        } else {
            None
        };
        self.push(out, nx || ng, back)
    }

    pub fn add_bias_channel(&mut self, x: Var, b: Var) -> Var {
        let xv = self.val(x);
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let plane = h * w;
        let bv = self.val(b);
        debug_assert_eq!(bv.numel(), c);
        let mut out = xv.clone();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let add = bv.data()[ci];
                for v in &mut out.data_mut()[base..base + plane] {
                    *v += add;
                }
            }
        }
        let (nx, nb) = (self.needs(x), self.needs(b));
        let back: Option<BackFn> = if nx || nb {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if nx {
                    out.push((x.0, g.clone()));
                }
                if nb {
                    out.push((b.0, sum_nhw(g)));
                }
                out
            }))
        } else {
            None
        };
        self.push(out, nx || nb, back)
    }

    /// Add a [C] bias to every row of an [R, C] matrix.
    pub fn add_bias_row(&mut self, x: Var, b: Var) -> Var {
        let xv = self.val(x);
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let bv = self.val(b);
        debug_assert_eq!(bv.numel(), c);
        let mut out = xv.clone();
        for i in 0..r {
            for (o, &add) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(bv.data()) {
                *o += add;
            }
        }
        let (nx, nb) = (self.needs(x), self.needs(b));
        let back: Option<BackFn> = if nx || nb {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if nx {
                    out.push((x.0, g.clone()));
                }
                if nb {
                    out.push((b.0, sum_rows(g)));
                }
                out
            }))
        } else {
            None
        };
        self.push(out, nx || nb, back)
    }

    // -- layout ---------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.val(x).reshaped(shape).expect("reshape numel mismatch");
        let nx = self.needs(x);
        let in_shape = self.val(x).shape().to_vec();
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |g| vec![(x.0, g.reshaped(&in_shape).unwrap())]))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    pub fn nchw_to_nsc(&mut self, x: Var) -> Var {
        let out = nchw_to_nsc(self.val(x));
        let nx = self.needs(x);
        let (h, w) = (self.val(x).shape()[2], self.val(x).shape()[3]);
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |g| vec![(x.0, nsc_to_nchw(g, h, w))]))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    pub fn nsc_to_nchw(&mut self, x: Var, h: usize, w: usize) -> Var {
        let out = nsc_to_nchw(self.val(x), h, w);
        let nx = self.needs(x);
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |g| vec![(x.0, nchw_to_nsc(g))]))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    pub fn lchw_to_slc(&mut self, x: Var) -> Var {
        let out = lchw_to_slc(self.val(x));
        let nx = self.needs(x);
        let (h, w) = (self.val(x).shape()[2], self.val(x).shape()[3]);
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |g| vec![(x.0, slc_to_lchw(g, h, w))]))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    pub fn slc_to_lchw(&mut self, x: Var, h: usize, w: usize) -> Var {
        let out = slc_to_lchw(self.val(x), h, w);
        let nx = self.needs(x);
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |g| vec![(x.0, lchw_to_slc(g))]))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    /// [N*S, heads*dh] -> [N*heads, S, dh], splitting attention heads into
    /// the batch axis (N is the outer group: frames for spatial attention,
    /// spatial sites for temporal attention).
    pub fn to_heads(&mut self, x: Var, n: usize, s: usize, heads: usize, dh: usize) -> Var {
        let xv = self.val(x);
        debug_assert_eq!(xv.shape(), &[n * s, heads * dh]);
        let mut out = vec![0.0; xv.numel()];
        for ni in 0..n {
            for si in 0..s {
                for hi in 0..heads {
                    let src = (ni * s + si) * heads * dh + hi * dh;
                    let dst = ((ni * heads + hi) * s + si) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv.data()[src..src + dh]);
                }
            }
        }
        let out = Tensor::from_vec(&[n * heads, s, dh], out).unwrap();
        let nx = self.needs(x);
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |g| {
                let mut gin = vec![0.0; g.numel()];
                for ni in 0..n {
                    for si in 0..s {
                        for hi in 0..heads {
                            let dst = (ni * s + si) * heads * dh + hi * dh;
                            let src = ((ni * heads + hi) * s + si) * dh;
                            gin[dst..dst + dh].copy_from_slice(&g.data()[src..src + dh]);
                        }
                    }
                }
                vec![(x.0, Tensor::from_vec(&[n * s, heads * dh], gin).unwrap())]
            }))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    /// Inverse of `to_heads`: [N*heads, S, dh] -> [N*S, heads*dh].
    pub fn from_heads(&mut self, x: Var, n: usize, s: usize, heads: usize, dh: usize) -> Var {
        let xv = self.val(x);
        debug_assert_eq!(xv.shape(), &[n * heads, s, dh]);
        let mut out = vec![0.0; xv.numel()];
        for ni in 0..n {
            for si in 0..s {
                for hi in 0..heads {
                    let src = ((ni * heads + hi) * s + si) * dh;
                    let dst = (ni * s + si) * heads * dh + hi * dh;
                    out[dst..dst + dh].copy_from_slice(&xv.data()[src..src + dh]);
                }
            }
        }
        let out = Tensor::from_vec(&[n * s, heads * dh], out).unwrap();
        let nx = self.needs(x);
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |g| {
                let mut gin = vec![0.0; g.numel()];
                for ni in 0..n {
                    for si in 0..s {
                        for hi in 0..heads {
                            let dst = ((ni * heads + hi) * s + si) * dh;
                            let src = (ni * s + si) * heads * dh + hi * dh;
                            gin[dst..dst + dh].copy_from_slice(&g.data()[src..src + dh]);
                        }
                    }
                }
                vec![(x.0, Tensor::from_vec(&[n * heads, s, dh], gin).unwrap())]
            }))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    /// Repeat a [G, M, K] batch `times` times -> [times*G, M, K].
    pub fn tile_batch(&mut self, x: Var, times: usize) -> Var {
        let xv = self.val(x);
        let (g0, m, k) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let block = xv.numel();
        let mut out = vec![0.0; block * times];
        for t in 0..times {
            out[t * block..(t + 1) * block].copy_from_slice(xv.data());
        }
        let out = Tensor::from_vec(&[times * g0, m, k], out).unwrap();
        let nx = self.needs(x);
        let shape = xv.shape().to_vec();
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |g| {
                let mut gin = Tensor::zeros(&shape);
                for t in 0..times {
                    for (o, &v) in
                        gin.data_mut().iter_mut().zip(&g.data()[t * block..(t + 1) * block])
                    {
                        *o += v;
                    }
                }
                vec![(x.0, gin)]
            }))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let out = concat_channels(self.val(a), self.val(b));
        let (na, nb) = (self.needs(a), self.needs(b));
        let ca = self.val(a).shape()[1];
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g| {
                let (ga, gb) = split_channels(g, ca);
                let mut out = Vec::new();
                if na {
                    out.push((a.0, ga));
                }
                if nb {
                    out.push((b.0, gb));
                }
                out
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }

    /// Stack row vectors (each [C]) into an [n, C] matrix. Rows may be a mix
    /// of frozen and trainable leaves; gradients flow only to the latter.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows needs at least one row");
        let c = self.val(rows[0]).numel();
        let n = rows.len();
        let mut data = Vec::with_capacity(n * c);
        for &r in rows {
            debug_assert_eq!(self.val(r).numel(), c);
            data.extend_from_slice(self.val(r).data());
        }
        let out = Tensor::from_vec(&[n, c], data).unwrap();
        let needy: Vec<(usize, usize)> = rows
            .iter()
            .enumerate()
            .filter(|(_, &r)| self.needs(r))
            .map(|(i, &r)| (i, r.0))
            .collect();
        let any = !needy.is_empty();
        let back: Option<BackFn> = if any {
            Some(Box::new(move |g| {
                needy
                    .iter()
                    .map(|&(i, pid)| {
                        (pid, Tensor::from_vec(&[c], g.data()[i * c..(i + 1) * c].to_vec()).unwrap())
                    })
                    .collect()
            }))
        } else {
            None
        };
        self.push(out, any, back)
    }

    /// Select one index of the last dimension: [G, M, N], idx -> [G, M].
    pub fn select_lastdim(&mut self, x: Var, idx: usize) -> Var {
        let xv = self.val(x);
        let (g0, m, n) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(idx < n, "select_lastdim index out of range");
        let mut out = vec![0.0; g0 * m];
        for gi in 0..g0 {
            for mi in 0..m {
                out[gi * m + mi] = xv.data()[(gi * m + mi) * n + idx];
            }
        }
        let out = Tensor::from_vec(&[g0, m], out).unwrap();
        let nx = self.needs(x);
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |g| {
                let mut gin = vec![0.0; g0 * m * n];
                for gi in 0..g0 {
                    for mi in 0..m {
                        gin[(gi * m + mi) * n + idx] = g.data()[gi * m + mi];
                    }
                }
                vec![(x.0, Tensor::from_vec(&[g0, m, n], gin).unwrap())]
            }))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    /// Mean over the leading axis of a 2-D tensor: [G, M] -> [M].
    pub fn mean_axis0(&mut self, x: Var) -> Var {
        let xv = self.val(x);
        let (g0, m) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; m];
        for gi in 0..g0 {
            for (o, &v) in out.iter_mut().zip(&xv.data()[gi * m..(gi + 1) * m]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= g0 as f64;
        }
        let out = Tensor::from_vec(&[m], out).unwrap();
        let nx = self.needs(x);
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |g| {
                let mut gin = vec![0.0; g0 * m];
                for gi in 0..g0 {
                    for (o, &v) in gin[gi * m..(gi + 1) * m].iter_mut().zip(g.data()) {
                        *o = v / g0 as f64;
                    }
                }
                vec![(x.0, Tensor::from_vec(&[g0, m], gin).unwrap())]
            }))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.val(x);
        let n = xv.numel() as f64;
        let out = Tensor::scalar(xv.mean());
        let nx = self.needs(x);
        let shape = xv.shape().to_vec();
        let back: Option<BackFn> = if nx {
            Some(Box::new(move |g| vec![(x.0, Tensor::full(&shape, g.item() / n))]))
        } else {
            None
        };
        self.push(out, nx, back)
    }

    /// Fused mean-squared-error: mean((a - b)^2) over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        debug_assert_eq!(av.shape(), bv.shape());
        let n = av.numel() as f64;
        let out = Tensor::scalar(av.mse(&bv));
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g| {
                let s = 2.0 * g.item() / n;
                let d = av.sub(&bv).scale(s);
                let mut out = Vec::new();
                if na {
                    out.push((a.0, d.clone()));
                }
                if nb {
                    out.push((b.0, d.scale(-1.0)));
                }
                out
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function of several tensors,
/// w.r.t. input `which`. Used by tests to verify backward passes; it only
/// ever calls the forward path.
pub fn numeric_gradient(
    f: &mut dyn FnMut(&[Tensor]) -> f64,
    inputs: &[Tensor],
    which: usize,
    eps: f64,
) -> Tensor {
    let mut grad = Tensor::zeros(inputs[which].shape());
    for i in 0..inputs[which].numel() {
        let mut plus: Vec<Tensor> = inputs.to_vec();
        plus[which].data_mut()[i] += eps;
        let mut minus: Vec<Tensor> = inputs.to_vec();
        minus[which].data_mut()[i] -= eps;
        grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
    }
    grad
}

/// Worst-case relative error between an analytic and a numeric gradient.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
