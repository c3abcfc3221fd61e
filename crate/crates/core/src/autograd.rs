//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! constants (no gradient) or named parameters; [`Graph::backward`] returns
//! gradients for every node that depends on a parameter or a tracked input.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::kernels::{self, AttentionSaved, ConvSpec, GatherPlan, GroupNormStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    /// Keeps `sigmoid(x)` for the backward pass.
    Silu(Var, Tensor<T>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupNormStats<T>,
    },
    AddChannel {
        x: Var,
        e: Var,
    },
    AddBroadcast {
        x: Var,
        y: Var,
    },
    Concat(Var, Var),
    Upsample2(Var),
    Resize(Var),
    Fuse {
        fs: Var,
        fd: Var,
        cs: Var,
        cd: Var,
        delta: T,
    },
    Gather {
        sources: Vec<Var>,
        plan: Arc<GatherPlan>,
    },
    PriorAttention {
        q: Var,
        kv: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        saved: AttentionSaved<T>,
    },
    ToTokens(Var),
    FromTokens(Var),
    MseLoss {
        x: Var,
        target: Tensor<T>,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked input that is not a named parameter (used by gradient checks).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Named trainable leaf; repeated calls with the same name share a node.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Mul(a, b), t)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        let t = self.tracked(a);
        self.push(v, Op::Scale(a, s), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::sigmoid);
        let t = self.tracked(a);
        self.push(v, Op::Sigmoid(a), t)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let sig = x.map(kernels::sigmoid);
        let v = x.zip_map(&sig, |x, s| x * s);
        let t = self.tracked(a);
        self.push(v, Op::Silu(a, sig), t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let v = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec);
        let t = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        self.push(v, Op::Conv2d { x, w, b, spec }, t)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let v = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let t = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        self.push(v, Op::Linear { x, w, b }, t)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (v, stats) = kernels::group_norm(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            groups,
            T::lit(1e-5),
        );
        let t = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(
            v,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            t,
        )
    }

    /// `x [B,C,...] + e [B,C]` broadcast over trailing axes.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Var {
        let xv = self.value(x);
        let ev = self.value(e);
        let (b, c) = (xv.dim(0), xv.dim(1));
        assert_eq!(ev.shape(), &[b, c], "add_channel expects [B,C]");
        let s = xv.numel() / (b * c).max(1);
        let mut out = xv.clone();
        for (chunk, &bias) in out.data_mut().chunks_mut(s).zip(ev.data()) {
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let t = self.tracked(x) || self.tracked(e);
        self.push(out, Op::AddChannel { x, e }, t)
    }

    /// `x [B, rest...] + y [rest...]` broadcast over the leading axis.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Var {
        let xv = self.value(x);
        let yv = self.value(y);
        assert_eq!(&xv.shape()[1..], yv.shape(), "add_broadcast trailing shape");
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(yv.numel().max(1)) {
            for (o, &v) in chunk.iter_mut().zip(yv.data()) {
                *o += v;
            }
        }
        let t = self.tracked(x) || self.tracked(y);
        self.push(out, Op::AddBroadcast { x, y }, t)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, ca, cb) = (av.dim(0), av.dim(1), bv.dim(1));
        assert_eq!(av.shape()[2..], bv.shape()[2..], "concat spatial mismatch");
        let s = av.numel() / (n * ca).max(1);
        let mut shape = av.shape().to_vec();
        shape[1] = ca + cb;
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for bi in 0..n {
            data.extend_from_slice(&av.data()[bi * ca * s..(bi + 1) * ca * s]);
            data.extend_from_slice(&bv.data()[bi * cb * s..(bi + 1) * cb * s]);
        }
        let v = Tensor::from_vec(&shape, data).expect("concat shape");
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Concat(a, b), t)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let v = kernels::upsample2(self.value(x));
        let t = self.tracked(x);
        self.push(v, Op::Upsample2(x), t)
    }

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let v = kernels::resize_bilinear(self.value(x), oh, ow);
        let t = self.tracked(x);
        self.push(v, Op::Resize(x), t)
    }

    /// `(cs*fs + cd*fd) / (cs + cd + delta)` with single-channel confidences.
    pub fn fuse(&mut self, fs: Var, fd: Var, cs: Var, cd: Var, delta: T) -> Var {
        let (fsv, fdv, csv, cdv) = (
            self.value(fs),
            self.value(fd),
            self.value(cs),
            self.value(cd),
        );
        assert_eq!(fsv.shape(), fdv.shape(), "fuse feature shapes");
        assert_eq!(csv.shape(), cdv.shape(), "fuse confidence shapes");
        let (b, c) = (fsv.dim(0), fsv.dim(1));
        let s = fsv.numel() / (b * c).max(1);
        assert_eq!(csv.numel(), b * s, "confidence must be [B,1,...]");
        let mut out = Tensor::zeros(fsv.shape());
        for bi in 0..b {
            for ch in 0..c {
                for p in 0..s {
                    let i = (bi * c + ch) * s + p;
                    let (a, d) = (csv.data()[bi * s + p], cdv.data()[bi * s + p]);
                    out.data_mut()[i] =
                        (a * fsv.data()[i] + d * fdv.data()[i]) / (a + d + delta);
                }
            }
        }
        let t = [fs, fd, cs, cd].iter().any(|&v| self.tracked(v));
        self.push(
            out,
            Op::Fuse {
                fs,
                fd,
                cs,
                cd,
                delta,
            },
            t,
        )
    }

    pub fn gather(&mut self, sources: &[Var], plan: Arc<GatherPlan>) -> Var {
        let vals: Vec<&Tensor<T>> = sources.iter().map(|&s| self.value(s)).collect();
        let v = kernels::gather_samples(&vals, &plan);
        let t = sources.iter().any(|&s| self.tracked(s));
        self.push(
            v,
            Op::Gather {
                sources: sources.to_vec(),
                plan,
            },
            t,
        )
    }

    pub fn prior_attention(
        &mut self,
        q: Var,
        kv: Var,
        prior: &[T],
        valid: &[bool],
        heads: usize,
    ) -> Var {
        let (v, probs) =
            kernels::prior_attention(self.value(q), self.value(kv), prior, valid, heads);
        let t = self.tracked(q) || self.tracked(kv);
        self.push(
            v,
            Op::PriorAttention {
                q,
                kv,
                heads,
                probs,
            },
            t,
        )
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (out, saved) = kernels::attention(self.value(q), self.value(k), self.value(v), heads);
        let t = self.tracked(q) || self.tracked(k) || self.tracked(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                saved,
            },
            t,
        )
    }

    pub fn to_tokens(&mut self, x: Var) -> Var {
        let v = kernels::to_tokens(self.value(x));
        let t = self.tracked(x);
        self.push(v, Op::ToTokens(x), t)
    }

    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let v = kernels::from_tokens(self.value(x), h, w);
        let t = self.tracked(x);
        self.push(v, Op::FromTokens(x), t)
    }

    /// Mean squared error against a constant target; scalar output.
    pub fn mse_loss(&mut self, x: Var, target: &Tensor<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mse shapes");
        let n = T::lit(xv.numel().max(1) as f64);
        let l = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        let t = self.tracked(x);
        self.push(
            Tensor::scalar(l),
            Op::MseLoss {
                x,
                target: target.clone(),
            },
            t,
        )
    }

    /// `sum(x * weights)`; scalar output.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), weights.shape(), "weighted_sum shapes");
        let l = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum::<T>();
        let t = self.tracked(x);
        self.push(
            Tensor::scalar(l),
            Op::WeightedSum {
                x,
                weights: weights.clone(),
            },
            t,
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.value(root).shape()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, d: Tensor<T>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y))),
            Op::Silu(a, sig) => {
                let x = self.value(*a);
                let mut d = g.zip_map(sig, |gv, s| gv * s);
                for ((di, &xi), &si) in d.data_mut().iter_mut().zip(x.data()).zip(sig.data()) {
                    // g * (s + x s (1 - s)), with g * s already in place
                    *di += *di * xi * (T::one() - si);
                }
                acc(*a, d)
            }
            Op::Conv2d { x, w, b, spec } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    *spec,
                    g,
                    self.tracked(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) =
                    kernels::linear_backward(self.value(*x), self.value(*w), g, self.tracked(*x));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (dx, dg, db) = kernels::group_norm_backward(
                    self.value(*x),
                    self.value(*gamma),
                    *groups,
                    stats,
                    g,
                    self.tracked(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::AddChannel { x, e } => {
                acc(*x, g.clone());
                let ev = self.value(*e);
                let s = g.numel() / ev.numel().max(1);
                let de: Vec<T> = g.data().chunks(s).map(|c| c.iter().copied().sum()).collect();
                acc(*e, Tensor::from_vec(ev.shape(), de).expect("add_channel grad"));
            }
            Op::AddBroadcast { x, y } => {
                acc(*x, g.clone());
                let yv = self.value(*y);
                let mut dy = Tensor::zeros(yv.shape());
                for chunk in g.data().chunks(yv.numel().max(1)) {
                    for (o, &v) in dy.data_mut().iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                acc(*y, dy);
            }
            Op::Concat(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, ca, cb) = (av.dim(0), av.dim(1), bv.dim(1));
                let s = av.numel() / (n * ca).max(1);
                let mut da = Vec::with_capacity(av.numel());
                let mut db = Vec::with_capacity(bv.numel());
                for bi in 0..n {
                    let base = bi * (ca + cb) * s;
                    da.extend_from_slice(&g.data()[base..base + ca * s]);
                    db.extend_from_slice(&g.data()[base + ca * s..base + (ca + cb) * s]);
                }
                acc(*a, Tensor::from_vec(av.shape(), da).expect("concat grad"));
                acc(*b, Tensor::from_vec(bv.shape(), db).expect("concat grad"));
            }
            Op::Upsample2(x) => acc(*x, kernels::upsample2_backward(self.value(*x).shape(), g)),
            Op::Resize(x) => acc(
                *x,
                kernels::resize_bilinear_backward(self.value(*x).shape(), g),
            ),
            Op::Fuse {
                fs,
                fd,
                cs,
                cd,
                delta,
            } => {
                let (fsv, fdv, csv, cdv) = (
                    self.value(*fs),
                    self.value(*fd),
                    self.value(*cs),
                    self.value(*cd),
                );
                let (b, c) = (fsv.dim(0), fsv.dim(1));
                let s = fsv.numel() / (b * c).max(1);
                let mut dfs = Tensor::zeros(fsv.shape());
                let mut dfd = Tensor::zeros(fdv.shape());
                let mut dcs = Tensor::zeros(csv.shape());
                let mut dcd = Tensor::zeros(cdv.shape());
                for bi in 0..b {
                    for ch in 0..c {
                        for p in 0..s {
                            let i = (bi * c + ch) * s + p;
                            let j = bi * s + p;
                            let (a, d) = (csv.data()[j], cdv.data()[j]);
                            let den = a + d + *delta;
                            let out = node.value.data()[i];
                            let gv = g.data()[i];
                            dfs.data_mut()[i] = gv * a / den;
                            dfd.data_mut()[i] = gv * d / den;
                            dcs.data_mut()[j] += gv * (fsv.data()[i] - out) / den;
                            dcd.data_mut()[j] += gv * (fdv.data()[i] - out) / den;
                        }
                    }
                }
                acc(*fs, dfs);
                acc(*fd, dfd);
                acc(*cs, dcs);
                acc(*cd, dcd);
            }
            Op::Gather { sources, plan } => {
                let shapes: Vec<Vec<usize>> =
                    sources.iter().map(|&s| self.value(s).shape().to_vec()).collect();
                let ds = kernels::gather_samples_backward(&shapes, plan, g);
                for (&s, d) in sources.iter().zip(ds) {
                    acc(s, d);
                }
            }
            Op::PriorAttention {
                q,
                kv,
                heads,
                probs,
            } => {
                let (dq, dkv) = kernels::prior_attention_backward(
                    self.value(*q),
                    self.value(*kv),
                    probs,
                    *heads,
                    g,
                );
                acc(*q, dq);
                acc(*kv, dkv);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                saved,
            } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    saved,
                    g,
                );
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::ToTokens(x) => {
                let xv = self.value(*x);
                acc(*x, kernels::from_tokens(g, xv.dim(2), xv.dim(3)));
            }
            Op::FromTokens(x) => acc(*x, kernels::to_tokens(g)),
            Op::MseLoss { x, target } => {
                let xv = self.value(*x);
                let scale = g.data()[0] * T::lit(2.0) / T::lit(xv.numel().max(1) as f64);
                acc(*x, xv.zip_map(target, |a, b| (a - b) * scale));
            }
            Op::WeightedSum { x, weights } => acc(*x, weights.scale(g.data()[0])),
        }
    }
}

pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every named parameter of `graph`; untouched parameters get zeros.
    pub fn params(&self, graph: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        graph
            .param_vars()
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
