use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, MatView};
use super::ops::conv_geom;
use super::{Node, NodeId, Op};
use crate::tensor::Tensor;

struct Acc<'a> {
    nodes: &'a [Node],
    grads: Vec<Option<Vec<f64>>>,
}

impl Acc<'_> {
    /// Mutable gradient buffer of `id`, or `None` when `id` takes no gradient.
    fn slot(&mut self, id: NodeId) -> Option<&mut Vec<f64>> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let n = self.nodes[id].value.numel();
        Some(self.grads[id].get_or_insert_with(|| vec![0.0; n]))
    }

    fn add(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if let Some(g) = self.slot(id) {
            f(g);
        }
    }
}

pub(super) fn run(nodes: &[Node], loss: NodeId) -> Vec<Option<Tensor>> {
    let mut acc = Acc {
        nodes,
        grads: vec![None; nodes.len()],
    };
    if nodes[loss].requires_grad {
        acc.grads[loss] = Some(vec![1.0]);
    }
    for id in (0..=loss).rev() {
        let Some(g) = acc.grads[id].take() else {
            continue;
        };
        step(&mut acc, id, &g);
        acc.grads[id] = Some(g);
    }
    acc.grads
        .into_iter()
        .zip(nodes)
        .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("gradient shape")))
        .collect()
}

fn step(acc: &mut Acc<'_>, id: NodeId, g: &[f64]) {
    let nodes = acc.nodes;
    let out = nodes[id].value.data();
    let val = |i: NodeId| nodes[i].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc.add(*a, |ga| axpy(ga, g, 1.0));
            acc.add(*b, |gb| axpy(gb, g, 1.0));
        }
        Op::Sub(a, b) => {
            acc.add(*a, |ga| axpy(ga, g, 1.0));
            acc.add(*b, |gb| axpy(gb, g, -1.0));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc.add(*a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * vb[i];
                }
            });
            acc.add(*b, |gb| {
                for i in 0..g.len() {
                    gb[i] += g[i] * va[i];
                }
            });
        }
        Op::Scale(a, c) => acc.add(*a, |ga| axpy(ga, g, *c)),
        Op::Offset(a) | Op::Reshape(a) => acc.add(*a, |ga| axpy(ga, g, 1.0)),
        Op::ScaleBy(a, s) => {
            let c = val(*s)[0];
            acc.add(*a, |ga| axpy(ga, g, c));
            let va = val(*a);
            acc.add(*s, |gs| gs[0] += g.iter().zip(va).map(|(x, y)| x * y).sum::<f64>());
        }
        Op::Matmul { a, b, ta, tb } => {
            let (na, nb) = (&nodes[*a].value, &nodes[*b].value);
            let (sa, sb) = (na.shape(), nb.shape());
            let va = MatView::new(na.data(), sa[0], sa[1]);
            let vb = MatView::new(nb.data(), sb[0], sb[1]);
            let (oa, ob) = (va.maybe_t(*ta), vb.maybe_t(*tb));
            let gv = MatView::new(g, oa.rows, ob.cols);
            acc.add(*a, |ga| {
                if *ta {
                    kernels::gemm(ob, gv.t(), ga, 1.0);
                } else {
                    kernels::gemm(gv, ob.t(), ga, 1.0);
                }
            });
            acc.add(*b, |gb| {
                if *tb {
                    kernels::gemm(gv.t(), oa, gb, 1.0);
                } else {
                    kernels::gemm(oa.t(), gv, gb, 1.0);
                }
            });
        }
        Op::SoftmaxRows(a) => {
            let last = *nodes[id].value.shape().last().unwrap_or(&1);
            acc.add(*a, |ga| {
                for ((gr, yr), dst) in g
                    .chunks_exact(last)
                    .zip(out.chunks_exact(last))
                    .zip(ga.chunks_exact_mut(last))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..last {
                        dst[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmaxRows(a) => {
            let last = *nodes[id].value.shape().last().unwrap_or(&1);
            acc.add(*a, |ga| {
                for ((gr, yr), dst) in g
                    .chunks_exact(last)
                    .zip(out.chunks_exact(last))
                    .zip(ga.chunks_exact_mut(last))
                {
                    let total: f64 = gr.iter().sum();
                    for j in 0..last {
                        dst[j] += gr[j] - libm::exp(yr[j]) * total;
                    }
                }
            });
        }
        Op::Sigmoid(a) => acc.add(*a, |ga| {
            for i in 0..g.len() {
                ga[i] += g[i] * out[i] * (1.0 - out[i]);
            }
        }),
        Op::Silu(a) => {
            let x = val(*a);
            acc.add(*a, |ga| {
                for i in 0..g.len() {
                    let s = if x[i] >= 0.0 {
                        1.0 / (1.0 + libm::exp(-x[i]))
                    } else {
                        let e = libm::exp(x[i]);
                        e / (1.0 + e)
                    };
                    ga[i] += g[i] * (s + x[i] * s * (1.0 - s));
                }
            })
        }
        Op::Tanh(a) => acc.add(*a, |ga| {
            for i in 0..g.len() {
                ga[i] += g[i] * (1.0 - out[i] * out[i]);
            }
        }),
        Op::Exp(a) => acc.add(*a, |ga| {
            for i in 0..g.len() {
                ga[i] += g[i] * out[i];
            }
        }),
        Op::Log(a) => {
            let x = val(*a);
            acc.add(*a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] / x[i];
                }
            })
        }
        Op::Sum(a) => acc.add(*a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
        Op::Mean(a) => {
            let c = g[0] / nodes[*a].value.numel().max(1) as f64;
            acc.add(*a, |ga| ga.iter_mut().for_each(|x| *x += c))
        }
        Op::MeanRows(a) => {
            let rows = nodes[*a].value.shape()[0];
            let inv = 1.0 / rows as f64;
            acc.add(*a, |ga| {
                for row in ga.chunks_exact_mut(g.len()) {
                    row.iter_mut().zip(g).for_each(|(d, &s)| *d += s * inv);
                }
            })
        }
        Op::BiasAdd(x, b) => {
            acc.add(*x, |gx| axpy(gx, g, 1.0));
            let c = nodes[*b].value.numel();
            acc.add(*b, |gb| {
                for row in g.chunks_exact(c) {
                    gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                }
            });
        }
        Op::IndexRows(src, idx) => {
            let d = nodes[*src].value.shape()[1];
            acc.add(*src, |gs| {
                for (i, &r) in idx.iter().enumerate() {
                    axpy(&mut gs[r * d..(r + 1) * d], &g[i * d..(i + 1) * d], 1.0);
                }
            });
        }
        Op::PickPerRow(src, idx) => {
            let k = nodes[*src].value.shape()[1];
            acc.add(*src, |gs| {
                for (r, &c) in idx.iter().enumerate() {
                    gs[r * k + c] += g[r];
                }
            });
        }
        Op::ConcatLast(parts) => {
            let total = *nodes[id].value.shape().last().expect("non-empty shape");
            let rows = g.len() / total.max(1);
            let mut offset = 0;
            for &p in parts {
                let w = *nodes[p].value.shape().last().expect("non-empty shape");
                acc.add(p, |gp| {
                    for r in 0..rows {
                        axpy(
                            &mut gp[r * w..(r + 1) * w],
                            &g[r * total + offset..r * total + offset + w],
                            1.0,
                        );
                    }
                });
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                acc.add(p, |gp| axpy(gp, &g[offset..offset + n], 1.0));
                offset += n;
            }
        }
        Op::Conv3d { x, w, spec } => {
            let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
            let geom = conv_geom(xv.shape(), wv.shape(), *spec).expect("validated in forward");
            let cout = wv.shape()[4];
            let rows = geom.rows();
            let gv = MatView::new(g, rows, cout);
            let pointwise = geom.is_pointwise();
            if nodes[*w].requires_grad {
                let cols_owned;
                let cols = if pointwise {
                    MatView::new(xv.data(), rows, geom.cin)
                } else {
                    cols_owned = geom.im2col(xv.data());
                    MatView::new(&cols_owned, rows, geom.patch())
                };
                acc.add(*w, |gw| kernels::gemm(cols.t(), gv, gw, 1.0));
            }
            if nodes[*x].requires_grad {
                let wm = MatView::new(wv.data(), geom.patch(), cout);
                if pointwise {
                    acc.add(*x, |gx| kernels::gemm(gv, wm.t(), gx, 1.0));
                } else {
                    let mut dcols = vec![0.0; rows * geom.patch()];
                    kernels::gemm(gv, wm.t(), &mut dcols, 0.0);
                    acc.add(*x, |gx| geom.col2im_acc(&dcols, gx));
                }
            }
        }
        Op::TemporalConv { x, kernel } => {
            let (xv, kv) = (&nodes[*x].value, &nodes[*kernel].value);
            let frames = xv.shape()[0];
            let (k, c) = (kv.shape()[0], kv.shape()[1]);
            let plane = xv.numel() / frames;
            let xd = xv.data();
            let kd = kv.data();
            acc.add(*x, |gx| {
                for f in 0..frames {
                    for j in 0..k {
                        let sf = kernels::replicate_frame(f, j, k, frames);
                        let w = &kd[j * c..(j + 1) * c];
                        let src = &g[f * plane..(f + 1) * plane];
                        let dst = &mut gx[sf * plane..(sf + 1) * plane];
                        for (d, s) in dst.chunks_exact_mut(c).zip(src.chunks_exact(c)) {
                            for ch in 0..c {
                                d[ch] += w[ch] * s[ch];
                            }
                        }
                    }
                }
            });
            acc.add(*kernel, |gk| {
                for f in 0..frames {
                    for j in 0..k {
                        let sf = kernels::replicate_frame(f, j, k, frames);
                        let dst = &mut gk[j * c..(j + 1) * c];
                        let gs = &g[f * plane..(f + 1) * plane];
                        let xs = &xd[sf * plane..(sf + 1) * plane];
                        for (gr, xr) in gs.chunks_exact(c).zip(xs.chunks_exact(c)) {
                            for ch in 0..c {
                                dst[ch] += gr[ch] * xr[ch];
                            }
                        }
                    }
                }
            });
        }
        Op::AvgPool3(x, factors) => {
            let s = nodes[*x].value.shape();
            let dims = [s[0], s[1], s[2], s[3]];
            let inv = 1.0 / factors.iter().product::<usize>() as f64;
            acc.add(*x, |gx| kernels::for_each_block(dims, *factors, |i, o| gx[i] += g[o] * inv));
        }
        Op::Upsample3(x, factors) => {
            let s = nodes[id].value.shape();
            let dims = [s[0], s[1], s[2], s[3]];
            acc.add(*x, |gx| kernels::for_each_block(dims, *factors, |i, o| gx[o] += g[i]));
        }
        Op::LayerNormRows { x, rstd } => {
            let last = *nodes[id].value.shape().last().unwrap_or(&1);
            acc.add(*x, |gx| {
                for (r, ((gr, yr), dst)) in g
                    .chunks_exact(last)
                    .zip(out.chunks_exact(last))
                    .zip(gx.chunks_exact_mut(last))
                    .enumerate()
                {
                    let n = last as f64;
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..last {
                        dst[j] += rstd[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
            });
        }
        Op::L2NormalizeRows { x, norms } => {
            let last = *nodes[id].value.shape().last().unwrap_or(&1);
            acc.add(*x, |gx| {
                for (r, ((gr, yr), dst)) in g
                    .chunks_exact(last)
                    .zip(out.chunks_exact(last))
                    .zip(gx.chunks_exact_mut(last))
                    .enumerate()
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..last {
                        dst[j] += (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
            });
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}
