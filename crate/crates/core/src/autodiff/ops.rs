use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom, MatView};
use super::{Conv3dSpec, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    let rows = if last == 0 {
        0
    } else {
        shape.iter().product::<usize>() / last
    };
    (rows, last)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if core::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Graph("operands recorded on different tapes"))
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (n.value.map(f), n.requires_grad)
        };
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.value.shape() != b.value.shape() {
                return Err(Error::shape(name, a.value.shape(), b.value.shape()));
            }
            let data = a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (
                Tensor::new(a.value.shape(), data)?,
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(value, op, rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self).expect("same shape")
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), |x| x + c)
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn scale_by(&self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&s)?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, sn) = (&nodes[self.id], &nodes[s.id]);
            if sn.value.numel() != 1 {
                return Err(Error::shape("scale_by", a.value.shape(), sn.value.shape()));
            }
            let c = sn.value.data()[0];
            (a.value.map(|x| x * c), a.requires_grad || sn.requires_grad)
        };
        Ok(self.tape.push(value, Op::ScaleBy(self.id, s.id), rg))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) * op(other)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (sa, sb) = (a.value.shape(), b.value.shape());
            if sa.len() != 2 || sb.len() != 2 {
                return Err(Error::shape("matmul", sa, sb));
            }
            let va = MatView::new(a.value.data(), sa[0], sa[1]).maybe_t(ta);
            let vb = MatView::new(b.value.data(), sb[0], sb[1]).maybe_t(tb);
            if va.cols != vb.rows {
                return Err(Error::shape("matmul", sa, sb));
            }
            let mut out = vec![0.0; va.rows * vb.cols];
            kernels::gemm(va, vb, &mut out, 0.0);
            (
                Tensor::new(&[va.rows, vb.cols], out)?,
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(
            value,
            Op::Matmul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            rg,
        ))
    }

    /// Explicit reshape; the element order is unchanged.
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (n.value.reshape(shape)?, n.requires_grad)
        };
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    fn rowwise(&self, op: Op, f: impl Fn(&[f64], &mut [f64])) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let (_, last) = split_last(n.value.shape());
            let mut out = vec![0.0; n.value.numel()];
            if last > 0 {
                for (src, dst) in n.value.data().chunks_exact(last).zip(out.chunks_exact_mut(last)) {
                    f(src, dst);
                }
            }
            (
                Tensor::new(n.value.shape(), out).expect("same numel"),
                n.requires_grad,
            )
        };
        self.tape.push(value, op, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&self) -> Var<'t> {
        self.rowwise(Op::SoftmaxRows(self.id), |src, dst| {
            let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = libm::exp(s - m);
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&self) -> Var<'t> {
        self.rowwise(Op::LogSoftmaxRows(self.id), |src, dst| {
            let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = src.iter().map(|&s| libm::exp(s - m)).sum();
            let lse = m + libm::log(z);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn silu(&self) -> Var<'t> {
        self.unary(Op::Silu(self.id), |x| x * sigmoid(x))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), libm::tanh)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), libm::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), libm::log)
    }

    pub fn sum(&self) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (Tensor::scalar(n.value.data().iter().sum()), n.requires_grad)
        };
        self.tape.push(value, Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let len = n.value.numel().max(1) as f64;
            (
                Tensor::scalar(n.value.data().iter().sum::<f64>() / len),
                n.requires_grad,
            )
        };
        self.tape.push(value, Op::Mean(self.id), rg)
    }

    /// Mean over the first axis of a 2-D node: `[n, d] -> [d]`.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let s = n.value.shape();
            if s.len() != 2 || s[0] == 0 {
                return Err(Error::shape("mean_rows", s, &[]));
            }
            let mut out = vec![0.0; s[1]];
            for row in n.value.data().chunks_exact(s[1]) {
                out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
            }
            let inv = 1.0 / s[0] as f64;
            out.iter_mut().for_each(|o| *o *= inv);
            (Tensor::new(&[s[1]], out)?, n.requires_grad)
        };
        Ok(self.tape.push(value, Op::MeanRows(self.id), rg))
    }

    /// Adds a per-channel vector `[C]` to every row of `[..., C]`.
    pub fn bias_add(&self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias)?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (x, b) = (&nodes[self.id], &nodes[bias.id]);
            let (_, last) = split_last(x.value.shape());
            if b.value.shape() != [last] {
                return Err(Error::shape("bias_add", x.value.shape(), b.value.shape()));
            }
            let mut out = x.value.to_vec();
            for row in out.chunks_exact_mut(last.max(1)) {
                row.iter_mut().zip(b.value.data()).for_each(|(o, &c)| *o += c);
            }
            (
                Tensor::new(x.value.shape(), out)?,
                x.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::BiasAdd(self.id, bias.id), rg))
    }

    /// Gathers rows of a 2-D node: `[R, d] -> [idx.len(), d]`.
    pub fn index_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let s = n.value.shape();
            if s.len() != 2 {
                return Err(Error::shape("index_rows", s, &[]));
            }
            let d = s[1];
            let mut out = Vec::with_capacity(idx.len() * d);
            for &r in idx {
                if r >= s[0] {
                    return Err(Error::shape("index_rows", s, &[r]));
                }
                out.extend_from_slice(&n.value.data()[r * d..(r + 1) * d]);
            }
            (Tensor::new(&[idx.len(), d], out)?, n.requires_grad)
        };
        Ok(self.tape.push(value, Op::IndexRows(self.id, idx.to_vec()), rg))
    }

    /// Selects one column per row: `[n, K] -> [n]`.
    pub fn pick_per_row(&self, idx: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let s = n.value.shape();
            if s.len() != 2 || s[0] != idx.len() {
                return Err(Error::shape("pick_per_row", s, &[idx.len()]));
            }
            let mut out = Vec::with_capacity(idx.len());
            for (r, &c) in idx.iter().enumerate() {
                if c >= s[1] {
                    return Err(Error::shape("pick_per_row", s, &[c]));
                }
                out.push(n.value.data()[r * s[1] + c]);
            }
            (Tensor::new(&[idx.len()], out)?, n.requires_grad)
        };
        Ok(self.tape.push(value, Op::PickPerRow(self.id, idx.to_vec()), rg))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::Graph("concat of nothing"))?;
        for p in parts {
            first.same_tape(p)?;
        }
        let tape = first.tape;
        let (value, rg) = {
            let nodes = tape.nodes();
            let lead = {
                let s = nodes[first.id].value.shape();
                s[..s.len() - 1].to_vec()
            };
            let rows: usize = lead.iter().product();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let s = nodes[p.id].value.shape();
                if s.is_empty() || s[..s.len() - 1] != lead[..] {
                    return Err(Error::shape("concat_last", &lead, s));
                }
                widths.push(s[s.len() - 1]);
            }
            let total: usize = widths.iter().sum();
            let mut out = vec![0.0; rows * total];
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let src = nodes[p.id].value.data();
                for r in 0..rows {
                    out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                offset += w;
            }
            let mut shape = lead;
            shape.push(total);
            (
                Tensor::new(&shape, out)?,
                parts.iter().any(|p| nodes[p.id].requires_grad),
            )
        };
        Ok(tape.push(value, Op::ConcatLast(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Stacks 2-D nodes with equal width: `[r_i, d] -> [sum r_i, d]`.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::Graph("concat of nothing"))?;
        for p in parts {
            first.same_tape(p)?;
        }
        let tape = first.tape;
        let (value, rg) = {
            let nodes = tape.nodes();
            let s0 = nodes[first.id].value.shape();
            if s0.len() != 2 {
                return Err(Error::shape("concat_rows", s0, &[]));
            }
            let d = s0[1];
            let mut out = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.id].value;
                if v.shape().len() != 2 || v.shape()[1] != d {
                    return Err(Error::shape("concat_rows", s0, v.shape()));
                }
                rows += v.shape()[0];
                out.extend_from_slice(v.data());
            }
            (
                Tensor::new(&[rows, d], out)?,
                parts.iter().any(|p| nodes[p.id].requires_grad),
            )
        };
        Ok(tape.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Zero-padded 3-D convolution (cross-correlation) of a channels-last
    /// `[F, H, W, Cin]` input with weights `[kf, kh, kw, Cin, Cout]`.
    pub fn conv3d(&self, weight: Var<'t>, spec: Conv3dSpec) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (x, w) = (&nodes[self.id], &nodes[weight.id]);
            let geom = conv_geom(x.value.shape(), w.value.shape(), spec)?;
            let cout = w.value.shape()[4];
            let rows = geom.rows();
            let mut out = vec![0.0; rows * cout];
            let wv = MatView::new(w.value.data(), geom.patch(), cout);
            if geom.is_pointwise() {
                kernels::gemm(MatView::new(x.value.data(), rows, geom.cin), wv, &mut out, 0.0);
            } else {
                let cols = geom.im2col(x.value.data());
                kernels::gemm(MatView::new(&cols, rows, geom.patch()), wv, &mut out, 0.0);
            }
            let [fo, ho, wo] = geom.out;
            (
                Tensor::new(&[fo, ho, wo, cout], out)?,
                x.requires_grad || w.requires_grad,
            )
        };
        Ok(self.tape.push(
            value,
            Op::Conv3d {
                x: self.id,
                w: weight.id,
                spec,
            },
            rg,
        ))
    }

    /// Depthwise convolution along frames with edge-replicated padding:
    /// `[F, H, W, C]` with kernel `[k, C]`, `k` odd.
    pub fn temporal_conv(&self, kernel: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&kernel)?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (x, kn) = (&nodes[self.id], &nodes[kernel.id]);
            let (xs, ks) = (x.value.shape(), kn.value.shape());
            if xs.len() != 4 || ks.len() != 2 || ks[1] != xs[3] || xs[0] == 0 {
                return Err(Error::shape("temporal_conv", xs, ks));
            }
            if ks[0] % 2 == 0 {
                return Err(Error::Config(alloc::format!(
                    "temporal kernel size must be odd, got {}",
                    ks[0]
                )));
            }
            let out = kernels::temporal_conv(x.value.data(), xs[0], kn.value.data(), ks[0], xs[3]);
            (
                Tensor::new(xs, out)?,
                x.requires_grad || kn.requires_grad,
            )
        };
        Ok(self.tape.push(
            value,
            Op::TemporalConv {
                x: self.id,
                kernel: kernel.id,
            },
            rg,
        ))
    }

    /// Block-average pooling of `[F, H, W, C]` by per-axis factors.
    pub fn avg_pool3(&self, factors: [usize; 3]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            let dims = dims4(x.value.shape(), "avg_pool3")?;
            let out_dims = pooled_dims(dims, factors)?;
            let mut out = vec![0.0; out_dims.iter().product()];
            let inv = 1.0 / factors.iter().product::<usize>() as f64;
            let src = x.value.data();
            kernels::for_each_block(dims, factors, |i, o| out[o] += src[i] * inv);
            (Tensor::new(&out_dims, out)?, x.requires_grad)
        };
        Ok(self.tape.push(value, Op::AvgPool3(self.id, factors), rg))
    }

    /// Nearest-neighbour upsampling of `[F, H, W, C]` by per-axis factors.
    pub fn upsample3(&self, factors: [usize; 3]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            let [f, h, w, c] = dims4(x.value.shape(), "upsample3")?;
            if factors.contains(&0) {
                return Err(Error::Config("upsample factor must be positive".into()));
            }
            let big = [f * factors[0], h * factors[1], w * factors[2], c];
            let mut out = vec![0.0; big.iter().product()];
            let src = x.value.data();
            kernels::for_each_block(big, factors, |i, o| out[i] = src[o]);
            (Tensor::new(&big, out)?, x.requires_grad)
        };
        Ok(self.tape.push(value, Op::Upsample3(self.id, factors), rg))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    pub fn layer_norm_rows(&self) -> Var<'t> {
        let (value, rg, rstd) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let (rows, last) = split_last(n.value.shape());
            let mut out = vec![0.0; n.value.numel()];
            let mut rstd = Vec::with_capacity(rows);
            if last > 0 {
                for (src, dst) in n.value.data().chunks_exact(last).zip(out.chunks_exact_mut(last)) {
                    let mean = src.iter().sum::<f64>() / last as f64;
                    let var = src.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / last as f64;
                    let r = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = (s - mean) * r;
                    }
                    rstd.push(r);
                }
            }
            (
                Tensor::new(n.value.shape(), out).expect("same numel"),
                n.requires_grad,
                rstd,
            )
        };
        self.tape.push(value, Op::LayerNormRows { x: self.id, rstd }, rg)
    }

    /// Scales each row of the last axis to unit Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Var<'t> {
        let (value, rg, norms) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let (rows, last) = split_last(n.value.shape());
            let mut out = vec![0.0; n.value.numel()];
            let mut norms = Vec::with_capacity(rows);
            if last > 0 {
                for (src, dst) in n.value.data().chunks_exact(last).zip(out.chunks_exact_mut(last)) {
                    let norm = libm::sqrt(src.iter().map(|x| x * x).sum::<f64>() + L2_EPS);
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s / norm;
                    }
                    norms.push(norm);
                }
            }
            (
                Tensor::new(n.value.shape(), out).expect("same numel"),
                n.requires_grad,
                norms,
            )
        };
        self.tape.push(value, Op::L2NormalizeRows { x: self.id, norms }, rg)
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    /// Mean squared difference against `target`.
    pub fn mse(&self, target: Var<'t>) -> Result<Var<'t>> {
        Ok(self.sub(target)?.square().mean())
    }
}

pub(crate) fn conv_geom(xs: &[usize], ws: &[usize], spec: Conv3dSpec) -> Result<ConvGeom> {
    if xs.len() != 4 || ws.len() != 5 || ws[3] != xs[3] {
        return Err(Error::shape("conv3d", xs, ws));
    }
    let input = [xs[0], xs[1], xs[2]];
    let kernel = [ws[0], ws[1], ws[2]];
    let out = kernels::conv3d_output_dims(input, kernel, spec).ok_or_else(|| Error::shape("conv3d", xs, ws))?;
    Ok(ConvGeom {
        input,
        kernel,
        out,
        cin: xs[3],
        spec,
    })
}

fn dims4(s: &[usize], op: &'static str) -> Result<[usize; 4]> {
    if s.len() != 4 {
        return Err(Error::shape(op, s, &[]));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

fn pooled_dims(dims: [usize; 4], factors: [usize; 3]) -> Result<[usize; 4]> {
    for a in 0..3 {
        if factors[a] == 0 || !dims[a].is_multiple_of(factors[a]) {
            return Err(Error::Config(alloc::format!(
                "pool factor {:?} does not divide extents {:?}",
                factors,
                &dims[..3]
            )));
        }
    }
    Ok([
        dims[0] / factors[0],
        dims[1] / factors[1],
        dims[2] / factors[2],
        dims[3],
    ])
}

/// Scaled dot-product attention `softmax(q k^T / sqrt(d)) v` over 2-D token
/// matrices. Returns the output together with the attention weights.
pub fn attention_with_weights<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] || ks[0] == 0 {
        return Err(Error::shape("attention", &qs, &ks));
    }
    let scale = 1.0 / libm::sqrt(qs[1] as f64);
    let weights = q.matmul_t(k, false, true)?.scale(scale).softmax_rows();
    Ok((weights.matmul(v)?, weights))
}

pub fn attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    attention_with_weights(q, k, v).map(|(out, _)| out)
}
