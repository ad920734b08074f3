//! Forward and backward kernels for the fixed-geometry layers.
//!
//! Convolutions are 3-wide cross-correlations with zero padding 1 and stride 1
//! along every spatial axis, so spatial shape is preserved. Spatial ranks 1, 2
//! and 3 share one implementation: lower ranks are lifted to three axes with
//! unit extent and a unit kernel along the dummy axes.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;

/// Channel and rank description of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub rank: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, rank: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            rank,
        }
    }

    pub fn kernel_volume(&self) -> usize {
        KERNEL.pow(self.rank as u32)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend(std::iter::repeat(KERNEL).take(self.rank));
        s
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        vec![self.out_channels]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_volume()
    }

    pub fn fan_out(&self) -> usize {
        self.out_channels * self.kernel_volume()
    }
}

fn lift3(spatial: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    let off = 3 - spatial.len();
    out[off..].copy_from_slice(spatial);
    out
}

fn kernel3(rank: usize) -> [usize; 3] {
    let mut k = [1; 3];
    for v in k.iter_mut().skip(3 - rank) {
        *v = KERNEL;
    }
    k
}

fn check_rank(x: &Tensor) -> Result<usize> {
    let rank = x.shape().len().saturating_sub(1);
    if !(1..=3).contains(&rank) {
        return Err(TensorError::Shape(format!(
            "expected [C, spatial..] with 1-3 spatial axes, got {:?}",
            x.shape()
        )));
    }
    Ok(rank)
}

/// Unfold `x` into a `[C*K, S]` patch matrix.
pub fn im2col(x: &Tensor, rank: usize) -> Vec<f64> {
    let c = x.channels();
    let d = lift3(x.spatial(), 1);
    let k = kernel3(rank);
    let s = d[0] * d[1] * d[2];
    let kv = k[0] * k[1] * k[2];
    let mut cols = vec![0.0; c * kv * s];
    let xd = x.data();
    for ch in 0..c {
        let xc = &xd[ch * s..(ch + 1) * s];
        for kz in 0..k[0] {
            for ky in 0..k[1] {
                for kx in 0..k[2] {
                    let kidx = (kz * k[1] + ky) * k[2] + kx;
                    let row = &mut cols[(ch * kv + kidx) * s..(ch * kv + kidx + 1) * s];
                    let (oz, oy, ox) = (
                        kz as isize - (k[0] / 2) as isize,
                        ky as isize - (k[1] / 2) as isize,
                        kx as isize - (k[2] / 2) as isize,
                    );
                    for z in 0..d[0] {
                        let iz = z as isize + oz;
                        if iz < 0 || iz >= d[0] as isize {
                            continue;
                        }
                        for y in 0..d[1] {
                            let iy = y as isize + oy;
                            if iy < 0 || iy >= d[1] as isize {
                                continue;
                            }
                            let obase = (z * d[1] + y) * d[2];
                            let ibase = (iz as usize * d[1] + iy as usize) * d[2];
                            let x_lo = (-ox).max(0) as usize;
                            let x_hi = (d[2] as isize - ox.max(0)) as usize;
                            for xx in x_lo..x_hi {
                                row[obase + xx] = xc[(ibase as isize + xx as isize + ox) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a `[C*K, S]` patch-gradient matrix back onto the input layout.
pub fn col2im(cols: &[f64], channels: usize, spatial: &[usize], rank: usize) -> Tensor {
    let d = lift3(spatial, 1);
    let k = kernel3(rank);
    let s = d[0] * d[1] * d[2];
    let kv = k[0] * k[1] * k[2];
    let mut shape = vec![channels];
    shape.extend_from_slice(spatial);
    let mut out = Tensor::zeros(&shape);
    let od = out.data_mut();
    for ch in 0..channels {
        let xc = &mut od[ch * s..(ch + 1) * s];
        for kz in 0..k[0] {
            for ky in 0..k[1] {
                for kx in 0..k[2] {
                    let kidx = (kz * k[1] + ky) * k[2] + kx;
                    let row = &cols[(ch * kv + kidx) * s..(ch * kv + kidx + 1) * s];
                    let (oz, oy, ox) = (
                        kz as isize - (k[0] / 2) as isize,
                        ky as isize - (k[1] / 2) as isize,
                        kx as isize - (k[2] / 2) as isize,
                    );
                    for z in 0..d[0] {
                        let iz = z as isize + oz;
                        if iz < 0 || iz >= d[0] as isize {
                            continue;
                        }
                        for y in 0..d[1] {
                            let iy = y as isize + oy;
                            if iy < 0 || iy >= d[1] as isize {
                                continue;
                            }
                            let obase = (z * d[1] + y) * d[2];
                            let ibase = (iz as usize * d[1] + iy as usize) * d[2];
                            let x_lo = (-ox).max(0) as usize;
                            let x_hi = (d[2] as isize - ox.max(0)) as usize;
                            for xx in x_lo..x_hi {
                                xc[(ibase as isize + xx as isize + ox) as usize] += row[obase + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c[m,n] = a[m,k] * b[k,n]` with explicit strides (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover every index reachable from the given
    // dimensions and strides; callers pass exact-size buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_conv_shapes(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Result<()> {
    let rank = check_rank(x)?;
    if rank != spec.rank || x.channels() != spec.in_channels {
        return Err(TensorError::Shape(format!(
            "conv expects {} channels over {} spatial axes, input is {:?}",
            spec.in_channels,
            spec.rank,
            x.shape()
        )));
    }
    if w.shape() != spec.weight_shape().as_slice() || b.shape() != spec.bias_shape().as_slice() {
        return Err(TensorError::Shape(format!(
            "conv weight {:?} / bias {:?} do not match {:?}",
            w.shape(),
            b.shape(),
            spec
        )));
    }
    Ok(())
}

/// Forward convolution. Returns the output and the patch matrix needed by
/// [`conv_backward`].
pub fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Result<(Tensor, Vec<f64>)> {
    check_conv_shapes(x, w, b, spec)?;
    let s = x.spatial_len();
    let ck = spec.fan_in();
    let o = spec.out_channels;
    let cols = im2col(x, spec.rank);
    let mut out_shape = vec![o];
    out_shape.extend_from_slice(x.spatial());
    let mut out = Tensor::zeros(&out_shape);
    {
        let od = out.data_mut();
        for (oc, bias) in b.data().iter().enumerate() {
            od[oc * s..(oc + 1) * s].fill(*bias);
        }
        gemm(o, ck, s, w.data(), (ck as isize, 1), &cols, (s as isize, 1), od, true);
    }
    Ok((out, cols))
}

/// Gradients of a convolution with respect to input, weights and bias.
pub fn conv_backward(
    grad_out: &Tensor,
    cols: &[f64],
    w: &Tensor,
    spec: &ConvSpec,
    input_spatial: &[usize],
) -> (Tensor, Tensor, Tensor) {
    let s: usize = input_spatial.iter().product();
    let ck = spec.fan_in();
    let o = spec.out_channels;
    let go = grad_out.data();

    let mut gw = Tensor::zeros(&spec.weight_shape());
    // dW[o, ck] = dOut[o, s] * cols[ck, s]^T
    gemm(o, s, ck, go, (s as isize, 1), cols, (1, s as isize), gw.data_mut(), false);

    let mut gb = Tensor::zeros(&spec.bias_shape());
    for (oc, g) in gb.data_mut().iter_mut().enumerate() {
        *g = go[oc * s..(oc + 1) * s].iter().sum();
    }

    // dcols[ck, s] = W^T[ck, o] * dOut[o, s]
    let mut dcols = vec![0.0; ck * s];
    gemm(ck, o, s, w.data(), (1, ck as isize), go, (s as isize, 1), &mut dcols, false);
    let gx = col2im(&dcols, spec.in_channels, input_spatial, spec.rank);
    (gx, gw, gb)
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut st = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * dims[i + 1];
    }
    st
}

fn unravel(mut idx: usize, dims: &[usize], out: &mut [usize]) {
    for a in (0..dims.len()).rev() {
        out[a] = idx % dims[a];
        idx /= dims[a];
    }
}

/// Non-overlapping 2-window max pooling over every spatial axis.
///
/// Odd extents keep a truncated trailing window, so the output extent is
/// `ceil(d / 2)`. Returns the output and, per output element, the flat input
/// index of its maximum (first occurrence wins on ties).
pub fn maxpool_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    check_rank(x)?;
    let c = x.channels();
    let din = x.spatial().to_vec();
    let dout: Vec<usize> = din.iter().map(|d| d.div_ceil(2)).collect();
    let sin: usize = din.iter().product();
    let sout: usize = dout.iter().product();
    let in_st = strides(&din);
    let rank = din.len();
    let mut out_shape = vec![c];
    out_shape.extend_from_slice(&dout);
    let mut out = Tensor::zeros(&out_shape);
    let mut argmax = vec![0usize; c * sout];
    let mut o_idx = vec![0usize; rank];
    let mut w_idx = vec![0usize; rank];
    let xd = x.data();
    let od = out.data_mut();
    for ch in 0..c {
        for so in 0..sout {
            unravel(so, &dout, &mut o_idx);
            let mut best = f64::NEG_INFINITY;
            let mut best_at = usize::MAX;
            for wi in 0..(1usize << rank) {
                let mut inside = true;
                for a in 0..rank {
                    let bit = (wi >> (rank - 1 - a)) & 1;
                    w_idx[a] = o_idx[a] * 2 + bit;
                    if w_idx[a] >= din[a] {
                        inside = false;
                    }
                }
                if !inside {
                    continue;
                }
                let flat = ch * sin + w_idx.iter().zip(&in_st).map(|(i, s)| i * s).sum::<usize>();
                if best_at == usize::MAX || xd[flat] > best {
                    best = xd[flat];
                    best_at = flat;
                }
            }
            od[ch * sout + so] = best;
            argmax[ch * sout + so] = best_at;
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward(grad_out: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    let gd = gx.data_mut();
    for (g, &at) in grad_out.data().iter().zip(argmax) {
        gd[at] += g;
    }
    gx
}

/// Nearest-neighbour upsampling by 2, cropped to `target` spatial extents
/// (each at most twice the input extent).
pub fn upsample_forward(x: &Tensor, target: &[usize]) -> Result<Tensor> {
    let rank = check_rank(x)?;
    let din = x.spatial();
    if target.len() != rank || target.iter().zip(din).any(|(t, d)| *t > 2 * d || *t == 0) {
        return Err(TensorError::Shape(format!(
            "cannot upsample {:?} to spatial {:?}",
            x.shape(),
            target
        )));
    }
    let c = x.channels();
    let map = upsample_index(din, target);
    let sin: usize = din.iter().product();
    let sout = map.len();
    let mut shape = vec![c];
    shape.extend_from_slice(target);
    let mut out = Tensor::zeros(&shape);
    let xd = x.data();
    let od = out.data_mut();
    for ch in 0..c {
        for (so, &si) in map.iter().enumerate() {
            od[ch * sout + so] = xd[ch * sin + si];
        }
    }
    Ok(out)
}

pub fn upsample_backward(grad_out: &Tensor, input_shape: &[usize]) -> Tensor {
    let c = input_shape[0];
    let din = &input_shape[1..];
    let map = upsample_index(din, grad_out.spatial());
    let sin: usize = din.iter().product();
    let sout = map.len();
    let mut gx = Tensor::zeros(input_shape);
    let gd = gx.data_mut();
    let go = grad_out.data();
    for ch in 0..c {
        for (so, &si) in map.iter().enumerate() {
            gd[ch * sin + si] += go[ch * sout + so];
        }
    }
    gx
}

fn upsample_index(din: &[usize], target: &[usize]) -> Vec<usize> {
    let sout: usize = target.iter().product();
    let in_st = strides(din);
    let mut idx = vec![0usize; target.len()];
    (0..sout)
        .map(|so| {
            unravel(so, target, &mut idx);
            idx.iter().zip(&in_st).map(|(i, s)| (i / 2) * s).sum()
        })
        .collect()
}
