//! Channel-first 3-D convolution, transposed convolution and max pooling.
//!
//! Tensors are `[C, D, H, W]` for a single sample; 2-D layers use `D = 1`
//! with a depth-1 kernel. Convolutions lower to im2col + sgemm.

use crate::gemm::{gemm, MatMut, MatRef};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Kernel size, stride and zero padding per spatial axis (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// Same kernel/stride/padding on all three axes.
    pub fn cube(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [kernel; 3],
            stride: [stride; 3],
            pad: [pad; 3],
        }
    }

    /// A 2-D geometry embedded in 3-D (depth kernel 1, no depth padding).
    pub fn planar(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [1, kernel, kernel],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output size of a convolution over an input of `dims`.
    pub fn conv_out(&self, dims: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * self.pad[a];
            assert!(
                padded >= self.kernel[a],
                "kernel {} larger than padded input {padded}",
                self.kernel[a]
            );
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    /// Output size of a transposed convolution over an input of `dims`.
    pub fn transposed_out(&self, dims: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (dims[a] - 1) * self.stride[a] + self.kernel[a] - 2 * self.pad[a];
        }
        out
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    assert_eq!(shape.len(), 4, "expected a [C, D, H, W] tensor, got {shape:?}");
    [shape[1], shape[2], shape[3]]
}

/// Output positions `o` along one axis whose input `o * stride + k - pad`
/// lies in `[0, size)`, as a half-open range.
fn valid_range(k: usize, stride: usize, pad: usize, size: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if size + pad > k {
        ((size + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds `[c, dims]` into a `[c * kvol, out_dims volume]` column matrix.
fn im2col(x: &[f32], c: usize, dims: [usize; 3], g: &ConvGeom, out: [usize; 3]) -> Vec<f32> {
    let l = out[0] * out[1] * out[2];
    let kvol = g.kernel_volume();
    let mut cols = vec![0.0f32; c * kvol * l];
    let plane = dims[1] * dims[2];
    let (sd, sh, sw) = (g.stride[0], g.stride[1], g.stride[2]);
    for ch in 0..c {
        let xc = &x[ch * dims[0] * plane..(ch + 1) * dims[0] * plane];
        for kd in 0..g.kernel[0] {
            let (d0, d1) = valid_range(kd, sd, g.pad[0], dims[0], out[0]);
            for kh in 0..g.kernel[1] {
                let (h0, h1) = valid_range(kh, sh, g.pad[1], dims[1], out[1]);
                for kw in 0..g.kernel[2] {
                    let (w0, w1) = valid_range(kw, sw, g.pad[2], dims[2], out[2]);
                    if w0 >= w1 {
                        continue;
                    }
                    let row = ((ch * g.kernel[0] + kd) * g.kernel[1] + kh) * g.kernel[2] + kw;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    let iw0 = w0 * sw + kw - g.pad[2];
                    for od in d0..d1 {
                        let id = od * sd + kd - g.pad[0];
                        for oh in h0..h1 {
                            let ih = oh * sh + kh - g.pad[1];
                            let src = &xc[id * plane + ih * dims[2]..][..dims[2]];
                            let dst_row = &mut dst[(od * out[1] + oh) * out[2]..][w0..w1];
                            if sw == 1 {
                                dst_row.copy_from_slice(&src[iw0..iw0 + (w1 - w0)]);
                            } else {
                                for (d, s) in dst_row.iter_mut().zip(src[iw0..].iter().step_by(sw)) {
                                    *d = *s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `[c, dims]`.
fn col2im(cols: &[f32], c: usize, dims: [usize; 3], g: &ConvGeom, out: [usize; 3]) -> Vec<f32> {
    let l = out[0] * out[1] * out[2];
    let plane = dims[1] * dims[2];
    let mut x = vec![0.0f32; c * dims[0] * plane];
    let (sd, sh, sw) = (g.stride[0], g.stride[1], g.stride[2]);
    for ch in 0..c {
        let xc = &mut x[ch * dims[0] * plane..(ch + 1) * dims[0] * plane];
        for kd in 0..g.kernel[0] {
            let (d0, d1) = valid_range(kd, sd, g.pad[0], dims[0], out[0]);
            for kh in 0..g.kernel[1] {
                let (h0, h1) = valid_range(kh, sh, g.pad[1], dims[1], out[1]);
                for kw in 0..g.kernel[2] {
                    let (w0, w1) = valid_range(kw, sw, g.pad[2], dims[2], out[2]);
                    if w0 >= w1 {
                        continue;
                    }
                    let row = ((ch * g.kernel[0] + kd) * g.kernel[1] + kh) * g.kernel[2] + kw;
                    let src = &cols[row * l..(row + 1) * l];
                    let iw0 = w0 * sw + kw - g.pad[2];
                    for od in d0..d1 {
                        let id = od * sd + kd - g.pad[0];
                        for oh in h0..h1 {
                            let ih = oh * sh + kh - g.pad[1];
                            let dst = &mut xc[id * plane + ih * dims[2]..][..dims[2]];
                            let src_row = &src[(od * out[1] + oh) * out[2]..][w0..w1];
                            for (d, s) in dst[iw0..].iter_mut().step_by(sw).zip(src_row) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn add_channel_bias(out: &mut [f32], bias: &[f32], l: usize) {
    for (ch, chunk) in out.chunks_mut(l.max(1)).enumerate() {
        let b = bias[ch];
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_sums(g: &[f32], c: usize, l: usize) -> Tensor {
    Tensor::from_vec([c], g.chunks(l.max(1)).map(|ch| ch.iter().sum()).collect())
}

impl<'t> Var<'t> {
    /// Convolution of `[Cin, D, H, W]` with weights `[Cout, Cin, kd, kh, kw]`.
    pub fn conv3d(&self, weight: &Var<'t>, bias: Option<&Var<'t>>, geom: ConvGeom) -> Var<'t> {
        let x = self.value_arc();
        let w = weight.value_arc();
        let cin = x.shape()[0];
        let dims = spatial(x.shape());
        let ws = w.shape();
        assert_eq!(ws.len(), 5, "conv3d weight must be [Cout, Cin, kd, kh, kw]");
        assert_eq!(ws[1], cin, "conv3d channel mismatch: input {cin}, weight {ws:?}");
        assert_eq!([ws[2], ws[3], ws[4]], geom.kernel, "conv3d kernel shape");
        let cout = ws[0];
        let out_dims = geom.conv_out(dims);
        let l: usize = out_dims.iter().product();
        let krows = cin * geom.kernel_volume();
        let lp = self.tape.low_precision();

        let cols_owned;
        let cols: &[f32] = if geom.is_pointwise() {
            x.data()
        } else {
            cols_owned = im2col(x.data(), cin, dims, &geom, out_dims);
            &cols_owned
        };
        let mut out = vec![0.0f32; cout * l];
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[cout], "conv3d bias shape");
            for (ch, chunk) in out.chunks_mut(l.max(1)).enumerate() {
                chunk.fill(b.value.data()[ch]);
            }
        }
        gemm(
            1.0,
            MatRef::new(w.data(), cout, krows),
            MatRef::new(cols, krows, l),
            1.0,
            MatMut::new(&mut out, cout, l),
            lp,
        );
        let value = Tensor::from_vec([cout, out_dims[0], out_dims[1], out_dims[2]], out);
        let in_shape = x.shape().to_vec();
        let w_shape = ws.to_vec();
        let backward = move |g: &Tensor, needs: &[bool]| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut gcols = vec![0.0f32; krows * l];
                gemm(
                    1.0,
                    MatRef::new(w.data(), cout, krows).t(),
                    MatRef::new(gd, cout, l),
                    0.0,
                    MatMut::new(&mut gcols, krows, l),
                    lp,
                );
                let data = if geom.is_pointwise() {
                    gcols
                } else {
                    col2im(&gcols, cin, dims, &geom, out_dims)
                };
                Tensor::from_vec(in_shape.clone(), data)
            });
            let gw = needs[1].then(|| {
                let cols_owned;
                let cols: &[f32] = if geom.is_pointwise() {
                    x.data()
                } else {
                    cols_owned = im2col(x.data(), cin, dims, &geom, out_dims);
                    &cols_owned
                };
                let mut gw = vec![0.0f32; cout * krows];
                gemm(
                    1.0,
                    MatRef::new(gd, cout, l),
                    MatRef::new(cols, krows, l).t(),
                    0.0,
                    MatMut::new(&mut gw, cout, krows),
                    lp,
                );
                Tensor::from_vec(w_shape.clone(), gw)
            });
            let mut grads = vec![gx, gw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| channel_sums(gd, cout, l)));
            }
            grads
        };
        match bias {
            Some(b) => self.tape.record(value, &[self, weight, b], backward),
            None => self.tape.record(value, &[self, weight], backward),
        }
    }

    /// Transposed convolution of `[Cin, D, H, W]` with weights
    /// `[Cin, Cout, kd, kh, kw]` (the adjoint of [`Var::conv3d`] with the same
    /// geometry).
    pub fn conv_transpose3d(&self, weight: &Var<'t>, bias: Option<&Var<'t>>, geom: ConvGeom) -> Var<'t> {
        let x = self.value_arc();
        let w = weight.value_arc();
        let cin = x.shape()[0];
        let dims = spatial(x.shape());
        let ws = w.shape();
        assert_eq!(ws.len(), 5, "conv_transpose3d weight must be [Cin, Cout, kd, kh, kw]");
        assert_eq!(ws[0], cin, "conv_transpose3d channel mismatch");
        assert_eq!([ws[2], ws[3], ws[4]], geom.kernel, "conv_transpose3d kernel shape");
        let cout = ws[1];
        let out_dims = geom.transposed_out(dims);
        assert_eq!(geom.conv_out(out_dims), dims, "inconsistent transposed geometry");
        let li: usize = dims.iter().product();
        let lo: usize = out_dims.iter().product();
        let krows = cout * geom.kernel_volume();
        let lp = self.tape.low_precision();

        let mut cols = vec![0.0f32; krows * li];
        gemm(
            1.0,
            MatRef::new(w.data(), cin, krows).t(),
            MatRef::new(x.data(), cin, li),
            0.0,
            MatMut::new(&mut cols, krows, li),
            lp,
        );
        let mut out = col2im(&cols, cout, out_dims, &geom, dims);
        drop(cols);
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[cout], "conv_transpose3d bias shape");
            add_channel_bias(&mut out, b.value.data(), lo);
        }
        let value = Tensor::from_vec([cout, out_dims[0], out_dims[1], out_dims[2]], out);
        let in_shape = x.shape().to_vec();
        let w_shape = ws.to_vec();
        let backward = move |g: &Tensor, needs: &[bool]| {
            let gd = g.data();
            let gcols = if needs[0] || needs[1] {
                im2col(gd, cout, out_dims, &geom, dims)
            } else {
                Vec::new()
            };
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0f32; cin * li];
                gemm(
                    1.0,
                    MatRef::new(w.data(), cin, krows),
                    MatRef::new(&gcols, krows, li),
                    0.0,
                    MatMut::new(&mut gx, cin, li),
                    lp,
                );
                Tensor::from_vec(in_shape.clone(), gx)
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0f32; cin * krows];
                gemm(
                    1.0,
                    MatRef::new(x.data(), cin, li),
                    MatRef::new(&gcols, krows, li).t(),
                    0.0,
                    MatMut::new(&mut gw, cin, krows),
                    lp,
                );
                Tensor::from_vec(w_shape.clone(), gw)
            });
            let mut grads = vec![gx, gw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| channel_sums(gd, cout, lo)));
            }
            grads
        };
        match bias {
            Some(b) => self.tape.record(value, &[self, weight, b], backward),
            None => self.tape.record(value, &[self, weight], backward),
        }
    }

    /// Max pooling over `[C, D, H, W]`; padded cells never win.
    pub fn max_pool3d(&self, geom: ConvGeom) -> Var<'t> {
        let x = self.value_arc();
        let c = x.shape()[0];
        let dims = spatial(x.shape());
        let out_dims = geom.conv_out(dims);
        let l: usize = out_dims.iter().product();
        let vol: usize = dims.iter().product();
        let mut out = vec![f32::NEG_INFINITY; c * l];
        let mut argmax = vec![usize::MAX; c * l];
        for ch in 0..c {
            for od in 0..out_dims[0] {
                for oh in 0..out_dims[1] {
                    for ow in 0..out_dims[2] {
                        let o = ch * l + (od * out_dims[1] + oh) * out_dims[2] + ow;
                        for kd in 0..geom.kernel[0] {
                            let id = (od * geom.stride[0] + kd) as isize - geom.pad[0] as isize;
                            if id < 0 || id >= dims[0] as isize {
                                continue;
                            }
                            for kh in 0..geom.kernel[1] {
                                let ih = (oh * geom.stride[1] + kh) as isize - geom.pad[1] as isize;
                                if ih < 0 || ih >= dims[1] as isize {
                                    continue;
                                }
                                for kw in 0..geom.kernel[2] {
                                    let iw = (ow * geom.stride[2] + kw) as isize - geom.pad[2] as isize;
                                    if iw < 0 || iw >= dims[2] as isize {
                                        continue;
                                    }
                                    let i = ch * vol + (id as usize * dims[1] + ih as usize) * dims[2] + iw as usize;
                                    if x.data()[i] > out[o] || argmax[o] == usize::MAX {
                                        out[o] = x.data()[i];
                                        argmax[o] = i;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.tape.record(
            Tensor::from_vec([c, out_dims[0], out_dims[1], out_dims[2]], out),
            &[self],
            move |g, _| {
                let mut gx = Tensor::zeros(in_shape);
                let gd = gx.data_mut();
                for (&i, &v) in argmax.iter().zip(g.data()) {
                    if i != usize::MAX {
                        gd[i] += v;
                    }
                }
                vec![Some(gx)]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    /// Direct-loop reference convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, geom: &ConvGeom) -> Tensor {
        let cin = x.shape()[0];
        let dims = spatial(x.shape());
        let cout = w.shape()[0];
        let od = geom.conv_out(dims);
        let mut out = Tensor::zeros([cout, od[0], od[1], od[2]]);
        let k = geom.kernel;
        for co in 0..cout {
            for a in 0..od[0] {
                for b in 0..od[1] {
                    for c in 0..od[2] {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for i in 0..k[0] {
                                for j in 0..k[1] {
                                    for l in 0..k[2] {
                                        let zd = (a * geom.stride[0] + i) as isize - geom.pad[0] as isize;
                                        let zh = (b * geom.stride[1] + j) as isize - geom.pad[1] as isize;
                                        let zw = (c * geom.stride[2] + l) as isize - geom.pad[2] as isize;
                                        if zd < 0 || zh < 0 || zw < 0 {
                                            continue;
                                        }
                                        let (zd, zh, zw) = (zd as usize, zh as usize, zw as usize);
                                        if zd >= dims[0] || zh >= dims[1] || zw >= dims[2] {
                                            continue;
                                        }
                                        let xi = ((ci * dims[0] + zd) * dims[1] + zh) * dims[2] + zw;
                                        let wi = (((co * cin + ci) * k[0] + i) * k[1] + j) * k[2] + l;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((co * od[0] + a) * od[1] + b) * od[2] + c] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], f: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|i| ((i as f32) * f).sin()).collect())
    }

    #[test]
    fn conv3d_matches_direct_loops() {
        let tape = Tape::new();
        for geom in [
            ConvGeom::cube(3, 1, 1),
            ConvGeom::cube(4, 2, 1),
            ConvGeom::cube(1, 1, 0),
        ] {
            let x = ramp(&[2, 6, 6, 6], 0.37);
            let w = ramp(&[3, 2, geom.kernel[0], geom.kernel[1], geom.kernel[2]], 0.71);
            let got = tape.constant(x.clone()).conv3d(&tape.constant(w.clone()), None, geom);
            let want = naive_conv(&x, &w, &geom);
            assert_eq!(got.shape(), want.shape());
            assert!(got.value().max_abs_diff(&want) < 1e-4);
        }
    }

    #[test]
    fn transposed_conv_doubles_side_for_k4_s2_p1() {
        let g = ConvGeom::cube(4, 2, 1);
        assert_eq!(g.transposed_out([4, 4, 4]), [8, 8, 8]);
        assert_eq!(g.transposed_out([8, 8, 8]), [16, 16, 16]);
        assert_eq!(g.transposed_out([16, 16, 16]), [32, 32, 32]);
    }

    /// <conv(x), y> == <x, conv_transpose(y)> with shared weights.
    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        let tape = Tape::new();
        let geom = ConvGeom::cube(4, 2, 1);
        let x = ramp(&[3, 8, 8, 8], 0.13);
        let y = ramp(&[2, 4, 4, 4], 0.29);
        // conv weight [Cout=2, Cin=3, k..]; transposed weight [Cin=2, Cout=3, k..] is the same buffer
        // reinterpreted, since conv_transpose3d expects [in, out, ...] with in = conv's out.
        let w = ramp(&[2, 3, 4, 4, 4], 0.53);
        let cx = tape.constant(x.clone()).conv3d(&tape.constant(w.clone()), None, geom);
        let ty = tape
            .constant(y.clone())
            .conv_transpose3d(&tape.constant(w.clone()), None, geom);
        let lhs: f32 = cx.value().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.data().iter().zip(ty.value().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let tape = Tape::new();
        let x = Tensor::from_vec([1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, -1.0]);
        let y = tape.constant(x).max_pool3d(ConvGeom::planar(2, 2, 0));
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.value().data(), &[5.0, 9.0]);
    }
}
