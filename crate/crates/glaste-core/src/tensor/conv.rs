//! 2-D cross-correlation (conv2d) forward and backward.
//!
//! Implementation notes: the input is copied once into a zero-padded buffer
//! per sample so the accumulation loops carry no bounds logic, and samples
//! are processed in parallel. Every output element is produced by exactly one
//! task with a fixed inner summation order, so results are bit-identical
//! regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{Scalar, Tape, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvSpec {
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            kh: k,
            kw: k,
            sh: stride,
            sw: stride,
            ph: pad,
            pw: pad,
        }
    }

    fn out_extent(ext: usize, k: usize, s: usize, p: usize) -> Result<usize> {
        let padded = ext + 2 * p;
        if padded < k {
            return Err(Error::dim(format!(
                "conv2d: kernel {k} exceeds padded extent {padded}"
            )));
        }
        if (padded - k) % s != 0 {
            return Err(Error::dim(format!(
                "conv2d: (extent {ext} + 2*{p} - {k}) not divisible by stride {s}"
            )));
        }
        Ok((padded - k) / s + 1)
    }
}

fn pad_sample<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
) -> Vec<T> {
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let mut out = vec![T::zero(); c * hp * wp];
    for ci in 0..c {
        for y in 0..h {
            let dst = (ci * hp + y + ph) * wp + pw;
            let s = (ci * h + y) * w;
            out[dst..dst + w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    /// Standard square-kernel convolution per the library contract.
    pub fn conv2d(
        &mut self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let k = match *weight.shape() {
            [_, _, kh, _] => kh,
            _ => {
                return Err(Error::dim(format!(
                    "conv2d: weight rank != 4: {:?}",
                    weight.shape()
                )))
            }
        };
        self.conv2d_spec(input, weight, bias, ConvSpec::square(k, stride, pad))
    }

    /// General rectangular-kernel convolution.
    pub fn conv2d_spec(
        &mut self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        spec: ConvSpec,
    ) -> Result<Tensor<T>> {
        let (n, c, h, w) = input.dims4()?;
        let (k_out, wc, kh, kw) = weight.dims4()?;
        if wc != c {
            return Err(Error::dim(format!(
                "conv2d: input channels {c} != weight channels {wc}"
            )));
        }
        if (kh, kw) != (spec.kh, spec.kw) {
            return Err(Error::dim(format!(
                "conv2d: weight kernel {kh}x{kw} != spec {}x{}",
                spec.kh, spec.kw
            )));
        }
        if bias.shape() != [k_out] {
            return Err(Error::dim(format!(
                "conv2d: bias must be [{k_out}], got {:?}",
                bias.shape()
            )));
        }
        if spec.sh == 0 || spec.sw == 0 {
            return Err(Error::contract("conv2d: zero stride"));
        }
        let oh = ConvSpec::out_extent(h, kh, spec.sh, spec.ph)?;
        let ow = ConvSpec::out_extent(w, kw, spec.sw, spec.pw)?;

        let data = conv_forward(
            input.data(),
            weight.data(),
            bias.data(),
            n,
            c,
            h,
            w,
            k_out,
            oh,
            ow,
            spec,
        );

        let parents = vec![
            self.parent_id(input),
            self.parent_id(weight),
            self.parent_id(bias),
        ];
        let xd = input.data_arc();
        let wd = weight.data_arc();
        Ok(self.emit(
            data,
            vec![n, k_out, oh, ow],
            parents,
            Box::new(move |dy| {
                let (dx, dw, db) = conv_backward(dy, &xd, &wd, n, c, h, w, k_out, oh, ow, spec);
                vec![Some(dx), Some(dw), Some(db)]
            }),
        ))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Scalar>(
    x: &[T],
    wgt: &[T],
    bias: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k_out: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
) -> Vec<T> {
    let (hp, wp) = (h + 2 * spec.ph, w + 2 * spec.pw);
    let mut out = vec![T::zero(); n * k_out * oh * ow];
    out.par_chunks_mut(k_out * oh * ow)
        .enumerate()
        .for_each(|(ni, sample_out)| {
            let xpad = pad_sample(&x[ni * c * h * w..][..c * h * w], c, h, w, spec.ph, spec.pw);
            for k in 0..k_out {
                let dst = &mut sample_out[k * oh * ow..][..oh * ow];
                dst.fill(bias[k]);
                for ci in 0..c {
                    let plane = &xpad[ci * hp * wp..][..hp * wp];
                    let wbase = ((k * c + ci) * spec.kh) * spec.kw;
                    for i in 0..spec.kh {
                        for j in 0..spec.kw {
                            let alpha = wgt[wbase + i * spec.kw + j];
                            if alpha == T::zero() {
                                continue;
                            }
                            for oy in 0..oh {
                                let src_row = &plane[(oy * spec.sh + i) * wp + j..];
                                let drow = &mut dst[oy * ow..][..ow];
                                if spec.sw == 1 {
                                    for (d, &s) in drow.iter_mut().zip(&src_row[..ow]) {
                                        *d += alpha * s;
                                    }
                                } else {
                                    for (ox, d) in drow.iter_mut().enumerate() {
                                        *d += alpha * src_row[ox * spec.sw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    wgt: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k_out: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (hp, wp) = (h + 2 * spec.ph, w + 2 * spec.pw);

    // Pad every sample once; shared by the dx and dW passes.
    let mut xpad_all = vec![T::zero(); n * c * hp * wp];
    xpad_all
        .par_chunks_mut(c * hp * wp)
        .enumerate()
        .for_each(|(ni, dst)| {
            dst.copy_from_slice(&pad_sample(
                &x[ni * c * h * w..][..c * h * w],
                c,
                h,
                w,
                spec.ph,
                spec.pw,
            ));
        });

    // dL/dx: scatter into a padded buffer per (sample, channel), then crop.
    let mut dx = vec![T::zero(); n * c * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(nc, dxc)| {
        let ni = nc / c;
        let ci = nc % c;
        let mut plane = vec![T::zero(); hp * wp];
        let gy = &dy[ni * k_out * oh * ow..][..k_out * oh * ow];
        for k in 0..k_out {
            let grow_all = &gy[k * oh * ow..][..oh * ow];
            let wbase = ((k * c + ci) * spec.kh) * spec.kw;
            for i in 0..spec.kh {
                for j in 0..spec.kw {
                    let alpha = wgt[wbase + i * spec.kw + j];
                    if alpha == T::zero() {
                        continue;
                    }
                    for oy in 0..oh {
                        let base = (oy * spec.sh + i) * wp + j;
                        let grow = &grow_all[oy * ow..][..ow];
                        if spec.sw == 1 {
                            for (d, &g) in plane[base..base + ow].iter_mut().zip(grow) {
                                *d += alpha * g;
                            }
                        } else {
                            for (ox, &g) in grow.iter().enumerate() {
                                plane[base + ox * spec.sw] += alpha * g;
                            }
                        }
                    }
                }
            }
        }
        for y in 0..h {
            let src = (y + spec.ph) * wp + spec.pw;
            dxc[y * w..(y + 1) * w].copy_from_slice(&plane[src..src + w]);
        }
    });

    // dL/dW: gather per (k, ci) pair over the shared padded batch; samples
    // are summed in index order.
    let mut dw = vec![T::zero(); k_out * c * spec.kh * spec.kw];
    dw.par_chunks_mut(spec.kh * spec.kw)
        .enumerate()
        .for_each(|(kc, dwk)| {
            let k = kc / c;
            let ci = kc % c;
            for ni in 0..n {
                let plane = &xpad_all[(ni * c + ci) * hp * wp..][..hp * wp];
                let gy = &dy[(ni * k_out + k) * oh * ow..][..oh * ow];
                for i in 0..spec.kh {
                    for j in 0..spec.kw {
                        let mut acc = T::zero();
                        for oy in 0..oh {
                            let src_row = &plane[(oy * spec.sh + i) * wp + j..];
                            let grow = &gy[oy * ow..][..ow];
                            if spec.sw == 1 {
                                acc += grow
                                    .iter()
                                    .zip(&src_row[..ow])
                                    .map(|(&g, &s)| g * s)
                                    .sum::<T>();
                            } else {
                                for (ox, &g) in grow.iter().enumerate() {
                                    acc += g * src_row[ox * spec.sw];
                                }
                            }
                        }
                        dwk[i * spec.kw + j] += acc;
                    }
                }
            }
        });

    // dL/db: plain sum over batch and positions.
    let mut db = vec![T::zero(); k_out];
    for ni in 0..n {
        for k in 0..k_out {
            let gy = &dy[(ni * k_out + k) * oh * ow..][..oh * ow];
            db[k] += gy.iter().copied().sum::<T>();
        }
    }

    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct quadruple-nested-loop reference used as the conv oracle.
    pub(crate) fn conv_naive(
        x: &Tensor<f64>,
        wgt: &Tensor<f64>,
        bias: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4().unwrap();
        let (k_out, _, kh, kw) = wgt.dims4().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * k_out * oh * ow];
        for ni in 0..n {
            for k in 0..k_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.data()[k];
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        acc += x.at4(ni, ci, iy as usize, ix as usize)
                                            * wgt.at4(k, ci, i, j);
                                    }
                                }
                            }
                        }
                        out[((ni * k_out + k) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(out, vec![n, k_out, oh, ow])
    }

    #[test]
    fn identity_kernel_passthrough() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec((0..9).map(|v| v as f64).collect(), vec![1, 1, 3, 3]);
        let w = Tensor::from_vec(vec![1.0], vec![1, 1, 1, 1]);
        let b = Tensor::zeros(vec![1]);
        let y = tape.conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn hand_sum_two_by_two() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], vec![1, 1, 2, 2]);
        let w = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], vec![1, 1, 2, 2]);
        let b = Tensor::zeros(vec![1]);
        let y = tape.conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn strided_matches_naive_loop_oracle() {
        let mut rng = crate::rng(42);
        let mut tape = Tape::new();
        let x = Tensor::randn(&mut rng, vec![1, 3, 8, 8], 1.0);
        let w = Tensor::randn(&mut rng, vec![4, 3, 4, 4], 0.5);
        let b = Tensor::randn(&mut rng, vec![4], 0.5);
        let y = tape.conv2d(&x, &w, &b, 2, 1).unwrap();
        let expect = conv_naive(&x, &w, &b, 2, 1);
        assert!(y.max_abs_diff(&expect) < 1e-6, "diff {}", y.max_abs_diff(&expect));
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::zeros(vec![1, 3, 4, 4]);
        let w = Tensor::zeros(vec![2, 4, 3, 3]);
        let b = Tensor::zeros(vec![2]);
        assert!(matches!(
            tape.conv2d(&x, &w, &b, 1, 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn non_integral_output_extent_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::zeros(vec![1, 1, 5, 5]);
        let w = Tensor::zeros(vec![1, 1, 2, 2]);
        let b = Tensor::zeros(vec![1]);
        assert!(tape.conv2d(&x, &w, &b, 2, 0).is_err());
    }

    #[test]
    fn even_kernel_stride_two_chain_shape() {
        // The PatchGAN shape chain 64 -> 32 -> 16 -> 8 -> 4 -> 3.
        let mut tape = Tape::<f64>::new();
        let mut x = Tensor::zeros(vec![1, 1, 64, 64]);
        for _ in 0..4 {
            let c = x.shape()[1];
            let w = Tensor::zeros(vec![1, c, 4, 4]);
            let b = Tensor::zeros(vec![1]);
            x = tape.conv2d(&x, &w, &b, 2, 1).unwrap();
        }
        assert_eq!(&x.shape()[2..], &[4, 4]);
        let w = Tensor::zeros(vec![1, 1, 4, 4]);
        let b = Tensor::zeros(vec![1]);
        let y = tape.conv2d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(&y.shape()[2..], &[3, 3]);
    }
}
