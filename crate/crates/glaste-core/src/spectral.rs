//! Real 2-D FFT and the Fourier-domain convolution residual block.
//!
//! The forward transform is unnormalized; the inverse carries the 1/(H*W)
//! factor, so `irfft2(rfft2(x)) == x`. Extents are restricted to powers of
//! two and handled by a radix-2 Cooley-Tukey kernel. A spectrum tensor packs
//! the non-redundant half spectrum as [N, 2C, H, W/2+1] with all real parts
//! in channels 0..C and all imaginary parts in channels C..2C; that channel
//! order is part of the checkpoint contract.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// Half-spectrum of a real image batch, layout [N, 2C, H, W/2+1].
#[derive(Clone)]
pub struct Spectrum<T> {
    tensor: Tensor<T>,
    src_w: usize,
}

impl<T: Scalar> Spectrum<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn src_width(&self) -> usize {
        self.src_w
    }

    /// Wrap a tensor already in spectrum layout (e.g. after a frequency-domain
    /// convolution). The width extent must equal floor(src_w/2)+1.
    pub fn from_tensor(tensor: Tensor<T>, src_w: usize) -> Result<Self> {
        let (_, c2, _, ws) = tensor.dims4()?;
        if c2 % 2 != 0 {
            return Err(Error::dim(format!(
                "spectrum channel extent {c2} must be even (real/imag pairs)"
            )));
        }
        if ws != src_w / 2 + 1 {
            return Err(Error::dim(format!(
                "spectrum width {ws} inconsistent with source width {src_w}"
            )));
        }
        Ok(Spectrum { tensor, src_w })
    }
}

fn is_pow2(x: usize) -> bool {
    x >= 1 && x & (x - 1) == 0
}

/// In-place radix-2 complex FFT over (re, im); `inverse` flips the twiddle
/// sign but applies no normalization.
fn fft_radix2(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    debug_assert!(is_pow2(n));
    if n <= 1 {
        return;
    }
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr, vi) = (
                    re[i + k + len / 2] * cr - im[i + k + len / 2] * ci,
                    re[i + k + len / 2] * ci + im[i + k + len / 2] * cr,
                );
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// Full complex 2-D FFT of one H x W plane.
fn fft2_plane(re: &mut [f64], im: &mut [f64], h: usize, w: usize, inverse: bool) {
    for y in 0..h {
        fft_radix2(&mut re[y * w..][..w], &mut im[y * w..][..w], inverse);
    }
    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col_re[y] = re[y * w + x];
            col_im[y] = im[y * w + x];
        }
        fft_radix2(&mut col_re, &mut col_im, inverse);
        for y in 0..h {
            re[y * w + x] = col_re[y];
            im[y * w + x] = col_im[y];
        }
    }
}

/// Forward half-spectrum DFT of a real plane; returns (re, im) of size
/// h * (w/2+1), unnormalized.
fn rfft2_plane(src: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = src.to_vec();
    let mut im = vec![0.0; h * w];
    fft2_plane(&mut re, &mut im, h, w, false);
    let ws = w / 2 + 1;
    let mut out_re = vec![0.0; h * ws];
    let mut out_im = vec![0.0; h * ws];
    for y in 0..h {
        for x in 0..ws {
            out_re[y * ws + x] = re[y * w + x];
            out_im[y * ws + x] = im[y * w + x];
        }
    }
    (out_re, out_im)
}

/// Rebuild the full spectrum from a stored half spectrum. Columns 1..w/2-1
/// are mirrored with conjugation; columns 0 and w/2 are taken as stored.
fn mirror_full(re_h: &[f64], im_h: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let ws = w / 2 + 1;
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ws {
            re[y * w + x] = re_h[y * ws + x];
            im[y * w + x] = im_h[y * ws + x];
        }
        for x in ws..w {
            let my = (h - y) % h;
            let mx = w - x;
            re[y * w + x] = re_h[my * ws + mx];
            im[y * w + x] = -im_h[my * ws + mx];
        }
    }
    (re, im)
}

/// Inverse transform of a half spectrum to a real plane with 1/(h*w)
/// normalization; the imaginary residue is discarded.
fn irfft2_plane(re_h: &[f64], im_h: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (mut re, mut im) = mirror_full(re_h, im_h, h, w);
    fft2_plane(&mut re, &mut im, h, w, true);
    let norm = 1.0 / (h * w) as f64;
    re.iter().map(|&v| v * norm).collect()
}

fn check_pow2(h: usize, w: usize) -> Result<()> {
    if !is_pow2(h) || !is_pow2(w) {
        return Err(Error::UnsupportedSize(format!(
            "FFT extents must be powers of two, got {h}x{w}"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// Per-channel real FFT; output packs real parts then imaginary parts.
    pub fn rfft2(&mut self, x: &Tensor<T>) -> Result<Spectrum<T>> {
        let (n, c, h, w) = x.dims4()?;
        check_pow2(h, w)?;
        let ws = w / 2 + 1;
        let plane = h * w;
        let splane = h * ws;
        let mut data = vec![T::zero(); n * 2 * c * splane];
        for ni in 0..n {
            for ci in 0..c {
                let src: Vec<f64> = x.data()[(ni * c + ci) * plane..][..plane]
                    .iter()
                    .map(|&v| v.f64())
                    .collect();
                let (re, im) = rfft2_plane(&src, h, w);
                let re_off = ((ni * 2 * c) + ci) * splane;
                let im_off = ((ni * 2 * c) + c + ci) * splane;
                for i in 0..splane {
                    data[re_off + i] = T::of(re[i]);
                    data[im_off + i] = T::of(im[i]);
                }
            }
        }
        let parents = vec![self.parent_id(x)];
        let tensor = self.emit(
            data,
            vec![n, 2 * c, h, ws],
            parents,
            Box::new(move |dy| {
                // Adjoint of the half-spectrum DFT: place the incoming
                // gradient in the half spectrum with mirror bins zero, run an
                // unnormalized inverse FFT, keep the real part.
                let mut dx = vec![T::zero(); n * c * plane];
                for ni in 0..n {
                    for ci in 0..c {
                        let re_off = ((ni * 2 * c) + ci) * splane;
                        let im_off = ((ni * 2 * c) + c + ci) * splane;
                        let mut re = vec![0.0; plane];
                        let mut im = vec![0.0; plane];
                        for y in 0..h {
                            for xn in 0..ws {
                                re[y * w + xn] = dy[re_off + y * ws + xn].f64();
                                im[y * w + xn] = dy[im_off + y * ws + xn].f64();
                            }
                        }
                        fft2_plane(&mut re, &mut im, h, w, true);
                        let dst = &mut dx[(ni * c + ci) * plane..][..plane];
                        for (d, &r) in dst.iter_mut().zip(&re) {
                            *d = T::of(r);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        );
        Spectrum::from_tensor(tensor, w)
    }

    /// Inverse real FFT back to [N,C,H,out_w].
    pub fn irfft2(&mut self, spec: &Spectrum<T>, out_w: usize) -> Result<Tensor<T>> {
        let (n, c2, h, ws) = spec.tensor.dims4()?;
        let c = c2 / 2;
        if ws != out_w / 2 + 1 {
            return Err(Error::dim(format!(
                "irfft2: spectrum width {ws} inconsistent with out_w {out_w}"
            )));
        }
        check_pow2(h, out_w)?;
        let w = out_w;
        let plane = h * w;
        let splane = h * ws;
        let sd = spec.tensor.data();
        let mut data = vec![T::zero(); n * c * plane];
        for ni in 0..n {
            for ci in 0..c {
                let re_off = ((ni * 2 * c) + ci) * splane;
                let im_off = ((ni * 2 * c) + c + ci) * splane;
                let re: Vec<f64> = sd[re_off..][..splane].iter().map(|&v| v.f64()).collect();
                let im: Vec<f64> = sd[im_off..][..splane].iter().map(|&v| v.f64()).collect();
                let y = irfft2_plane(&re, &im, h, w);
                let dst = &mut data[(ni * c + ci) * plane..][..plane];
                for (d, &v) in dst.iter_mut().zip(&y) {
                    *d = T::of(v);
                }
            }
        }
        let parents = vec![self.parent_id(&spec.tensor)];
        Ok(self.emit(
            data,
            vec![n, c, h, w],
            parents,
            Box::new(move |dy| {
                // Adjoint: forward-transform the incoming gradient; middle
                // columns are double-counted by the conjugate mirror, edge
                // columns are not.
                let norm = 1.0 / plane as f64;
                let mut dspec = vec![T::zero(); n * 2 * c * splane];
                for ni in 0..n {
                    for ci in 0..c {
                        let g: Vec<f64> = dy[(ni * c + ci) * plane..][..plane]
                            .iter()
                            .map(|&v| v.f64())
                            .collect();
                        let (re, im) = rfft2_plane(&g, h, w);
                        let re_off = ((ni * 2 * c) + ci) * splane;
                        let im_off = ((ni * 2 * c) + c + ci) * splane;
                        for y in 0..h {
                            for xn in 0..ws {
                                let weight = if xn == 0 || xn == w / 2 { 1.0 } else { 2.0 };
                                dspec[re_off + y * ws + xn] =
                                    T::of(re[y * ws + xn] * weight * norm);
                                dspec[im_off + y * ws + xn] =
                                    T::of(im[y * ws + xn] * weight * norm);
                            }
                        }
                    }
                }
                vec![Some(dspec)]
            }),
        ))
    }
}

/// Learnable weights of one Fourier-domain convolution block: a pointwise
/// convolution over the 2C spectrum channels plus an activation choice.
#[derive(Clone)]
pub struct FfcWeights<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub identity_activation: bool,
}

impl<T: Scalar> FfcWeights<T> {
    /// Random-initialized weights for `c` spatial channels (2c spectrum
    /// channels), leaky-ReLU activation.
    pub fn init<R: rand::Rng>(rng: &mut R, c: usize) -> Self {
        let fan_in = 2 * c;
        let std = (2.0 / fan_in as f64).sqrt();
        FfcWeights {
            weight: Tensor::randn(rng, vec![2 * c, 2 * c, 1, 1], std),
            bias: Tensor::zeros(vec![2 * c]),
            identity_activation: false,
        }
    }

    /// Channel-identity spectral convolution with zero bias and identity
    /// activation: the block becomes a pure FFT round trip.
    pub fn identity(c: usize) -> Self {
        let mut w = vec![T::zero(); 2 * c * 2 * c];
        for i in 0..2 * c {
            w[i * 2 * c + i] = T::one();
        }
        FfcWeights {
            weight: Tensor::from_vec(w, vec![2 * c, 2 * c, 1, 1]),
            bias: Tensor::zeros(vec![2 * c]),
            identity_activation: true,
        }
    }

    /// All-zero spectral convolution (used to test the residual path).
    pub fn zeroed(c: usize) -> Self {
        FfcWeights {
            weight: Tensor::zeros(vec![2 * c, 2 * c, 1, 1]),
            bias: Tensor::zeros(vec![2 * c]),
            identity_activation: false,
        }
    }
}

/// y = irfft2(act(conv1x1(rfft2(x)))): a convolution whose receptive field is
/// the whole image.
pub fn ffc_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    weights: &FfcWeights<T>,
) -> Result<Tensor<T>> {
    let (_, _, _, w) = x.dims4()?;
    let spec = tape.rfft2(x)?;
    let conv = tape.conv2d(spec.tensor(), &weights.weight, &weights.bias, 1, 0)?;
    let activated = if weights.identity_activation {
        conv
    } else {
        tape.leaky_relu(&conv, T::of(0.2))
    };
    let spec2 = Spectrum::from_tensor(activated, w)?;
    tape.irfft2(&spec2, w)
}

/// depth repetitions of x <- x + ffc_block(x).
pub fn ffc_residual_stack<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    weights: &[FfcWeights<T>],
) -> Result<Tensor<T>> {
    if weights.is_empty() {
        return Err(Error::contract("ffc_residual_stack requires depth >= 1"));
    }
    let mut cur = x.clone();
    for w in weights {
        let branch = ffc_block(tape, &cur, w)?;
        cur = tape.add(&cur, &branch)?;
    }
    Ok(cur)
}
