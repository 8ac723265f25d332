//! Elementwise, reduction, and structural operations with backward rules.

use crate::error::{Error, Result};

use super::{nchw_offset, Scalar, Tape, Tensor};

/// ln(1e-7): floor applied to log-probabilities inside GAN losses.
pub const LOG_PROB_FLOOR: f64 = -16.118_095_650_958_319;

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid_f64(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl<T: Scalar> Tape<T> {
    fn same_shape(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        Self::same_shape(a, b, "add")?;
        let data = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
        let parents = vec![self.parent_id(a), self.parent_id(b)];
        Ok(self.emit(
            data,
            a.shape().to_vec(),
            parents,
            Box::new(|dy| vec![Some(dy.to_vec()), Some(dy.to_vec())]),
        ))
    }

    pub fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        Self::same_shape(a, b, "sub")?;
        let data = a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect();
        let parents = vec![self.parent_id(a), self.parent_id(b)];
        Ok(self.emit(
            data,
            a.shape().to_vec(),
            parents,
            Box::new(|dy| {
                vec![
                    Some(dy.to_vec()),
                    Some(dy.iter().map(|&g| -g).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        Self::same_shape(a, b, "mul")?;
        let data = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
        let parents = vec![self.parent_id(a), self.parent_id(b)];
        let (ad, bd) = (a.data_arc(), b.data_arc());
        Ok(self.emit(
            data,
            a.shape().to_vec(),
            parents,
            Box::new(move |dy| {
                let da = dy.iter().zip(bd.iter()).map(|(&g, &y)| g * y).collect();
                let db = dy.iter().zip(ad.iter()).map(|(&g, &x)| g * x).collect();
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn scale(&mut self, x: &Tensor<T>, c: T) -> Tensor<T> {
        let data = x.iter().map(|&v| v * c).collect();
        let parents = vec![self.parent_id(x)];
        self.emit(
            data,
            x.shape().to_vec(),
            parents,
            Box::new(move |dy| vec![Some(dy.iter().map(|&g| g * c).collect())]),
        )
    }

    pub fn add_scalar(&mut self, x: &Tensor<T>, c: T) -> Tensor<T> {
        let data = x.iter().map(|&v| v + c).collect();
        let parents = vec![self.parent_id(x)];
        self.emit(
            data,
            x.shape().to_vec(),
            parents,
            Box::new(|dy| vec![Some(dy.to_vec())]),
        )
    }

    pub fn neg(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.scale(x, -T::one())
    }

    pub fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.leaky_relu(x, T::zero())
    }

    pub fn leaky_relu(&mut self, x: &Tensor<T>, slope: T) -> Tensor<T> {
        let data: Vec<T> = x
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect();
        let parents = vec![self.parent_id(x)];
        let xd = x.data_arc();
        self.emit(
            data,
            x.shape().to_vec(),
            parents,
            Box::new(move |dy| {
                let dx = dy
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| if v > T::zero() { g } else { g * slope })
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    pub fn tanh(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let data: Vec<T> = x.iter().map(|&v| v.tanh()).collect();
        let parents = vec![self.parent_id(x)];
        let yd = data.clone();
        self.emit(
            data,
            x.shape().to_vec(),
            parents,
            Box::new(move |dy| {
                let dx = dy
                    .iter()
                    .zip(yd.iter())
                    .map(|(&g, &y)| g * (T::one() - y * y))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let data: Vec<T> = x.iter().map(|&v| T::of(sigmoid_f64(v.f64()))).collect();
        let parents = vec![self.parent_id(x)];
        let yd = data.clone();
        self.emit(
            data,
            x.shape().to_vec(),
            parents,
            Box::new(move |dy| {
                let dx = dy
                    .iter()
                    .zip(yd.iter())
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    pub fn abs(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let data: Vec<T> = x.iter().map(|&v| v.abs()).collect();
        let parents = vec![self.parent_id(x)];
        let xd = x.data_arc();
        self.emit(
            data,
            x.shape().to_vec(),
            parents,
            Box::new(move |dy| {
                let dx = dy
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    /// log(sigmoid(x)) floored at ln(1e-7); the floor mirrors probability
    /// clamping and zeroes the gradient once saturated.
    pub fn log_sigmoid(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let floor = T::of(LOG_PROB_FLOOR);
        let raw: Vec<f64> = x.iter().map(|&v| -softplus(-v.f64())).collect();
        let data: Vec<T> = raw.iter().map(|&r| T::of(r).max(floor)).collect();
        let parents = vec![self.parent_id(x)];
        let xd = x.data_arc();
        self.emit(
            data,
            x.shape().to_vec(),
            parents,
            Box::new(move |dy| {
                let dx = dy
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| {
                        if -softplus(-v.f64()) <= LOG_PROB_FLOOR {
                            T::zero()
                        } else {
                            g * T::of(1.0 - sigmoid_f64(v.f64()))
                        }
                    })
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    /// log(1 - sigmoid(x)) floored at ln(1e-7).
    pub fn log_one_minus_sigmoid(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let floor = T::of(LOG_PROB_FLOOR);
        let data: Vec<T> = x
            .iter()
            .map(|&v| T::of(-softplus(v.f64())).max(floor))
            .collect();
        let parents = vec![self.parent_id(x)];
        let xd = x.data_arc();
        self.emit(
            data,
            x.shape().to_vec(),
            parents,
            Box::new(move |dy| {
                let dx = dy
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| {
                        if -softplus(v.f64()) <= LOG_PROB_FLOOR {
                            T::zero()
                        } else {
                            g * T::of(-sigmoid_f64(v.f64()))
                        }
                    })
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    pub fn sum_all(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let total: T = x.iter().copied().sum();
        let n = x.numel();
        let parents = vec![self.parent_id(x)];
        self.emit(
            vec![total],
            vec![1],
            parents,
            Box::new(move |dy| vec![Some(vec![dy[0]; n])]),
        )
    }

    pub fn mean_all(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.numel();
        let inv = T::one() / T::of(n as f64);
        let total: T = x.iter().copied().sum();
        let parents = vec![self.parent_id(x)];
        self.emit(
            vec![total * inv],
            vec![1],
            parents,
            Box::new(move |dy| vec![Some(vec![dy[0] * inv; n])]),
        )
    }

    /// Mean absolute value of `a - b`.
    pub fn mean_abs_diff(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.sub(a, b)?;
        let d = self.abs(&d);
        Ok(self.mean_all(&d))
    }

    /// Concatenate along the channel axis of NCHW tensors.
    pub fn concat_channels(&mut self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        assert!(!xs.is_empty());
        let (n, _, h, w) = xs[0].dims4()?;
        let mut channels = Vec::with_capacity(xs.len());
        for x in xs {
            let (xn, xc, xh, xw) = x.dims4()?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(Error::dim(format!(
                    "concat_channels: incompatible shapes {:?} vs {:?}",
                    xs[0].shape(),
                    x.shape()
                )));
            }
            channels.push(xc);
        }
        let c_total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = vec![T::zero(); n * c_total * plane];
        for ni in 0..n {
            let mut c_base = 0;
            for (x, &cx) in xs.iter().zip(&channels) {
                let src = &x.data()[nchw_offset(cx, h, w, ni, 0)..][..cx * plane];
                let dst_off = nchw_offset(c_total, h, w, ni, c_base);
                data[dst_off..dst_off + cx * plane].copy_from_slice(src);
                c_base += cx;
            }
        }
        let parents: Vec<_> = xs.iter().map(|x| self.parent_id(x)).collect();
        let chans = channels.clone();
        Ok(self.emit(
            data,
            vec![n, c_total, h, w],
            parents,
            Box::new(move |dy| {
                let mut out = Vec::with_capacity(chans.len());
                let mut c_base = 0;
                for &cx in &chans {
                    let mut dx = vec![T::zero(); n * cx * plane];
                    for ni in 0..n {
                        let src_off = nchw_offset(c_total, h, w, ni, c_base);
                        let dst_off = nchw_offset(cx, h, w, ni, 0);
                        dx[dst_off..dst_off + cx * plane]
                            .copy_from_slice(&dy[src_off..src_off + cx * plane]);
                    }
                    out.push(Some(dx));
                    c_base += cx;
                }
                out
            }),
        ))
    }

    /// Concatenate along the batch axis; all inputs share the trailing shape.
    pub fn concat_batch(&mut self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        assert!(!xs.is_empty());
        let tail = &xs[0].shape()[1..];
        let item: usize = tail.iter().product();
        let mut ns = Vec::with_capacity(xs.len());
        for x in xs {
            if &x.shape()[1..] != tail {
                return Err(Error::dim(format!(
                    "concat_batch: trailing shapes differ: {:?} vs {:?}",
                    xs[0].shape(),
                    x.shape()
                )));
            }
            ns.push(x.shape()[0]);
        }
        let n_total: usize = ns.iter().sum();
        let mut data = Vec::with_capacity(n_total * item);
        for x in xs {
            data.extend_from_slice(x.data());
        }
        let mut shape = vec![n_total];
        shape.extend_from_slice(tail);
        let parents: Vec<_> = xs.iter().map(|x| self.parent_id(x)).collect();
        let sizes: Vec<usize> = ns.iter().map(|&n| n * item).collect();
        Ok(self.emit(
            data,
            shape,
            parents,
            Box::new(move |dy| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for &sz in &sizes {
                    out.push(Some(dy[off..off + sz].to_vec()));
                    off += sz;
                }
                out
            }),
        ))
    }

    /// Nearest-neighbour 2x upsampling of NCHW tensors.
    pub fn upsample_nearest2x(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![T::zero(); n * c * oh * ow];
        let xd = x.data();
        for nc in 0..n * c {
            let src = &xd[nc * h * w..][..h * w];
            let dst = &mut data[nc * oh * ow..][..oh * ow];
            for y in 0..oh {
                for xw in 0..ow {
                    dst[y * ow + xw] = src[(y / 2) * w + xw / 2];
                }
            }
        }
        let parents = vec![self.parent_id(x)];
        Ok(self.emit(
            data,
            vec![n, c, oh, ow],
            parents,
            Box::new(move |dy| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let src = &dy[nc * oh * ow..][..oh * ow];
                    let dst = &mut dx[nc * h * w..][..h * w];
                    for y in 0..oh {
                        for xw in 0..ow {
                            dst[(y / 2) * w + xw / 2] += src[y * ow + xw];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// 2x2 stride-2 average pooling; spatial extents must be even.
    pub fn avgpool2d(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::contract(format!(
                "avgpool2d requires even nonzero extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        let mut data = vec![T::zero(); n * c * oh * ow];
        let xd = x.data();
        for nc in 0..n * c {
            let src = &xd[nc * h * w..][..h * w];
            let dst = &mut data[nc * oh * ow..][..oh * ow];
            for y in 0..oh {
                for xw in 0..ow {
                    let s = src[2 * y * w + 2 * xw]
                        + src[2 * y * w + 2 * xw + 1]
                        + src[(2 * y + 1) * w + 2 * xw]
                        + src[(2 * y + 1) * w + 2 * xw + 1];
                    dst[y * ow + xw] = s * quarter;
                }
            }
        }
        let parents = vec![self.parent_id(x)];
        Ok(self.emit(
            data,
            vec![n, c, oh, ow],
            parents,
            Box::new(move |dy| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let src = &dy[nc * oh * ow..][..oh * ow];
                    let dst = &mut dx[nc * h * w..][..h * w];
                    for y in 0..oh {
                        for xw in 0..ow {
                            let g = src[y * ow + xw] * quarter;
                            dst[2 * y * w + 2 * xw] += g;
                            dst[2 * y * w + 2 * xw + 1] += g;
                            dst[(2 * y + 1) * w + 2 * xw] += g;
                            dst[(2 * y + 1) * w + 2 * xw + 1] += g;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Mean over the height axis: [N,C,H,W] -> [N,C,1,W].
    pub fn collapse_height_mean(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if h == 0 || w == 0 {
            return Err(Error::contract("collapse_height_mean: empty spatial extent"));
        }
        let inv = T::one() / T::of(h as f64);
        let mut data = vec![T::zero(); n * c * w];
        let xd = x.data();
        for nc in 0..n * c {
            let src = &xd[nc * h * w..][..h * w];
            let dst = &mut data[nc * w..][..w];
            for y in 0..h {
                for xw in 0..w {
                    dst[xw] += src[y * w + xw];
                }
            }
            for v in dst.iter_mut() {
                *v *= inv;
            }
        }
        let parents = vec![self.parent_id(x)];
        Ok(self.emit(
            data,
            vec![n, c, 1, w],
            parents,
            Box::new(move |dy| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    let src = &dy[nc * w..][..w];
                    let dst = &mut dx[nc * h * w..][..h * w];
                    for y in 0..h {
                        for xw in 0..w {
                            dst[y * w + xw] = src[xw] * inv;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Per-sample per-channel mean over H and W: [N,C,H,W] -> [N,C].
    pub fn instance_mean(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if h * w == 0 {
            return Err(Error::contract("instance_mean: empty spatial extent"));
        }
        let m = h * w;
        let inv = T::one() / T::of(m as f64);
        let xd = x.data();
        let data: Vec<T> = (0..n * c)
            .map(|nc| xd[nc * m..][..m].iter().copied().sum::<T>() * inv)
            .collect();
        let parents = vec![self.parent_id(x)];
        Ok(self.emit(
            data,
            vec![n, c],
            parents,
            Box::new(move |dy| {
                let mut dx = vec![T::zero(); n * c * m];
                for nc in 0..n * c {
                    let g = dy[nc] * inv;
                    for v in dx[nc * m..][..m].iter_mut() {
                        *v = g;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Per-sample per-channel population standard deviation: [N,C,H,W] -> [N,C].
    pub fn instance_std(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if h * w == 0 {
            return Err(Error::contract("instance_std: empty spatial extent"));
        }
        let m = h * w;
        let inv = T::one() / T::of(m as f64);
        let xd = x.data();
        let mut means = vec![T::zero(); n * c];
        let mut stds = vec![T::zero(); n * c];
        for nc in 0..n * c {
            let group = &xd[nc * m..][..m];
            let mu: T = group.iter().copied().sum::<T>() * inv;
            let var: T = group.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv;
            means[nc] = mu;
            stds[nc] = var.sqrt();
        }
        let parents = vec![self.parent_id(x)];
        let xd = x.data_arc();
        let (means_b, stds_b) = (means, stds.clone());
        Ok(self.emit(
            stds,
            vec![n, c],
            parents,
            Box::new(move |dy| {
                let mut dx = vec![T::zero(); n * c * m];
                for nc in 0..n * c {
                    let sigma = stds_b[nc];
                    if sigma <= T::zero() {
                        continue;
                    }
                    let coeff = dy[nc] * inv / sigma;
                    let mu = means_b[nc];
                    let group = &xd[nc * m..][..m];
                    for (d, &v) in dx[nc * m..][..m].iter_mut().zip(group) {
                        *d = coeff * (v - mu);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// (mean, std) per sample and channel.
    pub fn instance_stats(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((self.instance_mean(x)?, self.instance_std(x)?))
    }

    /// Fused per-channel standardization (x - mean) / (std + eps).
    pub fn instance_standardize(&mut self, x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if h * w == 0 {
            return Err(Error::contract(
                "instance_standardize: empty spatial extent",
            ));
        }
        let m = h * w;
        let inv_m = T::one() / T::of(m as f64);
        let xd = x.data();
        let mut data = vec![T::zero(); x.numel()];
        let mut means = vec![T::zero(); n * c];
        let mut sigmas = vec![T::zero(); n * c];
        for nc in 0..n * c {
            let group = &xd[nc * m..][..m];
            let mu: T = group.iter().copied().sum::<T>() * inv_m;
            let var: T = group.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_m;
            let sigma = var.sqrt();
            let denom = sigma + eps;
            means[nc] = mu;
            sigmas[nc] = sigma;
            for (o, &v) in data[nc * m..][..m].iter_mut().zip(group) {
                *o = (v - mu) / denom;
            }
        }
        let parents = vec![self.parent_id(x)];
        let xd = x.data_arc();
        Ok(self.emit(
            data,
            x.shape().to_vec(),
            parents,
            Box::new(move |dy| {
                let mut dx = vec![T::zero(); n * c * m];
                for nc in 0..n * c {
                    let mu = means[nc];
                    let sigma = sigmas[nc];
                    let denom = sigma + eps;
                    let group = &xd[nc * m..][..m];
                    let g = &dy[nc * m..][..m];
                    let g_mean: T = g.iter().copied().sum::<T>() * inv_m;
                    // sum_j g_j (x_j - mu)
                    let g_dot: T = g
                        .iter()
                        .zip(group)
                        .map(|(&gi, &xi)| gi * (xi - mu))
                        .sum();
                    let sigma_term = if sigma > T::zero() {
                        g_dot * inv_m / (sigma * denom * denom)
                    } else {
                        T::zero()
                    };
                    for ((d, &gi), &xi) in dx[nc * m..][..m].iter_mut().zip(g).zip(group) {
                        *d = (gi - g_mean) / denom - (xi - mu) * sigma_term;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// y[n,c,h,w] = x[n,c,h,w] * s[n,c] + b[n,c].
    pub fn channel_affine(
        &mut self,
        x: &Tensor<T>,
        s: &Tensor<T>,
        b: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if s.shape() != [n, c] || b.shape() != [n, c] {
            return Err(Error::dim(format!(
                "channel_affine: scale/bias must be [{n},{c}], got {:?} and {:?}",
                s.shape(),
                b.shape()
            )));
        }
        let m = h * w;
        let mut data = vec![T::zero(); x.numel()];
        for nc in 0..n * c {
            let (sv, bv) = (s.data()[nc], b.data()[nc]);
            for (o, &v) in data[nc * m..][..m].iter_mut().zip(&x.data()[nc * m..][..m]) {
                *o = v * sv + bv;
            }
        }
        let parents = vec![self.parent_id(x), self.parent_id(s), self.parent_id(b)];
        let (xd, sd) = (x.data_arc(), s.data_arc());
        Ok(self.emit(
            data,
            x.shape().to_vec(),
            parents,
            Box::new(move |dy| {
                let mut dx = vec![T::zero(); n * c * m];
                let mut ds = vec![T::zero(); n * c];
                let mut db = vec![T::zero(); n * c];
                for nc in 0..n * c {
                    let sv = sd[nc];
                    let g = &dy[nc * m..][..m];
                    let xs = &xd[nc * m..][..m];
                    for ((d, &gi), &xi) in dx[nc * m..][..m].iter_mut().zip(g).zip(xs) {
                        *d = gi * sv;
                        ds[nc] += gi * xi;
                        db[nc] += gi;
                    }
                }
                vec![Some(dx), Some(ds), Some(db)]
            }),
        ))
    }

    /// Affine map y = x W^T + b for x:[N,D], W:[O,D], b:[O].
    pub fn linear(
        &mut self,
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (n, d) = match *x.shape() {
            [n, d] => (n, d),
            _ => return Err(Error::dim(format!("linear: input rank != 2: {:?}", x.shape()))),
        };
        let (o, wd) = match *weight.shape() {
            [o, wd] => (o, wd),
            _ => {
                return Err(Error::dim(format!(
                    "linear: weight rank != 2: {:?}",
                    weight.shape()
                )))
            }
        };
        if wd != d {
            return Err(Error::dim(format!(
                "linear: input feature dim {d} != weight dim {wd}"
            )));
        }
        if bias.shape() != [o] {
            return Err(Error::dim(format!(
                "linear: bias must be [{o}], got {:?}",
                bias.shape()
            )));
        }
        let mut data = vec![T::zero(); n * o];
        for ni in 0..n {
            let xrow = &x.data()[ni * d..][..d];
            for oi in 0..o {
                let wrow = &weight.data()[oi * d..][..d];
                let dot: T = xrow.iter().zip(wrow).map(|(&a, &b)| a * b).sum();
                data[ni * o + oi] = dot + bias.data()[oi];
            }
        }
        let parents = vec![
            self.parent_id(x),
            self.parent_id(weight),
            self.parent_id(bias),
        ];
        let (xd, wgt) = (x.data_arc(), weight.data_arc());
        Ok(self.emit(
            data,
            vec![n, o],
            parents,
            Box::new(move |dy| {
                let mut dx = vec![T::zero(); n * d];
                let mut dw = vec![T::zero(); o * d];
                let mut db = vec![T::zero(); o];
                for ni in 0..n {
                    let grow = &dy[ni * o..][..o];
                    let xrow = &xd[ni * d..][..d];
                    for oi in 0..o {
                        let g = grow[oi];
                        db[oi] += g;
                        let wrow = &wgt[oi * d..][..d];
                        for k in 0..d {
                            dx[ni * d + k] += g * wrow[k];
                            dw[oi * d + k] += g * xrow[k];
                        }
                    }
                }
                vec![Some(dx), Some(dw), Some(db)]
            }),
        ))
    }

    pub fn reshape(&mut self, x: &Tensor<T>, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::dim(format!(
                "reshape: {:?} has {} elements, target {:?} has {}",
                x.shape(),
                x.numel(),
                shape,
                numel
            )));
        }
        let parents = vec![self.parent_id(x)];
        Ok(self.emit(
            x.data().to_vec(),
            shape,
            parents,
            Box::new(|dy| vec![Some(dy.to_vec())]),
        ))
    }

    /// [N,C,1,W] -> [W,N,C]: width positions become time frames.
    pub fn frames_from_map(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if h != 1 {
            return Err(Error::dim(format!(
                "frames_from_map expects collapsed height, got H={h}"
            )));
        }
        let xd = x.data();
        let mut data = vec![T::zero(); w * n * c];
        for ni in 0..n {
            for ci in 0..c {
                for wi in 0..w {
                    data[(wi * n + ni) * c + ci] = xd[(ni * c + ci) * w + wi];
                }
            }
        }
        let parents = vec![self.parent_id(x)];
        Ok(self.emit(
            data,
            vec![w, n, c],
            parents,
            Box::new(move |dy| {
                let mut dx = vec![T::zero(); n * c * w];
                for ni in 0..n {
                    for ci in 0..c {
                        for wi in 0..w {
                            dx[(ni * c + ci) * w + wi] = dy[(wi * n + ni) * c + ci];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Log-softmax over the last axis for any leading shape.
    pub fn log_softmax_last(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let k = *x
            .shape()
            .last()
            .ok_or_else(|| Error::dim("log_softmax_last on rank-0 tensor"))?;
        if k == 0 {
            return Err(Error::dim("log_softmax_last: empty last axis"));
        }
        let groups = x.numel() / k;
        let xd = x.data();
        let mut data = vec![T::zero(); x.numel()];
        for g in 0..groups {
            let row = &xd[g * k..][..k];
            let maxv = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse: T = maxv
                + T::of(
                    row.iter()
                        .map(|&v| (v - maxv).f64().exp())
                        .sum::<f64>()
                        .ln(),
                );
            for (o, &v) in data[g * k..][..k].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let parents = vec![self.parent_id(x)];
        let yd = data.clone();
        Ok(self.emit(
            data,
            x.shape().to_vec(),
            parents,
            Box::new(move |dy| {
                let mut dx = vec![T::zero(); yd.len()];
                for g in 0..groups {
                    let gy = &dy[g * k..][..k];
                    let y = &yd[g * k..][..k];
                    let gsum: T = gy.iter().copied().sum();
                    for ((d, &gi), &yi) in dx[g * k..][..k].iter_mut().zip(gy).zip(y) {
                        *d = gi - yi.exp() * gsum;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Slice along the leading (batch) axis.
    pub fn slice_batch(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        let n = *x
            .shape()
            .first()
            .ok_or_else(|| Error::dim("slice_batch on rank-0 tensor"))?;
        if start + len > n {
            return Err(Error::dim(format!(
                "slice_batch: {start}..{} out of {n} rows",
                start + len
            )));
        }
        let item: usize = x.shape()[1..].iter().product();
        let data = x.data()[start * item..(start + len) * item].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&x.shape()[1..]);
        let total = n * item;
        let parents = vec![self.parent_id(x)];
        Ok(self.emit(
            data,
            shape,
            parents,
            Box::new(move |dy| {
                let mut dx = vec![T::zero(); total];
                dx[start * item..(start + len) * item].copy_from_slice(dy);
                vec![Some(dx)]
            }),
        ))
    }

    /// Column slice of a rank-2 tensor: [N,D] -> [N,len].
    pub fn slice_cols(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        let (n, d) = match *x.shape() {
            [n, d] => (n, d),
            _ => {
                return Err(Error::dim(format!(
                    "slice_cols expects rank 2, got {:?}",
                    x.shape()
                )))
            }
        };
        if start + len > d {
            return Err(Error::dim(format!(
                "slice_cols: {start}..{} out of {d} columns",
                start + len
            )));
        }
        let xd = x.data();
        let mut data = vec![T::zero(); n * len];
        for ni in 0..n {
            data[ni * len..][..len].copy_from_slice(&xd[ni * d + start..][..len]);
        }
        let parents = vec![self.parent_id(x)];
        Ok(self.emit(
            data,
            vec![n, len],
            parents,
            Box::new(move |dy| {
                let mut dx = vec![T::zero(); n * d];
                for ni in 0..n {
                    dx[ni * d + start..][..len].copy_from_slice(&dy[ni * len..][..len]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Mean over the last axis of [N,C,P] -> [N,C].
    pub fn mean_points(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, p) = match *x.shape() {
            [n, c, p] => (n, c, p),
            _ => {
                return Err(Error::dim(format!(
                    "mean_points expects [N,C,P], got {:?}",
                    x.shape()
                )))
            }
        };
        if p == 0 {
            return Err(Error::contract("mean_points: zero points"));
        }
        let inv = T::one() / T::of(p as f64);
        let xd = x.data();
        let data: Vec<T> = (0..n * c)
            .map(|nc| xd[nc * p..][..p].iter().copied().sum::<T>() * inv)
            .collect();
        let parents = vec![self.parent_id(x)];
        Ok(self.emit(
            data,
            vec![n, c],
            parents,
            Box::new(move |dy| {
                let mut dx = vec![T::zero(); n * c * p];
                for nc in 0..n * c {
                    let g = dy[nc] * inv;
                    for v in dx[nc * p..][..p].iter_mut() {
                        *v = g;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape.to_vec())
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1.0, -2.0, 3.0], &[3]));
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn linear_matches_hand_sum() {
        let mut tape = Tape::new();
        let x = t(&[1.0, 2.0], &[1, 2]);
        let w = t(&[3.0, 4.0], &[1, 2]);
        let b = t(&[5.0], &[1]);
        let y = tape.linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[16.0]);
    }

    #[test]
    fn linear_identity_passthrough() {
        let mut tape = Tape::new();
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let w = t(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
        let b = t(&[0.0, 0.0, 0.0], &[3]);
        let y = tape.linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn linear_bias_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = t(&[0.5, -1.5, 2.0, 0.25, 1.0, -0.75], &[2, 3]);
        let w = Tensor::randn(&mut crate::rng(7), vec![4, 3], 0.5);
        let b = tape.leaf(&Tensor::zeros(vec![4]));
        let y = tape.linear(&x, &w, &b).unwrap();
        let loss = tape.sum_all(&y);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&b).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn linear_rejects_extent_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = t(&[1.0, 2.0], &[1, 2]);
        let w = t(&[1.0, 2.0, 3.0], &[1, 3]);
        let b = t(&[0.0], &[1]);
        assert!(matches!(
            tape.linear(&x, &w, &b),
            Err(crate::error::Error::Dimension(_))
        ));
    }

    #[test]
    fn instance_stats_constant_channel() {
        let mut tape = Tape::new();
        let x = Tensor::full(vec![1, 1, 3, 3], 5.0f64);
        let (mean, std) = tape.instance_stats(&x).unwrap();
        assert_eq!(mean.data(), &[5.0]);
        assert_eq!(std.data(), &[0.0]);
    }

    #[test]
    fn concat_channels_shape_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let a = Tensor::zeros(vec![2, 3, 4, 5]);
        let b = Tensor::zeros(vec![2, 5, 4, 5]);
        let y = tape.concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[2, 8, 4, 5]);
    }

    #[test]
    fn upsample_nearest_block_repeats() {
        let mut tape = Tape::new();
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let y = tape.upsample_nearest2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let expect = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut tape = Tape::new();
        let x = t(&[0.3, -1.2, 2.0, 0.0, 0.0, 0.0], &[2, 3]);
        let y = tape.log_softmax_last(&x).unwrap();
        for row in y.data().chunks(3) {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_spatial_extent_is_contract_error() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::zeros(vec![1, 2, 0, 3]);
        assert!(matches!(
            tape.instance_mean(&x),
            Err(crate::error::Error::Contract(_))
        ));
    }
}
