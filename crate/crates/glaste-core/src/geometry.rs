//! Rotated boxes, normalized-coordinate affine maps, and the sampling
//! operators built on them: bilinear point sampling (border clamp), affine
//! grid sampling (zero padding), rotated-region average pooling, and rotated
//! patch extraction.
//!
//! Coordinate conventions, shared by every operator here:
//! * pixel (x, y) maps to normalized (u, v) in [-1, 1]^2 corner-aligned:
//!   u = 2x/(W-1) - 1, so identity warps are exact at pixel centers;
//! * positive box angles rotate the +x axis toward +y in pixel coordinates;
//! * all coordinate arithmetic runs in f64, whatever the tensor dtype.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// Oriented rectangle (cx, cy, w, h, theta) locating an edit region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Radians, normalized to (-pi, pi] by [`RotatedBox::new`].
    pub theta: f64,
}

impl RotatedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Self {
        RotatedBox {
            cx,
            cy,
            w,
            h,
            theta: normalize_angle(theta),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::contract(format!(
                "rotated box extents must be positive, got {}x{}",
                self.w, self.h
            )));
        }
        if ![self.cx, self.cy, self.w, self.h, self.theta]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::contract("rotated box has non-finite fields"));
        }
        Ok(())
    }

    /// Box expressed in feature-map units for a backbone of the given stride.
    pub fn scaled(&self, stride: f64) -> RotatedBox {
        RotatedBox {
            cx: self.cx / stride,
            cy: self.cy / stride,
            w: self.w / stride,
            h: self.h / stride,
            theta: self.theta,
        }
    }

    /// Corner positions in pixel coordinates, order (-,-), (+,-), (+,+), (-,+)
    /// in the box frame.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.theta.sin_cos();
        let half = [
            (-self.w / 2.0, -self.h / 2.0),
            (self.w / 2.0, -self.h / 2.0),
            (self.w / 2.0, self.h / 2.0),
            (-self.w / 2.0, self.h / 2.0),
        ];
        half.map(|(u, v)| (self.cx + u * c - v * s, self.cy + u * s + v * c))
    }

    /// True if the pixel center (x, y) lies inside the box.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }
}

pub fn normalize_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = theta % two_pi;
    if t <= -std::f64::consts::PI {
        t += two_pi;
    } else if t > std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

/// Row-major 3x3 homogeneous matrix over pixel/normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub fn identity() -> Self {
        Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn translate(tx: f64, ty: f64) -> Self {
        Mat3([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    pub fn rotate(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Mat3([[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn mul(&self, rhs: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        Mat3(out)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        (
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        )
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Mat3> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::Singular(format!("matrix determinant {det}")));
        }
        let m = &self.0;
        let inv_det = 1.0 / det;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
        };
        Ok(Mat3([
            [
                cof(1, 2, 1, 2) * inv_det,
                -cof(0, 2, 1, 2) * inv_det,
                cof(0, 1, 1, 2) * inv_det,
            ],
            [
                -cof(1, 2, 0, 2) * inv_det,
                cof(0, 2, 0, 2) * inv_det,
                -cof(0, 1, 0, 2) * inv_det,
            ],
            [
                cof(1, 2, 0, 1) * inv_det,
                -cof(0, 2, 0, 1) * inv_det,
                cof(0, 1, 0, 1) * inv_det,
            ],
        ]))
    }
}

/// 2x3 affine parameters mapping output normalized coordinates to source
/// normalized coordinates (an inverse warp).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub m: [[f64; 3]; 2],
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn from_mat3(m: &Mat3) -> Result<Self> {
        let bottom = m.0[2];
        if (bottom[0].abs() + bottom[1].abs()).abs() > 1e-9 || (bottom[2] - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "matrix is not affine: bottom row {bottom:?}"
            )));
        }
        if !m.0.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Singular("affine entries not finite".into()));
        }
        Ok(AffineParams {
            m: [m.0[0], m.0[1]],
        })
    }

    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        (
            self.m[0][0] * u + self.m[0][1] * v + self.m[0][2],
            self.m[1][0] * u + self.m[1][1] * v + self.m[1][2],
        )
    }

    /// Linear 2x2 part, used for the aspect-ratio analysis.
    pub fn linear(&self) -> [[f64; 2]; 2] {
        [
            [self.m[0][0], self.m[0][1]],
            [self.m[1][0], self.m[1][1]],
        ]
    }
}

/// Pixel -> normalized [-1,1]^2 map (corner-aligned): u = 2x/(W-1) - 1.
pub fn norm_matrix(width: usize, height: usize) -> Result<Mat3> {
    if width < 2 || height < 2 {
        return Err(Error::contract(format!(
            "norm_matrix requires extents >= 2, got {width}x{height}"
        )));
    }
    Ok(Mat3([
        [2.0 / (width as f64 - 1.0), 0.0, -1.0],
        [0.0, 2.0 / (height as f64 - 1.0), -1.0],
        [0.0, 0.0, 1.0],
    ]))
}

/// Foreground-pixel -> canvas-pixel map: translate to the box center after
/// rotating and applying the uniform scale s = min(w_box/fg_w, h_box/fg_h),
/// which fits the foreground inside the box with its aspect ratio unchanged.
pub fn box_to_m(bx: &RotatedBox, fg_w: usize, fg_h: usize) -> Result<Mat3> {
    if fg_w < 1 || fg_h < 1 {
        return Err(Error::contract(format!(
            "box_to_m requires foreground extents >= 1, got {fg_w}x{fg_h}"
        )));
    }
    let s = (bx.w / fg_w as f64).min(bx.h / fg_h as f64);
    let center = Mat3::translate(-((fg_w as f64 - 1.0) / 2.0), -((fg_h as f64 - 1.0) / 2.0));
    Ok(Mat3::translate(bx.cx, bx.cy)
        .mul(&Mat3::rotate(bx.theta))
        .mul(&Mat3::scale(s, s))
        .mul(&center))
}

/// Affine parameters theta: composing theta with normalized canvas
/// coordinates yields normalized foreground coordinates of the pre-image.
/// theta = T1 * M^-1 * T2^-1 with T1 normalizing foreground pixels and T2
/// normalizing canvas pixels.
pub fn theta_from_box(
    bx: &RotatedBox,
    fg_size: (usize, usize),
    canvas_size: (usize, usize),
) -> Result<AffineParams> {
    theta_from_box_stored(bx, fg_size, fg_size, canvas_size)
}

/// Variant for foregrounds stored in a larger buffer: `fg_size` is the
/// extent whose frame maps onto the box, `stored_size` the actual tensor
/// extents used to normalize sampling coordinates. Both are (w, h).
pub fn theta_from_box_stored(
    bx: &RotatedBox,
    fg_size: (usize, usize),
    stored_size: (usize, usize),
    canvas_size: (usize, usize),
) -> Result<AffineParams> {
    let m = box_to_m(bx, fg_size.0, fg_size.1)?;
    let m_inv = m
        .inverse()
        .map_err(|_| Error::Singular(format!("box {bx:?} yields a singular map")))?;
    let t1 = norm_matrix(stored_size.0, stored_size.1)?;
    let t2 = norm_matrix(canvas_size.0, canvas_size.1)?;
    let theta = t1.mul(&m_inv).mul(&t2.inverse()?);
    AffineParams::from_mat3(&theta)
}

/// Cell-center sampling grid of a rotated rectangle: grid_h x grid_w points
/// in row-major order.
pub fn box_grid_points(bx: &RotatedBox, grid_h: usize, grid_w: usize) -> Vec<(f64, f64)> {
    let (s, c) = bx.theta.sin_cos();
    let mut pts = Vec::with_capacity(grid_h * grid_w);
    for gy in 0..grid_h {
        let v = ((gy as f64 + 0.5) / grid_h as f64 - 0.5) * bx.h;
        for gx in 0..grid_w {
            let u = ((gx as f64 + 0.5) / grid_w as f64 - 0.5) * bx.w;
            pts.push((bx.cx + u * c - v * s, bx.cy + u * s + v * c));
        }
    }
    pts
}

fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

impl<T: Scalar> Tape<T> {
    /// Bilinear sampling of `fm` at continuous pixel coordinates, one point
    /// list shared across the batch or one per sample. Out-of-bounds
    /// coordinates clamp to the border. Output is [N, C, P].
    pub fn bilinear_sample(
        &mut self,
        fm: &Tensor<T>,
        pts: &[Vec<(f64, f64)>],
    ) -> Result<Tensor<T>> {
        let (n, c, h, w) = fm.dims4()?;
        if pts.len() != n && pts.len() != 1 {
            return Err(Error::contract(format!(
                "bilinear_sample: {} point lists for batch of {n}",
                pts.len()
            )));
        }
        let p = pts[0].len();
        if pts.iter().any(|l| l.len() != p) {
            return Err(Error::contract(
                "bilinear_sample: point lists must share a length",
            ));
        }
        for list in pts {
            if list.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
                return Err(Error::contract("bilinear_sample: non-finite point"));
            }
        }

        // Per (sample, point): 4 taps (index, weight) into one plane.
        let mut taps: Vec<[(usize, f64); 4]> = Vec::with_capacity(n * p);
        for ni in 0..n {
            let list = &pts[if pts.len() == 1 { 0 } else { ni }];
            for &(x, y) in list {
                let xc = clamp(x, 0.0, w as f64 - 1.0);
                let yc = clamp(y, 0.0, h as f64 - 1.0);
                let x0 = xc.floor().min(w as f64 - 1.0);
                let y0 = yc.floor().min(h as f64 - 1.0);
                let fx = xc - x0;
                let fy = yc - y0;
                let (x0, y0) = (x0 as usize, y0 as usize);
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                taps.push([
                    (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
                    (y0 * w + x1, fx * (1.0 - fy)),
                    (y1 * w + x0, (1.0 - fx) * fy),
                    (y1 * w + x1, fx * fy),
                ]);
            }
        }

        let fmd = fm.data();
        let mut data = vec![T::zero(); n * c * p];
        for ni in 0..n {
            for ci in 0..c {
                let plane = &fmd[(ni * c + ci) * h * w..][..h * w];
                let dst = &mut data[(ni * c + ci) * p..][..p];
                for (pi, d) in dst.iter_mut().enumerate() {
                    let tap = &taps[ni * p + pi];
                    let mut acc = 0.0;
                    for &(idx, wgt) in tap {
                        acc += plane[idx].f64() * wgt;
                    }
                    *d = T::of(acc);
                }
            }
        }
        let parents = vec![self.parent_id(fm)];
        Ok(self.emit(
            data,
            vec![n, c, p],
            parents,
            Box::new(move |dy| {
                let mut dfm = vec![T::zero(); n * c * h * w];
                for ni in 0..n {
                    for ci in 0..c {
                        let plane = &mut dfm[(ni * c + ci) * h * w..][..h * w];
                        let g = &dy[(ni * c + ci) * p..][..p];
                        for (pi, &gv) in g.iter().enumerate() {
                            for &(idx, wgt) in &taps[ni * p + pi] {
                                plane[idx] += gv * T::of(wgt);
                            }
                        }
                    }
                }
                vec![Some(dfm)]
            }),
        ))
    }

    /// Inverse-warp resampling: each output pixel's normalized coordinate is
    /// mapped through theta and bilinearly sampled from `src` with zero
    /// padding outside the source frame. One theta shared or one per sample.
    pub fn affine_grid_sample(
        &mut self,
        src: &Tensor<T>,
        thetas: &[AffineParams],
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor<T>> {
        let (n, c, hs, ws) = src.dims4()?;
        if thetas.len() != n && thetas.len() != 1 {
            return Err(Error::contract(format!(
                "affine_grid_sample: {} thetas for batch of {n}",
                thetas.len()
            )));
        }
        if out_h < 2 || out_w < 2 || hs < 2 || ws < 2 {
            return Err(Error::contract(
                "affine_grid_sample requires extents >= 2",
            ));
        }
        let p = out_h * out_w;

        // Up to 4 valid taps per output pixel; invalid taps carry weight 0.
        let mut taps: Vec<[(usize, f64); 4]> = Vec::with_capacity(n * p);
        for ni in 0..n {
            let th = &thetas[if thetas.len() == 1 { 0 } else { ni }];
            for oy in 0..out_h {
                let v = 2.0 * oy as f64 / (out_h as f64 - 1.0) - 1.0;
                for ox in 0..out_w {
                    let u = 2.0 * ox as f64 / (out_w as f64 - 1.0) - 1.0;
                    let (us, vs) = th.apply(u, v);
                    let mut xs = (us + 1.0) * (ws as f64 - 1.0) / 2.0;
                    let mut ys = (vs + 1.0) * (hs as f64 - 1.0) / 2.0;
                    // Snap sub-ulp residue so grid-aligned warps stay exact.
                    if (xs - xs.round()).abs() < 1e-9 {
                        xs = xs.round();
                    }
                    if (ys - ys.round()).abs() < 1e-9 {
                        ys = ys.round();
                    }
                    let x0 = xs.floor();
                    let y0 = ys.floor();
                    let fx = xs - x0;
                    let fy = ys - y0;
                    let mut tap = [(0usize, 0.0f64); 4];
                    let mut k = 0;
                    for (dxi, dyi, wgt) in [
                        (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
                        (1.0, 0.0, fx * (1.0 - fy)),
                        (0.0, 1.0, (1.0 - fx) * fy),
                        (1.0, 1.0, fx * fy),
                    ] {
                        let xi = x0 + dxi;
                        let yi = y0 + dyi;
                        if xi >= 0.0 && yi >= 0.0 && xi < ws as f64 && yi < hs as f64 && wgt != 0.0
                        {
                            tap[k] = (yi as usize * ws + xi as usize, wgt);
                            k += 1;
                        }
                    }
                    taps.push(tap);
                }
            }
        }

        let sd = src.data();
        let mut data = vec![T::zero(); n * c * p];
        for ni in 0..n {
            for ci in 0..c {
                let plane = &sd[(ni * c + ci) * hs * ws..][..hs * ws];
                let dst = &mut data[(ni * c + ci) * p..][..p];
                for (pi, d) in dst.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for &(idx, wgt) in &taps[ni * p + pi] {
                        if wgt != 0.0 {
                            acc += plane[idx].f64() * wgt;
                        }
                    }
                    *d = T::of(acc);
                }
            }
        }
        let parents = vec![self.parent_id(src)];
        Ok(self.emit(
            data,
            vec![n, c, out_h, out_w],
            parents,
            Box::new(move |dy| {
                let mut dsrc = vec![T::zero(); n * c * hs * ws];
                for ni in 0..n {
                    for ci in 0..c {
                        let plane = &mut dsrc[(ni * c + ci) * hs * ws..][..hs * ws];
                        let g = &dy[(ni * c + ci) * p..][..p];
                        for (pi, &gv) in g.iter().enumerate() {
                            for &(idx, wgt) in &taps[ni * p + pi] {
                                if wgt != 0.0 {
                                    plane[idx] += gv * T::of(wgt);
                                }
                            }
                        }
                    }
                }
                vec![Some(dsrc)]
            }),
        ))
    }

    /// Rotated RoIAlign: bilinear samples on a grid_h x grid_w cell-center
    /// grid inside each (feature-map-scaled) box, average-pooled to [N, C].
    pub fn rotated_roi_align(
        &mut self,
        fm: &Tensor<T>,
        boxes: &[RotatedBox],
        grid_h: usize,
        grid_w: usize,
    ) -> Result<Tensor<T>> {
        if grid_h < 1 || grid_w < 1 {
            return Err(Error::contract("rotated_roi_align: empty grid"));
        }
        for b in boxes {
            b.validate()?;
        }
        let pts: Vec<Vec<(f64, f64)>> = boxes
            .iter()
            .map(|b| box_grid_points(b, grid_h, grid_w))
            .collect();
        let sampled = self.bilinear_sample(fm, &pts)?;
        self.mean_points(&sampled)
    }

    /// Rotated patch extraction: per-pixel resampling of the box interior to
    /// a fixed out_h x out_w image (no pooling); differentiable w.r.t. `img`.
    pub fn extract_rotated_patch(
        &mut self,
        img: &Tensor<T>,
        boxes: &[RotatedBox],
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor<T>> {
        let (n, c, _, _) = img.dims4()?;
        for b in boxes {
            b.validate()?;
        }
        let pts: Vec<Vec<(f64, f64)>> = boxes
            .iter()
            .map(|b| box_grid_points(b, out_h, out_w))
            .collect();
        let sampled = self.bilinear_sample(img, &pts)?;
        self.reshape(&sampled, vec![n, c, out_h, out_w])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_matrix_corner_mapping() {
        let t = norm_matrix(7, 5).unwrap();
        assert_eq!(t.apply(0.0, 0.0), (-1.0, -1.0));
        assert_eq!(t.apply(6.0, 4.0), (1.0, 1.0));
        assert_eq!(t.apply(3.0, 2.0), (0.0, 0.0));
    }

    #[test]
    fn norm_matrix_matches_formula_on_random_pixel() {
        let t = norm_matrix(7, 5).unwrap();
        let (x, y) = (4.0, 1.0);
        let (u, v) = t.apply(x, y);
        assert_eq!(u, 2.0 * x / 6.0 - 1.0);
        assert_eq!(v, 2.0 * y / 4.0 - 1.0);
    }

    #[test]
    fn norm_matrix_rejects_degenerate_extent() {
        assert!(matches!(norm_matrix(1, 5), Err(Error::Contract(_))));
    }

    #[test]
    fn box_to_m_identity_case() {
        let bx = RotatedBox::new(4.5, 4.5, 10.0, 10.0, 0.0);
        let m = box_to_m(&bx, 10, 10).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((m.0[i][j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn box_to_m_width_limited_scale() {
        let bx = RotatedBox::new(50.0, 50.0, 20.0, 40.0, 0.0);
        let m = box_to_m(&bx, 10, 10).unwrap();
        // s = min(20/10, 40/10) = 2; foreground occupies the middle band.
        assert!((m.0[0][0] - 2.0).abs() < 1e-12);
        assert!((m.0[1][1] - 2.0).abs() < 1e-12);
        let (x0, y0) = m.apply(0.0, 0.0);
        let (x1, y1) = m.apply(9.0, 9.0);
        assert!((x0 - (50.0 - 9.0)).abs() < 1e-9 && (x1 - 59.0).abs() < 1e-9);
        assert!((y0 - 41.0).abs() < 1e-9 && (y1 - 59.0).abs() < 1e-9);
        assert!(y0 > 50.0 - 20.0 && y1 < 50.0 + 20.0);
    }

    #[test]
    fn box_to_m_quarter_turn_corners_match_oracle() {
        let bx = RotatedBox::new(30.0, 20.0, 24.0, 12.0, std::f64::consts::FRAC_PI_2);
        let (fg_w, fg_h) = (8usize, 4usize);
        let m = box_to_m(&bx, fg_w, fg_h).unwrap();
        let s = (bx.w / fg_w as f64).min(bx.h / fg_h as f64);
        let (ccx, ccy) = ((fg_w as f64 - 1.0) / 2.0, (fg_h as f64 - 1.0) / 2.0);
        for corner in [(0.0, 0.0), (7.0, 0.0), (7.0, 3.0), (0.0, 3.0)] {
            let got = m.apply(corner.0, corner.1);
            // Independent corner construction: center, rotate the scaled
            // offset by hand for theta = pi/2 (x,y) -> (-y, x).
            let (ox, oy) = ((corner.0 - ccx) * s, (corner.1 - ccy) * s);
            let expect = (bx.cx - oy, bx.cy + ox);
            assert!((got.0 - expect.0).abs() < 1e-9);
            assert!((got.1 - expect.1).abs() < 1e-9);
        }
    }

    #[test]
    fn theta_identity_for_full_canvas_box() {
        let (w, h) = (32usize, 32usize);
        let bx = RotatedBox::new((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w as f64, h as f64, 0.0);
        let th = theta_from_box(&bx, (w, h), (w, h)).unwrap();
        let id = AffineParams::identity();
        for i in 0..2 {
            for j in 0..3 {
                assert!((th.m[i][j] - id.m[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn theta_maps_mapped_fg_corners_to_unit_square() {
        let mut rng = crate::rng(5);
        use rand::Rng;
        for _ in 0..100 {
            let bx = RotatedBox::new(
                rng.gen_range(10.0..50.0),
                rng.gen_range(10.0..50.0),
                rng.gen_range(4.0..30.0),
                rng.gen_range(4.0..30.0),
                rng.gen_range(-3.0..3.0),
            );
            let (fg_w, fg_h) = (rng.gen_range(2..40usize), rng.gen_range(2..40usize));
            let canvas = (64usize, 64usize);
            let m = box_to_m(&bx, fg_w, fg_h).unwrap();
            let t2 = norm_matrix(canvas.0, canvas.1).unwrap();
            let th = theta_from_box(&bx, (fg_w, fg_h), canvas).unwrap();
            for (cx, cy, eu, ev) in [
                (0.0, 0.0, -1.0, -1.0),
                (fg_w as f64 - 1.0, 0.0, 1.0, -1.0),
                (fg_w as f64 - 1.0, fg_h as f64 - 1.0, 1.0, 1.0),
                (0.0, fg_h as f64 - 1.0, -1.0, 1.0),
            ] {
                let canvas_px = m.apply(cx, cy);
                let canvas_norm = t2.apply(canvas_px.0, canvas_px.1);
                let (u, v) = th.apply(canvas_norm.0, canvas_norm.1);
                assert!((u - eu).abs() < 1e-6, "u={u} expect {eu}");
                assert!((v - ev).abs() < 1e-6, "v={v} expect {ev}");
            }
        }
    }

    #[test]
    fn degenerate_box_is_singular() {
        let bx = RotatedBox::new(10.0, 10.0, 0.0, 5.0, 0.0);
        assert!(matches!(
            theta_from_box(&bx, (8, 8), (32, 32)),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn grid_sample_identity_is_exact() {
        let mut rng = crate::rng(6);
        let mut tape = Tape::new();
        let x = Tensor::<f64>::randn(&mut rng, vec![1, 2, 5, 7], 1.0);
        let y = tape
            .affine_grid_sample(&x, &[AffineParams::identity()], 5, 7)
            .unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn grid_sample_everything_outside_gives_zero() {
        let mut rng = crate::rng(7);
        let mut tape = Tape::new();
        let x = Tensor::<f64>::randn(&mut rng, vec![1, 1, 4, 4], 1.0);
        let th = AffineParams {
            m: [[1.0, 0.0, 10.0], [0.0, 1.0, 10.0]],
        };
        let y = tape.affine_grid_sample(&x, &[th], 4, 4).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_sample_one_pixel_shift_matches_naive_warp() {
        let mut rng = crate::rng(8);
        let mut tape = Tape::new();
        let (h, w) = (6usize, 9usize);
        let x = Tensor::<f64>::randn(&mut rng, vec![1, 1, h, w], 1.0);
        // Shift output right by one source pixel: u_src = u_out - 2/(W-1)*1... in
        // normalized units a one-pixel translation is 2/(W-1).
        let dx = 2.0 / (w as f64 - 1.0);
        let th = AffineParams {
            m: [[1.0, 0.0, -dx], [0.0, 1.0, 0.0]],
        };
        let y = tape.affine_grid_sample(&x, &[th], h, w).unwrap();
        // Naive reference: out[.., ox] = src[.., ox-1], zero at ox = 0.
        for oy in 0..h {
            for ox in 0..w {
                let expect = if ox == 0 { 0.0 } else { x.at4(0, 0, oy, ox - 1) };
                let got = y.at4(0, 0, oy, ox);
                assert!((got - expect).abs() < 1e-9, "({oy},{ox}) {got} vs {expect}");
            }
        }
    }

    #[test]
    fn bilinear_integer_points_exact() {
        let mut rng = crate::rng(9);
        let mut tape = Tape::new();
        let x = Tensor::<f64>::randn(&mut rng, vec![1, 3, 5, 5], 1.0);
        let y = tape
            .bilinear_sample(&x, &[vec![(2.0, 3.0), (0.0, 0.0), (4.0, 4.0)]])
            .unwrap();
        for ci in 0..3 {
            assert_eq!(y.data()[ci * 3], x.at4(0, ci, 3, 2));
            assert_eq!(y.data()[ci * 3 + 1], x.at4(0, ci, 0, 0));
            assert_eq!(y.data()[ci * 3 + 2], x.at4(0, ci, 4, 4));
        }
    }

    #[test]
    fn bilinear_midpoint_average() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![0.0, 0.0, 2.0, 4.0], vec![1, 1, 2, 2]);
        let y = tape.bilinear_sample(&x, &[vec![(0.5, 0.5)]]).unwrap();
        assert_eq!(y.data(), &[1.5]);
    }

    #[test]
    fn bilinear_matches_closed_form_on_random_points() {
        let mut rng = crate::rng(10);
        use rand::Rng;
        let mut tape = Tape::new();
        let (h, w) = (6usize, 8usize);
        let x = Tensor::<f64>::randn(&mut rng, vec![1, 1, h, w], 1.0);
        let pts: Vec<(f64, f64)> = (0..50)
            .map(|_| (rng.gen_range(-1.0..w as f64), rng.gen_range(-1.0..h as f64)))
            .collect();
        let y = tape.bilinear_sample(&x, &[pts.clone()]).unwrap();
        for (pi, &(px, py)) in pts.iter().enumerate() {
            // Independent closed-form evaluation with border clamping.
            let xc = px.clamp(0.0, w as f64 - 1.0);
            let yc = py.clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
            let expect = x.at4(0, 0, y0, x0) * (1.0 - fx) * (1.0 - fy)
                + x.at4(0, 0, y0, x1) * fx * (1.0 - fy)
                + x.at4(0, 0, y1, x0) * (1.0 - fx) * fy
                + x.at4(0, 0, y1, x1) * fx * fy;
            assert!((y.data()[pi] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn roi_align_whole_map_equals_global_average() {
        let mut rng = crate::rng(11);
        let mut tape = Tape::new();
        let (h, w) = (4usize, 6usize);
        let x = Tensor::<f64>::randn(&mut rng, vec![1, 2, h, w], 1.0);
        let bx = RotatedBox::new(
            (w as f64 - 1.0) / 2.0,
            (h as f64 - 1.0) / 2.0,
            w as f64,
            h as f64,
            0.0,
        );
        let z = tape.rotated_roi_align(&x, &[bx], h, w).unwrap();
        for ci in 0..2 {
            let mean: f64 =
                x.data()[ci * h * w..][..h * w].iter().sum::<f64>() / (h * w) as f64;
            assert!((z.data()[ci] - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn roi_align_output_length_is_channel_count() {
        let mut rng = crate::rng(12);
        let mut tape = Tape::new();
        let x = Tensor::<f64>::randn(&mut rng, vec![1, 5, 8, 8], 1.0);
        for bx in [
            RotatedBox::new(4.0, 4.0, 1.5, 3.0, 0.3),
            RotatedBox::new(3.0, 5.0, 6.0, 2.0, -1.0),
        ] {
            let z = tape.rotated_roi_align(&x, &[bx], 7, 7).unwrap();
            assert_eq!(z.shape(), &[1, 5]);
        }
    }

    #[test]
    fn roi_align_matches_explicit_point_set_oracle() {
        let mut rng = crate::rng(13);
        let mut tape = Tape::new();
        let (h, w) = (9usize, 9usize);
        let x = Tensor::<f64>::randn(&mut rng, vec![1, 1, h, w], 1.0);
        let bx = RotatedBox::new(4.0, 4.0, 4.0, 4.0, 0.0);
        let z = tape.rotated_roi_align(&x, &[bx], 4, 4).unwrap();
        // Explicitly construct the 16 cell centers and sample each.
        let mut acc = 0.0;
        for gy in 0..4 {
            for gx in 0..4 {
                let px = 4.0 + ((gx as f64 + 0.5) / 4.0 - 0.5) * 4.0;
                let py = 4.0 + ((gy as f64 + 0.5) / 4.0 - 0.5) * 4.0;
                let (x0, y0) = (px.floor() as usize, py.floor() as usize);
                let (fx, fy) = (px - x0 as f64, py - y0 as f64);
                acc += x.at4(0, 0, y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + x.at4(0, 0, y0, x0 + 1) * fx * (1.0 - fy)
                    + x.at4(0, 0, y0 + 1, x0) * (1.0 - fx) * fy
                    + x.at4(0, 0, y0 + 1, x0 + 1) * fx * fy;
            }
        }
        acc /= 16.0;
        assert!((z.data()[0] - acc).abs() < 1e-6);
    }

    #[test]
    fn roi_align_rejects_degenerate_box() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::zeros(vec![1, 1, 4, 4]);
        let bx = RotatedBox::new(2.0, 2.0, 0.0, 2.0, 0.0);
        assert!(matches!(
            tape.rotated_roi_align(&x, &[bx], 2, 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn rotation_consistency_quarter_turn() {
        // Rotating the map content and the box by pi/2 leaves pooling
        // unchanged.
        let mut rng = crate::rng(14);
        let mut tape = Tape::new();
        let n = 8usize;
        let x = Tensor::<f64>::randn(&mut rng, vec![1, 1, n, n], 1.0);
        // Rotate content by +pi/2 in this crate's convention:
        // out(xo, yo) = in(x = yo, y = n-1-xo).
        let mut rot = vec![0.0; n * n];
        for y in 0..n {
            for xw in 0..n {
                rot[y * n + xw] = x.at4(0, 0, n - 1 - xw, y);
            }
        }
        let xr = Tensor::from_vec(rot, vec![1, 1, n, n]);
        let bx = RotatedBox::new(3.2, 4.1, 3.0, 2.0, 0.4);
        // The same physical region in the rotated frame.
        let bxr = RotatedBox::new(
            n as f64 - 1.0 - bx.cy,
            bx.cx,
            bx.w,
            bx.h,
            bx.theta + std::f64::consts::FRAC_PI_2,
        );
        let z0 = tape.rotated_roi_align(&x, &[bx], 5, 5).unwrap();
        let z1 = tape.rotated_roi_align(&xr, &[bxr], 5, 5).unwrap();
        assert!((z0.data()[0] - z1.data()[0]).abs() < 1e-5);
    }

    #[test]
    fn extract_patch_exact_crop() {
        let mut rng = crate::rng(15);
        let mut tape = Tape::new();
        let x = Tensor::<f64>::randn(&mut rng, vec![1, 1, 8, 8], 1.0);
        // Box of 3x2 pixels starting at (x0,y0) = (2,4).
        let bx = RotatedBox::new(2.0 + 1.0, 4.0 + 0.5, 3.0, 2.0, 0.0);
        let p = tape.extract_rotated_patch(&x, &[bx], 2, 3).unwrap();
        for oy in 0..2 {
            for ox in 0..3 {
                assert!((p.at4(0, 0, oy, ox) - x.at4(0, 0, 4 + oy, 2 + ox)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn angle_normalization() {
        let b = RotatedBox::new(0.0, 0.0, 1.0, 1.0, 3.0 * std::f64::consts::PI);
        assert!((b.theta - std::f64::consts::PI).abs() < 1e-12);
        let b = RotatedBox::new(0.0, 0.0, 1.0, 1.0, -3.5 * std::f64::consts::PI);
        assert!(b.theta > -std::f64::consts::PI && b.theta <= std::f64::consts::PI);
    }
}
