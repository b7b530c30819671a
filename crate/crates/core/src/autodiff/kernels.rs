//! Dense kernels shared by the convolution primitives.

/// Volume geometry for "same"-padded, stride-1 convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: [usize; 3],
}

impl ConvGeom {
    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn volume(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Rows of the unfolded input matrix.
    pub fn patch(&self) -> usize {
        self.c_in * self.taps()
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1]
    }
}

/// `c = beta * c + a · b` for an `m×k` by `k×n` product with explicit strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: c out of bounds");
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(last(m, k, rsa, csa) < a.len(), "gemm: a out of bounds");
    assert!(last(k, n, rsb, csb) < b.len(), "gemm: b out of bounds");
    // SAFETY: every index touched is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn shifted_range(len: usize, pad: usize, tap: usize) -> (isize, usize, usize) {
    // Output positions o with 0 <= o + tap - pad < len.
    let shift = tap as isize - pad as isize;
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (shift, lo.min(hi), hi)
}

/// Unfolds one sample `[c_in][D][H][W]` into `[c_in·taps][D·H·W]`.
pub fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let [kd, kh, kw] = g.kernel;
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    let (d, h, w) = (g.depth, g.height, g.width);
    let vol = g.volume();
    let mut row = 0;
    for ci in 0..g.c_in {
        let xc = &x[ci * vol..(ci + 1) * vol];
        for a in 0..kd {
            let (sd, dlo, dhi) = shifted_range(d, pd, a);
            for b in 0..kh {
                let (sh, hlo, hhi) = shifted_range(h, ph, b);
                for c in 0..kw {
                    let (sw, wlo, whi) = shifted_range(w, pw, c);
                    let dst = &mut cols[row * vol..(row + 1) * vol];
                    dst.fill(0.0);
                    for od in dlo..dhi {
                        let id = (od as isize + sd) as usize;
                        for oh in hlo..hhi {
                            let ih = (oh as isize + sh) as usize;
                            let o = (od * h + oh) * w;
                            let i = (id * h + ih) * w;
                            let iw0 = (wlo as isize + sw) as usize;
                            dst[o + wlo..o + whi].copy_from_slice(&xc[i + iw0..i + iw0 + (whi - wlo)]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `cols` back into `dx`.
pub fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let [kd, kh, kw] = g.kernel;
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    let (d, h, w) = (g.depth, g.height, g.width);
    let vol = g.volume();
    let mut row = 0;
    for ci in 0..g.c_in {
        let xc = &mut dx[ci * vol..(ci + 1) * vol];
        for a in 0..kd {
            let (sd, dlo, dhi) = shifted_range(d, pd, a);
            for b in 0..kh {
                let (sh, hlo, hhi) = shifted_range(h, ph, b);
                for c in 0..kw {
                    let (sw, wlo, whi) = shifted_range(w, pw, c);
                    let src = &cols[row * vol..(row + 1) * vol];
                    for od in dlo..dhi {
                        let id = (od as isize + sd) as usize;
                        for oh in hlo..hhi {
                            let ih = (oh as isize + sh) as usize;
                            let o = (od * h + oh) * w;
                            let i = (id * h + ih) * w;
                            let iw0 = (wlo as isize + sw) as usize;
                            for (dst, s) in xc[i + iw0..i + iw0 + (whi - wlo)]
                                .iter_mut()
                                .zip(&src[o + wlo..o + whi])
                            {
                                *dst += s;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward pass of one sample. `per_level` selects depth-unshared weights
/// laid out `[D][c_out][patch]` with bias `[D][c_out]`; otherwise weights
/// are `[c_out][patch]` with bias `[c_out]`.
pub fn conv_forward(
    g: &ConvGeom,
    per_level: bool,
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    cols: &mut Vec<f64>,
    out: &mut [f64],
) {
    let patch = g.patch();
    let vol = g.volume();
    let unfolded: &[f64] = if g.is_pointwise() {
        x
    } else {
        cols.resize(patch * vol, 0.0);
        im2col(g, x, cols);
        cols
    };
    if per_level {
        let plane = g.plane();
        let wlen = g.c_out * patch;
        for p in 0..g.depth {
            gemm(
                g.c_out,
                patch,
                plane,
                &weight[p * wlen..(p + 1) * wlen],
                (patch, 1),
                &unfolded[p * plane..],
                (vol, 1),
                0.0,
                &mut out[p * plane..],
                (vol, 1),
            );
            if let Some(b) = bias {
                for co in 0..g.c_out {
                    let bv = b[p * g.c_out + co];
                    out[co * vol + p * plane..co * vol + (p + 1) * plane]
                        .iter_mut()
                        .for_each(|v| *v += bv);
                }
            }
        }
    } else {
        gemm(
            g.c_out,
            patch,
            vol,
            weight,
            (patch, 1),
            unfolded,
            (vol, 1),
            0.0,
            out,
            (vol, 1),
        );
        if let Some(b) = bias {
            for (co, bv) in b.iter().enumerate() {
                out[co * vol..(co + 1) * vol].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

/// Backward pass of one sample; accumulates into whichever gradient buffers
/// are provided.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    g: &ConvGeom,
    per_level: bool,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dweight: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
    cols: &mut Vec<f64>,
) {
    let patch = g.patch();
    let vol = g.volume();
    let plane = g.plane();
    if let Some(db) = dbias {
        for co in 0..g.c_out {
            let row = &dout[co * vol..(co + 1) * vol];
            if per_level {
                for p in 0..g.depth {
                    db[p * g.c_out + co] += row[p * plane..(p + 1) * plane].iter().sum::<f64>();
                }
            } else {
                db[co] += row.iter().sum::<f64>();
            }
        }
    }
    if let Some(dw) = dweight {
        let unfolded: &[f64] = if g.is_pointwise() {
            x
        } else {
            cols.resize(patch * vol, 0.0);
            im2col(g, x, cols);
            cols
        };
        if per_level {
            let wlen = g.c_out * patch;
            for p in 0..g.depth {
                gemm(
                    g.c_out,
                    plane,
                    patch,
                    &dout[p * plane..],
                    (vol, 1),
                    &unfolded[p * plane..],
                    (1, vol),
                    1.0,
                    &mut dw[p * wlen..(p + 1) * wlen],
                    (patch, 1),
                );
            }
        } else {
            gemm(
                g.c_out,
                vol,
                patch,
                dout,
                (vol, 1),
                unfolded,
                (1, vol),
                1.0,
                dw,
                (patch, 1),
            );
        }
    }
    if let Some(dx) = dx {
        let mut dcols = vec![0.0; patch * vol];
        if per_level {
            let wlen = g.c_out * patch;
            for p in 0..g.depth {
                gemm(
                    patch,
                    g.c_out,
                    plane,
                    &weight[p * wlen..(p + 1) * wlen],
                    (1, patch),
                    &dout[p * plane..],
                    (vol, 1),
                    0.0,
                    &mut dcols[p * plane..],
                    (vol, 1),
                );
            }
        } else {
            gemm(
                patch,
                g.c_out,
                vol,
                weight,
                (1, patch),
                dout,
                (vol, 1),
                0.0,
                &mut dcols,
                (vol, 1),
            );
        }
        if g.is_pointwise() {
            dx.iter_mut().zip(&dcols).for_each(|(a, b)| *a += b);
        } else {
            col2im(g, &dcols, dx);
        }
    }
}
