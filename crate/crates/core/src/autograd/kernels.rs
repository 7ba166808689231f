//! Raw convolution / matmul kernels on flat buffers.
//!
//! Dense convolutions go through a batched im2col and a single GEMM; grouped
//! (including depthwise) convolutions use a direct loop.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass buffers whose extents cover every strided access:
    // a spans m*k, b spans k*n and c spans m*n elements under the given strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// [`gemm`] with products and sums carried in f64 and rounded once at the end.
///
/// Products of two f32 values are exact in f64, so the result no longer
/// depends on the order of the reduction (up to f64 rounding). Forward passes
/// use it so that permuting input channels leaves outputs bit-identical, which
/// keeps downstream fake-quantization from flipping codes.
#[allow(clippy::too_many_arguments)]
pub fn gemm_f64(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let (a64, b64) = (widen(a), widen(b));
    let mut c64 = if beta == 0.0 { vec![0.0f64; c.len()] } else { widen(c) };
    // SAFETY: same extents as the f32 buffers, which the caller guarantees
    // cover every strided access.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a64.as_ptr(),
            rsa,
            csa,
            b64.as_ptr(),
            rsb,
            csb,
            beta as f64,
            c64.as_mut_ptr(),
            rsc,
            csc,
        );
    }
    c.iter_mut().zip(&c64).for_each(|(o, &v)| *o = v as f32);
}

/// cols: [c_in*k*k, n*oh*ow]
fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let p = g.oh * g.ow;
    let np = g.n * p;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for b in 0..g.n {
                    let plane = &x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let out = &mut dst[b * p + oy * g.ow..][..g.ow];
                        if iy < 0 || iy >= g.h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *o = if ix < 0 || ix >= g.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p = g.oh * g.ow;
    let np = g.n * p;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * np..(row + 1) * np];
                for b in 0..g.n {
                    let plane = &mut dx[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * g.w..][..g.w];
                        let s = &src[b * p + oy * g.ow..][..g.ow];
                        for (ox, v) in s.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                line[ix as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// [n, c, p] <-> [c, n*p]
fn nchw_to_cnp(x: &[f32], n: usize, c: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * p + b * p..][..p].copy_from_slice(&x[(b * c + ch) * p..][..p]);
        }
    }
    out
}

fn cnp_to_nchw(x: &[f32], n: usize, c: usize, p: usize, out: &mut [f32]) {
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..][..p].copy_from_slice(&x[ch * n * p + b * p..][..p]);
        }
    }
}

pub fn conv2d_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let p = g.oh * g.ow;
    let mut y = vec![0.0; g.n * g.c_out * p];
    if g.groups == 1 {
        let ckk = g.c_in * g.k * g.k;
        let np = g.n * p;
        let mut out = vec![0.0; g.c_out * np];
        if g.is_pointwise() {
            let cols = nchw_to_cnp(x, g.n, g.c_in, p);
            gemm_f64(g.c_out, ckk, np, w, ckk as isize, 1, &cols, np as isize, 1, 0.0, &mut out, np as isize, 1);
        } else {
            let mut cols = vec![0.0; ckk * np];
            im2col(x, g, &mut cols);
            gemm_f64(g.c_out, ckk, np, w, ckk as isize, 1, &cols, np as isize, 1, 0.0, &mut out, np as isize, 1);
        }
        cnp_to_nchw(&out, g.n, g.c_out, p, &mut y);
    } else {
        grouped_forward(x, w, g, &mut y);
    }
    if let Some(b) = bias {
        for n in 0..g.n {
            for (c, &bv) in b.iter().enumerate() {
                y[(n * g.c_out + c) * p..][..p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

fn grouped_forward(x: &[f32], w: &[f32], g: &ConvGeom, y: &mut [f32]) {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let kk = g.k * g.k;
    for n in 0..g.n {
        for oc in 0..g.c_out {
            let grp = oc / cout_g;
            let out = &mut y[(n * g.c_out + oc) * g.oh * g.ow..][..g.oh * g.ow];
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let plane = &x[(n * g.c_in + ic) * g.h * g.w..][..g.h * g.w];
                let kern = &w[(oc * cin_g + icg) * kk..][..kk];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = kern[ky * g.k + kx];
                        for oy in 0..g.oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let row = &plane[iy as usize * g.w..][..g.w];
                            let orow = &mut out[oy * g.ow..][..g.ow];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    *o += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Returns (dx, dw, db). `dx` is only computed when `need_dx`.
pub fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Vec<f32>) {
    let p = g.oh * g.ow;
    let mut db = vec![0.0; g.c_out];
    for n in 0..g.n {
        for (c, d) in db.iter_mut().enumerate() {
            *d += dy[(n * g.c_out + c) * p..][..p].iter().sum::<f32>();
        }
    }
    if g.groups != 1 {
        let (dx, dw) = grouped_backward(x, w, dy, g, need_dx, need_dw);
        return (dx, dw, db);
    }
    let ckk = g.c_in * g.k * g.k;
    let np = g.n * p;
    let dy_cnp = nchw_to_cnp(dy, g.n, g.c_out, p);
    let cols = if need_dw {
        Some(if g.is_pointwise() {
            nchw_to_cnp(x, g.n, g.c_in, p)
        } else {
            let mut cols = vec![0.0; ckk * np];
            im2col(x, g, &mut cols);
            cols
        })
    } else {
        None
    };
    let dw = cols.map(|cols| {
        let mut dw = vec![0.0; g.c_out * ckk];
        // dW[O, CKK] = dY[O, NP] * cols^T
        gemm(g.c_out, np, ckk, &dy_cnp, np as isize, 1, &cols, 1, np as isize, 0.0, &mut dw, ckk as isize, 1);
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; ckk * np];
        // dcols[CKK, NP] = W^T * dY
        gemm(ckk, g.c_out, np, w, 1, ckk as isize, &dy_cnp, np as isize, 1, 0.0, &mut dcols, np as isize, 1);
        let mut dx = vec![0.0; g.n * g.c_in * g.h * g.w];
        if g.is_pointwise() {
            cnp_to_nchw(&dcols, g.n, g.c_in, p, &mut dx);
        } else {
            col2im(&dcols, g, &mut dx);
        }
        dx
    });
    (dx, dw, db)
}

fn grouped_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let kk = g.k * g.k;
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    for n in 0..g.n {
        for oc in 0..g.c_out {
            let grp = oc / cout_g;
            let dout = &dy[(n * g.c_out + oc) * g.oh * g.ow..][..g.oh * g.ow];
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let xoff = (n * g.c_in + ic) * g.h * g.w;
                let woff = (oc * cin_g + icg) * kk;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = w[woff + ky * g.k + kx];
                        let mut acc = 0.0f32;
                        for oy in 0..g.oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let base = xoff + iy as usize * g.w;
                            for ox in 0..g.ow {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let d = dout[oy * g.ow + ox];
                                acc += d * x[base + ix as usize];
                                if let Some(dx) = dx.as_mut() {
                                    dx[base + ix as usize] += d * wv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[woff + ky * g.k + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}
