//! Scalar compute kernels for matmul and direct-correlation conv2d.
//!
//! All loops run in a fixed order so gradient accumulation is deterministic.

/// out = a (m×k) · b (k×n), overwriting out.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += a (m×n) · bᵀ where b is (k×n); result is m×k.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            out[i * k + p] += acc;
        }
    }
}

/// out += aᵀ · b where a is (m×k) and b is (m×n); result is k×n.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = arow[p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    /// Output extent per axis: floor((in + 2·pad − kernel) / stride) + 1.
    pub fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if kernel == 0 || stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }
}

/// Direct correlation, zero padding. out is overwritten.
pub fn conv2d(x: &[f64], wgt: &[f64], d: ConvDims, out: &mut [f64]) {
    out.fill(0.0);
    let (h, w, kh, kw) = (d.h as isize, d.w as isize, d.kh, d.kw);
    for n in 0..d.n {
        for oc in 0..d.oc {
            for oh in 0..d.oh {
                let ih0 = (oh * d.stride) as isize - d.pad as isize;
                for ow in 0..d.ow {
                    let iw0 = (ow * d.stride) as isize - d.pad as isize;
                    let mut acc = 0.0;
                    for c in 0..d.c {
                        let xbase = (n * d.c + c) * d.h * d.w;
                        let wbase = ((oc * d.c + c) * d.kh) * d.kw;
                        for r in 0..kh {
                            let ih = ih0 + r as isize;
                            if ih < 0 || ih >= h {
                                continue;
                            }
                            let xrow = xbase + ih as usize * d.w;
                            let wrow = wbase + r * kw;
                            for s in 0..kw {
                                let iw = iw0 + s as isize;
                                if iw < 0 || iw >= w {
                                    continue;
                                }
                                acc += x[xrow + iw as usize] * wgt[wrow + s];
                            }
                        }
                    }
                    out[((n * d.oc + oc) * d.oh + oh) * d.ow + ow] = acc;
                }
            }
        }
    }
}

/// gx += correlation backward through the input.
pub fn conv2d_input_grad(wgt: &[f64], gout: &[f64], d: ConvDims, gx: &mut [f64]) {
    let (h, w) = (d.h as isize, d.w as isize);
    for n in 0..d.n {
        for oc in 0..d.oc {
            for oh in 0..d.oh {
                let ih0 = (oh * d.stride) as isize - d.pad as isize;
                for ow in 0..d.ow {
                    let iw0 = (ow * d.stride) as isize - d.pad as isize;
                    let g = gout[((n * d.oc + oc) * d.oh + oh) * d.ow + ow];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..d.c {
                        let xbase = (n * d.c + c) * d.h * d.w;
                        let wbase = ((oc * d.c + c) * d.kh) * d.kw;
                        for r in 0..d.kh {
                            let ih = ih0 + r as isize;
                            if ih < 0 || ih >= h {
                                continue;
                            }
                            let xrow = xbase + ih as usize * d.w;
                            let wrow = wbase + r * d.kw;
                            for s in 0..d.kw {
                                let iw = iw0 + s as isize;
                                if iw < 0 || iw >= w {
                                    continue;
                                }
                                gx[xrow + iw as usize] += wgt[wrow + s] * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// gw += correlation backward through the kernel.
pub fn conv2d_weight_grad(x: &[f64], gout: &[f64], d: ConvDims, gw: &mut [f64]) {
    let (h, w) = (d.h as isize, d.w as isize);
    for n in 0..d.n {
        for oc in 0..d.oc {
            for oh in 0..d.oh {
                let ih0 = (oh * d.stride) as isize - d.pad as isize;
                for ow in 0..d.ow {
                    let iw0 = (ow * d.stride) as isize - d.pad as isize;
                    let g = gout[((n * d.oc + oc) * d.oh + oh) * d.ow + ow];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..d.c {
                        let xbase = (n * d.c + c) * d.h * d.w;
                        let wbase = ((oc * d.c + c) * d.kh) * d.kw;
                        for r in 0..d.kh {
                            let ih = ih0 + r as isize;
                            if ih < 0 || ih >= h {
                                continue;
                            }
                            let xrow = xbase + ih as usize * d.w;
                            let wrow = wbase + r * d.kw;
                            for s in 0..d.kw {
                                let iw = iw0 + s as isize;
                                if iw < 0 || iw >= w {
                                    continue;
                                }
                                gw[wrow + s] += x[xrow + iw as usize] * g;
                            }
                        }
                    }
                }
            }
        }
    }
}
