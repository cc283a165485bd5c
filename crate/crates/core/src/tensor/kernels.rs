//! Raw slice kernels behind the differentiable ops.
//!
//! Every kernel accumulates each output element in a fixed sequential order,
//! so results are bit-identical regardless of how rayon splits the work.

use super::Real;
use rayon::prelude::*;

const PAR_FLOPS: usize = 1 << 15;

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    if n == 0 || m == 0 {
        return c;
    }
    let row = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    };
    if m * n * k >= PAR_FLOPS {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    if n == 0 || k == 0 {
        return c;
    }
    let row = |(p, c_row): (usize, &mut [T])| {
        for i in 0..m {
            let av = a[i * k + p];
            let b_row = &b[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    };
    if m * n * k >= PAR_FLOPS {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfolds one `[C×H×W]` image into `[C·k·k × Ho·Wo]` columns.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let r = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[r * p..(r + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        dst[oy * wo + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width
                        {
                            x[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let r = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[r * p..(r + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        dx[(c * g.height + iy as usize) * g.width + ix as usize] +=
                            src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Shape of a fused multi-head self-attention call over `n` sequences of
/// `len` positions with model width `width`.
#[derive(Debug, Clone, Copy)]
pub struct AttnGeom {
    pub n: usize,
    pub len: usize,
    pub width: usize,
    pub heads: usize,
}

impl AttnGeom {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Masked scaled dot-product attention.
///
/// `qkv` is `[n·len × 3·width]` with query, key and value blocks side by
/// side. Keys at positions `>= lengths[s]` are masked out. Returns the
/// `[n·len × width]` output and the attention probabilities
/// `[n × heads × len × len]`.
pub fn attention_forward<T: Real>(qkv: &[T], g: &AttnGeom, lengths: &[usize]) -> (Vec<T>, Vec<T>) {
    let (l, e, h, dh) = (g.len, g.width, g.heads, g.head_dim());
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); g.n * l * e];
    let mut probs = vec![T::zero(); g.n * h * l * l];
    out.par_chunks_mut(l * e)
        .zip(probs.par_chunks_mut(h * l * l))
        .enumerate()
        .for_each(|(s, (out_s, probs_s))| {
            let valid = lengths[s].clamp(1, l);
            let base = s * l;
            for head in 0..h {
                let qo = head * dh;
                let ko = e + head * dh;
                let vo = 2 * e + head * dh;
                let pm = &mut probs_s[head * l * l..(head + 1) * l * l];
                for t in 0..l {
                    let q = &qkv[(base + t) * 3 * e + qo..][..dh];
                    let row = &mut pm[t * l..(t + 1) * l];
                    let mut max = T::neg_infinity();
                    for u in 0..valid {
                        let k = &qkv[(base + u) * 3 * e + ko..][..dh];
                        let mut acc = T::zero();
                        for d in 0..dh {
                            acc += q[d] * k[d];
                        }
                        row[u] = acc * scale;
                        if row[u] > max {
                            max = row[u];
                        }
                    }
                    let mut z = T::zero();
                    for x in row[..valid].iter_mut() {
                        *x = (*x - max).exp();
                        z += *x;
                    }
                    for x in row[..valid].iter_mut() {
                        *x = *x / z;
                    }
                    let o = &mut out_s[t * e + qo..t * e + qo + dh];
                    for u in 0..valid {
                        let pv = row[u];
                        let v = &qkv[(base + u) * 3 * e + vo..][..dh];
                        for d in 0..dh {
                            o[d] += pv * v[d];
                        }
                    }
                }
            }
        });
    (out, probs)
}

/// Gradient of [`attention_forward`] with respect to `qkv`.
pub fn attention_backward<T: Real>(
    qkv: &[T],
    probs: &[T],
    dout: &[T],
    g: &AttnGeom,
    lengths: &[usize],
) -> Vec<T> {
    let (l, e, h, dh) = (g.len, g.width, g.heads, g.head_dim());
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut dqkv = vec![T::zero(); g.n * l * 3 * e];
    dqkv.par_chunks_mut(l * 3 * e)
        .enumerate()
        .for_each(|(s, dq_s)| {
            let valid = lengths[s].clamp(1, l);
            let base = s * l;
            let mut dp = vec![T::zero(); l];
            for head in 0..h {
                let qo = head * dh;
                let ko = e + head * dh;
                let vo = 2 * e + head * dh;
                let pm = &probs[(s * h + head) * l * l..][..l * l];
                for t in 0..l {
                    let go = &dout[(base + t) * e + qo..][..dh];
                    let prow = &pm[t * l..(t + 1) * l];
                    // dV and dP
                    let mut dot = T::zero();
                    for u in 0..valid {
                        let v = &qkv[(base + u) * 3 * e + vo..][..dh];
                        let mut acc = T::zero();
                        for d in 0..dh {
                            acc += go[d] * v[d];
                        }
                        dp[u] = acc;
                        dot += acc * prow[u];
                        let dv = &mut dq_s[u * 3 * e + vo..][..dh];
                        for d in 0..dh {
                            dv[d] += prow[u] * go[d];
                        }
                    }
                    // softmax adjoint, then dQ and dK
                    let q = &qkv[(base + t) * 3 * e + qo..][..dh];
                    for u in 0..valid {
                        let ds = prow[u] * (dp[u] - dot) * scale;
                        let k = &qkv[(base + u) * 3 * e + ko..][..dh];
                        {
                            let dq = &mut dq_s[t * 3 * e + qo..][..dh];
                            for d in 0..dh {
                                dq[d] += ds * k[d];
                            }
                        }
                        let dk = &mut dq_s[u * 3 * e + ko..][..dh];
                        for d in 0..dh {
                            dk[d] += ds * q[d];
                        }
                    }
                }
            }
        });
    dqkv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 1.0];
        assert_eq!(matmul(&a, &b, 2, 2, 1), vec![3.0, 7.0]);
    }

    #[test]
    fn transposed_variants_agree() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..15).map(|i| (i as f64 * 0.11).cos()).collect();
        // a: 4×3, b: 5×3
        let nt = matmul_nt(&a, &b, 4, 3, 5);
        let bt = transpose(&b, 5, 3);
        assert_eq!(nt, matmul(&a, &bt, 4, 3, 5));
        // aᵀ·c with c: 4×5
        let tn = matmul_tn(&a, &nt, 4, 3, 5);
        let at = transpose(&a, 4, 3);
        let direct = matmul(&at, &nt, 3, 4, 5);
        for (x, y) in tn.iter().zip(&direct) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        let g = ConvGeom {
            channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let mut cols = vec![0.0; g.patch() * g.out_h() * g.out_w()];
        im2col(&x, &g, &mut cols);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut back = vec![0.0; 40];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
