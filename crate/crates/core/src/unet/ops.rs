//! Tensor kernels with hand-written backward passes. Tensors are plain
//! channel-major `[C, H, W]` slices.

use std::fmt::Debug;
use std::ops::AddAssign;

use num_traits::Float;

/// Floating-point element type of the network.
pub trait Real: Float + AddAssign + Default + Debug + Send + Sync + 'static {
    /// `C = alpha * A B + beta * C` with explicit strides.
    ///
    /// # Safety
    /// Strides and dimensions must address memory inside the slices the
    /// pointers come from.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major `C[m,n] (+)= op(A)[m,k] op(B)[k,n]`, where a transposed
/// operand is stored as the transpose of its logical shape.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a zero-padded `ks x ks` neighbourhood of every pixel into the
/// rows of a `[c * ks * ks, h * w]` matrix.
pub fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, ks: usize) -> Vec<T> {
    let p = (ks / 2) as isize;
    let hw = h * w;
    let mut col = vec![T::zero(); c * ks * ks * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..ks {
            for kx in 0..ks {
                let row = &mut col[((ch * ks + ky) * ks + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - p, kx as isize - p);
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &plane[si as usize * w..][..w];
                    let dst = &mut row[i * w..][..w];
                    let j0 = (-dx).max(0) as usize;
                    let j1 = (w as isize - dx).min(w as isize) as usize;
                    for j in j0..j1 {
                        dst[j] = src[(j as isize + dx) as usize];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, ks: usize) -> Vec<T> {
    let p = (ks / 2) as isize;
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ky in 0..ks {
            for kx in 0..ks {
                let row = &col[((ch * ks + ky) * ks + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - p, kx as isize - p);
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &row[i * w..][..w];
                    let dst = &mut plane[si as usize * w..][..w];
                    let j0 = (-dx).max(0) as usize;
                    let j1 = (w as isize - dx).min(w as isize) as usize;
                    for j in j0..j1 {
                        dst[(j as isize + dx) as usize] += src[j];
                    }
                }
            }
        }
    }
    x
}

/// Same-size convolution (zero padding `ks / 2`). `weight` is
/// `[cout, cin, ks, ks]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_forward<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
    ks: usize,
) -> Vec<T> {
    let hw = h * w;
    let mut y = vec![T::zero(); cout * hw];
    for (o, b) in bias.iter().enumerate() {
        y[o * hw..(o + 1) * hw].fill(*b);
    }
    if ks == 1 {
        gemm(cout, cin, hw, weight, false, x, false, &mut y, true);
    } else if use_direct(cin, cout) {
        direct_forward(x, cin, h, w, weight, cout, ks, &mut y);
    } else {
        let col = im2col(x, cin, h, w, ks);
        gemm(cout, cin * ks * ks, hw, weight, false, &col, false, &mut y, true);
    }
    y
}

/// Accumulates weight and bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    ks: usize,
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
) -> Option<Vec<T>> {
    let hw = h * w;
    let kk = cin * ks * ks;
    for (o, db) in dbias.iter_mut().enumerate() {
        let mut s = T::zero();
        for v in &dy[o * hw..(o + 1) * hw] {
            s += *v;
        }
        *db += s;
    }
    if ks > 1 && use_direct(cin, cout) {
        return direct_backward(x, cin, h, w, weight, cout, ks, dy, dweight, need_dx);
    }
    let col_owned;
    let col: &[T] = if ks == 1 {
        x
    } else {
        col_owned = im2col(x, cin, h, w, ks);
        &col_owned
    };
    gemm(cout, hw, kk, dy, false, col, true, dweight, true);
    if !need_dx {
        return None;
    }
    let mut dcol = vec![T::zero(); kk * hw];
    gemm(kk, cout, hw, weight, true, dy, false, &mut dcol, false);
    Some(if ks == 1 { dcol } else { col2im(&dcol, cin, h, w, ks) })
}

/// Below this many input-output channel pairs a convolution runs as
/// shifted row updates; lowering to a matrix product only pays off for
/// wider layers.
const DIRECT_MAX_PAIRS: usize = 256;

fn use_direct(cin: usize, cout: usize) -> bool {
    cin * cout <= DIRECT_MAX_PAIRS
}

/// Zero-pads every channel by `p` on all sides.
fn zero_pad<T: Real>(x: &[T], c: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); c * ph * pw];
    for ch in 0..c {
        for r in 0..h {
            let dst = (ch * ph + r + p) * pw + p;
            out[dst..dst + w].copy_from_slice(&x[(ch * h + r) * w..][..w]);
        }
    }
    out
}

fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, s) in y.iter_mut().zip(x) {
        *d += alpha * *s;
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    acc.iter().fold(s, |t, v| t + *v)
}

#[allow(clippy::too_many_arguments)]
fn direct_forward<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    ks: usize,
    y: &mut [T],
) {
    let p = ks / 2;
    let pw = w + 2 * p;
    let plane = (h + 2 * p) * pw;
    let xp = zero_pad(x, cin, h, w, p);
    for o in 0..cout {
        for c in 0..cin {
            let kernel = &weight[(o * cin + c) * ks * ks..][..ks * ks];
            let src = &xp[c * plane..][..plane];
            for r in 0..h {
                let dst = &mut y[(o * h + r) * w..][..w];
                for ky in 0..ks {
                    let row = &src[(r + ky) * pw..];
                    for kx in 0..ks {
                        axpy(kernel[ky * ks + kx], &row[kx..kx + w], dst);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn direct_backward<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    ks: usize,
    dy: &[T],
    dweight: &mut [T],
    need_dx: bool,
) -> Option<Vec<T>> {
    let p = ks / 2;
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let plane = ph * pw;
    let xp = zero_pad(x, cin, h, w, p);
    let mut dxp = if need_dx { vec![T::zero(); cin * plane] } else { Vec::new() };
    for o in 0..cout {
        for c in 0..cin {
            let base = (o * cin + c) * ks * ks;
            let src = &xp[c * plane..][..plane];
            for r in 0..h {
                let g = &dy[(o * h + r) * w..][..w];
                for ky in 0..ks {
                    let off = (r + ky) * pw;
                    for kx in 0..ks {
                        dweight[base + ky * ks + kx] += dot(g, &src[off + kx..off + kx + w]);
                        if need_dx {
                            let d = &mut dxp[c * plane + off + kx..][..w];
                            axpy(weight[base + ky * ks + kx], g, d);
                        }
                    }
                }
            }
        }
    }
    if !need_dx {
        return None;
    }
    let mut dx = vec![T::zero(); cin * h * w];
    for c in 0..cin {
        for r in 0..h {
            let src = (c * ph + r + p) * pw + p;
            dx[(c * h + r) * w..][..w].copy_from_slice(&dxp[src..src + w]);
        }
    }
    Some(dx)
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` where the activation output was not positive.
pub fn relu_backward<T: Real>(out: &[T], dy: &mut [T]) {
    for (g, o) in dy.iter_mut().zip(out) {
        if *o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max-pool with stride 2; returns the pooled tensor and the flat
/// source index of every maximum (first maximum wins ties).
pub fn maxpool_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let cands = [
                    base + 2 * i * w + 2 * j,
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = cands[0];
                for &k in &cands[1..] {
                    if x[k] > x[best] {
                        best = k;
                    }
                }
                y.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward<T: Real>(dy: &[T], arg: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (g, k) in dy.iter().zip(arg) {
        dx[*k as usize] += *g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                y[(ch * ho + i) * wo + j] = x[(ch * h + i / 2) * w + j / 2];
            }
        }
    }
    y
}

pub fn upsample_backward<T: Real>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                dx[(ch * h + i / 2) * w + j / 2] += dy[(ch * ho + i) * wo + j];
            }
        }
    }
    dx
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Reflects index `k` of a padded axis back into `0..n` without repeating
/// the edge sample.
fn reflect(k: isize, n: usize) -> usize {
    let n = n as isize;
    let mut k = k;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    k = k.rem_euclid(period);
    (if k >= n { period - k } else { k }) as usize
}

/// Reflect-pads each `n x n` plane to `m x m`, with `(m - n) / 2` samples
/// before and the rest after.
pub fn reflect_pad<T: Real>(x: &[T], c: usize, n: usize, m: usize) -> Vec<T> {
    if m == n {
        return x.to_vec();
    }
    let before = ((m - n) / 2) as isize;
    let mut y = vec![T::zero(); c * m * m];
    for ch in 0..c {
        for i in 0..m {
            let si = reflect(i as isize - before, n);
            for j in 0..m {
                let sj = reflect(j as isize - before, n);
                y[(ch * m + i) * m + j] = x[(ch * n + si) * n + sj];
            }
        }
    }
    y
}

/// Inverse window of [`reflect_pad`] for a single plane.
pub fn crop_center<T: Real>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let before = (m - n) / 2;
    let mut y = Vec::with_capacity(n * n);
    for i in 0..n {
        y.extend_from_slice(&x[(i + before) * m + before..][..n]);
    }
    y
}
