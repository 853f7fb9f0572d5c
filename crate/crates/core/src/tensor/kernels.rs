//! Raw NHWC kernels: GEMM wrappers, im2col/col2im, nearest upsampling.
//!
//! All loops run in a fixed order so results are bitwise reproducible.

/// Spatial geometry of a strided window over one image plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    /// `⌊(n + 2p − k)/s⌋ + 1`, or `None` when the kernel does not fit.
    pub fn out_len(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

/// `c = a·b (+ c if accumulate)`; `a` is `m×k`, `b` is `k×n`, row-major.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], accumulate: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths checked above; strides describe row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = aᵀ·b`; `a` is `m×k`, `b` is `m×n`, result `k×n`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], accumulate: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    if k == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: as above; aᵀ is addressed with swapped strides.
    unsafe {
        matrixmultiply::sgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            b.as_ptr(), n as isize, 1,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a·bᵀ`; `a` is `m×k`, `b` is `n×k`, result `m×n`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], accumulate: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: as above; bᵀ is addressed with swapped strides.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Double-precision `c = a·b` (optionally `bᵀ` when `b_transposed`), used by
/// the finite-difference oracle.
pub fn dgemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], b_transposed: bool, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths asserted above; strides match row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), rsb, csb,
            1.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Image plane dimensions for a batch in NHWC layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Plane {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// Range of kernel taps `kj` whose input column `ox·s + kj − p` lies in `0..w`.
fn valid_taps(o: usize, win: Window, w: usize) -> (usize, usize) {
    let base = (o * win.stride) as isize - win.pad as isize;
    let lo = (-base).clamp(0, win.kernel as isize) as usize;
    let hi = (w as isize - base).clamp(0, win.kernel as isize) as usize;
    (lo, hi.max(lo))
}

/// Unfolds `x` (`plane`) into rows `(n, oh, ow)` × columns `(ki, kj, c)`.
pub fn im2col<T: Copy + Default>(x: &[T], plane: Plane, win: Window, oh: usize, ow: usize) -> Vec<T> {
    let mut cols = Vec::new();
    im2col_into(x, plane, win, oh, ow, &mut cols);
    cols
}

/// [`im2col`] into a reusable buffer.
///
/// Padding slots are left untouched, so `cols` must be fresh or have last been
/// filled by a call with the same geometry (the zero pattern then matches).
pub fn im2col_into<T: Copy + Default>(x: &[T], plane: Plane, win: Window, oh: usize, ow: usize, cols: &mut Vec<T>) {
    let Plane { n, h, w, c } = plane;
    let k = win.kernel;
    let row_len = k * k * c;
    cols.resize(n * oh * ow * row_len, T::default());
    let taps: Vec<(usize, usize)> = (0..ow).map(|ox| valid_taps(ox, win, w)).collect();
    for b in 0..n {
        for oy in 0..oh {
            for ki in 0..k {
                let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let src_row = (b * h + iy as usize) * w;
                let dst_row = (b * oh + oy) * ow;
                for (ox, &(lo, hi)) in taps.iter().enumerate() {
                    if lo == hi {
                        continue;
                    }
                    let src = (src_row + ox * win.stride + lo - win.pad) * c;
                    let dst = (dst_row + ox) * row_len + (ki * k + lo) * c;
                    let len = (hi - lo) * c;
                    cols[dst..dst + len].copy_from_slice(&x[src..src + len]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an NHWC plane.
pub fn col2im<T>(cols: &[T], plane: Plane, win: Window, oh: usize, ow: usize) -> Vec<T>
where
    T: Copy + Default + std::ops::AddAssign,
{
    let Plane { n, h, w, c } = plane;
    let k = win.kernel;
    let row_len = k * k * c;
    let mut x = vec![T::default(); n * h * w * c];
    for b in 0..n {
        for oy in 0..oh {
            for ki in 0..k {
                let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let dst_row = (b * h + iy as usize) * w;
                for ox in 0..ow {
                    let (lo, hi) = valid_taps(ox, win, w);
                    if lo == hi {
                        continue;
                    }
                    let ix = ox * win.stride + lo - win.pad;
                    let dst = (dst_row + ix) * c;
                    let src = ((b * oh + oy) * ow + ox) * row_len + (ki * k + lo) * c;
                    let len = (hi - lo) * c;
                    for (d, s) in x[dst..dst + len].iter_mut().zip(&cols[src..src + len]) {
                        *d += *s;
                    }
                }
            }
        }
    }
    x
}

/// Nearest-neighbour 2× upsampling of an NHWC plane.
pub fn upsample2x<T: Copy + Default>(x: &[T], plane: Plane) -> Vec<T> {
    let Plane { n, h, w, c } = plane;
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![T::default(); n * oh * ow * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((b * h + oy / 2) * w + ox / 2) * c;
                let dst = ((b * oh + oy) * ow + ox) * c;
                y[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    y
}

/// Adjoint of [`upsample2x`]; `plane` describes the small (input) plane.
pub fn upsample2x_adjoint(dy: &[f32], plane: Plane) -> Vec<f32> {
    let Plane { n, h, w, c } = plane;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0f32; n * h * w * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((b * h + oy / 2) * w + ox / 2) * c;
                let src = ((b * oh + oy) * ow + ox) * c;
                for (d, s) in dx[dst..dst + c].iter_mut().zip(&dy[src..src + c]) {
                    *d += s;
                }
            }
        }
    }
    dx
}

/// Upper bound on the unfolded-column buffer per chunk of batch items.
const CHUNK_FLOATS: usize = 1 << 20;

fn items_per_chunk(per_item: usize) -> usize {
    (CHUNK_FLOATS / per_item.max(1)).max(1)
}

/// Geometry of a convolution: `small` is the strided side, `big` the window side.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub big: Plane,
    pub small: Plane,
    pub win: Window,
}

impl ConvGeom {
    fn kk(&self) -> usize {
        self.win.kernel * self.win.kernel * self.big.c
    }

    fn rows(&self) -> usize {
        self.small.h * self.small.w
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let n = self.big.n;
        let step = items_per_chunk(self.rows() * self.kk());
        (0..n).step_by(step).map(move |s| (s, (s + step).min(n) - s))
    }

    fn big_of(&self, len: usize) -> Plane {
        Plane { n: len, ..self.big }
    }
}

/// Forward conv: `big` input `x`, weights `[k·k·cin, cout]`, output on `small`.
pub fn conv_forward(g: ConvGeom, x: &[f32], w: &[f32], bias: &[f32]) -> Vec<f32> {
    let (kk, rows, cout) = (g.kk(), g.rows(), g.small.c);
    let (bsz, ssz) = (g.big.h * g.big.w * g.big.c, rows * cout);
    let mut out = Vec::with_capacity(g.big.n * ssz);
    for _ in 0..g.big.n * rows {
        out.extend_from_slice(bias);
    }
    let mut cols = Vec::new();
    for (s, len) in g.chunks() {
        im2col_into(&x[s * bsz..(s + len) * bsz], g.big_of(len), g.win, g.small.h, g.small.w, &mut cols);
        gemm_nn(len * rows, kk, cout, &cols, w, &mut out[s * ssz..(s + len) * ssz], true);
    }
    out
}

/// `Σ_chunks colsᵀ · dy` for a forward conv; result `[k·k·cin, cout]`.
pub fn conv_grad_w(g: ConvGeom, x: &[f32], dy: &[f32]) -> Vec<f32> {
    let (kk, rows, cout) = (g.kk(), g.rows(), g.small.c);
    let (bsz, ssz) = (g.big.h * g.big.w * g.big.c, rows * cout);
    let mut dw = vec![0.0f32; kk * cout];
    let mut cols = Vec::new();
    for (s, len) in g.chunks() {
        im2col_into(&x[s * bsz..(s + len) * bsz], g.big_of(len), g.win, g.small.h, g.small.w, &mut cols);
        gemm_tn(len * rows, kk, cout, &cols, &dy[s * ssz..(s + len) * ssz], &mut dw, true);
    }
    dw
}

/// Input gradient of a forward conv, i.e. the transposed conv of `dy`.
pub fn conv_grad_x(g: ConvGeom, dy: &[f32], w: &[f32]) -> Vec<f32> {
    let (kk, rows, cout) = (g.kk(), g.rows(), g.small.c);
    let ssz = rows * cout;
    let mut dx = Vec::with_capacity(g.big.n * g.big.h * g.big.w * g.big.c);
    let mut dcols = Vec::new();
    for (s, len) in g.chunks() {
        dcols.resize(len * rows * kk, 0.0);
        gemm_nt(len * rows, cout, kk, &dy[s * ssz..(s + len) * ssz], w, &mut dcols, false);
        dx.extend(col2im(&dcols, g.big_of(len), g.win, g.small.h, g.small.w));
    }
    dx
}
