//! Shared low-level kernels: im2col convolution geometry, GEMM dispatch and
//! pooling/upsampling loops, generic over f32 (inference) and f64 (training).
//!
//! 1-D and 2-D problems are lifted to 3-D with unit leading extents.

use std::ops::{Add, AddAssign, Mul, Sub};

use rayon::prelude::*;

/// Output positions processed per im2col block; bounds scratch memory.
const BLOCK: usize = 1024;

pub trait Real:
    Copy
    + Default
    + PartialOrd
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + AddAssign
    + 'static
{
    const ZERO: Self;
    const NEG_INF: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = a * b + beta * c` with arbitrary strides (row stride, column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const NEG_INF: Self = <$t>::NEG_INFINITY;

            fn from_f64(x: f64) -> Self {
                x as $t
            }

            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                beta: Self,
                c: &mut [Self],
                (rsc, csc): (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // extents checked so the raw-pointer call stays in bounds
                let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    (rows as isize - 1) * rs + (cols as isize - 1) * cs
                };
                if k > 0 {
                    assert!(last(m, k, rsa, csa) < a.len() as isize);
                    assert!(last(k, n, rsb, csb) < b.len() as isize);
                }
                assert!(last(m, n, rsc, csc) < c.len() as isize);
                unsafe {
                    $gemm(
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Convolution geometry lifted to three spatial axes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_sp: [usize; 3],
    pub k: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out_sp: [usize; 3],
    /// Spatial rank before lifting.
    pub dims: usize,
}

fn lift(v: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[3 - v.len()..].copy_from_slice(v);
    out
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: &[usize], pad: &[usize]) -> Result<Self, String> {
        let d = w_shape.len().checked_sub(2).ok_or("weight rank below 3")?;
        if !(1..=3).contains(&d) {
            return Err(format!("{d}-D convolution is unsupported"));
        }
        if x_shape.len() != d + 2 {
            return Err(format!("input rank {} for a {d}-D kernel", x_shape.len()));
        }
        if x_shape[1] != w_shape[1] {
            return Err(format!("input has {} channels, weight expects {}", x_shape[1], w_shape[1]));
        }
        if stride.len() != d || pad.len() != d || stride.contains(&0) {
            return Err("stride/pad must have one positive entry per spatial axis".into());
        }
        let mut out_sp = Vec::with_capacity(d);
        for ax in 0..d {
            let o = crate::graph::window_out(x_shape[2 + ax], w_shape[2 + ax], stride[ax], pad[ax])
                .ok_or_else(|| format!("axis {ax}: extent {} smaller than kernel", x_shape[2 + ax]))?;
            out_sp.push(o);
        }
        Ok(Self {
            batch: x_shape[0],
            in_ch: x_shape[1],
            out_ch: w_shape[0],
            in_sp: lift(&x_shape[2..], 1),
            k: lift(&w_shape[2..], 1),
            stride: lift(stride, 1),
            pad: lift(pad, 0),
            out_sp: lift(&out_sp, 1),
            dims: d,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_sp.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_sp.iter().product()
    }

    /// Reduction length per output element: `in_ch * prod(kernel)`.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.k.iter().product::<usize>()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch, self.out_ch];
        s.extend_from_slice(&self.out_sp[3 - self.dims..]);
        s
    }

    /// Input offset (within one sample) for patch row `r` at output position
    /// `p`, or `None` when it falls into zero padding.
    #[inline]
    fn patch_row_base(&self, p: usize) -> [isize; 3] {
        let ox = p % self.out_sp[2];
        let oy = (p / self.out_sp[2]) % self.out_sp[1];
        let oz = p / (self.out_sp[2] * self.out_sp[1]);
        [
            (oz * self.stride[0]) as isize - self.pad[0] as isize,
            (oy * self.stride[1]) as isize - self.pad[1] as isize,
            (ox * self.stride[2]) as isize - self.pad[2] as isize,
        ]
    }

    /// Fills `cols` (position-major, `[positions, patch_len]`) for output
    /// positions `p0..p0+count` of one sample.
    pub fn im2col<T: Copy>(&self, x: &[T], zero: T, p0: usize, count: usize, cols: &mut [T]) {
        let kl = self.patch_len();
        let [kd, kh, kw] = self.k;
        let [d, h, w] = self.in_sp;
        for j in 0..count {
            let base = self.patch_row_base(p0 + j);
            let row = &mut cols[j * kl..(j + 1) * kl];
            let mut r = 0;
            for c in 0..self.in_ch {
                let xc = &x[c * d * h * w..(c + 1) * d * h * w];
                for a in 0..kd {
                    let z = base[0] + a as isize;
                    for b in 0..kh {
                        let y = base[1] + b as isize;
                        let inside_zy = z >= 0 && (z as usize) < d && y >= 0 && (y as usize) < h;
                        for e in 0..kw {
                            let xx = base[2] + e as isize;
                            row[r] = if inside_zy && xx >= 0 && (xx as usize) < w {
                                xc[(z as usize * h + y as usize) * w + xx as usize]
                            } else {
                                zero
                            };
                            r += 1;
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters `cols` back into `dx`.
    pub fn col2im_add<T: Copy + AddAssign>(&self, cols: &[T], p0: usize, count: usize, dx: &mut [T]) {
        let kl = self.patch_len();
        let [kd, kh, kw] = self.k;
        let [d, h, w] = self.in_sp;
        for j in 0..count {
            let base = self.patch_row_base(p0 + j);
            let row = &cols[j * kl..(j + 1) * kl];
            let mut r = 0;
            for c in 0..self.in_ch {
                for a in 0..kd {
                    let z = base[0] + a as isize;
                    for b in 0..kh {
                        let y = base[1] + b as isize;
                        let inside_zy = z >= 0 && (z as usize) < d && y >= 0 && (y as usize) < h;
                        for e in 0..kw {
                            let xx = base[2] + e as isize;
                            if inside_zy && xx >= 0 && (xx as usize) < w {
                                dx[c * d * h * w + (z as usize * h + y as usize) * w + xx as usize] += row[r];
                            }
                            r += 1;
                        }
                    }
                }
            }
        }
    }

    /// Runs of consecutive output positions sharing `(oz, oy)`:
    /// `(j, oz, oy, ox0, len)` relative to block start `p0`.
    fn row_segments(&self, p0: usize, count: usize) -> Vec<(usize, usize, usize, usize, usize)> {
        let [_, oh, ow] = self.out_sp;
        let mut segs = Vec::new();
        let mut j = 0;
        while j < count {
            let p = p0 + j;
            let ox = p % ow;
            let len = (ow - ox).min(count - j);
            segs.push((j, p / (ow * oh), (p / ow) % oh, ox, len));
            j += len;
        }
        segs
    }

    /// Channel-major variant of [`ConvGeom::im2col`]: `cols` is
    /// `[patch_len, count]`, so unit-stride rows become slice copies.
    pub fn im2col_rows<T: Copy>(&self, x: &[T], zero: T, p0: usize, count: usize, cols: &mut [T]) {
        let segs = self.row_segments(p0, count);
        self.for_each_row(&segs, |r, c, z, y, e, j0, ox0, len| {
            let dst = &mut cols[r * count + j0..r * count + j0 + len];
            match (z, y) {
                (Some(z), Some(y)) => {
                    let [_, h, w] = self.in_sp;
                    let line = &x[((c * self.in_sp[0] + z) * h + y) * w..][..w];
                    let (lo, hi, start) = self.x_span(e, ox0, len);
                    if self.stride[2] == 1 {
                        dst[..lo].fill(zero);
                        if hi > lo {
                            dst[lo..hi].copy_from_slice(&line[(start + lo as isize) as usize..(start + hi as isize) as usize]);
                        }
                        dst[hi.max(lo)..].fill(zero);
                    } else {
                        for (k, v) in dst.iter_mut().enumerate() {
                            let xx = ((ox0 + k) * self.stride[2] + e) as isize - self.pad[2] as isize;
                            *v = if xx >= 0 && (xx as usize) < w { line[xx as usize] } else { zero };
                        }
                    }
                }
                _ => dst.fill(zero),
            }
        });
    }

    /// Adjoint of [`ConvGeom::im2col_rows`].
    pub fn col2im_rows_add<T: Copy + AddAssign>(&self, cols: &[T], p0: usize, count: usize, dx: &mut [T]) {
        let segs = self.row_segments(p0, count);
        self.for_each_row(&segs, |r, c, z, y, e, j0, ox0, len| {
            let (Some(z), Some(y)) = (z, y) else { return };
            let src = &cols[r * count + j0..r * count + j0 + len];
            let [_, h, w] = self.in_sp;
            let line = &mut dx[((c * self.in_sp[0] + z) * h + y) * w..][..w];
            if self.stride[2] == 1 {
                let (lo, hi, start) = self.x_span(e, ox0, len);
                for k in lo..hi {
                    line[(start + k as isize) as usize] += src[k];
                }
            } else {
                for (k, &v) in src.iter().enumerate() {
                    let xx = ((ox0 + k) * self.stride[2] + e) as isize - self.pad[2] as isize;
                    if xx >= 0 && (xx as usize) < w {
                        line[xx as usize] += v;
                    }
                }
            }
        });
    }

    /// Unit-stride span of valid `k` in `0..len` for kernel column `e`:
    /// `(lo, hi, start)` with input column `start + k`.
    #[inline]
    fn x_span(&self, e: usize, ox0: usize, len: usize) -> (usize, usize, isize) {
        let w = self.in_sp[2] as isize;
        let start = ox0 as isize + e as isize - self.pad[2] as isize;
        let lo = (-start).clamp(0, len as isize) as usize;
        let hi = (w - start).clamp(0, len as isize) as usize;
        (lo, hi, start)
    }

    /// Visits every (patch row, segment) pair with the input plane
    /// coordinates, `None` where they fall into padding.
    #[allow(clippy::type_complexity)]
    fn for_each_row<F>(&self, segs: &[(usize, usize, usize, usize, usize)], mut f: F)
    where
        F: FnMut(usize, usize, Option<usize>, Option<usize>, usize, usize, usize, usize),
    {
        let [kd, kh, kw] = self.k;
        let [d, h, _] = self.in_sp;
        let inside = |o: usize, s: usize, k: usize, p: usize, n: usize| {
            let v = (o * s + k) as isize - p as isize;
            (v >= 0 && (v as usize) < n).then_some(v as usize)
        };
        let mut r = 0;
        for c in 0..self.in_ch {
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        for &(j0, oz, oy, ox0, len) in segs {
                            let z = inside(oz, self.stride[0], a, self.pad[0], d);
                            let y = inside(oy, self.stride[1], b, self.pad[1], h);
                            f(r, c, z, y, e, j0, ox0, len);
                        }
                        r += 1;
                    }
                }
            }
        }
    }

    fn blocks(&self) -> Vec<(usize, usize)> {
        let p = self.out_len();
        (0..p).step_by(BLOCK).map(|p0| (p0, BLOCK.min(p - p0))).collect()
    }
}

/// im2col + GEMM convolution over a whole batch. `w` is `[out, patch_len]`.
pub fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let in_sample = g.in_ch * g.in_len();
    let p = g.out_len();
    let out_sample = g.out_ch * p;
    let kl = g.patch_len();
    let mut out = vec![T::ZERO; g.batch * out_sample];
    for n in 0..g.batch {
        let xs = &x[n * in_sample..(n + 1) * in_sample];
        let parts: Vec<(usize, usize, Vec<T>)> = g
            .blocks()
            .into_par_iter()
            .map(|(p0, count)| {
                let mut cols = vec![T::ZERO; count * kl];
                g.im2col_rows(xs, T::ZERO, p0, count, &mut cols);
                let mut res = vec![T::ZERO; g.out_ch * count];
                // res[o, j] = sum_r w[o, r] * cols[r, j]
                T::gemm(
                    g.out_ch,
                    kl,
                    count,
                    w,
                    (kl as isize, 1),
                    &cols,
                    (count as isize, 1),
                    T::ZERO,
                    &mut res,
                    (count as isize, 1),
                );
                (p0, count, res)
            })
            .collect();
        let os = &mut out[n * out_sample..(n + 1) * out_sample];
        for (p0, count, res) in parts {
            for o in 0..g.out_ch {
                let bias = b.map_or(T::ZERO, |b| b[o]);
                let dst = &mut os[o * p + p0..o * p + p0 + count];
                for (d, &s) in dst.iter_mut().zip(&res[o * count..(o + 1) * count]) {
                    *d = s + bias;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution for one sample.
/// Returns `(dx, dw, db)`; `dw` is `[out, patch_len]`.
pub fn conv_backward_sample<T: Real>(g: &ConvGeom, x: &[T], w: &[T], dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let p = g.out_len();
    let kl = g.patch_len();
    let mut dx = vec![T::ZERO; g.in_ch * g.in_len()];
    let mut dw = vec![T::ZERO; g.out_ch * kl];
    let mut db = vec![T::ZERO; g.out_ch];
    for o in 0..g.out_ch {
        let mut s = T::ZERO;
        for &v in &dy[o * p..(o + 1) * p] {
            s += v;
        }
        db[o] = s;
    }
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for (p0, count) in g.blocks() {
        cols.clear();
        cols.resize(count * kl, T::ZERO);
        g.im2col_rows(x, T::ZERO, p0, count, &mut cols);
        // dw[o, r] += sum_j dy[o, p0 + j] * cols[r, j]
        T::gemm(
            g.out_ch,
            count,
            kl,
            &dy[p0..],
            (p as isize, 1),
            &cols,
            (1, count as isize),
            T::from_f64(1.0),
            &mut dw,
            (kl as isize, 1),
        );
        // dcols[r, j] = sum_o w[o, r] * dy[o, p0 + j]
        dcols.clear();
        dcols.resize(count * kl, T::ZERO);
        T::gemm(
            kl,
            g.out_ch,
            count,
            w,
            (1, kl as isize),
            &dy[p0..],
            (p as isize, 1),
            T::ZERO,
            &mut dcols,
            (count as isize, 1),
        );
        g.col2im_rows_add(&dcols, p0, count, &mut dx);
    }
    (dx, dw, db)
}

/// Pooling geometry lifted to three spatial axes.
#[derive(Debug, Clone)]
pub struct PoolGeom {
    pub planes: usize,
    pub in_sp: [usize; 3],
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out_sp: [usize; 3],
}

impl PoolGeom {
    pub fn new(shape: &[usize], window: &[usize], stride: &[usize], pad: &[usize]) -> Result<Self, String> {
        let d = shape.len().checked_sub(2).filter(|&d| (1..=3).contains(&d)).ok_or("maxpool needs 1-3 spatial axes")?;
        if window.len() != d || stride.len() != d || pad.len() != d {
            return Err("pool parameters must have one entry per spatial axis".into());
        }
        let mut out = Vec::new();
        for ax in 0..d {
            out.push(
                crate::graph::window_out(shape[2 + ax], window[ax], stride[ax], pad[ax])
                    .ok_or_else(|| format!("axis {ax}: extent smaller than pool window"))?,
            );
        }
        Ok(Self {
            planes: shape[0] * shape[1],
            in_sp: lift(&shape[2..], 1),
            window: lift(window, 1),
            stride: lift(stride, 1),
            pad: lift(pad, 0),
            out_sp: lift(&out, 1),
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_sp.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_sp.iter().product()
    }
}

/// Max pooling with `-inf` padding. Returns values and the flat input index of
/// each maximum (first occurrence in scan order).
pub fn maxpool_forward<T: Real>(g: &PoolGeom, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let il = g.in_len();
    let ol = g.out_len();
    let [d, h, w] = g.in_sp;
    let mut out = vec![T::NEG_INF; g.planes * ol];
    let mut arg = vec![0usize; g.planes * ol];
    for plane in 0..g.planes {
        let xs = &x[plane * il..(plane + 1) * il];
        for oz in 0..g.out_sp[0] {
            for oy in 0..g.out_sp[1] {
                for ox in 0..g.out_sp[2] {
                    let o = plane * ol + (oz * g.out_sp[1] + oy) * g.out_sp[2] + ox;
                    let mut best = T::NEG_INF;
                    let mut best_i = usize::MAX;
                    for a in 0..g.window[0] {
                        let z = (oz * g.stride[0] + a) as isize - g.pad[0] as isize;
                        if z < 0 || z as usize >= d {
                            continue;
                        }
                        for b in 0..g.window[1] {
                            let y = (oy * g.stride[1] + b) as isize - g.pad[1] as isize;
                            if y < 0 || y as usize >= h {
                                continue;
                            }
                            for e in 0..g.window[2] {
                                let xx = (ox * g.stride[2] + e) as isize - g.pad[2] as isize;
                                if xx < 0 || xx as usize >= w {
                                    continue;
                                }
                                let i = (z as usize * h + y as usize) * w + xx as usize;
                                if best_i == usize::MAX || xs[i] > best {
                                    best = xs[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out[o] = best;
                    arg[o] = plane * il + best_i;
                }
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour upsampling of `[planes, spatial...]` data lifted to 3-D.
pub fn upsample_forward<T: Copy>(planes: usize, in_sp: [usize; 3], factor: [usize; 3], x: &[T]) -> Vec<T> {
    let [d, h, w] = in_sp;
    let (od, oh, ow) = (d * factor[0], h * factor[1], w * factor[2]);
    let mut out = Vec::with_capacity(planes * od * oh * ow);
    for plane in 0..planes {
        let xs = &x[plane * d * h * w..(plane + 1) * d * h * w];
        for z in 0..od {
            for y in 0..oh {
                let row = &xs[((z / factor[0]) * h + y / factor[1]) * w..][..w];
                for xx in 0..ow {
                    out.push(row[xx / factor[2]]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_forward`]: sums gradients over replicated positions.
pub fn upsample_backward<T: Real>(planes: usize, in_sp: [usize; 3], factor: [usize; 3], dy: &[T]) -> Vec<T> {
    let [d, h, w] = in_sp;
    let (od, oh, ow) = (d * factor[0], h * factor[1], w * factor[2]);
    let mut dx = vec![T::ZERO; planes * d * h * w];
    for plane in 0..planes {
        let ys = &dy[plane * od * oh * ow..(plane + 1) * od * oh * ow];
        let xs = &mut dx[plane * d * h * w..(plane + 1) * d * h * w];
        for z in 0..od {
            for y in 0..oh {
                let base = ((z / factor[0]) * h + y / factor[1]) * w;
                for xx in 0..ow {
                    xs[base + xx / factor[2]] += ys[(z * oh + y) * ow + xx];
                }
            }
        }
    }
    dx
}

pub fn lift3(v: &[usize], fill: usize) -> [usize; 3] {
    lift(v, fill)
}
