//! Forward and backward kernels over raw NHWC buffers.

use super::{gemm, Scalar};

/// Geometry of a "same"-padded 3×3 convolution over a batch of NHWC images.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
}

/// Images handled per GEMM call; bounds the im2col scratch buffer.
const CONV_CHUNK: usize = 8;

impl ConvGeom {
    fn patch(&self) -> usize {
        9 * self.cin
    }

    fn pixels(&self) -> usize {
        self.h * self.w
    }
}

/// Unrolls `imgs` consecutive images into rows of 3×3×cin patches.
fn im2col<T: Scalar>(g: &ConvGeom, input: &[T], imgs: usize, cols: &mut [T]) {
    let (h, w, cin) = (g.h as isize, g.w as isize, g.cin);
    let patch = g.patch();
    for img in 0..imgs {
        let src = &input[img * g.pixels() * cin..(img + 1) * g.pixels() * cin];
        let dst = &mut cols[img * g.pixels() * patch..(img + 1) * g.pixels() * patch];
        for y in 0..h {
            for x in 0..w {
                let row = &mut dst[((y * w + x) as usize) * patch..][..patch];
                for ky in 0..3isize {
                    let sy = y + ky - 1;
                    for kx in 0..3isize {
                        let sx = x + kx - 1;
                        let off = ((ky * 3 + kx) as usize) * cin;
                        let out = &mut row[off..off + cin];
                        if sy < 0 || sy >= h || sx < 0 || sx >= w {
                            out.fill(T::zero());
                        } else {
                            let s = ((sy * w + sx) as usize) * cin;
                            out.copy_from_slice(&src[s..s + cin]);
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch gradients back onto image gradients.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], imgs: usize, dinput: &mut [T]) {
    let (h, w, cin) = (g.h as isize, g.w as isize, g.cin);
    let patch = g.patch();
    for img in 0..imgs {
        let dst = &mut dinput[img * g.pixels() * cin..(img + 1) * g.pixels() * cin];
        let src = &cols[img * g.pixels() * patch..(img + 1) * g.pixels() * patch];
        for y in 0..h {
            for x in 0..w {
                let row = &src[((y * w + x) as usize) * patch..][..patch];
                for ky in 0..3isize {
                    let sy = y + ky - 1;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for kx in 0..3isize {
                        let sx = x + kx - 1;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        let off = ((ky * 3 + kx) as usize) * cin;
                        let d = ((sy * w + sx) as usize) * cin;
                        for (a, &b) in dst[d..d + cin].iter_mut().zip(&row[off..off + cin]) {
                            *a = *a + b;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3x3_forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    if g.cout == DIRECT_WIDTH {
        let mut out = vec![T::zero(); g.n * g.pixels() * g.cout];
        conv3x3_direct(g, input, kernel, bias, &mut out);
        return out;
    }
    conv3x3_gemm(g, input, kernel, bias)
}

fn conv3x3_gemm<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let (pix, patch) = (g.pixels(), g.patch());
    let mut out = vec![T::zero(); g.n * pix * g.cout];
    let mut cols = vec![T::zero(); CONV_CHUNK.min(g.n) * pix * patch];
    let mut start = 0;
    while start < g.n {
        let imgs = CONV_CHUNK.min(g.n - start);
        im2col(g, &input[start * pix * g.cin..], imgs, &mut cols);
        let o = &mut out[start * pix * g.cout..(start + imgs) * pix * g.cout];
        for row in o.chunks_exact_mut(g.cout) {
            row.copy_from_slice(bias);
        }
        gemm(imgs * pix, patch, g.cout, &cols, false, kernel, false, T::one(), o);
        start += imgs;
    }
    out
}

/// Output width handled by the register-blocked kernel.
const DIRECT_WIDTH: usize = 16;
/// Pixels per register block.
const DIRECT_BLOCK: usize = 4;

/// Copies one `[h, w, cin]` image into the interior of a zeroed
/// `[h+2, w+2, cin]` buffer. The border is never written.
fn pad_image<T: Scalar>(g: &ConvGeom, src: &[T], pad: &mut [T]) {
    let (w, cin) = (g.w, g.cin);
    let pw = w + 2;
    for y in 0..g.h {
        let d = ((y + 1) * pw + 1) * cin;
        pad[d..d + w * cin].copy_from_slice(&src[y * w * cin..(y + 1) * w * cin]);
    }
}

/// Register-blocked "same" 3×3 convolution for exactly 16 output channels.
/// `kernel` is `[3, 3, cin, 16]`.
fn conv3x3_direct<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T], bias: &[T], out: &mut [T]) {
    assert_eq!(g.cout, DIRECT_WIDTH);
    assert_eq!(kernel.len(), 9 * g.cin * DIRECT_WIDTH);
    let (h, w, cin) = (g.h, g.w, g.cin);
    let pw = w + 2;
    let mut pad = vec![T::zero(); (h + 2) * pw * cin];
    let bias: &[T; DIRECT_WIDTH] = bias.try_into().expect("bias width");
    for img in 0..g.n {
        pad_image(g, &input[img * h * w * cin..(img + 1) * h * w * cin], &mut pad);
        let dst = &mut out[img * h * w * DIRECT_WIDTH..(img + 1) * h * w * DIRECT_WIDTH];
        if T::conv16_image(&pad, h, w, cin, kernel, bias, dst) {
            continue;
        }
        for y in 0..h {
            let mut x = 0;
            while x + DIRECT_BLOCK <= w {
                direct_block::<T, DIRECT_BLOCK>(&pad, pw, cin, kernel, bias, y, x, dst);
                x += DIRECT_BLOCK;
            }
            while x + 4 <= w {
                direct_block::<T, 4>(&pad, pw, cin, kernel, bias, y, x, dst);
                x += 4;
            }
            while x < w {
                direct_block::<T, 1>(&pad, pw, cin, kernel, bias, y, x, dst);
                x += 1;
            }
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn direct_block<T: Scalar, const P: usize>(
    pad: &[T],
    pw: usize,
    cin: usize,
    kernel: &[T],
    bias: &[T; DIRECT_WIDTH],
    y: usize,
    x: usize,
    dst: &mut [T],
) {
    let mut acc = [*bias; P];
    debug_assert!(kernel.len() >= 9 * cin * DIRECT_WIDTH);
    debug_assert!(((y + 2) * pw + x + 1 + P) * cin <= pad.len());
    for ky in 0..3 {
        for kx in 0..3 {
            let tap = ky * 3 + kx;
            let base = ((y + ky) * pw + x + kx) * cin;
            for ci in 0..cin {
                // SAFETY: the caller guarantees the block lies inside the padded
                // image and the kernel holds 9·cin rows of DIRECT_WIDTH weights.
                let wr: [T; DIRECT_WIDTH] =
                    unsafe { *(kernel.as_ptr().add((tap * cin + ci) * DIRECT_WIDTH) as *const [T; DIRECT_WIDTH]) };
                for p in 0..P {
                    let a = unsafe { *pad.get_unchecked(base + p * cin + ci) };
                    for j in 0..DIRECT_WIDTH {
                        acc[p][j] = a.mul_add(wr[j], acc[p][j]);
                    }
                }
            }
        }
    }
    let w = pw - 2;
    for (p, row) in acc.iter().enumerate() {
        let o = (y * w + x + p) * DIRECT_WIDTH;
        dst[o..o + DIRECT_WIDTH].copy_from_slice(row);
    }
}

/// Returns `(dinput, dkernel, dbias)`.
pub(crate) fn conv3x3_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (pix, patch) = (g.pixels(), g.patch());
    let mut dinput = vec![T::zero(); g.n * pix * g.cin];
    let mut dkernel = vec![T::zero(); patch * g.cout];
    let mut dbias = vec![T::zero(); g.cout];
    for row in dout.chunks_exact(g.cout) {
        for (b, &d) in dbias.iter_mut().zip(row) {
            *b = *b + d;
        }
    }
    // The input gradient is a "same" convolution of dOut with the spatially
    // flipped, channel-transposed kernel.
    let direct_dx = g.cin == DIRECT_WIDTH;
    if direct_dx {
        let mut flipped = vec![T::zero(); kernel.len()];
        for tap in 0..9 {
            for ci in 0..g.cin {
                for co in 0..g.cout {
                    flipped[((8 - tap) * g.cout + co) * g.cin + ci] = kernel[(tap * g.cin + ci) * g.cout + co];
                }
            }
        }
        let tg = ConvGeom { n: g.n, h: g.h, w: g.w, cin: g.cout, cout: g.cin };
        conv3x3_direct(&tg, dout, &flipped, &[T::zero(); DIRECT_WIDTH], &mut dinput);
    }
    let direct_dk = g.cout == DIRECT_WIDTH && {
        let mut pad = vec![T::zero(); (g.h + 2) * (g.w + 2) * g.cin];
        let mut ok = true;
        for img in 0..g.n {
            pad_image(g, &input[img * pix * g.cin..(img + 1) * pix * g.cin], &mut pad);
            let d = &dout[img * pix * g.cout..(img + 1) * pix * g.cout];
            if !T::conv16_dkernel(&pad, g.h, g.w, g.cin, d, &mut dkernel) {
                ok = false;
                break;
            }
        }
        ok
    };
    if direct_dk && direct_dx {
        return (dinput, dkernel, dbias);
    }
    let chunk = CONV_CHUNK.min(g.n);
    let mut cols = if direct_dk { Vec::new() } else { vec![T::zero(); chunk * pix * patch] };
    let mut dcols = if direct_dx { Vec::new() } else { vec![T::zero(); chunk * pix * patch] };
    let mut start = 0;
    while start < g.n {
        let imgs = CONV_CHUNK.min(g.n - start);
        let rows = imgs * pix;
        let d = &dout[start * pix * g.cout..(start + imgs) * pix * g.cout];
        if !direct_dk {
            im2col(g, &input[start * pix * g.cin..], imgs, &mut cols);
            // dK += colsᵀ · dOut
            gemm(patch, rows, g.cout, &cols, true, d, false, T::one(), &mut dkernel);
        }
        if !direct_dx {
            // dCols = dOut · Kᵀ
            gemm(rows, g.cout, patch, d, false, kernel, true, T::zero(), &mut dcols);
            col2im(g, &dcols, imgs, &mut dinput[start * pix * g.cin..]);
        }
        start += imgs;
    }
    (dinput, dkernel, dbias)
}

/// 2×2 max pooling; windows on an odd high edge only cover the pixels that
/// exist. Returns the pooled values and, when `with_argmax` is set, the flat
/// input index of each maximum (the first one in scan order on ties).
pub(crate) fn maxpool2x2_forward<T: Scalar>(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    input: &[T],
    with_argmax: bool,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let len = n * oh * ow * c;
    if !with_argmax && h.is_multiple_of(2) && w.is_multiple_of(2) {
        return (maxpool2x2_even(w, c, input, len), Vec::new());
    }
    let mut out = vec![T::zero(); len];
    let mut arg = if with_argmax { vec![0; len] } else { Vec::new() };
    let mut o = 0;
    for img in 0..n {
        let base = img * h * w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut window = [0usize; 4];
                let mut count = 0;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for x in 2 * ox..(2 * ox + 2).min(w) {
                        window[count] = base + (y * w + x) * c;
                        count += 1;
                    }
                }
                let first = &input[window[0]..window[0] + c];
                let dst = &mut out[o..o + c];
                dst.copy_from_slice(first);
                if with_argmax {
                    let a = &mut arg[o..o + c];
                    for (ch, slot) in a.iter_mut().enumerate() {
                        *slot = window[0] + ch;
                    }
                    for &start in &window[1..count] {
                        let src = &input[start..start + c];
                        for ch in 0..c {
                            // strict comparison keeps the first maximum in scan order
                            if src[ch] > dst[ch] {
                                dst[ch] = src[ch];
                                a[ch] = start + ch;
                            }
                        }
                    }
                } else {
                    for &start in &window[1..count] {
                        for (d, &v) in dst.iter_mut().zip(&input[start..start + c]) {
                            if v > *d {
                                *d = v;
                            }
                        }
                    }
                }
                o += c;
            }
        }
    }
    (out, arg)
}

/// Max pooling without argmax for even `h` and `w`, same scan order.
fn maxpool2x2_even<T: Scalar>(w: usize, c: usize, input: &[T], len: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(len);
    let pick = |d: T, v: T| if v > d { v } else { d };
    for rows in input.chunks_exact(2 * w * c) {
        let (top, bottom) = rows.split_at(w * c);
        for (t, b) in top.chunks_exact(2 * c).zip(bottom.chunks_exact(2 * c)) {
            let (t0, t1) = t.split_at(c);
            let (b0, b1) = b.split_at(c);
            out.extend((0..c).map(|ch| pick(pick(pick(t0[ch], t1[ch]), b0[ch]), b1[ch])));
        }
    }
    debug_assert_eq!(out.len(), len);
    out
}

/// Row-wise numerically stable softmax of an `rows×cols` matrix.
pub(crate) fn softmax_rows<T: Scalar>(logits: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (src, dst) in logits.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}
