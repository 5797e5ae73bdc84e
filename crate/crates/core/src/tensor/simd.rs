//! AVX-512 kernels for 3×3 convolutions with 16 output channels.
//!
//! The forward kernel accumulates in the same order as the portable one (bias,
//! then taps in row-major order, input channels ascending, one fused
//! multiply-add each), so both paths produce bit-identical outputs.

#[cfg(target_arch = "x86_64")]
use std::arch::x86_64::*;

/// Runs the convolution of one zero-padded image when the CPU supports
/// AVX-512. Returns `false` without touching `dst` otherwise.
///
/// `pad` is `[h+2, w+2, cin]`, `kernel` is `[3, 3, cin, 16]` and `dst` is
/// `[h, w, 16]`.
pub(crate) fn conv16_image(
    pad: &[f32],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[f32],
    bias: &[f32; 16],
    dst: &mut [f32],
) -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            assert_eq!(pad.len(), (h + 2) * (w + 2) * cin);
            assert_eq!(kernel.len(), 9 * cin * 16);
            assert_eq!(dst.len(), h * w * 16);
            // SAFETY: feature checked above; buffer sizes asserted.
            unsafe { conv16_avx512(pad.as_ptr(), h, w, cin, kernel.as_ptr(), bias, dst.as_mut_ptr()) };
            return true;
        }
    }
    let _ = (pad, h, w, cin, kernel, bias, dst);
    false
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn conv16_avx512(
    pad: *const f32,
    h: usize,
    w: usize,
    cin: usize,
    kernel: *const f32,
    bias: &[f32; 16],
    dst: *mut f32,
) {
    if cin == 16 {
        rows::<16>(pad, h, w, cin, kernel, bias, dst);
    } else {
        rows::<0>(pad, h, w, cin, kernel, bias, dst);
    }
}

/// `C` fixes the input channel count at compile time; `0` reads `cin`.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[inline]
unsafe fn rows<const C: usize>(
    pad: *const f32,
    h: usize,
    w: usize,
    cin: usize,
    kernel: *const f32,
    bias: &[f32; 16],
    dst: *mut f32,
) {
    let cin = if C == 0 { cin } else { C };
    let b = _mm512_loadu_ps(bias.as_ptr());
    let pw = w + 2;
    for y in 0..h {
        let mut x = 0;
        while x + 14 <= w {
            block::<14>(pad, pw, cin, kernel, b, y, x, w, dst);
            x += 14;
        }
        while x + 4 <= w {
            block::<4>(pad, pw, cin, kernel, b, y, x, w, dst);
            x += 4;
        }
        while x < w {
            block::<1>(pad, pw, cin, kernel, b, y, x, w, dst);
            x += 1;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[inline]
#[allow(clippy::too_many_arguments)]
unsafe fn block<const P: usize>(
    pad: *const f32,
    pw: usize,
    cin: usize,
    kernel: *const f32,
    bias: __m512,
    y: usize,
    x: usize,
    w: usize,
    dst: *mut f32,
) {
    let mut acc = [bias; P];
    for ky in 0..3 {
        for kx in 0..3 {
            let tap = ky * 3 + kx;
            let src = pad.add(((y + ky) * pw + x + kx) * cin);
            let wt = kernel.add(tap * cin * 16);
            for ci in 0..cin {
                let wv = _mm512_loadu_ps(wt.add(ci * 16));
                for (p, a) in acc.iter_mut().enumerate() {
                    let s = _mm512_set1_ps(*src.add(p * cin + ci));
                    *a = _mm512_fmadd_ps(s, wv, *a);
                }
            }
        }
    }
    for (p, a) in acc.iter().enumerate() {
        _mm512_storeu_ps(dst.add((y * w + x + p) * 16), *a);
    }
}

/// Accumulates the kernel gradient of one padded image into `dk` when the
/// CPU supports AVX-512. Returns `false` without touching `dk` otherwise.
///
/// `pad` is `[h+2, w+2, cin]`, `dout` is `[h, w, 16]` and `dk` is
/// `[3, 3, cin, 16]`.
pub(crate) fn conv16_dkernel_image(
    pad: &[f32],
    h: usize,
    w: usize,
    cin: usize,
    dout: &[f32],
    dk: &mut [f32],
) -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            assert_eq!(pad.len(), (h + 2) * (w + 2) * cin);
            assert_eq!(dout.len(), h * w * 16);
            assert_eq!(dk.len(), 9 * cin * 16);
            // SAFETY: feature checked above; buffer sizes asserted.
            unsafe {
                let mut ci = 0;
                while ci + 2 <= cin {
                    dk_block::<2>(pad.as_ptr(), h, w, cin, ci, dout.as_ptr(), dk.as_mut_ptr());
                    ci += 2;
                }
                if ci < cin {
                    dk_block::<1>(pad.as_ptr(), h, w, cin, ci, dout.as_ptr(), dk.as_mut_ptr());
                }
            }
            return true;
        }
    }
    let _ = (pad, h, w, cin, dout, dk);
    false
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn dk_block<const B: usize>(
    pad: *const f32,
    h: usize,
    w: usize,
    cin: usize,
    ci0: usize,
    dout: *const f32,
    dk: *mut f32,
) {
    let pw = w + 2;
    let mut acc = [[_mm512_setzero_ps(); 9]; B];
    for (b, row) in acc.iter_mut().enumerate() {
        for (tap, a) in row.iter_mut().enumerate() {
            *a = _mm512_loadu_ps(dk.add((tap * cin + ci0 + b) * 16));
        }
    }
    for y in 0..h {
        for x in 0..w {
            let d = _mm512_loadu_ps(dout.add((y * w + x) * 16));
            for ky in 0..3 {
                for kx in 0..3 {
                    let src = pad.add(((y + ky) * pw + x + kx) * cin + ci0);
                    for (b, row) in acc.iter_mut().enumerate() {
                        let s = _mm512_set1_ps(*src.add(b));
                        row[ky * 3 + kx] = _mm512_fmadd_ps(s, d, row[ky * 3 + kx]);
                    }
                }
            }
        }
    }
    for (b, row) in acc.iter().enumerate() {
        for (tap, a) in row.iter().enumerate() {
            _mm512_storeu_ps(dk.add((tap * cin + ci0 + b) * 16), *a);
        }
    }
}
