//! Two-dimensional discrete Fourier transforms with gradient support.
//!
//! A real `(C, H, W)` feature map transforms into a packed `(2C, H, W)`
//! tensor: the first `C` channels hold the real part of the spectrum, the
//! last `C` the imaginary part. The forward transform is unnormalized; the
//! inverse divides by `H*W`, so a round trip reproduces the input.
//!
//! Power-of-two axis lengths use an iterative radix-2 butterfly; other
//! lengths fall back to the quadratic direct sum, so any spatial extent
//! works (at a cost only visible on large odd sizes, which the pipeline
//! never produces).

use std::f64::consts::TAU;

use super::Tensor;
use crate::error::{Error, Result};

/// Largest tolerated imaginary magnitude (after normalization) when
/// inverting a spectrum expected to describe a real signal.
pub const IMAG_RESIDUE_LIMIT: f64 = 1e-6;

fn dft1_pow2(re: &mut [f64], im: &mut [f64], sign: f64) {
    let n = re.len();
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let ang = sign * TAU / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                // Twiddles are computed directly (not by recurrence) to keep
                // round-trip error at the 1e-12 level.
                let (ts, tc) = (ang * k as f64).sin_cos();
                let (ur, ui) = (re[start + k], im[start + k]);
                let (xr, xi) = (re[start + k + half], im[start + k + half]);
                let vr = xr * tc - xi * ts;
                let vi = xr * ts + xi * tc;
                re[start + k] = ur + vr;
                im[start + k] = ui + vi;
                re[start + k + half] = ur - vr;
                im[start + k + half] = ui - vi;
            }
        }
        len <<= 1;
    }
}

fn dft1_naive(re: &mut [f64], im: &mut [f64], sign: f64) {
    let n = re.len();
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for (k, (or_, oi)) in out_re.iter_mut().zip(&mut out_im).enumerate() {
        let mut ar = 0.0;
        let mut ai = 0.0;
        for t in 0..n {
            // Reduce the phase index modulo n before converting to an angle
            // so large products do not lose precision.
            let ang = sign * TAU * ((k * t) % n) as f64 / n as f64;
            let (s, c) = ang.sin_cos();
            ar += re[t] * c - im[t] * s;
            ai += re[t] * s + im[t] * c;
        }
        *or_ = ar;
        *oi = ai;
    }
    re.copy_from_slice(&out_re);
    im.copy_from_slice(&out_im);
}

fn dft1(re: &mut [f64], im: &mut [f64], sign: f64) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        dft1_pow2(re, im, sign);
    } else {
        dft1_naive(re, im, sign);
    }
}

/// In-place 2D transform of one complex plane: rows first, then columns.
fn dft2_plane(re: &mut [f64], im: &mut [f64], h: usize, w: usize, sign: f64) {
    for row in 0..h {
        dft1(&mut re[row * w..(row + 1) * w], &mut im[row * w..(row + 1) * w], sign);
    }
    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    for col in 0..w {
        for row in 0..h {
            col_re[row] = re[row * w + col];
            col_im[row] = im[row * w + col];
        }
        dft1(&mut col_re, &mut col_im, sign);
        for row in 0..h {
            re[row * w + col] = col_re[row];
            im[row * w + col] = col_im[row];
        }
    }
}

/// A complex spectrum packed as a `(2C, H, W)` tensor: real block followed
/// by imaginary block. Wrapping the tensor keeps callers from mixing up
/// spatial features and spectra.
#[derive(Clone, Debug)]
pub struct Spectrum {
    packed: Tensor,
}

impl Spectrum {
    /// Wraps an existing packed tensor; the first axis must be even.
    pub fn from_packed(packed: Tensor) -> Result<Self> {
        if packed.rank() != 3 || packed.shape()[0] % 2 != 0 {
            return Err(Error::Shape {
                op: "spectrum",
                detail: format!("packed spectrum must be (2C, H, W), got {:?}", packed.shape()),
            });
        }
        Ok(Spectrum { packed })
    }

    pub fn packed(&self) -> &Tensor {
        &self.packed
    }

    pub fn into_packed(self) -> Tensor {
        self.packed
    }

    /// Number of complex channels (half the packed channel count).
    pub fn channels(&self) -> usize {
        self.packed.shape()[0] / 2
    }

    pub fn height(&self) -> usize {
        self.packed.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.packed.shape()[2]
    }

    /// Real block as a `(C, H, W)` tensor (gradients flow back).
    pub fn real(&self) -> Result<Tensor> {
        self.packed.narrow0(0, self.channels())
    }

    /// Imaginary block as a `(C, H, W)` tensor (gradients flow back).
    pub fn imag(&self) -> Result<Tensor> {
        self.packed.narrow0(self.channels(), self.channels())
    }

    /// How far this spectrum is from describing a real signal: the largest
    /// deviation from conjugate symmetry `X[u,v] = conj(X[-u,-v])` over all
    /// channels and frequencies.
    pub fn conjugate_symmetry_residue(&self) -> f64 {
        let c = self.channels();
        let (h, w) = (self.height(), self.width());
        let hw = h * w;
        let data = self.packed.data();
        let mut worst = 0.0f64;
        for ch in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let mu = (h - u) % h;
                    let mv = (w - v) % w;
                    let re_a = data[ch * hw + u * w + v];
                    let re_b = data[ch * hw + mu * w + mv];
                    let im_a = data[(c + ch) * hw + u * w + v];
                    let im_b = data[(c + ch) * hw + mu * w + mv];
                    worst = worst.max((re_a - re_b).abs()).max((im_a + im_b).abs());
                }
            }
        }
        worst
    }
}

/// Forward 2D transform of a real `(C, H, W)` tensor.
pub fn fft2(x: &Tensor) -> Result<Spectrum> {
    if x.rank() != 3 {
        return Err(Error::Shape {
            op: "fft2",
            detail: format!("expected (C, H, W), got {:?}", x.shape()),
        });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h == 0 || w == 0 {
        return Err(Error::Shape {
            op: "fft2",
            detail: "empty spatial extent".into(),
        });
    }
    let hw = h * w;
    let mut packed = vec![0.0; 2 * c * hw];
    {
        let (re_all, im_all) = packed.split_at_mut(c * hw);
        for ch in 0..c {
            let re = &mut re_all[ch * hw..(ch + 1) * hw];
            let im = &mut im_all[ch * hw..(ch + 1) * hw];
            re.copy_from_slice(&x.data()[ch * hw..(ch + 1) * hw]);
            dft2_plane(re, im, h, w, -1.0);
        }
    }
    let need = x.needs_grad();
    let tensor = Tensor::from_op(
        "fft2",
        vec![2 * c, h, w],
        packed,
        vec![x.clone()],
        Box::new(move |g, slots| {
            if need {
                // d/dx of a linear transform is its adjoint: the real part of
                // the unnormalized inverse transform of the output gradient.
                let mut dx = vec![0.0; c * hw];
                let mut gr = vec![0.0; hw];
                let mut gi = vec![0.0; hw];
                for ch in 0..c {
                    gr.copy_from_slice(&g[ch * hw..(ch + 1) * hw]);
                    gi.copy_from_slice(&g[(c + ch) * hw..(c + ch + 1) * hw]);
                    dft2_plane(&mut gr, &mut gi, h, w, 1.0);
                    dx[ch * hw..(ch + 1) * hw].copy_from_slice(&gr);
                }
                slots[0] = Some(dx);
            }
        }),
    )?;
    Ok(Spectrum { packed: tensor })
}

fn ifft2_impl(s: &Spectrum, strict: bool, op: &'static str) -> Result<Tensor> {
    let c = s.channels();
    let (h, w) = (s.height(), s.width());
    let hw = h * w;
    if hw == 0 {
        return Err(Error::Shape {
            op,
            detail: "empty spatial extent".into(),
        });
    }
    let norm = 1.0 / hw as f64;
    let data = s.packed.data();
    let mut out = vec![0.0; c * hw];
    let mut max_imag = 0.0f64;
    let mut re = vec![0.0; hw];
    let mut im = vec![0.0; hw];
    for ch in 0..c {
        re.copy_from_slice(&data[ch * hw..(ch + 1) * hw]);
        im.copy_from_slice(&data[(c + ch) * hw..(c + ch + 1) * hw]);
        dft2_plane(&mut re, &mut im, h, w, 1.0);
        for px in 0..hw {
            out[ch * hw + px] = re[px] * norm;
            max_imag = max_imag.max((im[px] * norm).abs());
        }
    }
    if strict && max_imag >= IMAG_RESIDUE_LIMIT {
        return Err(Error::Symmetry { max_residue: max_imag });
    }
    let need = s.packed.needs_grad();
    Tensor::from_op(
        op,
        vec![c, h, w],
        out,
        vec![s.packed.clone()],
        Box::new(move |g, slots| {
            if need {
                // Adjoint of "normalized inverse transform, real part": the
                // forward transform of the gradient, scaled by 1/(H*W).
                let mut dpacked = vec![0.0; 2 * c * hw];
                let mut gr = vec![0.0; hw];
                let mut gi = vec![0.0; hw];
                for ch in 0..c {
                    gr.copy_from_slice(&g[ch * hw..(ch + 1) * hw]);
                    gi.iter_mut().for_each(|v| *v = 0.0);
                    dft2_plane(&mut gr, &mut gi, h, w, -1.0);
                    for px in 0..hw {
                        dpacked[ch * hw + px] = gr[px] * norm;
                        dpacked[(c + ch) * hw + px] = gi[px] * norm;
                    }
                }
                slots[0] = Some(dpacked);
            }
        }),
    )
}

/// Inverse 2D transform back to a real `(C, H, W)` tensor.
///
/// Fails with [`Error::Symmetry`] if the spectrum's inverse has imaginary
/// magnitude at or above [`IMAG_RESIDUE_LIMIT`], which means the spectrum
/// does not describe a real signal.
pub fn ifft2(s: &Spectrum) -> Result<Tensor> {
    ifft2_impl(s, true, "ifft2")
}

/// Inverse 2D transform that keeps only the real part, without checking the
/// imaginary residue. Used where spectrum arithmetic intentionally breaks
/// conjugate symmetry and the real projection is the defined result.
pub fn ifft2_real(s: &Spectrum) -> Result<Tensor> {
    ifft2_impl(s, false, "ifft2_real")
}
