//! Iterative radix-2 complex FFT and 2-D transforms of real fields.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub fn new(re: f64, im: f64) -> Self {
        Complex { re, im }
    }

    fn mul(self, o: Complex) -> Complex {
        Complex::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }

    fn add(self, o: Complex) -> Complex {
        Complex::new(self.re + o.re, self.im + o.im)
    }

    fn sub(self, o: Complex) -> Complex {
        Complex::new(self.re - o.re, self.im - o.im)
    }

    pub fn scale(self, s: f64) -> Complex {
        Complex::new(self.re * s, self.im * s)
    }
}

/// In-place FFT of a power-of-two length buffer. `inverse` uses the
/// conjugate twiddles and divides by the length.
pub fn fft_in_place(buf: &mut [Complex], inverse: bool) -> Result<()> {
    let n = buf.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Parameter(format!("FFT length must be a power of two, got {n}")));
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) };
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let half = len / 2;
        // Twiddles computed directly rather than by recurrence to limit rounding drift.
        let tw: Vec<Complex> = (0..half)
            .map(|k| Complex::new((ang * k as f64).cos(), (ang * k as f64).sin()))
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half].mul(tw[k]);
                buf[start + k] = a.add(b);
                buf[start + k + half] = a.sub(b);
            }
        }
        len <<= 1;
    }
    if inverse {
        let s = 1.0 / n as f64;
        for v in buf.iter_mut() {
            *v = v.scale(s);
        }
    }
    Ok(())
}

/// 2-D transform of a row-major `ny × nx` complex field.
pub fn fft2(data: &mut [Complex], nx: usize, ny: usize, inverse: bool) -> Result<()> {
    if data.len() != nx * ny {
        return Err(Error::Parameter(format!("fft2 buffer has {} entries, expected {}", data.len(), nx * ny)));
    }
    for row in data.chunks_mut(nx) {
        fft_in_place(row, inverse)?;
    }
    let mut col = vec![Complex::default(); ny];
    for i in 0..nx {
        for j in 0..ny {
            col[j] = data[j * nx + i];
        }
        fft_in_place(&mut col, inverse)?;
        for j in 0..ny {
            data[j * nx + i] = col[j];
        }
    }
    Ok(())
}

pub fn fft2_real(field: &[f64], nx: usize, ny: usize) -> Result<Vec<Complex>> {
    let mut buf: Vec<Complex> = field.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut buf, nx, ny, false)?;
    Ok(buf)
}

/// Inverse 2-D transform keeping only the real part.
pub fn ifft2_real(mut spec: Vec<Complex>, nx: usize, ny: usize) -> Result<Vec<f64>> {
    fft2(&mut spec, nx, ny, true)?;
    Ok(spec.into_iter().map(|c| c.re).collect())
}

/// Signed integer wavenumber of FFT bin `q` for length `n`.
pub fn wavenumber(q: usize, n: usize) -> f64 {
    if q <= n / 2 {
        q as f64
    } else {
        q as f64 - n as f64
    }
}
