//! Azimuthal (radial) averages of the centred 2-D Fourier spectrum.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Annulus statistics of one image. Radii are `round(‖k − centre‖)` around the
/// zero-frequency bin after the usual half-size shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    /// Mean magnitude per integer radius `0..n/2`.
    pub profile: Vec<f64>,
    /// Sum of squared magnitudes per radius, over every radius present.
    pub power: Vec<f64>,
    /// Bin count per radius, over every radius present.
    pub counts: Vec<usize>,
    /// Mean magnitude per radius, over every radius present.
    pub magnitude_means: Vec<f64>,
}

impl Spectrum {
    /// `Σ_r mean_r · count_r` of squared magnitudes.
    pub fn total_power(&self) -> f64 {
        self.power.iter().sum()
    }

    /// Share of power at radii strictly above `radius`.
    pub fn energy_fraction_above(&self, radius: usize) -> f64 {
        let total = self.total_power();
        if total <= 0.0 {
            return 0.0;
        }
        self.power.iter().skip(radius + 1).sum::<f64>() / total
    }
}

/// Centred 2-D DFT of a square row-major image.
pub fn centred_dft(image: &[f64], n: usize) -> Result<Vec<Complex<f64>>> {
    if n == 0 || image.len() != n * n {
        return Err(Error::shape(
            "azimuthal_spectrum",
            format!("{} values is not a square of side {n}", image.len()),
        ));
    }
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = image.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = buf[r * n + c];
        }
        fft.process(&mut col);
        for r in 0..n {
            buf[r * n + c] = col[r];
        }
    }
    let h = n / 2;
    let mut out = vec![Complex::new(0.0, 0.0); n * n];
    for r in 0..n {
        for c in 0..n {
            out[((r + h) % n) * n + (c + h) % n] = buf[r * n + c];
        }
    }
    Ok(out)
}

/// Radius bin of centred position `(r, c)`.
pub fn radius_bin(r: usize, c: usize, n: usize) -> usize {
    let h = (n / 2) as f64;
    ((r as f64 - h).hypot(c as f64 - h)).round() as usize
}

/// Radial profile of a square image given as `n·n` row-major values.
pub fn azimuthal_spectrum(image: &[f64], n: usize) -> Result<Spectrum> {
    let f = centred_dft(image, n)?;
    let rmax = radius_bin(0, 0, n);
    let mut mag = vec![0.0; rmax + 1];
    let mut power = vec![0.0; rmax + 1];
    let mut counts = vec![0usize; rmax + 1];
    for r in 0..n {
        for c in 0..n {
            let b = radius_bin(r, c, n);
            let z = f[r * n + c];
            mag[b] += z.norm();
            power[b] += z.norm_sqr();
            counts[b] += 1;
        }
    }
    let magnitude_means: Vec<f64> = mag
        .iter()
        .zip(&counts)
        .map(|(&s, &k)| if k == 0 { 0.0 } else { s / k as f64 })
        .collect();
    Ok(Spectrum {
        profile: magnitude_means[..n / 2].to_vec(),
        power,
        counts,
        magnitude_means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_all_dc() {
        let s = azimuthal_spectrum(&vec![2.0; 64], 8).unwrap();
        assert!((s.profile[0] - 128.0).abs() < 1e-9);
        assert!(s.profile[1..].iter().all(|v| v.abs() < 1e-9));
        assert_eq!(s.profile.len(), 4);
    }

    #[test]
    fn rejects_non_square() {
        assert!(azimuthal_spectrum(&[0.0; 10], 3).is_err());
    }
}
