//! Biquad sections (RBJ cookbook forms).

use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    /// Feed-forward coefficients, normalised so `a0 = 1`.
    pub b: [f64; 3],
    /// Feedback coefficients `a1, a2`.
    pub a: [f64; 2],
}

impl Biquad {
    /// Peaking equaliser centred at `center_hz` with `gain_db` boost (or cut).
    pub fn peaking(center_hz: f64, gain_db: f64, q: f64, sample_rate: u32) -> Self {
        let a = 10f64.powf(gain_db / 40.0);
        let w0 = 2.0 * PI * center_hz / sample_rate as f64;
        let alpha = w0.sin() / (2.0 * q);
        let cos = w0.cos();
        let a0 = 1.0 + alpha / a;
        Self {
            b: [(1.0 + alpha * a) / a0, -2.0 * cos / a0, (1.0 - alpha * a) / a0],
            a: [-2.0 * cos / a0, (1.0 - alpha / a) / a0],
        }
    }

    /// Filters `x` from rest (transposed direct form II).
    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        let (mut s1, mut s2) = (0.0, 0.0);
        x.iter()
            .map(|&v| {
                let y = self.b[0] * v + s1;
                s1 = self.b[1] * v - self.a[0] * y + s2;
                s2 = self.b[2] * v - self.a[1] * y;
                y
            })
            .collect()
    }

    /// Magnitude response at `freq_hz`.
    pub fn gain_at(&self, freq_hz: f64, sample_rate: u32) -> f64 {
        let w = 2.0 * PI * freq_hz / sample_rate as f64;
        let z1 = rustfft::num_complex::Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b[0] + self.b[1] * z1 + self.b[2] * z2;
        let den = 1.0 + self.a[0] * z1 + self.a[1] * z2;
        (num / den).norm()
    }
}

/// Runs `x` through every section in order.
pub fn cascade(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    for s in sections {
        y = s.process(&y);
    }
    y
}

/// Adjoint of [`cascade`] on a finite signal: time-reverse, filter,
/// time-reverse.
pub fn cascade_adjoint(sections: &[Biquad], g: &[f64]) -> Vec<f64> {
    let mut r: Vec<f64> = g.iter().rev().copied().collect();
    for s in sections.iter().rev() {
        r = s.process(&r);
    }
    r.reverse();
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peaking_gain_at_center() {
        let b = Biquad::peaking(1000.0, 15.0, 1.0, 16_000);
        let g = 20.0 * b.gain_at(1000.0, 16_000).log10();
        assert!((g - 15.0).abs() < 1e-9, "{g}");
        assert!((b.gain_at(7900.0, 16_000) - 1.0).abs() < 0.05);
        let cut = Biquad::peaking(200.0, -15.0, 1.0, 16_000);
        assert!((20.0 * cut.gain_at(200.0, 16_000).log10() + 15.0).abs() < 1e-9);
    }

    #[test]
    fn zero_gain_is_identity() {
        let b = Biquad::peaking(35.0, 0.0, 1.0, 16_000);
        let x: Vec<f64> = (0..100).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let y = b.process(&x);
        for (a, c) in x.iter().zip(&y) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_identity() {
        let sections = [
            Biquad::peaking(200.0, 15.0, 1.0, 16_000),
            Biquad::peaking(4000.0, -15.0, 1.0, 16_000),
        ];
        let x: Vec<f64> = (0..300).map(|i| ((i * 31) % 17) as f64 / 17.0 - 0.5).collect();
        let g: Vec<f64> = (0..300).map(|i| ((i * 11) % 19) as f64 / 19.0 - 0.5).collect();
        let lhs: f64 = cascade(&sections, &x).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(cascade_adjoint(&sections, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
