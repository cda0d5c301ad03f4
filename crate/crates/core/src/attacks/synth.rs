use std::f64::consts::PI;

use rand::Rng;

/// Speech-like interferer: a gliding harmonic source with two moving
/// formants, gated by a syllable-rate envelope.
pub fn babble(len: usize, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;
    let f0 = rng.gen_range(100.0..220.0);
    let vibrato = rng.gen_range(0.5..2.0);
    let syllable = rng.gen_range(3.0..5.0);
    let formants = [rng.gen_range(400.0..900.0), rng.gen_range(1100.0..2400.0)];
    let drift = [rng.gen_range(0.2..0.7), rng.gen_range(0.2..0.7)];
    let env_phase = rng.gen_range(0.0..2.0 * PI);
    let mut phase = 0.0;
    (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            let pitch = f0 * (1.0 + 0.08 * (2.0 * PI * vibrato * t).sin());
            phase += 2.0 * PI * pitch / sr;
            let env = (2.0 * PI * syllable * t + env_phase).sin().max(0.0).powi(2);
            let mut acc = 0.0;
            for k in 1..=30 {
                let fk = pitch * k as f64;
                if fk >= nyquist {
                    break;
                }
                let weight: f64 = formants
                    .iter()
                    .zip(&drift)
                    .map(|(&fc, &d)| {
                        let centre = fc * (1.0 + 0.2 * (2.0 * PI * d * t).sin());
                        (-((fk - centre) / 250.0).powi(2)).exp()
                    })
                    .sum();
                acc += (weight + 0.05) / k as f64 * (k as f64 * phase).sin();
            }
            env * acc
        })
        .collect()
}
