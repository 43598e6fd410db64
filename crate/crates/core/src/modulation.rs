//! Baseband modulators for the six scheme corpus. All synthesis runs in f64
//! and is deterministic given the bit source.

use crate::error::{CoreError, Result};
use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Samples per symbol for the single-carrier schemes.
pub const SPS: usize = 8;
/// Nyquist pulse rolloff.
pub const ROLLOFF: f64 = 0.35;
/// Pulse span in symbols.
pub const PULSE_SPAN: usize = 8;
/// OFDM subcarrier count and cyclic prefix length.
pub const OFDM_N: usize = 256;
pub const OFDM_CP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModScheme {
    Ask4,
    Pam8,
    Psk16,
    Qam32Cross,
    Fsk2,
    Ofdm256,
}

impl ModScheme {
    pub const ALL: [ModScheme; 6] = [
        ModScheme::Ask4,
        ModScheme::Pam8,
        ModScheme::Psk16,
        ModScheme::Qam32Cross,
        ModScheme::Fsk2,
        ModScheme::Ofdm256,
    ];

    pub fn label(&self) -> u8 {
        ModScheme::ALL.iter().position(|s| s == self).unwrap() as u8
    }

    pub fn from_label(label: u8) -> Result<ModScheme> {
        ModScheme::ALL
            .get(label as usize)
            .copied()
            .ok_or_else(|| CoreError::InvalidArgument(format!("unknown class label {label}")))
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModScheme::Ask4 => "4ask",
            ModScheme::Pam8 => "8pam",
            ModScheme::Psk16 => "16psk",
            ModScheme::Qam32Cross => "32qam-cross",
            ModScheme::Fsk2 => "2fsk",
            ModScheme::Ofdm256 => "ofdm256",
        }
    }

    pub fn bits_per_symbol(&self) -> usize {
        match self {
            ModScheme::Ask4 => 2,
            ModScheme::Pam8 => 3,
            ModScheme::Psk16 => 4,
            ModScheme::Qam32Cross => 5,
            ModScheme::Fsk2 => 1,
            ModScheme::Ofdm256 => 2 * OFDM_N,
        }
    }

    pub fn samples_per_symbol(&self) -> usize {
        match self {
            ModScheme::Ofdm256 => OFDM_N + OFDM_CP,
            _ => SPS,
        }
    }
}

/// Deterministic random bit stream.
pub struct BitSource {
    rng: ChaCha8Rng,
}

impl BitSource {
    pub fn new(seed: u64) -> Self {
        BitSource { rng: rng::seeded(seed) }
    }

    pub fn bit(&mut self) -> u8 {
        self.rng.gen_range(0..2u8)
    }

    /// Next `k` bits as an integer, first bit in the MSB position.
    pub fn bits(&mut self, k: usize) -> u32 {
        let mut v = 0;
        for _ in 0..k {
            v = (v << 1) | self.bit() as u32;
        }
        v
    }
}

pub fn gray(k: u32) -> u32 {
    k ^ (k >> 1)
}

/// Position of code `v` in the Gray sequence: gray(inv_gray(v)) == v.
pub fn inv_gray(mut v: u32) -> u32 {
    let mut k = 0;
    while v != 0 {
        k ^= v;
        v >>= 1;
    }
    k
}

/// Raised-cosine (Nyquist) pulse sampled at integer offsets from its peak.
/// Zero at nonzero multiples of the symbol period, so symbol centers are
/// ISI-free up to span truncation.
fn raised_cosine_taps() -> Vec<f64> {
    let half = (PULSE_SPAN / 2) * SPS;
    let t_sym = SPS as f64;
    let sinc = |x: f64| {
        if x.abs() < 1e-12 {
            1.0
        } else {
            (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
        }
    };
    (0..=2 * half)
        .map(|i| {
            let t = i as f64 - half as f64;
            let x = t / t_sym;
            let denom = 1.0 - (2.0 * ROLLOFF * x) * (2.0 * ROLLOFF * x);
            if denom.abs() < 1e-9 {
                // L'Hopital at t = ±T/(2*rolloff)
                std::f64::consts::FRAC_PI_4 * sinc(1.0 / (2.0 * ROLLOFF))
            } else {
                sinc(x) * (std::f64::consts::PI * ROLLOFF * x).cos() / denom
            }
        })
        .collect()
}

fn ask_symbol(bits: u32, order: u32) -> Complex64 {
    let j = inv_gray(bits) as i32;
    Complex64::new((2 * j - (order as i32 - 1)) as f64, 0.0)
}

fn psk16_symbol(bits: u32) -> Complex64 {
    let j = inv_gray(bits) as f64;
    let phi = 2.0 * std::f64::consts::PI * j / 16.0;
    Complex64::new(phi.cos(), phi.sin())
}

/// The 32-point cross constellation: 6x6 grid minus the four corners,
/// enumerated in a serpentine order so Gray-coded indices step between
/// adjacent points.
pub fn qam32_points() -> Vec<Complex64> {
    let levels = [-5.0, -3.0, -1.0, 1.0, 3.0, 5.0];
    let mut pts = Vec::with_capacity(32);
    for (ri, y) in levels.iter().enumerate() {
        let row: Vec<f64> = if ri % 2 == 0 {
            levels.to_vec()
        } else {
            levels.iter().rev().cloned().collect()
        };
        for x in row {
            if x.abs() > 4.0 && y.abs() > 4.0 {
                continue; // corner
            }
            pts.push(Complex64::new(x, *y));
        }
    }
    assert_eq!(pts.len(), 32);
    pts
}

fn qam32_symbol(bits: u32, points: &[Complex64]) -> Complex64 {
    points[inv_gray(bits) as usize]
}

/// Pulse-shaped single-carrier waveform. Sample `i*SPS` is the center of
/// symbol `i`.
fn shape_linear(symbols: &[Complex64], n_samples: usize) -> Vec<Complex64> {
    let taps = raised_cosine_taps();
    let half = (taps.len() - 1) / 2;
    let mut out = vec![Complex64::new(0.0, 0.0); n_samples];
    for (m, sym) in symbols.iter().enumerate() {
        let center = m * SPS;
        for (ti, h) in taps.iter().enumerate() {
            let pos = center as isize + ti as isize - half as isize;
            if pos >= 0 && (pos as usize) < n_samples && *h != 0.0 {
                out[pos as usize] += sym * *h;
            }
        }
    }
    out
}

/// u = M_s(b): modulate a bit stream into at least `n_samples` complex
/// baseband samples.
pub fn modulate(scheme: ModScheme, bits: &mut BitSource, n_samples: usize) -> Result<Vec<Complex64>> {
    if n_samples == 0 {
        return Err(CoreError::InvalidArgument("modulate: zero samples".into()));
    }
    match scheme {
        ModScheme::Ask4 | ModScheme::Pam8 | ModScheme::Psk16 | ModScheme::Qam32Cross => {
            let bps = scheme.bits_per_symbol();
            let n_sym = n_samples / SPS + PULSE_SPAN + 2;
            let qam = qam32_points();
            let symbols: Vec<Complex64> = (0..n_sym)
                .map(|_| {
                    let b = bits.bits(bps);
                    match scheme {
                        ModScheme::Ask4 => ask_symbol(b, 4),
                        ModScheme::Pam8 => ask_symbol(b, 8),
                        ModScheme::Psk16 => psk16_symbol(b),
                        ModScheme::Qam32Cross => qam32_symbol(b, &qam),
                        _ => unreachable!(),
                    }
                })
                .collect();
            Ok(shape_linear(&symbols, n_samples))
        }
        ModScheme::Fsk2 => {
            // Minimum orthogonal tone spacing: df = 1/(2*T_sym), continuous phase.
            let dphi = std::f64::consts::PI / SPS as f64; // 2*pi*df/fs = pi/SPS
            let mut out = Vec::with_capacity(n_samples);
            let mut phase = 0.0f64;
            'outer: loop {
                let sign = if bits.bit() == 1 { 1.0 } else { -1.0 };
                for _ in 0..SPS {
                    out.push(Complex64::new(phase.cos(), phase.sin()));
                    phase += sign * dphi;
                    if out.len() == n_samples {
                        break 'outer;
                    }
                }
            }
            Ok(out)
        }
        ModScheme::Ofdm256 => {
            let mut planner = FftPlanner::<f64>::new();
            let ifft = planner.plan_fft_inverse(OFDM_N);
            let scale = 1.0 / (OFDM_N as f64).sqrt();
            let mut out = Vec::with_capacity(n_samples + OFDM_N + OFDM_CP);
            while out.len() < n_samples {
                let mut bins: Vec<Complex64> = (0..OFDM_N)
                    .map(|_| {
                        let b = bits.bits(2);
                        let i = if b & 0b01 != 0 { -1.0 } else { 1.0 };
                        let q = if b & 0b10 != 0 { -1.0 } else { 1.0 };
                        Complex64::new(i, q) / 2f64.sqrt()
                    })
                    .collect();
                ifft.process(&mut bins);
                for v in bins.iter_mut() {
                    *v *= scale;
                }
                // cyclic prefix
                out.extend_from_slice(&bins[OFDM_N - OFDM_CP..]);
                out.extend_from_slice(&bins);
            }
            out.truncate(n_samples.max(OFDM_N + OFDM_CP));
            Ok(out)
        }
    }
}

/// Unitary forward DFT; the test oracle for OFDM round trips.
pub fn dft_unitary(x: &[Complex64]) -> Vec<Complex64> {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(x.len());
    let mut buf = x.to_vec();
    fft.process(&mut buf);
    let scale = 1.0 / (x.len() as f64).sqrt();
    buf.iter().map(|v| v * scale).collect()
}
