//! Daily shapes: residential load, clear-sky PV, and tariff presets.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

fn hour_of(step: usize, dt_hours: f64) -> f64 {
    (step as f64 * dt_hours) % 24.0
}

/// Gaussian bump on the 24-hour circle.
fn bump(hour: f64, center: f64, width: f64) -> f64 {
    let d = (hour - center).abs();
    let d = d.min(24.0 - d);
    (-0.5 * (d / width).powi(2)).exp()
}

/// Residential daily load curve sampled at step midpoints, peak 1.0 near 19:00.
///
/// Overnight trough around 0.45, a morning shoulder near 08:00.
pub fn residential_load_shape(horizon: usize, dt_hours: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..horizon)
        .map(|t| {
            let h = hour_of(t, dt_hours) + dt_hours / 2.0;
            0.45 + 0.25 * bump(h, 8.0, 1.5) + 0.2 * bump(h, 13.0, 3.0) + 0.55 * bump(h, 19.0, 2.0)
        })
        .collect();
    let max = raw.iter().copied().fold(f64::MIN, f64::max);
    raw.into_iter().map(|v| v / max).collect()
}

/// Clear-sky PV output in kW: a sine bell between 06:00 and 18:00 with
/// multiplicative Gaussian noise of relative size `noise`, clamped to `[0, peak]`.
pub fn pv_profile<R: Rng + ?Sized>(
    peak_kw: f64,
    horizon: usize,
    dt_hours: f64,
    noise: f64,
    rng: &mut R,
) -> Vec<f64> {
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    (0..horizon)
        .map(|t| {
            let h = hour_of(t, dt_hours) + dt_hours / 2.0;
            let clear = if (6.0..18.0).contains(&h) {
                (std::f64::consts::PI * (h - 6.0) / 12.0).sin().powf(1.5)
            } else {
                0.0
            };
            let factor = 1.0 + normal.sample(rng);
            (peak_kw * clear * factor).clamp(0.0, peak_kw)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PricePreset {
    /// Three tiers: off-peak 0.15 $/kWh (23:00-07:00), shoulder 0.25, peak
    /// 0.45 (17:00-21:00); export at 0.05.
    Tou,
    /// A wholesale-like curve with morning and evening ramps and a few seeded
    /// spikes; export at 40 % of the import price.
    Wholesale,
}

/// Buy and sell price tables for a preset.
pub fn price_preset<R: Rng + ?Sized>(
    preset: PricePreset,
    horizon: usize,
    dt_hours: f64,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    match preset {
        PricePreset::Tou => {
            let buy: Vec<f64> = (0..horizon)
                .map(|t| {
                    let h = hour_of(t, dt_hours);
                    if !(7.0..23.0).contains(&h) {
                        0.15
                    } else if (17.0..21.0).contains(&h) {
                        0.45
                    } else {
                        0.25
                    }
                })
                .collect();
            (buy, vec![0.05; horizon])
        }
        PricePreset::Wholesale => {
            let mut buy: Vec<f64> = (0..horizon)
                .map(|t| {
                    let h = hour_of(t, dt_hours) + dt_hours / 2.0;
                    0.08 + 0.10 * bump(h, 8.0, 1.5) + 0.30 * bump(h, 18.5, 1.5) - 0.03 * bump(h, 13.0, 2.0)
                })
                .collect();
            if horizon > 0 {
                for _ in 0..3 {
                    let at = rng.random_range(0..horizon);
                    let height = rng.random_range(0.3..1.2);
                    buy[at] += height;
                    if at + 1 < horizon {
                        buy[at + 1] += 0.5 * height;
                    }
                }
            }
            let sell = buy.iter().map(|b| 0.4 * b).collect();
            (buy, sell)
        }
    }
}
