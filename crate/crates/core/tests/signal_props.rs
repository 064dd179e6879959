use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use powerscan_core::signal_prep::{
    lowpass_filter, normalize_laser, Butterworth, FilterSpec, HysteresisThresholds,
};

/// State of sample i is decided by the most recent sample at or before i that
/// crossed either threshold; OFF if none did.
fn replay_oracle(raw: &[f64], on: f64, off: f64) -> Vec<bool> {
    (0..raw.len())
        .map(|i| {
            raw[..=i]
                .iter()
                .rev()
                .find(|&&v| v >= on || v <= off)
                .is_some_and(|&v| v >= on)
        })
        .collect()
}

fn states(raw: &[f64], th: &HysteresisThresholds) -> Vec<bool> {
    let s = normalize_laser(raw, th).unwrap();
    (0..s.len()).map(|i| s.is_on(i)).collect()
}

#[test]
fn hysteresis_matches_replay_on_random_signals() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let th = HysteresisThresholds::default();
    for _ in 0..10_000 {
        let n = rng.random_range(1..=200);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..3.5)).collect();
        assert_eq!(states(&raw, &th), replay_oracle(&raw, 2.2, 1.1));
    }
}

#[test]
fn hysteresis_exhaustive_three_level() {
    // low, in-band and high levels, plus exact threshold values
    let levels = [0.0, 1.1, 1.6, 2.2, 3.0];
    let th = HysteresisThresholds::default();
    for n in 1..=7u32 {
        for code in 0..levels.len().pow(n) {
            let mut c = code;
            let raw: Vec<f64> = (0..n)
                .map(|_| {
                    let v = levels[c % levels.len()];
                    c /= levels.len();
                    v
                })
                .collect();
            assert_eq!(states(&raw, &th), replay_oracle(&raw, 2.2, 1.1), "{raw:?}");
        }
    }
}

#[test]
fn binary_signals_pass_through() {
    let th = HysteresisThresholds::new(0.7, 0.3).unwrap();
    for n in 1..=12u32 {
        for code in 0u32..(1 << n) {
            let bits: Vec<bool> = (0..n).map(|i| code >> i & 1 == 1).collect();
            let raw: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            assert_eq!(states(&raw, &th), bits);
        }
    }
}

fn analytic_gain(order: usize, fc: f64, fs: f64, f: f64) -> f64 {
    let w = (std::f64::consts::PI * f / fs).tan() / (std::f64::consts::PI * fc / fs).tan();
    1.0 / (1.0 + w.powi(2 * order as i32)).sqrt()
}

#[test]
fn magnitude_matches_bilinear_butterworth() {
    for (order, fc) in [
        (1, 500.0),
        (2, 1000.0),
        (4, 6000.0),
        (5, 3000.0),
        (8, 2500.0),
    ] {
        let spec = FilterSpec::new(order, fc, 20_000.0).unwrap();
        let f = Butterworth::lowpass(&spec).unwrap();
        for k in 0..100 {
            let freq = 9_990.0 * k as f64 / 100.0;
            let want = analytic_gain(order, fc, 20_000.0, freq);
            let got = f.magnitude(freq, 20_000.0);
            assert!(
                (got - want).abs() < 1e-9,
                "order {order} fc {fc} f {freq}: {got} vs {want}"
            );
        }
    }
}

/// Amplitude of a sinusoid at `freq` in the steady-state tail of `y`.
fn tone_amplitude(y: &[f64], freq: f64, fs: f64, periods: usize) -> f64 {
    let per = (fs / freq).round() as usize;
    let tail = &y[y.len() - per * periods..];
    let offset = y.len() - tail.len();
    let (mut s, mut c) = (0.0, 0.0);
    for (i, v) in tail.iter().enumerate() {
        let ph = std::f64::consts::TAU * freq * (i + offset) as f64 / fs;
        s += v * ph.sin();
        c += v * ph.cos();
    }
    2.0 * s.hypot(c) / tail.len() as f64
}

#[test]
fn time_domain_gain_at_cutoff() {
    let fs = 20_000.0;
    for fc in [1000.0, 2000.0, 5000.0] {
        let spec = FilterSpec::new(4, fc, fs).unwrap();
        let x: Vec<f64> = (0..20_000)
            .map(|i| (std::f64::consts::TAU * fc * i as f64 / fs).sin())
            .collect();
        let amp = tone_amplitude(&lowpass_filter(&x, &spec).unwrap(), fc, fs, 100);
        assert!(
            (amp - 0.5f64.sqrt()).abs() < 0.02 * 0.5f64.sqrt(),
            "fc {fc}: {amp}"
        );
    }
}

proptest! {
    #[test]
    fn raising_on_threshold_never_adds_on(
        raw in prop::collection::vec(-1.0f64..4.0, 1..200),
        off in 0.0f64..1.5,
        on in 1.6f64..3.0,
        bump in 0.0f64..1.0,
    ) {
        let low = states(&raw, &HysteresisThresholds::new(on, off).unwrap());
        let high = states(&raw, &HysteresisThresholds::new(on + bump, off).unwrap());
        for (l, h) in low.iter().zip(&high) {
            prop_assert!(!h || *l);
        }
    }

    #[test]
    fn filter_is_linear(
        xy in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..300),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        order in 1usize..7,
        fc in 100.0f64..9000.0,
    ) {
        let spec = FilterSpec::new(order, fc, 20_000.0).unwrap();
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let fm = lowpass_filter(&mix, &spec).unwrap();
        let fx = lowpass_filter(&x, &spec).unwrap();
        let fy = lowpass_filter(&y, &spec).unwrap();
        for i in 0..fm.len() {
            prop_assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_input_passes_unchanged(v in -10.0f64..10.0, n in 1usize..500, order in 1usize..9) {
        let spec = FilterSpec::new(order, 1000.0, 20_000.0).unwrap();
        for y in lowpass_filter(&vec![v; n], &spec).unwrap() {
            prop_assert!((y - v).abs() < 1e-9 * (1.0 + v.abs()));
        }
    }
}
