use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selanc_core::baselines::frost_beamformer_run;
use selanc_core::dsp::filter::filter_slice;
use selanc_core::dsp::{gen_signal, ImpulseResponse, SignalKind};
use selanc_core::metrics::{band_nr, noise_reduction, ratio_db, relative_energy, sdi, snr_db, DB_LIMIT};

const FS: f64 = 8000.0;

fn noise(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn scaled(x: &[f64], c: f64) -> Vec<f64> {
    x.iter().map(|v| v * c).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn nr_of_a_gain_is_its_inverse_in_db(seed in 0u64..1000, a in 0.01f64..10.0) {
        let v = noise(seed, 512);
        let nr = noise_reduction(&v, &scaled(&v, a), 0..512).unwrap();
        prop_assert!((nr.value + 20.0 * a.log10()).abs() < 1e-9);
    }

    #[test]
    fn nr_and_sdi_are_scale_invariant(seed in 0u64..1000, c in 1e-3f64..1e3) {
        let (s, v) = (noise(seed, 800), noise(seed + 1, 800));
        let (e_s, v_anc) = (noise(seed + 2, 800), noise(seed + 3, 800));
        let nr = noise_reduction(&v, &v_anc, 200..800).unwrap().value;
        let nr_c = noise_reduction(&scaled(&v, c), &scaled(&v_anc, c), 200..800).unwrap().value;
        prop_assert!((nr - nr_c).abs() < 1e-9);
        let d = sdi(&s, &e_s, 200..800, Some(140.0), FS).unwrap().value;
        let d_c = sdi(&scaled(&s, c), &scaled(&e_s, c), 200..800, Some(140.0), FS).unwrap().value;
        prop_assert!((d - d_c).abs() < 1e-9);
    }

    #[test]
    fn sdi_of_an_additive_error(seed in 0u64..1000, eps in 1e-3f64..1.0) {
        let s = noise(seed, 600);
        let err = noise(seed + 7, 600);
        let e_s: Vec<f64> = s.iter().zip(&err).map(|(a, b)| a + eps * b).collect();
        let expected = ratio_db(err.iter().map(|v| eps * eps * v * v).sum(), s.iter().map(|v| v * v).sum()).value;
        prop_assert!((sdi(&s, &e_s, 0..600, None, FS).unwrap().value - expected).abs() < 1e-9);
    }

    #[test]
    fn output_snr_gain_is_nr_plus_desired_gain(seed in 0u64..1000, gs in 0.1f64..2.0, gv in 0.01f64..2.0) {
        let (s, v) = (noise(seed, 400), noise(seed + 1, 400));
        let (e_s, v_anc) = (scaled(&s, gs), scaled(&v, gv));
        let gain = snr_db(&e_s, &v_anc, 0..400).unwrap().value - snr_db(&s, &v, 0..400).unwrap().value;
        let nr = noise_reduction(&v, &v_anc, 0..400).unwrap().value;
        prop_assert!((gain - nr - 20.0 * gs.log10()).abs() < 1e-9);
    }

    #[test]
    fn broadband_gain_reduces_every_band_equally(seed in 0u64..1000, a in 0.05f64..1.0) {
        let v = noise(seed, 4000);
        let bands = [(100.0, 400.0), (400.0, 1200.0), (1200.0, 3500.0)];
        for b in band_nr(&v, &scaled(&v, a), &bands, FS, 1000..4000).unwrap() {
            prop_assert!((b.nr.unwrap().value + 20.0 * a.log10()).abs() < 1e-6);
        }
    }

    #[test]
    fn relative_energy_is_a_power_ratio(seed in 0u64..1000, a in 0.01f64..3.0) {
        let y = noise(seed, 300);
        prop_assert!((relative_energy(&scaled(&y, a), &y, 0..300).unwrap() - 100.0 * a * a).abs() < 1e-9 * (1.0 + a * a));
    }
}

#[test]
fn identities_at_the_limits() {
    let v = noise(3, 256);
    assert_eq!(noise_reduction(&v, &v, 0..256).unwrap().value, 0.0);
    let d = sdi(&v, &v, 0..256, None, FS).unwrap();
    assert_eq!(d.value, -DB_LIMIT);
    assert!(sdi(&vec![0.0; 256], &v, 0..256, None, FS).is_err());
}

/// The extractor is distortionless towards the steering direction whatever its weights.
#[test]
fn frost_passes_the_steered_source_undistorted() {
    let n = 4000;
    let src = gen_signal(SignalKind::SpeechLike, n, 5, FS).unwrap().samples().to_vec();
    let delays = [2usize, 5, 3];
    let reirs: Vec<ImpulseResponse> = delays.iter().map(|&d| ImpulseResponse::delta(d, 8, FS).unwrap()).collect();
    let target = ImpulseResponse::delta(6, 8, FS).unwrap();
    let mics: Vec<Vec<f64>> = reirs.iter().map(|h| filter_slice(h.taps(), &src)).collect();
    let out = frost_beamformer_run(&mics, &reirs, &target, 16, 0.05).unwrap();
    let want = filter_slice(target.taps(), &src);
    let d = sdi(&want, &out, 100..n, None, FS).unwrap();
    assert!(d.value < -100.0, "SDI {}", d.value);
}

/// Interference from another direction is attenuated while the constraint holds.
#[test]
fn frost_attenuates_off_axis_interference() {
    let n = 16000;
    let src = gen_signal(SignalKind::SpeechLike, n, 5, FS).unwrap().samples().to_vec();
    let jam = gen_signal(SignalKind::White, n, 9, FS).unwrap().samples().to_vec();
    let reirs: Vec<ImpulseResponse> = (0..4).map(|_| ImpulseResponse::delta(3, 8, FS).unwrap()).collect();
    let jam_delays = [0usize, 2, 4, 6];
    let mics: Vec<Vec<f64>> = jam_delays
        .iter()
        .map(|&d| {
            let s = filter_slice(reirs[0].taps(), &src);
            let j = filter_slice(ImpulseResponse::delta(d, 8, FS).unwrap().taps(), &jam);
            s.iter().zip(&j).map(|(a, b)| a + b).collect()
        })
        .collect();
    let jam_only: Vec<Vec<f64>> = jam_delays.iter().map(|&d| filter_slice(ImpulseResponse::delta(d, 8, FS).unwrap().taps(), &jam)).collect();
    let out = frost_beamformer_run(&mics, &reirs, &reirs[0], 16, 0.05).unwrap();
    let want = filter_slice(reirs[0].taps(), &src);
    let residual: Vec<f64> = out.iter().zip(&want).map(|(a, b)| a - b).collect();
    let nr = noise_reduction(&jam_only[0][n / 2..], &residual[n / 2..], 0..n / 2).unwrap();
    assert!(nr.value > 6.0, "interference reduction {} dB", nr.value);
}
