//! Closed-loop invariants on a short desk scene.

use selanc_core::adaptive::{run_closed_loop, Controller, LoopConfig, Plant, SimulationTrace, VssParams};
use selanc_core::baselines::{run_baseline, run_unconstrained, BaselineConfig, DEFAULT_FROST_MU};
use selanc_core::constraint::{build_projection, constraint_residual, ProjectionPair, Regularization};
use selanc_core::harness::{default_baselines, proposed_constraint, ProposedConfig};
use selanc_core::metrics::{fixed_filter_trace, replay_component};
use selanc_core::scene::{render, RenderedScene, SceneConfig};

fn scene(secs: f64) -> RenderedScene {
    let text = format!(
        r#"{{"version":1,"geometry":{{"preset":"glasses6"}},"duration_s":{secs},"filter_len":40,
            "desired":{{"doa_deg":0,"signal":{{"kind":"speech_like"}},"seed":1}},
            "noises":[{{"doa_deg":60,"signal":{{"kind":"pink"}},"seed":2}}],"snr_db":0}}"#
    );
    let cfg = SceneConfig::from_json_str(&text).unwrap();
    render(&cfg.to_scene().unwrap(), cfg.duration_samples()).unwrap()
}

fn fixed_mu(mu: f64) -> VssParams {
    VssParams { mu_max: mu, mu_min: mu, alpha: 1.0, gamma: 0.0, beta: 0.0 }
}

fn loop_cfg(scene: &RenderedScene, mu: f64) -> LoopConfig {
    let mut c = LoopConfig::new(fixed_mu(mu), scene.fs);
    c.hop = 40;
    c
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rms(a: &[f64]) -> f64 {
    (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt()
}

fn assert_components_exact(trace: &SimulationTrace) {
    let c = trace.components.as_ref().expect("loop records components");
    assert!(c.recomposition_error(&trace.e) < 1e-12, "recomposition {}", c.recomposition_error(&trace.e));
    let y: Vec<f64> = c.y_s.iter().zip(&c.y_v).map(|(a, b)| a + b).collect();
    assert!(max_abs_diff(&y, &trace.y) <= 1e-12 * rms(&trace.y).max(1.0));
}

#[test]
fn frozen_loop_matches_fixed_filter() {
    let scene = scene(0.3);
    let c = proposed_constraint(&scene, &ProposedConfig::default()).unwrap();
    let pair = build_projection(&c, &scene.secondary, Regularization::default()).unwrap();
    let q = pair.q().to_vec();
    let trace = run_closed_loop(&scene, c.channel_mics(), pair, &loop_cfg(&scene, 0.0)).unwrap();
    assert!(trace.snapshots.iter().all(|s| s.anc == q));
    let fixed = fixed_filter_trace(&scene, c.channel_mics(), &q).unwrap();
    assert!(max_abs_diff(&trace.e, &fixed.e) <= 1e-10 * rms(&fixed.e));
}

#[test]
fn identity_projection_is_the_unconstrained_controller() {
    let scene = scene(0.3);
    let cfg = BaselineConfig::unconstrained(scene.num_mics(), scene.error_mic);
    let mics = cfg.channel_mics(scene.error_mic);
    let lc = loop_cfg(&scene, 1e-3);
    let a = run_unconstrained(&scene, &cfg, &lc).unwrap();
    let b = run_closed_loop(&scene, &mics, ProjectionPair::identity(mics.len() * scene.filter_len), &lc).unwrap();
    assert_eq!(a.e, b.e);
    let mut strided = lc.clone();
    strided.projection_stride = 7;
    let c = run_closed_loop(&scene, &mics, ProjectionPair::identity(mics.len() * scene.filter_len), &strided).unwrap();
    assert_eq!(a.e, c.e);
}

#[test]
fn reconstructed_disturbance_equals_d() {
    let scene = scene(0.1);
    let mics = BaselineConfig::unconstrained(scene.num_mics(), scene.error_mic).channel_mics(scene.error_mic);
    let k = mics.len();
    let mut ctrl = Controller::new(&scene.secondary, k, scene.filter_len, ProjectionPair::identity(k * scene.filter_len), fixed_mu(1e-3)).unwrap();
    let mut plant = Plant::new(&scene.secondary).unwrap();
    let sig: Vec<Vec<f64>> = mics.iter().map(|&m| scene.mic_signal(m)).collect();
    let d = scene.d();
    for n in 0..scene.len() {
        let e = plant.error(d[n]);
        let refs: Vec<f64> = sig[..k - 1].iter().map(|s| s[n]).collect();
        let dhat = ctrl.push_inputs(&refs, e).unwrap();
        assert!((dhat - d[n]).abs() <= 1e-12 * (1.0 + d[n].abs()), "sample {n}: {dhat} vs {}", d[n]);
        let y = ctrl.output();
        ctrl.adapt(e);
        ctrl.record_drive(y);
        plant.push(y);
    }
}

#[test]
fn adaptive_constraint_holds_and_components_are_exact() {
    let scene = scene(0.5);
    let c = proposed_constraint(&scene, &ProposedConfig::default()).unwrap();
    let pair = build_projection(&c, &scene.secondary, Regularization::PseudoInverse).unwrap();
    let q_res = constraint_residual(pair.q(), &scene.secondary, &c).unwrap();
    let trace = run_closed_loop(&scene, c.channel_mics(), pair, &loop_cfg(&scene, 1e-3)).unwrap();
    assert!(!trace.diverged());
    for s in &trace.snapshots {
        assert!((constraint_residual(&s.anc, &scene.secondary, &c).unwrap() - q_res).abs() < 1e-9);
    }
    assert_components_exact(&trace);
}

#[test]
fn frozen_components_match_snapshot_replay() {
    let scene = scene(0.3);
    let c = proposed_constraint(&scene, &ProposedConfig::default()).unwrap();
    let pair = build_projection(&c, &scene.secondary, Regularization::default()).unwrap();
    let trace = run_closed_loop(&scene, c.channel_mics(), pair, &loop_cfg(&scene, 0.0)).unwrap();
    let comps = trace.components.clone().unwrap();
    let (e_s, y_s) = replay_component(&trace, &scene.desired).unwrap();
    let (v_anc, _) = replay_component(&trace, &scene.noise).unwrap();
    assert!(max_abs_diff(&comps.e_s, &e_s) <= 1e-12 * rms(&e_s).max(1.0));
    assert!(max_abs_diff(&comps.y_s, &y_s) <= 1e-12 * rms(&y_s).max(1.0));
    assert!(max_abs_diff(&comps.v_anc, &v_anc) <= 1e-12 * rms(&v_anc).max(1.0));
}

#[test]
fn hear_through_components_are_exact() {
    let scene = scene(0.3);
    let (pc, dc) = default_baselines(scene.num_mics(), scene.error_mic);
    for cfg in [pc, dc] {
        let trace = run_baseline(&scene, &cfg, &loop_cfg(&scene, 1e-4), DEFAULT_FROST_MU).unwrap();
        assert!(!trace.diverged());
        assert_components_exact(&trace);
    }
}

#[test]
fn muted_extraction_equals_unconstrained() {
    let scene = scene(0.3);
    let (mut pc, _) = default_baselines(scene.num_mics(), scene.error_mic);
    pc.extraction_gain_db = None;
    let lc = loop_cfg(&scene, 1e-3);
    let muted = run_baseline(&scene, &pc, &lc, DEFAULT_FROST_MU).unwrap();
    let plain = run_unconstrained(&scene, &BaselineConfig { bf_mics: Vec::new(), ..BaselineConfig::unconstrained(scene.num_mics(), scene.error_mic) }, &lc).unwrap();
    assert_eq!(pc.anc_mics, BaselineConfig::unconstrained(scene.num_mics(), scene.error_mic).anc_mics);
    assert!(max_abs_diff(&muted.e, &plain.e) <= 1e-12 * rms(&plain.e));
}
