//! Shared fixtures for the benchmarks.

use selanc_core::harness::{proposed_constraint, ProposedConfig};
use selanc_core::scene::{render, RenderedScene, SceneConfig};

/// Desk-scale glasses scene: speech-like desired at 0°, pink noise at 60°, `secs` long.
pub fn desk_scene(secs: f64) -> RenderedScene {
    let text = format!(
        r#"{{"version":1,"geometry":{{"preset":"glasses6"}},"duration_s":{secs},
            "desired":{{"doa_deg":0,"signal":{{"kind":"speech_like"}},"seed":1}},
            "noises":[{{"doa_deg":60,"signal":{{"kind":"pink"}},"seed":2}}],"snr_db":0}}"#
    );
    let cfg = SceneConfig::from_json_str(&text).expect("valid fixture");
    render(&cfg.to_scene().expect("valid scene"), cfg.duration_samples()).expect("renders")
}

/// Microphone signals in constraint channel order.
pub fn channel_signals(scene: &RenderedScene) -> Vec<Vec<f64>> {
    let c = proposed_constraint(scene, &ProposedConfig::default()).expect("constraint");
    c.channel_mics().iter().map(|&m| scene.mic_signal(m)).collect()
}
