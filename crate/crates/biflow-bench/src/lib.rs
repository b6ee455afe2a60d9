//! Shared fixtures for the criterion benches.

use biflow::flow::{FlowConfig, FlowModel};
use biflow::numerics::Rng;
use biflow::reverse::{HiddenMode, ReverseConfig, ReverseModel};

/// Freshly initialized model pair on the tiny-digits per-pixel layout
/// (T = 64, d = 1). Random output heads make the flow a non-identity map;
/// wall-clock cost does not depend on training state.
pub fn bench_models(blocks: usize, width: usize) -> (FlowModel<f32>, ReverseModel<f32>) {
    let mut rng = Rng::new(0xBE);
    let cfg = FlowConfig {
        blocks,
        tokens: 64,
        dim: 1,
        layers: 1,
        width,
        heads: 2,
        class_tokens: 1,
        classes: 10,
        clip: 1.0,
        sigma: 0.3,
    };
    let mut fwd = FlowModel::init(cfg.clone(), &mut rng).unwrap();
    fwd.randomize_output_heads(&mut rng, 0.2);
    let rev = ReverseModel::init(
        ReverseConfig::from_forward(&cfg, 1, width, 2, HiddenMode::Hidden, true),
        &mut rng,
    )
    .unwrap();
    (fwd, rev)
}
