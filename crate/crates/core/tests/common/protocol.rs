//! Config-echo check of the default training protocol against the frozen
//! golden file.

use fewshot_acd::training::TrainConfig;

pub const GOLDEN: &str = include_str!("../golden/default_train_config.json");

/// Mismatches between the defaults and the golden file, plus the protocol
/// values checked one by one.
pub fn protocol_mismatches() -> Vec<String> {
    let defaults = TrainConfig::default();
    let echoed = serde_json::to_value(&defaults).unwrap();
    let golden: serde_json::Value = serde_json::from_str(GOLDEN).unwrap();
    let mut bad = Vec::new();
    if echoed != golden {
        bad.push(format!("config echo differs from golden file: {echoed}"));
    }
    let checks = [
        ("train episodes 800", defaults.episodes_per_epoch == 800),
        ("validation episodes 600", defaults.val_episodes == 600),
        ("test episodes 600", defaults.test_episodes == 600),
        ("learning rate 1e-3", defaults.learning_rate == 1e-3),
        ("joint learning rate 1e-4", defaults.joint_learning_rate == 1e-4),
        ("policy learning rate 1e-4", defaults.policy_learning_rate == 1e-4),
        ("patience 3", defaults.patience == 3),
        ("policy temperature 2", defaults.policy_temperature == 2.0),
        ("seeds", defaults.seeds == [5, 10, 15, 20, 25]),
        ("5-way tau 0.3", defaults.static_tau() == 0.3),
        ("10-way tau 0.2", TrainConfig { n_way: 10, ..TrainConfig::default() }.static_tau() == 0.2),
        ("embedding and hidden size 50", defaults.model.embedding_dim == 50 && defaults.model.hidden_dim == 50),
        ("window 3", defaults.model.window == 3),
        ("init std 0.1", defaults.model.init_std == 0.1),
    ];
    bad.extend(checks.iter().filter(|(_, ok)| !ok).map(|(name, _)| name.to_string()));
    let parsed: TrainConfig = serde_json::from_str(GOLDEN).unwrap();
    if parsed != defaults {
        bad.push("golden file does not parse back to the defaults".into());
    }
    bad
}
