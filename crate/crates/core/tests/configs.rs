use std::path::PathBuf;

use c2g_core::eval::eval_pipeline_config;
use c2g_core::pipeline::C2GConfig;

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

#[test]
fn shipped_configs_match_code_defaults() {
    assert_eq!(C2GConfig::load(&config("default.toml")).unwrap(), C2GConfig::default());
    assert_eq!(C2GConfig::load(&config("eval.toml")).unwrap(), eval_pipeline_config());
}
