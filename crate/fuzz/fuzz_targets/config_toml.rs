#![no_main]

use intent_core::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = ExperimentConfig::from_toml_str(text) else { return };
    // Validation must reject or accept, never panic.
    let _ = cfg.validate();
    let enc = cfg.to_toml_string();
    let again = ExperimentConfig::from_toml_str(&enc).expect("re-parse of encoded config");
    assert_eq!(again.to_toml_string(), enc);
});
