#![no_main]

use libfuzzer_sys::fuzz_target;
use mvmrf::config::RunConfig;

// The TOML config parser must reject arbitrary input with a typed error,
// never a panic. Valid parses additionally go through semantic validation,
// which must be equally total.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::from_toml_str(text) {
            let _ = cfg.validate();
            let _ = cfg.config_hash();
        }
    }
});
