#![no_main]

use libfuzzer_sys::fuzz_target;
use muonlab::runner::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::from_toml_str(text) {
        // A validated config must survive its own serialization and keep its digest.
        let again = RunConfig::from_toml_str(&cfg.to_toml_string()).expect("re-parse");
        assert_eq!(cfg.digest(), again.digest());
    }
});
