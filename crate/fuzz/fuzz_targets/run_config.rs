#![no_main]

use croze_cli::config::{RunConfig, SyntheticSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text) {
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
    if let Ok(spec) = text.parse::<SyntheticSpec>() {
        assert_eq!(spec.to_string().parse::<SyntheticSpec>().unwrap(), spec);
    }
});
