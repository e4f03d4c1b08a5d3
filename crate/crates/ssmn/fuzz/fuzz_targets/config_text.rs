#![no_main]

use libfuzzer_sys::fuzz_target;
use ssmn::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let mut cfg = RunConfig::default();
        if cfg.apply_text(text).is_ok() {
            // canonical text must round-trip to an identical config
            let canon = cfg.to_text();
            let mut cfg2 = RunConfig::default();
            cfg2.apply_text(&canon).expect("canonical text parses");
            assert_eq!(cfg2.to_text(), canon);
            assert_eq!(cfg2.hash(), cfg.hash());
        }
    }
});
