#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        if let Ok(rec) = ssmn::data::parse_manifest_line(line) {
            // a record that parses must re-serialize and re-parse stably
            let out = ssmn::data::manifest_line(&rec);
            let again = ssmn::data::parse_manifest_line(&out).expect("round trip");
            assert_eq!(ssmn::data::manifest_line(&again), out);
        }
    }
});
