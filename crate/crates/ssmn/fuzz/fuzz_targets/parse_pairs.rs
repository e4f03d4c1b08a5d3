#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(pairs) = ssmn::data::parse_pairs(text) {
            let out: String = pairs.iter().map(|(s, t)| format!("{s}\t{t}\n")).collect();
            assert_eq!(ssmn::data::parse_pairs(&out).expect("round trip"), pairs);
        }
    }
});
