#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // parsing must reject garbage without panicking or over-allocating
    let _ = ssmn::checkpoint::parse(data);
});
