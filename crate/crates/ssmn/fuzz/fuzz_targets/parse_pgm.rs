#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // must never panic or allocate unboundedly; round-trip when it parses
    if let Ok(img) = ssmn::pgm::parse_pgm(data) {
        let bytes = ssmn::pgm::encode_pgm(&img);
        let again = ssmn::pgm::parse_pgm(&bytes).expect("re-encoded image parses");
        assert_eq!(again.width, img.width);
        assert_eq!(again.height, img.height);
        assert_eq!(again.pixels, img.pixels);
    }
});
