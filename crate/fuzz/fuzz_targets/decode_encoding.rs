#![no_main]

use croze_core::space::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cell) = decode(text) {
        // Canonical form is a fixed point.
        let canon = encode(&cell);
        let again = decode(&canon).expect("canonical encoding decodes");
        assert_eq!(again, cell);
        assert_eq!(encode(&again), canon);
    }
});
