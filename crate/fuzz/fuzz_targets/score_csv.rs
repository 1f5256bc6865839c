#![no_main]

use croze_core::scoring::{read_score_pairs, read_scores};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_scores(data);
    if let Ok(pairs) = read_score_pairs(data) {
        assert!(pairs.iter().all(|(_, s)| !s.is_nan()));
    }
});
