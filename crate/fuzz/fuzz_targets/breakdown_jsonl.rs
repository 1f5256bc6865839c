#![no_main]

use croze_core::scoring::read_breakdowns;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_breakdowns(data);
});
