#![no_main]

use croze_core::benchmark::parse_benchmark;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = parse_benchmark(data, None) {
        let mut out = Vec::new();
        table.write_csv(&mut out).unwrap();
        assert_eq!(parse_benchmark(&out[..], None).unwrap(), table);
    }
});
