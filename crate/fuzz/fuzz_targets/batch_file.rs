#![no_main]

use croze_cli::batch_file::{decode_batch, encode_batch};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(batch) = decode_batch(data) {
        let bytes = encode_batch(&batch);
        assert_eq!(bytes, data);
        assert_eq!(decode_batch(&bytes).unwrap(), batch);
    }
});
