#![no_main]

use libfuzzer_sys::fuzz_target;
use mugrpo::checkpoint::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode(data) {
        assert_eq!(encode(&ck.params, &ck.opt).expect("decoded checkpoint encodes"), data);
    }
});
