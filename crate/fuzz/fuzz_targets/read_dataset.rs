#![no_main]

use libfuzzer_sys::fuzz_target;
use mugrpo::rollout::{read_dataset, write_dataset};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = read_dataset(data) {
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).expect("in-memory write");
        let again = read_dataset(buf.as_slice()).expect("written dataset reads back");
        assert_eq!(again.checksum(), ds.checksum());
    }
});
