#![no_main]

use bro_harness::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data, 1 << 24) {
        let again = Checkpoint::from_bytes(&ckpt.to_bytes(), 1 << 24).expect("re-decode");
        assert_eq!(again, ckpt);
    }
});
