#![no_main]

use bro_core::replay::ReplayBuffer;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(buffer) = ReplayBuffer::<f32>::from_bytes(data, 1 << 24) {
        let bytes = buffer.to_bytes().expect("re-encode");
        let again = ReplayBuffer::<f32>::from_bytes(&bytes, 1 << 24).expect("re-decode");
        assert_eq!(again.len(), buffer.len());
    }
});
