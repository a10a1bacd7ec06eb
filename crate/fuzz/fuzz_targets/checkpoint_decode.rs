#![no_main]

use libfuzzer_sys::fuzz_target;
use rescnds::trainer::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::from_bytes(data) {
        let again = Checkpoint::from_bytes(&c.to_bytes()).expect("re-encoded checkpoint decodes");
        assert_eq!(again.params, c.params);
        assert_eq!(again.velocity, c.velocity);
    }
});
