#![no_main]

use libfuzzer_sys::fuzz_target;
use rescnds::Tensor;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = Tensor::from_bytes(data) {
        // whatever decodes must re-encode to the same bytes
        assert_eq!(t.to_bytes(), data);
        let _ = Tensor::read_from(&mut &data[..]);
    }
});
