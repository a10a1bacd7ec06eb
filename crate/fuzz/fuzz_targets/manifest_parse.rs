#![no_main]

use libfuzzer_sys::fuzz_target;
use rescnds::data::Manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Manifest::parse(text) {
        assert!(Manifest::parse(&m.to_json()).is_ok());
    }
});
