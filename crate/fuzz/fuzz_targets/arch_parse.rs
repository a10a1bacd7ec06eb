#![no_main]

use libfuzzer_sys::fuzz_target;
use rescnds::graph::{infer_shapes, NetworkGraph};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(g) = NetworkGraph::from_json(text) {
        let _ = infer_shapes(&g, g.input_shape);
        assert!(NetworkGraph::from_json(&g.to_json()).is_ok());
    }
});
