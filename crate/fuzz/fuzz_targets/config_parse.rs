#![no_main]

use libfuzzer_sys::fuzz_target;
use rescnds_cli::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<RunConfig>(data) {
        let resolved = cfg.resolve();
        let _ = resolved.arch_config();
        let _ = resolved.train_config(32);
    }
});
