#![no_main]

use libfuzzer_sys::fuzz_target;
use nif::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(cfg) = RunConfig::parse_bytes(data) else { return };
    assert_eq!(RunConfig::parse(&cfg.to_text()).expect("canonical text parses"), cfg);
    // Typed accessors may reject values but must not panic.
    let _ = cfg.train_config();
    let _ = cfg.dataset_spec();
    let _ = cfg.eval_settings();
});
