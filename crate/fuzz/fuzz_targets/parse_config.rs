#![no_main]

use libfuzzer_sys::fuzz_target;
use sdmefem::config::parse_config;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_config(text) {
            // Accepted input must survive a canonical round trip.
            let again = parse_config(&cfg.to_text()).expect("canonical text reparses");
            assert_eq!(again, cfg);
        }
    }
});
