#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = eiprec_cli::parse_config(Some(text), &[]) {
            // A resolved config must survive its own echo.
            let echo = eiprec_cli::config_toml(&cfg);
            let again = eiprec_cli::parse_config(Some(&echo), &[]).expect("echo reparses");
            assert_eq!(cfg, again);
        }
    }
});
