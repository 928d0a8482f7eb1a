#![no_main]

use libfuzzer_sys::fuzz_target;

// Each input line is one `--set KEY=VALUE` applied over a minimal file.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let sets: Vec<String> = text.lines().map(str::to_string).collect();
    let _ = eiprec_cli::parse_config(Some("users = 2\nantennas = 4\n"), &sets);
});
