#![no_main]

use libfuzzer_sys::fuzz_target;
use protostyle::config::Config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = protostyle::config::parse(text);
    if let Ok(c) = Config::from_text(text) {
        // Whatever parsed must survive its own serialization.
        let again = Config::from_text(&c.to_text()).expect("round trip");
        assert_eq!(again.entries(), c.entries());
    }
});
