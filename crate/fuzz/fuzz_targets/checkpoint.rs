#![no_main]

use libfuzzer_sys::fuzz_target;
use protostyle::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = checkpoint::decode(data) {
        let bytes = checkpoint::encode(&store);
        let again = checkpoint::decode(&bytes).expect("re-decode");
        assert_eq!(again.len(), store.len());
    }
});
