#![no_main]

use libfuzzer_sys::fuzz_target;
use saqlab_core::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::parse(data) {
        let text = ckpt.to_text();
        let again = Checkpoint::parse(text.as_bytes()).expect("rendered checkpoint parses");
        assert_eq!(again.to_text(), text);
    }
});
