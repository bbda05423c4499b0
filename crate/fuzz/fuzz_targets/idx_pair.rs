#![no_main]

use libfuzzer_sys::fuzz_target;
use saqlab_core::data::decode_idx_pair;

// First byte picks where the input splits into an image file and a label file.
fuzz_target!(|data: &[u8]| {
    let Some((&cut, rest)) = data.split_first() else {
        return;
    };
    let at = (cut as usize * rest.len()) / 255;
    let (images, labels) = rest.split_at(at);
    if let Ok(ds) = decode_idx_pair(images, labels) {
        assert_eq!(ds.len(), ds.as_batch().labels.len());
    }
});
