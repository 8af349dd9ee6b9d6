#![no_main]

use gulf_core::data::parse_csv_dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ds) = parse_csv_dataset(text, "label") {
        assert!(ds.features().is_finite());
        assert!(ds.labels().iter().all(|&y| y < ds.num_classes()));
        assert_eq!(ds.class_names().len(), ds.num_classes());
    }
});
