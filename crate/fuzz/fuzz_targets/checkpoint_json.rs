#![no_main]

use gulf_core::models::MlpModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(model) = MlpModel::from_json(text) {
        let again = MlpModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(again, model);
    }
});
