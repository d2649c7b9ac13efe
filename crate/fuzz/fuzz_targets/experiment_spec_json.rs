#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = conquer::simulate::ExperimentSpec::from_json_str(text) {
            spec.validate().expect("parsed specs are valid");
        }
    }
});
