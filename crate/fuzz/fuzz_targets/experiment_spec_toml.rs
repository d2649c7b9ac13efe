#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = conquer::simulate::ExperimentSpec::from_toml_str(text) {
            spec.validate().expect("parsed specs are valid");
            let json = serde_json::to_string(&spec).expect("specs serialize");
            let back = conquer::simulate::ExperimentSpec::from_json_str(&json).expect("round trip");
            assert_eq!(back.n, spec.n);
        }
    }
});
