#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(d) = conquer::model::load_csv(data, "y") {
        assert_eq!(d.y().len(), d.n());
        assert_eq!(d.x().ncols(), d.p());
        assert!(d.x().column(0).iter().all(|&v| v == 1.0));
        assert!(d.y().iter().chain(d.x().iter()).all(|v| v.is_finite()));
    }
});
