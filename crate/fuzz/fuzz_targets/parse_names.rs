#![no_main]

use conquer::inference::CiMethod;
use conquer::simulate::{Method, Model, Noise};
use conquer::{Bandwidth, KernelKind, KernelName};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(k) = s.parse::<KernelKind>() {
        assert_eq!(k.name().parse::<KernelKind>().unwrap(), k);
    }
    let _ = s.parse::<KernelName>();
    if let Ok(n) = s.parse::<Noise>() {
        assert_eq!(n.to_string().parse::<Noise>().unwrap(), n);
    }
    if let Ok(m) = s.parse::<Method>() {
        assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
    }
    let _ = s.parse::<Model>();
    let _ = s.parse::<CiMethod>();
    if let Ok(Bandwidth::Fixed(h)) = s.parse::<Bandwidth>() {
        assert!(h > 0.0 && h.is_finite());
    }
});
