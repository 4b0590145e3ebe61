#![no_main]

use std::fmt::Display;
use std::str::FromStr;

use libfuzzer_sys::fuzz_target;
use paraknow_core::extract::{LayerStrategy, SubmatrixStrategy};
use paraknow_core::inject::InitStrategy;
use paraknow_core::pipeline::Stage;
use paraknow_core::tinylm::{ParamName, Role, RoleGroup};
use paraknow_core::train::TaskSpec;

// Whatever parses must print back to something that parses to the same value.
fn round_trip<T: FromStr + Display + PartialEq + std::fmt::Debug>(s: &str) {
    if let Ok(v) = s.parse::<T>() {
        let printed = v.to_string();
        match printed.parse::<T>() {
            Ok(w) => assert_eq!(v, w, "{s:?} -> {printed:?}"),
            Err(_) => panic!("{s:?} printed as unparseable {printed:?}"),
        }
    }
}

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    round_trip::<TaskSpec>(s);
    round_trip::<InitStrategy>(s);
    round_trip::<LayerStrategy>(s);
    round_trip::<SubmatrixStrategy>(s);
    round_trip::<Stage>(s);
    round_trip::<ParamName>(s);
    round_trip::<Role>(s);
    let _ = s.parse::<RoleGroup>();
});
