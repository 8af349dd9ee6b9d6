#![no_main]

use gulf_core::diagnostics::StageTrajectory;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(traj) = StageTrajectory::from_csv(text) {
        let again = StageTrajectory::from_csv(&traj.to_csv()).unwrap();
        assert_eq!(again, traj);
    }
});
