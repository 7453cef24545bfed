#![no_main]

use compose_rl::pipeline::read_trajectory_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_trajectory_csv(data);
});
