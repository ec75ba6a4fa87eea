#![no_main]

use labelmill::gateway::parse_assignment;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = parse_assignment(data);
});
