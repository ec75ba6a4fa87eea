#![no_main]

use labelmill::gateway::parse_pair_choice;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = parse_pair_choice(data);
});
