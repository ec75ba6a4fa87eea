#![no_main]

use labelmill::gateway::parse_relevance;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = parse_relevance(data);
});
