#![no_main]

use labelmill::gateway::extract_tagged;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = extract_tagged(data, "output");
    // A tag that never matches the production one still must not panic.
    let _ = extract_tagged(data, "out");
});
