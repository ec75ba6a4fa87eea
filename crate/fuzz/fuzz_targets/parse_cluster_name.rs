#![no_main]

use labelmill::gateway::parse_cluster_name;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok((name, description)) = parse_cluster_name(data) {
        assert!(!name.is_empty());
        assert!(!description.is_empty());
    }
});
