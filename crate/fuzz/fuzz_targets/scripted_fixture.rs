#![no_main]

use labelmill::gateway::mock::ScriptedBackend;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = ScriptedBackend::from_jsonl_reader(data);
});
