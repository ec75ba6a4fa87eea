#![no_main]

use labelmill::gateway::parse_choice;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&max_byte, rest)) = data.split_first() else {
        return;
    };
    let text = String::from_utf8_lossy(rest);
    if let Ok(index) = parse_choice(&text, usize::from(max_byte)) {
        assert!((1..=usize::from(max_byte)).contains(&index));
    }
});
