#![no_main]

use labelmill::taxonomy::{from_markdown, to_markdown};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let Ok(parsed) = from_markdown(data, "fuzz") else {
        return;
    };
    // Anything that parses must survive a serialize/parse roundtrip intact.
    let rendered = to_markdown(&parsed).expect("parsed taxonomy must render");
    let reparsed = from_markdown(&rendered, "fuzz").expect("rendered taxonomy must parse");
    assert_eq!(parsed.labels, reparsed.labels);
});
