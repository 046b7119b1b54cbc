#![no_main]

use libfuzzer_sys::fuzz_target;
use muonlab::runner::TraceFile;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(trace) = TraceFile::parse(text) {
        let written = trace.to_text();
        let back = TraceFile::parse(&written).expect("written trace parses");
        assert_eq!(back, trace);
        assert_eq!(back.to_text(), written);
    }
});
