#![no_main]

use compose_rl::policy::codec::PolicyFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = PolicyFile::decode(data) {
        // Anything accepted must re-encode to the same bytes.
        assert_eq!(file.encode(), data);
    }
});
