#![no_main]

use libfuzzer_sys::fuzz_target;

use awaker::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    // Decoding untrusted bytes must never panic, allocate unbounded memory,
    // or accept payloads whose checksums do not match.
    let Ok(ck) = Checkpoint::decode(data) else {
        return;
    };
    // Anything accepted must survive a re-encode/re-decode round trip.
    let bytes = ck.encode().expect("accepted checkpoint must re-encode");
    let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint must decode");
    assert_eq!(again, ck);
});
