#![no_main]

use libfuzzer_sys::fuzz_target;
use protostyle::corpus::{decode_frames, decode_frames_any_len, encode_frames};

fuzz_target!(|data: &[u8]| {
    let Some((&channels, body)) = data.split_first() else { return };
    let channels = channels as usize % 16;
    if let Ok(frames) = decode_frames_any_len(body, channels) {
        assert_eq!(encode_frames(&frames), body);
        decode_frames(body, frames.nrows(), channels).expect("fixed length decode");
    }
});
