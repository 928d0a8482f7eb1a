#![no_main]

use eiprec::channel::io::{decode_matrix, encode_matrix, read_matrix};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let whole = decode_matrix(data);
    let streamed = read_matrix(&mut &data[..]);
    if let Ok(m) = &whole {
        assert_eq!(encode_matrix(m), data);
        let s = streamed.expect("stream reader accepts what the slice decoder accepts");
        assert_eq!(encode_matrix(&s), data);
    }
});
