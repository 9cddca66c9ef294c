#![no_main]

use libfuzzer_sys::fuzz_target;

use decorstory::demb::{parse_matrix_bytes, serialize_matrix, ParsedMatrix};

// Any container the parser accepts must re-serialize to the exact input
// bytes (the format has a unique encoding per matrix).
fuzz_target!(|data: &[u8]| {
    match parse_matrix_bytes(data) {
        Ok(ParsedMatrix::F32(m)) => assert_eq!(serialize_matrix(&m), data),
        Ok(ParsedMatrix::F64(m)) => assert_eq!(serialize_matrix(&m), data),
        Err(_) => {}
    }
});
