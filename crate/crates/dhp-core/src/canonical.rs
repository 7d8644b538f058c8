//! Canonical byte encoding for signed and hashed tuples.
//!
//! Every value that is signed, hashed or shared is first flattened into a
//! length-prefixed field sequence: each field is its 4-byte big-endian byte
//! length followed by the raw bytes. The encoding is injective over field
//! sequences, so two distinct tuples never collide under a hash of the
//! encoding.

/// Encode a sequence of byte fields.
pub fn encode_tuple(fields: &[&[u8]]) -> Vec<u8> {
    let total: usize = fields.iter().map(|f| 4 + f.len()).sum();
    let mut out = Vec::with_capacity(total);
    for f in fields {
        out.extend_from_slice(&(f.len() as u32).to_be_bytes());
        out.extend_from_slice(f);
    }
    out
}

/// Split a tuple encoding back into its fields. `None` when the input is
/// truncated or has trailing bytes.
pub fn decode_tuple(bytes: &[u8]) -> Option<Vec<Vec<u8>>> {
    let mut fields = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        if rest.len() < 4 {
            return None;
        }
        let len = u32::from_be_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
        rest = &rest[4..];
        if rest.len() < len {
            return None;
        }
        fields.push(rest[..len].to_vec());
        rest = &rest[len..];
    }
    Some(fields)
}

/// Incremental builder for tuple encodings with typed convenience pushes.
#[derive(Default)]
pub struct TupleEncoder {
    out: Vec<u8>,
}

impl TupleEncoder {
    pub fn new() -> Self {
        TupleEncoder { out: Vec::new() }
    }

    pub fn push(mut self, field: &[u8]) -> Self {
        self.out.extend_from_slice(&(field.len() as u32).to_be_bytes());
        self.out.extend_from_slice(field);
        self
    }

    pub fn push_str(self, field: &str) -> Self {
        self.push(field.as_bytes())
    }

    /// Timestamps and other u64s travel as 8 big-endian bytes.
    pub fn push_u64(self, v: u64) -> Self {
        self.push(&v.to_be_bytes())
    }

    pub fn finish(self) -> Vec<u8> {
        self.out
    }
}
