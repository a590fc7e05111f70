use sha2::{Digest as _, Sha256};

/// Incremental SHA-256 over typed values, hex-encoded on finish.
#[derive(Default)]
pub struct Digest(Sha256);

impl Digest {
    pub fn new() -> Self {
        Self(Sha256::new())
    }

    pub fn update_bytes(&mut self, bytes: &[u8]) {
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
    }

    pub fn update_str(&mut self, s: &str) {
        self.update_bytes(s.as_bytes());
    }

    pub fn update_usizes(&mut self, values: &[usize]) {
        self.0.update((values.len() as u64).to_le_bytes());
        for v in values {
            self.0.update((*v as u64).to_le_bytes());
        }
    }

    pub fn update_f64s(&mut self, values: &[f64]) {
        self.0.update((values.len() as u64).to_le_bytes());
        for v in values {
            self.0.update(v.to_le_bytes());
        }
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
