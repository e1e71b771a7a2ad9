//! Text form of reals shared by the wire protocol and the CSV files.

/// Formats `value` with 17 significant digits, enough to round-trip any
/// finite `f64` exactly.
pub fn format_real(value: f64) -> String {
    debug_assert!(value.is_finite());
    format!("{value:.16e}")
}

/// Builds a single-line JSON object with keys in insertion order.
#[derive(Debug, Default)]
pub struct JsonObject {
    buf: String,
}

impl JsonObject {
    pub fn new() -> Self {
        Self { buf: String::from("{") }
    }

    fn key(&mut self, key: &str) {
        if self.buf.len() > 1 {
            self.buf.push(',');
        }
        self.buf.push_str(&quote(key));
        self.buf.push(':');
    }

    pub fn string(mut self, key: &str, value: &str) -> Self {
        self.key(key);
        self.buf.push_str(&quote(value));
        self
    }

    pub fn uint(mut self, key: &str, value: u64) -> Self {
        self.key(key);
        self.buf.push_str(&value.to_string());
        self
    }

    pub fn real(mut self, key: &str, value: f64) -> Self {
        self.key(key);
        self.buf.push_str(&format_real(value));
        self
    }

    pub fn uints(mut self, key: &str, values: impl IntoIterator<Item = u64>) -> Self {
        self.key(key);
        let items: Vec<String> = values.into_iter().map(|v| v.to_string()).collect();
        self.buf.push('[');
        self.buf.push_str(&items.join(","));
        self.buf.push(']');
        self
    }

    pub fn reals(mut self, key: &str, values: &[f64]) -> Self {
        self.key(key);
        let items: Vec<String> = values.iter().map(|&v| format_real(v)).collect();
        self.buf.push('[');
        self.buf.push_str(&items.join(","));
        self.buf.push(']');
        self
    }

    /// Inserts already-encoded JSON objects as an array.
    pub fn objects(mut self, key: &str, values: impl IntoIterator<Item = String>) -> Self {
        self.key(key);
        let items: Vec<String> = values.into_iter().collect();
        self.buf.push('[');
        self.buf.push_str(&items.join(","));
        self.buf.push(']');
        self
    }

    pub fn finish(mut self) -> String {
        self.buf.push('}');
        self.buf
    }
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}
