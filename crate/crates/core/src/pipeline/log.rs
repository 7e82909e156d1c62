//! Line-delimited JSON event log.

use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use serde_json::{Map, Value};

/// Writes one JSON object per event: `{"event": …, "elapsed_s": …, fields…}`.
/// A logger without a sink discards everything.
pub struct JsonLogger {
    sink: Option<Mutex<Box<dyn Write + Send>>>,
    start: Instant,
}

impl JsonLogger {
    pub fn new(sink: impl Write + Send + 'static) -> Self {
        JsonLogger {
            sink: Some(Mutex::new(Box::new(sink))),
            start: Instant::now(),
        }
    }

    pub fn stderr() -> Self {
        Self::new(std::io::stderr())
    }

    pub fn null() -> Self {
        JsonLogger {
            sink: None,
            start: Instant::now(),
        }
    }

    /// Logs `event` with the fields of `fields` (an object; other values are
    /// stored under `"value"`). Write failures are ignored: logging never
    /// aborts a run.
    pub fn event(&self, event: &str, fields: Value) {
        let Some(sink) = &self.sink else { return };
        let mut obj = Map::new();
        obj.insert("event".into(), Value::from(event));
        obj.insert("elapsed_s".into(), Value::from(self.start.elapsed().as_secs_f64()));
        match fields {
            Value::Object(m) => obj.extend(m),
            Value::Null => {}
            other => {
                obj.insert("value".into(), other);
            }
        }
        if let Ok(mut w) = sink.lock() {
            let _ = serde_json::to_writer(&mut *w, &Value::Object(obj));
            let _ = w.write_all(b"\n");
            let _ = w.flush();
        }
    }
}

impl Default for JsonLogger {
    fn default() -> Self {
        Self::null()
    }
}
