//! JSON-lines files with a single leading `_meta` header object that echoes
//! the configuration a file was produced with. Readers skip the header;
//! parse failures name the offending line.

use echo_moe::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::path::Path;

pub fn meta_line(config_echo: &serde_json::Value, extra: serde_json::Value) -> String {
    let mut meta = serde_json::Map::new();
    meta.insert("config".to_string(), config_echo.clone());
    if let serde_json::Value::Object(m) = extra {
        for (k, v) in m {
            meta.insert(k, v);
        }
    }
    serde_json::json!({ "_meta": meta }).to_string()
}

pub fn write_jsonl<T: Serialize>(
    path: &Path,
    config_echo: &serde_json::Value,
    extra_meta: serde_json::Value,
    items: &[T],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&meta_line(config_echo, extra_meta));
    out.push('\n');
    for item in items {
        out.push_str(
            &serde_json::to_string(item).map_err(|e| Error::Data(format!("encode: {e}")))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Read every non-header line, reporting the 1-based line number on parse
/// failure.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if line.trim_start().starts_with("{\"_meta\"") {
            continue;
        }
        let item: T = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        items.push(item);
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(serde::Serialize, serde::Deserialize, PartialEq, Debug)]
    struct Row {
        id: u32,
    }

    #[test]
    fn header_skipped_and_rows_round_trip() {
        let dir = std::env::temp_dir().join(format!("echo-moe-jsonl-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.jsonl");
        let echo = serde_json::json!({"seed": 3});
        write_jsonl(&path, &echo, serde_json::json!({"kind": "rows"}), &[Row { id: 1 }, Row { id: 2 }])
            .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"_meta\""));
        let rows: Vec<Row> = read_jsonl(&path).unwrap();
        assert_eq!(rows, vec![Row { id: 1 }, Row { id: 2 }]);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = std::env::temp_dir().join(format!("echo-moe-jsonl2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.jsonl");
        std::fs::write(&path, "{\"id\":1}\nnot json\n").unwrap();
        let err = read_jsonl::<Row>(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
