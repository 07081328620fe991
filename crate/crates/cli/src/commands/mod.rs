pub mod bench;
pub mod generate;
pub mod quantize;
pub mod reproduce;
pub mod sweep;

use std::path::Path;

use crate::CliError;

/// Write pretty-printed JSON, creating parent directories as needed.
pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Input(format!("report serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
