//! Coefficient table JSON:
//! `{"a_thresholds": [..2], "b_thresholds": [..2], "cells": [[..3]; 3], "base_value": x}`
//! with `cells` listed by a-bin.

use std::path::Path;

use livar_core::fed::GShapTable;

use crate::{Error, Result};

pub fn table_to_json(table: &GShapTable) -> String {
    serde_json::to_string_pretty(table).expect("table serializes")
}

pub fn table_from_json(text: &str) -> std::result::Result<GShapTable, String> {
    let table: GShapTable = serde_json::from_str(text).map_err(|e| e.to_string())?;
    table.validate().map_err(|e| e.to_string())?;
    Ok(table)
}

pub fn load_table(path: &Path) -> Result<GShapTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    table_from_json(&text).map_err(|e| Error::format(path, e))
}

/// Writes the table, refusing to replace an existing file unless `force`.
pub fn save_table(path: &Path, table: &GShapTable, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Exists(path.to_path_buf()));
    }
    let mut text = table_to_json(table);
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
