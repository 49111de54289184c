//! File plumbing shared by the harness and CLI: atomic writes, CRC32,
//! and the binary grid format for exported 2-D maps.
//!
//! Grid files: magic `SMTGRID1`, u32 LE height, u32 LE width, then
//! `height*width` f32 LE values row-major. Each grid travels with a JSON
//! sidecar (same path, `.json` extension) describing its origin.

use crate::analyzer::ModulationMap;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Write a file atomically: the bytes land under a temporary name in
/// the same directory and are renamed into place, so readers never see
/// a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".to_string(),
    });
    let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

// ====================================================================
// CRC32 (IEEE 802.3, reflected)
// ====================================================================

fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

/// Standard CRC32 checksum (the zip/PNG polynomial).
pub fn crc32(bytes: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(crc32_table);
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    !c
}

// ====================================================================
// Grid files
// ====================================================================

pub const GRID_MAGIC: &[u8; 8] = b"SMTGRID1";

/// Sidecar metadata stored next to each grid file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridMeta {
    pub model: String,
    pub name: String,
    pub stage: usize,
    pub block: usize,
    pub kind: String,
    pub height: usize,
    pub width: usize,
    pub reduction: String,
    pub upsampling: String,
}

/// Serialize one grid to its binary form.
pub fn encode_grid(height: usize, width: usize, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != height * width {
        return Err(Error::shape(
            "encode_grid",
            format!("{} values for a {height}x{width} grid", data.len()),
        ));
    }
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Read back a binary grid.
pub fn decode_grid(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let fail = |offset: usize, detail: String| Error::Format {
        what: "grid".into(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < 16 {
        return Err(fail(bytes.len(), "file shorter than header".into()));
    }
    if &bytes[..8] != GRID_MAGIC {
        return Err(fail(0, "bad magic, expected SMTGRID1".into()));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let need = 16 + 4 * h * w;
    if bytes.len() != need {
        return Err(fail(
            bytes.len().min(need),
            format!("expected {need} bytes for a {h}x{w} grid, found {}", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(h * w);
    for chunk in bytes[16..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok((h, w, data))
}

/// Write one exported map as `<path>` plus a `<path stem>.json` sidecar,
/// both atomically.
pub fn write_grid(path: &Path, map: &ModulationMap, model: &str) -> Result<()> {
    atomic_write(path, &encode_grid(map.height, map.width, &map.data)?)?;
    let meta = GridMeta {
        model: model.to_string(),
        name: map.name.clone(),
        stage: map.stage,
        block: map.block,
        kind: map.kind.clone(),
        height: map.height,
        width: map.width,
        reduction: map.reduction.clone(),
        upsampling: map.upsampling.clone(),
    };
    let json = serde_json::to_string_pretty(&meta)? + "\n";
    atomic_write(&path.with_extension("json"), json.as_bytes())
}

/// Load a grid and its sidecar.
pub fn read_grid(path: &Path) -> Result<(GridMeta, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, w, data) = decode_grid(&bytes)?;
    let meta_path = path.with_extension("json");
    let meta_bytes = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: GridMeta = serde_json::from_slice(&meta_bytes)?;
    if meta.height != h || meta.width != w {
        return Err(Error::Data(format!(
            "sidecar says {}x{}, grid file is {h}x{w}",
            meta.height, meta.width
        )));
    }
    Ok((meta, data))
}
