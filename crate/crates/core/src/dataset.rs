//! On-disk scene datasets: `index.jsonl` headers plus `blobs.bin`.
//!
//! Each blob is a little-endian `u32` element count followed by that many
//! little-endian `f32` values. Every index line carries the format version.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::geometry::{CameraRig, Coordinate3D, DepthMap};
use crate::scene::{Agent, Command, EgoState, EgoStatusRecord, RoadTemplate, Scene, View, CHANNELS};
use crate::shapes::Polygon;

pub const DATA_FORMAT: &str = "spacetoken-data-v1";
pub const INDEX_FILE: &str = "index.jsonl";
pub const BLOB_FILE: &str = "blobs.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlobRef {
    /// Byte offset of the length header in `blobs.bin`.
    offset: u64,
    len: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ViewRef {
    width: usize,
    height: usize,
    raster: BlobRef,
    depth: BlobRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SceneHeader {
    version: String,
    index: usize,
    seed: u64,
    command: Command,
    template: RoadTemplate,
    history: Vec<EgoState>,
    future: Vec<Coordinate3D>,
    ego_status: EgoStatusRecord,
    agents: Vec<Agent>,
    drivable: Vec<Polygon>,
    ground: bool,
    rig: CameraRig,
    views: Vec<ViewRef>,
}

fn write_blob(out: &mut impl Write, offset: &mut u64, values: &[f32]) -> std::io::Result<BlobRef> {
    let len = u32::try_from(values.len()).map_err(|_| std::io::Error::other("blob exceeds u32 elements"))?;
    let start = *offset;
    out.write_all(&len.to_le_bytes())?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    *offset += 4 + 4 * values.len() as u64;
    Ok(BlobRef { offset: start, len })
}

/// Writes `scenes` into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let index_path = dir.join(INDEX_FILE);
    let blob_path = dir.join(BLOB_FILE);
    let mut index = BufWriter::new(File::create(&index_path).at(&index_path)?);
    let mut blobs = BufWriter::new(File::create(&blob_path).at(&blob_path)?);
    let mut offset = 0u64;
    for (i, scene) in scenes.iter().enumerate() {
        let mut views = Vec::with_capacity(scene.views.len());
        for view in &scene.views {
            let raster = write_blob(&mut blobs, &mut offset, &view.raster).at(&blob_path)?;
            let depth = write_blob(&mut blobs, &mut offset, &view.depth.values).at(&blob_path)?;
            views.push(ViewRef { width: view.width(), height: view.height(), raster, depth });
        }
        let header = SceneHeader {
            version: DATA_FORMAT.to_string(),
            index: i,
            seed: scene.seed,
            command: scene.command,
            template: scene.template,
            history: scene.history.clone(),
            future: scene.future.clone(),
            ego_status: scene.ego_status,
            agents: scene.agents.clone(),
            drivable: scene.drivable.clone(),
            ground: scene.ground,
            rig: scene.rig.clone(),
            views,
        };
        serde_json::to_writer(&mut index, &header)?;
        index.write_all(b"\n").at(&index_path)?;
    }
    index.flush().at(&index_path)?;
    blobs.flush().at(&blob_path)?;
    Ok(())
}

fn read_blob(blobs: &[u8], blob: &BlobRef, expected: usize, record: usize) -> Result<Vec<f32>> {
    let err = |msg: String| Error::Dataset { record, msg };
    let start = usize::try_from(blob.offset).map_err(|_| err(format!("offset {} out of range", blob.offset)))?;
    let header = blobs
        .get(start..start + 4)
        .ok_or_else(|| err(format!("blob at byte offset {start} is truncated (file has {} bytes)", blobs.len())))?;
    let len = u32::from_le_bytes(header.try_into().expect("four bytes")) as usize;
    if len != blob.len as usize || len != expected {
        return Err(err(format!(
            "length header {len} at byte offset {start} disagrees with index ({}) or view shape ({expected})",
            blob.len
        )));
    }
    let body = blobs.get(start + 4..start + 4 + 4 * len).ok_or_else(|| {
        err(format!("blob at byte offset {start} is truncated: needs {} bytes, file has {}", 4 + 4 * len, blobs.len()))
    })?;
    Ok(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect())
}

/// Reads every scene, in file order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let index_path = dir.join(INDEX_FILE);
    let blob_path = dir.join(BLOB_FILE);
    let blobs = std::fs::read(&blob_path).at(&blob_path)?;
    let reader = BufReader::new(File::open(&index_path).at(&index_path)?);
    let mut scenes = Vec::new();
    for (record, line) in reader.lines().enumerate() {
        let line = line.at(&index_path)?;
        if line.trim().is_empty() {
            continue;
        }
        let header: SceneHeader =
            serde_json::from_str(&line).map_err(|e| Error::Dataset { record, msg: format!("bad header: {e}") })?;
        if header.version != DATA_FORMAT {
            return Err(Error::Dataset {
                record,
                msg: format!("format version `{}` (expected `{DATA_FORMAT}`)", header.version),
            });
        }
        let mut views = Vec::with_capacity(header.views.len());
        for v in &header.views {
            let n = v.width * v.height;
            let raster = read_blob(&blobs, &v.raster, CHANNELS * n, record)?;
            let depth = read_blob(&blobs, &v.depth, n, record)?;
            views.push(View { raster, depth: DepthMap { width: v.width, height: v.height, values: depth } });
        }
        scenes.push(Scene {
            seed: header.seed,
            command: header.command,
            template: header.template,
            history: header.history,
            future: header.future,
            ego_status: header.ego_status,
            agents: header.agents,
            drivable: header.drivable,
            ground: header.ground,
            rig: header.rig,
            views,
        });
    }
    if scenes.is_empty() {
        return Err(Error::DatasetFormat(format!("{} holds no scenes", index_path.display())));
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    fn scenes(n: u64) -> Vec<Scene> {
        let cfg = SceneConfig { image: 8, ..SceneConfig::default() };
        (0..n).map(|s| generate_scene(s, &cfg).unwrap()).collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let original = scenes(100);
        write_dataset(dir.path(), &original).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), original);
    }

    #[test]
    fn corrupted_length_header_names_record() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &scenes(3)).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let mut bytes = std::fs::read(&blob).unwrap();
        // Record 1 starts after record 0's two views (raster + depth each).
        let per_view = 4 + 4 * 3 * 64 + 4 + 4 * 64;
        let at = 2 * per_view;
        bytes[at..at + 4].copy_from_slice(&7u32.to_le_bytes());
        std::fs::write(&blob, bytes).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Dataset { record: 1, .. }), "{err}");
        assert!(err.to_string().contains(&format!("offset {at}")));
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &scenes(2)).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 10]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Dataset { record: 1, .. }));
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &scenes(1)).unwrap();
        let idx = dir.path().join(INDEX_FILE);
        let text = std::fs::read_to_string(&idx).unwrap().replace(DATA_FORMAT, "spacetoken-data-v0");
        std::fs::write(&idx, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Dataset { record: 0, .. })));
    }
}
