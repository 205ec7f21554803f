//! On-disk formats: dataset directories, model checkpoints and PNG helpers.
//!
//! Dataset layout:
//!
//! ```text
//! <dir>/manifest.json      dims, tuple length, seed, tuple index table, generation info
//! <dir>/poses.csv          frame_index,t1,t2,t3,w1,w2,w3,weather_tag
//! <dir>/frames/NNNNNN.png  8-bit RGB (or grayscale) frames
//! <dir>/masks/NNNNNN.png   1-bit landmark masks
//! ```
//!
//! Checkpoints are a single little-endian binary file: the magic bytes
//! `RADACKPT`, a `u32` format version, a `u32`-length-prefixed JSON header
//! (architecture and loss parameters), a `u64` parameter count and the
//! parameters as `f64`. A `<file>.manifest.txt` sidecar records seed, step
//! count and config hash.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Dataset, Image, ImageDims, ImageSample, LandmarkMask, Pose, Weather};
use crate::error::{Error, Result};
use crate::loss::LossParams;
use crate::model::{ArchDescriptor, PoseModel, PoseRegressor};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RADACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const POSES_HEADER: &str = "frame_index,t1,t2,t3,w1,w2,w3,weather_tag";

/// Writes an 8-bit PNG. Values are rounded and clamped to `[0, 255]`.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let dims = img.dims();
    let color = match dims.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        n => return Err(Error::invalid(format!("cannot encode {n}-channel image as PNG"))),
    };
    let bytes: Vec<u8> = img.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, dims.width as u32, dims.height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, format!("expected 8-bit image, got {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    let dims = ImageDims::new(info.height as usize, info.width as usize, channels);
    let data = buf[..info.buffer_size()].iter().map(|&b| b as f64).collect();
    Image::new(dims, data)
}

fn write_mask(path: &Path, mask: &LandmarkMask) -> Result<()> {
    let row_bytes = mask.width.div_ceil(8);
    let mut bytes = vec![0u8; row_bytes * mask.height];
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                bytes[r * row_bytes + c / 8] |= 0x80 >> (c % 8);
            }
        }
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, mask.width as u32, mask.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(())
}

fn read_mask(path: &Path) -> Result<LandmarkMask> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::One || info.color_type != png::ColorType::Grayscale {
        return Err(Error::format(path, "expected a 1-bit grayscale mask"));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let row_bytes = w.div_ceil(8);
    let mask = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            buf[r * row_bytes + c / 8] & (0x80 >> (c % 8)) != 0
        })
        .collect();
    LandmarkMask::new(h, w, mask)
}

/// Top-level `manifest.json` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub scene_seed: u64,
    pub dims: ImageDims,
    pub tuple_len: usize,
    pub frame_count: usize,
    pub weather_counts: BTreeMap<Weather, usize>,
    /// Frame indices of every tuple.
    pub tuples: Vec<Vec<u64>>,
    /// Free-form record of how the data was produced (specs, mix, seed).
    #[serde(default)]
    pub generation: serde_json::Value,
}

fn frame_name(index: u64) -> String {
    format!("{index:06}.png")
}

/// Writes `dataset` under `dir`, creating it if needed.
pub fn write_dataset(dataset: &Dataset, dir: &Path, generation: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir.join("frames"))?;
    if !dataset.masks().is_empty() {
        fs::create_dir_all(dir.join("masks"))?;
    }
    let meta = dataset.metadata();
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        scene_seed: meta.scene_seed,
        dims: meta.dims,
        tuple_len: meta.tuple_len,
        frame_count: dataset.frames().len(),
        weather_counts: meta.weather_counts.clone(),
        tuples: dataset
            .tuples()
            .iter()
            .map(|t| t.samples().iter().map(|s| s.frame_index).collect())
            .collect(),
        generation,
    };
    let mut poses = String::from(POSES_HEADER);
    poses.push('\n');
    for frame in dataset.frames() {
        let p = frame.pose.to_array();
        poses.push_str(&frame.frame_index.to_string());
        for v in p {
            poses.push(',');
            poses.push_str(&v.to_string());
        }
        poses.push(',');
        poses.push_str(frame.weather.as_str());
        poses.push('\n');
        write_png(&dir.join("frames").join(frame_name(frame.frame_index)), &frame.pixels)?;
    }
    for (frame, mask) in dataset.frames().iter().zip(dataset.masks()) {
        write_mask(&dir.join("masks").join(frame_name(frame.frame_index)), mask)?;
    }
    fs::write(dir.join("poses.csv"), poses)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// One row of `poses.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseRow {
    pub frame_index: u64,
    pub pose: Pose,
    pub weather: Weather,
}

pub fn read_poses_csv(path: &Path) -> Result<Vec<PoseRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(POSES_HEADER) {
        return Err(Error::format(path, format!("expected header `{POSES_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            let bad = |why: String| Error::format(path, format!("line {}: {why}", i + 2));
            if cols.len() != 8 {
                return Err(bad(format!("expected 8 columns, got {}", cols.len())));
            }
            let frame_index = cols[0].parse::<u64>().map_err(|e| bad(e.to_string()))?;
            let mut v = [0.0; 6];
            for k in 0..6 {
                v[k] = cols[k + 1].parse::<f64>().map_err(|e| bad(e.to_string()))?;
            }
            let weather = cols[7].parse::<Weather>().map_err(|e| bad(e.to_string()))?;
            Ok(PoseRow {
                frame_index,
                pose: Pose::from_array(v),
                weather,
            })
        })
        .collect()
}

/// Loads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    let rows = read_poses_csv(&dir.join("poses.csv"))?;
    if rows.len() != manifest.frame_count {
        return Err(Error::format(
            dir.join("poses.csv"),
            format!("{} rows for {} frames", rows.len(), manifest.frame_count),
        ));
    }
    let has_masks = dir.join("masks").is_dir();
    let mut frames = Vec::with_capacity(rows.len());
    let mut masks = Vec::new();
    for row in &rows {
        let name = frame_name(row.frame_index);
        let img = read_png(&dir.join("frames").join(&name))?;
        if img.dims() != manifest.dims {
            return Err(Error::shape(manifest.dims, img.dims()));
        }
        frames.push(ImageSample::new(img, row.pose, row.weather, row.frame_index));
        if has_masks {
            masks.push(read_mask(&dir.join("masks").join(&name))?);
        }
    }
    let dataset = Dataset::new(frames, masks, manifest.tuple_len, manifest.scene_seed)?;
    let tuples: Vec<Vec<u64>> = dataset
        .tuples()
        .iter()
        .map(|t| t.samples().iter().map(|s| s.frame_index).collect())
        .collect();
    if tuples != manifest.tuples {
        return Err(Error::format(&manifest_path, "tuple table does not match frames"));
    }
    Ok((dataset, manifest))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut f = File::open(path)?;
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Relative paths of all files under `dir`, sorted.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Hash over the relative paths and contents of every file under `dir`.
pub fn directory_sha256(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for rel in list_files(dir)? {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(file_sha256(&dir.join(&rel))?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// Content digest of an in-memory dataset: frame indices, poses, weather
/// tags and pixel values.
pub fn dataset_digest(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    for f in dataset.frames() {
        h.update(f.frame_index.to_le_bytes());
        for v in f.pose.to_array() {
            h.update(v.to_le_bytes());
        }
        h.update(f.weather.as_str().as_bytes());
        for v in f.pixels.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchDescriptor,
    loss: LossParams,
}

/// Sidecar text manifest next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub steps: u64,
    pub config_hash: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.txt");
    PathBuf::from(s)
}

pub fn write_checkpoint(path: &Path, model: &PoseRegressor, loss: &LossParams, meta: &CheckpointMeta) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader {
        arch: model.arch().clone(),
        loss: *loss,
    })?;
    let mut bytes = Vec::with_capacity(32 + header.len() + 8 * model.num_params());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    for p in model.params() {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    let sidecar = format!(
        "seed={}\nsteps={}\nconfig_hash={}\nparam_checksum={}\n",
        meta.seed,
        meta.steps,
        meta.config_hash,
        model.checksum()
    );
    fs::write(sidecar_path(path), sidecar)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(PoseRegressor, LossParams)> {
    let bytes = fs::read(path)?;
    let bad = |why: &str| Error::format(path, why.to_string());
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(bad("truncated checkpoint"));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let header_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(take(header_len)?).map_err(|e| bad(&e.to_string()))?;
    let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let raw = take(n.checked_mul(8).ok_or_else(|| bad("parameter count overflow"))?)?;
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if !cur.is_empty() {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok((PoseRegressor::from_params(header.arch, params)?, header.loss))
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side)?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| map.get(k).cloned().ok_or_else(|| Error::format(&side, format!("missing `{k}`")));
    Ok(CheckpointMeta {
        seed: get("seed")?.parse().map_err(|_| Error::format(&side, "bad seed"))?,
        steps: get("steps")?.parse().map_err(|_| Error::format(&side, "bad steps"))?,
        config_hash: get("config_hash")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, generate_scene, SceneSpec, TrajectorySpec, WeatherTable};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            seed: 3,
            dims: ImageDims::new(24, 20, 3),
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        let mix = BTreeMap::from([(Weather::Overcast, 0.5), (Weather::Snow, 0.5)]);
        let ds = generate_dataset(&scene, &TrajectorySpec { frames: 6, offset: 0.25 }, &mix, &WeatherTable::presets(), 3)
            .unwrap();
        write_dataset(&ds, dir.path(), serde_json::json!({"note": "test"})).unwrap();
        let (back, manifest) = read_dataset(dir.path()).unwrap();
        assert_eq!(manifest.frame_count, 6);
        assert_eq!(back.frames(), ds.frames());
        assert_eq!(back.masks(), ds.masks());
        assert_eq!(back.tuples().len(), ds.tuples().len());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = PoseRegressor::new(ArchDescriptor::default(), 17).unwrap();
        let loss = LossParams {
            beta: 0.25,
            ..LossParams::default()
        };
        let meta = CheckpointMeta {
            seed: 17,
            steps: 42,
            config_hash: "abc".into(),
        };
        write_checkpoint(&path, &model, &loss, &meta).unwrap();
        let (back, back_loss) = read_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back_loss, loss);
        assert_eq!(read_checkpoint_meta(&path).unwrap(), meta);
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"RADACKPT\x01\x00").unwrap();
        assert!(read_checkpoint(&path).is_err());
        fs::write(&path, b"NOTACKPT").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn poses_csv_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.csv");
        fs::write(&path, format!("{POSES_HEADER}\n0,1,2,3,4,5,6,fog\n")).unwrap();
        assert!(read_poses_csv(&path).is_err());
    }
}
