//! Dataset ingestion, the infrared-proxy transform, checkpoint persistence,
//! and defense-report serialization.
//!
//! Checkpoints use a single container file: a magic header, a JSON metadata
//! section (sorted keys, so files are byte-stable across runs), then raw
//! little-endian f64 array blocks guarded by a SHA-256 digest.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3, ArrayD};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

/// H x W x C pixel array in [0, 1].
pub type Image = Array3<f32>;
/// H x W map; soft masks live in [0, 1], hard masks in {0, 1}.
pub type Mask = Array2<f32>;

pub const FORMAT_VERSION: &str = "1";
const CKPT_MAGIC: &[u8; 4] = b"DFND";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// An in-memory labeled image collection. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub channels: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l + 1).max().unwrap_or(0)
    }

    /// Per-channel mean over all pixels of all images.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0f64; self.channels];
        let mut count = 0usize;
        for img in &self.images {
            let (h, w, _) = img.dim();
            count += h * w;
            for px in img.rows() {
                for (ci, &v) in px.iter().enumerate() {
                    sums[ci] += v as f64;
                }
            }
        }
        sums.iter().map(|s| s / count.max(1) as f64).collect()
    }
}

/// Load `<path>/<split>/manifest.csv` ("relative_path,label" per line) and
/// the raster files it references. Ordering is lexicographic by filename.
pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset> {
    let dir = path.join(split.dir_name());
    let manifest = dir.join("manifest.csv");
    if !manifest.exists() {
        return Err(Error::input(format!(
            "missing manifest {}",
            manifest.display()
        )));
    }
    let text = std::fs::read_to_string(&manifest)?;
    let mut entries: Vec<(String, usize)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (file, label) = line.rsplit_once(',').ok_or_else(|| {
            Error::input(format!("manifest line {} is not 'path,label'", lineno + 1))
        })?;
        let label: usize = label.trim().parse().map_err(|_| {
            Error::input(format!("manifest line {}: bad label '{label}'", lineno + 1))
        })?;
        entries.push((file.trim().to_string(), label));
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));

    let mut images = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    let mut channels = 0usize;
    let mut hw: Option<(usize, usize)> = None;
    for (file, label) in entries {
        let img_path = dir.join(&file);
        if !img_path.exists() {
            return Err(Error::input(format!(
                "manifest references missing file {file}"
            )));
        }
        let dynimg = image::open(&img_path)?;
        let ch = if dynimg.color().has_color() { 3 } else { 1 };
        if channels == 0 {
            channels = ch;
        } else if channels != ch {
            return Err(Error::input(format!(
                "inconsistent channel count in {file}: expected {channels}, got {ch}"
            )));
        }
        let arr = decode_to_array(&dynimg, ch);
        let (h, w, _) = arr.dim();
        match hw {
            None => hw = Some((h, w)),
            Some((eh, ew)) if (eh, ew) != (h, w) => {
                return Err(Error::input(format!(
                    "inconsistent image size in {file}: expected {eh}x{ew}, got {h}x{w}"
                )));
            }
            _ => {}
        }
        images.push(arr);
        labels.push(label);
    }
    Ok(Dataset {
        images,
        labels,
        split,
        channels: if channels == 0 { 1 } else { channels },
    })
}

fn decode_to_array(img: &image::DynamicImage, channels: usize) -> Image {
    if channels == 3 {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let mut arr = Array3::<f32>::zeros((h as usize, w as usize, 3));
        for (x, y, px) in rgb.enumerate_pixels() {
            for ci in 0..3 {
                arr[[y as usize, x as usize, ci]] = px.0[ci] as f32 / 255.0;
            }
        }
        arr
    } else {
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        let mut arr = Array3::<f32>::zeros((h as usize, w as usize, 1));
        for (x, y, px) in gray.enumerate_pixels() {
            arr[[y as usize, x as usize, 0]] = px.0[0] as f32 / 255.0;
        }
        arr
    }
}

/// Save an image ([0,1] floats) as PNG; 3-channel as RGB, 1-channel as gray.
pub fn save_image_png(img: &Image, path: &Path) -> Result<()> {
    let (h, w, ch) = img.dim();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if ch == 1 {
        let mut buf = image::GrayImage::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            px.0[0] = to_u8(img[[y as usize, x as usize, 0]]);
        }
        buf.save(path)?;
    } else {
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for ci in 0..3 {
                px.0[ci] = to_u8(img[[y as usize, x as usize, ci]]);
            }
        }
        buf.save(path)?;
    }
    Ok(())
}

/// Grayscale proxy for the infrared domain: luminance, 3x3 box blur
/// (reflect borders), then contrast compression toward mid-gray by 0.7.
pub fn to_infrared_proxy(image: &Image) -> Result<Image> {
    let (h, w, ch) = image.dim();
    if ch != 3 {
        return Err(Error::contract(format!(
            "to_infrared_proxy expects 3 channels, got {ch}"
        )));
    }
    let mut lum = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            lum[[y, x]] = 0.299 * image[[y, x, 0]]
                + 0.587 * image[[y, x, 1]]
                + 0.114 * image[[y, x, 2]];
        }
    }
    let reflect = |i: isize, n: usize| -> usize {
        // symmetric reflection: -1 -> 0, n -> n-1
        if i < 0 {
            (-i - 1) as usize
        } else if i as usize >= n {
            2 * n - 1 - i as usize
        } else {
            i as usize
        }
    };
    let mut out = Array3::<f32>::zeros((h, w, 1));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    acc += lum[[reflect(y as isize + dy, h), reflect(x as isize + dx, w)]];
                }
            }
            let blurred = acc / 9.0;
            out[[y, x, 0]] = (0.5 + 0.7 * (blurred - 0.5)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Diffusion,
    Classifier,
    Prompts,
    IdcToken,
}

/// Named parameter arrays plus string metadata, persisted as one file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub parameters: BTreeMap<String, ArrayD<f64>>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    format_version: String,
    kind: CheckpointKind,
    metadata: BTreeMap<String, String>,
    arrays: Vec<CkptArrayMeta>,
    data_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct CkptArrayMeta {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut metadata = ckpt.metadata.clone();
    metadata
        .entry("format_version".to_string())
        .or_insert_with(|| FORMAT_VERSION.to_string());

    let mut data: Vec<u8> = Vec::new();
    let mut arrays = Vec::new();
    for (name, arr) in &ckpt.parameters {
        let offset = data.len();
        for v in arr.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        arrays.push(CkptArrayMeta {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            offset,
            len: arr.len(),
        });
    }
    let mut hasher = Sha256::new();
    hasher.update(&data);
    let digest: Vec<u8> = hasher.finalize().to_vec();
    let header = CkptHeader {
        format_version: metadata["format_version"].clone(),
        kind: ckpt.kind,
        metadata,
        arrays,
        data_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
    };
    let header_json = serde_json::to_vec(&header)?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(CKPT_MAGIC)?;
        f.write_all(&1u32.to_le_bytes())?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        f.write_all(&data)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("{}", path.display())));
    }
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| Error::format("checkpoint truncated before magic"))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let mut v = [0u8; 4];
    f.read_exact(&mut v)?;
    if u32::from_le_bytes(v) != 1 {
        return Err(Error::format(format!(
            "unsupported container version {}",
            u32::from_le_bytes(v)
        )));
    }
    let mut hl = [0u8; 8];
    f.read_exact(&mut hl)?;
    let header_len = u64::from_le_bytes(hl) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)
        .map_err(|_| Error::format("checkpoint truncated in header"))?;
    let header: CkptHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format(format!("bad checkpoint header: {e}")))?;
    if !header.metadata.contains_key("format_version") {
        return Err(Error::format("checkpoint metadata missing format_version"));
    }
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "format version mismatch: file has {}, expected {}",
            header.format_version, FORMAT_VERSION
        )));
    }
    let mut data = Vec::new();
    f.read_to_end(&mut data)?;
    let mut hasher = Sha256::new();
    hasher.update(&data);
    let digest: String = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    if digest != header.data_sha256 {
        return Err(Error::format("checkpoint data corrupted (digest mismatch)"));
    }
    let mut parameters = BTreeMap::new();
    for meta in &header.arrays {
        let start = meta.offset;
        let end = start + meta.len * 8;
        if end > data.len() {
            return Err(Error::format(format!(
                "array block {} out of bounds",
                meta.name
            )));
        }
        let mut vals = Vec::with_capacity(meta.len);
        for chunk in data[start..end].chunks_exact(8) {
            vals.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&meta.shape), vals)
            .map_err(|e| Error::format(format!("bad array shape for {}: {e}", meta.name)))?;
        parameters.insert(meta.name.clone(), arr);
    }
    Ok(Checkpoint {
        kind: header.kind,
        parameters,
        metadata: header.metadata,
    })
}

// ---------------------------------------------------------------------------
// Defense reports
// ---------------------------------------------------------------------------

pub const REPORT_CSV_HEADER: &str =
    "experiment,defense,attack,clean_acc,robust_acc,asr,mean_iou,runtime_s";

/// Per-experiment metrics plus provenance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DefenseReport {
    pub experiment: String,
    pub defense: String,
    pub attack: String,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub asr: f64,
    pub mean_iou: Option<f64>,
    pub runtime_s: f64,
    pub config_hash: String,
    #[serde(default)]
    pub stage_runtime_s: BTreeMap<String, f64>,
    #[serde(default)]
    pub per_image: Vec<PerImageRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerImageRow {
    pub index: usize,
    pub clean_defended_correct: bool,
    pub attacked_defended_correct: bool,
    pub gated: bool,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

fn csv_row(r: &DefenseReport) -> String {
    let iou = match r.mean_iou {
        Some(v) => format!("{v:.6}"),
        None => String::new(),
    };
    format!(
        "{},{},{},{:.6},{:.6},{:.6},{},{:.6}",
        r.experiment, r.defense, r.attack, r.clean_acc, r.robust_acc, r.asr, iou, r.runtime_s
    )
}

pub fn write_report(report: &DefenseReport, path: &Path, format: ReportFormat) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    match format {
        ReportFormat::Csv => {
            let mut text = String::new();
            text.push_str(REPORT_CSV_HEADER);
            text.push('\n');
            text.push_str(&csv_row(report));
            text.push('\n');
            std::fs::write(path, text)?;
        }
        ReportFormat::Json => {
            let json = serde_json::to_string_pretty(report)?;
            std::fs::write(path, json)?;
        }
    }
    Ok(())
}

/// Combined CSV: header plus one row per report (empty list gives a
/// header-only file).
pub fn write_reports_csv(reports: &[DefenseReport], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = String::new();
    text.push_str(REPORT_CSV_HEADER);
    text.push('\n');
    for r in reports {
        text.push_str(&csv_row(r));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<DefenseReport> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Parse the numeric columns back from a combined CSV (for round-trip checks
/// and the `report` CLI verb).
pub fn read_reports_csv(path: &Path) -> Result<Vec<(String, String, String, Vec<Option<f64>>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == REPORT_CSV_HEADER => {}
        _ => return Err(Error::format("bad report CSV header")),
    }
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(Error::format(format!("bad report CSV row: {line}")));
        }
        let nums = parts[3..]
            .iter()
            .map(|p| {
                if p.is_empty() {
                    Ok(None)
                } else {
                    p.parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::format(format!("bad number {p}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((
            parts[0].to_string(),
            parts[1].to_string(),
            parts[2].to_string(),
            nums,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use tempfile::tempdir;

    #[test]
    fn empty_manifest_gives_empty_dataset() {
        let dir = tempdir().unwrap();
        let split_dir = dir.path().join("train");
        std::fs::create_dir_all(&split_dir).unwrap();
        std::fs::write(split_dir.join("manifest.csv"), "").unwrap();
        let ds = load_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(ds.len(), 0);
    }

    #[test]
    fn single_grayscale_image_loads() {
        let dir = tempdir().unwrap();
        let split_dir = dir.path().join("test");
        std::fs::create_dir_all(&split_dir).unwrap();
        let img = Array3::<f32>::from_elem((32, 32, 1), 0.5);
        save_image_png(&img, &split_dir.join("a.png")).unwrap();
        std::fs::write(split_dir.join("manifest.csv"), "a.png,3\n").unwrap();
        let ds = load_dataset(dir.path(), Split::Test).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.channels, 1);
        assert_eq!(ds.labels, vec![3]);
        assert!((ds.images[0][[0, 0, 0]] - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn missing_file_is_input_error() {
        let dir = tempdir().unwrap();
        let split_dir = dir.path().join("train");
        std::fs::create_dir_all(&split_dir).unwrap();
        let img = Array3::<f32>::zeros((8, 8, 3));
        save_image_png(&img, &split_dir.join("a.png")).unwrap();
        std::fs::write(split_dir.join("manifest.csv"), "a.png,0\nb.png,1\n").unwrap();
        match load_dataset(dir.path(), Split::Train) {
            Err(Error::Input(msg)) => assert!(msg.contains("b.png")),
            other => panic!("expected input error, got {other:?}"),
        }
    }

    #[test]
    fn load_is_deterministic() {
        let dir = tempdir().unwrap();
        let split_dir = dir.path().join("train");
        std::fs::create_dir_all(&split_dir).unwrap();
        for (i, name) in ["c.png", "a.png", "b.png"].iter().enumerate() {
            let img = Array3::<f32>::from_elem((8, 8, 3), i as f32 * 0.3);
            save_image_png(&img, &split_dir.join(name)).unwrap();
        }
        std::fs::write(split_dir.join("manifest.csv"), "c.png,2\na.png,0\nb.png,1\n").unwrap();
        let d1 = load_dataset(dir.path(), Split::Train).unwrap();
        let d2 = load_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(d1.labels, vec![0, 1, 2], "lexicographic order");
        assert_eq!(d1.labels, d2.labels);
        for (a, b) in d1.images.iter().zip(d2.images.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn infrared_proxy_black_fixed_point_and_constant() {
        let black = Array3::<f32>::zeros((8, 8, 3));
        let out = to_infrared_proxy(&black).unwrap();
        // 0.5 + 0.7*(0 - 0.5) = 0.15
        for &v in out.iter() {
            assert!((v - 0.15).abs() < 1e-6);
        }
        let white = Array3::<f32>::from_elem((8, 8, 3), 1.0);
        let out = to_infrared_proxy(&white).unwrap();
        for &v in out.iter() {
            assert!((v - 0.85).abs() < 1e-6);
        }
        let gray = Array3::<f32>::from_elem((4, 4, 1), 0.3);
        assert!(to_infrared_proxy(&gray).is_err());
    }

    #[test]
    fn infrared_proxy_blur_spreads_single_pixel() {
        let mut img = Array3::<f32>::zeros((5, 5, 3));
        for ci in 0..3 {
            img[[2, 2, ci]] = 1.0;
        }
        let out = to_infrared_proxy(&img).unwrap();
        // luminance of white pixel = 1.0; blur spreads 1/9 to the 3x3 block
        let center_expect = 0.5 + 0.7 * (1.0 / 9.0 - 0.5);
        let corner_expect = 0.5 + 0.7 * (0.0 - 0.5);
        assert!((out[[2, 2, 0]] - center_expect).abs() < 1e-6);
        assert!((out[[1, 1, 0]] - center_expect).abs() < 1e-6, "3x3 neighborhood");
        assert!((out[[0, 0, 0]] - corner_expect).abs() < 1e-6);
    }

    #[test]
    fn infrared_proxy_is_contraction() {
        let mut rng = crate::util::rng_for(5, "ir-contraction");
        use crate::nn::Scalar;
        let mut img = Array3::<f32>::zeros((16, 16, 3));
        for v in img.iter_mut() {
            *v = f32::rand01(&mut rng);
        }
        let out = to_infrared_proxy(&img).unwrap();
        let lum_std = {
            let mut lum = Vec::new();
            for y in 0..16 {
                for x in 0..16 {
                    lum.push(
                        0.299 * img[[y, x, 0]] + 0.587 * img[[y, x, 1]] + 0.114 * img[[y, x, 2]],
                    );
                }
            }
            let m: f32 = lum.iter().sum::<f32>() / lum.len() as f32;
            (lum.iter().map(|v| (v - m).powi(2)).sum::<f32>() / lum.len() as f32).sqrt()
        };
        let out_std = {
            let m: f32 = out.iter().sum::<f32>() / out.len() as f32;
            (out.iter().map(|v| (v - m).powi(2)).sum::<f32>() / out.len() as f32).sqrt()
        };
        assert!(out_std <= lum_std, "contrast compression is a contraction");
        for &v in out.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut params = BTreeMap::new();
        params.insert(
            "m".to_string(),
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.5, -2.25, 1e-300, 3.0]).unwrap(),
        );
        let mut metadata = BTreeMap::new();
        metadata.insert("note".to_string(), "unit".to_string());
        let ckpt = Checkpoint {
            kind: CheckpointKind::Prompts,
            parameters: params,
            metadata,
        };
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.kind, CheckpointKind::Prompts);
        assert_eq!(loaded.parameters["m"], ckpt.parameters["m"]);
        assert_eq!(loaded.metadata["note"], "unit");
        assert_eq!(loaded.metadata["format_version"], FORMAT_VERSION);
    }

    #[test]
    fn checkpoint_prompt_matrix_shape_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let arr = ArrayD::from_shape_vec(IxDyn(&[16, 128]), (0..16 * 128).map(|i| i as f64).collect())
            .unwrap();
        let mut params = BTreeMap::new();
        params.insert("prompt_l".to_string(), arr);
        let ckpt = Checkpoint {
            kind: CheckpointKind::Prompts,
            parameters: params,
            metadata: BTreeMap::new(),
        };
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.parameters["prompt_l"].shape(), &[16, 128]);
    }

    #[test]
    fn checkpoint_version_mismatch_and_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        let mut metadata = BTreeMap::new();
        metadata.insert("format_version".to_string(), "999".to_string());
        let ckpt = Checkpoint {
            kind: CheckpointKind::Diffusion,
            parameters: BTreeMap::new(),
            metadata,
        };
        save_checkpoint(&ckpt, &path).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("version")),
            other => panic!("expected format error, got {other:?}"),
        }

        // corrupt an array byte
        let path2 = dir.path().join("c.ckpt");
        let mut params = BTreeMap::new();
        params.insert(
            "a".to_string(),
            ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        save_checkpoint(
            &Checkpoint {
                kind: CheckpointKind::Diffusion,
                parameters: params,
                metadata: BTreeMap::new(),
            },
            &path2,
        )
        .unwrap();
        let mut bytes = std::fs::read(&path2).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0xff;
        std::fs::write(&path2, bytes).unwrap();
        match load_checkpoint(&path2) {
            Err(Error::Format(msg)) => assert!(msg.contains("corrupt")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_save_is_byte_stable() {
        let dir = tempdir().unwrap();
        let mut params = BTreeMap::new();
        params.insert(
            "z".to_string(),
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.25, 0.5, -0.125]).unwrap(),
        );
        let ckpt = Checkpoint {
            kind: CheckpointKind::Classifier,
            parameters: params,
            metadata: BTreeMap::new(),
        };
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&ckpt, &p1).unwrap();
        save_checkpoint(&ckpt, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn report_csv_formatting_contract() {
        let dir = tempdir().unwrap();
        let report = DefenseReport {
            experiment: "e".into(),
            defense: "none".into(),
            attack: "advp".into(),
            clean_acc: 1.0,
            robust_acc: 0.5,
            asr: 0.5,
            mean_iou: None,
            runtime_s: 0.0,
            config_hash: "h".into(),
            stage_runtime_s: BTreeMap::new(),
            per_image: vec![],
        };
        let path = dir.path().join("r.csv");
        write_report(&report, &path, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let row = text.lines().nth(1).unwrap();
        assert!(row.contains("1.000000,0.500000,0.500000"));

        // header-only combined CSV for an empty report list
        let empty = dir.path().join("empty.csv");
        write_reports_csv(&[], &empty).unwrap();
        let text = std::fs::read_to_string(&empty).unwrap();
        assert_eq!(text.trim(), REPORT_CSV_HEADER);
    }

    #[test]
    fn report_json_roundtrip_mean_iou() {
        let dir = tempdir().unwrap();
        let report = DefenseReport {
            experiment: "e".into(),
            defense: "diffender".into(),
            attack: "advp".into(),
            clean_acc: 0.9,
            robust_acc: 0.8,
            asr: 0.2,
            mean_iou: Some(0.42),
            runtime_s: 1.25,
            config_hash: "h".into(),
            stage_runtime_s: BTreeMap::new(),
            per_image: vec![],
        };
        let path = dir.path().join("r.json");
        write_report(&report, &path, ReportFormat::Json).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"mean_iou\": 0.42"));
        let loaded = read_report_json(&path).unwrap();
        assert_eq!(loaded, report);
    }
}
