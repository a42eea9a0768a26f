//! Run bundles: a directory of artifacts described by `manifest.json`.
//!
//! Every file a bundle references carries a SHA-256 checksum in the
//! manifest. The manifest is written last (via rename) so a reader never
//! sees a half-written bundle as complete.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{set_report, RunReport};
use crate::model::{warp_tensor, ModelConfig, ModelParams};
use crate::pair::{Dvf, RegistrationPair};
use crate::synth::Dataset;
use crate::tensor::Tensor;
use crate::train::{GenmedTrace, TrainTrace, WeightMode};

pub const SCHEMA_VERSION: u32 = 1;
pub const DVF_MAGIC: &[u8; 6] = b"MODVF1";
pub const DVF_VERSION: u8 = 1;
/// Arrow spacing of DVF overlays, in voxels.
pub const OVERLAY_STRIDE: usize = 4;
/// Overlay pixels per voxel.
pub const OVERLAY_SCALE: usize = 4;

/// Encodes a field as the raw little-endian f32 raster format.
pub fn encode_dvf(dvf: &Dvf) -> Vec<u8> {
    let (h, w) = (dvf.height(), dvf.width());
    let mut out = Vec::with_capacity(16 + 8 * h * w);
    out.extend_from_slice(DVF_MAGIC);
    out.push(DVF_VERSION);
    out.push(2);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in dvf.ux().iter().chain(dvf.uy()) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_dvf(bytes: &[u8], path: &Path) -> Result<Dvf> {
    let bad = |reason: String| Error::integrity(path, reason);
    if bytes.len() < 16 {
        return Err(bad(format!("DVF raster truncated to {} bytes", bytes.len())));
    }
    if &bytes[..6] != DVF_MAGIC {
        return Err(bad("bad DVF magic".into()));
    }
    if bytes[6] != DVF_VERSION || bytes[7] != 2 {
        return Err(bad(format!("unsupported DVF version {} / ndim {}", bytes[6], bytes[7])));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let expected = h.checked_mul(w).and_then(|n| n.checked_mul(8)).and_then(|n| n.checked_add(16));
    if expected != Some(bytes.len()) {
        return Err(bad(format!(
            "DVF raster of {h}x{w} must be {:?} bytes, found {}",
            expected,
            bytes.len()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Dvf::new(Tensor::new(&[1, 2, h, w], data)?).map_err(|e| bad(e.to_string()))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn png_bytes(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let err = |e: png::EncodingError| Error::Png {
        path: PathBuf::from("<memory>"),
        reason: e.to_string(),
    };
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(data).map_err(err)?;
    writer.finish().map_err(err)?;
    Ok(out)
}

/// 8-bit grayscale PNG of channel `channel` of a `[1,C,H,W]` tensor with
/// values in `[0,1]` (quantized to 1/255).
pub fn gray_png(t: &Tensor, channel: usize) -> Result<Vec<u8>> {
    let [_, _, h, w] = t.dims4()?;
    let plane = &t.data()[channel * h * w..(channel + 1) * h * w];
    png_bytes(w, h, png::ColorType::Grayscale, &plane.iter().map(|&v| to_u8(v)).collect::<Vec<_>>())
}

/// Organ masks as one label image: organ `k` of `K` gets gray level
/// `(k+1)/K`.
pub fn label_png(mask: &Tensor) -> Result<Vec<u8>> {
    let [_, k, h, w] = mask.dims4()?;
    let mut out = vec![0u8; h * w];
    for c in 0..k {
        for (o, &v) in out.iter_mut().zip(&mask.data()[c * h * w..(c + 1) * h * w]) {
            if v >= 0.5 {
                *o = to_u8((c + 1) as f64 / k as f64);
            }
        }
    }
    png_bytes(w, h, png::ColorType::Grayscale, &out)
}

/// Decodes an 8-bit grayscale PNG into `[1,1,H,W]` with values in `[0,1]`.
pub fn read_gray_png(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let err = |reason: String| Error::Png {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = png::Decoder::new(Cursor::new(bytes))
        .read_info()
        .map_err(|e| err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(err(format!("expected 8-bit grayscale, got {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    Tensor::new(
        &[1, 1, h, w],
        buf[..w * h].iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

fn magnitude_color(t: f64) -> [u8; 3] {
    // blue -> yellow -> red
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let s = t * 2.0;
        (s, s, 1.0 - s)
    } else {
        let s = (t - 0.5) * 2.0;
        (1.0, 1.0 - s, 0.0)
    };
    [to_u8(r), to_u8(g), to_u8(b)]
}

/// RGB quiver plot of `dvf` over `background`, arrows every
/// [`OVERLAY_STRIDE`] voxels, colored by displacement magnitude relative to
/// `scale_max`.
pub fn overlay_png(background: &Tensor, dvf: &Dvf, scale_max: f64) -> Result<Vec<u8>> {
    let [_, _, h, w] = background.dims4()?;
    let s = OVERLAY_SCALE;
    let (ow, oh) = (w * s, h * s);
    let mut rgb = vec![0u8; ow * oh * 3];
    for y in 0..oh {
        for x in 0..ow {
            let g = to_u8(background.data()[(y / s) * w + x / s]);
            rgb[(y * ow + x) * 3..(y * ow + x) * 3 + 3].copy_from_slice(&[g, g, g]);
        }
    }
    let mut plot = |px: f64, py: f64, color: [u8; 3]| {
        let (xi, yi) = (px.round(), py.round());
        if xi >= 0.0 && yi >= 0.0 && (xi as usize) < ow && (yi as usize) < oh {
            let i = (yi as usize * ow + xi as usize) * 3;
            rgb[i..i + 3].copy_from_slice(&color);
        }
    };
    let half = OVERLAY_STRIDE / 2;
    for y in (half..h).step_by(OVERLAY_STRIDE) {
        for x in (half..w).step_by(OVERLAY_STRIDE) {
            let (ux, uy) = dvf.at(x, y);
            let len = ux.hypot(uy) * s as f64;
            if len < 0.5 {
                continue;
            }
            let color = magnitude_color(ux.hypot(uy) / scale_max.max(1e-12));
            let (x0, y0) = ((x * s + s / 2) as f64, (y * s + s / 2) as f64);
            let steps = len.ceil() as usize * 2;
            for i in 0..=steps {
                let t = i as f64 / steps as f64;
                plot(x0 + t * ux * s as f64, y0 + t * uy * s as f64, color);
            }
            let (tx, ty) = (x0 + ux * s as f64, y0 + uy * s as f64);
            for (dx, dy) in [(-1.0, 0.0), (1.0, 0.0), (0.0, -1.0), (0.0, 1.0)] {
                plot(tx + dx, ty + dy, color);
            }
        }
    }
    png_bytes(ow, oh, png::ColorType::Rgb, &rgb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SolutionWeights {
    /// Always `"dynamic"`.
    Label(String),
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSolution {
    pub id: usize,
    pub weights: SolutionWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub config: Value,
    pub p: usize,
    #[serde(rename = "ref", default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Vec<f64>>,
    #[serde(default)]
    pub solutions: Vec<ManifestSolution>,
    /// Unnormalized grid triples of a grid-search run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_weights: Option<Vec<[f64; 3]>>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn file(&self, path: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == path)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Accumulates checksummed files under one directory.
pub struct BundleWriter {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl BundleWriter {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        // A stale manifest would describe files about to be replaced.
        let stale = dir.join("manifest.json");
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
        Ok(BundleWriter {
            dir,
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<()> {
        let text = serde_json::to_vec_pretty(value).map_err(|e| Error::Json {
            path: self.dir.join(rel),
            source: e,
        })?;
        self.bytes(rel, &text)
    }

    /// Writes the manifest last, atomically.
    pub fn finish(self, mut manifest: Manifest) -> Result<Manifest> {
        manifest.files = self.files;
        let tmp = self.dir.join("manifest.json.tmp");
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// A verified bundle: every referenced file exists and matches its
/// checksum, and every DVF raster parses.
#[derive(Clone, Debug)]
pub struct RunBundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl RunBundle {
    pub fn read_file(&self, rel: &str) -> Result<Vec<u8>> {
        let entry = self
            .manifest
            .file(rel)
            .ok_or_else(|| Error::integrity(self.dir.join(rel), "not listed in manifest"))?;
        let path = self.dir.join(&entry.path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::integrity(path, "checksum mismatch"));
        }
        Ok(bytes)
    }

    pub fn json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<T> {
        let bytes = self.read_file(rel)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: self.dir.join(rel),
            source: e,
        })
    }

    pub fn dvf(&self, rel: &str) -> Result<Dvf> {
        decode_dvf(&self.read_file(rel)?, &self.dir.join(rel))
    }

    pub fn trace(&self) -> Result<TrainTrace> {
        self.json("trace.json")
    }

    pub fn dataset(&self) -> Result<Dataset> {
        self.json("dataset.json")
    }

    pub fn params(&self) -> Result<ModelParams> {
        let config: ModelConfig = self.json("model.json")?;
        let path = self.dir.join("params.bin");
        decode_params(&config, &self.read_file("params.bin")?, &path)
    }
}

pub fn read_bundle(dir: impl AsRef<Path>) -> Result<RunBundle> {
    let dir = dir.as_ref().to_path_buf();
    let path = dir.join("manifest.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let raw: Value = serde_json::from_slice(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    let found = raw
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::integrity(&path, "missing schema_version"))?;
    if found != SCHEMA_VERSION as u64 {
        return Err(Error::Version {
            found: found as u32,
            expected: SCHEMA_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    for s in &manifest.solutions {
        if let SolutionWeights::Label(l) = &s.weights {
            if l != "dynamic" {
                return Err(Error::integrity(&path, format!("unknown weight label {l:?}")));
            }
        }
    }
    let bundle = RunBundle { dir, manifest };
    for f in &bundle.manifest.files {
        if f.path.contains("..") || Path::new(&f.path).is_absolute() {
            return Err(Error::integrity(&path, format!("file path {:?} escapes the bundle", f.path)));
        }
        let bytes = bundle.read_file(&f.path)?;
        if f.path.ends_with(".modvf") {
            decode_dvf(&bytes, &bundle.dir.join(&f.path))?;
        }
    }
    Ok(bundle)
}

pub fn encode_params(params: &ModelParams) -> Vec<u8> {
    params
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

pub fn decode_params(config: &ModelConfig, bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let mut params = ModelParams::init(0, config)?;
    if bytes.len() != params.parameter_count() * 8 {
        return Err(Error::integrity(
            path,
            format!("expected {} parameter bytes, found {}", params.parameter_count() * 8, bytes.len()),
        ));
    }
    let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterFiles {
    pub warped: String,
    pub overlay: String,
    pub dvf: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterSolution {
    pub id: usize,
    pub losses: Vec<f64>,
    pub weights: SolutionWeights,
    pub tre: f64,
    pub folding_pct: f64,
    pub dice_pct: Option<f64>,
    pub files: ScatterFiles,
}

/// Data behind the explorer's scatter plot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scatter {
    pub schema_version: u32,
    pub ref_point: Vec<f64>,
    /// Mean landmark error before registration, the reference marker on
    /// the TRE color scale.
    pub pre_tre: f64,
    /// Evaluation-pair index the per-solution images belong to, or `None`
    /// for the evaluation-set mean.
    pub pair: Option<usize>,
    pub solutions: Vec<ScatterSolution>,
}

fn solution_weights(mode: &WeightMode, head: usize) -> SolutionWeights {
    match mode {
        WeightMode::Dynamic => SolutionWeights::Label("dynamic".into()),
        WeightMode::Fixed(w) => SolutionWeights::Fixed(w[head].clone()),
    }
}

fn pair_dir(k: usize) -> String {
    format!("pairs/{k:03}")
}

fn solution_files(k: usize, head: usize) -> ScatterFiles {
    let base = format!("{}/solutions/{head:03}", pair_dir(k));
    ScatterFiles {
        warped: format!("{base}/warped.png"),
        overlay: format!("{base}/overlay.png"),
        dvf: format!("{base}/dvf.modvf"),
    }
}

/// Writes a pair's originals: images, mask label maps, landmarks and (when
/// known) the ground-truth field.
fn write_pair(w: &mut BundleWriter, dir: &str, pair: &RegistrationPair) -> Result<()> {
    w.bytes(&format!("{dir}/source.png"), &gray_png(&pair.source_image, 0)?)?;
    w.bytes(&format!("{dir}/target.png"), &gray_png(&pair.target_image, 0)?)?;
    w.bytes(&format!("{dir}/source_mask.png"), &label_png(&pair.source_mask)?)?;
    w.bytes(&format!("{dir}/target_mask.png"), &label_png(&pair.target_mask)?)?;
    w.json(&format!("{dir}/landmarks.json"), &pair.landmarks)?;
    if let Some(gt) = &pair.gt_dvf {
        w.bytes(&format!("{dir}/gt_dvf.modvf"), &encode_dvf(gt))?;
    }
    Ok(())
}

pub struct RunArtifacts<'a> {
    pub kind: &'a str,
    pub trace: &'a TrainTrace,
    pub params: &'a ModelParams,
    pub data: &'a Dataset,
    /// How many evaluation pairs get per-solution images.
    pub export_pairs: usize,
    pub grid_weights: Option<Vec<[f64; 3]>>,
}

/// Writes a complete training-run bundle and returns its manifest together
/// with the evaluation report it was built from.
pub fn write_run_bundle(run: &RunArtifacts, out: impl Into<PathBuf>) -> Result<(Manifest, RunReport)> {
    let cfg = &run.trace.config;
    let eval: Vec<RegistrationPair> = run
        .data
        .eval_indices()
        .map(|i| run.data.pair(i))
        .collect::<Result<_>>()?;
    let report = set_report(run.params, &eval, &cfg.reference, cfg.guidance)?;
    let mut w = BundleWriter::create(out)?;
    w.json("trace.json", run.trace)?;
    w.json("dataset.json", run.data)?;
    w.json("model.json", &run.params.config)?;
    w.bytes("params.bin", &encode_params(run.params))?;
    w.json("metrics.json", &report)?;
    w.bytes("metrics.csv", metrics_csv(&report).as_bytes())?;

    let p = run.params.heads.len();
    let mut per_pair = Vec::new();
    for (k, (pair, pr)) in eval.iter().zip(&report.pairs).take(run.export_pairs).enumerate() {
        let dir = pair_dir(k);
        write_pair(&mut w, &dir, pair)?;
        let dvfs = crate::model::predict(run.params, pair)?;
        let scale_max = dvfs.iter().map(Dvf::max_magnitude).fold(0.0, f64::max);
        let mut solutions = Vec::with_capacity(p);
        for (head, dvf) in dvfs.iter().enumerate() {
            let files = solution_files(k, head);
            let warped = warp_tensor(&pair.source_image, dvf)?;
            let warped_mask = warp_tensor(&pair.source_mask, dvf)?;
            let base = files.dvf.trim_end_matches("/dvf.modvf").to_string();
            w.bytes(&files.warped, &gray_png(&warped, 0)?)?;
            w.bytes(&format!("{base}/warped_mask.png"), &label_png(&warped_mask)?)?;
            w.bytes(&files.overlay, &overlay_png(&pair.source_image, dvf, scale_max)?)?;
            w.bytes(&files.dvf, &encode_dvf(dvf))?;
            let m = &pr.set.solutions[head];
            solutions.push(ScatterSolution {
                id: head,
                losses: m.losses.clone(),
                weights: solution_weights(&run.trace.mode, head),
                tre: m.mean_tre,
                folding_pct: m.folding_pct,
                dice_pct: m.dice_pct,
                files,
            });
        }
        let scatter = Scatter {
            schema_version: SCHEMA_VERSION,
            ref_point: cfg.reference.clone(),
            pre_tre: pr.pre_tre,
            pair: Some(k),
            solutions,
        };
        w.json(&format!("{dir}/scatter.json"), &scatter)?;
        per_pair.push(scatter);
    }

    // Top level: the approximation set (evaluation-set means), with images
    // from the first exported pair.
    let solutions = (0..p)
        .map(|head| {
            let m = &report.mean_set.solutions[head];
            ScatterSolution {
                id: head,
                losses: m.losses.clone(),
                weights: solution_weights(&run.trace.mode, head),
                tre: m.mean_tre,
                folding_pct: m.folding_pct,
                dice_pct: m.dice_pct,
                files: per_pair
                    .first()
                    .map(|s| s.solutions[head].files.clone())
                    .unwrap_or_else(|| solution_files(0, head)),
            }
        })
        .collect();
    w.json(
        "scatter.json",
        &Scatter {
            schema_version: SCHEMA_VERSION,
            ref_point: cfg.reference.clone(),
            pre_tre: report.pre_tre,
            pair: None,
            solutions,
        },
    )?;

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        kind: run.kind.to_string(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        p,
        reference: Some(cfg.reference.clone()),
        solutions: (0..p)
            .map(|id| ManifestSolution {
                id,
                weights: solution_weights(&run.trace.mode, id),
            })
            .collect(),
        grid_weights: run.grid_weights.clone(),
        files: Vec::new(),
    };
    Ok((w.finish(manifest)?, report))
}

pub fn metrics_csv(report: &RunReport) -> String {
    let dims = report.mean_set.solutions.first().map_or(0, |s| s.losses.len());
    let mut out = String::from("pair,head,mean_tre,folding_pct,dice_pct");
    for k in 0..dims {
        out.push_str(&format!(",loss_{k}"));
    }
    out.push('\n');
    let rows = report
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (i.to_string(), &p.set))
        .chain(std::iter::once(("mean".to_string(), &report.mean_set)));
    for (label, set) in rows {
        for (h, s) in set.solutions.iter().enumerate() {
            out.push_str(&format!(
                "{label},{h},{},{},{}",
                s.mean_tre,
                s.folding_pct,
                s.dice_pct.map(|d| d.to_string()).unwrap_or_default()
            ));
            for l in &s.losses {
                out.push_str(&format!(",{l}"));
            }
            out.push('\n');
        }
    }
    out
}

/// Writes a dataset: its configuration plus every pair's originals.
pub fn write_dataset_bundle(data: &Dataset, out: impl Into<PathBuf>) -> Result<Manifest> {
    let mut w = BundleWriter::create(out)?;
    w.json("dataset.json", data)?;
    for (i, pair) in data.iter().enumerate() {
        write_pair(&mut w, &pair_dir(i), &pair?)?;
    }
    w.finish(Manifest {
        schema_version: SCHEMA_VERSION,
        kind: "synth".into(),
        config: serde_json::to_value(data).expect("dataset serializes"),
        p: 0,
        reference: None,
        solutions: Vec::new(),
        grid_weights: None,
        files: Vec::new(),
    })
}

/// Writes GenMED traces, one per reference point.
pub fn write_genmed_bundle(config: &crate::train::GenmedConfig, traces: &[GenmedTrace], out: impl Into<PathBuf>) -> Result<Manifest> {
    let mut w = BundleWriter::create(out)?;
    for (i, t) in traces.iter().enumerate() {
        w.json(&format!("genmed/trace_{i:02}.json"), t)?;
    }
    w.finish(Manifest {
        schema_version: SCHEMA_VERSION,
        kind: "genmed".into(),
        config: serde_json::to_value(config).expect("config serializes"),
        p: config.p,
        reference: None,
        solutions: Vec::new(),
        grid_weights: None,
        files: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dvf_raster_layout() {
        let d = Dvf::from_fn(3, 5, |x, y| (x as f64 + 0.25, -(y as f64)));
        let b = encode_dvf(&d);
        assert_eq!(b.len(), 16 + 8 * 15);
        assert_eq!(&b[..6], b"MODVF1");
        assert_eq!((b[6], b[7]), (1, 2));
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 5);
        assert_eq!(f32::from_le_bytes(b[16..20].try_into().unwrap()), 0.25);
        let back = decode_dvf(&b, Path::new("x")).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn truncated_raster_is_integrity_error() {
        let b = encode_dvf(&Dvf::zeros(4, 4));
        for cut in [0, 10, 16, b.len() - 1] {
            assert!(matches!(decode_dvf(&b[..cut], Path::new("x")), Err(Error::Integrity { .. })));
        }
    }

    #[test]
    fn png_round_trip_quantizes() {
        let t = Tensor::from_fn(&[1, 1, 5, 7], |i| (i as f64 * 0.037) % 1.0);
        let back = read_gray_png(&gray_png(&t, 0).unwrap(), Path::new("x")).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
