//! Corpus construction: volume slicing, key-slice selection, patient-level
//! splitting, and the image-description manifest.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::DescriptionBackend;

/// Offset added to HU values when stored as unsigned 16-bit PNG samples.
/// Values below -1024 HU clamp to 0.
pub const HU_PNG_OFFSET: i32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "BHD")]
    Bhd,
    #[serde(rename = "LAM")]
    Lam,
    #[serde(rename = "PLCH")]
    Plch,
    #[serde(rename = "LIP")]
    Lip,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 4] = [Self::Bhd, Self::Lam, Self::Plch, Self::Lip];

    pub fn is_bhd(self) -> bool {
        self == ClassLabel::Bhd
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bhd => "BHD",
            Self::Lam => "LAM",
            Self::Plch => "PLCH",
            Self::Lip => "LIP",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Transverse,
    Sagittal,
    Coronal,
}

impl View {
    pub const ALL: [View; 3] = [View::Transverse, View::Sagittal, View::Coronal];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Transverse => "transverse",
            View::Sagittal => "sagittal",
            View::Coronal => "coronal",
        }
    }

    pub fn parse(s: &str) -> Option<View> {
        match s.trim().to_ascii_lowercase().as_str() {
            "transverse" | "axial" => Some(View::Transverse),
            "sagittal" => Some(View::Sagittal),
            "coronal" => Some(View::Coronal),
            _ => None,
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    ExpertRefined,
}

/// A CT volume in HU, stored depth-major (`[d][h][w]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    voxels: Vec<i16>,
    pub spacing_mm: [f64; 3],
    pub patient_id: String,
    pub class_label: ClassLabel,
}

impl Volume3D {
    pub fn new(
        dims: [usize; 3],
        voxels: Vec<i16>,
        spacing_mm: [f64; 3],
        patient_id: impl Into<String>,
        class_label: ClassLabel,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidVolume(format!("empty dimension in {dims:?}")));
        }
        let expected = dims[0]
            .checked_mul(dims[1])
            .and_then(|n| n.checked_mul(dims[2]))
            .ok_or_else(|| Error::InvalidVolume("dimension product overflows".into()))?;
        if voxels.len() != expected {
            return Err(Error::InvalidVolume(format!(
                "{} voxels for dims {dims:?} (expected {expected})",
                voxels.len()
            )));
        }
        if spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidVolume(format!("non-positive spacing {spacing_mm:?}")));
        }
        let patient_id = patient_id.into();
        if patient_id.is_empty() {
            return Err(Error::InvalidVolume("empty patient id".into()));
        }
        Ok(Self {
            dims,
            voxels,
            spacing_mm,
            patient_id,
            class_label,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn voxel(&self, z: usize, y: usize, x: usize) -> i16 {
        let [_, h, w] = self.dims;
        self.voxels[(z * h + y) * w + x]
    }

    /// Number of sections along the axis that `view` cuts.
    pub fn axis_len(&self, view: View) -> usize {
        let [d, h, w] = self.dims;
        match view {
            View::Transverse => d,
            View::Coronal => h,
            View::Sagittal => w,
        }
    }

    /// The 2-D section at `index` along the axis of `view`.
    ///
    /// Transverse sections are `(h, w)`, coronal `(d, w)`, sagittal `(d, h)`.
    pub fn section(&self, view: View, index: usize) -> HuSlice {
        let [d, h, w] = self.dims;
        assert!(index < self.axis_len(view), "section index out of range");
        match view {
            View::Transverse => {
                let start = index * h * w;
                HuSlice::new(h, w, self.voxels[start..start + h * w].to_vec())
            }
            View::Coronal => {
                let mut px = Vec::with_capacity(d * w);
                for z in 0..d {
                    let row = (z * h + index) * w;
                    px.extend_from_slice(&self.voxels[row..row + w]);
                }
                HuSlice::new(d, w, px)
            }
            View::Sagittal => {
                let mut px = Vec::with_capacity(d * h);
                for z in 0..d {
                    for y in 0..h {
                        px.push(self.voxels[(z * h + y) * w + index]);
                    }
                }
                HuSlice::new(d, h, px)
            }
        }
    }
}

/// JSON sidecar describing a raw little-endian int16 voxel file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub patient_id: String,
    pub class_label: ClassLabel,
}

/// Reads `<stem>.json` and its sibling `<stem>.raw`.
pub fn read_volume(header_path: &Path) -> Result<Volume3D> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: VolumeHeader = serde_json::from_str(&text)
        .map_err(|e| Error::format(header_path, format!("bad volume header: {e}")))?;
    let raw_path = header_path.with_extension("raw");
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if bytes.len() % 2 != 0 {
        return Err(Error::format(&raw_path, "odd byte count in int16 voxel file"));
    }
    let voxels = bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    Volume3D::new(
        header.dims,
        voxels,
        header.spacing_mm,
        header.patient_id,
        header.class_label,
    )
}

/// Writes the volume as `<stem>.json` + `<stem>.raw`.
pub fn write_volume(volume: &Volume3D, header_path: &Path) -> Result<()> {
    let header = VolumeHeader {
        dims: volume.dims,
        spacing_mm: volume.spacing_mm,
        patient_id: volume.patient_id.clone(),
        class_label: volume.class_label,
    };
    let json = serde_json::to_string_pretty(&header)?;
    fs::write(header_path, json).map_err(|e| Error::io(header_path, e))?;
    let raw_path = header_path.with_extension("raw");
    let bytes: Vec<u8> = volume.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

/// A single 2-D section in HU, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuSlice {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<i16>,
}

impl HuSlice {
    pub fn new(height: usize, width: usize, pixels: Vec<i16>) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel count does not match dims");
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> i16 {
        self.pixels[y * self.width + x]
    }
}

/// Writes a 16-bit grayscale PNG holding `HU + HU_PNG_OFFSET`.
pub fn write_hu_png(path: &Path, slice: &HuSlice) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), slice.width as u32, slice.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    let data: Vec<u8> = slice
        .pixels
        .iter()
        .flat_map(|&hu| {
            let stored = (hu as i32 + HU_PNG_OFFSET).clamp(0, u16::MAX as i32) as u16;
            stored.to_be_bytes()
        })
        .collect();
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}

/// Reads a 16-bit grayscale PNG written by [`write_hu_png`].
pub fn read_hu_png(path: &Path) -> Result<HuSlice> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::format(
            path,
            format!(
                "expected 16-bit grayscale, found {:?} at {:?}",
                info.color_type, info.bit_depth
            ),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|c| (u16::from_be_bytes([c[0], c[1]]) as i32 - HU_PNG_OFFSET) as i16)
        .collect();
    Ok(HuSlice::new(h, w, pixels))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub slice_id: String,
    pub patient_id: String,
    pub class_label: ClassLabel,
    pub view: View,
    pub frame_index: usize,
    pub image_ref: String,
    pub split: Split,
}

impl SliceRecord {
    pub fn canonical_id(patient_id: &str, view: View, frame_index: usize) -> String {
        format!("{patient_id}_{}_{frame_index:04}", view.as_str())
    }
}

/// A slice record paired with the HU section it was cut from.
#[derive(Debug, Clone)]
pub struct SlicedSection {
    pub record: SliceRecord,
    pub pixels: HuSlice,
}

/// Cuts the volume into every transverse, coronal and sagittal section.
///
/// Records are emitted with `split = train` and `image_ref =
/// images/<slice_id>.png`; callers assign the patient's split afterwards.
pub fn slice_volume(volume: &Volume3D) -> Vec<SlicedSection> {
    let mut out = Vec::new();
    for view in View::ALL {
        for index in 0..volume.axis_len(view) {
            let slice_id = SliceRecord::canonical_id(&volume.patient_id, view, index);
            out.push(SlicedSection {
                record: SliceRecord {
                    image_ref: format!("images/{slice_id}.png"),
                    slice_id,
                    patient_id: volume.patient_id.clone(),
                    class_label: volume.class_label,
                    view,
                    frame_index: index,
                    split: Split::Train,
                },
                pixels: volume.section(view, index),
            });
        }
    }
    out
}

/// Greedy left-to-right thinning: keeps a frame when it is at least
/// `min_gap` past the last kept frame.
pub fn select_key_slices(frame_indices: &[usize], min_gap: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &idx in frame_indices {
        match kept.last() {
            Some(&last) if idx < last + min_gap => {}
            _ => kept.push(idx),
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientSplit {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl PatientSplit {
    pub fn split_of(&self, patient_id: &str) -> Option<Split> {
        if self.train.contains(patient_id) {
            Some(Split::Train)
        } else if self.test.contains(patient_id) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

fn test_count(n: usize, test_fraction: f64) -> usize {
    ((test_fraction * n as f64).round() as usize).clamp(1, n - 1)
}

fn validate_split_args(n: usize, test_fraction: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::SplitInfeasible(n));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    Ok(())
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::InvalidConfig(format!("duplicate patient id {id}")));
        }
    }
    Ok(())
}

/// Seeded patient-level split with `round(test_fraction * n)` test patients.
pub fn split_patients(patient_ids: &[String], test_fraction: f64, seed: u64) -> Result<PatientSplit> {
    validate_split_args(patient_ids.len(), test_fraction)?;
    check_unique(patient_ids.iter().map(String::as_str))?;
    let mut ids: Vec<&String> = patient_ids.iter().collect();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = test_count(ids.len(), test_fraction);
    Ok(PatientSplit {
        test: ids[..n_test].iter().map(|s| s.to_string()).collect(),
        train: ids[n_test..].iter().map(|s| s.to_string()).collect(),
    })
}

/// Like [`split_patients`] but keeps the BHD / non-BHD ratio of the test set
/// close to the population ratio. The total test count is unchanged; it is
/// apportioned between the two strata by largest remainder.
pub fn split_patients_stratified(
    patients: &[(String, ClassLabel)],
    test_fraction: f64,
    seed: u64,
) -> Result<PatientSplit> {
    validate_split_args(patients.len(), test_fraction)?;
    check_unique(patients.iter().map(|(id, _)| id.as_str()))?;
    let n_test = test_count(patients.len(), test_fraction);

    let mut strata: [Vec<&String>; 2] = [Vec::new(), Vec::new()];
    for (id, label) in patients {
        strata[usize::from(!label.is_bhd())].push(id);
    }
    let total = patients.len() as f64;
    let quotas: Vec<f64> = strata
        .iter()
        .map(|s| n_test as f64 * s.len() as f64 / total)
        .collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut remaining = n_test - alloc.iter().sum::<usize>();
    // Largest remainder first; BHD stratum wins exact ties.
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &s in order.iter().cycle().take(4) {
        if remaining == 0 {
            break;
        }
        if alloc[s] < strata[s].len() {
            alloc[s] += 1;
            remaining -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = PatientSplit {
        train: BTreeSet::new(),
        test: BTreeSet::new(),
    };
    for (stratum, take) in strata.iter_mut().zip(alloc) {
        stratum.sort();
        stratum.shuffle(&mut rng);
        split.test.extend(stratum[..take].iter().map(|s| s.to_string()));
        split.train.extend(stratum[take..].iter().map(|s| s.to_string()));
    }
    Ok(split)
}

/// Errors if any patient has slices in both splits.
pub fn check_patient_splits<'a>(records: impl IntoIterator<Item = &'a SliceRecord>) -> Result<()> {
    let mut seen: HashMap<&str, Split> = HashMap::new();
    for r in records {
        match seen.insert(&r.patient_id, r.split) {
            Some(prev) if prev != r.split => {
                return Err(Error::LeakageError(format!(
                    "patient {} appears in both train and test",
                    r.patient_id
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    #[serde(flatten)]
    pub slice: SliceRecord,
    pub description: String,
    pub provenance: Provenance,
}

impl CorpusEntry {
    pub fn undescribed(slice: SliceRecord) -> Self {
        Self {
            slice,
            description: String::new(),
            provenance: Provenance::Generated,
        }
    }

    pub fn slice_id(&self) -> &str {
        &self.slice.slice_id
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertItem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub text: String,
}

/// Expert-curated distinguishing features injected into every prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertKnowledge {
    pub items: Vec<ExpertItem>,
}

impl ExpertKnowledge {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::InvalidConfig("expert knowledge has no items".into()));
        }
        if let Some(pos) = self.items.iter().position(|i| i.text.trim().is_empty()) {
            return Err(Error::InvalidConfig(format!("expert item {pos} has empty text")));
        }
        Ok(())
    }

    pub fn image_count(&self) -> usize {
        self.items.iter().filter(|i| i.image_ref.is_some()).count()
    }

    /// Loads either `{"items": [...]}` or a bare JSON array of items.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: Self = match serde_json::from_str::<Vec<ExpertItem>>(&text) {
            Ok(items) => Self { items },
            Err(_) => serde_json::from_str(&text)
                .map_err(|e| Error::format(path, format!("bad expert knowledge file: {e}")))?,
        };
        parsed.validate()?;
        Ok(parsed)
    }
}

/// Substitutes `{slice_id}`, `{view}` and `{frame_index}` in a prompt template.
pub fn render_description_prompt(template: &str, slice: &SliceRecord) -> String {
    template
        .replace("{slice_id}", &slice.slice_id)
        .replace("{view}", slice.view.as_str())
        .replace("{frame_index}", &slice.frame_index.to_string())
}

pub const DEFAULT_DESCRIPTION_TEMPLATE: &str = "You are a thoracic radiologist. Describe the imaging \
manifestations visible in this {view} chest CT slice: cyst number, size, shape, wall thickness, \
and distribution (upper/lower zones, subpleural, perivascular). Use precise radiological terms \
and do not state a diagnosis.";

/// Asks the backend for an initial description of one slice.
pub fn draft_description(
    slice: &SliceRecord,
    image_root: &Path,
    backend: &dyn DescriptionBackend,
    template: &str,
) -> Result<CorpusEntry> {
    let image = image_root.join(&slice.image_ref);
    let prompt = render_description_prompt(template, slice);
    let text = backend
        .describe(slice, &image, &prompt)
        .map_err(|e| Error::GenerationFailed(format!("{}: {e}", slice.slice_id)))?;
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::EmptyDescription(slice.slice_id.clone()));
    }
    Ok(CorpusEntry {
        slice: slice.clone(),
        description: text.to_string(),
        provenance: Provenance::Generated,
    })
}

/// Drafts descriptions for a batch, preserving input order.
pub fn draft_descriptions(
    slices: &[SliceRecord],
    image_root: &Path,
    backend: &dyn DescriptionBackend,
    template: &str,
) -> Result<Vec<CorpusEntry>> {
    slices
        .iter()
        .map(|s| draft_description(s, image_root, backend, template))
        .collect()
}

/// Applies expert edits atomically: either every key matches or nothing changes.
pub fn apply_refinements(
    manifest: &[CorpusEntry],
    edits: &BTreeMap<String, String>,
) -> Result<Vec<CorpusEntry>> {
    let known: HashSet<&str> = manifest.iter().map(CorpusEntry::slice_id).collect();
    for (id, text) in edits {
        if !known.contains(id.as_str()) {
            return Err(Error::UnknownSlice(id.clone()));
        }
        if text.trim().is_empty() {
            return Err(Error::EmptyDescription(id.clone()));
        }
    }
    Ok(manifest
        .iter()
        .map(|entry| match edits.get(entry.slice_id()) {
            Some(text) => CorpusEntry {
                slice: entry.slice.clone(),
                description: text.clone(),
                provenance: Provenance::ExpertRefined,
            },
            None => entry.clone(),
        })
        .collect())
}

pub fn save_manifest(path: &Path, entries: &[CorpusEntry]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for entry in entries {
        serde_json::to_writer(&mut w, entry)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a JSONL manifest. Blank lines are skipped; line numbers in errors are 1-based.
pub fn load_manifest(path: &Path) -> Result<Vec<CorpusEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CorpusEntry = serde_json::from_str(&line).map_err(|e| Error::ManifestParseError {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !ids.insert(entry.slice.slice_id.clone()) {
            return Err(Error::DuplicateSlice(entry.slice.slice_id));
        }
        entries.push(entry);
    }
    check_patient_splits(entries.iter().map(|e| &e.slice))?;
    Ok(entries)
}

/// Entries eligible for the retrieval corpus: train split with a description.
pub fn retrieval_corpus(entries: &[CorpusEntry]) -> Vec<CorpusEntry> {
    entries
        .iter()
        .filter(|e| e.slice.split == Split::Train && !e.description.trim().is_empty())
        .cloned()
        .collect()
}

/// Frames to retain per (patient, view), read from `patient_id,view,frame_index` lines.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeepList {
    frames: BTreeMap<(String, View), BTreeSet<usize>>,
}

impl KeepList {
    pub fn insert(&mut self, patient_id: &str, view: View, frame_index: usize) {
        self.frames
            .entry((patient_id.to_string(), view))
            .or_default()
            .insert(frame_index);
    }

    pub fn frames(&self, patient_id: &str, view: View) -> Vec<usize> {
        self.frames
            .get(&(patient_id.to_string(), view))
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut list = KeepList::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::KeepListParseError {
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            }
            let view = View::parse(fields[1]).ok_or_else(|| err(format!("unknown view {:?}", fields[1])))?;
            let frame = fields[2]
                .parse::<usize>()
                .map_err(|e| err(format!("bad frame index {:?}: {e}", fields[2])))?;
            list.insert(fields[0], view, frame);
        }
        Ok(list)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone)]
pub struct CorpusBuildOptions {
    pub test_fraction: f64,
    pub seed: u64,
    pub min_gap: usize,
    pub stratify: bool,
}

impl Default for CorpusBuildOptions {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            seed: 0,
            min_gap: 2,
            stratify: true,
        }
    }
}

/// Slices every volume, keeps the listed (or all) frames thinned to key
/// slices, assigns patient splits and writes section PNGs under
/// `out_dir/images`. Returns undescribed entries in volume order.
pub fn build_corpus(
    volumes: &[Volume3D],
    keep: Option<&KeepList>,
    opts: &CorpusBuildOptions,
    out_dir: &Path,
) -> Result<Vec<CorpusEntry>> {
    let patients: Vec<(String, ClassLabel)> = volumes
        .iter()
        .map(|v| (v.patient_id.clone(), v.class_label))
        .collect();
    let split = if opts.stratify {
        split_patients_stratified(&patients, opts.test_fraction, opts.seed)?
    } else {
        let ids: Vec<String> = patients.into_iter().map(|(id, _)| id).collect();
        split_patients(&ids, opts.test_fraction, opts.seed)?
    };

    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let mut entries = Vec::new();
    for volume in volumes {
        let patient_split = split
            .split_of(&volume.patient_id)
            .expect("every volume patient was split");
        for view in View::ALL {
            let candidates: Vec<usize> = match keep {
                Some(list) => list
                    .frames(&volume.patient_id, view)
                    .into_iter()
                    .filter(|&f| f < volume.axis_len(view))
                    .collect(),
                None => (0..volume.axis_len(view)).collect(),
            };
            for frame in select_key_slices(&candidates, opts.min_gap) {
                let slice_id = SliceRecord::canonical_id(&volume.patient_id, view, frame);
                let record = SliceRecord {
                    image_ref: format!("images/{slice_id}.png"),
                    slice_id,
                    patient_id: volume.patient_id.clone(),
                    class_label: volume.class_label,
                    view,
                    frame_index: frame,
                    split: patient_split,
                };
                write_hu_png(&out_dir.join(&record.image_ref), &volume.section(view, frame))?;
                entries.push(CorpusEntry::undescribed(record));
            }
        }
    }
    Ok(entries)
}

/// Resolves `image_ref`s relative to a root directory.
pub fn resolve_image(root: &Path, image_ref: &str) -> PathBuf {
    root.join(image_ref)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn volume(d: usize, h: usize, w: usize, seed: u64) -> Volume3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let voxels = (0..d * h * w).map(|_| rng.random_range(-1024i16..=400)).collect();
        Volume3D::new([d, h, w], voxels, [1.0, 0.7, 0.7], "P001", ClassLabel::Bhd).unwrap()
    }

    fn record(id: &str, patient: &str, split: Split) -> SliceRecord {
        SliceRecord {
            slice_id: id.into(),
            patient_id: patient.into(),
            class_label: ClassLabel::Lam,
            view: View::Coronal,
            frame_index: 3,
            image_ref: format!("images/{id}.png"),
            split,
        }
    }

    fn entry(id: &str) -> CorpusEntry {
        CorpusEntry {
            slice: record(id, "P1", Split::Train),
            description: format!("desc {id}"),
            provenance: Provenance::Generated,
        }
    }

    #[test]
    fn slice_counts_follow_axis_lengths() {
        let v = volume(4, 5, 6, 1);
        let secs = slice_volume(&v);
        assert_eq!(secs.len(), 15);
        let count = |view| secs.iter().filter(|s| s.record.view == view).count();
        assert_eq!(count(View::Transverse), 4);
        assert_eq!(count(View::Coronal), 5);
        assert_eq!(count(View::Sagittal), 6);
        for s in &secs {
            assert_eq!(s.record.slice_id, SliceRecord::canonical_id("P001", s.record.view, s.record.frame_index));
        }
    }

    #[test]
    fn single_voxel_volume_gives_three_slices() {
        let v = Volume3D::new([1, 1, 1], vec![-321], [1.0; 3], "P", ClassLabel::Lip).unwrap();
        let secs = slice_volume(&v);
        assert_eq!(secs.len(), 3);
        assert!(secs.iter().all(|s| s.pixels.pixels == vec![-321]));
    }

    #[test]
    fn sections_match_direct_indexing() {
        let v = volume(8, 8, 8, 42);
        let flat = v.voxels();
        let at = |z: usize, y: usize, x: usize| flat[z * 64 + y * 8 + x];
        let t = v.section(View::Transverse, 3);
        let c = v.section(View::Coronal, 5);
        let s = v.section(View::Sagittal, 2);
        for a in 0..8 {
            for b in 0..8 {
                assert_eq!(t.get(a, b), at(3, a, b));
                assert_eq!(c.get(a, b), at(a, 5, b));
                assert_eq!(s.get(a, b), at(a, b, 2));
            }
        }
    }

    #[test]
    fn empty_or_malformed_volume_rejected() {
        assert!(matches!(
            Volume3D::new([0, 2, 2], vec![], [1.0; 3], "P", ClassLabel::Bhd),
            Err(Error::InvalidVolume(_))
        ));
        assert!(matches!(
            Volume3D::new([1, 2, 2], vec![0; 4], [1.0, 0.0, 1.0], "P", ClassLabel::Bhd),
            Err(Error::InvalidVolume(_))
        ));
        assert!(matches!(
            Volume3D::new([1, 2, 2], vec![0; 3], [1.0; 3], "P", ClassLabel::Bhd),
            Err(Error::InvalidVolume(_))
        ));
    }

    #[test]
    fn key_slice_examples() {
        assert_eq!(select_key_slices(&[10, 11, 12, 15], 2), vec![10, 12, 15]);
        assert_eq!(select_key_slices(&[7], 2), vec![7]);
        assert_eq!(select_key_slices(&[0, 1, 2, 3, 4, 5], 3), vec![0, 3]);
        assert!(select_key_slices(&[], 2).is_empty());
    }

    #[test]
    fn split_97_patients() {
        let ids: Vec<String> = (0..97).map(|i| format!("P{i:03}")).collect();
        let s = split_patients(&ids, 0.2, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (78, 19));

        // 50 BHD / 47 non-BHD, as in the clinical cohort.
        let labelled: Vec<(String, ClassLabel)> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), if i < 50 { ClassLabel::Bhd } else { ClassLabel::ALL[1 + i % 3] }))
            .collect();
        let s = split_patients_stratified(&labelled, 0.2, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (78, 19));
        let bhd_test = s.test.iter().filter(|id| id.as_str() < "P050").count();
        assert_eq!(bhd_test, 10);
    }

    #[test]
    fn split_ten_patients_disjoint_and_exhaustive() {
        let ids: Vec<String> = (0..10).map(|i| format!("id{i}")).collect();
        for seed in 0..20 {
            let s = split_patients(&ids, 0.2, seed).unwrap();
            assert_eq!((s.train.len(), s.test.len()), (8, 2));
            assert!(s.train.is_disjoint(&s.test));
            let all: BTreeSet<String> = s.train.union(&s.test).cloned().collect();
            assert_eq!(all, ids.iter().cloned().collect());
        }
    }

    #[test]
    fn split_is_deterministic_and_rejects_tiny_inputs() {
        let ids: Vec<String> = (0..20).map(|i| format!("x{i}")).collect();
        assert_eq!(split_patients(&ids, 0.2, 9).unwrap(), split_patients(&ids, 0.2, 9).unwrap());
        assert!(matches!(
            split_patients(&ids[..1], 0.2, 0),
            Err(Error::SplitInfeasible(1))
        ));
        assert!(matches!(split_patients(&ids, 1.0, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn leakage_check_flags_mixed_patient() {
        let ok = [record("a", "P1", Split::Train), record("b", "P1", Split::Train), record("c", "P2", Split::Test)];
        assert!(check_patient_splits(ok.iter()).is_ok());
        let bad = [record("a", "P1", Split::Train), record("b", "P1", Split::Test)];
        assert!(matches!(check_patient_splits(bad.iter()), Err(Error::LeakageError(_))));
    }

    #[test]
    fn refinement_flips_only_edited_entry() {
        let m = vec![entry("a"), entry("b"), entry("c")];
        let edits = BTreeMap::from([("b".to_string(), "thin-walled cysts, subpleural".to_string())]);
        let out = apply_refinements(&m, &edits).unwrap();
        let refined: Vec<&str> = out
            .iter()
            .filter(|e| e.provenance == Provenance::ExpertRefined)
            .map(|e| e.slice_id())
            .collect();
        assert_eq!(refined, vec!["b"]);
        assert_eq!(out[1].description, "thin-walled cysts, subpleural");
        assert_eq!(out[0], m[0]);
        assert_eq!(out[2], m[2]);

        assert_eq!(apply_refinements(&m, &BTreeMap::new()).unwrap(), m);

        let bad = BTreeMap::from([("b".to_string(), "x".to_string()), ("zzz".to_string(), "y".to_string())]);
        assert!(matches!(apply_refinements(&m, &bad), Err(Error::UnknownSlice(id)) if id == "zzz"));
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut entries: Vec<CorpusEntry> = ["a", "b", "c", "d", "e"].iter().map(|id| entry(id)).collect();
        entries[2].provenance = Provenance::ExpertRefined;
        save_manifest(&path, &entries).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), entries);

        let text = fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        for key in ["slice_id", "patient_id", "class_label", "view", "frame_index", "image_ref", "split", "description", "provenance"] {
            assert!(first.contains(&format!("\"{key}\":")), "missing {key}");
        }

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let half = lines[2].len() / 2;
        lines[2].truncate(half);
        fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::ManifestParseError { line: 3, .. })));

        fs::write(&path, "").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn png_round_trip_preserves_hu() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.png");
        let slice = HuSlice::new(2, 3, vec![-1024, -600, 0, 150, 3000, -1]);
        write_hu_png(&path, &slice).unwrap();
        assert_eq!(read_hu_png(&path).unwrap(), slice);
    }

    #[test]
    fn volume_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("P001.json");
        let v = volume(3, 4, 5, 7);
        write_volume(&v, &path).unwrap();
        assert_eq!(read_volume(&path).unwrap(), v);
    }

    #[test]
    fn keep_list_parsing() {
        let list = KeepList::parse("# header\nP1, transverse, 4\nP1,transverse,2\nP2,coronal,0 # note\n").unwrap();
        assert_eq!(list.frames("P1", View::Transverse), vec![2, 4]);
        assert_eq!(list.frames("P2", View::Coronal), vec![0]);
        assert!(list.frames("P2", View::Sagittal).is_empty());
        assert!(matches!(
            KeepList::parse("P1,oblique,3"),
            Err(Error::KeepListParseError { line: 1, .. })
        ));
    }

    #[test]
    fn build_corpus_respects_keep_list_and_gap() {
        let dir = tempfile::tempdir().unwrap();
        let vols: Vec<Volume3D> = (0..5)
            .map(|i| {
                let mut v = volume(6, 6, 6, i);
                v.patient_id = format!("P{i}");
                v.class_label = if i % 2 == 0 { ClassLabel::Bhd } else { ClassLabel::Plch };
                v
            })
            .collect();
        let mut keep = KeepList::default();
        for f in [1, 2, 3, 5] {
            keep.insert("P0", View::Transverse, f);
        }
        keep.insert("P1", View::Sagittal, 9); // out of range, dropped
        let entries = build_corpus(&vols, Some(&keep), &CorpusBuildOptions::default(), dir.path()).unwrap();
        let frames: Vec<usize> = entries.iter().map(|e| e.slice.frame_index).collect();
        assert_eq!(frames, vec![1, 3, 5]);
        assert!(dir.path().join(&entries[0].slice.image_ref).is_file());

        let all = build_corpus(&vols, None, &CorpusBuildOptions::default(), dir.path()).unwrap();
        // 6 frames per axis thinned with gap 2 -> 3 per view, 9 per patient.
        assert_eq!(all.len(), 45);
        check_patient_splits(all.iter().map(|e| &e.slice)).unwrap();
        assert_eq!(all.iter().filter(|e| e.slice.split == Split::Test).count(), 9);
    }
}
