//! Two-class Gaussian feature corpora for offline end-to-end runs.
//!
//! Class means sit at `±separation/2 · σ` along the first feature axis, so
//! the gap between means is `separation · σ`. Every item is its own patient.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{
    write_hu_png, ClassLabel, CorpusEntry, ExpertItem, ExpertKnowledge, HuSlice, Provenance, SliceRecord, Split, View,
};
use crate::error::{Error, Result};
use crate::featurizer::{FeatureSet, FeatureSource, FeatureVector};

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub corpus_size: usize,
    pub query_size: usize,
    pub feature_dim: usize,
    /// Distance between the class means in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            corpus_size: 200,
            query_size: 40,
            feature_dim: 16,
            separation: 4.0,
            sigma: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Train entries first, then test entries.
    pub manifest: Vec<CorpusEntry>,
    pub features: FeatureSet,
    pub image_root: PathBuf,
    pub spec: SyntheticSpec,
}

impl SyntheticData {
    pub fn corpus(&self) -> Vec<CorpusEntry> {
        self.manifest
            .iter()
            .filter(|e| e.slice.split == Split::Train)
            .cloned()
            .collect()
    }

    pub fn train_records(&self) -> Vec<SliceRecord> {
        self.corpus().into_iter().map(|e| e.slice).collect()
    }

    pub fn queries(&self) -> Vec<SliceRecord> {
        self.manifest
            .iter()
            .filter(|e| e.slice.split == Split::Test)
            .map(|e| e.slice.clone())
            .collect()
    }
}

/// Alternates BHD and non-BHD; the non-BHD slots cycle LAM, PLCH, LIP.
fn label_for(i: usize) -> ClassLabel {
    if i % 2 == 0 {
        ClassLabel::Bhd
    } else {
        [ClassLabel::Lam, ClassLabel::Plch, ClassLabel::Lip][(i / 2) % 3]
    }
}

/// Generates the corpus and writes a small placeholder image per item under `dir/images`.
pub fn generate(spec: &SyntheticSpec, dir: &Path) -> Result<SyntheticData> {
    if spec.feature_dim == 0 || !(spec.sigma > 0.0) {
        return Err(Error::InvalidConfig("synthetic spec needs feature_dim >= 1 and sigma > 0".into()));
    }
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.sigma).expect("positive sigma");
    let offset = spec.separation * spec.sigma / 2.0;

    let mut manifest = Vec::with_capacity(spec.corpus_size + spec.query_size);
    let mut features = FeatureSet::new();
    let splits = std::iter::repeat_n(Split::Train, spec.corpus_size).chain(std::iter::repeat_n(Split::Test, spec.query_size));
    for (i, split) in splits.enumerate() {
        let label = label_for(i);
        let prefix = if split == Split::Train { "c" } else { "q" };
        let slice_id = format!("syn-{prefix}{i:04}");
        let mut values: Vec<f32> = (0..spec.feature_dim).map(|_| noise.sample(&mut rng) as f32).collect();
        values[0] += if label.is_bhd() { offset } else { -offset } as f32;
        features.insert(slice_id.clone(), FeatureVector::new(values, FeatureSource::External)?)?;

        let image_ref = format!("images/{slice_id}.png");
        let shade = if label.is_bhd() { -900 } else { -700 };
        write_hu_png(&dir.join(&image_ref), &HuSlice::new(4, 4, vec![shade; 16]))?;
        manifest.push(CorpusEntry {
            slice: SliceRecord {
                patient_id: format!("patient-{slice_id}"),
                slice_id,
                class_label: label,
                view: View::ALL[i % 3],
                frame_index: i,
                image_ref,
                split,
            },
            description: format!("Synthetic {label} case."),
            provenance: Provenance::Generated,
        });
    }
    Ok(SyntheticData {
        manifest,
        features,
        image_root: dir.to_path_buf(),
        spec: spec.clone(),
    })
}

/// A short text-only expert knowledge base.
pub fn expert_knowledge() -> ExpertKnowledge {
    ExpertKnowledge {
        items: vec![
            ExpertItem {
                image_ref: None,
                text: "BHD: cysts of variable size, elliptical or flattened, predominantly in the lower lungs and subpleural regions.".into(),
            },
            ExpertItem {
                image_ref: None,
                text: "LAM: round cysts of similar size, diffusely distributed.".into(),
            },
            ExpertItem {
                image_ref: None,
                text: "PLCH: cysts with upper-zone predominance, often with nodules. LIP: variably sized cysts at the bilateral bases following a perivascular pattern.".into(),
            },
        ],
    }
}
