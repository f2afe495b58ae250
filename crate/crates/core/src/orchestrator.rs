//! End-to-end diagnosis: embed the query, select evidence, attach expert
//! knowledge, assemble the prompt and call the generator.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{CorpusEntry, ExpertKnowledge, SliceRecord, View};
use crate::error::{Error, Result};
use crate::featurizer::FeatureVector;
use crate::generator::{DiagnosisResponse, Generator};
use crate::retriever::{CosineIndex, EmbeddingHead, Hit};

pub const DEFAULT_INSTRUCTION: &str = "You are an expert thoracic radiologist specialising in \
diffuse cystic lung diseases (DCLDs): Birt-Hogg-Dube syndrome (BHD), lymphangioleiomyomatosis \
(LAM), pulmonary Langerhans cell histiocytosis (PLCH) and lymphocytic interstitial pneumonia \
(LIP). You are given expert knowledge on distinguishing features, reference CT slices with \
expert-reviewed descriptions and confirmed diagnoses, and finally a query CT slice. Compare the \
query with the references: describe its cysts (number, size, shape, wall, distribution) and \
state which references it most resembles and why. Finish with exactly one line of the form \
'DIAGNOSIS: BHD' or 'DIAGNOSIS: NON-BHD'.";

/// What stands in for retrieval when the retriever is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovedRetriever {
    /// `k` corpus entries drawn uniformly at random, seeded per query.
    #[default]
    RandomK,
    /// No evidence at all.
    NoEvidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k: usize,
    pub use_retriever: bool,
    pub use_typical_features: bool,
    pub same_view_only: bool,
    pub removed_retriever: RemovedRetriever,
    pub seed: u64,
    /// Upper bound on concurrent generator calls.
    pub parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 12,
            use_retriever: true,
            use_typical_features: true,
            same_view_only: false,
            removed_retriever: RemovedRetriever::RandomK,
            seed: 0,
            parallelism: 4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::InvalidConfig("parallelism must be at least 1".into()));
        }
        Ok(())
    }

    /// Short description of how evidence was selected, for reports.
    pub fn retrieval_mode(&self) -> &'static str {
        match (self.use_retriever, self.removed_retriever) {
            (true, _) => "topk",
            (false, RemovedRetriever::RandomK) => "random_k",
            (false, RemovedRetriever::NoEvidence) => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceItem {
    pub entry: CorpusEntry,
    pub similarity: f64,
    pub image_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPart {
    pub text: String,
    pub image_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryImage {
    pub slice_id: String,
    pub view: View,
    pub image_path: PathBuf,
}

/// Everything the generator sees for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub instruction: String,
    pub expert: Vec<ExpertPart>,
    pub evidence: Vec<EvidenceItem>,
    pub query: QueryImage,
    pub k: usize,
}

impl PromptBundle {
    pub fn evidence_ids(&self) -> Vec<String> {
        self.evidence.iter().map(|e| e.entry.slice_id().to_string()).collect()
    }

    /// Images sent to a vision backend: query, evidence and expert images.
    pub fn image_count(&self) -> usize {
        1 + self.evidence.len() + self.expert.iter().filter(|e| e.image_path.is_some()).count()
    }

    /// Audit-log form: instruction, expert, evidence, query.
    pub fn to_audit_json(&self) -> serde_json::Value {
        json!({
            "instruction": self.instruction,
            "expert": self.expert.iter().map(|e| json!({
                "text": e.text,
                "image": e.image_path.as_ref().map(|p| p.display().to_string()),
            })).collect::<Vec<_>>(),
            "evidence": self.evidence.iter().map(|e| json!({
                "slice_id": e.entry.slice_id(),
                "class_label": e.entry.slice.class_label,
                "description": e.entry.description,
                "similarity": e.similarity,
            })).collect::<Vec<_>>(),
            "query": {"slice_id": self.query.slice_id},
        })
    }

    pub fn serialize(&self) -> String {
        serde_json::to_string_pretty(&self.to_audit_json()).expect("audit json is serializable")
    }
}

fn existing(path: PathBuf, slice_id: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingImage {
            slice_id: slice_id.to_string(),
            path,
        })
    }
}

/// Assembles a bundle; every referenced image must exist under `image_root`.
///
/// `retrieved` is kept in the given order and truncated to `k`.
pub fn assemble_prompt(
    query: &QueryImage,
    retrieved: &[(CorpusEntry, f64)],
    expert: &ExpertKnowledge,
    instruction: &str,
    k: usize,
    image_root: &Path,
) -> Result<PromptBundle> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let query = QueryImage {
        image_path: existing(query.image_path.clone(), &query.slice_id)?,
        ..query.clone()
    };
    let expert = expert
        .items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let image_path = match &item.image_ref {
                Some(r) => Some(existing(image_root.join(r), &format!("expert[{i}]"))?),
                None => None,
            };
            Ok(ExpertPart {
                text: item.text.clone(),
                image_path,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let evidence = retrieved
        .iter()
        .take(k)
        .map(|(entry, similarity)| {
            Ok(EvidenceItem {
                image_path: existing(image_root.join(&entry.slice.image_ref), entry.slice_id())?,
                entry: entry.clone(),
                similarity: *similarity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptBundle {
        instruction: instruction.to_string(),
        expert,
        evidence,
        query,
        k,
    })
}

/// FNV-1a, used to derive per-query seeds from slice ids.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Indices of the random evidence used when the retriever is disabled.
///
/// Depends only on the seed, the query id and the candidate list.
pub fn random_evidence(candidates: &[usize], k: usize, seed: u64, query_id: &str) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(query_id));
    rand::seq::index::sample(&mut rng, candidates.len(), k.min(candidates.len()))
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

/// The result of one diagnosis together with the prompt that produced it.
#[derive(Debug, Clone)]
pub struct Diagnosis {
    pub bundle: PromptBundle,
    pub response: DiagnosisResponse,
}

/// Read-only state shared by every query.
pub struct Pipeline<'a> {
    index: &'a CosineIndex,
    head: &'a EmbeddingHead,
    corpus: Vec<&'a CorpusEntry>,
    corpus_patients: HashSet<&'a str>,
    expert: ExpertKnowledge,
    instruction: String,
    image_root: PathBuf,
    generator: &'a dyn Generator,
}

impl<'a> Pipeline<'a> {
    /// `manifest` must contain every indexed slice; rows are matched by id.
    pub fn new(
        index: &'a CosineIndex,
        head: &'a EmbeddingHead,
        manifest: &'a [CorpusEntry],
        image_root: impl Into<PathBuf>,
        generator: &'a dyn Generator,
    ) -> Result<Self> {
        if index.embed_dim() != head.embed_dim() {
            return Err(Error::FeatureDimMismatch {
                expected: index.embed_dim(),
                found: head.embed_dim(),
            });
        }
        let by_id: HashMap<&str, &CorpusEntry> = manifest.iter().map(|e| (e.slice_id(), e)).collect();
        let corpus = index
            .ids()
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::InvalidConfig(format!("indexed slice {id} missing from manifest")))
            })
            .collect::<Result<Vec<_>>>()?;
        let corpus_patients = corpus.iter().map(|e| e.slice.patient_id.as_str()).collect();
        Ok(Self {
            index,
            head,
            corpus,
            corpus_patients,
            expert: ExpertKnowledge::empty(),
            instruction: DEFAULT_INSTRUCTION.to_string(),
            image_root: image_root.into(),
            generator,
        })
    }

    pub fn with_expert(mut self, expert: ExpertKnowledge) -> Self {
        self.expert = expert;
        self
    }

    pub fn with_instruction(mut self, instruction: impl Into<String>) -> Self {
        self.instruction = instruction.into();
        self
    }

    pub fn corpus(&self) -> &[&'a CorpusEntry] {
        &self.corpus
    }

    pub fn image_root(&self) -> &Path {
        &self.image_root
    }

    pub fn generator_name(&self) -> &str {
        self.generator.name()
    }

    pub fn is_in_corpus(&self, record: &SliceRecord) -> bool {
        self.index.position(&record.slice_id).is_some() || self.corpus_patients.contains(record.patient_id.as_str())
    }

    /// Diagnoses a held-out slice from the manifest.
    pub fn diagnose(&self, query: &SliceRecord, features: &FeatureVector, config: &PipelineConfig) -> Result<Diagnosis> {
        if self.is_in_corpus(query) {
            return Err(Error::QueryInCorpus(query.slice_id.clone()));
        }
        let image = QueryImage {
            slice_id: query.slice_id.clone(),
            view: query.view,
            image_path: self.image_root.join(&query.image_ref),
        };
        self.diagnose_image(&image, features, config)
    }

    /// Diagnoses an arbitrary image given its features.
    pub fn diagnose_image(&self, query: &QueryImage, features: &FeatureVector, config: &PipelineConfig) -> Result<Diagnosis> {
        config.validate()?;
        let embedding = self.head.embed(features).map_err(|e| e.in_stage("embed"))?;
        let view_ok = |i: usize| !config.same_view_only || self.corpus[i].slice.view == query.view;

        let selected: Vec<(CorpusEntry, f64)> = if config.use_retriever {
            self.index
                .search_topk_filtered(&embedding, config.k, view_ok)
                .map_err(|e| e.in_stage("retrieve"))?
                .into_iter()
                .map(|Hit { slice_id, similarity }| {
                    let i = self.index.position(&slice_id).expect("hit ids come from the index");
                    (self.corpus[i].clone(), similarity)
                })
                .collect()
        } else {
            match config.removed_retriever {
                RemovedRetriever::NoEvidence => Vec::new(),
                RemovedRetriever::RandomK => {
                    let candidates: Vec<usize> = (0..self.corpus.len()).filter(|&i| view_ok(i)).collect();
                    random_evidence(&candidates, config.k, config.seed, &query.slice_id)
                        .into_iter()
                        .map(|i| (self.corpus[i].clone(), self.index.similarity(i, embedding.values())))
                        .collect()
                }
            }
        };

        let empty = ExpertKnowledge::empty();
        let expert = if config.use_typical_features {
            self.expert.validate().map_err(|e| e.in_stage("assemble"))?;
            &self.expert
        } else {
            &empty
        };
        let bundle = assemble_prompt(query, &selected, expert, &self.instruction, config.k, &self.image_root)
            .map_err(|e| e.in_stage("assemble"))?;
        let response = self.generator.generate(&bundle).map_err(|e| e.in_stage("generate"))?;
        Ok(Diagnosis { bundle, response })
    }
}
