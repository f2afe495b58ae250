mod common;

use std::collections::BTreeMap;

use bhd_rag::corpus::{ClassLabel, SliceRecord, View};
use bhd_rag::eval::{ablation_grid, evaluate, k_sweep, CaseUnit, EvalOptions, Evaluation};
use bhd_rag::featurizer::{FeatureSource, FeatureVector};
use bhd_rag::generator::{DiagnosisLabel, DiagnosisResponse, Generator, MockGenerator};
use bhd_rag::orchestrator::{random_evidence, Pipeline, PipelineConfig, PromptBundle, QueryImage, RemovedRetriever};
use bhd_rag::retriever::EmbeddingHead;
use bhd_rag::synthetic::{expert_knowledge, SyntheticSpec};
use bhd_rag::Error;
use common::{fixture, small_spec, Fixture};

fn pipeline<'a>(fx: &'a Fixture, generator: &'a dyn Generator) -> Pipeline<'a> {
    Pipeline::new(&fx.index, &fx.head, &fx.data.manifest, &fx.data.image_root, generator)
        .unwrap()
        .with_expert(expert_knowledge())
}

fn slice_opts() -> EvalOptions {
    EvalOptions {
        case_unit: CaseUnit::Slice,
        prompt_dir: None,
    }
}

fn full_fixture() -> Fixture {
    fixture(SyntheticSpec::default(), 500)
}

/// Replies without any diagnosis line.
struct Mute;

impl Generator for Mute {
    fn generate(&self, bundle: &PromptBundle) -> bhd_rag::Result<DiagnosisResponse> {
        Ok(DiagnosisResponse {
            label: None,
            description: "unsure".into(),
            raw_output: "unsure".into(),
            evidence_ids: bundle.evidence_ids(),
        })
    }

    fn name(&self) -> &str {
        "mute"
    }
}

fn oracle_embed(head: &EmbeddingHead, f: &[f32]) -> Vec<f64> {
    let (e, d) = (head.embed_dim(), head.feature_dim());
    let mut y: Vec<f64> = (0..e)
        .map(|r| head.bias()[r] + (0..d).map(|c| head.weight()[r * d + c] * f[c] as f64).sum::<f64>())
        .collect();
    let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    y.iter_mut().for_each(|v| *v /= n);
    y
}

/// Majority label of the k nearest corpus items by brute force.
fn knn_oracle(fx: &Fixture, query: &SliceRecord, k: usize) -> DiagnosisLabel {
    let q = oracle_embed(&fx.head, &fx.data.features.get(&query.slice_id).unwrap().values);
    let mut scored: Vec<(f64, String, bool)> = fx
        .data
        .corpus()
        .iter()
        .map(|e| {
            let v = oracle_embed(&fx.head, &fx.data.features.get(e.slice_id()).unwrap().values);
            let v32: Vec<f64> = v.iter().map(|&x| x as f32 as f64).collect();
            let sim = q.iter().zip(&v32).map(|(a, b)| a * b).sum::<f64>();
            (sim, e.slice_id().to_string(), e.slice.class_label.is_bhd())
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let bhd = scored[..k].iter().filter(|s| s.2).count();
    DiagnosisLabel::from_bhd(2 * bhd > k)
}

#[test]
fn separable_corpus_matches_knn_oracle() {
    let fx = full_fixture();
    let gen = MockGenerator::new();
    let p = pipeline(&fx, &gen);
    let cfg = PipelineConfig::default();
    let e = evaluate(&p, &fx.data.queries(), &fx.data.features, &cfg, &slice_opts()).unwrap();
    assert_eq!(e.cases.len(), 40);
    assert!(e.report.accuracy >= 0.95, "accuracy {}", e.report.accuracy);
    let by_id: BTreeMap<&str, &SliceRecord> = fx.data.manifest.iter().map(|m| (m.slice_id(), &m.slice)).collect();
    for case in &e.cases {
        let want = knn_oracle(&fx, by_id[case.case_id.as_str()], 12);
        assert_eq!(case.predicted, Some(want), "{}", case.case_id);
    }
}

#[test]
fn bhd_cluster_center_is_bhd() {
    let fx = full_fixture();
    let gen = MockGenerator::new();
    let p = pipeline(&fx, &gen);
    let image = fx.data.image_root.join(&fx.data.queries()[0].image_ref);
    for (center, want) in [(2.0f32, DiagnosisLabel::Bhd), (-2.0, DiagnosisLabel::NonBhd)] {
        let mut v = vec![0.0f32; 16];
        v[0] = center;
        let q = QueryImage {
            slice_id: "centroid".into(),
            view: View::Transverse,
            image_path: image.clone(),
        };
        let d = p
            .diagnose_image(&q, &FeatureVector::new(v, FeatureSource::External).unwrap(), &PipelineConfig::default())
            .unwrap();
        assert_eq!(d.response.label, Some(want));
        assert_eq!(d.bundle.evidence.len(), 12);
    }
}

#[test]
fn evidence_follows_similarity_order_and_k() {
    let fx = fixture(small_spec(11), 20);
    let gen = MockGenerator::new();
    let p = pipeline(&fx, &gen);
    let q = &fx.data.queries()[0];
    let f = fx.data.features.get(&q.slice_id).unwrap();
    for k in [1, 2, 5, 40, 100] {
        let d = p.diagnose(q, f, &PipelineConfig { k, ..Default::default() }).unwrap();
        assert_eq!(d.bundle.evidence.len(), k.min(40));
        assert_eq!(d.response.evidence_ids, d.bundle.evidence_ids());
        let sims: Vec<f64> = d.bundle.evidence.iter().map(|e| e.similarity).collect();
        assert!(sims.windows(2).all(|w| w[0] >= w[1]));
        let hits = fx.index.search_topk(&fx.head.embed(f).unwrap(), k).unwrap();
        let ids: Vec<String> = hits.into_iter().map(|h| h.slice_id).collect();
        assert_eq!(d.bundle.evidence_ids(), ids);
    }
}

#[test]
fn random_k_ablation_ignores_query_content() {
    let fx = fixture(small_spec(12), 20);
    let gen = MockGenerator::new();
    let p = pipeline(&fx, &gen);
    let cfg = PipelineConfig {
        use_retriever: false,
        k: 6,
        seed: 99,
        ..Default::default()
    };
    let q = &fx.data.queries()[3];
    let f1 = fx.data.features.get(&q.slice_id).unwrap().clone();
    let f2 = FeatureVector::new(f1.values.iter().map(|v| -3.0 * v + 1.0).collect(), FeatureSource::External).unwrap();
    let a = p.diagnose(q, &f1, &cfg).unwrap();
    let b = p.diagnose(q, &f2, &cfg).unwrap();
    assert_eq!(a.bundle.evidence_ids(), b.bundle.evidence_ids());

    let candidates: Vec<usize> = (0..fx.index.len()).collect();
    let want: Vec<String> = random_evidence(&candidates, 6, 99, &q.slice_id)
        .into_iter()
        .map(|i| fx.index.ids()[i].clone())
        .collect();
    assert_eq!(a.bundle.evidence_ids(), want);
    assert_eq!(a.response.evidence_ids, want);

    let other = p.diagnose(q, &f1, &PipelineConfig { seed: 100, ..cfg.clone() }).unwrap();
    assert_ne!(other.bundle.evidence_ids(), want);
}

#[test]
fn no_evidence_mode_sends_empty_evidence() {
    let fx = fixture(small_spec(13), 5);
    let gen = MockGenerator::new();
    let p = pipeline(&fx, &gen);
    let cfg = PipelineConfig {
        use_retriever: false,
        removed_retriever: RemovedRetriever::NoEvidence,
        ..Default::default()
    };
    let q = &fx.data.queries()[0];
    let err = p.diagnose(q, fx.data.features.get(&q.slice_id).unwrap(), &cfg).unwrap_err();
    assert!(matches!(err.root(), Error::NoEvidence));

    let mute = Mute;
    let p = pipeline(&fx, &mute);
    let d = p.diagnose(q, fx.data.features.get(&q.slice_id).unwrap(), &cfg).unwrap();
    assert!(d.bundle.evidence.is_empty());
}

#[test]
fn typical_features_toggle_only_changes_expert_section() {
    let fx = fixture(small_spec(14), 5);
    let gen = MockGenerator::new();
    let p = pipeline(&fx, &gen);
    let q = &fx.data.queries()[1];
    let f = fx.data.features.get(&q.slice_id).unwrap();
    let on = p.diagnose(q, f, &PipelineConfig::default()).unwrap().bundle;
    let off = p
        .diagnose(q, f, &PipelineConfig { use_typical_features: false, ..Default::default() })
        .unwrap()
        .bundle;
    assert_eq!(on.expert.len(), 3);
    assert!(off.expert.is_empty());
    assert_eq!(PromptBundle { expert: Vec::new(), ..on.clone() }, off);

    let again = p.diagnose(q, f, &PipelineConfig::default()).unwrap().bundle;
    assert_eq!(on.serialize(), again.serialize());
}

#[test]
fn corpus_queries_and_missing_images_rejected() {
    let fx = fixture(small_spec(15), 5);
    let gen = MockGenerator::new();
    let p = pipeline(&fx, &gen);
    let corpus_slice = &fx.data.train_records()[0];
    let f = fx.data.features.get(&corpus_slice.slice_id).unwrap();
    assert!(matches!(
        p.diagnose(corpus_slice, f, &PipelineConfig::default()),
        Err(Error::QueryInCorpus(_))
    ));

    let q = &fx.data.queries()[0];
    let f = fx.data.features.get(&q.slice_id).unwrap();
    std::fs::remove_file(fx.data.image_root.join(&q.image_ref)).unwrap();
    let err = p.diagnose(q, f, &PipelineConfig::default()).unwrap_err();
    match err.root() {
        Error::MissingImage { slice_id, .. } => assert_eq!(slice_id, &q.slice_id),
        other => panic!("expected MissingImage, got {other:?}"),
    }
}

#[test]
fn unparseable_outputs_score_zero() {
    let fx = fixture(small_spec(16), 5);
    let mute = Mute;
    let p = pipeline(&fx, &mute);
    let e = evaluate(&p, &fx.data.queries(), &fx.data.features, &PipelineConfig::default(), &slice_opts()).unwrap();
    assert_eq!(e.report.accuracy, 0.0);
    assert_eq!(e.report.unparseable, 10);
    assert!(e.cases.iter().all(|c| !c.correct && c.predicted.is_none()));
    let c = e.report.counts;
    assert_eq!((c.tp, c.tn), (0, 0));
    assert_eq!(c.fn_ + c.fp, 10);
}

#[test]
fn leakage_rejected() {
    let fx = fixture(small_spec(17), 5);
    let gen = MockGenerator::new();
    let p = pipeline(&fx, &gen);
    let mut tests = fx.data.queries();
    tests.push(fx.data.train_records()[0].clone());
    let r = evaluate(&p, &tests, &fx.data.features, &PipelineConfig::default(), &slice_opts());
    assert!(matches!(r, Err(Error::LeakageError(_))));

    // A test-split slice that shares a patient with the corpus leaks too.
    let mut sneaky = fx.data.queries()[0].clone();
    sneaky.patient_id = fx.data.train_records()[0].patient_id.clone();
    let r = evaluate(&p, &[sneaky], &fx.data.features, &PipelineConfig::default(), &slice_opts());
    assert!(matches!(r, Err(Error::LeakageError(_))));

    assert!(matches!(
        evaluate(&p, &[], &fx.data.features, &PipelineConfig::default(), &slice_opts()),
        Err(Error::EmptyEvaluation)
    ));
}

#[test]
fn evaluation_is_deterministic_across_parallelism() {
    let fx = fixture(small_spec(18), 30);
    let gen = MockGenerator::new();
    let p = pipeline(&fx, &gen);
    let run = |parallelism: usize, use_retriever: bool| -> Evaluation {
        let cfg = PipelineConfig {
            parallelism,
            use_retriever,
            ..Default::default()
        };
        evaluate(&p, &fx.data.queries(), &fx.data.features, &cfg, &slice_opts()).unwrap()
    };
    for use_retriever in [true, false] {
        let a = run(1, use_retriever);
        let b = run(8, use_retriever);
        assert_eq!(a.report, b.report);
        assert_eq!(a.cases, b.cases);
    }
}

#[test]
fn case_units_group_by_patient() {
    let fx = fixture(small_spec(19), 5);
    let gen = MockGenerator::new();
    let p = pipeline(&fx, &gen);
    let tests: Vec<SliceRecord> = fx
        .data
        .queries()
        .into_iter()
        .enumerate()
        .map(|(i, mut s)| {
            s.patient_id = format!("shared-{}", i / 2);
            s.class_label = if (i / 2) % 2 == 0 { ClassLabel::Bhd } else { ClassLabel::Lam };
            s
        })
        .collect();
    let cfg = PipelineConfig::default();
    let run = |unit| {
        evaluate(&p, &tests, &fx.data.features, &cfg, &EvalOptions { case_unit: unit, prompt_dir: None }).unwrap()
    };
    let slices = run(CaseUnit::Slice);
    let key = run(CaseUnit::KeySlicePerPatient);
    let major = run(CaseUnit::PatientMajority);
    assert_eq!(slices.cases.len(), 10);
    assert_eq!(key.cases.len(), 5);
    assert_eq!(major.cases.len(), 5);
    for c in &key.cases {
        assert_eq!(c.slices.len(), 1);
        let first = tests.iter().find(|t| t.patient_id == c.patient_id).unwrap();
        assert_eq!(c.slices[0], first.slice_id);
    }
    for c in &major.cases {
        assert_eq!(c.case_id, c.patient_id);
        assert_eq!(c.slices.len(), 2);
        let votes: Vec<Option<DiagnosisLabel>> = c
            .slices
            .iter()
            .map(|id| slices.cases.iter().find(|s| &s.case_id == id).unwrap().predicted)
            .collect();
        let bhd = votes.iter().filter(|v| **v == Some(DiagnosisLabel::Bhd)).count();
        assert_eq!(c.predicted, Some(DiagnosisLabel::from_bhd(bhd > 2 - bhd)));
    }
}

#[test]
fn prompt_bundles_written_on_request() {
    let fx = fixture(small_spec(20), 5);
    let gen = MockGenerator::new();
    let p = pipeline(&fx, &gen);
    let dir = fx.dir.path().join("prompts");
    let opts = EvalOptions {
        case_unit: CaseUnit::Slice,
        prompt_dir: Some(dir.clone()),
    };
    evaluate(&p, &fx.data.queries(), &fx.data.features, &PipelineConfig::default(), &opts).unwrap();
    for q in fx.data.queries() {
        let text = std::fs::read_to_string(dir.join(format!("{}.json", q.slice_id))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v.is_object());
    }
}

#[test]
fn k_sweep_rows_and_consistency() {
    let fx = full_fixture();
    let gen = MockGenerator::new();
    let p = pipeline(&fx, &gen);
    let cfg = PipelineConfig::default();
    let ks = [1, 2, 4, 8, 12, 16];
    let a = k_sweep(&p, &fx.data.queries(), &fx.data.features, &cfg, &ks, &slice_opts()).unwrap();
    let b = k_sweep(&p, &fx.data.queries(), &fx.data.features, &cfg, &ks, &slice_opts()).unwrap();
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert_eq!(a.iter().map(|(r, _)| r.k).collect::<Vec<_>>(), ks);

    let single = k_sweep(&p, &fx.data.queries(), &fx.data.features, &cfg, &[1], &slice_opts()).unwrap();
    let direct = evaluate(&p, &fx.data.queries(), &fx.data.features, &PipelineConfig { k: 1, ..cfg.clone() }, &slice_opts()).unwrap();
    assert_eq!(single[0].0.metrics, direct.report);
    assert_eq!(single[0].1, direct.cases);

    let acc = |k: usize| a.iter().find(|(r, _)| r.k == k).unwrap().0.metrics.accuracy;
    assert!(acc(12) >= acc(1) - 0.05);
    assert!(k_sweep(&p, &fx.data.queries(), &fx.data.features, &cfg, &[], &slice_opts()).is_err());
}

#[test]
fn ablation_grid_rows_and_consistency() {
    let fx = full_fixture();
    let gen = MockGenerator::new();
    let p = pipeline(&fx, &gen);
    let cfg = PipelineConfig { seed: 5, ..Default::default() };
    let grid = ablation_grid(&p, &fx.data.queries(), &fx.data.features, &cfg, &slice_opts()).unwrap();
    let flags: Vec<(bool, bool)> = grid.iter().map(|(r, _)| (r.use_retriever, r.use_typical_features)).collect();
    assert_eq!(flags, [(false, false), (true, false), (false, true), (true, true)]);
    assert_eq!(grid[0].0.retrieval_mode, "random_k");
    assert_eq!(grid[3].0.retrieval_mode, "topk");

    let both = evaluate(&p, &fx.data.queries(), &fx.data.features, &cfg, &slice_opts()).unwrap();
    assert_eq!(grid[3].0.metrics, both.report);
    assert_eq!(grid[3].1, both.cases);

    let acc = |i: usize| grid[i].0.metrics.accuracy;
    assert!(acc(1) >= acc(0));
    assert!(acc(3) >= acc(2));
}

#[test]
fn retriever_toggle_keeps_expert_section() {
    let fx = fixture(small_spec(21), 5);
    let gen = MockGenerator::new();
    let p = pipeline(&fx, &gen);
    for q in fx.data.queries() {
        let f = fx.data.features.get(&q.slice_id).unwrap();
        let on = p.diagnose(&q, f, &PipelineConfig::default()).unwrap().bundle;
        let off = p
            .diagnose(&q, f, &PipelineConfig { use_retriever: false, ..Default::default() })
            .unwrap()
            .bundle;
        assert_eq!(on.expert, off.expert);
        assert_eq!(on.query, off.query);
        assert_eq!(on.instruction, off.instruction);
        assert_eq!(off.evidence.len(), 12);
    }
}
