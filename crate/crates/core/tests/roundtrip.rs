use dkge::baselines::{train_baseline, BaselineConfig, ContinuousEmbedding, ModelKind, Norm};
use dkge::bitpack::{read_codes, write_codes};
use dkge::eval::{evaluate, QuantizedScorer};
use dkge::learner::fit;
use dkge::planted::{generate, PlantedConfig};
use dkge::quantize::{quantize_embedding, QuantMethod, QuantizedModel, ScoreMode};
use dkge::{Dataset, EvalConfig, Exec, FilterIndex, ModelParams, Split, TrainConfig, Triple};

fn small() -> dkge::planted::Planted {
    generate(&PlantedConfig {
        entities: 50,
        relations: 25,
        train: 200,
        valid: 20,
        test: 40,
        ..PlantedConfig::default()
    })
    .unwrap()
}

#[test]
fn stored_models_rank_like_in_memory_ones() {
    let p = small();
    let dir = tempfile::tempdir().unwrap();
    p.write_dir(dir.path()).unwrap();
    let dataset = Dataset::read_bundle(&dir.path().join("dataset.dkgd")).unwrap();
    assert_eq!(dataset, p.dataset);

    let filter = FilterIndex::build(&dataset, &Split::ALL);
    let test: Vec<Triple> = dataset.test.iter().copied().collect();
    let cfg = EvalConfig::default();

    let fitted = fit(&dataset, &TrainConfig::with_k(24)).unwrap();
    let prefix = dir.path().join("dk");
    write_codes(&fitted.model.entities, &prefix.with_extension("entities.dkgb")).unwrap();
    write_codes(&fitted.model.relations, &prefix.with_extension("relations.dkgb")).unwrap();
    let back = ModelParams {
        entities: read_codes(&prefix.with_extension("entities.dkgb")).unwrap(),
        relations: read_codes(&prefix.with_extension("relations.dkgb")).unwrap(),
    };
    assert_eq!(back, fitted.model);
    let a = evaluate(&test, &fitted.model, &filter, &cfg, Exec::Sequential).unwrap();
    let b = evaluate(&test, &back, &filter, &cfg, Exec::Parallel).unwrap();
    assert_eq!(a, b);

    let bcfg = BaselineConfig {
        kind: ModelKind::TransE,
        dim: 12,
        epochs: 10,
        norm: Norm::L2,
        ..BaselineConfig::default()
    };
    let emb = train_baseline(&dataset, &bcfg).unwrap();
    let path = dir.path().join("transe.dkgc");
    emb.write(&path).unwrap();
    let mut emb_back = ContinuousEmbedding::read(&path).unwrap();
    emb_back.norm = Norm::L2;
    assert_eq!(
        evaluate(&test, &emb, &filter, &cfg, Exec::Sequential).unwrap().0,
        evaluate(&test, &emb_back, &filter, &cfg, Exec::Sequential).unwrap().0
    );

    for method in [QuantMethod::Sign, QuantMethod::Uniform(4), QuantMethod::Lloyd(8)] {
        let q = quantize_embedding(&emb, method).unwrap();
        let qp = dir.path().join("q");
        q.write(&qp).unwrap();
        let q_back = QuantizedModel::read(&qp).unwrap();
        for mode in [ScoreMode::Binary, ScoreMode::Reconstruct] {
            let x = evaluate(&test, &QuantizedScorer::new(&q, mode), &filter, &cfg, Exec::Sequential).unwrap();
            let y = evaluate(&test, &QuantizedScorer::new(&q_back, mode), &filter, &cfg, Exec::Sequential).unwrap();
            assert_eq!(x, y, "{method:?} {mode:?}");
        }
    }
}

#[test]
fn truth_codes_rank_every_test_triple_first() {
    let p = small();
    let filter = FilterIndex::build(&p.dataset, &Split::ALL);
    let test: Vec<Triple> = p.dataset.test.iter().copied().collect();
    let (report, records) = evaluate(&test, &p.truth, &filter, &EvalConfig::default(), Exec::default()).unwrap();
    assert_eq!(report.mrr, 1.0);
    assert!(records.iter().all(|r| r.rank == 1.0));
}
