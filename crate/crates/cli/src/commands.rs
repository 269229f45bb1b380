use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dkge::baselines::{train_baseline, ContinuousEmbedding};
use dkge::bitpack::{read_codes, write_codes};
use dkge::data::load_dataset;
use dkge::eval::{evaluate, write_curves, write_metrics, write_ranks, QuantizedScorer};
use dkge::fileio::write_atomic;
use dkge::learner::fit;
use dkge::planted::{generate, PlantedConfig};
use dkge::quantize::{quantize_embedding, QuantMethod, QuantizedModel};
use dkge::{Dataset, FilterIndex, MetricsReport, ModelParams, Scorer, Split};
use log::info;

use crate::config::{
    render, BaselineRun, EvalRun, Method, PlantedRun, PrepareRun, QuantizeRun, TrainRun, SECTION_END,
};

pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
        }
        _ => Ok(()),
    }
}

fn manifest(command: &str, pairs: &[(&str, String)]) -> String {
    format!("# dkge {command}\n{}", render(pairs))
}

/// A bundle file, or a directory holding `dataset.dkgd` or else `train.txt`,
/// `valid.txt` and `test.txt`.
pub fn load_data(path: &Path) -> Result<Dataset> {
    let bundle = path.join("dataset.dkgd");
    let dataset = if path.is_dir() && bundle.is_file() {
        Dataset::read_bundle(&bundle).with_context(|| format!("loading dataset {}", bundle.display()))?
    } else if path.is_dir() {
        load_dataset(&path.join("train.txt"), &path.join("valid.txt"), &path.join("test.txt"))?
    } else {
        Dataset::read_bundle(path).with_context(|| format!("loading dataset {}", path.display()))?
    };
    Ok(dataset)
}

pub fn prepare(run: &PrepareRun) -> Result<()> {
    let dataset = load_dataset(&run.train, &run.valid, &run.test)?;
    ensure_parent(&run.out)?;
    dataset.write_bundle(&run.out)?;
    write_text(&with_suffix(&run.out, ".manifest.txt"), &manifest("prepare", &run.pairs()))?;
    info!("wrote {}", run.out.display());
    Ok(())
}

pub fn planted(run: &PlantedRun) -> Result<()> {
    let cfg = PlantedConfig {
        entities: run.entities,
        relations: run.relations,
        k: run.dim,
        train: run.train,
        valid: run.valid,
        test: run.test,
        mutual: run.mutual,
        seed: run.seed,
    };
    let p = generate(&cfg)?;
    p.write_dir(&run.out)?;
    let mut text = manifest("planted", &run.pairs());
    text.push_str(&format!("# available = {}\n", p.available));
    write_text(&run.out.join("manifest.txt"), &text)?;
    info!(
        "planted {} facts ({} available) into {}",
        run.train + run.valid + run.test,
        p.available,
        run.out.display()
    );
    Ok(())
}

pub fn train(run: &TrainRun) -> Result<()> {
    let dataset = load_data(&run.data)?;
    let cfg = run.train_config();
    let result = fit(&dataset, &cfg)?;
    let s = &result.state;

    ensure_parent(&run.out)?;
    write_codes(&result.model.entities, &with_suffix(&run.out, ".entities.dkgb"))?;
    write_codes(&result.model.relations, &with_suffix(&run.out, ".relations.dkgb"))?;

    let mut text = manifest("train", &run.pairs());
    if let Some(reason) = s.stop_reason {
        text.push_str(&format!("# stop = {reason}\n"));
    }
    text.push_str(&format!("# self-loops-removed = {}\n", result.self_loops_removed));
    text.push_str(SECTION_END);
    text.push_str("\nepoch,objective,entity_flips,relation_flips\n");
    if let Some(obj) = s.initial_objective {
        text.push_str(&format!("0,{obj:?},0,0\n"));
    }
    for (i, obj) in s.objective_history.iter().enumerate() {
        text.push_str(&format!("{},{obj:?},{},{}\n", i + 1, s.entity_flips[i], s.relation_flips[i]));
    }
    write_text(&with_suffix(&run.out, ".manifest.txt"), &text)?;
    info!(
        "trained {} epochs, final objective {:?}, wrote {}.*",
        s.epoch,
        s.objective_history.last(),
        run.out.display()
    );
    Ok(())
}

pub fn train_baseline_cmd(run: &BaselineRun) -> Result<()> {
    let dataset = load_data(&run.data)?;
    let emb = train_baseline(&dataset, &run.baseline_config())?;
    ensure_parent(&run.out)?;
    emb.write(&run.out)?;
    let mut text = manifest("train-baseline", &run.pairs());
    text.push_str(SECTION_END);
    text.push_str("\nepoch,loss\n");
    for (i, loss) in emb.loss_history.iter().enumerate() {
        text.push_str(&format!("{},{loss:?}\n", i + 1));
    }
    write_text(&with_suffix(&run.out, ".manifest.txt"), &text)?;
    info!("wrote {}", run.out.display());
    Ok(())
}

pub fn quantize(run: &QuantizeRun) -> Result<()> {
    let mut emb = ContinuousEmbedding::read(&run.input)?;
    emb.norm = run.norm.0;
    let method = match run.method {
        Method::Sign => QuantMethod::Sign,
        Method::Equal | Method::Lloyd => {
            ensure!((1..=16).contains(&run.bits), "--bits must be in 1..=16, got {}", run.bits);
            let levels = 1usize << run.bits;
            if run.method == Method::Equal {
                QuantMethod::Uniform(levels)
            } else {
                QuantMethod::Lloyd(levels)
            }
        }
    };
    let q = quantize_embedding(&emb, method)?;
    ensure_parent(&run.out)?;
    q.write(&run.out)?;
    write_text(&with_suffix(&run.out, ".manifest.txt"), &manifest("quantize", &run.pairs()))?;
    info!("quantized to {} bits per code, wrote {}.*", q.k(), run.out.display());
    Ok(())
}

enum LoadedModel {
    Binary(ModelParams),
    Continuous(ContinuousEmbedding),
    Quantized(QuantizedModel),
}

fn load_model(path: &Path) -> Result<LoadedModel> {
    if path.is_file() {
        return Ok(LoadedModel::Continuous(ContinuousEmbedding::read(path)?));
    }
    if with_suffix(path, ".quant.txt").is_file() {
        return Ok(LoadedModel::Quantized(QuantizedModel::read(path)?));
    }
    let ent = with_suffix(path, ".entities.dkgb");
    if ent.is_file() {
        let entities = read_codes(&ent)?;
        let relations = read_codes(&with_suffix(path, ".relations.dkgb"))?;
        ensure!(
            entities.k() == relations.k(),
            "entity codes have k = {}, relation codes k = {}",
            entities.k(),
            relations.k()
        );
        return Ok(LoadedModel::Binary(ModelParams { entities, relations }));
    }
    bail!(
        "no model at {}: expected an embedding file, {}.quant.txt or {}.entities.dkgb",
        path.display(),
        path.display(),
        path.display()
    )
}

pub fn eval(run: &EvalRun) -> Result<MetricsReport> {
    let dataset = load_data(&run.data)?;
    let cfg = run.eval_config();
    let split = Split::parse(&run.split).with_context(|| format!("unknown split `{}`", run.split))?;
    let test = dataset.split(split);
    ensure!(!test.is_empty(), "the {} split is empty", split.name());

    let mut model = load_model(&run.model)?;
    if let LoadedModel::Continuous(c) = &mut model {
        // The embedding file does not record the distance norm.
        c.norm = run.norm.0;
    }
    let quant_scorer;
    let scorer: &dyn Scorer = match &model {
        LoadedModel::Binary(m) => m,
        LoadedModel::Continuous(c) => c,
        LoadedModel::Quantized(q) => {
            quant_scorer = QuantizedScorer::new(q, run.score_mode.0);
            &quant_scorer
        }
    };
    ensure!(
        scorer.num_entities() == dataset.num_entities() && scorer.num_relations() == dataset.num_relations(),
        "model has {} entities and {} relations, dataset has {} and {}",
        scorer.num_entities(),
        scorer.num_relations(),
        dataset.num_entities(),
        dataset.num_relations()
    );

    let filter = FilterIndex::build(&dataset, &cfg.filter_splits);
    let triples: Vec<_> = test.iter().copied().collect();
    let (report, records) = evaluate(&triples, scorer, &filter, &cfg, run.exec.0)?;

    std::fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    write_metrics(&report, &run.out.join("metrics.txt"))?;
    write_ranks(&records, &run.out.join("ranks.csv"))?;
    write_text(&run.out.join("manifest.txt"), &manifest("eval", &run.pairs()))?;
    info!("{report}");
    Ok(report)
}

pub fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut rows = Vec::with_capacity(runs.len());
    for dir in runs {
        let path = dir.join("metrics.txt");
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let report = MetricsReport::from_text(&text).with_context(|| format!("parsing {}", path.display()))?;
        let label = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        rows.push((label, report));
    }
    ensure_parent(out)?;
    write_curves(&rows, out)?;
    info!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}
