//! Commands behind the `prccf` binary. Every command reads its inputs from
//! the artifact root and writes only under its own subdirectory.

mod chat;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use prccf::cognition::{
    CachedCauseDetector, CauseDetector, KeywordCauseDetector, KeywordFilter, KnowledgeRow,
    KnowledgeTable,
};
use prccf::config::{seed_offset, RunConfig};
use prccf::corpus::{
    attach_personas, build_retrieval_corpus, derive_samples, load_corpus, read_canonical,
    split_dataset, write_canonical, DialogueRecord, StrategyRegistry,
};
use prccf::evalkit::{
    evaluate, render_ablation_table, render_metric_table, render_sweep, render_top_n,
    sweep_report, Evaluation, MetricReport, SweepPoint, SweepReport,
};
use prccf::fusion::{AblationFlags, Checkpoint, CheckpointMeta, GenerationConfig, PrccfModel, PreparedSample};
use prccf::pipeline::{apply_ablation, Pipeline, PipelineSettings, Resources};
use prccf::retriever::{HashEncoder, RetrievalIndex};
use prccf::text::Vocab;
use prccf::training::{train, TrainingOutcome};
use prccf::{Error, Result};

pub use chat::{cmd_chat, ChatOptions};

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact { .. } => 3,
        Error::Numeric { .. } => 4,
        _ => 1,
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn require(path: PathBuf, producer: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            path,
            producer: producer.into(),
        })
    }
}

/// Where each command keeps its outputs.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.paths.artifact_root.clone(),
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.corpus_dir().join(format!("{name}.jsonl"))
    }

    pub fn vocab(&self) -> PathBuf {
        self.corpus_dir().join("vocab.json")
    }

    pub fn registry(&self) -> PathBuf {
        self.corpus_dir().join("strategies.json")
    }

    pub fn ingest_manifest(&self) -> PathBuf {
        self.corpus_dir().join("manifest.json")
    }

    pub fn index(&self) -> PathBuf {
        self.root.join("index").join("index.bin")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn ablate_dir(&self) -> PathBuf {
        self.root.join("ablate")
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub dialogues: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub vocab_size: usize,
    pub unmatched_personas: usize,
    pub warnings: Vec<String>,
    pub registry_hash: String,
}

/// Loads, splits and tokenizes the corpus.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestSummary> {
    let layout = Layout::new(cfg);
    let registry = match &cfg.paths.strategies {
        Some(p) => StrategyRegistry::load(p)?,
        None => StrategyRegistry::builtin(),
    };
    let loaded = load_corpus(&cfg.paths.corpus, cfg.paths.corpus_format, &registry)?;
    let mut records = loaded.records;
    let unmatched_personas = match &cfg.paths.personas {
        Some(p) => attach_personas(&mut records, p)?,
        None => 0,
    };
    let s = cfg.split;
    let (train, val, test) = split_dataset(
        &records,
        (s.train, s.val, s.test),
        cfg.seed.wrapping_add(seed_offset::SPLIT),
    )?;
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        write_canonical(part, &layout.split(name))?;
    }
    let knowledge = read_knowledge_rows(&cfg.paths.knowledge)?;
    let vocab = build_vocab(&train, &knowledge, cfg.data.vocab_size);
    write_file(&layout.vocab(), &serde_json::to_vec(&vocab).expect("vocab serializes"))?;
    write_file(
        &layout.registry(),
        &serde_json::to_vec_pretty(registry.names()).expect("names serialize"),
    )?;
    let summary = IngestSummary {
        dialogues: records.len(),
        train: train.len(),
        val: val.len(),
        test: test.len(),
        vocab_size: vocab.len(),
        unmatched_personas,
        warnings: loaded.warnings,
        registry_hash: registry.fingerprint(),
    };
    write_file(
        &layout.ingest_manifest(),
        &serde_json::to_vec_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

fn read_knowledge_rows(path: &Path) -> Result<Vec<KnowledgeRow>> {
    let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Load {
                source_name: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn build_vocab(train: &[DialogueRecord], knowledge: &[KnowledgeRow], size: usize) -> Vocab {
    let mut texts: Vec<&str> = Vec::new();
    for r in train {
        texts.push(r.persona_text());
        texts.extend(r.utterances.iter().map(|u| u.text.as_str()));
    }
    texts.extend(knowledge.iter().map(|k| k.inference.as_str()));
    Vocab::build(texts, size)
}

/// Everything a command needs after ingest, loaded once.
pub struct Inputs {
    pub registry: StrategyRegistry,
    pub train: Vec<DialogueRecord>,
    pub val: Vec<DialogueRecord>,
    pub test: Vec<DialogueRecord>,
    pub vocab: Vocab,
    pub encoder: HashEncoder,
    pub knowledge: KnowledgeTable,
    pub filter: KeywordFilter,
    pub causes: Box<dyn CauseDetector>,
    pub index: Option<RetrievalIndex>,
}

impl Inputs {
    /// `with_index` also loads the retrieval index, which `index` produces.
    pub fn load(cfg: &RunConfig, with_index: bool) -> Result<Self> {
        let layout = Layout::new(cfg);
        let registry = StrategyRegistry::load(&require(layout.registry(), "ingest")?)?;
        let read = |name: &str| -> Result<Vec<DialogueRecord>> {
            read_canonical(&require(layout.split(name), "ingest")?, &registry)
        };
        let (train, val, test) = (read("train")?, read("val")?, read("test")?);
        let vocab_path = require(layout.vocab(), "ingest")?;
        let raw = fs::read(&vocab_path).map_err(|e| io_err(&vocab_path, e))?;
        let mut vocab: Vocab = serde_json::from_slice(&raw).map_err(|e| Error::Load {
            source_name: vocab_path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })?;
        vocab.reindex();
        let encoder = HashEncoder::new(cfg.encoder.dimension, cfg.encoder.seed);
        let index = if with_index {
            Some(RetrievalIndex::load(&require(layout.index(), "index")?, &encoder)?)
        } else {
            None
        };
        let keyword = KeywordCauseDetector {
            keywords: cfg.cognition.cause_keywords.clone(),
        };
        let causes: Box<dyn CauseDetector> = match &cfg.paths.cause_cache {
            Some(p) => Box::new(CachedCauseDetector::load(p, Some(Box::new(keyword)))?),
            None => Box::new(keyword),
        };
        Ok(Self {
            registry,
            train,
            val,
            test,
            vocab,
            encoder,
            knowledge: KnowledgeTable::load(&cfg.paths.knowledge)?,
            filter: KeywordFilter {
                markers: cfg.cognition.filter_markers.clone(),
            },
            causes,
            index,
        })
    }

    pub fn pipeline(&self, settings: PipelineSettings) -> Result<Pipeline<'_>> {
        Pipeline::new(
            settings,
            Resources {
                index: self.index.as_ref(),
                encoder: &self.encoder,
                knowledge: &self.knowledge,
                filter: &self.filter,
                causes: self.causes.as_ref(),
            },
        )
    }

    /// Model inputs for one split; training samples never retrieve from
    /// their own dialogue.
    pub fn prepare(
        &self,
        cfg: &RunConfig,
        settings: PipelineSettings,
        records: &[DialogueRecord],
        is_train: bool,
    ) -> Result<Vec<PreparedSample>> {
        let samples = derive_samples(records, cfg.data.max_context_turns)?;
        self.pipeline(settings)?.prepare_all(&samples, is_train)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub entries: usize,
    pub buckets: usize,
    pub path: PathBuf,
}

/// Encodes the training split's retrieval corpus and saves the index.
pub fn cmd_index(cfg: &RunConfig) -> Result<IndexSummary> {
    let layout = Layout::new(cfg);
    let registry = StrategyRegistry::load(&require(layout.registry(), "ingest")?)?;
    let train = read_canonical(&require(layout.split("train"), "ingest")?, &registry)?;
    let corpus = build_retrieval_corpus(&train);
    let encoder = HashEncoder::new(cfg.encoder.dimension, cfg.encoder.seed);
    let index = RetrievalIndex::build(&corpus, &encoder, cfg.retriever.similarity)?;
    let path = layout.index();
    index.save(&path)?;
    Ok(IndexSummary {
        entries: index.len(),
        buckets: index.buckets.len(),
        path,
    })
}

fn settings_for(cfg: &RunConfig, flags: AblationFlags) -> Result<PipelineSettings> {
    apply_ablation(flags, cfg.pipeline_settings())
}

/// Trains one model under `settings` and saves checkpoint and log in `dir`.
pub fn fit(
    cfg: &RunConfig,
    settings: PipelineSettings,
    inputs: &Inputs,
    dir: &Path,
) -> Result<(PrccfModel, TrainingOutcome)> {
    let train_set = inputs.prepare(cfg, settings, &inputs.train, true)?;
    let val_set = inputs.prepare(cfg, settings, &inputs.val, false)?;
    let mut model = PrccfModel::new(
        cfg.model,
        inputs.vocab.clone(),
        cfg.seed.wrapping_add(seed_offset::INIT),
    );
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = Vec::new();
    let outcome = train(
        &mut model,
        &train_set,
        &val_set,
        &cfg.training,
        cfg.seed.wrapping_add(seed_offset::SHUFFLE),
        Some(&mut log),
    )?;
    write_file(&log_path, &log)?;
    let best_ppl = outcome.validation_ppl.get(outcome.best_epoch.wrapping_sub(1)).copied();
    let meta = CheckpointMeta {
        config_fingerprint: cfg.fingerprint(),
        registry_hash: inputs.registry.fingerprint(),
        step: outcome.steps,
        epoch: outcome.best_epoch,
        validation_ppl: best_ppl.filter(|p| p.is_finite()),
    };
    Checkpoint::save(&model, &meta, cfg.seed.wrapping_add(seed_offset::INIT), dir)?;
    Ok((model, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub best_epoch: usize,
    pub validation_ppl: Vec<f64>,
    pub first_loss: f64,
    pub last_loss: f64,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let inputs = Inputs::load(cfg, cfg.ablation.use_pr)?;
    let settings = settings_for(cfg, cfg.ablation)?;
    let (_, outcome) = fit(cfg, settings, &inputs, &Layout::new(cfg).model_dir())?;
    Ok(TrainSummary {
        steps: outcome.steps,
        best_epoch: outcome.best_epoch,
        validation_ppl: outcome.validation_ppl.clone(),
        first_loss: outcome.log.first().map_or(f64::NAN, |r| r.loss),
        last_loss: outcome.log.last().map_or(f64::NAN, |r| r.loss),
    })
}

/// Generation settings with the run seed applied.
pub fn generation_config(cfg: &RunConfig) -> GenerationConfig {
    GenerationConfig {
        seed: cfg
            .seed
            .wrapping_add(seed_offset::SAMPLING)
            .wrapping_add(cfg.generation.seed),
        ..cfg.generation
    }
}

fn assess(cfg: &RunConfig, settings: PipelineSettings, inputs: &Inputs, model: &PrccfModel) -> Result<Evaluation> {
    let test_set = inputs.prepare(cfg, settings, &inputs.test, false)?;
    evaluate(model, &test_set, &generation_config(cfg))
}

fn write_outputs(ev: &Evaluation, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for o in &ev.outputs {
        serde_json::to_writer(&mut out, o).expect("output serializes");
        out.push(b'\n');
    }
    write_file(path, &out)
}

/// Full evaluation report text.
pub fn render_evaluation(name: &str, ev: &Evaluation) -> String {
    format!(
        "{}\nstrategy top-n accuracy (%)\n{}\ntoken F1: {:.2}\nsamples: {}\n",
        render_metric_table(&[(name.to_string(), ev.report)]),
        render_top_n(&ev.top_n),
        ev.token_f1,
        ev.report.sample_count
    )
}

/// Scores `checkpoint` (default: the `train` output) on the test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(Evaluation, String)> {
    let layout = Layout::new(cfg);
    let dir = checkpoint.map_or_else(|| layout.model_dir(), Path::to_path_buf);
    let (model, meta) = Checkpoint::load(&dir)?;
    if meta.config_fingerprint != cfg.fingerprint() {
        log::warn!("checkpoint {} was trained under a different configuration", dir.display());
    }
    let inputs = Inputs::load(cfg, cfg.ablation.use_pr)?;
    let settings = settings_for(cfg, cfg.ablation)?;
    let ev = assess(cfg, settings, &inputs, &model)?;
    let report = render_evaluation("PRCCF", &ev);
    let out = layout.eval_dir();
    write_file(&out.join("report.txt"), report.as_bytes())?;
    write_file(
        &out.join("metrics.json"),
        &serde_json::to_vec_pretty(&ev.report).expect("report serializes"),
    )?;
    write_outputs(&ev, &out.join("outputs.jsonl"))?;
    Ok((ev, report))
}

/// The full model followed by the five single-component ablations.
pub fn ablation_variants() -> Vec<(String, AblationFlags)> {
    let mut v = vec![("PRCCF".to_string(), AblationFlags::full())];
    v.extend(AblationFlags::table3().into_iter().map(|(n, f)| (n.to_string(), f)));
    v
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect::<String>()
        .split('-')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub rows: Vec<(String, Evaluation)>,
    pub report: String,
}

/// Trains and scores one model per flag set.
pub fn cmd_ablate(cfg: &RunConfig, variants: &[(String, AblationFlags)]) -> Result<AblationRun> {
    let layout = Layout::new(cfg);
    let inputs = Inputs::load(cfg, variants.iter().any(|(_, f)| f.use_pr))?;
    let mut rows = Vec::with_capacity(variants.len());
    for (name, flags) in variants {
        log::info!("ablation variant {name}");
        let settings = settings_for(cfg, *flags)?;
        let dir = layout.ablate_dir().join(slug(name));
        let (model, _) = fit(cfg, settings, &inputs, &dir)?;
        let ev = assess(cfg, settings, &inputs, &model)?;
        write_outputs(&ev, &dir.join("outputs.jsonl"))?;
        rows.push((name.clone(), ev));
    }
    let table: Vec<(String, MetricReport)> = rows.iter().map(|(n, e)| (n.clone(), e.report)).collect();
    let report = render_ablation_table(&table);
    write_file(&layout.ablate_dir().join("report.txt"), report.as_bytes())?;
    Ok(AblationRun { rows, report })
}

/// Trains and scores one model per demonstration count.
pub fn cmd_sweep_pairs(cfg: &RunConfig, values: &[usize]) -> Result<(SweepReport, String)> {
    let layout = Layout::new(cfg);
    let inputs = Inputs::load(cfg, true)?;
    let mut points = Vec::with_capacity(values.len());
    for &pairs in values {
        let mut run = cfg.clone();
        run.retriever.pairs = pairs;
        run.validate()?;
        let settings = settings_for(&run, run.ablation)?;
        let dir = layout.sweep_dir().join(format!("pairs-{pairs}"));
        let (model, _) = fit(&run, settings, &inputs, &dir)?;
        let ev = assess(&run, settings, &inputs, &model)?;
        points.push(SweepPoint {
            pairs,
            acc: ev.report.acc,
            ppl: ev.report.ppl,
            bleu4: ev.report.bleu[3],
            rouge_l: ev.report.rouge_l,
            f1: ev.token_f1,
        });
    }
    let report = sweep_report(points)?;
    let text = render_sweep(&report);
    write_file(&layout.sweep_dir().join("report.txt"), text.as_bytes())?;
    write_file(
        &layout.sweep_dir().join("report.json"),
        &serde_json::to_vec_pretty(&report).expect("report serializes"),
    )?;
    Ok((report, text))
}

/// Writes `text` plus a newline, mapping failures to an I/O error.
pub fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| io_err(Path::new("<stdout>"), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs_are_path_safe() {
        assert_eq!(slug("w/o Per_sim"), "w-o-per-sim");
        assert_eq!(slug("PRCCF"), "prccf");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config(vec![])), 2);
        let missing = Error::MissingArtifact {
            path: "x".into(),
            producer: "train".into(),
        };
        assert_eq!(exit_code(&missing), 3);
        assert_eq!(
            exit_code(&Error::Numeric {
                stage: "fusion".into(),
                message: String::new()
            }),
            4
        );
    }
}
