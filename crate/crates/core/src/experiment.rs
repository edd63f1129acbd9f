//! Declarative experiments: flat `key=value` configs, single runs and grids
//! producing one results row per experiment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::checkpoint::{load_head_checkpoint, StandaloneModel};
use crate::data::{
    generate_synthetic_domains, read_lines, write_lines, DomainCorpus, DomainId,
    SyntheticDomainSpec, TextPairSource, Vocab, BOS, EOS,
};
use crate::error::{Error, Result};
use crate::evaluation::{corpus_bleu, exact_match, token_accuracy, Evaluator, Metric, Split};
use crate::lang_module::LangModule;
use crate::model::{Head, HeadKind, ModelConfig, Transformer};
use crate::objectives::{NoiseConfig, Objective, ObjectiveKind, ReverseTranslator};
use crate::rng::RngStreams;
use crate::schedules::{Schedule, StrategyKind};
use crate::tensor::Parameter;
use crate::trainer::{train, TrainOutcome, TrainingArguments};

/// Kind and raw `key=value` fields of one `objective.N` block.
type PendingObjective = (Option<KindSpec>, Vec<(String, String)>);

pub const RESULTS_HEADER: &str = "experiment\tschedule\tobjectives\tbleu_id\tbleu_ad\tbleu_ood\tem_id\tem_ad\tem_ood\tacc_id\tacc_ad\tacc_ood";

/// Prefix of the shared translation head used by generative objectives.
pub const TRANSLATION_HEAD: &str = "head.translation";

/// `init_checkpoint` values of the form `run:<experiment>/<objective>` point
/// into the output of an earlier experiment of the same grid.
pub const RUN_REF: &str = "run:";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Pretrain,
    Finetune,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Scenario::Pretrain),
            "finetune" => Ok(Scenario::Finetune),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Pretrain => "pretrain",
            Scenario::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KindSpec {
    Seq2Seq,
    Denoising,
    BackTranslation,
    TokenClassification,
    SequenceClassification,
}

impl KindSpec {
    pub fn as_str(&self) -> &'static str {
        match self {
            KindSpec::Seq2Seq => "seq2seq",
            KindSpec::Denoising => "denoising",
            KindSpec::BackTranslation => "backtranslation",
            KindSpec::TokenClassification => "token_classification",
            KindSpec::SequenceClassification => "sequence_classification",
        }
    }

    fn generative(&self) -> bool {
        matches!(self, KindSpec::Seq2Seq | KindSpec::Denoising | KindSpec::BackTranslation)
    }

    fn monolingual(&self) -> bool {
        matches!(self, KindSpec::Denoising | KindSpec::BackTranslation)
    }
}

impl FromStr for KindSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "seq2seq" => KindSpec::Seq2Seq,
            "denoising" => KindSpec::Denoising,
            "backtranslation" => KindSpec::BackTranslation,
            "token_classification" => KindSpec::TokenClassification,
            "sequence_classification" => KindSpec::SequenceClassification,
            other => return Err(Error::Config(format!("unknown objective kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TranslatorSpec {
    Oracle,
    Identity,
    Checkpoint(PathBuf),
}

impl FromStr for TranslatorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "oracle" => TranslatorSpec::Oracle,
            "identity" => TranslatorSpec::Identity,
            path => TranslatorSpec::Checkpoint(PathBuf::from(path)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec {
    pub kind: KindSpec,
    pub id: Option<String>,
    pub domain: Option<DomainId>,
    pub train_texts: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub val_texts: Option<PathBuf>,
    pub val_labels: Option<PathBuf>,
    pub batch_size: usize,
    pub max_steps: Option<usize>,
    pub evaluators: Vec<Evaluator>,
    pub reverse_translator: TranslatorSpec,
    pub noise: NoiseConfig,
    pub cache_pseudo_sources: bool,
}

impl ObjectiveSpec {
    pub fn new(kind: KindSpec, domain: Option<DomainId>) -> Self {
        Self {
            kind,
            id: None,
            domain,
            train_texts: None,
            train_labels: None,
            val_texts: None,
            val_labels: None,
            batch_size: 32,
            max_steps: None,
            evaluators: Vec::new(),
            reverse_translator: TranslatorSpec::Oracle,
            noise: NoiseConfig::default(),
            cache_pseudo_sources: false,
        }
    }

    /// Explicit id, or `<kind>_<domain>` (`<kind>_<index>` for file data).
    pub fn objective_id(&self, index: usize) -> String {
        match (&self.id, self.domain) {
            (Some(id), _) => id.clone(),
            (None, Some(d)) => format!("{}_{d}", self.kind.as_str()),
            (None, None) => format!("{}_{index}", self.kind.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Master seed of the synthetic corpora; defaults to the run seed.
    pub seed: Option<u64>,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let d = SyntheticDomainSpec::in_domain();
        Self {
            seed: None,
            train_size: d.train_size,
            val_size: d.val_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub scenario: Scenario,
    pub init_checkpoint: Option<PathBuf>,
    pub schedule: StrategyKind,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub objectives: Vec<ObjectiveSpec>,
    pub train: TrainingArguments,
    /// Per-objective update cap; defaults by schedule kind.
    pub max_steps: Option<usize>,
    /// Model dimensions; `vocab_size` is filled from the data.
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Generative objectives share one translation head.
    pub shared_translation_head: bool,
}

impl ExperimentConfig {
    pub fn new(experiment: impl Into<String>, schedule: StrategyKind, objectives: Vec<ObjectiveSpec>) -> Self {
        Self {
            experiment: experiment.into(),
            scenario: Scenario::Pretrain,
            init_checkpoint: None,
            schedule,
            seed: 0,
            out: None,
            objectives,
            train: TrainingArguments::default(),
            max_steps: None,
            model: ModelConfig::new(0),
            data: DataConfig::default(),
            shared_translation_head: true,
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    /// Makes relative file paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !is_run_ref(p) {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = &mut self.init_checkpoint {
            fix(p);
        }
        if let Some(p) = &mut self.out {
            fix(p);
        }
        for o in &mut self.objectives {
            for p in [&mut o.train_texts, &mut o.train_labels, &mut o.val_texts, &mut o.val_labels]
                .into_iter()
                .flatten()
            {
                fix(p);
            }
            if let TranslatorSpec::Checkpoint(p) = &mut o.reverse_translator {
                fix(p);
            }
        }
    }

    /// Replaces `run:<experiment>/<objective>` references with paths under
    /// `root`.
    pub fn resolve_run_refs(&mut self, root: &Path) {
        let fix = |p: &mut PathBuf| {
            if let Some(rest) = p.to_str().and_then(|s| s.strip_prefix(RUN_REF)) {
                let (exp, obj) = rest.split_once('/').unwrap_or((rest, ""));
                *p = root.join(exp).join("checkpoints").join(obj);
            }
        };
        if let Some(p) = &mut self.init_checkpoint {
            fix(p);
        }
        for o in &mut self.objectives {
            if let TranslatorSpec::Checkpoint(p) = &mut o.reverse_translator {
                fix(p);
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new("", StrategyKind::Parallel, Vec::new());
        let mut seen = BTreeSet::new();
        let mut objectives: BTreeMap<usize, PendingObjective> = BTreeMap::new();
        let mut schedule_set = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
            let bad = || Error::Config(format!("invalid value `{value}` for key `{key}`"));
            let usize_ = || value.parse::<usize>().map_err(|_| bad());
            let f64_ = || value.parse::<f64>().map_err(|_| bad());
            match key {
                "experiment" => cfg.experiment = value.to_string(),
                "scenario" => cfg.scenario = value.parse()?,
                "init_checkpoint" => cfg.init_checkpoint = Some(PathBuf::from(value)),
                "schedule" => {
                    cfg.schedule = value.parse()?;
                    schedule_set = true;
                }
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                "out" => cfg.out = Some(PathBuf::from(value)),
                "shared_translation_head" => cfg.shared_translation_head = parse_bool(value).ok_or_else(bad)?,
                "train.lr" => cfg.train.adam.lr = f64_()?,
                "train.beta1" => cfg.train.adam.beta1 = f64_()?,
                "train.beta2" => cfg.train.adam.beta2 = f64_()?,
                "train.epsilon" => cfg.train.adam.epsilon = f64_()?,
                "train.gradient_accumulation_steps" => cfg.train.gradient_accumulation_steps = Some(usize_()?),
                "train.eval_interval" => cfg.train.eval_interval = usize_()?,
                "train.log_interval" => cfg.train.log_interval = usize_()?,
                "train.max_global_updates" => cfg.train.max_global_updates = Some(usize_()?),
                "train.max_steps" => cfg.max_steps = Some(usize_()?),
                "train.warmup_steps" => cfg.train.warmup_steps = usize_()?,
                "train.reset_optimizer_between_phases" => {
                    cfg.train.reset_optimizer_between_phases = parse_bool(value).ok_or_else(bad)?
                }
                "convergence.patience" => cfg.train.convergence.patience = usize_()?,
                "convergence.min_delta" => cfg.train.convergence.min_delta = f64_()?,
                "model.d_model" => cfg.model.d_model = usize_()?,
                "model.n_heads" => cfg.model.n_heads = usize_()?,
                "model.enc_layers" => cfg.model.enc_layers = usize_()?,
                "model.dec_layers" => cfg.model.dec_layers = usize_()?,
                "model.ffn_dim" => cfg.model.ffn_dim = usize_()?,
                "model.max_len" => cfg.model.max_len = usize_()?,
                "model.dropout" => cfg.model.dropout = f64_()?,
                "data.seed" => cfg.data.seed = Some(value.parse().map_err(|_| bad())?),
                "data.train_size" => cfg.data.train_size = usize_()?,
                "data.val_size" => cfg.data.val_size = usize_()?,
                _ => {
                    let rest = key
                        .strip_prefix("objective.")
                        .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
                    let (index, field) = rest
                        .split_once('.')
                        .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
                    let index: usize = index
                        .parse()
                        .map_err(|_| Error::Config(format!("unknown key `{key}`")))?;
                    let entry = objectives.entry(index).or_default();
                    if field == "kind" {
                        entry.0 = Some(value.parse()?);
                    } else {
                        entry.1.push((field.to_string(), value.to_string()));
                    }
                }
            }
        }
        for (index, (kind, fields)) in objectives {
            let kind = kind.ok_or_else(|| Error::Config(format!("objective.{index}.kind is missing")))?;
            let mut spec = ObjectiveSpec::new(kind, None);
            let mut noise_set = false;
            for (field, value) in fields {
                let key = format!("objective.{index}.{field}");
                let bad = || Error::Config(format!("invalid value `{value}` for key `{key}`"));
                match field.as_str() {
                    "id" => spec.id = Some(value.clone()),
                    "domain" => spec.domain = Some(value.parse().map_err(|_| bad())?),
                    "train_texts" => spec.train_texts = Some(PathBuf::from(&value)),
                    "train_labels" => spec.train_labels = Some(PathBuf::from(&value)),
                    "val_texts" => spec.val_texts = Some(PathBuf::from(&value)),
                    "val_labels" => spec.val_labels = Some(PathBuf::from(&value)),
                    "batch_size" => spec.batch_size = value.parse().map_err(|_| bad())?,
                    "max_steps" => spec.max_steps = Some(value.parse().map_err(|_| bad())?),
                    "evaluators" => {
                        spec.evaluators = value
                            .split(',')
                            .map(str::trim)
                            .filter(|s| !s.is_empty())
                            .map(parse_evaluator)
                            .collect::<Result<_>>()?
                    }
                    "reverse_translator" => spec.reverse_translator = value.parse()?,
                    "noise.window" => {
                        spec.noise.window = value.parse().map_err(|_| bad())?;
                        noise_set = true;
                    }
                    "noise.fraction" => {
                        spec.noise.permute_fraction = value.parse().map_err(|_| bad())?;
                        noise_set = true;
                    }
                    "cache_pseudo_sources" => spec.cache_pseudo_sources = parse_bool(&value).ok_or_else(bad)?,
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
            }
            if noise_set && kind != KindSpec::Denoising {
                return Err(Error::Config(format!(
                    "objective.{index}: noise settings need kind=denoising"
                )));
            }
            cfg.objectives.push(spec);
        }
        if !schedule_set {
            return Err(Error::Config("missing key `schedule`".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.is_empty() {
            return Err(Error::Config("missing key `experiment`".into()));
        }
        if self.experiment.contains(['/', '\\', '\t']) {
            return Err(Error::Config(format!("invalid experiment id `{}`", self.experiment)));
        }
        if self.objectives.is_empty() {
            return Err(Error::Config("no objectives configured".into()));
        }
        match (self.scenario, &self.init_checkpoint) {
            (Scenario::Finetune, None) => {
                return Err(Error::Config("scenario=finetune requires `init_checkpoint`".into()))
            }
            (Scenario::Pretrain, Some(_)) => {
                return Err(Error::Config("`init_checkpoint` is only valid with scenario=finetune".into()))
            }
            _ => {}
        }
        let mut ids = BTreeSet::new();
        for (i, o) in self.objectives.iter().enumerate() {
            let id = o.objective_id(i);
            if !ids.insert(id.clone()) {
                return Err(Error::Config(format!("duplicate objective id `{id}`")));
            }
            if o.domain.is_none() && o.train_texts.is_none() {
                return Err(Error::Config(format!(
                    "objective `{id}` needs a domain or train_texts"
                )));
            }
            if !o.kind.generative() && o.train_labels.is_none() {
                return Err(Error::Config(format!(
                    "objective `{id}`: classification needs train_labels"
                )));
            }
            if o.kind.monolingual() && o.train_labels.is_some() {
                return Err(Error::Config(format!(
                    "objective `{id}`: {} reads unlabeled text from train_texts only",
                    o.kind.as_str()
                )));
            }
            if o.batch_size == 0 {
                return Err(Error::Config(format!("objective `{id}`: batch_size must be at least 1")));
            }
            o.noise.validate()?;
        }
        self.train.validate()
    }

    /// Objective ids joined with `+`.
    pub fn objectives_label(&self) -> String {
        self.objectives
            .iter()
            .enumerate()
            .map(|(i, o)| o.objective_id(i))
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn schedule_name(&self) -> &'static str {
        match self.schedule {
            StrategyKind::Parallel => "parallel",
            StrategyKind::Sequential => "sequential",
            StrategyKind::Uniform => "uniform",
        }
    }

    fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }
}

fn is_run_ref(p: &Path) -> bool {
    p.to_str().is_some_and(|s| s.starts_with(RUN_REF))
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

/// `metric` (on val) or `metric@split`.
fn parse_evaluator(s: &str) -> Result<Evaluator> {
    let (metric, split) = s.split_once('@').unwrap_or((s, "val"));
    Ok(Evaluator {
        metric: metric.parse()?,
        split: split.parse::<Split>()?,
    })
}

/// BLEU, exact match and token accuracy of a translation model on one
/// corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationScores {
    pub bleu: f64,
    pub exact_match: f64,
    pub token_accuracy: f64,
}

pub fn evaluate_translation(model: &StandaloneModel, corpus: &TextPairSource) -> Result<TranslationScores> {
    if corpus.is_empty() {
        return Err(Error::Evaluation("evaluation corpus is empty".into()));
    }
    if model.head().kind != HeadKind::Seq2SeqLm {
        return Err(Error::Routing(format!(
            "translation metrics need a seq2seq_lm head, got {}",
            model.head().kind
        )));
    }
    let vocab = model.vocab();
    let texts: Vec<&str> = corpus.texts().iter().map(String::as_str).collect();
    let max_len = model.model().config().max_len;
    let mut hyps = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(100) {
        let sources: Vec<Vec<usize>> = chunk
            .iter()
            .map(|t| {
                let mut s = vec![BOS];
                s.extend(vocab.tokenize(t));
                s.push(EOS);
                s
            })
            .collect();
        hyps.extend(model.model().greedy_decode_batch(model.params(), model.head(), &sources, max_len)?);
    }
    let refs: Vec<Vec<usize>> = corpus.labels().iter().map(|l| vocab.tokenize(l)).collect();
    Ok(TranslationScores {
        bleu: corpus_bleu(&hyps, &refs)?,
        exact_match: exact_match(&hyps, &refs)?,
        token_accuracy: token_accuracy(&hyps, &refs)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsRow {
    pub experiment: String,
    pub schedule: String,
    pub objectives: String,
    /// Scores on ID, AD and OOD validation data; `None` when the run has no
    /// generative head.
    pub scores: Option<[TranslationScores; 3]>,
}

impl ResultsRow {
    pub fn score(&self, domain: DomainId) -> Option<TranslationScores> {
        let i = DomainId::ALL.iter().position(|&d| d == domain)?;
        self.scores.map(|s| s[i])
    }

    pub fn tsv(&self) -> String {
        let cells: Vec<String> = match &self.scores {
            Some(s) => s
                .iter()
                .map(|x| format!("{:.2}", x.bleu))
                .chain(s.iter().map(|x| format!("{:.4}", x.exact_match)))
                .chain(s.iter().map(|x| format!("{:.4}", x.token_accuracy)))
                .collect(),
            None => vec!["NA".to_string(); 9],
        };
        format!("{}\t{}\t{}\t{}", self.experiment, self.schedule, self.objectives, cells.join("\t"))
    }

    fn error_tsv(config: &ExperimentConfig, err: &Error) -> String {
        let detail = err.to_string().replace(['\t', '\n'], " ");
        let mut cells = vec![format!("ERR: {detail}")];
        cells.extend(std::iter::repeat_n("ERR".to_string(), 8));
        format!(
            "{}\t{}\t{}\t{}",
            config.experiment,
            config.schedule_name(),
            config.objectives_label(),
            cells.join("\t")
        )
    }
}

pub fn write_results(path: &Path, lines: &[String]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut all = vec![RESULTS_HEADER.to_string()];
    all.extend_from_slice(lines);
    write_lines(path, &all)
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub row: ResultsRow,
    pub outcome: TrainOutcome,
    /// The model evaluated for the results row.
    pub model: Option<StandaloneModel>,
    pub objectives: Vec<Objective>,
    pub elapsed: Duration,
}

/// Synthetic corpora for the config's data section.
pub fn synthetic_domains(config: &ExperimentConfig) -> Result<BTreeMap<DomainId, DomainCorpus>> {
    let specs: Vec<SyntheticDomainSpec> = SyntheticDomainSpec::defaults()
        .into_iter()
        .map(|mut s| {
            s.train_size = config.data.train_size;
            s.val_size = config.data.val_size;
            s
        })
        .collect();
    generate_synthetic_domains(config.data_seed(), &specs)
}

struct ObjectiveData {
    train: TextPairSource,
    val: TextPairSource,
}

fn objective_data(
    spec: &ObjectiveSpec,
    domains: &BTreeMap<DomainId, DomainCorpus>,
) -> Result<ObjectiveData> {
    let load = |texts: &Option<PathBuf>, labels: &Option<PathBuf>| -> Result<Option<TextPairSource>> {
        match (texts, labels) {
            (Some(t), _) if spec.kind.monolingual() => Ok(Some(TextPairSource::monolingual(read_lines(t)?))),
            (Some(t), Some(l)) => Ok(Some(TextPairSource::from_paths(t, l)?)),
            (Some(t), None) => Err(Error::Config(format!("{} has no labels file", t.display()))),
            (None, _) => Ok(None),
        }
    };
    let corpus = spec.domain.map(|d| &domains[&d]);
    let from_domain = |split: Split| {
        corpus.map(|c| {
            let source = if split == Split::Train { &c.train } else { &c.val };
            if spec.kind.monolingual() {
                TextPairSource::monolingual(source.labels().to_vec())
            } else {
                source.clone()
            }
        })
    };
    let train = match load(&spec.train_texts, &spec.train_labels)? {
        Some(t) => t,
        None => from_domain(Split::Train).ok_or_else(|| Error::Config("objective has no training data".into()))?,
    };
    let val = match load(&spec.val_texts, &spec.val_labels)? {
        Some(v) => v,
        None => from_domain(Split::Val).unwrap_or_default(),
    };
    Ok(ObjectiveData { train, val })
}

/// Runs one experiment end to end and evaluates the final translation head
/// on the ID, AD and OOD validation splits.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let start = Instant::now();
    let domains = synthetic_domains(config)?;
    let data: Vec<ObjectiveData> = config
        .objectives
        .iter()
        .map(|o| objective_data(o, &domains))
        .collect::<Result<_>>()?;

    let init = match config.scenario {
        Scenario::Finetune => {
            let path = config.init_checkpoint.as_ref().expect("validated");
            if is_run_ref(path) {
                return Err(Error::Config(format!(
                    "unresolved run reference `{}` outside a grid",
                    path.display()
                )));
            }
            Some(load_head_checkpoint(path)?)
        }
        Scenario::Pretrain => None,
    };
    let vocab = Arc::new(match &init {
        Some(m) => m.vocab().clone(),
        None => {
            let mut lines: Vec<&String> = Vec::new();
            for c in domains.values() {
                lines.extend(c.train.texts());
                lines.extend(c.train.labels());
            }
            for (spec, d) in config.objectives.iter().zip(&data) {
                if spec.domain.is_none() {
                    lines.extend(d.train.texts());
                    if spec.kind.generative() {
                        lines.extend(d.train.labels());
                    }
                }
            }
            Vocab::build(lines)
        }
    });
    let model = match &init {
        Some(m) => m.model().clone(),
        None => {
            let mut cfg = config.model.clone();
            cfg.vocab_size = vocab.len();
            Transformer::new(cfg)?
        }
    };
    let mut lm = match &init {
        Some(m) => LangModule::with_body(model.clone(), m.body_parameters(), config.seed)?,
        None => LangModule::new(model.clone(), config.seed)?,
    };
    let translation_head: Option<Vec<Parameter>> = if config.shared_translation_head {
        Some(match &init {
            Some(m) if m.head().kind == HeadKind::Seq2SeqLm => m.head_parameters(),
            Some(m) => {
                return Err(Error::Compatibility(format!(
                    "init checkpoint has a {} head, expected seq2seq_lm",
                    m.head().kind
                )))
            }
            None => {
                let head = Head {
                    kind: HeadKind::Seq2SeqLm,
                    n_outputs: vocab.len(),
                    prefix: TRANSLATION_HEAD.into(),
                };
                model.init_head(&head, &mut RngStreams::new(config.seed).stream("init/head/translation"))
            }
        })
    } else {
        None
    };

    let mut objectives = Vec::with_capacity(config.objectives.len());
    for (i, (spec, d)) in config.objectives.iter().zip(data).enumerate() {
        let kind = match spec.kind {
            KindSpec::Seq2Seq => ObjectiveKind::Seq2Seq,
            KindSpec::Denoising => ObjectiveKind::Denoising(spec.noise.clone()),
            KindSpec::BackTranslation => ObjectiveKind::BackTranslation(match &spec.reverse_translator {
                TranslatorSpec::Identity => ReverseTranslator::Identity,
                TranslatorSpec::Oracle => {
                    let domain = spec.domain.ok_or_else(|| {
                        Error::Config(format!(
                            "objective `{}`: the oracle translator needs a synthetic domain",
                            spec.objective_id(i)
                        ))
                    })?;
                    ReverseTranslator::oracle(domains[&domain].clone())
                }
                TranslatorSpec::Checkpoint(p) => ReverseTranslator::Model(Arc::new(load_head_checkpoint(p)?)),
            }),
            KindSpec::TokenClassification => ObjectiveKind::TokenClassification,
            KindSpec::SequenceClassification => ObjectiveKind::SequenceClassification,
        };
        let mut objective = Objective::new(spec.objective_id(i), kind, vocab.clone(), d.train, d.val)?
            .with_batch_size(spec.batch_size)?
            .with_evaluators(spec.evaluators.clone())?
            .with_seed(config.seed)
            .with_cached_pseudo_sources(spec.cache_pseudo_sources);
        if let (true, Some(head)) = (spec.kind.generative(), &translation_head) {
            objective = objective.with_module(head.clone());
        }
        lm.register_objective(&objective)?;
        objectives.push(objective);
    }

    let mut schedule = Schedule::of_kind(config.schedule, objectives, config.seed)?;
    if let Some(cap) = config.max_steps {
        schedule.set_all_max_steps(cap);
    }
    for (i, spec) in config.objectives.iter().enumerate() {
        if let Some(cap) = spec.max_steps {
            schedule.set_max_steps(&spec.objective_id(i), cap)?;
        }
    }
    let mut args = config.train.clone();
    args.seed = config.seed;
    if let Some(out) = &config.out {
        args.checkpoint_dir = Some(out.join("checkpoints"));
        args.log_path = Some(out.join("log.tsv"));
    }
    let outcome = train(&mut lm, &mut schedule, &args)?;
    let objectives = schedule.into_objectives();

    let eval_objective = objectives.iter().find(|o| o.compatible_head() == HeadKind::Seq2SeqLm);
    let model = match eval_objective {
        Some(o) => Some(StandaloneModel::from_lang_module(&lm, o.id(), &vocab)?),
        None => None,
    };
    let scores = match &model {
        Some(m) => {
            let mut s = Vec::with_capacity(3);
            for d in DomainId::ALL {
                s.push(evaluate_translation(m, &domains[&d].val)?);
            }
            Some([s[0], s[1], s[2]])
        }
        None => None,
    };
    let row = ResultsRow {
        experiment: config.experiment.clone(),
        schedule: config.schedule_name().to_string(),
        objectives: config.objectives_label(),
        scores,
    };
    if let Some(out) = &config.out {
        write_results(&out.join("results.tsv"), &[row.tsv()])?;
    }
    Ok(ExperimentOutput {
        row,
        outcome,
        model,
        objectives,
        elapsed: start.elapsed(),
    })
}

/// Runs every config in order, writing `out/<experiment>/..` per run and
/// `out/results.tsv` for the grid. Failures become error rows.
pub fn run_grid(configs: &[ExperimentConfig], out: &Path) -> Result<Vec<Result<ResultsRow>>> {
    let mut rows = Vec::with_capacity(configs.len());
    let mut lines = Vec::with_capacity(configs.len());
    for config in configs {
        let mut config = config.clone();
        config.resolve_run_refs(out);
        config.out = Some(out.join(&config.experiment));
        match run_experiment(&config) {
            Ok(o) => {
                lines.push(o.row.tsv());
                rows.push(Ok(o.row));
            }
            Err(e) => {
                lines.push(ResultsRow::error_tsv(&config, &e));
                rows.push(Err(e));
            }
        }
        write_results(&out.join("results.tsv"), &lines)?;
    }
    write_results(&out.join("results.tsv"), &lines)?;
    Ok(rows)
}

/// Reads a grid file of `grid.<n>=<config path>` lines, in `n` order.
pub fn load_grid(path: impl AsRef<Path>) -> Result<Vec<ExperimentConfig>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = BTreeMap::new();
    for line in read_lines(path)? {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected grid.<n>=<path>, got `{line}`")))?;
        let n: usize = key
            .trim()
            .strip_prefix("grid.")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Config(format!("unknown key `{}`", key.trim())))?;
        if entries.insert(n, base.join(value.trim())).is_some() {
            return Err(Error::Config(format!("duplicate key `{}`", key.trim())));
        }
    }
    entries.into_values().map(ExperimentConfig::from_path).collect()
}

/// Update budget of the built-in desk grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeskBudget {
    pub pretrain_steps: usize,
    pub adaptation_steps: usize,
    pub finetune_steps: usize,
}

impl Default for DeskBudget {
    fn default() -> Self {
        Self {
            pretrain_steps: 3_000,
            adaptation_steps: 3_000,
            finetune_steps: 1_500,
        }
    }
}

pub const BASELINE: &str = "1_seq2seq_id";

/// Desk analogues of the comparison grid: baseline, sequential and
/// parallel adaptation from scratch, then parallel fine-tuning of the
/// baseline with denoising, back-translation and supervised AD data.
pub fn desk_grid(seed: u64, budget: DeskBudget, include_supervised_finetune: bool) -> Vec<ExperimentConfig> {
    use DomainId::{Ad, Id};
    use KindSpec::*;
    let obj = |k, d| ObjectiveSpec::new(k, Some(d));
    let base = |name: &str, schedule, objectives: Vec<ObjectiveSpec>, cap| {
        let mut c = ExperimentConfig::new(name, schedule, objectives);
        c.seed = seed;
        c.max_steps = Some(cap);
        c
    };
    let finetune = |name: &str, second: KindSpec| {
        let mut c = base(
            name,
            StrategyKind::Parallel,
            vec![obj(Seq2Seq, Id), obj(second, Ad)],
            budget.finetune_steps,
        );
        c.scenario = Scenario::Finetune;
        c.init_checkpoint = Some(PathBuf::from(format!("{RUN_REF}{BASELINE}/seq2seq_ID")));
        c
    };
    let mut grid = vec![
        base(BASELINE, StrategyKind::Sequential, vec![obj(Seq2Seq, Id)], budget.pretrain_steps),
        base("2_seq_bt_ad", StrategyKind::Sequential, vec![obj(Seq2Seq, Id), obj(BackTranslation, Ad)], budget.pretrain_steps),
        base("3_seq_seq2seq_ad", StrategyKind::Sequential, vec![obj(Seq2Seq, Id), obj(Seq2Seq, Ad)], budget.pretrain_steps),
        base("4_par_bt_ad", StrategyKind::Parallel, vec![obj(Seq2Seq, Id), obj(BackTranslation, Ad)], budget.adaptation_steps),
        base("5_par_seq2seq_ad", StrategyKind::Parallel, vec![obj(Seq2Seq, Id), obj(Seq2Seq, Ad)], budget.adaptation_steps),
        finetune("8_ft_denoise_ad", Denoising),
        finetune("9_ft_bt_ad", BackTranslation),
    ];
    if include_supervised_finetune {
        grid.push(finetune("10_ft_seq2seq_ad", Seq2Seq));
    }
    grid
}

/// Writes the synthetic corpora as line-aligned files:
/// `<out>/<DOMAIN>/{train,val}.{src,tgt}`.
pub fn write_synthetic_corpora(config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (domain, corpus) in synthetic_domains(config)? {
        let dir = out.join(domain.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (split, source) in [("train", &corpus.train), ("val", &corpus.val)] {
            let src = dir.join(format!("{split}.src"));
            let tgt = dir.join(format!("{split}.tgt"));
            source.write(&src, &tgt)?;
            written.push(src);
            written.push(tgt);
        }
    }
    Ok(written)
}

/// `evaluate` subcommand input: a checkpoint and either a synthetic domain
/// or a pair of line-aligned files.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateConfig {
    pub checkpoint: PathBuf,
    pub domain: Option<DomainId>,
    pub texts: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub data: DataConfig,
    pub seed: u64,
}

impl EvaluateConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let mut checkpoint = None;
        let mut cfg = Self {
            checkpoint: PathBuf::new(),
            domain: None,
            texts: None,
            labels: None,
            data: DataConfig::default(),
            seed: 0,
        };
        for line in read_lines(path)? {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || Error::Config(format!("invalid value `{value}` for key `{key}`"));
            match key {
                "checkpoint" => checkpoint = Some(base.join(value)),
                "domain" => cfg.domain = Some(value.parse().map_err(|_| bad())?),
                "texts" => cfg.texts = Some(base.join(value)),
                "labels" => cfg.labels = Some(base.join(value)),
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                "data.seed" => cfg.data.seed = Some(value.parse().map_err(|_| bad())?),
                "data.train_size" => cfg.data.train_size = value.parse().map_err(|_| bad())?,
                "data.val_size" => cfg.data.val_size = value.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
        }
        cfg.checkpoint = checkpoint.ok_or_else(|| Error::Config("missing key `checkpoint`".into()))?;
        Ok(cfg)
    }

    pub fn corpus(&self) -> Result<TextPairSource> {
        match (&self.texts, &self.labels, self.domain) {
            (Some(t), Some(l), None) => TextPairSource::from_paths(t, l),
            (None, None, Some(d)) => {
                let mut c = ExperimentConfig::new("evaluate", StrategyKind::Parallel, Vec::new());
                c.seed = self.seed;
                c.data = self.data.clone();
                Ok(synthetic_domains(&c)?.remove(&d).expect("all domains generated").val)
            }
            _ => Err(Error::Config("give either `domain` or both `texts` and `labels`".into())),
        }
    }

    pub fn run(&self) -> Result<TranslationScores> {
        let model = load_head_checkpoint(&self.checkpoint)?;
        evaluate_translation(&model, &self.corpus()?)
    }
}

impl fmt::Display for TranslationScores {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "bleu\t{:.2}\nexact_match\t{:.4}\ntoken_accuracy\t{:.4}",
            self.bleu, self.exact_match, self.token_accuracy
        )
    }
}

/// Metrics an objective may list in `evaluators`.
pub fn metric_names() -> [&'static str; 4] {
    [
        Metric::Bleu.as_str(),
        Metric::TokenAccuracy.as_str(),
        Metric::ExactMatch.as_str(),
        Metric::ValLoss.as_str(),
    ]
}
