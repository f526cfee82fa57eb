//! Declarative pipeline configuration and the stage functions shared by the
//! command line and the tests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{self, library_by_entity, summarize, ConsistencyTotals, DisclosureVerdict, PolicySet};
use crate::destination::{
    self, AppMeta, Blocklist, CloudSuffixes, DestinationError, DestinationLabel, EntityMap, Labeler, ListFormat,
    SuffixList,
};
use crate::extract::{self, DataFlow, ExtractError, RuleSet};
use crate::ingest::{self, CaptureFormat, HttpTransaction, IngestError};
use crate::metrics::{aggregate_report, ReportBundle};
use crate::ontology::{self, Ontology, OntologyError, OntologyKind};
use crate::purpose::{self, PurposeError, PurposedFlow};

pub const BUNDLED_RULES: &str = include_str!("../data/rules.yaml");
pub const ENV_PREFIX: &str = "FLOWAUDIT_";

pub const TRANSACTIONS_FILE: &str = "transactions.jsonl";
pub const FLOWS_FILE: &str = "flows.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";
pub const PURPOSES_FILE: &str = "purposes.jsonl";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_MD: &str = "report.md";
pub const HISTOGRAM_FILE: &str = "histogram.json";

/// Entities whose policies the reference-policies mode always includes.
pub const REFERENCE_POLICY_ENTITIES: [&str; 2] = ["oculus", "unity"];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: cannot parse input: {message}")]
    Parse { stage: &'static str, message: String },
    #[error("{stage}: {message}")]
    Failed { stage: &'static str, message: String },
}

impl PipelineError {
    /// 2 for configuration problems, 3 for unparseable inputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Parse { .. } => 3,
            PipelineError::Failed { .. } => 1,
        }
    }

    fn parse(stage: &'static str, e: impl Display) -> Self {
        PipelineError::Parse {
            stage,
            message: e.to_string(),
        }
    }

    fn failed(stage: &'static str, e: impl Display) -> Self {
        PipelineError::Failed {
            stage,
            message: e.to_string(),
        }
    }

    fn ingest(e: IngestError) -> Self {
        match e {
            IngestError::UnreadableFile { .. } => Self::failed("ingest", e),
            _ => Self::parse("ingest", e),
        }
    }

    fn extract(e: ExtractError) -> Self {
        match e {
            ExtractError::Io { .. } => Self::failed("extract", e),
            _ => Self::parse("extract", e),
        }
    }

    fn destination(e: DestinationError) -> Self {
        match e {
            DestinationError::Io { .. } => Self::failed("label", e),
            _ => Self::parse("label", e),
        }
    }

    fn ontology(stage: &'static str, e: OntologyError) -> Self {
        match e {
            OntologyError::Io { .. } => Self::failed(stage, e),
            _ => Self::parse(stage, e),
        }
    }

    fn consistency(e: consistency::ConsistencyError) -> Self {
        match e {
            consistency::ConsistencyError::Io { .. } => Self::failed("check", e),
            _ => Self::parse("check", e),
        }
    }

    fn purpose(e: PurposeError) -> Self {
        match e {
            PurposeError::Io { .. } => Self::failed("purpose", e),
            _ => Self::parse("purpose", e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlocklistSource {
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub format: Option<ListFormat>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OntologyFiles {
    pub edges: PathBuf,
    #[serde(default)]
    pub synonyms: Option<PathBuf>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Everything a run needs. Optional inputs fall back to the bundled data
/// (rules, ontologies, suffix list) or to empty sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub captures: Vec<PathBuf>,
    #[serde(default)]
    pub capture_format: Option<CaptureFormat>,
    #[serde(default)]
    pub rules: Option<PathBuf>,
    #[serde(default)]
    pub profile: Option<PathBuf>,
    #[serde(default)]
    pub entity_map: Option<PathBuf>,
    #[serde(default)]
    pub blocklists: Vec<BlocklistSource>,
    #[serde(default)]
    pub data_ontology: Option<OntologyFiles>,
    #[serde(default)]
    pub entity_ontology: Option<OntologyFiles>,
    #[serde(default)]
    pub apps: Option<PathBuf>,
    #[serde(default)]
    pub statements: Option<PathBuf>,
    #[serde(default)]
    pub segments: Option<PathBuf>,
    #[serde(default)]
    pub policy_library: Option<PathBuf>,
    #[serde(default)]
    pub psl: Option<PathBuf>,
    #[serde(default)]
    pub include_private_suffixes: bool,
    #[serde(default)]
    pub cloud_suffixes: Option<Vec<String>>,
    #[serde(default)]
    pub platform_keywords: Option<Vec<String>>,
    #[serde(default)]
    pub min_token_len: Option<usize>,
    #[serde(default)]
    pub auto_include: BTreeSet<String>,
    #[serde(default)]
    pub first_match_only: bool,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        serde_yaml::from_str("{}").expect("all fields default")
    }
}

const LIST_KEYS: [&str; 4] = ["captures", "auto_include", "cloud_suffixes", "platform_keywords"];
const SCALAR_KEYS: [&str; 13] = [
    "capture_format",
    "rules",
    "profile",
    "entity_map",
    "apps",
    "statements",
    "segments",
    "policy_library",
    "psl",
    "include_private_suffixes",
    "min_token_len",
    "first_match_only",
    "output_dir",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Default,
    /// Include the oculus and unity library policies for every app.
    ReferencePolicies,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(Mode::Default),
            "reference-policies" => Ok(Mode::ReferencePolicies),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

impl PipelineConfig {
    /// Parses YAML, applies `FLOWAUDIT_<KEY>` overrides from `env` and
    /// resolves relative paths against `base`. List keys take
    /// comma-separated values.
    pub fn from_yaml(text: &str, base: &Path, env: impl Fn(&str) -> Option<String>) -> Result<Self, PipelineError> {
        let mut value: serde_yaml::Value =
            serde_yaml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        if value.is_null() {
            value = serde_yaml::Value::Mapping(Default::default());
        }
        let map = value
            .as_mapping_mut()
            .ok_or_else(|| PipelineError::Config("top level must be a mapping".into()))?;
        for key in SCALAR_KEYS {
            if let Some(v) = env(&format!("{ENV_PREFIX}{}", key.to_uppercase())) {
                let parsed: serde_yaml::Value =
                    if matches!(key, "include_private_suffixes" | "first_match_only" | "min_token_len") {
                        serde_yaml::from_str(&v).map_err(|e| PipelineError::Config(format!("{key}: {e}")))?
                    } else {
                        serde_yaml::Value::String(v)
                    };
                map.insert(key.into(), parsed);
            }
        }
        for key in LIST_KEYS {
            if let Some(v) = env(&format!("{ENV_PREFIX}{}", key.to_uppercase())) {
                let items: Vec<serde_yaml::Value> = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| serde_yaml::Value::String(s.into()))
                    .collect();
                map.insert(key.into(), serde_yaml::Value::Sequence(items));
            }
        }
        let mut cfg: PipelineConfig =
            serde_yaml::from_value(value).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Reads a config file with overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_yaml(&text, base, |k| std::env::var(k).ok())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.captures.iter_mut().for_each(fix);
        for p in [
            &mut self.rules,
            &mut self.profile,
            &mut self.entity_map,
            &mut self.apps,
            &mut self.statements,
            &mut self.segments,
            &mut self.policy_library,
            &mut self.psl,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for b in &mut self.blocklists {
            fix(&mut b.path);
        }
        for o in [&mut self.data_ontology, &mut self.entity_ontology]
            .into_iter()
            .flatten()
        {
            fix(&mut o.edges);
            if let Some(s) = &mut o.synonyms {
                fix(s);
            }
        }
        fix(&mut self.output_dir);
    }

    pub fn apply_mode(&mut self, mode: Mode) {
        if mode == Mode::ReferencePolicies {
            self.auto_include
                .extend(REFERENCE_POLICY_ENTITIES.iter().map(|s| s.to_string()));
        }
    }

    /// Every referenced input file must exist.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut paths: Vec<(&str, &Path)> = self.captures.iter().map(|p| ("captures", p.as_path())).collect();
        let named = [
            ("rules", &self.rules),
            ("profile", &self.profile),
            ("entity_map", &self.entity_map),
            ("apps", &self.apps),
            ("statements", &self.statements),
            ("segments", &self.segments),
            ("policy_library", &self.policy_library),
            ("psl", &self.psl),
        ];
        for (k, p) in named {
            if let Some(p) = p {
                paths.push((k, p));
            }
        }
        paths.extend(self.blocklists.iter().map(|b| ("blocklists", b.path.as_path())));
        for (k, o) in [
            ("data_ontology", &self.data_ontology),
            ("entity_ontology", &self.entity_ontology),
        ] {
            if let Some(o) = o {
                paths.push((k, &o.edges));
                if let Some(s) = &o.synonyms {
                    paths.push((k, s));
                }
            }
        }
        for (key, p) in paths {
            if !p.is_file() {
                return Err(PipelineError::Config(format!("{key}: {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

pub fn write_records<T: Serialize>(path: &Path, records: &[T], stage: &'static str) -> Result<(), PipelineError> {
    let f =
        std::fs::File::create(path).map_err(|e| PipelineError::failed(stage, format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| PipelineError::failed(stage, e))?;
        w.write_all(b"\n").map_err(|e| PipelineError::failed(stage, e))?;
    }
    w.flush().map_err(|e| PipelineError::failed(stage, e))
}

pub fn read_records<T: DeserializeOwned>(path: &Path, stage: &'static str) -> Result<Vec<T>, PipelineError> {
    let f = std::fs::File::open(path).map_err(|e| PipelineError::failed(stage, format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::failed(stage, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| PipelineError::parse(stage, format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub transactions: usize,
    pub missing_annotation: usize,
    pub non_tcp_packets: usize,
}

pub fn stage_ingest(cfg: &PipelineConfig) -> Result<(Vec<HttpTransaction>, IngestStats), PipelineError> {
    let mut txns = Vec::new();
    let mut stats = IngestStats::default();
    for path in &cfg.captures {
        let out = ingest::load_transactions(path, cfg.capture_format).map_err(PipelineError::ingest)?;
        if out.skipped() > 0 {
            log::warn!(
                "{}: {} packets without app annotation skipped",
                path.display(),
                out.skipped()
            );
        }
        stats.missing_annotation += out.skipped();
        stats.non_tcp_packets += out.non_tcp_packets;
        txns.extend(out.transactions);
    }
    stats.transactions = txns.len();
    Ok((txns, stats))
}

pub fn load_rules(cfg: &PipelineConfig) -> Result<RuleSet, PipelineError> {
    let specs = match &cfg.rules {
        Some(p) => extract::load_rules(p).map_err(PipelineError::extract)?,
        None => serde_yaml::from_str(BUNDLED_RULES).map_err(|e| PipelineError::parse("extract", e))?,
    };
    let profile = match &cfg.profile {
        Some(p) => extract::load_profile(p).map_err(PipelineError::extract)?,
        None => Default::default(),
    };
    RuleSet::compile(&extract::resolve_rules(&specs, &profile)).map_err(PipelineError::extract)
}

pub fn stage_extract(cfg: &PipelineConfig, txns: &[HttpTransaction]) -> Result<Vec<DataFlow>, PipelineError> {
    let rules = load_rules(cfg)?;
    let dets = extract::scan_all(txns, &rules);
    Ok(extract::flows_from_detections(&dets, txns))
}

pub fn load_metas(cfg: &PipelineConfig) -> Result<BTreeMap<String, AppMeta>, PipelineError> {
    match &cfg.apps {
        Some(p) => destination::load_app_meta(p).map_err(PipelineError::destination),
        None => Ok(BTreeMap::new()),
    }
}

pub fn build_labeler(cfg: &PipelineConfig) -> Result<Labeler, PipelineError> {
    let psl = match &cfg.psl {
        Some(p) => SuffixList::from_file(p, cfg.include_private_suffixes).map_err(PipelineError::destination)?,
        None => SuffixList::bundled(cfg.include_private_suffixes),
    };
    let entities = match &cfg.entity_map {
        Some(p) => EntityMap::load(p).map_err(PipelineError::destination)?,
        None => EntityMap::new(vec![]),
    };
    let cloud = cfg.cloud_suffixes.clone().map(CloudSuffixes).unwrap_or_default();
    let lists = cfg
        .blocklists
        .iter()
        .map(|b| Blocklist::load(&b.name, &b.path, b.format))
        .collect::<Result<Vec<_>, _>>()
        .map_err(PipelineError::destination)?;
    let mut labeler = Labeler::new(psl, entities, cloud, lists);
    if let Some(k) = &cfg.platform_keywords {
        labeler.platform_keywords = k.clone();
    }
    if let Some(n) = cfg.min_token_len {
        labeler.min_token_len = n;
    }
    Ok(labeler)
}

pub fn stage_label(cfg: &PipelineConfig, flows: &[DataFlow]) -> Result<Vec<DestinationLabel>, PipelineError> {
    let labeler = build_labeler(cfg)?;
    Ok(labeler.label_flows(flows, &load_metas(cfg)?))
}

pub fn load_ontologies(cfg: &PipelineConfig) -> Result<(Ontology, Ontology), PipelineError> {
    let load = |files: &Option<OntologyFiles>, kind| match files {
        Some(f) => {
            Ontology::load(kind, &f.edges, f.synonyms.as_deref()).map_err(|e| PipelineError::ontology("check", e))
        }
        None => Ok(match kind {
            OntologyKind::Data => ontology::bundled_data(),
            OntologyKind::Entity => ontology::bundled_entity(),
        }),
    };
    Ok((
        load(&cfg.data_ontology, OntologyKind::Data)?,
        load(&cfg.entity_ontology, OntologyKind::Entity)?,
    ))
}

pub fn stage_check(
    cfg: &PipelineConfig,
    flows: &[DataFlow],
    labels: &[DestinationLabel],
) -> Result<Vec<DisclosureVerdict>, PipelineError> {
    let (data_ont, entity_ont) = load_ontologies(cfg)?;
    let statements = match &cfg.statements {
        Some(p) => consistency::load_statements(p).map_err(PipelineError::consistency)?,
        None => vec![],
    };
    let library = match &cfg.policy_library {
        Some(p) => library_by_entity(consistency::load_statements(p).map_err(PipelineError::consistency)?),
        None => BTreeMap::new(),
    };
    let metas = load_metas(cfg)?;
    let policies = PolicySet::build(
        flows.iter().map(|f| f.app.as_str()),
        &statements,
        &metas,
        &library,
        &cfg.auto_include,
        &data_ont,
        &entity_ont,
    );
    if !policies.dropped.is_empty() {
        log::warn!("{} statements dropped for unresolved terms", policies.dropped.len());
    }
    consistency::check_flows(flows, labels, &policies, &data_ont, &entity_ont)
        .map_err(|e| PipelineError::ontology("check", e))
}

pub fn stage_purpose(cfg: &PipelineConfig, verdicts: &[DisclosureVerdict]) -> Result<Vec<PurposedFlow>, PipelineError> {
    let segments = match &cfg.segments {
        Some(p) => purpose::load_segments(p).map_err(PipelineError::purpose)?,
        None => vec![],
    };
    Ok(purpose::purposes_for(verdicts, &segments, cfg.first_match_only).0)
}

pub fn stage_report(
    flows: &[DataFlow],
    labels: &[DestinationLabel],
    verdicts: &[DisclosureVerdict],
    purposed: &[PurposedFlow],
) -> ReportBundle {
    aggregate_report(flows, labels, verdicts, purposed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ReportFormat {
    Csv,
    Md,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Md),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Md, ReportFormat::Json];

    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Csv => REPORT_CSV,
            ReportFormat::Md => REPORT_MD,
            ReportFormat::Json => HISTOGRAM_FILE,
        }
    }

    pub fn render(self, bundle: &ReportBundle) -> &str {
        match self {
            ReportFormat::Csv => &bundle.csv,
            ReportFormat::Md => &bundle.markdown,
            ReportFormat::Json => &bundle.histogram,
        }
    }
}

pub fn write_report(dir: &Path, bundle: &ReportBundle, formats: &[ReportFormat]) -> Result<(), PipelineError> {
    for f in formats {
        let path = dir.join(f.file_name());
        std::fs::write(&path, f.render(bundle))
            .map_err(|e| PipelineError::failed("report", format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::Config(format!("output_dir {}: {e}", dir.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub ingest: IngestStats,
    pub flows: usize,
    pub labels: usize,
    pub totals: ConsistencyTotals,
    pub purpose_records: usize,
}

/// All stages in memory, writing every artifact to `cfg.output_dir`.
pub fn run_pipeline(cfg: &PipelineConfig, formats: &[ReportFormat]) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    ensure_dir(out)?;
    let (txns, ingest) = stage_ingest(cfg)?;
    write_records(&out.join(TRANSACTIONS_FILE), &txns, "ingest")?;
    let flows = stage_extract(cfg, &txns)?;
    write_records(&out.join(FLOWS_FILE), &flows, "extract")?;
    let labels = stage_label(cfg, &flows)?;
    write_records(&out.join(LABELS_FILE), &labels, "label")?;
    let verdicts = stage_check(cfg, &flows, &labels)?;
    write_records(&out.join(VERDICTS_FILE), &verdicts, "check")?;
    let purposed = stage_purpose(cfg, &verdicts)?;
    write_records(&out.join(PURPOSES_FILE), &purposed, "purpose")?;
    let bundle = stage_report(&flows, &labels, &verdicts, &purposed);
    write_report(out, &bundle, formats)?;
    Ok(RunSummary {
        ingest,
        flows: flows.len(),
        labels: labels.len(),
        totals: summarize(&verdicts),
        purpose_records: purposed.len(),
    })
}

/// Reads transactions written by the ingest stage.
pub fn read_transactions(path: &Path) -> Result<Vec<HttpTransaction>, PipelineError> {
    ingest::load_transactions(path, Some(CaptureFormat::Jsonl))
        .map(|o| o.transactions)
        .map_err(PipelineError::ingest)
}
