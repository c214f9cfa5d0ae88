//! Experiment configuration files, prepared datasets and run directories.
//!
//! A TOML config fully determines an experiment. Unknown keys are rejected at
//! every level. Relative paths inside a config are resolved against the
//! directory holding the config file.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! prepared/manifest.json   vocabulary, histograms, shard summaries
//! prepared/train.jsonl     encoded training samples
//! prepared/test.jsonl      encoded test samples
//! prepared/shards.jsonl    {"client_id", "sample_id"} assignments
//! prepared/raw.jsonl       generated corpus (synthetic source only)
//! run/                     federated run: trace.jsonl, report.{json,csv,txt}, checkpoints/
//! baseline/                isolated client: report.{json,csv,txt}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{self, Dataset, EncodedSample, RawForm, Vocab};
use crate::error::{Error, Result};
use crate::federation::{run_federation, ClientData, FederationConfig, FederationOutcome};
use crate::metrics::{compare, independent_baseline, ComparisonTable, EvaluationReport};
use crate::partition::{self, PartitionSpec};
use crate::peft::{attach, SchemeSpec};
use crate::refmodel::{init, ModelConfig, ParamSet};
use crate::synth::{self, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Line-delimited JSON inputs, concatenated in order.
    pub paths: Vec<PathBuf>,
    pub raw_form: RawForm,
    /// Generate the corpus instead of reading `paths`.
    pub synthetic: Option<SynthConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            paths: Vec::new(),
            raw_form: RawForm::SourceCode,
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Token ids kept per sample (head of the sequence).
    pub max_len: usize,
    pub vocab_max_size: usize,
    /// Vulnerable categories with fewer samples are dropped.
    pub min_count: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            max_len: 256,
            vocab_max_size: 5000,
            min_count: 100,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Model shape; the vocabulary size comes from the prepared vocabulary and
/// the sequence length from the corpus section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 16,
            n_blocks: 1,
            hidden_dim: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// The client whose shard trains the isolated model.
    pub client: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub corpus: CorpusConfig,
    pub partition: PartitionSpec,
    pub model: ModelSection,
    pub scheme: SchemeSpec,
    pub federation: FederationConfig,
    pub baseline: BaselineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            corpus: CorpusConfig::default(),
            partition: PartitionSpec::default(),
            model: ModelSection::default(),
            scheme: SchemeSpec::default(),
            federation: FederationConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for p in &mut cfg.data.paths {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base_dir.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.synthetic, self.data.paths.is_empty()) {
            (Some(s), true) => s.validate()?,
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::Config(
                    "data: give either paths or synthetic, not both".into(),
                ))
            }
            (None, true) => {
                return Err(Error::Config(
                    "data: no input paths and no synthetic corpus".into(),
                ))
            }
        }
        let c = &self.corpus;
        if c.max_len == 0 {
            return Err(Error::Config("corpus.max_len must be at least 1".into()));
        }
        if c.vocab_max_size < 3 {
            return Err(Error::Config(
                "corpus.vocab_max_size must be at least 3".into(),
            ));
        }
        if !(c.train_fraction > 0.0 && c.train_fraction < 1.0) {
            return Err(Error::Config(
                "corpus.train_fraction must lie in (0, 1)".into(),
            ));
        }
        self.partition.validate()?;
        self.scheme.validate()?;
        self.federation.validate()?;
        self.model_config(3).validate()?;
        if self.federation.n_clients != self.partition.n_clients {
            return Err(Error::Config(format!(
                "federation.n_clients = {} but partition.n_clients = {}",
                self.federation.n_clients, self.partition.n_clients
            )));
        }
        if self.baseline.client >= self.partition.n_clients {
            return Err(Error::Config(format!(
                "baseline.client {} is not a client id",
                self.baseline.client
            )));
        }
        Ok(())
    }

    /// Replace every experiment seed (split, partition, model, adapters,
    /// federation) with `seed`. A synthetic corpus keeps its own seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.partition.seed = seed;
        self.model.seed = seed;
        self.scheme.seed = seed;
        self.federation.seed = seed;
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.model.embed_dim,
            n_blocks: self.model.n_blocks,
            hidden_dim: self.model.hidden_dim,
            n_classes: 2,
            max_len: self.corpus.max_len,
            seed: self.model.seed,
        }
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.output_dir.join("prepared")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join("run")
    }

    pub fn baseline_dir(&self) -> PathBuf {
        self.output_dir.join("baseline")
    }

    /// Initialised model with the configured scheme attached.
    pub fn initial_model(&self, vocab_size: usize) -> Result<ParamSet> {
        attach(&self.scheme, &init(&self.model_config(vocab_size))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardSummary {
    pub client_id: usize,
    pub n_samples: usize,
    pub histogram: BTreeMap<String, usize>,
}

/// Everything needed to check that a prepared dataset matches a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub data: DataConfig,
    pub corpus: CorpusConfig,
    pub partition: PartitionSpec,
    pub n_loaded: usize,
    pub n_cleaned: usize,
    pub loaded_histogram: BTreeMap<String, usize>,
    pub train_histogram: BTreeMap<String, usize>,
    pub test_histogram: BTreeMap<String, usize>,
    pub shards: Vec<ShardSummary>,
    pub heterogeneity: f64,
    pub vocab: Vec<String>,
}

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub manifest: Manifest,
    pub vocab: Vocab,
    pub train: Vec<EncodedSample>,
    pub test: Vec<EncodedSample>,
    pub clients: Vec<ClientData>,
}

fn load_inputs(cfg: &ExperimentConfig, raw_dir: Option<&Path>) -> Result<Dataset> {
    if let Some(s) = &cfg.data.synthetic {
        let mut bytes = Vec::new();
        synth::write_jsonl(&synth::generate(s)?, &mut bytes).expect("writing to memory");
        let name = Path::new("raw.jsonl");
        if let Some(dir) = raw_dir {
            let path = dir.join(name);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        }
        return corpus::read_jsonl(bytes.as_slice(), name, cfg.data.raw_form);
    }
    let mut samples = Vec::new();
    for p in &cfg.data.paths {
        samples.extend(corpus::load_jsonl(p, cfg.data.raw_form)?.samples);
    }
    Ok(Dataset::new(samples))
}

fn build_prepared(cfg: &ExperimentConfig, loaded: Dataset) -> Result<Prepared> {
    let cleaned = corpus::clean_min_count(&loaded, cfg.corpus.min_count);
    let (train, test) =
        corpus::split_train_test(&cleaned, cfg.corpus.train_fraction, cfg.corpus.seed)?;
    if test.is_empty() {
        return Err(Error::Input("the test split is empty".into()));
    }
    let vocab = corpus::build_vocab(&train, cfg.corpus.vocab_max_size)?;
    let shards = partition::partition(&train, &cfg.partition)?;
    let train_enc = train.encode(&vocab, cfg.corpus.max_len);
    let test_enc = test.encode(&vocab, cfg.corpus.max_len);
    let clients = shards
        .iter()
        .map(|s| ClientData {
            client_id: s.client_id,
            samples: s.members.iter().map(|&i| train_enc[i].clone()).collect(),
        })
        .collect();
    let train_histogram = train.label_histogram();
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        data: cfg.data.clone(),
        corpus: cfg.corpus.clone(),
        partition: cfg.partition.clone(),
        n_loaded: loaded.len(),
        n_cleaned: cleaned.len(),
        loaded_histogram: loaded.label_histogram(),
        heterogeneity: partition::chi_square_heterogeneity(&shards, &train_histogram),
        train_histogram,
        test_histogram: test.label_histogram(),
        shards: shards
            .iter()
            .map(|s| ShardSummary {
                client_id: s.client_id,
                n_samples: s.len(),
                histogram: s.label_histogram.clone(),
            })
            .collect(),
        vocab: vocab.tokens().to_vec(),
    };
    Ok(Prepared {
        manifest,
        vocab,
        train: train_enc,
        test: test_enc,
        clients,
    })
}

/// Load, clean, split, build the vocabulary and partition, in memory.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    build_prepared(cfg, load_inputs(cfg, None)?)
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_with(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
    })
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_with(path, |w| {
        for item in items {
            serde_json::to_writer(&mut *w, item)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Prepare and write the dataset under `cfg.prepared_dir()`.
pub fn prepare_to_disk(cfg: &ExperimentConfig) -> Result<Prepared> {
    let dir = cfg.prepared_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let prepared = build_prepared(cfg, load_inputs(cfg, Some(&dir))?)?;
    write_json(&dir.join("manifest.json"), &prepared.manifest)?;
    write_lines(&dir.join("train.jsonl"), &prepared.train)?;
    write_lines(&dir.join("test.jsonl"), &prepared.test)?;
    let shards: Vec<partition::ClientShard> = prepared
        .clients
        .iter()
        .map(|c| partition::ClientShard {
            client_id: c.client_id,
            members: Vec::new(),
            sample_ids: c.samples.iter().map(|s| s.sample_id.clone()).collect(),
            label_histogram: BTreeMap::new(),
        })
        .collect();
    write_with(&dir.join("shards.jsonl"), |w| {
        partition::write_shard_manifest(&shards, w)
    })?;
    Ok(prepared)
}

#[derive(Deserialize)]
struct ShardLine {
    client_id: usize,
    sample_id: String,
}

/// Read a prepared dataset and check it was produced by the same data,
/// corpus and partition settings as `cfg`.
pub fn load_prepared(cfg: &ExperimentConfig) -> Result<Prepared> {
    let dir = cfg.prepared_dir();
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Format {
            path: dir.join("manifest.json"),
            message: format!("unsupported manifest version {}", manifest.format_version),
        });
    }
    if manifest.data != cfg.data
        || manifest.corpus != cfg.corpus
        || manifest.partition != cfg.partition
    {
        return Err(Error::Config(format!(
            "{} was prepared with different data, corpus or partition settings; rerun prepare",
            dir.display()
        )));
    }
    let vocab = Vocab::from_tokens(manifest.vocab.clone(), cfg.corpus.vocab_max_size)?;
    let train: Vec<EncodedSample> = read_lines(&dir.join("train.jsonl"))?;
    let test: Vec<EncodedSample> = read_lines(&dir.join("test.jsonl"))?;
    let by_id: HashMap<&str, &EncodedSample> =
        train.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut clients: Vec<ClientData> = (0..cfg.partition.n_clients)
        .map(|client_id| ClientData {
            client_id,
            samples: Vec::new(),
        })
        .collect();
    let shard_path = dir.join("shards.jsonl");
    for line in read_lines::<ShardLine>(&shard_path)? {
        let sample = by_id
            .get(line.sample_id.as_str())
            .ok_or_else(|| Error::Format {
                path: shard_path.clone(),
                message: format!("unknown sample {}", line.sample_id),
            })?;
        let client = clients
            .get_mut(line.client_id)
            .ok_or_else(|| Error::Format {
                path: shard_path.clone(),
                message: format!("unknown client {}", line.client_id),
            })?;
        client.samples.push((*sample).clone());
    }
    Ok(Prepared {
        manifest,
        vocab,
        train,
        test,
        clients,
    })
}

/// Run the configured federation on a prepared dataset.
pub fn run(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    checkpoint_dir: Option<&Path>,
) -> Result<FederationOutcome> {
    let initial = cfg.initial_model(prepared.vocab.size())?;
    run_federation(
        &cfg.federation,
        &initial,
        &prepared.clients,
        &prepared.test,
        checkpoint_dir,
    )
}

/// Train the configured baseline client alone.
pub fn baseline(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<EvaluationReport> {
    baseline_for(cfg, prepared, cfg.baseline.client)
}

pub fn baseline_for(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    client: usize,
) -> Result<EvaluationReport> {
    let initial = cfg.initial_model(prepared.vocab.size())?;
    let data = prepared
        .clients
        .get(client)
        .ok_or_else(|| Error::Config(format!("no client {client}")))?;
    independent_baseline(
        client,
        &data.samples,
        &initial,
        &cfg.federation,
        &prepared.test,
    )
}

/// Write `report.json`, `report.csv` and `report.txt` into `dir`.
pub fn write_report(dir: &Path, report: &EvaluationReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("report.json"), report)?;
    let csv_path = dir.join("report.csv");
    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    report.write_csv(BufWriter::new(file))?;
    let txt = dir.join("report.txt");
    fs::write(&txt, report.to_text()).map_err(|e| Error::io(&txt, e))
}

pub fn read_report(dir: &Path) -> Result<EvaluationReport> {
    read_json(&dir.join("report.json"))
}

/// Prepare-free run: write trace, report and checkpoints into `dir`.
pub fn run_to_disk(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    dir: &Path,
) -> Result<FederationOutcome> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ckpt = dir.join("checkpoints");
    let ckpt_dir = if cfg.federation.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        Some(ckpt.as_path())
    } else {
        None
    };
    let outcome = run(cfg, prepared, ckpt_dir)?;
    write_lines(&dir.join("trace.jsonl"), &outcome.trace)?;
    write_report(dir, &outcome.report)?;
    Ok(outcome)
}

/// Compare two report directories and write `comparison.csv` and
/// `comparison.txt` into `out`.
pub fn compare_dirs(federated: &Path, independent: &Path, out: &Path) -> Result<ComparisonTable> {
    let fed = read_report(federated)?;
    let ind = read_report(independent)?;
    let table = compare(&ind, &fed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv_path = out.join("comparison.csv");
    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    table.write_csv(BufWriter::new(file))?;
    let txt = out.join("comparison.txt");
    fs::write(&txt, table.to_text()).map_err(|e| Error::io(&txt, e))?;
    Ok(table)
}
