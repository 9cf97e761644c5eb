//! Experiment configuration and the staged netgen → expert → train → eval run.
//!
//! Every stage records an input hash and the digests of the files it wrote
//! in `manifest.json`. A stage is skipped when its input hash is unchanged
//! and its outputs exist. Inputs are digest-checked against the manifest
//! before use, so an artifact edited on disk is reported rather than
//! silently regenerated.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{make_schedule, sample_policies, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::eval::{
    compare, metrics, nearest_rank_percentile, rollout, slice_csv, ComparisonTable, GdmMode, MetricSummary,
    PolicySource, RolloutReport, RolloutSeeds,
};
use crate::expert::{run_expert, ExpertConfig};
use crate::gnn::GnnConfig;
use crate::netgen::{build_gso, generate_network, Gso, NetworkConfig, NetworkState};
use crate::seed::{derive_seed, sha256_hex};
use crate::store::{file_digest, read_buffers_for, read_dataset, write_json, BufferSet, Dataset, NetworkRecord, Split};
use crate::trainer::{trace_csv, train, Checkpoint, TrainConfig, TrainGraph, TrainOutcome, ValGraph};

pub const NETWORKS_FILE: &str = "networks.json";
pub const BUFFERS_FILE: &str = "buffers.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const COMPARISON_CSV: &str = "eval/comparison.csv";
pub const COMPARISON_JSON: &str = "eval/comparison.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ERROR_FILE: &str = "error.json";

pub const STAGES: [&str; 4] = ["netgen", "expert", "train", "eval"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// Floors the train and validation shares; the remainder goes to test.
    pub fn from_ratio(total: usize, ratio: [usize; 3]) -> Result<Self> {
        let parts: usize = ratio.iter().sum();
        if parts == 0 {
            return Err(Error::InvalidConfig("split ratio must have a positive part".into()));
        }
        let train = total * ratio[0] / parts;
        let val = total * ratio[1] / parts;
        let counts = Self {
            train,
            val,
            test: total.saturating_sub(train + val),
        };
        counts.validate()?;
        Ok(counts)
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::InvalidConfig("every split needs at least one network".into()));
        }
        Ok(())
    }

    /// Networks are numbered train first, then validation, then test.
    pub fn assignment(&self, network_id: usize) -> Split {
        if network_id < self.train {
            Split::Train
        } else if network_id < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Sets `f_min` from full-power ergodic rates on the training networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub percentile: f64,
    pub fading_draws: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub steps: usize,
    pub horizons: Vec<usize>,
    pub gdm_mode: GdmMode,
    pub expert_uniform_resample: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            horizons: vec![20, 200],
            gdm_mode: GdmMode::PerStep,
            expert_uniform_resample: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub network: NetworkConfig,
    pub calibration: Option<Calibration>,
    pub expert: ExpertConfig,
    pub gnn: GnnConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub split: SplitCounts,
}

const DESK_PRESET: &str = include_str!("../presets/desk.json");
const FULL_PRESET: &str = include_str!("../presets/full.json");

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Self::from_json(DESK_PRESET),
            "full" => Self::from_json(FULL_PRESET),
            other => Err(Error::InvalidConfig(format!("unknown preset {other}"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A preset name or a path to a JSON file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if matches!(name_or_path, "desk" | "full") {
            return Self::preset(name_or_path);
        }
        let text = std::fs::read_to_string(name_or_path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {name_or_path}: {e}")))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.expert.validate()?;
        self.gnn.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        make_schedule(self.schedule.kind, self.schedule.steps)?;
        if let Some(c) = &self.calibration {
            if !(c.percentile > 0.0 && c.percentile <= 100.0) || c.fading_draws == 0 {
                return Err(Error::InvalidConfig(
                    "calibration needs a percentile in (0, 100] and draws".into(),
                ));
            }
        }
        let e = &self.eval;
        if e.steps == 0 || e.horizons.is_empty() || e.horizons.iter().any(|&h| h == 0 || h > e.steps) {
            return Err(Error::InvalidConfig("evaluation horizons must lie in 1..=steps".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.schedule.kind, self.schedule.steps)
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))
}

/// Nearest-rank percentile of pooled full-power ergodic rates.
pub fn calibrate_f_min(
    states: &[(usize, &NetworkState)],
    network: &NetworkConfig,
    cal: &Calibration,
    seed: u64,
) -> Result<f64> {
    let mut pooled = Vec::new();
    for &(id, state) in states {
        let seeds = RolloutSeeds {
            fading: derive_seed(seed, "calibrate", id as u64),
            policy: 0,
        };
        let r = rollout(&PolicySource::FullPower, state, id, network, cal.fading_draws, seeds)?;
        pooled.extend_from_slice(r.running_at(cal.fading_draws));
    }
    if pooled.is_empty() {
        return Err(Error::Contract("calibration needs at least one network".into()));
    }
    Ok(nearest_rank_percentile(&pooled, cal.percentile))
}

pub fn run_netgen(cfg: &ExperimentConfig, jobs: usize) -> Result<Dataset> {
    let total = cfg.split.total();
    let networks = pool(jobs)?.install(|| {
        (0..total)
            .into_par_iter()
            .map(|id| {
                let seed = derive_seed(cfg.seed, "netgen", id as u64);
                Ok(NetworkRecord {
                    network_id: id,
                    split: cfg.split.assignment(id),
                    seed,
                    state: generate_network(&cfg.network, seed)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut network = cfg.network.clone();
    if let Some(cal) = &cfg.calibration {
        let train: Vec<(usize, &NetworkState)> = networks
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| (r.network_id, &r.state))
            .collect();
        network.f_min = calibrate_f_min(&train, &cfg.network, cal, cfg.seed)?;
    }
    Ok(Dataset::new(network, networks))
}

pub fn run_expert_stage(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    dataset_digest: &str,
    jobs: usize,
) -> Result<BufferSet> {
    let buffers = pool(jobs)?.install(|| {
        dataset
            .networks
            .par_iter()
            .map(|r| {
                let seed = derive_seed(cfg.seed, "expert", r.network_id as u64);
                run_expert(&r.state, r.network_id, &cfg.expert, &dataset.network, seed)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(BufferSet::new(dataset_digest.to_string(), buffers))
}

fn gsos(dataset: &Dataset, split: Split) -> Result<Vec<(usize, Gso)>> {
    dataset
        .split(split)
        .map(|r| Ok((r.network_id, build_gso(&r.state, &dataset.network)?)))
        .collect()
}

pub fn run_train_stage(cfg: &ExperimentConfig, dataset: &Dataset, buffers: &BufferSet) -> Result<TrainOutcome> {
    let train_gsos = gsos(dataset, Split::Train)?;
    let train_set = train_gsos
        .iter()
        .map(|(id, gso)| {
            Ok(TrainGraph {
                gso,
                buffer: buffers.require(*id)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let val: Vec<ValGraph<'_>> = dataset
        .split(Split::Val)
        .map(|r| ValGraph {
            network_id: r.network_id,
            state: &r.state,
        })
        .collect();
    train(
        &train_set,
        &val,
        &cfg.gnn,
        &cfg.schedule()?,
        &cfg.train,
        &dataset.network,
        derive_seed(cfg.seed, "train", 0),
    )
}

pub const SOURCES: [&str; 4] = ["gdm", "expert", "average_power", "full_power"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub source: String,
    pub summary: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub steps: usize,
    pub network_ids: Vec<usize>,
    pub table: ComparisonTable,
    pub trajectories: Vec<SourceSummary>,
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub summary: EvalSummary,
    /// Grouped by source in `SOURCES` order, networks ascending within each.
    pub reports: Vec<RolloutReport>,
}

/// Fading and policy seeds shared by every source on one test network.
pub fn eval_seeds(master: u64, network_id: usize) -> RolloutSeeds {
    RolloutSeeds {
        fading: derive_seed(master, "eval/fading", network_id as u64),
        policy: derive_seed(master, "eval/policy", network_id as u64),
    }
}

pub fn run_eval_stage(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    buffers: &BufferSet,
    checkpoint: &Checkpoint,
    jobs: usize,
) -> Result<EvalOutput> {
    let schedule = checkpoint.schedule()?;
    let test: Vec<&NetworkRecord> = dataset.split(Split::Test).collect();
    let tasks: Vec<(usize, &NetworkRecord)> = (0..SOURCES.len())
        .flat_map(|s| test.iter().map(move |r| (s, *r)))
        .collect();
    let e = &cfg.eval;
    let reports = pool(jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|&(s, r)| {
                let buffer = buffers.require(r.network_id)?;
                let source = match SOURCES[s] {
                    "gdm" => PolicySource::Gdm {
                        params: &checkpoint.params,
                        schedule: &schedule,
                        mode: e.gdm_mode,
                    },
                    "expert" => PolicySource::ExpertReplay {
                        buffer,
                        uniform_resample: e.expert_uniform_resample,
                    },
                    "average_power" => PolicySource::average_power(buffer),
                    _ => PolicySource::FullPower,
                };
                rollout(
                    &source,
                    &r.state,
                    r.network_id,
                    &dataset.network,
                    e.steps,
                    eval_seeds(cfg.seed, r.network_id),
                )
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let groups: Vec<(&str, &[RolloutReport])> = SOURCES
        .iter()
        .zip(reports.chunks(test.len()))
        .map(|(s, c)| (*s, c))
        .collect();
    let f_min = dataset.network.f_min;
    let table = compare(&groups, f_min, &e.horizons)?;
    let trajectories = groups
        .iter()
        .map(|(s, c)| {
            Ok(SourceSummary {
                source: s.to_string(),
                summary: metrics(c, f_min, &e.horizons)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalOutput {
        summary: EvalSummary {
            steps: e.steps,
            network_ids: test.iter().map(|r| r.network_id).collect(),
            table,
            trajectories,
        },
        reports,
    })
}

/// Writes the comparison files and per-rollout CSVs; returns digests keyed by relative path.
pub fn write_eval(out: &Path, eval: &EvalOutput) -> Result<BTreeMap<String, String>> {
    std::fs::create_dir_all(out.join("eval/rollouts"))?;
    let mut digests = BTreeMap::new();
    let mut put = |rel: String, text: String| -> Result<()> {
        std::fs::write(out.join(&rel), &text)?;
        digests.insert(rel, sha256_hex(text.as_bytes()));
        Ok(())
    };
    put(COMPARISON_CSV.into(), eval.summary.table.to_csv())?;
    let mut json = serde_json::to_string_pretty(&eval.summary)?;
    json.push('\n');
    put(COMPARISON_JSON.into(), json)?;
    for r in &eval.reports {
        put(format!("eval/rollouts/{}_{}.csv", r.network_id, r.source), r.to_csv())?;
    }
    Ok(digests)
}

/// Scatter data for the node pairs of one network: expert buffer rows
/// against `samples` fresh GDM draws.
pub fn slice(
    dataset: &Dataset,
    buffers: &BufferSet,
    checkpoint: &Checkpoint,
    network_id: usize,
    pairs: &[(usize, usize)],
    samples: usize,
    seed: u64,
) -> Result<String> {
    let record = dataset
        .get(network_id)
        .ok_or_else(|| Error::Contract(format!("no network {network_id} in dataset")))?;
    let gso = build_gso(&record.state, &dataset.network)?;
    let seeds: Vec<u64> = (0..samples as u64).map(|s| derive_seed(seed, "slice", s)).collect();
    let generated = sample_policies(
        &gso,
        &checkpoint.params,
        &checkpoint.schedule()?,
        dataset.network.p_max,
        &seeds,
    )?;
    slice_csv(buffers.require(network_id)?, &generated, pairs, dataset.network.p_max)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub input_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Relative path → SHA-256 of the file as written.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub master_seed: u64,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            format: "diffalloc.manifest".into(),
            version: 1,
            config_hash: cfg.hash(),
            master_seed: cfg.seed,
            stages: Vec::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Digest of `rel` as recorded by whichever stage produced it.
    fn recorded_digest(&self, rel: &str) -> Option<&str> {
        self.stages.iter().find_map(|s| s.outputs.get(rel).map(String::as_str))
    }

    fn upsert(&mut self, record: StageRecord) {
        match self.stages.iter_mut().find(|s| s.name == record.name) {
            Some(s) => *s = record,
            None => self.stages.push(record),
        }
        let order = |n: &str| STAGES.iter().position(|s| *s == n).unwrap_or(usize::MAX);
        self.stages.sort_by_key(|s| order(&s.name));
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineOutcome {
    pub manifest: Manifest,
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
}

/// Machine-readable failure record written next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub stage: String,
    pub kind: String,
    pub exit_code: i32,
    pub message: String,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    jobs: usize,
    manifest: Manifest,
    ran: Vec<String>,
    skipped: Vec<String>,
}

fn section_hash<T: Serialize>(stage: &str, seed: u64, section: &T, inputs: &[&str]) -> String {
    let text = serde_json::to_string(&(stage, seed, section, inputs)).expect("stage inputs serialize");
    sha256_hex(text.as_bytes())
}

impl Runner<'_> {
    /// Checks that `rel` matches the digest recorded for it and returns that digest.
    fn verify_input(&self, stage: &str, rel: &str) -> Result<String> {
        let expected = self
            .manifest
            .recorded_digest(rel)
            .ok_or_else(|| Error::Integrity(format!("{stage}: no recorded digest for {rel}")))?;
        let path = self.out.join(rel);
        let actual = file_digest(&path).map_err(|e| Error::Integrity(format!("{stage}: cannot read {rel}: {e}")))?;
        if actual != expected {
            return Err(Error::Integrity(format!(
                "{stage}: digest mismatch for {rel} (recorded {expected}, found {actual})"
            )));
        }
        Ok(actual)
    }

    fn can_skip(&self, stage: &str, input_hash: &str) -> bool {
        self.manifest
            .stage(stage)
            .is_some_and(|r| r.input_hash == input_hash && r.outputs.keys().all(|rel| self.out.join(rel).is_file()))
    }

    fn finish(&mut self, record: StageRecord) -> Result<()> {
        self.ran.push(record.name.clone());
        self.manifest.upsert(record);
        write_json(&self.out.join(MANIFEST_FILE), &self.manifest)?;
        Ok(())
    }

    fn stage<F>(&mut self, name: &str, input_hash: String, run: F) -> Result<()>
    where
        F: FnOnce(&Self) -> Result<(BTreeMap<String, u64>, BTreeMap<String, String>)>,
    {
        if self.can_skip(name, &input_hash) {
            self.skipped.push(name.to_string());
            return Ok(());
        }
        let (seeds, outputs) = run(self)?;
        self.finish(StageRecord {
            name: name.to_string(),
            input_hash,
            seeds,
            outputs,
        })
    }

    fn run_all(&mut self) -> std::result::Result<(), (String, Error)> {
        let cfg = self.cfg;
        fn at(stage: &str) -> impl FnOnce(Error) -> (String, Error) + '_ {
            move |e| (stage.to_string(), e)
        }

        let h = section_hash("netgen", cfg.seed, &(&cfg.network, &cfg.calibration, &cfg.split), &[]);
        self.stage("netgen", h, |r| {
            let dataset = run_netgen(cfg, r.jobs)?;
            let digest = write_json(&r.out.join(NETWORKS_FILE), &dataset)?;
            let seeds = dataset
                .networks
                .iter()
                .map(|n| (format!("network/{}", n.network_id), n.seed))
                .collect();
            Ok((seeds, BTreeMap::from([(NETWORKS_FILE.to_string(), digest)])))
        })
        .map_err(at("netgen"))?;

        let networks = self.verify_input("expert", NETWORKS_FILE).map_err(at("expert"))?;
        let h = section_hash("expert", cfg.seed, &cfg.expert, &[&networks]);
        self.stage("expert", h, |r| {
            let dataset = read_dataset(&r.out.join(NETWORKS_FILE))?;
            let buffers = run_expert_stage(cfg, &dataset, &networks, r.jobs)?;
            let digest = write_json(&r.out.join(BUFFERS_FILE), &buffers)?;
            let seeds = dataset
                .networks
                .iter()
                .map(|n| {
                    (
                        format!("network/{}", n.network_id),
                        derive_seed(cfg.seed, "expert", n.network_id as u64),
                    )
                })
                .collect();
            Ok((seeds, BTreeMap::from([(BUFFERS_FILE.to_string(), digest)])))
        })
        .map_err(at("expert"))?;

        let networks = self.verify_input("train", NETWORKS_FILE).map_err(at("train"))?;
        let buffers = self.verify_input("train", BUFFERS_FILE).map_err(at("train"))?;
        let h = section_hash(
            "train",
            cfg.seed,
            &(&cfg.gnn, &cfg.schedule, &cfg.train),
            &[&networks, &buffers],
        );
        self.stage("train", h, |r| {
            let dataset = read_dataset(&r.out.join(NETWORKS_FILE))?;
            let buffer_set = read_buffers_for(&r.out.join(BUFFERS_FILE), &r.out.join(NETWORKS_FILE))?;
            let outcome = run_train_stage(cfg, &dataset, &buffer_set)?;
            if let Some(reason) = &outcome.diverged {
                // keep the last good checkpoint on disk before failing the stage
                outcome.best.save(&r.out.join(CHECKPOINT_FILE))?;
                return Err(Error::Numerical(format!("training diverged at {reason}")));
            }
            let ckpt = write_json(&r.out.join(CHECKPOINT_FILE), &outcome.best)?;
            let trace = trace_csv(&outcome.trace);
            std::fs::write(r.out.join(TRACE_FILE), &trace)?;
            let seeds = BTreeMap::from([("train".to_string(), derive_seed(cfg.seed, "train", 0))]);
            let outputs = BTreeMap::from([
                (CHECKPOINT_FILE.to_string(), ckpt),
                (TRACE_FILE.to_string(), sha256_hex(trace.as_bytes())),
            ]);
            Ok((seeds, outputs))
        })
        .map_err(at("train"))?;

        let inputs = [NETWORKS_FILE, BUFFERS_FILE, CHECKPOINT_FILE]
            .iter()
            .map(|f| self.verify_input("eval", f))
            .collect::<Result<Vec<_>>>()
            .map_err(at("eval"))?;
        let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        let h = section_hash("eval", cfg.seed, &cfg.eval, &refs);
        self.stage("eval", h, |r| {
            let dataset = read_dataset(&r.out.join(NETWORKS_FILE))?;
            let buffer_set = read_buffers_for(&r.out.join(BUFFERS_FILE), &r.out.join(NETWORKS_FILE))?;
            let checkpoint = Checkpoint::load(&r.out.join(CHECKPOINT_FILE))?;
            let eval = run_eval_stage(cfg, &dataset, &buffer_set, &checkpoint, r.jobs)?;
            let outputs = write_eval(&r.out, &eval)?;
            let mut seeds = BTreeMap::new();
            for id in &eval.summary.network_ids {
                let s = eval_seeds(cfg.seed, *id);
                seeds.insert(format!("fading/{id}"), s.fading);
                seeds.insert(format!("policy/{id}"), s.policy);
            }
            Ok((seeds, outputs))
        })
        .map_err(at("eval"))?;
        Ok(())
    }
}

/// Runs every stage into `out`, reusing up-to-date artifacts.
///
/// On failure an `error.json` record is written and completed stages stay
/// on disk and in the manifest.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<PipelineOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let manifest_path = out.join(MANIFEST_FILE);
    let manifest = match std::fs::read_to_string(&manifest_path) {
        Ok(text) => {
            let m: Manifest = serde_json::from_str(&text)?;
            if m.config_hash == cfg.hash() {
                m
            } else {
                // stage input hashes decide what reruns; only the header is refreshed
                Manifest {
                    config_hash: cfg.hash(),
                    master_seed: cfg.seed,
                    ..m
                }
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Manifest::new(cfg),
        Err(e) => return Err(e.into()),
    };
    let mut runner = Runner {
        cfg,
        out: out.to_path_buf(),
        jobs,
        manifest,
        ran: Vec::new(),
        skipped: Vec::new(),
    };
    let error_path = out.join(ERROR_FILE);
    match runner.run_all() {
        Ok(()) => {
            if error_path.exists() {
                std::fs::remove_file(&error_path)?;
            }
            write_json(&manifest_path, &runner.manifest)?;
            Ok(PipelineOutcome {
                manifest: runner.manifest,
                ran: runner.ran,
                skipped: runner.skipped,
            })
        }
        Err((stage, e)) => {
            let record = ErrorRecord {
                stage,
                kind: e.kind().to_string(),
                exit_code: e.exit_code(),
                message: e.to_string(),
            };
            write_json(&error_path, &record)?;
            Err(e)
        }
    }
}
