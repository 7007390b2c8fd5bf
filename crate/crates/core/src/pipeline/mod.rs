//! Stage orchestration. Every stage reads its inputs from the run directory
//! and writes its outputs there, so stages can be rerun independently.
//!
//! Random streams are derived from `(seed, label)` per stage and per domain,
//! which keeps artifacts identical whether experts train sequentially or in
//! parallel.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::experts::{merge_experts, pretrain_base, train_expert_from, ExpertSet, ExpertTraining, MERGED_LABEL};
use crate::metrics::MetricsReport;
use crate::promptbank::{self, filter_bank, generate_prompts, PromptGrammar, PromptRecord};
use crate::rng::SeededRng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ScheduleSpec};
pub use config::PipelineConfig;
pub use eval::{evaluate, plot_data_csv};
pub use synth::{resolve_mixtures, synth_dataset, Mixture, MixtureSpec, SynthPair};

/// Label of the base pretraining loss log.
pub const PRETRAIN_LOG: &str = "pretrain";

/// Writes `bytes` to `path.partial`, then renames it over `path`. A failed
/// write leaves only the `.partial` file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut partial = path.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    let mut f = fs::File::create(&partial).map_err(|e| Error::io(&partial, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&partial, e))?;
    f.sync_all().map_err(|e| Error::io(&partial, e))?;
    drop(f);
    fs::rename(&partial, path).map_err(|e| Error::io(path, e))
}

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn prompts(&self) -> PathBuf {
        self.root.join("prompts.jsonl")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("base.json")
    }

    pub fn expert_checkpoint(&self, domain: Domain) -> PathBuf {
        self.root.join("checkpoints").join(format!("expert_{domain}.json"))
    }

    pub fn merged_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("merged.json")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn plot_csv(&self) -> PathBuf {
        self.root.join("plot_data.csv")
    }
}

fn schedule_spec(cfg: &PipelineConfig) -> ScheduleSpec {
    ScheduleSpec { steps: cfg.diffusion_steps, beta_start: cfg.beta_start, beta_end: cfg.beta_end }
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

/// Generates and filters the prompt bank (showcase prompts first when
/// enabled). Ids are renumbered in bank order.
pub fn build_prompt_bank(cfg: &PipelineConfig) -> Result<Vec<PromptRecord>> {
    let grammar = PromptGrammar::standard().restricted_to(&cfg.domains);
    let mut rng = SeededRng::labeled(cfg.seed, "prompts");
    let mut records: Vec<PromptRecord> = Vec::new();
    if cfg.include_showcase_prompts {
        records.extend(promptbank::appendix_prompts().into_iter().filter(|r| cfg.domains.contains(&r.domain)));
    }
    records.extend(generate_prompts(&grammar, cfg.prompts_per_domain, &mut rng)?);
    for (i, r) in records.iter_mut().enumerate() {
        r.id = i as u64;
    }
    filter_bank(records, cfg.tau, cfg.delta)
}

pub fn stage_prompts(cfg: &PipelineConfig, paths: &RunPaths) -> Result<Vec<PromptRecord>> {
    let bank = build_prompt_bank(cfg)?;
    let mut buf = Vec::new();
    promptbank::write_jsonl(&mut buf, &bank)?;
    write_atomic(&paths.prompts(), &buf)?;
    log::info!("prompt bank: {} of {} retained", bank.iter().filter(|r| r.is_retained()).count(), bank.len());
    Ok(bank)
}

pub fn stage_synth(cfg: &PipelineConfig, paths: &RunPaths) -> Result<Vec<SynthPair>> {
    let bank = promptbank::read_jsonl(open(&paths.prompts())?)?;
    let mixtures = resolve_mixtures(cfg)?;
    let pairs = synth_dataset(&bank, &mixtures, &mut SeededRng::labeled(cfg.seed, "synth"))?;
    let mut buf = Vec::new();
    synth::write_pairs(&mut buf, &pairs)?;
    write_atomic(&paths.dataset(), &buf)?;
    log::info!("dataset: {} pairs", pairs.len());
    Ok(pairs)
}

fn read_dataset(paths: &RunPaths) -> Result<Vec<SynthPair>> {
    synth::read_pairs(open(&paths.dataset())?)
}

pub fn stage_pretrain(cfg: &PipelineConfig, paths: &RunPaths) -> Result<Checkpoint> {
    let pairs = read_dataset(paths)?;
    let sched = cfg.schedule()?;
    let init = cfg.init_model(&mut SeededRng::labeled(cfg.seed, "init"))?;
    let mut rng = SeededRng::labeled(cfg.seed, "pretrain");
    let (base, log) = pretrain_base(&init, &pairs, &cfg.domains, &sched, &cfg.pretrain_config(), &mut rng)?;
    let mut ckpt = Checkpoint::new(cfg.hash()?, schedule_spec(cfg), &base);
    ckpt.loss_logs.insert(PRETRAIN_LOG.to_string(), log);
    save_checkpoint(&paths.base_checkpoint(), &ckpt)?;
    Ok(ckpt)
}

fn train_one(cfg: &PipelineConfig, base: &Checkpoint, pairs: &[SynthPair], domain: Domain) -> Result<ExpertTraining> {
    let data: Vec<SynthPair> = pairs.iter().filter(|p| p.domain == domain).cloned().collect();
    let sched = base.schedule.build()?;
    let tc = cfg.expert_config();
    let layers = tc.layers.clone().unwrap_or_else(|| base.base.hidden_layer_names());
    // Every expert starts from the same A factors.
    let init = base.base.init_adapters(&layers, domain.label(), tc.rank, &mut SeededRng::labeled(cfg.seed, "adapter-init"))?;
    let mut rng = SeededRng::labeled(cfg.seed, &format!("expert/{domain}"));
    train_expert_from(&base.base, init, domain, &cfg.domains, &data, &sched, &tc, &mut rng)
}

/// Trains `domain`'s expert, or every configured domain's expert
/// concurrently when `None`. Writes one checkpoint per expert.
pub fn stage_train(cfg: &PipelineConfig, paths: &RunPaths, domain: Option<Domain>) -> Result<Vec<Checkpoint>> {
    let hash = cfg.hash()?;
    let base = load_checkpoint(&paths.base_checkpoint(), Some(&hash))?;
    let pairs = read_dataset(paths)?;
    let domains = match domain {
        Some(d) if !cfg.domains.contains(&d) => return Err(Error::UnknownDomain(d.to_string())),
        Some(d) => vec![d],
        None => cfg.domains.clone(),
    };
    let trained: Vec<ExpertTraining> = std::thread::scope(|s| {
        let handles: Vec<_> = domains
            .iter()
            .map(|&d| {
                let (base, pairs) = (&base, &pairs);
                s.spawn(move || train_one(cfg, base, pairs, d))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect::<Result<_>>()
    })?;
    let mut out = Vec::with_capacity(domains.len());
    for (d, t) in domains.into_iter().zip(trained) {
        let mut ckpt = Checkpoint::new(hash.clone(), base.schedule, &base.base);
        ckpt.adapters.insert(d.to_string(), t.adapters);
        ckpt.loss_logs.insert(d.to_string(), t.log);
        save_checkpoint(&paths.expert_checkpoint(d), &ckpt)?;
        out.push(ckpt);
    }
    Ok(out)
}

/// Collects every expert checkpoint, checks they share the base, and writes
/// a checkpoint holding each expert plus the factor-wise merge.
pub fn stage_merge(cfg: &PipelineConfig, paths: &RunPaths) -> Result<Checkpoint> {
    let hash = cfg.hash()?;
    let base = load_checkpoint(&paths.base_checkpoint(), Some(&hash))?;
    let mut merged = Checkpoint::new(hash.clone(), base.schedule, &base.base);
    merged.loss_logs = base.loss_logs.clone();
    let mut experts = BTreeMap::new();
    for &d in &cfg.domains {
        let path = paths.expert_checkpoint(d);
        let ckpt = load_checkpoint(&path, Some(&hash))?;
        if ckpt.base != base.base {
            return Err(Error::Checkpoint { path, detail: "base weights differ from the pretrained base".into() });
        }
        let label = d.to_string();
        let ads = ckpt.adapters.get(&label).cloned().ok_or_else(|| Error::Checkpoint { path: path.clone(), detail: format!("no adapters for {label}") })?;
        merged.loss_logs.extend(ckpt.loss_logs);
        merged.adapters.insert(label.clone(), ads.clone());
        experts.insert(label, ads);
    }
    let set = ExpertSet::new(base.base.clone(), experts)?;
    merged.adapters.insert(MERGED_LABEL.to_string(), merge_experts(&set)?);
    save_checkpoint(&paths.merged_checkpoint(), &merged)?;
    Ok(merged)
}

pub fn stage_eval(cfg: &PipelineConfig, paths: &RunPaths) -> Result<MetricsReport> {
    let ckpt = load_checkpoint(&paths.merged_checkpoint(), Some(&cfg.hash()?))?;
    let report = evaluate(cfg, &ckpt)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_atomic(&paths.report_json(), json.as_bytes())?;
    write_atomic(&paths.report_csv(), report.to_csv().as_bytes())?;
    write_atomic(&paths.plot_csv(), plot_data_csv(&ckpt).as_bytes())?;
    Ok(report)
}

/// Writes the effective config next to the artifacts.
pub fn write_config(cfg: &PipelineConfig, paths: &RunPaths) -> Result<()> {
    let mut json = cfg.to_json()?;
    json.push('\n');
    write_atomic(&paths.config(), json.as_bytes())
}

/// Runs every stage in order into `out`.
pub fn run_all(cfg: &PipelineConfig, out: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let paths = RunPaths::new(out);
    write_config(cfg, &paths).map_err(|e| e.in_stage("config"))?;
    stage_prompts(cfg, &paths).map_err(|e| e.in_stage("prompts"))?;
    stage_synth(cfg, &paths).map_err(|e| e.in_stage("synth"))?;
    stage_pretrain(cfg, &paths).map_err(|e| e.in_stage("pretrain"))?;
    stage_train(cfg, &paths, None).map_err(|e| e.in_stage("train"))?;
    stage_merge(cfg, &paths).map_err(|e| e.in_stage("merge"))?;
    stage_eval(cfg, &paths).map_err(|e| e.in_stage("eval"))
}
