//! End-to-end orchestration: search, candidate extraction, budget filtering,
//! retraining, evaluation and reporting. Every command writes under one
//! output directory and refreshes its `manifest.json`.

mod config;
mod svg;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{sha256_hex, DataConfig, InferConfig, RunConfig, SpaceConfig};

use crate::data::{class_names, generate, write_miou_csv, DomainPair, MiouReport};
use crate::error::{Error, Result};
use crate::infer::{diverse_m_best_with, Solver};
use crate::mrf::{PairwiseMrf, BRUTE_FORCE_LIMIT};
use crate::nn::{load_checkpoint, save_checkpoint, StandaloneNet};
use crate::selftrain::{
    evaluate_miou, retrain, search_loop, LogEntry, RetrainMetrics, Scheme, SelfTrainConfig,
};
use crate::space::{resource_cost, ArchAssignment};

/// A config together with the digest that identifies it in reports.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub digest: String,
}

impl LoadedConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let (config, digest) = RunConfig::load(path)?;
        Ok(Self { config, digest })
    }

    /// A config with no backing file; the digest covers its JSON form.
    pub fn in_memory(config: RunConfig) -> Result<Self> {
        let config = config.finalize()?;
        let digest = config.digest()?;
        Ok(Self { config, digest })
    }
}

/// The dataset every command of a run shares.
pub fn dataset(cfg: &RunConfig) -> Result<DomainPair> {
    let d = &cfg.data;
    generate(cfg.seed, d.n_source, d.n_target, d.n_eval, d.classes, d.image_hw, d.shift)
}

fn scheme_cfg(base: &SelfTrainConfig, scheme: Scheme) -> SelfTrainConfig {
    SelfTrainConfig {
        scheme,
        ..base.clone()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for entry in log {
        serde_json::to_writer(&mut out, entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- search

/// Where `search` leaves its artifacts for one scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchArtifacts {
    pub scheme: Scheme,
    pub mrf: PathBuf,
    pub log: PathBuf,
    pub checkpoint: PathBuf,
    /// SHA-256 of the learned MRF JSON.
    pub mrf_digest: String,
    pub final_factor_l2: f64,
}

pub fn search_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("search")
}

/// Runs the joint weight/factor search once per configured scheme.
pub fn cmd_search(cfg: &LoadedConfig, out_dir: &Path) -> Result<Vec<SearchArtifacts>> {
    let c = &cfg.config;
    let spec = c.spec()?;
    let data = dataset(c)?;
    let dir = search_dir(out_dir);
    create_dir(&dir)?;
    let mut artifacts = Vec::new();
    for &scheme in &c.schemes {
        let outcome = search_loop(
            &spec,
            &spec.build_search_mrf()?,
            &data,
            &scheme_cfg(&c.search, scheme),
            c.net_options(),
        )?;
        let mrf_json = outcome.mrf.to_json()?;
        let mrf = dir.join(format!("{scheme}.mrf.json"));
        fs::write(&mrf, &mrf_json)?;
        let log = dir.join(format!("{scheme}.log.jsonl"));
        write_log(&log, &outcome.log)?;
        let checkpoint = dir.join(format!("{scheme}.supernet"));
        save_checkpoint(outcome.supernet.store(), &checkpoint)?;
        artifacts.push(SearchArtifacts {
            scheme,
            mrf,
            log,
            checkpoint,
            mrf_digest: sha256_hex(mrf_json.as_bytes()),
            final_factor_l2: outcome.mrf.factor_l2(),
        });
    }
    write_manifest(out_dir, &cfg.digest)?;
    Ok(artifacts)
}

// ----------------------------------------------------------------- infer

/// One candidate subnet emitted by `infer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub scheme: Scheme,
    /// Extraction round within its scheme, from 0.
    pub round: usize,
    pub labels: Vec<usize>,
    pub description: String,
    pub arch: ArchAssignment,
    /// Learned MRF score of the assignment.
    pub score: f64,
    /// MACs at the budget resolution.
    pub flops: u64,
    pub params: u64,
    pub budget_hw: usize,
}

pub fn subnets_path(out_dir: &Path) -> PathBuf {
    out_dir.join("subnets.json")
}

/// Diverse M-best candidates of one learned MRF that fit the budget.
pub fn infer_candidates(cfg: &RunConfig, mrf: &PairwiseMrf, scheme: Scheme) -> Result<Vec<Candidate>> {
    let spec = cfg.spec()?;
    if mrf.cardinalities() != spec.build_search_mrf()?.cardinalities() {
        return Err(Error::Config("MRF does not match the configured search space".into()));
    }
    let solver = if mrf.num_configurations() <= BRUTE_FORCE_LIMIT {
        Solver::Exact
    } else {
        Solver::DEFAULT_LOOPY
    };
    let set = diverse_m_best_with(mrf, cfg.infer.m, cfg.infer.diversity_weight, solver)?;
    let hw = (cfg.infer.budget_hw, cfg.infer.budget_hw);
    let budget = cfg.infer.budget_flops.unwrap_or(f64::INFINITY);
    let mut out = Vec::new();
    for (round, sol) in set.solutions.iter().enumerate() {
        let arch = spec.decode(&sol.assignment)?;
        let cost = resource_cost(&spec, &arch, hw)?;
        if cost.flops as f64 > budget {
            continue;
        }
        out.push(Candidate {
            scheme,
            round,
            labels: sol.assignment.labels.clone(),
            description: arch.describe(&spec),
            arch,
            score: sol.score,
            flops: cost.flops,
            params: cost.params,
            budget_hw: cfg.infer.budget_hw,
        });
    }
    Ok(out)
}

/// Reads the learned MRF of every scheme from `search/` and writes the
/// budget-filtered candidate list. An empty list is not an error.
pub fn cmd_infer(cfg: &LoadedConfig, out_dir: &Path) -> Result<Vec<Candidate>> {
    let c = &cfg.config;
    let mut all = Vec::new();
    for &scheme in &c.schemes {
        let path = search_dir(out_dir).join(format!("{scheme}.mrf.json"));
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e} (run `search` first)", path.display())))?;
        let mrf = PairwiseMrf::from_json(&text)?;
        all.extend(infer_candidates(c, &mrf, scheme)?);
    }
    if all.is_empty() {
        eprintln!("warning: no candidate fits the FLOPs budget; writing an empty list");
    }
    create_dir(out_dir)?;
    write_json(&subnets_path(out_dir), &all)?;
    write_manifest(out_dir, &cfg.digest)?;
    Ok(all)
}

// --------------------------------------------------------------- retrain

/// Retraining outcome of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubnetReport {
    /// 1-based position after sorting by target mIoU.
    pub rank: usize,
    /// Among the best `top_k` of its scheme.
    pub selected: bool,
    pub candidate: Candidate,
    /// MACs at the training resolution.
    pub flops_train_hw: u64,
    pub metrics: RetrainMetrics,
    /// Checkpoint stem of the retrained weights.
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_digest: String,
    pub config: RunConfig,
    pub budget_flops: Option<f64>,
    /// Sorted by target mIoU, best first.
    pub subnets: Vec<SubnetReport>,
    /// Excluded from [`RunReport::same_results`].
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Equality ignoring wall-clock time.
    pub fn same_results(&self, other: &RunReport) -> bool {
        RunReport {
            wall_clock_secs: 0.0,
            ..self.clone()
        } == RunReport {
            wall_clock_secs: 0.0,
            ..other.clone()
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "rank", "selected", "scheme", "round", "arch", "flops", "params", "flops_train_hw",
            "target_miou", "source_val_loss",
        ])
        .map_err(csv_err)?;
        for s in &self.subnets {
            w.write_record([
                s.rank.to_string(),
                s.selected.to_string(),
                s.candidate.scheme.to_string(),
                s.candidate.round.to_string(),
                s.candidate.description.clone(),
                s.candidate.flops.to_string(),
                s.candidate.params.to_string(),
                s.flops_train_hw.to_string(),
                format!("{:.6}", s.metrics.target_miou),
                format!("{:.6}", s.metrics.source_val_loss),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn report_path(out_dir: &Path) -> PathBuf {
    out_dir.join("report.json")
}

/// Sorts by target mIoU (descending, stable) and flags the best `top_k` per scheme.
pub fn rank_subnets(subnets: &mut [SubnetReport], top_k: usize) {
    subnets.sort_by(|a, b| b.metrics.target_miou.total_cmp(&a.metrics.target_miou));
    let mut taken: Vec<(Scheme, usize)> = Vec::new();
    for (i, s) in subnets.iter_mut().enumerate() {
        s.rank = i + 1;
        let scheme = s.candidate.scheme;
        let n = match taken.iter_mut().find(|(k, _)| *k == scheme) {
            Some((_, n)) => n,
            None => {
                taken.push((scheme, 0));
                &mut taken.last_mut().expect("just pushed").1
            }
        };
        s.selected = *n < top_k;
        *n += 1;
    }
}

/// Retrains every candidate of `subnets.json` from scratch with its scheme's
/// self-training loop and writes `report.json` plus `report.csv`.
pub fn cmd_retrain(cfg: &LoadedConfig, out_dir: &Path) -> Result<RunReport> {
    let start = Instant::now();
    let c = &cfg.config;
    let candidates: Vec<Candidate> = read_json(&subnets_path(out_dir))?;
    let spec = c.spec()?;
    let data = dataset(c)?;
    let dir = out_dir.join("subnets");
    create_dir(&dir)?;
    let hw = (c.data.image_hw, c.data.image_hw);
    let mut subnets = Vec::with_capacity(candidates.len());
    for cand in candidates {
        spec.check_arch(&cand.arch)
            .map_err(|e| Error::Config(format!("subnet list does not match the config: {e}")))?;
        let outcome = retrain(&spec, &cand.arch, &data, &scheme_cfg(&c.retrain, cand.scheme), c.net_options())?;
        let stem = dir.join(format!("{}_{}", cand.scheme, cand.round));
        save_checkpoint(outcome.net.store(), &stem)?;
        write_json(&stem.with_extension("arch.json"), &cand.arch)?;
        write_log(&stem.with_extension("log.jsonl"), &outcome.log)?;
        subnets.push(SubnetReport {
            rank: 0,
            selected: false,
            flops_train_hw: resource_cost(&spec, &cand.arch, hw)?.flops,
            candidate: cand,
            metrics: outcome.metrics,
            checkpoint: stem,
        });
    }
    rank_subnets(&mut subnets, c.infer.top_k);
    let report = RunReport {
        seed: c.seed,
        config_digest: cfg.digest.clone(),
        config: c.clone(),
        budget_flops: c.infer.budget_flops,
        subnets,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&report_path(out_dir), &report)?;
    report.write_csv(fs::File::create(out_dir.join("report.csv"))?)?;
    write_manifest(out_dir, &cfg.digest)?;
    Ok(report)
}

// ------------------------------------------------------------------ eval

/// Loads `<stem>.bin/.json` with the architecture in `<stem>.arch.json`.
pub fn load_subnet(cfg: &RunConfig, stem: &Path) -> Result<StandaloneNet> {
    let arch: ArchAssignment = read_json(&stem.with_extension("arch.json"))?;
    let spec = cfg.spec()?;
    spec.check_arch(&arch)
        .map_err(|e| Error::Config(format!("architecture does not match the config: {e}")))?;
    let store = load_checkpoint(stem).map_err(|e| Error::Config(format!("checkpoint: {e}")))?;
    StandaloneNet::from_store(&spec, cfg.net_options(), &arch, store)
        .map_err(|e| Error::Config(format!("checkpoint does not match the architecture: {e}")))
}

/// Target-evaluation mIoU of saved weights; writes `<name>.csv` and, when
/// asked, `<name>.svg` into `out_dir`.
pub fn cmd_eval(cfg: &LoadedConfig, weights: &Path, out_dir: &Path, svg: bool) -> Result<MiouReport> {
    let c = &cfg.config;
    let net = load_subnet(c, weights)?;
    let data = dataset(c)?;
    let report = evaluate_miou(&net, &data.target_eval, data.num_classes, c.retrain.eval_batch)?;
    create_dir(out_dir)?;
    let name = weights
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "eval".into());
    let names = class_names(data.num_classes);
    write_miou_csv(&report, &names, fs::File::create(out_dir.join(format!("{name}.eval.csv")))?)?;
    if svg {
        fs::write(out_dir.join(format!("{name}.eval.svg")), svg::bar_chart(&report, &names))?;
    }
    write_manifest(out_dir, &cfg.digest)?;
    Ok(report)
}

// ---------------------------------------------------------------- report

/// search, infer, retrain, then eval of every selected subnet.
pub fn cmd_report(cfg: &LoadedConfig, out_dir: &Path) -> Result<RunReport> {
    cmd_search(cfg, out_dir)?;
    cmd_infer(cfg, out_dir)?;
    let report = cmd_retrain(cfg, out_dir)?;
    for s in report.subnets.iter().filter(|s| s.selected) {
        cmd_eval(cfg, &s.checkpoint, &out_dir.join("eval"), true)?;
    }
    Ok(report)
}

// -------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub files: Vec<ManifestEntry>,
}

pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.json")
}

/// Rewrites `manifest.json` with every file under `out_dir`, sorted by path.
pub fn write_manifest(out_dir: &Path, config_digest: &str) -> Result<Manifest> {
    let mut files = Vec::new();
    collect(out_dir, out_dir, &mut files)?;
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let m = Manifest {
        config_digest: config_digest.to_owned(),
        files,
    };
    write_json(&manifest_path(out_dir), &m)?;
    Ok(m)
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<ManifestEntry>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
            continue;
        }
        let rel = path.strip_prefix(root).expect("walked from root");
        if rel == Path::new("manifest.json") {
            continue;
        }
        let bytes = fs::read(&path)?;
        out.push(ManifestEntry {
            path: rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/"),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::SupernetSpec;

    fn report(miou: &[(Scheme, f64)]) -> Vec<SubnetReport> {
        let spec = SupernetSpec::desk_default();
        miou.iter()
            .enumerate()
            .map(|(i, &(scheme, m))| SubnetReport {
                rank: 0,
                selected: false,
                candidate: Candidate {
                    scheme,
                    round: i,
                    labels: vec![],
                    description: String::new(),
                    arch: spec.largest_arch(),
                    score: 0.0,
                    flops: 0,
                    params: 0,
                    budget_hw: 16,
                },
                flops_train_hw: 0,
                metrics: RetrainMetrics {
                    target_miou: m,
                    per_class_iou: vec![],
                    source_val_loss: 0.0,
                    iterations: 0,
                },
                checkpoint: PathBuf::new(),
            })
            .collect()
    }

    #[test]
    fn ranking_is_descending_with_top_k_per_scheme() {
        use Scheme::*;
        let mut s = report(&[(Confidence, 0.3), (Energy, 0.5), (Confidence, 0.6), (Confidence, 0.4), (Energy, 0.1)]);
        rank_subnets(&mut s, 2);
        let got: Vec<_> = s.iter().map(|r| (r.rank, r.metrics.target_miou, r.selected)).collect();
        assert_eq!(
            got,
            vec![(1, 0.6, true), (2, 0.5, true), (3, 0.4, true), (4, 0.3, false), (5, 0.1, true)]
        );
    }

    #[test]
    fn same_results_ignores_wall_clock() {
        let a = RunReport {
            seed: 1,
            config_digest: "x".into(),
            config: RunConfig::toy(),
            budget_flops: None,
            subnets: report(&[(Scheme::Energy, 0.2)]),
            wall_clock_secs: 1.0,
        };
        let mut b = a.clone();
        b.wall_clock_secs = 9.0;
        assert!(a.same_results(&b));
        b.subnets[0].metrics.target_miou = 0.3;
        assert!(!a.same_results(&b));
    }

    #[test]
    fn manifest_lists_files_with_digests() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/a.txt"), b"abc").unwrap();
        fs::write(dir.path().join("b.txt"), b"").unwrap();
        let m = write_manifest(dir.path(), "d").unwrap();
        let paths: Vec<_> = m.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(paths, ["b.txt", "sub/a.txt"]);
        assert_eq!(
            m.files[1].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        // Rewriting does not list the manifest itself.
        assert_eq!(write_manifest(dir.path(), "d").unwrap(), m);
    }
}
