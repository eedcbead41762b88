//! Batch jobs behind the command-line tool: pairing, transfer, adapter
//! analysis and synthetic generation, each returning an exit code and a
//! one-line summary.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::Deserialize;

use crate::decompose::{decompose_adapter, DecomposedDelta};
use crate::diagnostics::{
    build_report, emit, emit_decomposition, DecompositionRow, Format, PairingReport, TransferInput,
};
use crate::error::{Error, Result};
use crate::io::adapter::{
    AdapterModule, AdapterSet, FORMAT_VERSION, KEY_FORMAT_VERSION, KEY_MODE, KEY_RANK, KEY_SOURCE_HASH,
    KEY_THRESHOLD,
};
use crate::io::archive::{write_atomic, DType};
use crate::io::cache::SpectralCache;
use crate::io::model::Model;
use crate::linalg::{truncated_svd, LowRankFactors, Matrix, Space, SpectralBases, WeightMatrix, DEFAULT_RANK_TOL};
use crate::similarity::{score_matrix, select_pairs, Combine, Matching, ModulePairing, ScoreMatrix, DEFAULT_THRESHOLD};
use crate::synth::{generate_bundle, write_bundle, SynthModelSpec};
use crate::transfer::{copy_transfer, transfer_adapter, transfer_factorwise, transfer_mismatched, TransferMode, TransferredDelta};

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_UNMATCHED: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NumericalFailure(_) | Error::DegenerateSubspace(_) => EXIT_NUMERICAL,
        Error::EmptyModel => EXIT_UNMATCHED,
        _ => EXIT_INPUT,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub summary: String,
}

/// `<glob>=<mode>`, matched against source module paths.
#[derive(Debug, Clone)]
pub struct ModeOverride {
    pub pattern: glob::Pattern,
    pub mode: TransferMode,
}

impl std::str::FromStr for ModeOverride {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (glob, mode) = s
            .rsplit_once('=')
            .ok_or_else(|| Error::Config(format!("override `{s}` is not <glob>=<mode>")))?;
        Ok(Self {
            pattern: glob::Pattern::new(glob).map_err(|e| Error::Config(format!("override `{s}`: {e}")))?,
            mode: mode.parse()?,
        })
    }
}

/// Job settings as read from a config file or command-line flags. Every
/// field is optional so the two layers can be merged.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub adapter: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub mode: Option<TransferMode>,
    pub rank: Option<usize>,
    pub rank_tol: Option<f64>,
    pub combine: Option<Combine>,
    pub matching: Option<Matching>,
    #[serde(default)]
    pub overrides: Vec<String>,
    pub jobs: Option<usize>,
    pub dtype: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub timing: Option<bool>,
}

impl JobConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// `self` wins wherever it sets a value; its overrides take precedence.
    pub fn or(self, base: JobConfig) -> JobConfig {
        let mut overrides = self.overrides;
        overrides.extend(base.overrides);
        JobConfig {
            source: self.source.or(base.source),
            target: self.target.or(base.target),
            adapter: self.adapter.or(base.adapter),
            out: self.out.or(base.out),
            report: self.report.or(base.report),
            threshold: self.threshold.or(base.threshold),
            mode: self.mode.or(base.mode),
            rank: self.rank.or(base.rank),
            rank_tol: self.rank_tol.or(base.rank_tol),
            combine: self.combine.or(base.combine),
            matching: self.matching.or(base.matching),
            overrides,
            jobs: self.jobs.or(base.jobs),
            dtype: self.dtype.or(base.dtype),
            cache_dir: self.cache_dir.or(base.cache_dir),
            timing: self.timing.or(base.timing),
        }
    }
}

/// A validated job with defaults filled in.
#[derive(Debug, Clone)]
pub struct Job {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub adapter: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub threshold: f64,
    pub mode: TransferMode,
    pub rank: Option<usize>,
    pub rank_tol: f64,
    pub combine: Combine,
    pub matching: Matching,
    pub overrides: Vec<ModeOverride>,
    pub jobs: usize,
    pub dtype: DType,
    pub cache_dir: Option<PathBuf>,
    pub timing: bool,
}

impl Job {
    pub fn resolve(config: JobConfig) -> Result<Self> {
        let threshold = config.threshold.unwrap_or(DEFAULT_THRESHOLD);
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
        }
        let rank_tol = config.rank_tol.unwrap_or(DEFAULT_RANK_TOL);
        if !(rank_tol.is_finite() && rank_tol >= 0.0) {
            return Err(Error::Config(format!("rank tolerance {rank_tol} must be finite and >= 0")));
        }
        let jobs = match config.jobs {
            Some(0) => return Err(Error::Config("jobs must be at least 1".into())),
            Some(j) => j,
            None => std::thread::available_parallelism().map_or(1, usize::from),
        };
        let dtype = match config.dtype.as_deref() {
            None => DType::F32,
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("unknown dtype `{s}` (f16|bf16|f32|f64)")))?,
        };
        Ok(Self {
            source: config.source,
            target: config.target,
            adapter: config.adapter,
            out: config.out,
            report: config.report,
            threshold,
            mode: config.mode.unwrap_or_default(),
            rank: config.rank,
            rank_tol,
            combine: config.combine.unwrap_or_default(),
            matching: config.matching.unwrap_or_default(),
            overrides: config
                .overrides
                .iter()
                .map(|s| s.parse())
                .collect::<Result<_>>()?,
            jobs,
            dtype,
            cache_dir: config.cache_dir,
            timing: config.timing.unwrap_or(false),
        })
    }

    fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::Config(format!("--{flag} is required")))
    }

    /// Mode for a source module: first matching override, else the default.
    pub fn mode_for(&self, module: &str) -> TransferMode {
        self.overrides
            .iter()
            .find(|o| o.pattern.matches(module))
            .map_or(self.mode, |o| o.mode)
    }

    fn cache(&self) -> SpectralCache {
        match &self.cache_dir {
            Some(dir) => SpectralCache::persistent(dir),
            None => SpectralCache::in_memory(),
        }
    }

    fn run<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(f)
    }
}

fn bases_for(
    cache: &SpectralCache,
    model: &Model,
    modules: &[String],
    rel_tol: f64,
) -> Result<Vec<(String, Arc<SpectralBases>)>> {
    modules
        .par_iter()
        .map(|m| Ok((m.clone(), cache.get_or_compute(model, m, rel_tol)?)))
        .collect()
}

type BasesByModule = BTreeMap<String, Arc<SpectralBases>>;

fn score_and_pair(
    job: &Job,
    cache: &SpectralCache,
    source: &Model,
    sources: &[String],
    target: &Model,
) -> Result<(ScoreMatrix, ModulePairing, BasesByModule, BasesByModule)> {
    let targets: Vec<String> = target.modules().into_iter().map(|m| m.path).collect();
    if targets.is_empty() {
        return Err(Error::EmptyModel);
    }
    let sb = bases_for(cache, source, sources, job.rank_tol)?;
    let tb = bases_for(cache, target, &targets, job.rank_tol)?;
    let sref: Vec<_> = sb.iter().map(|(id, b)| (id.clone(), b.as_ref())).collect();
    let tref: Vec<_> = tb.iter().map(|(id, b)| (id.clone(), b.as_ref())).collect();
    let scores = score_matrix(&sref, &tref, job.combine);
    let pairing = select_pairs(&scores, job.threshold, job.matching)?;
    Ok((scores, pairing, sb.into_iter().collect(), tb.into_iter().collect()))
}

fn sorted_unique(names: impl IntoIterator<Item = String>) -> Vec<String> {
    names.into_iter().collect::<BTreeSet<_>>().into_iter().collect()
}

/// Adapter modules that exist in the source model, warning about the rest.
fn adapter_sources(adapter: &AdapterSet, source: &Model) -> (Vec<String>, Vec<String>) {
    let (present, missing): (Vec<String>, Vec<String>) =
        adapter.modules.keys().cloned().partition(|m| source.has_module(m));
    for m in &missing {
        warn!("adapter module `{m}` has no weight in the source model; omitted");
    }
    (present, missing)
}

pub fn cmd_pair(job: &Job) -> Result<Outcome> {
    let out = Job::require(&job.out, "out")?;
    let source = Model::load(Job::require(&job.source, "source")?)?;
    let target = Model::load(Job::require(&job.target, "target")?)?;
    let adapter = job.adapter.as_ref().map(AdapterSet::load).transpose()?;
    let sources: Vec<String> = source.modules().into_iter().map(|m| m.path).collect();
    if sources.is_empty() {
        return Err(Error::EmptyModel);
    }
    let cache = job.cache();
    let (scores, pairing, _, _) = job.run(|| score_and_pair(job, &cache, &source, &sources, &target))?;
    write_atomic(out, &PairingReport::new(&scores, &pairing, job.combine).to_json())?;

    let unmatched: BTreeSet<&str> = pairing.unmatched_sources.iter().map(String::as_str).collect();
    let relevant: Vec<String> = match &adapter {
        Some(a) => {
            let (present, missing) = adapter_sources(a, &source);
            present.into_iter().filter(|m| unmatched.contains(m.as_str())).chain(missing).collect()
        }
        None => pairing.unmatched_sources.clone(),
    };
    for m in &relevant {
        warn!("source module `{m}` has no target above threshold {}", job.threshold);
    }
    Ok(Outcome {
        code: if relevant.is_empty() { EXIT_OK } else { EXIT_UNMATCHED },
        summary: format!(
            "pair: {} of {} source modules matched, {} unmatched -> {}",
            pairing.pairs.len(),
            sources.len(),
            relevant.len(),
            out.display()
        ),
    })
}

/// Result of transferring one adapter module.
struct ModuleTransfer {
    decomposed: DecomposedDelta,
    transferred: TransferredDelta,
    factors: LowRankFactors,
}

/// Truncated SVD at `rank`, clamped to `min(m, n)` and zero-padded back so
/// every output module has the requested rank.
fn recompress_padded(dense: &Matrix, rank: usize) -> Result<LowRankFactors> {
    let (m, n) = dense.shape();
    let k = rank.min(m.min(n));
    let f = truncated_svd(&WeightMatrix::new(dense.clone())?, k)?;
    if k == rank {
        return Ok(f);
    }
    let mut up = Matrix::zeros(m, rank);
    let mut down = Matrix::zeros(rank, n);
    up.columns_mut(0, k).copy_from(&f.up);
    down.rows_mut(0, k).copy_from(&f.down);
    Ok(LowRankFactors {
        up,
        down,
        residual_fro: f.residual_fro,
    })
}

fn transfer_module(
    module: &AdapterModule,
    source: &SpectralBases,
    target: &SpectralBases,
    mode: TransferMode,
    rank: usize,
) -> Result<ModuleTransfer> {
    let delta = module.delta();
    let decomposed = decompose_adapter(&delta, source)?;
    let same_shape = source.source_shape() == target.source_shape();
    let transferred = match mode {
        TransferMode::Full | TransferMode::SubspaceOnly | TransferMode::NullspaceOnly if same_shape => {
            transfer_adapter(&decomposed, target, mode)?
        }
        TransferMode::Full | TransferMode::SubspaceOnly | TransferMode::NullspaceOnly => {
            transfer_mismatched(&decomposed, source, target, mode)?
        }
        TransferMode::Copy | TransferMode::CopyProjected => copy_transfer(&delta, mode, target)?,
        TransferMode::Factorwise => {
            let (up, down) = transfer_factorwise(&(&module.up * module.scale), &module.down, source, target)?;
            let dense = &up * &down;
            let transferred = TransferredDelta {
                par_component: target.sandwich(&dense, Space::Range)?,
                perp_component: target.sandwich(&dense, Space::Null)?,
                dense,
                mode,
                source_module: String::new(),
                target_module: String::new(),
            };
            if rank == module.rank() {
                return Ok(ModuleTransfer {
                    decomposed,
                    transferred,
                    factors: LowRankFactors {
                        up,
                        down,
                        residual_fro: 0.0,
                    },
                });
            }
            transferred
        }
    };
    let factors = recompress_padded(&transferred.dense, rank)?;
    Ok(ModuleTransfer {
        decomposed,
        transferred,
        factors,
    })
}

fn write_report(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(path, bytes)
}

pub fn cmd_transfer(job: &Job) -> Result<Outcome> {
    let started = Instant::now();
    let out = Job::require(&job.out, "out")?;
    let source = Model::load(Job::require(&job.source, "source")?)?;
    let target = Model::load(Job::require(&job.target, "target")?)?;
    let adapter = AdapterSet::load(Job::require(&job.adapter, "adapter")?)?;
    let (sources, missing) = adapter_sources(&adapter, &source);
    if sources.is_empty() {
        warn!("no adapter module has a weight in the source model");
        return Ok(Outcome {
            code: EXIT_UNMATCHED,
            summary: "transfer: 0 modules matched".into(),
        });
    }
    let cache = job.cache();

    let (pairing, results) = job.run(|| {
        let (_, mut pairing, sb, tb) = score_and_pair(job, &cache, &source, &sources, &target)?;
        pairing.unmatched_sources = sorted_unique(pairing.unmatched_sources.iter().cloned().chain(missing.iter().cloned()));
        let results: Vec<ModuleTransfer> = pairing
            .pairs
            .par_iter()
            .map(|p| {
                let module = &adapter.modules[&p.source];
                let rank = job.rank.unwrap_or(module.rank());
                let mode = job.mode_for(&p.source);
                let mut t = transfer_module(module, &sb[&p.source], &tb[&p.target], mode, rank)?;
                t.transferred = t.transferred.labeled(&p.source, &p.target);
                Ok(t)
            })
            .collect::<Result<_>>()?;
        Ok((pairing, results))
    })?;

    for m in &pairing.unmatched_sources {
        warn!("adapter module `{m}` has no matching target module; omitted from the output");
    }
    if results.is_empty() {
        return Ok(Outcome {
            code: EXIT_UNMATCHED,
            summary: format!(
                "transfer: 0 of {} adapter modules matched at threshold {}",
                adapter.modules.len(),
                job.threshold
            ),
        });
    }

    let mut output = AdapterSet::default();
    let renames: BTreeMap<&str, &str> = pairing
        .pairs
        .iter()
        .map(|p| (p.source.as_str(), p.target.as_str()))
        .collect();
    for (p, r) in pairing.pairs.iter().zip(&results) {
        let mut module = AdapterModule::new(r.factors.up.clone(), r.factors.down.clone(), 1.0)?;
        module.conv = adapter.modules[&p.source].conv;
        output.modules.insert(p.target.clone(), module);
    }
    for (name, tensor) in &adapter.aux {
        let renamed = renames
            .iter()
            .find_map(|(s, t)| name.strip_prefix(s).filter(|rest| rest.starts_with('.')).map(|rest| format!("{t}{rest}")))
            .unwrap_or_else(|| name.clone());
        output.aux.insert(renamed, tensor.clone());
    }
    let out_rank = output.rank();
    output.metadata = BTreeMap::from([
        (KEY_FORMAT_VERSION.to_string(), FORMAT_VERSION.to_string()),
        (KEY_MODE.to_string(), job.mode.to_string()),
        (KEY_RANK.to_string(), out_rank.to_string()),
        (KEY_SOURCE_HASH.to_string(), source.hash().to_string()),
        (KEY_THRESHOLD.to_string(), job.threshold.to_string()),
    ]);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(out, &output.to_bytes(job.dtype)?)?;

    if let Some(path) = &job.report {
        let inputs: Vec<TransferInput<'_>> = results
            .iter()
            .map(|r| TransferInput {
                transferred: &r.transferred,
                decomposed: &r.decomposed,
                recompression_residual: Some(r.factors.residual_fro),
            })
            .collect();
        let mut report = build_report(&inputs, &pairing)?;
        if job.timing {
            report.elapsed_seconds = Some(started.elapsed().as_secs_f64());
        }
        write_report(path, &emit(&report, Format::for_path(path)))?;
    }
    info!("transfer finished in {:.2}s", started.elapsed().as_secs_f64());
    Ok(Outcome {
        code: EXIT_OK,
        summary: format!(
            "transfer: {} modules transferred ({} unmatched), mode {}, rank {} -> {}",
            results.len(),
            pairing.unmatched_sources.len(),
            job.mode,
            out_rank,
            out.display()
        ),
    })
}

/// Decomposition table for every adapter module with a source weight.
pub fn analyze_adapter(
    job: &Job,
    cache: &SpectralCache,
    source: &Model,
    adapter: &AdapterSet,
) -> Result<Vec<DecompositionRow>> {
    let (modules, _) = adapter_sources(adapter, source);
    job.run(|| {
        modules
            .par_iter()
            .map(|m| {
                let bases = cache.get_or_compute(source, m, job.rank_tol)?;
                let d = decompose_adapter(&adapter.modules[m].delta(), &bases)?;
                let (rows, cols) = bases.source_shape();
                Ok(DecompositionRow {
                    module: m.clone(),
                    rows,
                    cols,
                    rank: bases.rank(),
                    total_norm: d.norms.total,
                    par_norm: d.norms.par,
                    perp_norm: d.norms.perp,
                    residual_norm: d.norms.residual,
                })
            })
            .collect()
    })
}

pub fn cmd_analyze(job: &Job) -> Result<Outcome> {
    let path = job
        .report
        .as_deref()
        .or(job.out.as_deref())
        .ok_or_else(|| Error::Config("--report or --out is required".into()))?;
    let source = Model::load(Job::require(&job.source, "source")?)?;
    let adapter = AdapterSet::load(Job::require(&job.adapter, "adapter")?)?;
    let rows = analyze_adapter(job, &job.cache(), &source, &adapter)?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
        _ => Format::Csv,
    };
    write_report(path, &emit_decomposition(&rows, format))?;
    let code = if rows.is_empty() { EXIT_UNMATCHED } else { EXIT_OK };
    Ok(Outcome {
        code,
        summary: format!(
            "analyze: {} of {} adapter modules decomposed -> {}",
            rows.len(),
            adapter.modules.len(),
            path.display()
        ),
    })
}

pub fn cmd_synth(spec: &Path, out_dir: &Path) -> Result<Outcome> {
    let spec = SynthModelSpec::from_path(spec)?;
    let bundle = generate_bundle(&spec)?;
    write_bundle(&bundle, out_dir)?;
    Ok(Outcome {
        code: EXIT_OK,
        summary: format!(
            "synth: {} modules{} -> {}",
            bundle.truth.modules.len(),
            if bundle.adapter.is_some() { " with adapter" } else { "" },
            out_dir.display()
        ),
    })
}
