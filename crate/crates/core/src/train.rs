//! Training loop, run directories, evaluation and ablation sweeps.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::backprop::GradStore;
use candle_core::{DType, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::NUM_LEVELS;
use crate::cdap::GateDiagnostics;
use crate::config::RunConfig;
use crate::error::{HrError, Result};
use crate::geometry::{GridImage, Modality};
use crate::losses::{self, LossReport};
use crate::metrics::{self, EvalRecord, EvalSummary, MeanStd};
use crate::model::HrNet;
use crate::nn::{scalar_f64, to_f64_vec};
use crate::synthdata::{self, derive_seed, PairBatch, SynthConfig, TrainingPair};

const TRAIN_STREAM: u64 = 0x7EA1;
const EVAL_STREAM: u64 = 0xE7A1;
const SHUFFLE_STREAM: u64 = 0x5AFF;

/// Generates pairs `0..n` of a seeded stream on `workers` threads. The
/// result is identical for any worker count.
pub fn generate_pairs_parallel(
    cfg: &SynthConfig,
    sources: Option<&[GridImage]>,
    seed: u64,
    n: usize,
    workers: usize,
) -> Result<Vec<TrainingPair>> {
    if workers <= 1 || n < 2 {
        return synthdata::generate_pairs(cfg, sources, seed, n);
    }
    let chunk = n.div_ceil(workers);
    let parts: Vec<Result<Vec<TrainingPair>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|k| {
                s.spawn(move || {
                    (k * chunk..((k + 1) * chunk).min(n))
                        .map(|i| synthdata::generate_pair(cfg, sources, seed, i as u64))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn load_sources(cfg: &RunConfig) -> Result<Option<Vec<GridImage>>> {
    match &cfg.data.source_dir {
        Some(dir) => Ok(Some(synthdata::load_image_dir(
            dir,
            cfg.data.manifest.as_deref(),
            cfg.image_size,
            cfg.channels,
        )?)),
        None => Ok(None),
    }
}

/// Training pairs for a config: the overfit batch when `train.overfit` is
/// set, else `data.num_pairs` pairs.
pub fn training_pairs(cfg: &RunConfig) -> Result<Vec<TrainingPair>> {
    let sources = load_sources(cfg)?;
    let n = if cfg.train.overfit > 0 { cfg.train.overfit } else { cfg.data.num_pairs };
    generate_pairs_parallel(
        &cfg.synth_config(),
        sources.as_deref(),
        derive_seed(cfg.seed, TRAIN_STREAM),
        n,
        cfg.train.workers,
    )
}

/// Held-out pairs from an independent stream.
pub fn eval_pairs(cfg: &RunConfig) -> Result<Vec<TrainingPair>> {
    let sources = load_sources(cfg)?;
    generate_pairs_parallel(
        &cfg.synth_config(),
        sources.as_deref(),
        derive_seed(cfg.seed, EVAL_STREAM),
        cfg.data.eval_pairs,
        cfg.train.workers,
    )
}

enum DataSource {
    Fixed(PairBatch),
    Pool {
        pairs: Vec<TrainingPair>,
        order: Vec<usize>,
        cursor: usize,
        batch: usize,
        rng: ChaCha8Rng,
    },
}

impl DataSource {
    fn steps_per_epoch(&self) -> usize {
        match self {
            DataSource::Fixed(_) => 1,
            DataSource::Pool { pairs, batch, .. } => (pairs.len() / batch).max(1),
        }
    }

    fn next(&mut self, dtype: DType) -> Result<PairBatch> {
        match self {
            DataSource::Fixed(b) => Ok(b.clone()),
            DataSource::Pool { pairs, order, cursor, batch, rng } => {
                if *cursor + *batch > order.len() {
                    order.shuffle(rng);
                    *cursor = 0;
                }
                let picked: Vec<TrainingPair> =
                    order[*cursor..*cursor + *batch].iter().map(|&i| pairs[i].clone()).collect();
                *cursor += *batch;
                PairBatch::from_pairs(&picked, dtype)
            }
        }
    }
}

/// Rescales gradients in place so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += scalar_f64(&g.to_dtype(DType::F64)?.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    if norm.is_finite() && norm > max_norm {
        let f = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * f)?);
            }
        }
    }
    Ok(norm)
}

pub struct Trainer {
    pub model: HrNet,
    opt: AdamW,
    vars: Vec<Var>,
    data: DataSource,
    pub step: usize,
    pub total_steps: usize,
    dtype: DType,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Self::with_pairs(cfg, training_pairs(cfg)?)
    }

    pub fn with_pairs(cfg: &RunConfig, pairs: Vec<TrainingPair>) -> Result<Self> {
        let dtype = DType::F32;
        let model = HrNet::new(cfg, dtype)?;
        let data = if cfg.train.overfit > 0 {
            DataSource::Fixed(PairBatch::from_pairs(&pairs, dtype)?)
        } else {
            let batch = cfg.optim.batch_size;
            if pairs.len() < batch {
                return Err(HrError::Config(format!(
                    "data.num_pairs ({}) is smaller than the batch size ({batch})",
                    pairs.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM));
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(&mut rng);
            DataSource::Pool { pairs, order, cursor: 0, batch, rng }
        };
        let total_steps = if cfg.optim.steps > 0 {
            cfg.optim.steps
        } else {
            cfg.optim.epochs * data.steps_per_epoch()
        };
        let vars = model.store.trainable_vars();
        let opt = AdamW::new(
            vars.clone(),
            ParamsAdamW { lr: cfg.optim.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
        )?;
        Ok(Self { model, opt, vars, data, step: 0, total_steps: total_steps.max(1), dtype })
    }

    pub fn progress(&self) -> f64 {
        self.step as f64 / self.total_steps as f64
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    /// One optimisation step. The report holds the losses before the update.
    pub fn step_once(&mut self) -> Result<LossReport> {
        let progress = self.progress();
        let batch = self.data.next(self.dtype)?;
        let out = self.model.forward(&batch.fixed, &batch.moving, true)?;
        let terms = self.model.loss_terms(&out, &batch)?;
        let report = LossReport::new(self.step, progress, &terms)?;
        if !report.is_finite() {
            return Err(HrError::NonFinite {
                step: self.step,
                detail: serde_json::to_string(&report)?,
            });
        }
        let total = losses::total_loss(&terms, &losses::curriculum(progress))?
            .ok_or_else(|| HrError::Config("no loss terms enabled".into()))?;
        let mut grads = total.backward()?;
        let norm = clip_gradients(&mut grads, &self.vars, self.model.config.optim.grad_clip)?;
        if !norm.is_finite() {
            return Err(HrError::NonFinite { step: self.step, detail: format!("gradient norm {norm}") });
        }
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(report)
    }
}

/// Layout of one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the directory and records the resolved config and its hash.
    pub fn create(root: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::write(root.join("config.toml"), cfg.to_toml_string()?)?;
        fs::write(root.join("config_hash"), format!("{}\n", cfg.config_hash()))?;
        fs::write(root.join("architecture_hash"), format!("{}\n", cfg.architecture_hash()))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("step-{step:07}.safetensors"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("final.safetensors")
    }
}

pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub model: HrNet,
}

#[derive(Serialize)]
struct NanDump<'a> {
    error: String,
    step: usize,
    config_hash: String,
    last_report: Option<&'a LossReport>,
    param_max_abs: Vec<(String, f64)>,
}

fn write_nan_dump(dir: &RunDir, err: &HrError, trainer: &Trainer, last: Option<&LossReport>) -> Result<()> {
    let mut param_max_abs = Vec::new();
    for (name, v) in trainer.model.store.params() {
        let m = to_f64_vec(v.as_tensor())?.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        param_max_abs.push((name.clone(), m));
    }
    let dump = NanDump {
        error: err.to_string(),
        step: trainer.step,
        config_hash: trainer.model.config.config_hash(),
        last_report: last,
        param_max_abs,
    };
    fs::write(dir.root.join("nan_dump.json"), serde_json::to_string_pretty(&dump)?)?;
    Ok(())
}

const GATE_BINS: usize = 20;

/// Runs a full training job. With a run directory, appends one JSON line
/// per step to the metrics log and writes periodic and final checkpoints.
pub fn train(cfg: &RunConfig, dir: Option<&RunDir>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg)?;
    let mut log = match dir {
        Some(d) => Some(BufWriter::new(File::create(d.metrics_path())?)),
        None => None,
    };
    let mut reports = Vec::with_capacity(trainer.total_steps);
    log::info!("training {} steps, config {}", trainer.total_steps, cfg.config_hash());
    while !trainer.is_done() {
        let report = match trainer.step_once() {
            Ok(r) => r,
            Err(e) => {
                if let (Some(d), HrError::NonFinite { .. }) = (dir, &e) {
                    write_nan_dump(d, &e, &trainer, reports.last())?;
                }
                return Err(e);
            }
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&report)?)?;
        }
        if report.step % 50 == 0 {
            log::info!("step {} [{}] total {:.5}", report.step, report.phase.name(), report.total);
        }
        reports.push(report);
        if let Some(d) = dir {
            let every = cfg.train.checkpoint_every;
            if every > 0 && trainer.step % every == 0 && !trainer.is_done() {
                trainer.model.save(&d.checkpoint_path(trainer.step))?;
            }
        }
    }
    if let (Some(d), Some(mut w)) = (dir, log) {
        w.flush()?;
        trainer.model.save(&d.final_checkpoint())?;
    }
    Ok(TrainOutcome { reports, model: trainer.model })
}

/// Per-pair RE, NCC and per-scale cross-modal CKA in eval mode.
pub fn evaluate(model: &HrNet, pairs: &[TrainingPair]) -> Result<Vec<EvalRecord>> {
    Ok(evaluate_with_gates(model, pairs)?.0)
}

/// As [`evaluate`], also collecting gate histograms when CDAP is enabled.
pub fn evaluate_with_gates(model: &HrNet, pairs: &[TrainingPair]) -> Result<(Vec<EvalRecord>, Option<GateDiagnostics>)> {
    let cfg = &model.config;
    let hash = cfg.config_hash();
    let mut records = Vec::with_capacity(pairs.len());
    let mut gates = model.cdap.as_ref().map(|_| GateDiagnostics::new(GATE_BINS));
    for (chunk_idx, chunk) in pairs.chunks(cfg.optim.batch_size.max(1)).enumerate() {
        let batch = PairBatch::from_pairs(chunk, DType::F32)?;
        let out = model.forward(&batch.fixed, &batch.moving, false)?;
        let re = metrics::reprojection_error_batch(&out.reg.final_field, &batch.gt_field, cfg.metrics.re_mode)?;
        if let (Some(g), Some(b)) = (gates.as_mut(), &out.bundle) {
            g.accumulate(b)?;
        }
        let feat_a = model.backbone.encode(&batch.fixed, Modality::A, false)?;
        let feat_b = model.backbone.encode(&batch.gt_registered, Modality::B, false)?;
        for (j, pair) in chunk.iter().enumerate() {
            let reg = GridImage::from_tensor(&out.registered, j, Modality::B)?;
            let ncc = metrics::ncc(&reg, &pair.gt_registered_image)?.value;
            let mut cka = [0.0; NUM_LEVELS];
            for (s, c) in cka.iter_mut().enumerate() {
                let a = feat_a.levels[s].narrow(0, j, 1)?;
                let b = feat_b.levels[s].narrow(0, j, 1)?;
                *c = metrics::feature_map_cka(&a, &b)?.value;
            }
            records.push(EvalRecord {
                pair_id: chunk_idx * cfg.optim.batch_size.max(1) + j,
                re: re[j],
                ncc,
                cka,
                config_hash: hash.clone(),
            });
        }
    }
    Ok((records, gates))
}

/// Writes `eval.csv`, `summary.json` and, when given, `gates.json` into `out_dir`.
pub fn write_eval(
    out_dir: &Path,
    records: &[EvalRecord],
    gates: Option<&GateDiagnostics>,
    config_hash: &str,
) -> Result<EvalSummary> {
    fs::create_dir_all(out_dir)?;
    metrics::write_records_csv(records, BufWriter::new(File::create(out_dir.join("eval.csv"))?))?;
    if let Some(g) = gates {
        fs::write(out_dir.join("gates.json"), serde_json::to_string_pretty(g)?)?;
    }
    let summary = EvalSummary::from_records(records, config_hash);
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Loads a checkpoint for `cfg`, refusing one recorded under a different
/// architecture.
pub fn load_checkpoint(cfg: &RunConfig, checkpoint: &Path) -> Result<HrNet> {
    if !checkpoint.is_file() {
        return Err(HrError::Config(format!("checkpoint {} not found", checkpoint.display())));
    }
    if let Some(run_root) = checkpoint.parent().and_then(Path::parent) {
        if let Ok(recorded) = fs::read_to_string(run_root.join("architecture_hash")) {
            let want = cfg.architecture_hash();
            if recorded.trim() != want {
                return Err(HrError::Config(format!(
                    "checkpoint architecture {} does not match config architecture {want}",
                    recorded.trim()
                )));
            }
        }
    }
    let model = HrNet::new(cfg, DType::F32)?;
    model.load(checkpoint)?;
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Msbn,
    Cdap,
    Losses,
    Steps,
}

impl FromStr for AblationAxis {
    type Err = HrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msbn" => Ok(Self::Msbn),
            "cdap" => Ok(Self::Cdap),
            "losses" => Ok(Self::Losses),
            "steps" => Ok(Self::Steps),
            other => Err(HrError::Config(format!(
                "unknown ablation axis `{other}` (expected msbn, cdap, losses or steps)"
            ))),
        }
    }
}

/// One ablation setting: leading table cells plus the config to train.
#[derive(Clone, Debug)]
pub struct Variant {
    pub cells: Vec<String>,
    pub config: RunConfig,
}

fn rigid_task(base: &RunConfig) -> RunConfig {
    let mut c = base.clone();
    c.data.elastic_alpha = 0.0;
    c
}

fn with_steps(base: &RunConfig, n_rigid: usize, n_nonrigid: usize) -> RunConfig {
    let mut c = base.clone();
    c.hppm.n_rigid = n_rigid;
    c.hppm.n_nonrigid = n_nonrigid;
    c
}

/// Column headers preceding the RE/NCC columns.
pub fn ablation_columns(axis: AblationAxis) -> Vec<&'static str> {
    match axis {
        AblationAxis::Msbn | AblationAxis::Cdap => vec!["", "Method"],
        AblationAxis::Losses => vec!["", "L_ccd", "L_bo", "L_cs", "L_tri"],
        AblationAxis::Steps => vec!["Task", "N_rigid", "N_nonrigid"],
    }
}

pub fn ablation_variants(base: &RunConfig, axis: AblationAxis) -> Vec<Variant> {
    let row = |i: usize| format!("({i})");
    match axis {
        AblationAxis::Msbn | AblationAxis::Cdap => {
            let task = rigid_task(base);
            let mut no_msbn = task.clone();
            no_msbn.model.msbn = false;
            let mut no_cdap = task.clone();
            no_cdap.model.cdap = false;
            let mut rows = vec![("w/o MSBN", no_msbn), ("w/o CDAP", no_cdap), ("Ours", task)];
            if axis == AblationAxis::Cdap {
                rows.remove(0);
            }
            rows.into_iter()
                .enumerate()
                .map(|(i, (name, config))| Variant { cells: vec![row(i + 1), name.into()], config })
                .collect()
        }
        AblationAxis::Losses => (0..5)
            .map(|k| {
                let mut c = base.clone();
                c.losses.ccd = k >= 1;
                c.losses.bo = k >= 2;
                c.losses.cs = k >= 3;
                c.losses.tri = k >= 4;
                let mut cells = vec![row(k + 1)];
                cells.extend((1..=4).map(|j| if k >= j { "✓".to_string() } else { String::new() }));
                Variant { cells, config: c }
            })
            .collect(),
        AblationAxis::Steps => {
            let rigid = rigid_task(base);
            let mut out = Vec::new();
            for (r, n) in [(5, 0), (4, 1), (3, 2), (2, 3), (1, 4)] {
                out.push(Variant {
                    cells: vec!["Rigid task".into(), r.to_string(), n.to_string()],
                    config: with_steps(&rigid, r, n),
                });
            }
            for (r, n) in [(0, 5), (1, 4), (2, 3), (3, 2), (4, 1)] {
                out.push(Variant {
                    cells: vec!["Non-rigid task".into(), r.to_string(), n.to_string()],
                    config: with_steps(base, r, n),
                });
            }
            out
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub cells: Vec<String>,
    pub re: MeanStd,
    pub ncc: MeanStd,
}

/// Pairs a trained model is scored on: the training batch for overfit runs,
/// held-out pairs otherwise.
pub fn scoring_pairs(cfg: &RunConfig) -> Result<Vec<TrainingPair>> {
    if cfg.train.overfit > 0 {
        training_pairs(cfg)
    } else {
        eval_pairs(cfg)
    }
}

/// Trains one variant and returns its mean RE and NCC on [`scoring_pairs`].
pub fn score_variant(cfg: &RunConfig, dir: Option<&RunDir>) -> Result<(f64, f64)> {
    let outcome = train(cfg, dir)?;
    let pairs = scoring_pairs(cfg)?;
    let records = evaluate(&outcome.model, &pairs)?;
    let s = EvalSummary::from_records(&records, &cfg.config_hash());
    Ok((s.re.mean, s.ncc.mean))
}

/// Trains every variant of `axis` for `seeds` consecutive seeds; run
/// directories are written under `out_root` when given.
pub fn run_ablation(base: &RunConfig, axis: AblationAxis, seeds: usize, out_root: Option<&Path>) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (vi, v) in ablation_variants(base, axis).into_iter().enumerate() {
        let (mut res, mut nccs) = (Vec::new(), Vec::new());
        for k in 0..seeds.max(1) {
            let mut cfg = v.config.clone();
            cfg.seed = base.seed + k as u64;
            let dir = match out_root {
                Some(root) => Some(RunDir::create(&root.join(format!("variant{vi}-seed{}", cfg.seed)), &cfg)?),
                None => None,
            };
            let (re, ncc) = score_variant(&cfg, dir.as_ref())?;
            log::info!("{:?} seed {}: RE {re:.4} NCC {ncc:.4}", v.cells, cfg.seed);
            res.push(re);
            nccs.push(ncc);
        }
        rows.push(AblationRow { cells: v.cells, re: MeanStd::of(&res), ncc: MeanStd::of(&nccs) });
    }
    Ok(rows)
}

pub fn ablation_table(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let mut cols: Vec<String> = ablation_columns(axis).into_iter().map(String::from).collect();
    cols.push("RE ↓".into());
    cols.push("NCC ↑".into());
    let mut s = String::new();
    let _ = writeln!(s, "| {} |", cols.join(" | "));
    let _ = writeln!(s, "|{}", cols.iter().map(|_| "---|").collect::<String>());
    for r in rows {
        let mut cells = r.cells.clone();
        cells.push(format!("{:.4} ± {:.4}", r.re.mean, r.re.std));
        cells.push(format!("{:.4} ± {:.4}", r.ncc.mean, r.ncc.std));
        let _ = writeln!(s, "| {} |", cells.join(" | "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::default()
            .with_overrides(&[
                "image_size=32",
                "model.widths=[4,8,8,8,8]",
                "train.overfit=2",
                "optim.steps=3",
                "optim.batch_size=2",
                "data.eval_pairs=3",
            ])
            .unwrap()
    }

    #[test]
    fn parallel_generation_matches_serial() {
        let cfg = SynthConfig { image_size: 32, ..SynthConfig::default() };
        let a = synthdata::generate_pairs(&cfg, None, 9, 5).unwrap();
        let b = generate_pairs_parallel(&cfg, None, 9, 5, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.moving.data, y.moving.data);
            assert_eq!(x.gt_field.data, y.gt_field.data);
        }
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let v = Var::from_vec(vec![3.0f32, 4.0], 2, &candle_core::Device::Cpu).unwrap();
        let loss = (v.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let mut g = loss.backward().unwrap();
        let before = clip_gradients(&mut g, std::slice::from_ref(&v), 1.0).unwrap();
        assert!((before - 5.0).abs() < 1e-6);
        let after = to_f64_vec(g.get(v.as_tensor()).unwrap()).unwrap();
        assert!((after[0] - 0.6).abs() < 1e-6 && (after[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn run_directory_is_complete() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let rd = RunDir::create(dir.path(), &cfg).unwrap();
        let out = train(&cfg, Some(&rd)).unwrap();
        assert_eq!(out.reports.len(), 3);
        let log = fs::read_to_string(rd.metrics_path()).unwrap();
        assert_eq!(log.lines().count(), 3);
        let first: LossReport = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first, out.reports[0]);
        assert!(rd.final_checkpoint().is_file());
        assert_eq!(RunConfig::load(&rd.config_path()).unwrap(), cfg);
        assert_eq!(fs::read_to_string(rd.root.join("config_hash")).unwrap().trim(), cfg.config_hash());

        let model = load_checkpoint(&cfg, &rd.final_checkpoint()).unwrap();
        let (recs, gates) = evaluate_with_gates(&model, &eval_pairs(&cfg).unwrap()).unwrap();
        assert_eq!(recs.len(), 3);
        let summary = write_eval(&dir.path().join("eval"), &recs, gates.as_ref(), &cfg.config_hash()).unwrap();
        assert!(dir.path().join("eval/gates.json").is_file());
        let back = metrics::read_records_csv(File::open(dir.path().join("eval/eval.csv")).unwrap()).unwrap();
        assert_eq!(back.len(), 3);
        assert!((summary.re.mean - MeanStd::of(&back.iter().map(|r| r.re).collect::<Vec<_>>()).mean).abs() < 1e-9);

        let mut other = cfg.clone();
        other.model.widths = [4, 8, 8, 8, 16];
        assert!(matches!(load_checkpoint(&other, &rd.final_checkpoint()), Err(HrError::Config(_))));
    }

    #[test]
    fn identity_pairs_evaluate_to_zero_error() {
        let mut cfg = tiny();
        cfg.data.rigid = synthdata::RigidRanges::zero();
        cfg.data.elastic_alpha = 0.0;
        let model = HrNet::new(&cfg, DType::F32).unwrap();
        let recs = evaluate(&model, &eval_pairs(&cfg).unwrap()).unwrap();
        let s = EvalSummary::from_records(&recs, "x");
        assert_eq!((s.re.mean, s.re.std), (0.0, 0.0));
    }

    #[test]
    fn ablation_axes_enumerate_table_rows() {
        let base = RunConfig::default();
        assert_eq!(ablation_variants(&base, AblationAxis::Msbn).len(), 3);
        assert_eq!(ablation_variants(&base, AblationAxis::Cdap).len(), 2);
        let losses = ablation_variants(&base, AblationAxis::Losses);
        assert_eq!(losses.len(), 5);
        assert!(!losses[0].config.losses.ccd && losses[4].config.losses.tri);
        let steps: Vec<(String, usize, usize)> = ablation_variants(&base, AblationAxis::Steps)
            .into_iter()
            .map(|v| (v.cells[0].clone(), v.config.hppm.n_rigid, v.config.hppm.n_nonrigid))
            .collect();
        assert_eq!(steps.len(), 10);
        assert!(steps.iter().all(|(_, r, n)| r + n == 5));
        assert_eq!(steps[0].1, 5);
        assert_eq!(steps[5].1, 0);
        assert!("bogus".parse::<AblationAxis>().is_err());
        let table = ablation_table(
            AblationAxis::Cdap,
            &[AblationRow { cells: vec!["(1)".into(), "Ours".into()], re: MeanStd::of(&[1.0]), ncc: MeanStd::of(&[0.5]) }],
        );
        assert_eq!(table.lines().count(), 3);
    }
}
