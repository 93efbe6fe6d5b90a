//! Experiment orchestration: train / eval / diagnose / sweep-eps / report.
//!
//! Every command is idempotent: outputs carry the config hash, a command
//! whose outputs already exist for the current hash is a no-op unless
//! forced, and grid cells are computed in a fixed order so identical runs
//! produce byte-identical tables. Timestamps live only in `run_meta.json`.
//!
//! Output layout under the configured directory:
//!
//! ```text
//! run_meta.json                      last command, config hash, timestamp
//! checkpoints/<train_hash>/*.ckpt
//! records.csv / records.jsonl        EvalRecords over the full grid
//! confidence_hist.csv                100-bin reliability histogram per record
//! diagnostics.csv / .jsonl           discrepancy vs Brier per (mode, layer, split)
//! eigenspectra.csv / .jsonl          covariance eigenvalues per (mode, layer, source)
//! activation_hist.csv / .jsonl       per-channel activation histograms
//! eps_sweep.csv / .jsonl             ε grid on the unshifted test set
//! report/summary_by_severity.csv     median/quartiles/min/max per method × severity
//! report/summary.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, OUTPUT_SCHEMA_VERSION};
use crate::data::Dataset;
use crate::diagnostics::{
    covariance_eigenspectrum, gaussian_kl_discrepancy, histogram_dump, spearman, summarize_rows,
    ActivationSummary,
};
use crate::error::{Error, Result};
use crate::methods::{EvalOptions, EvalRecord, MethodBase, MethodSpec};
use crate::model::{train, Checkpoint, Model};
use crate::norm::BnMode;
use crate::seeding::member_seed;
use crate::shift::build_split;
use crate::tensor::{Scalar, Tensor};

/// A harness bound to one config, output dir, and worker count.
pub struct Harness {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub workers: usize,
    pub force: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagRow {
    pub mode: String,
    pub layer: String,
    pub shift_kind: String,
    pub severity: f64,
    pub discrepancy: Scalar,
    pub brier: Scalar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigRow {
    pub mode: String,
    pub layer: String,
    pub source: String,
    pub shift_kind: String,
    pub severity: f64,
    pub index: usize,
    pub eigenvalue: Scalar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActHistRow {
    pub mode: String,
    pub layer: String,
    pub source: String,
    pub channel: usize,
    pub bin: usize,
    pub lo: Scalar,
    pub hi: Scalar,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsRow {
    pub method: String,
    pub seed: u64,
    pub eps: Scalar,
    pub multiplier: Scalar,
    pub accuracy: Scalar,
    pub ece: Scalar,
    pub brier: Scalar,
    pub brier_per_class: Scalar,
    pub nll: Scalar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub batch_size: usize,
    pub severity: f64,
    pub metric: String,
    pub n: usize,
    pub median: Scalar,
    pub q1: Scalar,
    pub q3: Scalar,
    pub min: Scalar,
    pub max: Scalar,
}

impl Harness {
    pub fn new(
        cfg: ExperimentConfig,
        out_override: Option<PathBuf>,
        seed_override: Option<u64>,
        workers: usize,
        force: bool,
    ) -> Result<Self> {
        let mut cfg = cfg;
        if let Some(seed) = seed_override {
            cfg.train.seeds = vec![seed];
        }
        cfg.validate()?;
        let out = out_override.unwrap_or_else(|| cfg.output.dir.clone());
        Ok(Harness { cfg, out, workers, force })
    }

    pub fn from_config_path(
        path: &Path,
        out_override: Option<PathBuf>,
        seed_override: Option<u64>,
        workers: usize,
        force: bool,
    ) -> Result<Self> {
        Harness::new(ExperimentConfig::from_path(path)?, out_override, seed_override, workers, force)
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        if self.workers == 0 {
            return f();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .expect("thread pool");
        pool.install(f)
    }

    fn write_run_meta(&self, command: &str) -> Result<()> {
        #[derive(Serialize)]
        struct RunMeta<'a> {
            schema_version: u32,
            config_hash: String,
            name: &'a str,
            crate_version: &'a str,
            command: &'a str,
            unix_ms: u128,
        }
        let meta = RunMeta {
            schema_version: OUTPUT_SCHEMA_VERSION,
            config_hash: self.cfg.config_hash(),
            name: &self.cfg.name,
            crate_version: env!("CARGO_PKG_VERSION"),
            command,
            unix_ms: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
        };
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(
            self.out.join("run_meta.json"),
            serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )?;
        Ok(())
    }

    /// True when `path` exists and its first data row carries the current
    /// config hash (hash is always the second CSV column).
    fn up_to_date(&self, path: &Path) -> bool {
        if self.force {
            return false;
        }
        let Ok(text) = std::fs::read_to_string(path) else {
            return false;
        };
        let hash = self.cfg.config_hash();
        match text.lines().nth(1) {
            Some(line) => line.split(',').nth(1) == Some(hash.as_str()),
            None => false,
        }
    }

    // ── checkpoints ──────────────────────────────────────────────────────

    fn ckpt_dir(&self) -> PathBuf {
        self.out.join("checkpoints").join(self.cfg.train_hash())
    }

    fn single_ckpt_path(&self, seed: u64) -> PathBuf {
        self.ckpt_dir().join(format!("single-s{seed}.ckpt"))
    }

    fn member_ckpt_path(&self, seed: u64, member: usize) -> PathBuf {
        self.ckpt_dir().join(format!("ens-s{seed}-m{member}.ckpt"))
    }

    /// Train every checkpoint the method list needs: one single model per
    /// seed, plus ensemble members when any method is an ensemble. Existing
    /// checkpoints under the current train hash are reused unless forced.
    pub fn cmd_train(&self) -> Result<Vec<PathBuf>> {
        self.write_run_meta("train")?;
        let data = self.cfg.resolve_data()?;
        let members = self.cfg.max_ensemble_members();

        let mut jobs: Vec<(u64, Option<usize>, PathBuf)> = Vec::new();
        for &seed in &self.cfg.train.seeds {
            jobs.push((seed, None, self.single_ckpt_path(seed)));
            for m in 0..members {
                jobs.push((seed, Some(m), self.member_ckpt_path(seed, m)));
            }
        }
        std::fs::create_dir_all(self.ckpt_dir())?;

        let force = self.force;
        let cfg = &self.cfg;
        let train_data = &data.train;
        let paths = self.install(|| {
            jobs.par_iter()
                .map(|(seed, member, path)| {
                    if !force && path.exists() && Checkpoint::load(path).is_ok() {
                        return Ok(path.clone());
                    }
                    let model_seed = match member {
                        None => *seed,
                        Some(m) => member_seed(*seed, *m),
                    };
                    let spec = cfg.model_spec(model_seed)?;
                    let tc = cfg.train_config(model_seed)?;
                    let ckpt = train(&spec, &tc, train_data)?;
                    ckpt.save(path)?;
                    Ok(path.clone())
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(paths)
    }

    /// Load the models a method needs for one grid seed.
    fn load_models(&self, method: &MethodSpec, seed: u64) -> Result<Vec<Model>> {
        let paths: Vec<PathBuf> = match method.base {
            MethodBase::Single => vec![self.single_ckpt_path(seed)],
            MethodBase::Ensemble { members } => {
                (0..members).map(|m| self.member_ckpt_path(seed, m)).collect()
            }
        };
        paths
            .iter()
            .map(|p| {
                if !p.exists() {
                    return Err(Error::MissingArtifact(format!(
                        "checkpoint {} not found; run the train command first",
                        p.display()
                    )));
                }
                Checkpoint::load(p)?.to_model()
            })
            .collect()
    }

    fn build_shift_splits(&self, data: &crate::config::ResolvedData) -> Result<Vec<Dataset>> {
        self.cfg
            .shift_cells()?
            .iter()
            .map(|spec| build_split(&data.test, spec, data.marginals.as_ref()))
            .collect()
    }

    // ── eval ─────────────────────────────────────────────────────────────

    /// Run the full method × shift × severity × batch-size × seed grid.
    pub fn cmd_eval(&self) -> Result<Vec<EvalRecord>> {
        self.write_run_meta("eval")?;
        let records_path = self.out.join("records.csv");
        if self.up_to_date(&records_path) {
            eprintln!("eval: records up to date for config {} (use --force)", self.cfg.config_hash());
            return self.read_records();
        }
        let data = self.cfg.resolve_data()?;
        let splits = self.build_shift_splits(&data)?;
        let methods: Vec<MethodSpec> =
            self.cfg.methods.iter().map(|m| m.to_spec()).collect::<Result<Vec<_>>>()?;

        // base models loaded once per (seed, method-shape); cells clone them
        let mut cells = Vec::new();
        for &seed in &self.cfg.train.seeds {
            for method in &methods {
                let base = self.load_models(method, seed)?;
                for split_idx in 0..splits.len() {
                    for &t in &self.cfg.eval.batch_sizes {
                        cells.push((seed, method.clone(), base.clone(), split_idx, t));
                    }
                }
            }
        }
        let num_bins = self.cfg.eval.num_bins;
        let val = &data.val;
        let records: Vec<EvalRecord> = self.install(|| {
            cells
                .par_iter()
                .map(|(seed, method, base, split_idx, t)| {
                    let mut models = base.clone();
                    let opts = EvalOptions { num_bins, seed: *seed, shuffle: None };
                    crate::methods::evaluate_method(
                        method,
                        &mut models,
                        &splits[*split_idx],
                        Some(val),
                        *t,
                        &opts,
                    )
                })
                .collect::<Result<Vec<_>>>()
        })?;

        self.write_records(&records)?;
        Ok(records)
    }

    fn write_records(&self, records: &[EvalRecord]) -> Result<()> {
        let hash = self.cfg.config_hash();
        let header = "schema_version,config_hash,method,shift_kind,severity,batch_size,seed,\
                      eps,temperature,accuracy,ece,brier,brier_per_class,nll,n_examples,\
                      n_batches,last_batch_size,num_bins";
        let rows: Vec<String> = records
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    OUTPUT_SCHEMA_VERSION,
                    hash,
                    r.method,
                    r.shift_kind,
                    r.severity,
                    r.batch_size,
                    r.seed,
                    r.eps,
                    r.temperature,
                    r.accuracy,
                    r.ece,
                    r.brier,
                    r.brier_per_class,
                    r.nll,
                    r.n_examples,
                    r.n_batches,
                    r.last_batch_size,
                    r.num_bins
                )
            })
            .collect();
        write_csv(&self.out.join("records.csv"), header, &rows)?;
        write_jsonl(&self.out.join("records.jsonl"), records)?;

        let hist_header = "schema_version,config_hash,method,shift_kind,severity,batch_size,\
                           seed,bin,lo,hi,count,mean_confidence,accuracy";
        let mut hist_rows = Vec::new();
        for r in records {
            let h = &r.confidence_hist;
            for b in 0..h.num_bins {
                let (lo, hi) = h.edges(b);
                let count = h.counts[b];
                let (mean_conf, acc) = if count > 0 {
                    (h.sum_conf[b] / count as f64, h.sum_correct[b] / count as f64)
                } else {
                    (0.0, 0.0)
                };
                hist_rows.push(format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    OUTPUT_SCHEMA_VERSION,
                    hash,
                    r.method,
                    r.shift_kind,
                    r.severity,
                    r.batch_size,
                    r.seed,
                    b,
                    lo,
                    hi,
                    count,
                    mean_conf,
                    acc
                ));
            }
        }
        write_csv(&self.out.join("confidence_hist.csv"), hist_header, &hist_rows)?;
        Ok(())
    }

    /// Read back records written by `cmd_eval` (JSONL mirror).
    pub fn read_records(&self) -> Result<Vec<EvalRecord>> {
        let path = self.out.join("records.jsonl");
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
            })
            .collect()
    }

    // ── diagnostics ──────────────────────────────────────────────────────

    /// Capture spatially-averaged activation rows over a dataset in batches.
    fn capture_rows(
        &self,
        model: &Model,
        data: &Dataset,
        t: usize,
        selectors: &[String],
    ) -> Result<Vec<(String, Tensor)>> {
        let mut per_selector: Vec<Vec<Tensor>> = vec![Vec::new(); selectors.len()];
        for range in data.batch_ranges(t) {
            let idx: Vec<usize> = range.collect();
            let (x, _) = data.gather(&idx)?;
            let captured = model.capture_activations(&x, selectors, None)?;
            for (i, (_, rows)) in captured.into_iter().enumerate() {
                per_selector[i].push(rows);
            }
        }
        selectors
            .iter()
            .zip(per_selector)
            .map(|(name, parts)| {
                let refs: Vec<&Tensor> = parts.iter().collect();
                Ok((name.clone(), Tensor::concat_rows(&refs)?))
            })
            .collect()
    }

    /// Discrepancy/Brier scatter data, covariance eigenspectra, and
    /// activation histograms for the first grid seed's single model.
    pub fn cmd_diagnose(&self) -> Result<Vec<DiagRow>> {
        self.write_run_meta("diagnose")?;
        let diag_path = self.out.join("diagnostics.csv");
        if self.up_to_date(&diag_path) {
            eprintln!(
                "diagnose: outputs up to date for config {} (use --force)",
                self.cfg.config_hash()
            );
            return self.read_diag_rows();
        }
        let data = self.cfg.resolve_data()?;
        let splits = self.build_shift_splits(&data)?;
        let seed = self.cfg.train.seeds[0];
        let t = self.cfg.eval.batch_sizes[0];
        let d = &self.cfg.diagnostics;
        let selectors = d.layers.clone();
        let full_cov = |layer: &str| layer == "penultimate" || layer == "logits";

        let base = self.load_models(&MethodSpec::single("diag", BnMode::EvalEma), seed)?;
        let mut diag_rows = Vec::new();
        let mut eig_rows = Vec::new();
        let mut hist_rows = Vec::new();

        for mode_name in &d.modes {
            let mode = crate::config::parse_bn_mode(mode_name)?;
            let mut model = base[0].clone();
            if mode == BnMode::EvalFrozen {
                let first: Vec<usize> = (0..t.min(data.test.len())).collect();
                let (x, _) = data.test.gather(&first)?;
                model.freeze_stats(&x, crate::model::FrozenCapturePolicy::BatchUpstream)?;
            }
            model.set_prediction_mode(mode)?;

            // training reference, captured under the same mode
            let train_caps = self.capture_rows(&model, &data.train, t, &selectors)?;
            let mut train_summaries: BTreeMap<String, ActivationSummary> = BTreeMap::new();
            for (layer, rows) in &train_caps {
                let s = summarize_rows(
                    layer,
                    "train",
                    mode_name,
                    rows,
                    full_cov(layer),
                    d.sample_cap,
                    self.cfg.dataset.seed,
                )?;
                if full_cov(layer) {
                    for (i, v) in covariance_eigenspectrum(&s)?.into_iter().enumerate() {
                        eig_rows.push(EigRow {
                            mode: mode_name.clone(),
                            layer: layer.clone(),
                            source: "train".into(),
                            shift_kind: "identity".into(),
                            severity: 0.0,
                            index: i,
                            eigenvalue: v,
                        });
                    }
                }
                train_summaries.insert(layer.clone(), s);
            }

            for split in &splits {
                let caps = self.capture_rows(&model, split, t, &selectors)?;
                // Brier of this split under the same mode
                let mut models = vec![model.clone()];
                let method = MethodSpec {
                    bn_mode: mode,
                    ..MethodSpec::single(&format!("diag-{mode_name}"), mode)
                };
                let rec = crate::methods::evaluate_method(
                    &method,
                    &mut models,
                    split,
                    Some(&data.val),
                    t,
                    &EvalOptions { num_bins: self.cfg.eval.num_bins, seed, shuffle: None },
                )?;
                for (layer, rows) in &caps {
                    let summary = summarize_rows(
                        layer,
                        &split.meta.name,
                        mode_name,
                        rows,
                        full_cov(layer),
                        d.sample_cap,
                        self.cfg.dataset.seed,
                    )?;
                    let train_summary = &train_summaries[layer];
                    let discrepancy = gaussian_kl_discrepancy(train_summary, &summary, rows)?;
                    diag_rows.push(DiagRow {
                        mode: mode_name.clone(),
                        layer: layer.clone(),
                        shift_kind: split.meta.shift_kind.clone(),
                        severity: split.meta.severity,
                        discrepancy,
                        brier: rec.brier,
                    });
                    if full_cov(layer) {
                        for (i, v) in covariance_eigenspectrum(&summary)?.into_iter().enumerate()
                        {
                            eig_rows.push(EigRow {
                                mode: mode_name.clone(),
                                layer: layer.clone(),
                                source: split.meta.name.clone(),
                                shift_kind: split.meta.shift_kind.clone(),
                                severity: split.meta.severity,
                                index: i,
                                eigenvalue: v,
                            });
                        }
                    }
                    // overlayable histograms: train vs this split
                    let channels: Vec<usize> = d
                        .hist_channels
                        .iter()
                        .cloned()
                        .filter(|&c| c < summary.dim)
                        .collect();
                    if !channels.is_empty() {
                        for row in histogram_dump(
                            &[train_summary, &summary],
                            &channels,
                            d.hist_bins,
                        )? {
                            hist_rows.push(ActHistRow {
                                mode: mode_name.clone(),
                                layer: row.layer,
                                source: row.source,
                                channel: row.channel,
                                bin: row.bin,
                                lo: row.lo,
                                hi: row.hi,
                                count: row.count,
                            });
                        }
                    }
                }
            }
        }

        let hash = self.cfg.config_hash();
        let diag_csv: Vec<String> = diag_rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{},{}",
                    OUTPUT_SCHEMA_VERSION,
                    hash,
                    r.mode,
                    r.layer,
                    r.shift_kind,
                    r.severity,
                    r.discrepancy,
                    r.brier
                )
            })
            .collect();
        write_csv(
            &diag_path,
            "schema_version,config_hash,mode,layer,shift_kind,severity,discrepancy,brier",
            &diag_csv,
        )?;
        write_jsonl(&self.out.join("diagnostics.jsonl"), &diag_rows)?;

        let eig_csv: Vec<String> = eig_rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{},{},{}",
                    OUTPUT_SCHEMA_VERSION,
                    hash,
                    r.mode,
                    r.layer,
                    r.source,
                    r.shift_kind,
                    r.severity,
                    r.index,
                    r.eigenvalue
                )
            })
            .collect();
        write_csv(
            &self.out.join("eigenspectra.csv"),
            "schema_version,config_hash,mode,layer,source,shift_kind,severity,index,eigenvalue",
            &eig_csv,
        )?;
        write_jsonl(&self.out.join("eigenspectra.jsonl"), &eig_rows)?;

        let hist_csv: Vec<String> = hist_rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{},{},{},{}",
                    OUTPUT_SCHEMA_VERSION,
                    hash,
                    r.mode,
                    r.layer,
                    r.source,
                    r.channel,
                    r.bin,
                    r.lo,
                    r.hi,
                    r.count
                )
            })
            .collect();
        write_csv(
            &self.out.join("activation_hist.csv"),
            "schema_version,config_hash,mode,layer,source,channel,bin,lo,hi,count",
            &hist_csv,
        )?;
        write_jsonl(&self.out.join("activation_hist.jsonl"), &hist_rows)?;

        Ok(diag_rows)
    }

    pub fn read_diag_rows(&self) -> Result<Vec<DiagRow>> {
        let path = self.out.join("diagnostics.jsonl");
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
            })
            .collect()
    }

    /// Spearman rank correlation between discrepancy and Brier over the
    /// shifted (non-identity) splits of one mode/layer, from stored rows.
    pub fn discrepancy_brier_spearman(rows: &[DiagRow], mode: &str, layer: &str) -> Result<Scalar> {
        let (xs, ys): (Vec<Scalar>, Vec<Scalar>) = rows
            .iter()
            .filter(|r| r.mode == mode && r.layer == layer && r.shift_kind != "identity")
            .map(|r| (r.discrepancy, r.brier))
            .unzip();
        spearman(&xs, &ys)
    }

    // ── ε sweep ──────────────────────────────────────────────────────────

    /// ECE/accuracy/Brier across prediction-time ε values on the unshifted
    /// test set.
    pub fn cmd_sweep_eps(&self) -> Result<Vec<EpsRow>> {
        self.write_run_meta("sweep-eps")?;
        let path = self.out.join("eps_sweep.csv");
        if self.up_to_date(&path) {
            eprintln!(
                "sweep-eps: outputs up to date for config {} (use --force)",
                self.cfg.config_hash()
            );
            return self.read_eps_rows();
        }
        let data = self.cfg.resolve_data()?;
        let methods: Vec<MethodSpec> =
            self.cfg.methods.iter().map(|m| m.to_spec()).collect::<Result<Vec<_>>>()?;
        let selected: Vec<MethodSpec> = if self.cfg.sweep_eps.methods.is_empty() {
            methods.iter().filter(|m| m.base == MethodBase::Single).cloned().collect()
        } else {
            self.cfg
                .sweep_eps
                .methods
                .iter()
                .map(|name| {
                    methods.iter().find(|m| &m.name == name).cloned().ok_or_else(|| {
                        Error::Config(format!("sweep_eps references unknown method {name:?}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?
        };
        let t = self.cfg.eval.batch_sizes[0];
        let base_eps = self.cfg.model.epsilon;

        let mut cells = Vec::new();
        for &seed in &self.cfg.train.seeds {
            for method in &selected {
                let base = self.load_models(method, seed)?;
                for &mult in &self.cfg.sweep_eps.multipliers {
                    cells.push((seed, method.clone(), base.clone(), mult));
                }
            }
        }
        let num_bins = self.cfg.eval.num_bins;
        let test = &data.test;
        let val = &data.val;
        let rows: Vec<EpsRow> = self.install(|| {
            cells
                .par_iter()
                .map(|(seed, method, base, mult)| {
                    let mut models = base.clone();
                    let eps = base_eps * mult;
                    let method = MethodSpec { eps_override: Some(eps), ..method.clone() };
                    let rec = crate::methods::evaluate_method(
                        &method,
                        &mut models,
                        test,
                        Some(val),
                        t,
                        &EvalOptions { num_bins, seed: *seed, shuffle: None },
                    )?;
                    Ok(EpsRow {
                        method: method.name.clone(),
                        seed: *seed,
                        eps,
                        multiplier: *mult,
                        accuracy: rec.accuracy,
                        ece: rec.ece,
                        brier: rec.brier,
                        brier_per_class: rec.brier_per_class,
                        nll: rec.nll,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let hash = self.cfg.config_hash();
        let csv: Vec<String> = rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    OUTPUT_SCHEMA_VERSION,
                    hash,
                    r.method,
                    r.seed,
                    r.eps,
                    r.multiplier,
                    r.accuracy,
                    r.ece,
                    r.brier,
                    r.brier_per_class,
                    r.nll
                )
            })
            .collect();
        write_csv(
            &path,
            "schema_version,config_hash,method,seed,eps,multiplier,accuracy,ece,brier,\
             brier_per_class,nll",
            &csv,
        )?;
        write_jsonl(&self.out.join("eps_sweep.jsonl"), &rows)?;
        Ok(rows)
    }

    pub fn read_eps_rows(&self) -> Result<Vec<EpsRow>> {
        let path = self.out.join("eps_sweep.jsonl");
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
            })
            .collect()
    }

    // ── report ───────────────────────────────────────────────────────────

    /// Summaries grouped by method × batch size × severity, aggregated over
    /// shift kinds and seeds: median, quartiles, min, max per metric.
    /// An empty store produces empty tables with a warning, not an error.
    pub fn cmd_report(&self) -> Result<Vec<SummaryRow>> {
        self.write_run_meta("report")?;
        let records = self.read_records()?;
        if records.is_empty() {
            eprintln!("report: warning: result store is empty; emitting empty tables");
        }
        let mut groups: BTreeMap<(String, usize, String), Vec<&EvalRecord>> = BTreeMap::new();
        for r in &records {
            groups
                .entry((r.method.clone(), r.batch_size, format!("{:.6}", r.severity)))
                .or_default()
                .push(r);
        }
        let metrics: [(&str, fn(&EvalRecord) -> Scalar); 5] = [
            ("accuracy", |r| r.accuracy),
            ("ece", |r| r.ece),
            ("brier", |r| r.brier),
            ("brier_per_class", |r| r.brier_per_class),
            ("nll", |r| r.nll),
        ];
        let mut rows = Vec::new();
        for ((method, batch_size, _sev_key), recs) in &groups {
            let severity = recs[0].severity;
            for (metric, get) in &metrics {
                let mut values: Vec<Scalar> = recs.iter().map(|r| get(r)).collect();
                values.sort_by(|a, b| a.partial_cmp(b).expect("finite metrics"));
                rows.push(SummaryRow {
                    method: method.clone(),
                    batch_size: *batch_size,
                    severity,
                    metric: metric.to_string(),
                    n: values.len(),
                    median: quantile(&values, 0.5),
                    q1: quantile(&values, 0.25),
                    q3: quantile(&values, 0.75),
                    min: values[0],
                    max: *values.last().expect("nonempty"),
                });
            }
        }

        let report_dir = self.out.join("report");
        std::fs::create_dir_all(&report_dir)?;
        let hash = self.cfg.config_hash();
        let csv: Vec<String> = rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    OUTPUT_SCHEMA_VERSION,
                    hash,
                    r.method,
                    r.batch_size,
                    r.severity,
                    r.metric,
                    r.n,
                    r.median,
                    r.q1,
                    r.q3,
                    r.min,
                    r.max
                )
            })
            .collect();
        write_csv(
            &report_dir.join("summary_by_severity.csv"),
            "schema_version,config_hash,method,batch_size,severity,metric,n,median,q1,q3,min,max",
            &csv,
        )?;
        std::fs::write(
            report_dir.join("summary.json"),
            serde_json::to_string_pretty(&rows).expect("rows serialize"),
        )?;
        Ok(rows)
    }
}

/// Quantile by linear interpolation at p·(n−1) over sorted values.
pub fn quantile(sorted: &[Scalar], p: f64) -> Scalar {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = String::with_capacity(header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>() + 1);
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("row serializes"));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}
