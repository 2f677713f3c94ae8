//! Search, then quantization-aware training, integer quantization and
//! evaluation of every selected combination, with a run directory that
//! records inputs, stages and outputs.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use mixq_core::data::window;
use mixq_core::model::{quantize_model, save_model, ModelFile, StoredModel};
use mixq_core::search::{self, Execution, ScoredCandidate, SearchParams};
use mixq_core::train::{train_qat, TrainConfig};
use mixq_core::{kb, BitwidthCombination, ResourceVector};

use crate::args::PipelineArgs;
use crate::commands::{
    check_fraction, emit_json, estimate_options, fit, load_kb, load_series, model_config, rmse_on, search_json, thresholds, train_config,
    write_json_file,
};
use crate::{Ctx, UsageError};

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
struct Input {
    role: &'static str,
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Stage {
    name: String,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    kb_schema_version: u64,
    model_format_version: u32,
    created: String,
    run_id: String,
    seed: u64,
    arguments: serde_json::Value,
    inputs: Vec<Input>,
    stages: Vec<Stage>,
    outputs: Vec<String>,
    status: &'static str,
}

struct Run {
    dir: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn save(&self) -> Result<()> {
        write_json_file(&self.dir.join("manifest.json"), &self.manifest)
    }

    /// Records a stage outcome; failures mark the run failed and name the stage.
    fn stage<T>(&mut self, name: impl Into<String>, result: Result<T>) -> Result<T> {
        let name = name.into();
        match result {
            Ok(v) => {
                self.manifest.stages.push(Stage { name, status: "ok", error: None });
                self.save()?;
                Ok(v)
            }
            Err(e) => {
                self.manifest.stages.push(Stage { name: name.clone(), status: "failed", error: Some(format!("{e:#}")) });
                self.manifest.status = "failed";
                self.save()?;
                Err(e.context(format!("pipeline stage `{name}` failed")))
            }
        }
    }

    fn output(&mut self, file: &str) {
        self.manifest.outputs.push(file.to_string());
    }
}

#[derive(Debug, Serialize)]
struct CandidateReport {
    search_rank: usize,
    combo: BitwidthCombination,
    score: u32,
    estimate: ResourceVector,
    qat_best_val_loss: f64,
    test_rmse: f64,
    rmse_ratio: f64,
    model: String,
}

#[derive(Debug, Serialize)]
struct FloatReport {
    test_rmse: f64,
    best_epoch: usize,
    best_val_loss: f64,
    model: String,
}

#[derive(Debug, Serialize)]
struct Report {
    n: usize,
    thresholds: serde_json::Value,
    total: usize,
    passed: usize,
    reduction_pct: f64,
    test_pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    float: Option<FloatReport>,
    /// Ordered by measured integer-model RMSE.
    candidates: Vec<CandidateReport>,
}

fn combo_tag(c: &BitwidthCombination) -> String {
    c.bits().iter().map(u8::to_string).collect()
}

pub(crate) fn pipeline(ctx: &mut Ctx, a: PipelineArgs) -> Result<()> {
    let limits = thresholds(&a.thresholds)?;
    if a.top == 0 {
        return Err(UsageError("--top must be at least 1".into()).into());
    }
    let split = check_fraction(a.data.test_fraction)?;
    let seq_len = u32::try_from(a.model.n).map_err(|_| UsageError("--n is too large".into()))?;
    let float_cfg = train_config(&a.model, ctx.seed, None)?;

    let data_bytes = std::fs::read(&a.data.data).with_context(|| format!("reading {}", a.data.data.display()))?;
    let (kb_path, kb_hash) = match &a.source.kb {
        Some(p) => (p.display().to_string(), sha256_hex(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)),
        None => ("bundled".to_string(), sha256_hex(kb::to_json_string(kb::bundled()).as_bytes())),
    };
    let arguments = json!({
        "n": a.model.n,
        "d_model": a.model.d_model,
        "m": a.model.m,
        "epochs": a.model.epochs,
        "batch_size": a.model.batch_size,
        "lr": a.model.lr,
        "patience": float_cfg.patience,
        "top": a.top,
        "thresholds": [a.thresholds.t_luts, a.thresholds.t_dram, a.thresholds.t_bram, a.thresholds.t_dsps],
        "overhead": a.source.overhead,
        "target": a.data.target,
        "features": a.data.features,
        "test_fraction": a.data.test_fraction,
    });
    let data_hash = sha256_hex(&data_bytes);
    let run_id = sha256_hex(format!("{arguments}|{data_hash}|{kb_hash}|{}", ctx.seed).as_bytes());
    let now = chrono::Utc::now();
    let dir = match &a.run_dir {
        Some(d) => d.clone(),
        None => a.runs.join(format!("{}-{}", now.format("%Y%m%dT%H%M%SZ"), &run_id[..12])),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut run = Run {
        dir: dir.clone(),
        manifest: Manifest {
            tool: "mixq",
            version: env!("CARGO_PKG_VERSION"),
            kb_schema_version: kb::FORMAT_VERSION,
            model_format_version: mixq_core::model::MODEL_FORMAT_VERSION,
            created: now.to_rfc3339(),
            run_id,
            seed: ctx.seed,
            arguments,
            inputs: vec![
                Input { role: "data", path: a.data.data.display().to_string(), sha256: data_hash },
                Input { role: "knowledge_database", path: kb_path, sha256: kb_hash },
            ],
            stages: Vec::new(),
            outputs: Vec::new(),
            status: "running",
        },
    };
    run.save()?;

    let opts = estimate_options(&a.source);
    let searched = load_kb(a.source.kb.as_ref()).and_then(|db| {
        let params = SearchParams { seq_len, thresholds: limits, top_k: a.top, opts, exec: Execution::Parallel };
        Ok(ctx.compute(|| search::search(&db, &params, None))?)
    });
    let searched = run.stage("search", searched)?;
    let search_value = search_json(&searched);
    write_json_file(&dir.join("search.json"), &search_value)?;
    run.output("search.json");
    let selected: Vec<ScoredCandidate> = searched.result.selected.clone();

    let mut report = Report {
        n: a.model.n,
        thresholds: json!({ "luts": a.thresholds.t_luts, "dram": a.thresholds.t_dram, "bram": a.thresholds.t_bram, "dsps": a.thresholds.t_dsps }),
        total: searched.result.total_count,
        passed: searched.result.filtered_count,
        reduction_pct: searched.result.reduction_pct_rounded(),
        test_pairs: 0,
        float: None,
        candidates: Vec::new(),
    };

    if !selected.is_empty() {
        let prepared = load_series(&a.data).and_then(|s| {
            let config = model_config(&a.model, s.width())?;
            Ok((window(&s, config.seq_len, split)?, config))
        });
        let (ds, config) = run.stage("data", prepared)?;
        report.test_pairs = ds.test.len();

        let trained = fit(ctx, &ds, config, &float_cfg).and_then(|(m, r)| {
            let stored = StoredModel::Float(m);
            let rmse = rmse_on(&stored, &ds, ds.test.clone())?;
            save_model(&dir.join("float_model.json"), &ModelFile { model: stored.clone(), scaler: Some(ds.scaler.clone()) })?;
            Ok((stored, r, rmse))
        });
        let (float_model, float_report, float_rmse) = run.stage("train float", trained)?;
        run.output("float_model.json");
        writeln!(ctx.err, "float model: test RMSE {float_rmse:.4}")?;
        report.float = Some(FloatReport {
            test_rmse: float_rmse,
            best_epoch: float_report.best_epoch,
            best_val_loss: float_report.best_val_loss,
            model: "float_model.json".into(),
        });
        let StoredModel::Float(float_model) = float_model else { unreachable!("trained models are float") };

        let (cx, cy) = ds.subset(ds.train.clone());
        for (i, cand) in selected.iter().enumerate() {
            let tag = combo_tag(&cand.combo);
            let qat_cfg = TrainConfig { qat: Some(cand.combo), ..float_cfg.clone() };
            // QAT fine-tunes the float model
            let qat = ctx.compute(|| train_qat(float_model.clone(), &ds, &qat_cfg, cand.combo)).map_err(anyhow::Error::from);
            let (qat_model, qat_report) = run.stage(format!("qat {}", cand.combo), qat)?;

            let file = format!("model_{}_{tag}.json", i + 1);
            let quantized = ctx.compute(|| quantize_model(&qat_model, &cand.combo, &cx, cy.len())).map_err(anyhow::Error::from).and_then(|q| {
                let stored = StoredModel::Quantized(q);
                let rmse = ctx.compute(|| rmse_on(&stored, &ds, ds.test.clone()))?;
                save_model(&dir.join(&file), &ModelFile { model: stored, scaler: Some(ds.scaler.clone()) })?;
                Ok(rmse)
            });
            let rmse = run.stage(format!("quantize and evaluate {}", cand.combo), quantized)?;
            run.output(&file);
            writeln!(ctx.err, "{}: integer test RMSE {rmse:.4}", cand.combo)?;
            report.candidates.push(CandidateReport {
                search_rank: i + 1,
                combo: cand.combo,
                score: cand.score,
                estimate: cand.estimate,
                qat_best_val_loss: qat_report.best_val_loss,
                test_rmse: rmse,
                rmse_ratio: rmse / float_rmse,
                model: file,
            });
        }
        report.candidates.sort_by(|x, y| x.test_rmse.total_cmp(&y.test_rmse).then(x.search_rank.cmp(&y.search_rank)));
    }

    write_json_file(&dir.join("report.json"), &report)?;
    run.output("report.json");
    run.manifest.status = "complete";
    run.save()?;
    print_report(ctx, &report, &dir)
}

fn print_report(ctx: &mut Ctx, report: &Report, dir: &Path) -> Result<()> {
    if ctx.json {
        let mut v = serde_json::to_value(report)?;
        v["run_dir"] = json!(dir);
        return emit_json(ctx, &v);
    }
    writeln!(
        ctx.out,
        "{} combinations, {} passed, reduction {:.1}%",
        report.total, report.passed, report.reduction_pct
    )?;
    if let Some(f) = &report.float {
        writeln!(ctx.out, "float model test RMSE {:.4} ({} pairs)", f.test_rmse, report.test_pairs)?;
    }
    if !report.candidates.is_empty() {
        writeln!(ctx.out, "{:>4}  {:<20} {:>5} {:>6} {:>9} {:>6}", "rank", "combo", "score", "LUTs", "RMSE", "ratio")?;
    }
    for c in &report.candidates {
        writeln!(
            ctx.out,
            "{:>4}  {:<20} {:>5} {:>6} {:>9.4} {:>6.3}",
            c.search_rank,
            c.combo.to_string(),
            c.score,
            c.estimate.luts,
            c.test_rmse,
            c.rmse_ratio
        )?;
    }
    writeln!(ctx.out, "run directory: {}", dir.display())?;
    Ok(())
}
