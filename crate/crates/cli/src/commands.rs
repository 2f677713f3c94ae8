use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;

use mixq_core::data::{self, latest_window, window, window_with_scaler, MinMaxScaler, Split, TimeSeries, WindowedDataset};
use mixq_core::estimate::OverheadRule;
use mixq_core::kb::{self, KnowledgeDatabase};
use mixq_core::model::{
    forward_integer, load_model, predict, quantize_model, save_model, FloatModel, ModelConfig, ModelFile, NoQuant, StoredModel,
};
use mixq_core::search::{self, CandidateSet, Execution, SearchParams, SearchRun, Thresholds};
use mixq_core::train::{self, TrainConfig, TrainReport};
use mixq_core::{BitwidthCombination, Bitwidth, ComponentId, EstimateOptions, ResourceKind};

use crate::args::*;
use crate::{Ctx, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub(crate) fn emit_json(ctx: &mut Ctx, value: &impl Serialize) -> Result<()> {
    writeln!(ctx.out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub(crate) fn write_json_file(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub(crate) fn load_kb(path: Option<&PathBuf>) -> Result<KnowledgeDatabase> {
    match path {
        Some(p) => kb::load(p).with_context(|| format!("loading knowledge database {}", p.display())),
        None => Ok(kb::bundled().clone()),
    }
}

pub(crate) fn estimate_options(s: &KbSource) -> EstimateOptions {
    let overhead_rule = match s.overhead_rule {
        OverheadColumn::Max => OverheadRule::MaxBitwidth,
        OverheadColumn::Mode => OverheadRule::Mode,
        OverheadColumn::PerResourceMax => OverheadRule::PerResourceMax,
    };
    EstimateOptions { include_overhead: s.overhead, overhead_rule }
}

pub(crate) fn thresholds(t: &ThresholdArgs) -> Result<Thresholds> {
    Thresholds::percent(t.t_luts, t.t_dram, t.t_bram, t.t_dsps).map_err(|e| usage(e.to_string()))
}

pub(crate) fn check_fraction(f: f64) -> Result<Split> {
    if !(0.0..1.0).contains(&f) {
        return Err(usage(format!("--test-fraction {f} must lie in [0, 1)")));
    }
    Ok(Split::Auto(f))
}

fn header(text: &str) -> Vec<String> {
    text.lines().next().unwrap_or("").split(',').map(|h| h.trim().trim_matches('"').to_string()).collect()
}

/// The explicit timestamp column, else a column literally named `timestamp`.
fn timestamp_column(text: &str, explicit: Option<&String>) -> Option<String> {
    explicit.cloned().or_else(|| header(text).into_iter().find(|h| h == "timestamp"))
}

pub(crate) fn load_series(d: &DataArgs) -> Result<TimeSeries> {
    let text = read_text(&d.data)?;
    let ts = timestamp_column(&text, d.timestamp.as_ref());
    let target = match &d.target {
        Some(t) => t.clone(),
        None => header(&text)
            .into_iter()
            .rfind(|h| Some(h) != ts.as_ref())
            .ok_or_else(|| data::DataError::Empty("the CSV has no columns".into()))?,
    };
    data::ingest(&text, &target, ts.as_deref(), d.features.as_deref()).with_context(|| format!("reading {}", d.data.display()))
}

/// Reads a CSV with the columns a stored scaler was fitted on.
fn load_series_for(path: &Path, timestamp: Option<&String>, scaler: &MinMaxScaler) -> Result<TimeSeries> {
    let text = read_text(path)?;
    let ts = timestamp_column(&text, timestamp);
    let target = &scaler.columns[scaler.target];
    data::ingest(&text, target, ts.as_deref(), Some(&scaler.columns)).with_context(|| format!("reading {}", path.display()))
}

pub(crate) fn model_config(m: &ModelArgs, columns: usize) -> Result<ModelConfig> {
    let input_dim = match m.m.as_str() {
        "auto" => columns,
        s => {
            let v: usize = s.parse().map_err(|_| usage(format!("--m expects `auto` or an integer, found `{s}`")))?;
            if v != columns {
                return Err(usage(format!("--m {v} does not match the {columns} data columns")));
            }
            v
        }
    };
    ModelConfig::new(m.n, input_dim, m.d_model).map_err(|e| usage(e.to_string()))
}

pub(crate) fn train_config(m: &ModelArgs, seed: u64, qat: Option<BitwidthCombination>) -> Result<TrainConfig> {
    let cfg = TrainConfig { epochs: m.epochs, patience: m.patience.min(m.epochs), batch_size: m.batch_size, lr: m.lr, seed, qat, ..Default::default() };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

pub(crate) fn predict_stored(model: &StoredModel, x: &mixq_core::model::Mat, batch: usize) -> Result<Vec<f64>> {
    Ok(match model {
        StoredModel::Float(m) => predict(m, x, batch, &mut NoQuant)?,
        StoredModel::Quantized(q) => forward_integer(q, &q.quantize_input(x)?, batch)?,
    })
}

pub(crate) fn rmse_on(model: &StoredModel, ds: &WindowedDataset, range: std::ops::Range<usize>) -> Result<f64> {
    let (x, y) = ds.subset(range);
    let p = predict_stored(model, &x, y.len())?;
    Ok(data::rmse(&p, &y, &ds.scaler)?)
}

fn stored_config(m: &StoredModel) -> ModelConfig {
    match m {
        StoredModel::Float(f) => f.config,
        StoredModel::Quantized(q) => q.config,
    }
}

fn load_model_file(path: &Path) -> Result<(StoredModel, MinMaxScaler)> {
    let file = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
    let scaler = file.scaler.ok_or(data::DataError::Unfitted).with_context(|| format!("{} stores no scaler", path.display()))?;
    Ok((file.model, scaler))
}

pub(crate) fn kb(ctx: &mut Ctx, action: KbAction) -> Result<()> {
    match action {
        KbAction::Build { reports, out } => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&reports)
                .with_context(|| format!("reading {}", reports.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            files.retain(|p| p.extension().is_some_and(|e| e == "csv"));
            files.sort();
            let parsed = files
                .iter()
                .map(|p| kb::parse_report(&read_text(p)?).with_context(|| format!("parsing {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let db = kb::aggregate(&parsed)?;
            kb::save(&db, &out)?;
            if ctx.json {
                emit_json(ctx, &json!({ "out": out, "reports": parsed.len(), "seq_lens": db.seq_lens() }))
            } else {
                writeln!(ctx.out, "aggregated {} reports for n = {:?} into {}", parsed.len(), db.seq_lens(), out.display())?;
                Ok(())
            }
        }
        KbAction::Validate { file } => {
            let db = load_kb(Some(&file))?;
            let per_n = db.len() / db.seq_lens().len().max(1);
            if ctx.json {
                emit_json(ctx, &json!({ "valid": true, "version": kb::FORMAT_VERSION, "seq_lens": db.seq_lens(), "entries_per_seq_len": per_n }))
            } else {
                writeln!(ctx.out, "valid: n = {:?}, {per_n} entries each", db.seq_lens())?;
                Ok(())
            }
        }
        KbAction::Show { file, n, component } => {
            let comps: Vec<ComponentId> = match component {
                Some(c) => vec![c.parse().map_err(|e: kb::KbError| usage(e.to_string()))?],
                None => ComponentId::ALL.to_vec(),
            };
            let db = load_kb(file.as_ref())?;
            db.table(n)?;
            show_table(ctx, &db, n, &comps)
        }
        KbAction::Export { out } => {
            kb::save(kb::bundled(), &out)?;
            if ctx.json {
                emit_json(ctx, &json!({ "out": out }))
            } else {
                writeln!(ctx.out, "wrote {}", out.display())?;
                Ok(())
            }
        }
    }
}

fn show_table(ctx: &mut Ctx, db: &KnowledgeDatabase, n: u32, comps: &[ComponentId]) -> Result<()> {
    if ctx.json {
        let mut m = serde_json::Map::new();
        for &c in comps {
            let mut res = serde_json::Map::new();
            for r in ResourceKind::ALL {
                let mut cells = serde_json::Map::new();
                for b in Bitwidth::ALL {
                    cells.insert(b.to_string(), json!(db.lookup(n, c, r, b)?.as_percent()));
                }
                res.insert(r.name().into(), cells.into());
            }
            m.insert(c.name().into(), res.into());
        }
        return emit_json(ctx, &json!({ "n": n, "components": m }));
    }
    writeln!(ctx.out, "{:<16} {:<5} {:>6} {:>6} {:>6}", "component", "res", "4-bit", "6-bit", "8-bit")?;
    for &c in comps {
        for r in ResourceKind::ALL {
            let v: Vec<String> = Bitwidth::ALL.iter().map(|&b| db.lookup(n, c, r, b).map(|t| t.to_string())).collect::<Result<_, _>>()?;
            writeln!(ctx.out, "{:<16} {:<5} {:>6} {:>6} {:>6}", c.name(), r.name(), v[0], v[1], v[2])?;
        }
    }
    Ok(())
}

pub(crate) fn estimate(ctx: &mut Ctx, a: EstimateArgs) -> Result<()> {
    let db = load_kb(a.source.kb.as_ref())?;
    let e = mixq_core::estimate(&db, a.n, &a.combo, estimate_options(&a.source))?;
    if ctx.json {
        return emit_json(ctx, &e);
    }
    writeln!(ctx.out, "n = {}, combo {} (score {})", a.n, a.combo, a.combo.score())?;
    for r in ResourceKind::ALL {
        let label = match r {
            ResourceKind::Luts => "LUTs",
            ResourceKind::Dram => "DRAM",
            ResourceKind::Bram => "BRAM",
            ResourceKind::Dsps => "DSPs",
        };
        writeln!(ctx.out, "{label} {}", e.get(r))?;
    }
    Ok(())
}

/// The documented search output schema.
pub(crate) fn search_json(run: &SearchRun) -> serde_json::Value {
    json!({
        "total": run.result.total_count,
        "passed": run.result.filtered_count,
        "reduction_pct": run.result.reduction_pct_rounded(),
        "selected": run.result.selected,
    })
}

pub(crate) fn search(ctx: &mut Ctx, a: SearchArgs) -> Result<()> {
    let thresholds = thresholds(&a.thresholds)?;
    if a.top == 0 {
        return Err(usage("--top must be at least 1"));
    }
    let bins = a.bins.unwrap_or(20);
    if bins == 0 {
        return Err(usage("--bins must be at least 1"));
    }
    let db = load_kb(a.source.kb.as_ref())?;
    let candidates = match &a.combos {
        Some(p) => Some(CandidateSet::parse(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?),
        None => None,
    };
    let params = SearchParams { seq_len: a.n, thresholds, top_k: a.top, opts: estimate_options(&a.source), exec: Execution::Parallel };
    let run = ctx.compute(|| search::search(&db, &params, candidates.as_ref()))?;
    let value = search_json(&run);
    if let Some(out) = &a.out {
        write_json_file(out, &value)?;
    }
    if let Some(r) = a.histogram {
        write!(ctx.out, "{}", search::histogram_csv(&search::histogram(&run.filtered, r, bins)))?;
        return Ok(());
    }
    if ctx.json {
        return emit_json(ctx, &value);
    }
    let res = &run.result;
    writeln!(
        ctx.out,
        "{} combinations, {} passed, reduction {:.1}%",
        res.total_count,
        res.filtered_count,
        res.reduction_pct_rounded()
    )?;
    writeln!(ctx.out, "{:>4}  {:<20} {:>5} {:>6} {:>6} {:>6} {:>6}", "rank", "combo", "score", "LUTs", "DRAM", "BRAM", "DSPs")?;
    for (i, c) in res.selected.iter().enumerate() {
        let e = c.estimate;
        writeln!(ctx.out, "{:>4}  {:<20} {:>5} {:>6} {:>6} {:>6} {:>6}", i + 1, c.combo.to_string(), c.score, e.luts, e.dram, e.bram, e.dsps)?;
    }
    writeln!(ctx.err, "search took {:.1} ms", run.elapsed.as_secs_f64() * 1e3)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    best_epoch: usize,
    best_val_loss: f64,
    stop_reason: train::StopReason,
    epochs_run: usize,
    test_rmse: f64,
    test_pairs: usize,
    out: &'a Path,
}

/// Trains a fresh model on `ds` and returns it with its report.
pub(crate) fn fit(ctx: &Ctx, ds: &WindowedDataset, config: ModelConfig, cfg: &TrainConfig) -> Result<(FloatModel, TrainReport)> {
    let init = FloatModel::init(config, cfg.seed)?;
    Ok(ctx.compute(|| train::train(init, ds, cfg))?)
}

pub(crate) fn train(ctx: &mut Ctx, a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a.model, ctx.seed, a.qat)?;
    let split = check_fraction(a.data.test_fraction)?;
    let series = load_series(&a.data)?;
    let config = model_config(&a.model, series.width())?;
    let ds = window(&series, config.seq_len, split)?;
    let (model, report) = fit(ctx, &ds, config, &cfg)?;
    let stored = StoredModel::Float(model);
    let test_rmse = rmse_on(&stored, &ds, ds.test.clone())?;
    save_model(&a.out, &ModelFile { model: stored, scaler: Some(ds.scaler.clone()) })?;
    if let Some(p) = &a.report {
        write_json_file(p, &report)?;
    }
    let summary = TrainSummary {
        best_epoch: report.best_epoch,
        best_val_loss: report.best_val_loss,
        stop_reason: report.stop_reason,
        epochs_run: report.epochs.len(),
        test_rmse,
        test_pairs: ds.test.len(),
        out: &a.out,
    };
    if ctx.json {
        return emit_json(ctx, &summary);
    }
    writeln!(
        ctx.out,
        "trained {} epochs ({:?}), best epoch {} with validation loss {:.6}",
        summary.epochs_run, summary.stop_reason, summary.best_epoch, summary.best_val_loss
    )?;
    writeln!(ctx.out, "test RMSE {:.4} over {} pairs; model written to {}", test_rmse, ds.test.len(), a.out.display())?;
    Ok(())
}

pub(crate) fn quantize(ctx: &mut Ctx, a: QuantizeArgs) -> Result<()> {
    let split = check_fraction(a.test_fraction)?;
    let (model, scaler) = load_model_file(&a.model)?;
    let StoredModel::Float(model) = model else {
        return Err(usage(format!("{} is already quantized", a.model.display())));
    };
    let series = load_series_for(&a.data, a.timestamp.as_ref(), &scaler)?;
    let ds = window_with_scaler(&series, model.config.seq_len, split, &scaler)?;
    let (cx, cy) = ds.subset(ds.train.clone());
    let q = ctx.compute(|| quantize_model(&model, &a.combo, &cx, cy.len()))?;
    let stored = StoredModel::Quantized(q);
    let test_rmse = rmse_on(&stored, &ds, ds.test.clone())?;
    save_model(&a.out, &ModelFile { model: stored, scaler: Some(scaler) })?;
    if ctx.json {
        return emit_json(ctx, &json!({ "combo": a.combo, "test_rmse": test_rmse, "test_pairs": ds.test.len(), "out": a.out }));
    }
    writeln!(ctx.out, "quantized at {}; integer test RMSE {:.4}; written to {}", a.combo, test_rmse, a.out.display())?;
    Ok(())
}

pub(crate) fn eval(ctx: &mut Ctx, a: EvalArgs) -> Result<()> {
    let split = check_fraction(a.test_fraction)?;
    let (model, scaler) = load_model_file(&a.model)?;
    let target = &scaler.columns[scaler.target];
    if let Some(t) = a.target.as_ref().filter(|t| *t != target) {
        return Err(usage(format!("the model predicts `{target}`, not `{t}`")));
    }
    let series = load_series_for(&a.data, a.timestamp.as_ref(), &scaler)?;
    let ds = window_with_scaler(&series, stored_config(&model).seq_len, split, &scaler)?;
    let range = if a.all { 0..ds.len() } else { ds.test.clone() };
    let pairs = range.len();
    let rmse = ctx.compute(|| rmse_on(&model, &ds, range))?;
    if ctx.json {
        return emit_json(ctx, &json!({ "rmse": rmse, "pairs": pairs }));
    }
    writeln!(ctx.out, "RMSE {rmse:.4} over {pairs} pairs")?;
    Ok(())
}

pub(crate) fn infer(ctx: &mut Ctx, a: InferArgs) -> Result<()> {
    let (model, scaler) = load_model_file(&a.model)?;
    let series = load_series_for(&a.data, a.timestamp.as_ref(), &scaler)?;
    let x = latest_window(&series, stored_config(&model).seq_len, &scaler)?;
    let z = predict_stored(&model, &x, 1)?[0];
    let forecast = scaler.inverse_target(z)?;
    let target = &scaler.columns[scaler.target];
    if ctx.json {
        return emit_json(ctx, &json!({ "target": target, "forecast": forecast }));
    }
    writeln!(ctx.out, "next {target}: {forecast:.4}")?;
    Ok(())
}

pub(crate) fn synth(ctx: &mut Ctx, a: SynthArgs) -> Result<()> {
    if a.points == 0 {
        return Err(usage("--points must be positive"));
    }
    std::fs::write(&a.out, data::synthetic_csv(a.points, ctx.seed)).with_context(|| format!("writing {}", a.out.display()))?;
    if ctx.json {
        return emit_json(ctx, &json!({ "out": a.out, "points": a.points, "seed": ctx.seed }));
    }
    writeln!(ctx.out, "wrote {} points to {}", a.points, a.out.display())?;
    Ok(())
}
