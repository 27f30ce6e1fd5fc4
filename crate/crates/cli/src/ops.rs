//! Command bodies. Every command writes `manifest.json` into its output
//! directory before doing real work, then produces its fixed-name artifacts
//! (`policy.ckpt` / `aux.ckpt` / `report.jsonl` / `eval.json` / `bench.tsv`
//! or the five dataset TSVs).

use crate::manifest::RunManifest;
use crate::{
    AppError, AppResult, BenchArgs, EvalArgs, GenDataArgs, IngestArgs, TrainArgs, TrainAuxArgs,
};
use prefrec_core::autodiff::PlainEngine;
use prefrec_core::aux::{train_aux, AuxParams, AuxTrainConfig};
use prefrec_core::checkpoint::Checkpoint;
use prefrec_core::data::{
    generate_synthetic, ingest, load_split, make_batches, mix_seed, sample_negatives, save_split,
    BuildOptions, DatasetSplit, SplitPart, TrainingInstance,
};
use prefrec_core::eval::{evaluate, relative_report, EvalReport, RelativeReport};
use prefrec_core::policy::{
    encode_context, score_response, ParamLayout, PolicyParams, ResponseMode, TokenTable,
};
use prefrec_core::scalar::Scalar;
use prefrec_core::sharing::{
    assemble_hybrid_sets, naive_dense_oracle, top_k_count, GradientLinkage, OpCounters,
    OwnNegative,
};
use prefrec_core::trainer::{
    train_preference, train_sft, BatchRecord, EpochRecord, LossKind, OptimizerKind, TrainConfig,
    TrainReport,
};
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Batch-size ceiling for the quadratic dense oracle in `bench`.
const DENSE_ORACLE_CAP: usize = 8;

fn read_err<'a>(what: &'a str, path: &'a Path) -> impl FnOnce(std::io::Error) -> AppError + 'a {
    move |e| AppError::Data(format!("cannot read {what} at {}: {e}", path.display()))
}

fn write_err<'a>(what: &'a str, path: &'a Path) -> impl FnOnce(std::io::Error) -> AppError + 'a {
    move |e| AppError::Data(format!("cannot write {what} at {}: {e}", path.display()))
}

pub fn build_opts(
    n_neg: usize,
    candidate_size: usize,
    seed: u64,
    sliding_window: bool,
    min_interactions: usize,
) -> BuildOptions {
    BuildOptions { n_neg, candidate_size, seed, sliding_window, min_interactions }
}

// ---------------------------------------------------------------- gen-data

pub fn gen_data(a: &GenDataArgs) -> AppResult<()> {
    let opts = build_opts(a.n_neg, a.candidate_size, a.seed, a.sliding_window, a.min_interactions);
    let mut m = RunManifest::new(
        "gen-data",
        a.seed,
        serde_json::json!({
            "users": a.users, "items": a.items, "latent_dim": a.latent_dim,
            "seq_len": a.seq_len, "options": opts,
        }),
    );
    for name in ["catalog.tsv", "train.tsv", "val.tsv", "test.tsv", "pop.tsv"] {
        m.artifact(name);
    }
    m.write(&a.out).map_err(write_err("manifest", &a.out))?;
    let split = generate_synthetic(a.users, a.items, a.latent_dim, a.seq_len, a.seed, &opts)?;
    save_split(&split, &a.out)?;
    println!(
        "wrote dataset to {} ({} items; {}/{}/{} train/val/test instances)",
        a.out.display(),
        split.catalog.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(())
}

// ------------------------------------------------------------------ ingest

pub fn ingest_cmd(a: &IngestArgs) -> AppResult<()> {
    let opts = build_opts(a.n_neg, a.candidate_size, a.seed, a.sliding_window, a.min_interactions);
    let mut m = RunManifest::new("ingest", a.seed, serde_json::json!({ "options": opts }));
    m.hash_input(&a.interactions).map_err(read_err("interactions file", &a.interactions))?;
    m.hash_input(&a.items).map_err(read_err("items file", &a.items))?;
    for name in ["catalog.tsv", "train.tsv", "val.tsv", "test.tsv", "pop.tsv"] {
        m.artifact(name);
    }
    m.write(&a.out).map_err(write_err("manifest", &a.out))?;
    let outcome = ingest(&a.interactions, &a.items, &opts)?;
    save_split(&outcome.split, &a.out)?;
    println!(
        "wrote dataset to {} ({} items; {}/{}/{} train/val/test instances; {} users dropped below {} interactions)",
        a.out.display(),
        outcome.split.catalog.len(),
        outcome.split.train.len(),
        outcome.split.validation.len(),
        outcome.split.test.len(),
        outcome.dropped_users,
        a.min_interactions
    );
    Ok(())
}

// --------------------------------------------------------------- train-aux

pub fn train_aux_cmd(a: &TrainAuxArgs) -> AppResult<()> {
    let cfg = AuxTrainConfig { dim: a.dim, epochs: a.epochs, lr: a.lr, seed: a.seed };
    let mut m = RunManifest::new("train-aux", a.seed, serde_json::to_value(&cfg).unwrap());
    m.hash_dataset_dir(&a.data).map_err(read_err("dataset directory", &a.data))?;
    m.artifact("aux.ckpt");
    m.write(&a.out).map_err(write_err("manifest", &a.out))?;
    let split = load_split(&a.data)?;
    let (params, report) = train_aux::<f64>(&split.train, &split.catalog, &cfg)?;
    let path = a.out.join("aux.ckpt");
    params.to_checkpoint().save(&path)?;
    println!(
        "aux recommender: {} epochs, loss {:.6} -> {:.6}, saved {}",
        a.epochs,
        report.epoch_losses.first().copied().unwrap_or(f64::NAN),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

// ------------------------------------------------------------------- train

/// Merge the config file (if any) with explicit flag overrides.
pub fn effective_config(a: &TrainArgs) -> AppResult<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(read_err("config file", p))?;
            serde_json::from_str(&text)
                .map_err(|e| AppError::Usage(format!("bad config file {}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = &a.loss {
        cfg.loss_kind = LossKind::parse(v)
            .ok_or_else(|| AppError::Usage(format!("unknown loss {v:?}")))?;
    }
    if let Some(v) = a.n_neg {
        cfg.n_neg = v;
    }
    if let Some(v) = a.rho {
        cfg.rho = v;
    }
    if let Some(v) = a.gamma0 {
        cfg.gamma0 = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.length_norm {
        cfg.length_normalize = v;
    }
    if let Some(v) = &a.share_grad {
        cfg.gradient_linkage = GradientLinkage::parse(v)
            .ok_or_else(|| AppError::Usage(format!("unknown gradient linkage {v:?}")))?;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = &a.optimizer {
        cfg.optimizer_kind = OptimizerKind::parse(v)
            .ok_or_else(|| AppError::Usage(format!("unknown optimizer {v:?}")))?;
    }
    if let Some(v) = a.seed {
        cfg.rng_seed = v;
    }
    if let Some(v) = a.candidate_size {
        cfg.candidate_size = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_policy<T: Scalar>(path: &Path) -> AppResult<(PolicyParams<T>, ResponseMode)> {
    Ok(PolicyParams::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn load_aux<T: Scalar>(path: &Path) -> AppResult<AuxParams<T>> {
    Ok(AuxParams::from_checkpoint(&Checkpoint::load(path)?)?)
}

#[derive(Serialize)]
struct BatchLine<'a> {
    kind: &'static str,
    #[serde(flatten)]
    record: &'a BatchRecord,
}

#[derive(Serialize)]
struct EpochLine<'a> {
    kind: &'static str,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

#[derive(Serialize)]
struct RunLine<'a> {
    kind: &'static str,
    loss_kind: &'a str,
    f_calls_total: u64,
    g_calls_total: u64,
    checkpoint: &'a str,
}

fn write_report(path: &Path, report: &TrainReport, loss: LossKind, ckpt_name: &str) -> AppResult<()> {
    let mut body = String::new();
    for record in &report.batches {
        writeln!(body, "{}", serde_json::to_string(&BatchLine { kind: "batch", record }).unwrap())
            .unwrap();
    }
    for record in &report.epochs {
        writeln!(body, "{}", serde_json::to_string(&EpochLine { kind: "epoch", record }).unwrap())
            .unwrap();
    }
    let run = RunLine {
        kind: "run",
        loss_kind: loss.as_str(),
        f_calls_total: report.counters_total.f_calls,
        g_calls_total: report.counters_total.g_calls,
        checkpoint: ckpt_name,
    };
    writeln!(body, "{}", serde_json::to_string(&run).unwrap()).unwrap();
    fs::write(path, body).map_err(write_err("training report", path))
}

pub fn train_cmd(a: &TrainArgs) -> AppResult<()> {
    let cfg = effective_config(a)?;
    let mut m = RunManifest::new("train", cfg.rng_seed, serde_json::to_value(&cfg).unwrap());
    m.hash_dataset_dir(&a.data).map_err(read_err("dataset directory", &a.data))?;
    if let Some(p) = &a.config {
        m.hash_input(p).map_err(read_err("config file", p))?;
    }
    if let Some(p) = &a.sft_checkpoint {
        m.hash_input(p).map_err(read_err("SFT checkpoint", p))?;
    }
    if let Some(p) = &a.aux_checkpoint {
        m.hash_input(p).map_err(read_err("aux checkpoint", p))?;
    }
    if a.grid.is_some() {
        for v in GRID_VARIANTS {
            m.artifact(&format!("{}/policy.ckpt", v.0));
            m.artifact(&format!("{}/report.jsonl", v.0));
        }
        m.artifact("grid.tsv");
    } else {
        m.artifact("policy.ckpt");
        m.artifact("report.jsonl");
    }
    m.write(&a.out).map_err(write_err("manifest", &a.out))?;

    match a.precision.as_str() {
        "f32" => train_dispatch::<f32>(a, &cfg),
        _ => train_dispatch::<f64>(a, &cfg),
    }
}

fn train_dispatch<T: Scalar>(a: &TrainArgs, cfg: &TrainConfig) -> AppResult<()> {
    let split = load_split(&a.data)?;
    if a.grid.is_some() {
        return run_grid::<T>(a, cfg, &split);
    }
    if cfg.loss_kind == LossKind::Sft {
        let mode = ResponseMode::parse(&a.response_mode)
            .ok_or_else(|| AppError::Usage(format!("unknown response mode {:?}", a.response_mode)))?;
        let table = TokenTable::build(&split.catalog, mode)?;
        let init = PolicyParams::<T>::init(
            ParamLayout::new(table.vocab_size(), a.dim),
            T::from_f64_c(cfg.beta),
            cfg.rng_seed,
        )?;
        let (params, report) = train_sft(cfg, &split, &table, &init)?;
        finish_train_run(&a.out, &params, mode, &report, cfg.loss_kind)
    } else {
        let sft_path = a.sft_checkpoint.as_ref().ok_or_else(|| {
            AppError::Data(format!(
                "{} training starts from an SFT checkpoint; pass --sft-checkpoint (train one with `prefrec train --loss sft`)",
                cfg.loss_kind.as_str()
            ))
        })?;
        let (sft, mode) = load_policy::<T>(sft_path)?;
        let table = TokenTable::build(&split.catalog, mode)?;
        let aux = match &a.aux_checkpoint {
            Some(p) => Some(load_aux::<T>(p)?),
            None => None,
        };
        let (params, report) = train_preference(cfg, &split, &table, &sft, aux.as_ref())?;
        finish_train_run(&a.out, &params, mode, &report, cfg.loss_kind)
    }
}

fn finish_train_run<T: Scalar>(
    out: &Path,
    params: &PolicyParams<T>,
    mode: ResponseMode,
    report: &TrainReport,
    loss: LossKind,
) -> AppResult<()> {
    let ckpt = out.join("policy.ckpt");
    params.to_checkpoint(mode).save(&ckpt)?;
    write_report(&out.join("report.jsonl"), report, loss, "policy.ckpt")?;
    let last = report.epochs.last();
    println!(
        "{}: {} epochs, mean loss {} -> {}, saved {}",
        loss.as_str(),
        report.epochs.len(),
        report.epochs.first().map(|e| format!("{:.6}", e.mean_loss)).unwrap_or_else(|| "-".into()),
        last.map(|e| format!("{:.6}", e.mean_loss)).unwrap_or_else(|| "-".into()),
        ckpt.display()
    );
    Ok(())
}

// -------------------------------------------------------------------- grid

/// The ablation grid: NAPO with each mechanism switched off, plus the three
/// baseline preference losses, trained from one shared SFT checkpoint.
pub const GRID_VARIANTS: [(&str, LossKind, Option<f64>, Option<f64>); 7] = [
    // (name, loss, rho override, alpha override)
    ("napo", LossKind::Napo, None, None),
    ("napo_no_ns", LossKind::Napo, Some(0.0), None),
    ("napo_no_dyn", LossKind::Napo, None, Some(0.0)),
    ("napo_no_ns_no_dyn", LossKind::Napo, Some(0.0), Some(0.0)),
    ("sdpo", LossKind::Sdpo, Some(0.0), None),
    ("simpo", LossKind::Simpo, None, None),
    ("dpo", LossKind::Dpo, None, None),
];

fn run_grid<T: Scalar>(a: &TrainArgs, base: &TrainConfig, split: &DatasetSplit) -> AppResult<()> {
    let sft_path = a.sft_checkpoint.as_ref().ok_or_else(|| {
        AppError::Data("the ablation grid needs --sft-checkpoint".to_string())
    })?;
    let aux_path = a.aux_checkpoint.as_ref().ok_or_else(|| {
        AppError::Data("the ablation grid needs --aux-checkpoint".to_string())
    })?;
    let (sft, mode) = load_policy::<T>(sft_path)?;
    let aux = load_aux::<T>(aux_path)?;
    let table = TokenTable::build(&split.catalog, mode)?;
    let sft_eval = evaluate(&sft, &table, &split.catalog, &split.test, &split.pop_counts)?;

    let mut rows = String::from(
        "variant\thit_ratio_at_1\tvalid_ratio\tpop_bias\thit_rel_pct\tpop_bias_rel_pct\n",
    );
    writeln!(
        rows,
        "sft\t{:.6}\t{:.6}\t{:.6}\t{:.3}\t{:.3}",
        sft_eval.hit_ratio_at_1, sft_eval.valid_ratio, sft_eval.pop_bias, 0.0, 0.0
    )
    .unwrap();
    for (name, loss, rho, alpha) in GRID_VARIANTS {
        let mut cfg = base.clone();
        cfg.loss_kind = loss;
        if let Some(r) = rho {
            cfg.rho = r;
        }
        if let Some(al) = alpha {
            cfg.alpha = al;
        }
        let (params, report) = train_preference(&cfg, split, &table, &sft, Some(&aux))?;
        let dir = a.out.join(name);
        fs::create_dir_all(&dir).map_err(write_err("grid variant directory", &dir))?;
        params.to_checkpoint(mode).save(&dir.join("policy.ckpt"))?;
        write_report(&dir.join("report.jsonl"), &report, loss, "policy.ckpt")?;
        let ev = evaluate(&params, &table, &split.catalog, &split.test, &split.pop_counts)?;
        let rel = relative_report(&ev, &sft_eval)?;
        writeln!(
            rows,
            "{name}\t{:.6}\t{:.6}\t{:.6}\t{:.3}\t{:.3}",
            ev.hit_ratio_at_1, ev.valid_ratio, ev.pop_bias, rel.hit_ratio_at_1_pct, rel.pop_bias_pct
        )
        .unwrap();
        println!("grid {name}: hit@1 {:.4} (sft {:.4})", ev.hit_ratio_at_1, sft_eval.hit_ratio_at_1);
    }
    let path = a.out.join("grid.tsv");
    fs::write(&path, rows).map_err(write_err("grid table", &path))?;
    println!("wrote {}", path.display());
    Ok(())
}

// -------------------------------------------------------------------- eval

#[derive(Serialize)]
struct EvalFile {
    report: EvalReport,
    baseline: Option<EvalReport>,
    relative: Option<RelativeReport>,
}

pub fn eval_cmd(a: &EvalArgs) -> AppResult<()> {
    let mut m = RunManifest::new("eval", 0, serde_json::json!({ "split": a.split }));
    m.hash_dataset_dir(&a.data).map_err(read_err("dataset directory", &a.data))?;
    m.hash_input(&a.checkpoint).map_err(read_err("policy checkpoint", &a.checkpoint))?;
    if let Some(p) = &a.baseline {
        m.hash_input(p).map_err(read_err("baseline checkpoint", p))?;
    }
    m.artifact("eval.json");
    m.write(&a.out).map_err(write_err("manifest", &a.out))?;

    match a.precision.as_str() {
        "f32" => eval_dispatch::<f32>(a),
        _ => eval_dispatch::<f64>(a),
    }
}

fn eval_dispatch<T: Scalar>(a: &EvalArgs) -> AppResult<()> {
    let split = load_split(&a.data)?;
    let part = match a.split.as_str() {
        "train" => SplitPart::Train,
        "val" => SplitPart::Validation,
        _ => SplitPart::Test,
    };
    let (params, mode) = load_policy::<T>(&a.checkpoint)?;
    let table = TokenTable::build(&split.catalog, mode)?;
    let report = evaluate(&params, &table, &split.catalog, split.part(part), &split.pop_counts)?;
    print!("{}", report.render_table());

    let (baseline, relative) = match &a.baseline {
        Some(p) => {
            let (b, bmode) = load_policy::<T>(p)?;
            let btable = TokenTable::build(&split.catalog, bmode)?;
            let brep = evaluate(&b, &btable, &split.catalog, split.part(part), &split.pop_counts)?;
            let rel = relative_report(&report, &brep)?;
            println!(
                "vs baseline: hit_ratio@1 {:+.3}%, pop_bias {:+.3}%",
                rel.hit_ratio_at_1_pct, rel.pop_bias_pct
            );
            (Some(brep), Some(rel))
        }
        None => (None, None),
    };
    let out = a.out.join("eval.json");
    let body = serde_json::to_string_pretty(&EvalFile { report, baseline, relative }).unwrap();
    fs::write(&out, body + "\n").map_err(write_err("eval report", &out))?;
    Ok(())
}

// ------------------------------------------------------------------- bench

struct BenchRow {
    mode: &'static str,
    batch_size: usize,
    n_neg: usize,
    rho: String,
    k: String,
    f_calls: u64,
    g_calls: u64,
    effective: f64,
    peak_live: u64,
}

/// Score one batch the way the trainer does (encode each context once, score
/// positive + own negatives) in plain arithmetic, then assemble hybrid sets
/// with deterministic ring partners. Returns (counters, mean effective
/// negatives).
fn bench_shared_batch(
    params: &PolicyParams<f64>,
    table: &TokenTable,
    split: &DatasetSplit,
    batch: &[usize],
    n_neg: usize,
    rho: f64,
    seed: u64,
) -> AppResult<(OpCounters, f64)> {
    let mut engine = PlainEngine;
    let mut counters = OpCounters::default();
    let b = batch.len();
    let mut own_sets = Vec::with_capacity(b);
    let mut positives = Vec::with_capacity(b);
    for &i in batch {
        let inst: &TrainingInstance = &split.train[i];
        let ctx_idxs = inst
            .prompt_context
            .iter()
            .map(|&id| split.catalog.idx_of(id))
            .collect::<Result<Vec<_>, _>>()?;
        let prompt = table.prompt_tokens(&ctx_idxs);
        let state = encode_context(&mut engine, params, &prompt)?;
        counters.bump_f();
        let pos_idx = split.catalog.idx_of(inst.positive)?;
        score_response(&mut engine, params, &state, table.response_tokens(pos_idx))?;
        counters.bump_g();
        let mut exclude = inst.prompt_context.clone();
        exclude.push(inst.positive);
        let negs = sample_negatives(
            &split.catalog,
            &exclude,
            n_neg,
            mix_seed(seed, inst.user_id as u64, inst.prompt_context.len() as u64),
        )?;
        let mut own = Vec::with_capacity(n_neg);
        for id in negs {
            let idx = split.catalog.idx_of(id)?;
            let toks = table.response_tokens(idx);
            let score = score_response(&mut engine, params, &state, toks)?.h;
            counters.bump_g();
            own.push(OwnNegative { item_id: id, item_idx: idx, score, token_len: toks.len() });
        }
        own_sets.push(own);
        positives.push(inst.positive);
    }
    // Partner identity does not affect the cost accounting, so the bench
    // uses a fixed ring instead of loading an aux checkpoint.
    let k = top_k_count(b, rho);
    let partners: Vec<Vec<usize>> =
        (0..b).map(|u| (1..=k).map(|step| (u + step) % b).collect()).collect();
    let sets = assemble_hybrid_sets(&own_sets, &partners, &positives, GradientLinkage::FlowThrough)?;
    let eff = sets.iter().map(|s| s.effective_count() as f64).sum::<f64>() / b as f64;
    Ok((counters, eff))
}

pub fn bench_cmd(a: &BenchArgs) -> AppResult<()> {
    let mut m = RunManifest::new(
        "bench",
        a.seed,
        serde_json::json!({
            "batch_size": a.batch_size, "n_neg": a.n_neg, "rho": a.rho,
            "batches": a.batches, "dim": a.dim,
        }),
    );
    m.hash_dataset_dir(&a.data).map_err(read_err("dataset directory", &a.data))?;
    m.artifact("bench.tsv");
    m.write(&a.out).map_err(write_err("manifest", &a.out))?;

    let split = load_split(&a.data)?;
    let table = TokenTable::build(&split.catalog, ResponseMode::SingleToken)?;
    let params =
        PolicyParams::<f64>::init(ParamLayout::new(table.vocab_size(), a.dim), 1.0, a.seed)?;
    let param_bytes = params.data.len() * std::mem::size_of::<f64>();
    let batches = make_batches(split.train.len(), a.batch_size, a.seed, 0)?;
    let used: Vec<&Vec<usize>> = batches.iter().take(a.batches).collect();
    if used.is_empty() {
        return Err(AppError::Data("dataset has no training batches to benchmark".into()));
    }

    let mut rows: Vec<BenchRow> = Vec::new();
    for &rho in &a.rho {
        for &n_neg in &a.n_neg {
            let mut counters = OpCounters::default();
            let mut eff_sum = 0.0;
            for batch in &used {
                let (c, eff) = bench_shared_batch(&params, &table, &split, batch, n_neg, rho, a.seed)?;
                counters.absorb(c);
                eff_sum += eff;
            }
            let n_batches = used.len() as u64;
            rows.push(BenchRow {
                mode: "shared",
                batch_size: a.batch_size,
                n_neg,
                rho: format!("{rho}"),
                k: format!("{}", top_k_count(a.batch_size, rho)),
                f_calls: counters.f_calls / n_batches,
                g_calls: counters.g_calls / n_batches,
                effective: eff_sum / used.len() as f64,
                // Every context state and score stays live until the batch
                // loss reduces over them.
                peak_live: (counters.f_calls + counters.g_calls) / n_batches,
            });
        }
    }
    // The quadratic oracle, cost-contrasted at small batch sizes only.
    for &n_neg in &a.n_neg {
        if a.batch_size > DENSE_ORACLE_CAP {
            eprintln!(
                "notice: dense-oracle point skipped (batch size {} above cap {DENSE_ORACLE_CAP})",
                a.batch_size
            );
            break;
        }
        let mut counters = OpCounters::default();
        for batch in &used {
            let (prompts, positives, negatives) =
                dense_batch_tokens(&table, &split, batch, n_neg, a.seed)?;
            let out =
                naive_dense_oracle(&params, &prompts, &positives, &negatives, DENSE_ORACLE_CAP)?;
            counters.absorb(out.counters);
        }
        let n_batches = used.len() as u64;
        rows.push(BenchRow {
            mode: "dense",
            batch_size: a.batch_size,
            n_neg,
            rho: "-".into(),
            k: "-".into(),
            f_calls: counters.f_calls / n_batches,
            g_calls: counters.g_calls / n_batches,
            effective: (a.batch_size * n_neg) as f64,
            peak_live: (counters.f_calls + counters.g_calls) / n_batches,
        });
    }

    let mut body = String::from(
        "mode\tbatch_size\tn_neg\trho\tk\tf_calls\tg_calls\teffective_negatives_mean\tpeak_live_scores\tparam_bytes\n",
    );
    for r in &rows {
        writeln!(
            body,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}\t{}\t{}",
            r.mode, r.batch_size, r.n_neg, r.rho, r.k, r.f_calls, r.g_calls, r.effective,
            r.peak_live, param_bytes
        )
        .unwrap();
    }
    let path = a.out.join("bench.tsv");
    fs::write(&path, &body).map_err(write_err("bench table", &path))?;
    print!("{body}");
    Ok(())
}

fn dense_batch_tokens(
    table: &TokenTable,
    split: &DatasetSplit,
    batch: &[usize],
    n_neg: usize,
    seed: u64,
) -> AppResult<(Vec<Vec<usize>>, Vec<Vec<usize>>, Vec<Vec<Vec<usize>>>)> {
    let mut prompts = Vec::with_capacity(batch.len());
    let mut positives = Vec::with_capacity(batch.len());
    let mut negatives = Vec::with_capacity(batch.len());
    for &i in batch {
        let inst = &split.train[i];
        let ctx_idxs = inst
            .prompt_context
            .iter()
            .map(|&id| split.catalog.idx_of(id))
            .collect::<Result<Vec<_>, _>>()?;
        prompts.push(table.prompt_tokens(&ctx_idxs));
        positives.push(table.response_tokens(split.catalog.idx_of(inst.positive)?).to_vec());
        let mut exclude = inst.prompt_context.clone();
        exclude.push(inst.positive);
        let negs = sample_negatives(
            &split.catalog,
            &exclude,
            n_neg,
            mix_seed(seed, inst.user_id as u64, inst.prompt_context.len() as u64),
        )?;
        let mut toks = Vec::with_capacity(n_neg);
        for id in negs {
            toks.push(table.response_tokens(split.catalog.idx_of(id)?).to_vec());
        }
        negatives.push(toks);
    }
    Ok((prompts, positives, negatives))
}
