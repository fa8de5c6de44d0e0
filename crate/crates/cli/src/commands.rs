use std::path::{Path, PathBuf};
use std::time::Instant;

use mlh_core::codebook::CODEBOOK_MAGIC;
use mlh_core::dataio::FEATURES_MAGIC;
use mlh_core::format::write_atomic;
use mlh_core::moh::CHECKPOINT_MAGIC;
use mlh_core::retrieval::{pr_csv, LabelRelevance, CODES_MAGIC};
use mlh_core::trainer::train_with;
use mlh_core::{
    build_codebook, encode, map_at_k, pack, pr_curve, search, split, synth_clusters, train, Branch,
    Codebook, FeatureDataset, HashConfig, MoHConfig, MoHModel, PackedCodes, Split, SynthConfig,
    TrainConfig,
};
use serde_json::json;

use crate::args::{
    AblateArgs, Command, EncodeArgs, EvalArgs, GenCentersArgs, ReplayArgs, SynthArgs, TrainArgs,
};
use crate::error::CliError;
use crate::grid::parse_grid;
use crate::manifest::RunManifest;

pub const ABLATE_HEADER: &str =
    "cell_id,enable_ml,enable_moh,shared,softmax,lambda1,lambda2,lambda3,m,ratio,branch,map,seed";

/// Config text captured in a manifest, used instead of re-reading files on replay.
#[derive(Debug, Default)]
pub struct Embedded {
    pub config: Option<String>,
    pub grid: Option<String>,
}

pub fn run(cmd: &Command, embedded: &Embedded) -> Result<(), CliError> {
    match cmd {
        Command::GenCenters(a) => gen_centers(cmd, a),
        Command::Synth(a) => synth(cmd, a),
        Command::Train(a) => train_cmd(cmd, a, embedded),
        Command::Encode(a) => encode_cmd(cmd, a),
        Command::Eval(a) => eval(cmd, a),
        Command::Ablate(a) => ablate(cmd, a, embedded),
        Command::Replay(a) => replay(a),
    }
}

fn load_features(path: &Path) -> Result<FeatureDataset, CliError> {
    FeatureDataset::load(path).map_err(|e| CliError::input(path, e))
}

fn load_codebook(path: &Path) -> Result<Codebook, CliError> {
    Codebook::load(path).map_err(|e| CliError::input(path, e))
}

fn load_codes(path: &Path) -> Result<PackedCodes, CliError> {
    PackedCodes::load(path).map_err(|e| CliError::input(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).map_err(|e| CliError::io(path, e))
}

fn finish(mut m: RunManifest, start: Instant, artifact: &Path) -> Result<(), CliError> {
    m.wall_clock_secs = start.elapsed().as_secs_f64();
    let path = m.write_next_to(artifact)?;
    println!("manifest: {}", path.display());
    Ok(())
}

fn gen_centers(cmd: &Command, a: &GenCentersArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let cb = build_codebook(
        HashConfig::new(a.bits, a.classes)?,
        a.mode,
        a.seed,
        a.max_attempts,
    )?;
    cb.save(&a.out)?;
    let sel = cb
        .meta
        .selection
        .expect("build_codebook records its selection");
    println!(
        "codebook: q={} c={} d={} ({}{}), min distance {}, written to {}",
        a.bits,
        a.classes,
        cb.d,
        sel.mode,
        if sel.fell_back { " fallback" } else { "" },
        mlh_core::verify_codebook(&cb),
        a.out.display()
    );
    if cb.d < cb.meta.requested_d {
        println!(
            "note: construction failed at d={}, lowered to {}",
            cb.meta.requested_d, cb.d
        );
    }
    let mut m = RunManifest::new(cmd, a.seed);
    m.config = json!({
        "bits": a.bits,
        "classes": a.classes,
        "mode": a.mode.to_string(),
        "selected_mode": sel.mode.to_string(),
        "fell_back": sel.fell_back,
        "requested_d": cb.meta.requested_d,
        "d": cb.d,
        "attempts": cb.meta.attempts,
        "max_attempts": a.max_attempts,
    });
    m.output(&a.out, Some(CODEBOOK_MAGIC));
    finish(m, start, &a.out)
}

/// `dir/name.ext` becomes `dir/name.tag.ext`.
pub fn tagged_path(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{tag}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}

fn synth(cmd: &Command, a: &SynthArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let mut cfg = SynthConfig::new(a.classes, a.per_class, a.dim, a.spread, a.seed);
    cfg.multi_label_fraction = a.multi_label;
    let data = synth_clusters(&cfg)?;
    let mut m = RunManifest::new(cmd, a.seed);
    m.config = serde_json::to_value(&cfg).expect("plain struct");
    if a.n_query.is_none() && a.n_train.is_none() {
        data.save(&a.out)?;
        m.output(&a.out, Some(FEATURES_MAGIC));
        println!(
            "synth: {} rows, dim {}, written to {}",
            data.len(),
            a.dim,
            a.out.display()
        );
    } else {
        let (nq, nt) = (a.n_query.unwrap_or(0), a.n_train.unwrap_or(0));
        let tagged = split(&data, nq, nt, a.seed)?;
        for (tag, part) in [
            ("query", Split::Query),
            ("train", Split::Train),
            ("db", Split::Database),
        ] {
            let path = tagged_path(&a.out, tag);
            let rows = tagged.part(part);
            rows.save(&path)?;
            m.output(&path, Some(FEATURES_MAGIC));
            println!(
                "synth: {tag} {} rows, written to {}",
                rows.len(),
                path.display()
            );
        }
        m.config["n_query"] = json!(nq);
        m.config["n_train"] = json!(nt);
    }
    finish(m, start, &a.out)
}

/// Defaults sized to the data, then the config text, then the seed override.
fn resolve_config(
    feature_dim: usize,
    bits: usize,
    path: Option<&Path>,
    embedded: Option<&str>,
) -> Result<(TrainConfig, String), CliError> {
    let text = match (embedded, path) {
        (Some(t), _) => t.to_string(),
        (None, Some(p)) => match std::fs::read_to_string(p) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(CliError::ConfigNotFound(p.to_path_buf()))
            }
            Err(e) => return Err(CliError::io(p, e)),
        },
        (None, None) => String::new(),
    };
    let mut cfg = TrainConfig::new(MoHConfig::new(feature_dim, bits));
    cfg.apply_kv(&text)?;
    Ok((cfg, text))
}

fn train_cmd(cmd: &Command, a: &TrainArgs, embedded: &Embedded) -> Result<(), CliError> {
    let start = Instant::now();
    let data = load_features(&a.data)?;
    let cb = load_codebook(&a.centers)?;
    let (mut cfg, _) = resolve_config(
        data.feature_dim(),
        cb.bits(),
        a.config.as_deref(),
        embedded.config.as_deref(),
    )?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let mut log = String::new();
    let epochs = cfg.epochs;
    let (model, report) = train_with(&data, &cb, &cfg, |e, b| {
        log.push_str(&b.json_line(e));
        log.push('\n');
        if e % 10 == 0 || e + 1 == epochs {
            println!(
                "epoch {e}: L={:.6} L_C={:.6} L_P={:.6} L_M={:.6} detached={}",
                b.total, b.center, b.pairwise, b.mutual, b.detached
            );
        }
    })?;
    model.save(&a.out)?;
    let mut m = RunManifest::new(cmd, cfg.seed);
    if let Some(p) = &a.log {
        write_text(p, &log)?;
        m.output(p, None);
    }
    println!(
        "trained {} epochs on {} rows in {:.1}s, checkpoint {}",
        report.epochs.len(),
        data.len(),
        report.wall_time_secs,
        a.out.display()
    );
    m.config = json!({
        "config_kv": cfg.to_kv(),
        "train_config": cfg,
        "shuffle_seed": report.seeds.shuffle,
    });
    m.input(&a.data, FEATURES_MAGIC);
    m.input(&a.centers, CODEBOOK_MAGIC);
    m.output(&a.out, Some(CHECKPOINT_MAGIC));
    finish(m, start, &a.out)
}

fn encode_cmd(cmd: &Command, a: &EncodeArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let data = load_features(&a.data)?;
    let model = MoHModel::load(&a.ckpt).map_err(|e| CliError::input(&a.ckpt, e))?;
    let codes = pack(&encode(&model, &data.features, a.branch)?);
    codes.save(&a.out)?;
    println!(
        "encoded {} rows to {} bits ({} branch), written to {}",
        codes.len(),
        codes.bits(),
        a.branch,
        a.out.display()
    );
    let mut m = RunManifest::new(cmd, 0);
    m.config = json!({ "branch": a.branch.to_string(), "bits": codes.bits() });
    m.input(&a.data, FEATURES_MAGIC);
    m.input(&a.ckpt, CHECKPOINT_MAGIC);
    m.output(&a.out, Some(CODES_MAGIC));
    finish(m, start, &a.out)
}

fn eval(cmd: &Command, a: &EvalArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let q = load_codes(&a.query)?;
    let db = load_codes(&a.db)?;
    let qd = load_features(&a.query_data)?;
    let dd = load_features(&a.db_data)?;
    for (codes, data, what) in [(&q, &qd, "query"), (&db, &dd, "database")] {
        if codes.len() != data.len() {
            return Err(CliError::Usage(format!(
                "{what} codes have {} rows but its labels have {}",
                codes.len(),
                data.len()
            )));
        }
    }
    // the PR curve needs every rank, mAP only the first k
    let topk = if a.pr.is_some() { db.len() } else { a.k };
    let ranked = search(&q, &db, topk.max(1))?.lists;
    let rel = LabelRelevance::new(&qd.labels, &dd.labels)?;
    let result = map_at_k(&ranked, &rel, a.k)?;
    write_text(
        &a.out,
        &serde_json::to_string_pretty(&result).expect("plain struct"),
    )?;
    let mut m = RunManifest::new(cmd, 0);
    if let Some(p) = &a.pr {
        write_text(p, &pr_csv(&pr_curve(&ranked, &rel)))?;
        m.output(p, None);
    }
    let scored = result.per_query_ap.iter().flatten().count();
    println!(
        "mAP@{} = {:.6} over {scored} of {} queries, written to {}",
        a.k,
        result.map,
        q.len(),
        a.out.display()
    );
    m.config = json!({ "k": a.k, "map": result.map });
    m.input(&a.query, CODES_MAGIC);
    m.input(&a.db, CODES_MAGIC);
    m.input(&a.query_data, FEATURES_MAGIC);
    m.input(&a.db_data, FEATURES_MAGIC);
    m.output(&a.out, None);
    finish(m, start, &a.out)
}

fn branch_map(
    model: &MoHModel,
    query: &FeatureDataset,
    db: &FeatureDataset,
    branch: Branch,
    k: usize,
) -> Result<f64, CliError> {
    let qc = pack(&encode(model, &query.features, branch)?);
    let dc = pack(&encode(model, &db.features, branch)?);
    let ranked = search(&qc, &dc, k)?.lists;
    let rel = LabelRelevance::new(&query.labels, &db.labels)?;
    Ok(map_at_k(&ranked, &rel, k)?.map)
}

fn ablate(cmd: &Command, a: &AblateArgs, embedded: &Embedded) -> Result<(), CliError> {
    let start = Instant::now();
    if a.repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    let train_d = load_features(&a.train)?;
    let query = load_features(&a.query)?;
    let db = load_features(&a.db)?;
    let cb = load_codebook(&a.centers)?;
    let grid_text = match &embedded.grid {
        Some(t) => t.clone(),
        None => std::fs::read_to_string(&a.grid).map_err(|e| CliError::io(&a.grid, e))?,
    };
    let cells = parse_grid(&grid_text)?;
    let (_, base_text) = resolve_config(
        train_d.feature_dim(),
        cb.bits(),
        a.config.as_deref(),
        embedded.config.as_deref(),
    )?;

    let mut csv = format!("{ABLATE_HEADER}\n");
    let mut failures = 0;
    for (id, cell) in cells.iter().enumerate() {
        let (mut cfg, _) =
            resolve_config(train_d.feature_dim(), cb.bits(), None, Some(&base_text))?;
        for (k, v) in cell {
            cfg.set(k, v).map_err(CliError::Grid)?;
        }
        let w = cfg.weights;
        let m = &cfg.moh;
        let prefix = format!(
            "{id},{},{},{},{},{},{},{},{},{}",
            cfg.enable_ml,
            cfg.enable_moh,
            m.shared_experts,
            m.softmax_gate,
            w.lambda1,
            w.lambda2,
            w.lambda3,
            m.experts,
            m.activation_ratio
        );
        let mut sums = [Vec::new(), Vec::new()];
        for r in 0..a.repeats {
            let seed = a.seed + r;
            cfg.seed = seed;
            let result =
                train(&train_d, &cb, &cfg)
                    .map_err(CliError::from)
                    .and_then(|(model, _)| {
                        let c = branch_map(&model, &query, &db, Branch::Center, a.k)?;
                        let p = branch_map(&model, &query, &db, Branch::Pairwise, a.k)?;
                        Ok([c, p])
                    });
            match result {
                Ok(maps) => {
                    for (i, branch) in Branch::BOTH.iter().enumerate() {
                        csv.push_str(&format!("{prefix},{branch},{},{seed}\n", maps[i]));
                        sums[i].push(maps[i]);
                    }
                    println!(
                        "cell {id} seed {seed}: center {:.4} pairwise {:.4}",
                        maps[0], maps[1]
                    );
                }
                Err(e) => {
                    failures += 1;
                    eprintln!("warning: cell {id} seed {seed} failed: {}", e.render());
                    for branch in Branch::BOTH {
                        csv.push_str(&format!("{prefix},{branch},failed,{seed}\n"));
                    }
                }
            }
        }
        for (i, branch) in Branch::BOTH.iter().enumerate() {
            let v = &sums[i];
            let mean = if v.is_empty() {
                "failed".to_string()
            } else {
                (v.iter().sum::<f64>() / v.len() as f64).to_string()
            };
            csv.push_str(&format!("{prefix},{branch},{mean},mean\n"));
        }
    }
    write_text(&a.out, &csv)?;
    println!(
        "ablate: {} cells x {} repeats, {failures} failed runs, written to {}",
        cells.len(),
        a.repeats,
        a.out.display()
    );
    let mut m = RunManifest::new(cmd, a.seed);
    m.config = json!({ "config_kv": base_text, "grid": grid_text, "cells": cells.len() });
    for p in [&a.train, &a.query, &a.db] {
        m.input(p, FEATURES_MAGIC);
    }
    m.input(&a.centers, CODEBOOK_MAGIC);
    m.output(&a.out, None);
    finish(m, start, &a.out)
}

fn replay(a: &ReplayArgs) -> Result<(), CliError> {
    let m = RunManifest::load(&a.manifest)?;
    if matches!(m.args, Command::Replay(_)) {
        return Err(CliError::Manifest(
            "a replay cannot replay another replay".into(),
        ));
    }
    std::env::set_current_dir(&m.working_dir).map_err(|e| CliError::io(&m.working_dir, e))?;
    let text = |key: &str| m.config.get(key).and_then(|v| v.as_str()).map(String::from);
    let embedded = Embedded {
        config: text("config_kv"),
        grid: text("grid"),
    };
    println!("replaying {} from {}", m.subcommand, a.manifest.display());
    run(&m.args, &embedded)
}
