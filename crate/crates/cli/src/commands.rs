use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fsfm::backbone::Branch;
use fsfm::diagnostics::{export_mask_overlay, export_reconstruction, model_attention_stats, AttentionStats, Grid};
use fsfm::downstream::{
    build_classifier, compute_auc, evaluate, finetune, predict, read_scores, score_records, video_scores,
    write_scores, FinetuneConfig, LabeledData, ThresholdPolicy,
};
use fsfm::facedata::{load_batch, load_parsing_map, DatasetManifest, FaceImage, FaceSample, RegionTaxonomy};
use fsfm::fixtures::{synth_face, write_fixtures};
use fsfm::masking::{sample_mask, MaskConfig};
use fsfm::pretrainer::{load_model, Pretrainer, TrainConfig, TrainData};
use serde_json::json;

use crate::run::{read_config, resolve_seed, CliError, CliResult, RunManifest};
use crate::{
    AttnStatsArgs, Cli, Command, EvaluateArgs, FinetuneArgs, GroupBy, MakeFixturesArgs, MaskSampleArgs, PretrainArgs,
    ReconstructArgs,
};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(fsfm::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(fsfm::Error::from)?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Prints to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}").and_then(|_| out.flush());
}

fn out_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_manifest(path: &Path) -> CliResult<DatasetManifest> {
    let manifest = DatasetManifest::load(path)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Pretrain(a) => pretrain(a, cli.seed),
        Command::Finetune(a) => finetune_cmd(a, cli.seed),
        Command::Evaluate(a) => evaluate_cmd(a, cli.seed),
        Command::MaskSample(a) => mask_sample(a, cli.seed),
        Command::AttnStats(a) => attn_stats(a, cli.seed),
        Command::Reconstruct(a) => reconstruct(a, cli.seed),
        Command::MakeFixtures(a) => make_fixtures(a, cli.seed),
    }
}

fn pretrain(a: &PretrainArgs, seed: Option<u64>) -> CliResult<()> {
    let mut cfg: TrainConfig = read_config(&a.config)?;
    cfg.seed = resolve_seed(seed, cfg.seed)?;
    cfg.validate()?;
    let manifest = load_manifest(&a.manifest)?;
    let data = TrainData::from_manifest(&manifest, &cfg.backbone, &RegionTaxonomy::standard())?;
    let mut run = RunManifest::new("pretrain", cfg.seed, serde_json::to_value(&cfg).map_err(fsfm::Error::from)?);
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let t = Pretrainer::resume(path, data)?;
            if t.config() != &cfg {
                return Err(CliError::Validation("checkpoint config differs from --config".into()));
            }
            t
        }
        None => Pretrainer::new(cfg.clone(), data)?,
    };
    trainer.set_dump_dir(&a.out);
    let plan = trainer.plan();
    log::info!(
        "{} steps ({} per epoch, {} warmup)",
        plan.total_steps,
        plan.steps_per_epoch,
        plan.warmup_steps
    );
    let log_path = a.out.join("steps.jsonl");
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut log_file = BufWriter::new(file);
    run.add(&log_path);
    let period = cfg.checkpoint_every * plan.steps_per_epoch;
    let mut done = 0;
    while !trainer.is_finished() && a.max_steps.is_none_or(|m| done < m) {
        let record = trainer.train_step()?;
        done += 1;
        let line = serde_json::to_string(&record).map_err(fsfm::Error::from)?;
        writeln!(log_file, "{line}").map_err(|e| io_err(&log_path, e))?;
        log::debug!("step {} loss {:.5}", record.step, record.loss.total);
        let step = trainer.step_index();
        if period > 0 && step % period == 0 && !trainer.is_finished() {
            let path = a.out.join(format!("checkpoint-epoch{:04}.safetensors", step / plan.steps_per_epoch));
            trainer.save_checkpoint(&path)?;
            run.add(path);
        }
    }
    log_file.flush().map_err(|e| io_err(&log_path, e))?;
    let final_path = a.out.join("checkpoint-final.safetensors");
    trainer.save_checkpoint(&final_path)?;
    run.add(final_path);
    log::info!("stopped at step {} of {}", trainer.step_index(), plan.total_steps);
    run.write(&a.out)?;
    Ok(())
}

fn finetune_cmd(a: &FinetuneArgs, seed: Option<u64>) -> CliResult<()> {
    let mut cfg: FinetuneConfig = read_config(&a.config)?;
    cfg.seed = resolve_seed(seed, cfg.seed)?;
    cfg.validate()?;
    let manifest = load_manifest(&a.manifest)?;
    let patch_size = {
        let (clf, _) = build_classifier(&cfg)?;
        clf.config().patch_size
    };
    let data = LabeledData::from_manifest(&manifest, patch_size)?;
    let outcome = finetune(&cfg, &data)?;
    let mut run = RunManifest::new("finetune", cfg.seed, serde_json::to_value(&cfg).map_err(fsfm::Error::from)?);
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let model = a.out.join("classifier.safetensors");
    outcome.classifier.save(&model)?;
    run.add(&model);
    let history = a.out.join("history.jsonl");
    let mut lines = String::new();
    for r in &outcome.history {
        lines += &serde_json::to_string(r).map_err(fsfm::Error::from)?;
        lines.push('\n');
    }
    std::fs::write(&history, lines).map_err(|e| io_err(&history, e))?;
    run.add(&history);
    if let Some(last) = outcome.history.last() {
        log::info!("final epoch loss {:.5} accuracy {:.3}", last.loss, last.train_accuracy);
    }
    if let Some(eval) = &a.eval_manifest {
        let eval = LabeledData::from_manifest(&load_manifest(eval)?, patch_size)?;
        let scores = predict(&outcome.classifier, &eval, cfg.batch)?;
        let path = a.out.join("scores.jsonl");
        write_scores(&path, &score_records(&eval, &scores))?;
        run.add(path);
    }
    run.write(&a.out)?;
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, seed: Option<u64>) -> CliResult<()> {
    let records = read_scores(&a.scores)?;
    let policy = match a.threshold {
        Some(t) => ThresholdPolicy::Fixed(t),
        None => ThresholdPolicy::EqualError,
    };
    let report = evaluate(&records, policy)?;
    let (auc, units) = match a.group_by {
        GroupBy::Frame => (report.frame_auc, records.len()),
        GroupBy::Video => {
            let (scores, labels) = video_scores(&records)?;
            (compute_auc(&scores, &labels)?, scores.len())
        }
    };
    let group = match a.group_by {
        GroupBy::Frame => "frame",
        GroupBy::Video => "video",
    };
    let value = json!({ "group_by": group, "auc": auc, "units": units, "report": report });
    match &a.out {
        Some(path) => {
            write_json(path, &value)?;
            let config = json!({ "scores": a.scores, "group_by": group, "threshold": a.threshold });
            let mut run = RunManifest::new("evaluate", resolve_seed(seed, 0)?, config);
            run.add(path);
            run.write(&out_dir(path))?;
        }
        None => emit(&serde_json::to_string_pretty(&value).map_err(fsfm::Error::from)?),
    }
    Ok(())
}

fn mask_sample(a: &MaskSampleArgs, seed: Option<u64>) -> CliResult<()> {
    let taxonomy = RegionTaxonomy::standard();
    let seed = resolve_seed(seed, 0)?;
    let sample = match (&a.image, &a.parsing) {
        (Some(img), Some(parsing)) => FaceSample::new(
            img.to_string_lossy(),
            FaceImage::load(img)?,
            load_parsing_map(parsing, &taxonomy)?,
            None,
        )?,
        _ => synth_face(64, 0, 0, None)?,
    };
    let table = sample.region_table(a.patch_size, &taxonomy)?;
    let base = MaskConfig::new(a.strategy, a.ratio, seed);
    base.validate()?;
    let pair = sample_mask(&table, &base.for_sample(&sample.id, 0))?;
    let value = json!({
        "sample_id": sample.id,
        "strategy": a.strategy,
        "ratio": a.ratio,
        "seed": seed,
        "patch_size": a.patch_size,
        "grid": [table.grid_width(), table.grid_height()],
        "masked": pair.masked(),
        "M": pair.mask,
        "M_fr": pair.region_mask,
        "fr": pair.covered,
        "extreme": pair.extreme,
    });
    if let Some(path) = &a.overlay {
        export_mask_overlay(&sample.image, &table, &pair, path)?;
    }
    match &a.out {
        Some(path) => {
            write_json(path, &value)?;
            let config = json!({
                "strategy": a.strategy,
                "ratio": a.ratio,
                "patch_size": a.patch_size,
                "image": a.image,
                "parsing": a.parsing,
            });
            let mut run = RunManifest::new("mask-sample", seed, config);
            run.add(path);
            if let Some(p) = &a.overlay {
                run.add(p);
            }
            run.write(&out_dir(path))?;
        }
        None => emit(&serde_json::to_string(&value).map_err(fsfm::Error::from)?),
    }
    Ok(())
}

fn attn_stats(a: &AttnStatsArgs, seed: Option<u64>) -> CliResult<()> {
    let (model, meta) = load_model(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    let cfg = model.config().clone();
    let n = a.limit.map_or(manifest.len(), |l| l.min(manifest.len()));
    if n == 0 {
        return Err(CliError::Validation("no samples to analyse".into()));
    }
    let taxonomy = RegionTaxonomy::standard();
    let grid = Grid {
        width: cfg.image_size / cfg.patch_size,
        height: cfg.image_size / cfg.patch_size,
        class_token: true,
    };
    let branch = Branch::from(a.branch);
    // per-sample statistics, weighted back together by sample count
    let mut parts: Vec<AttentionStats> = Vec::new();
    for chunk in (0..n).collect::<Vec<_>>().chunks(8) {
        let samples = load_batch(&manifest, chunk, &taxonomy)?;
        let patches = samples
            .iter()
            .map(|s| s.image.patchify(cfg.patch_size))
            .collect::<fsfm::Result<Vec<_>>>()?;
        let x = model.patches_tensor(&patches)?;
        parts.push(model_attention_stats(&model, &x, branch)?);
    }
    let stats = merge_stats(grid, &parts);
    write_json(&a.out, &stats)?;
    let config = json!({
        "checkpoint": a.checkpoint,
        "checkpoint_step": meta.step,
        "manifest": a.manifest,
        "branch": branch,
        "samples": n,
    });
    let mut run = RunManifest::new("attn-stats", resolve_seed(seed, meta.config.seed)?, config);
    run.add(&a.out);
    run.write(&out_dir(&a.out))?;
    Ok(())
}

fn merge_stats(grid: Grid, parts: &[AttentionStats]) -> AttentionStats {
    let total: usize = parts.iter().map(|p| p.samples).sum();
    let mut blocks = parts[0].blocks.clone();
    for block in &mut blocks {
        block.mean_distance.iter_mut().for_each(|v| *v = 0.0);
        block.kl.iter_mut().flatten().for_each(|v| *v = 0.0);
        block.kl_mean = 0.0;
    }
    for part in parts {
        let w = part.samples as f64 / total as f64;
        for (acc, b) in blocks.iter_mut().zip(&part.blocks) {
            for (x, y) in acc.mean_distance.iter_mut().zip(&b.mean_distance) {
                *x += w * y;
            }
            for (x, y) in acc.kl.iter_mut().flatten().zip(b.kl.iter().flatten()) {
                *x += w * y;
            }
            acc.kl_mean += w * b.kl_mean;
        }
    }
    AttentionStats {
        grid,
        samples: total,
        blocks,
    }
}

fn reconstruct(a: &ReconstructArgs, seed: Option<u64>) -> CliResult<()> {
    let (model, meta) = load_model(&a.checkpoint)?;
    let cfg = model.config().clone();
    let taxonomy = RegionTaxonomy::standard();
    let sample = FaceSample::new(
        a.image.to_string_lossy(),
        FaceImage::load(&a.image)?,
        load_parsing_map(&a.parsing, &taxonomy)?,
        None,
    )?;
    if sample.image.width() != cfg.image_size || sample.image.height() != cfg.image_size {
        return Err(CliError::Validation(format!(
            "image is {}x{} but the checkpoint expects {}x{}",
            sample.image.width(),
            sample.image.height(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    let seed = resolve_seed(seed, meta.config.seed)?;
    let table = sample.region_table(cfg.patch_size, &taxonomy)?;
    let mask_cfg = MaskConfig::new(a.strategy, a.ratio, seed);
    mask_cfg.validate()?;
    let pair = sample_mask(&table, &mask_cfg.for_sample(&sample.id, 0))?;
    export_reconstruction(&model, &sample.image, &pair, meta.config.normalize_pixels, &a.out)?;
    let config = json!({
        "checkpoint": a.checkpoint,
        "image": a.image,
        "parsing": a.parsing,
        "strategy": a.strategy,
        "ratio": a.ratio,
    });
    let mut run = RunManifest::new("reconstruct", seed, config);
    run.add(&a.out);
    run.write(&out_dir(&a.out))?;
    Ok(())
}

fn make_fixtures(a: &MakeFixturesArgs, seed: Option<u64>) -> CliResult<()> {
    let seed = resolve_seed(seed, 0)?;
    let (path, manifest) = write_fixtures(&a.out, a.n, a.size, seed, a.labeled)?;
    log::info!("wrote {} fixtures to {}", manifest.len(), a.out.display());
    let config = json!({ "n": a.n, "size": a.size, "labeled": a.labeled });
    let mut run = RunManifest::new("make-fixtures", seed, config);
    run.add(path);
    run.write(&a.out)?;
    Ok(())
}
