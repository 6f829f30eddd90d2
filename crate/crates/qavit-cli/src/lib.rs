//! Command implementations behind the `qavit` binary. Each command
//! returns `Ok(exit_code)`; fixed taxonomy: 2 config, 3 numeric fault,
//! 4 integrity, 5 shape, 6 budget, 7 gradcheck failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qavit_core::checkpoint::{load_into_model, save_model};
use qavit_core::config::RunConfig;
use qavit_core::data::{
    gen_caption_sample, gen_cells_balanced, gen_qa_sample, render, sample_rng, write_record, AnswerSpace, Split,
};
use qavit_core::eval::{build_eval_set, evaluate, run_ablation, AblationSpec};
use qavit_core::fusion::QaVitModel;
use qavit_core::question::tokenize;
use qavit_core::saliency::{export_pgm, saliency};
use qavit_core::tensor::no_grad;
use qavit_core::train::{loss_csv, Trainer};
use qavit_core::verify::{gradcheck_suite, SuiteOptions};
use qavit_core::{Error, Result};

pub fn exit_code_for(err: &Error) -> i32 {
    err.exit_code()
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
    RunConfig::from_json(&text)
}

fn apply_overrides(cfg: &mut RunConfig, seed: Option<u64>, out: Option<&Path>) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = Some(o.to_string_lossy().into_owned());
    }
}

fn out_dir_for(cfg: &RunConfig) -> PathBuf {
    match &cfg.out_dir {
        Some(dir) => PathBuf::from(dir),
        None => PathBuf::from("runs").join(&cfg.digest()[..12]),
    }
}

/// Train per config; writes checkpoint, loss CSV, registry audit, vocab
/// and a run manifest into the output directory.
pub fn cmd_train(config: &Path, seed: Option<u64>, out: Option<&Path>, resume: Option<&Path>) -> Result<i32> {
    let mut cfg = read_config(config)?;
    apply_overrides(&mut cfg, seed, out);
    let out_dir = out_dir_for(&cfg);
    fs::create_dir_all(&out_dir)?;

    let start = Instant::now();
    let model = QaVitModel::<f32>::from_run_config(&cfg)?;
    let mut trainer = Trainer::new(&model, &cfg.data, &cfg.train, cfg.seed)?;
    if let Some(ckpt) = resume {
        let opt = load_into_model(ckpt, &model)?;
        trainer = trainer.with_state(opt);
    }

    let ckpt_path = out_dir.join("checkpoint.qavt");
    let every = cfg.train.checkpoint_every;
    trainer.run(|t| {
        if every > 0 && t.step_index() % every == 0 && !t.finished() {
            save_model(&ckpt_path, t.model, Some(&t.opt))?;
        }
        Ok(())
    })?;

    save_model(&ckpt_path, &model, Some(&trainer.opt))?;
    fs::write(out_dir.join("loss.csv"), loss_csv(&trainer.rows, cfg.train.log_every))?;
    fs::write(out_dir.join("registry.csv"), model.registry.audit_csv())?;
    fs::write(out_dir.join("vocab.tsv"), model.vocab.to_tsv())?;
    let manifest = serde_json::json!({
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "steps": trainer.step_index(),
        "wall_clock_s": start.elapsed().as_secs_f64(),
        "total_params": model.registry.total_params(),
        "trainable_params": model.registry.total_params()
            - model.registry.count_by_status(qavit_core::registry::ParamStatus::Frozen),
    });
    fs::write(out_dir.join("run.json"), serde_json::to_string_pretty(&manifest).expect("json"))?;
    println!("trained {} steps -> {}", trainer.step_index(), out_dir.display());
    Ok(0)
}

/// Evaluate a checkpoint; metrics JSON goes to stdout.
pub fn cmd_eval(checkpoint: &Path, config: &Path, seed: Option<u64>) -> Result<i32> {
    let mut cfg = read_config(config)?;
    apply_overrides(&mut cfg, seed, None);
    let model = QaVitModel::<f32>::from_run_config(&cfg)?;
    load_into_model(checkpoint, &model)?;
    let set = build_eval_set::<f32>(&cfg.data, cfg.model.text.k_max, cfg.seed);
    let report = evaluate(&model, &set, cfg.seed, &cfg.digest())?;
    println!("{}", serde_json::to_string(&report).expect("json"));
    Ok(0)
}

/// Run the ablation grid; table CSV to stdout and the output directory,
/// per-cell metrics beside it.
pub fn cmd_ablate(grid_config: &Path, jobs: Option<usize>, out: Option<&Path>) -> Result<i32> {
    let text = fs::read_to_string(grid_config)
        .map_err(|e| Error::Config(format!("cannot read grid config {}: {}", grid_config.display(), e)))?;
    let spec: AblationSpec = serde_json::from_str(&text).map_err(|e| {
        Error::Config(format!("invalid grid config at line {} column {}: {}", e.line(), e.column(), e))
    })?;
    let deterministic = std::env::var("QAVIT_DETERMINISTIC").map(|v| v == "1").unwrap_or(false);
    let jobs = if deterministic {
        1
    } else {
        jobs.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
    };
    let outcome = run_ablation(&spec, jobs)?;
    let csv = qavit_core::eval::ablation_csv(&outcome.rows);
    print!("{}", csv);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.csv"), &csv)?;
        let cells_dir = dir.join("cells");
        fs::create_dir_all(&cells_dir)?;
        for row in &outcome.rows {
            let path = cells_dir.join(format!("{}.json", &row.config_digest[..16]));
            fs::write(path, serde_json::to_string_pretty(row).expect("json"))?;
        }
    }
    Ok(0)
}

/// Regenerate an image from a seed, compute the saliency map for the given
/// question against the model's predicted class, and write a PGM.
pub fn cmd_saliency(
    checkpoint: &Path,
    config: &Path,
    image_seed: u64,
    question: &str,
    out: &Path,
    upscale: usize,
) -> Result<i32> {
    let cfg = read_config(config)?;
    let model = QaVitModel::<f32>::from_run_config(&cfg)?;
    load_into_model(checkpoint, &model)?;

    let mut rng = sample_rng(cfg.seed, Split::EvalQa, image_seed);
    let cells = gen_cells_balanced(&cfg.data.grid, &mut rng);
    let image = render::<f32>(&cells, &cfg.data.grid);
    let q = tokenize(question, &model.vocab, cfg.model.text.k_max);

    let target = no_grad(|| -> Result<usize> {
        let logits = model.qa_logits(&image, &q, &mut qavit_core::head::Mode::Eval)?;
        let row = logits.to_vec();
        Ok(qavit_core::eval::argmax(&row))
    })?;
    let map = saliency(&model, &image, &q, target)?;
    export_pgm(&map, out, upscale)?;
    println!("saliency for class {} -> {}", target, out.display());
    Ok(0)
}

/// Float64 gradient verification across every differentiable module.
pub fn cmd_gradcheck(samples: usize, inject_fault: bool) -> Result<i32> {
    let opts = SuiteOptions { sample_count: samples, inject_fault, ..SuiteOptions::default() };
    let report = gradcheck_suite(&opts)?;
    println!(
        "gradcheck: {} coords, max_rel_err {:.3e} (worst {}[{}]) -> {}",
        report.checked_coords,
        report.max_rel_err,
        report.worst_param,
        report.worst_coord,
        if report.pass { "pass" } else { "FAIL" }
    );
    Ok(if report.pass { 0 } else { 7 })
}

/// Dump record-framed binary datasets, one file per split.
pub fn cmd_gen_data(config: &Path, out: &Path, train_count: usize) -> Result<i32> {
    let cfg = read_config(config)?;
    fs::create_dir_all(out)?;
    let vocab = qavit_core::data::build_vocab(&cfg.data.grid);
    let space = AnswerSpace::new(&cfg.data.question_forms, &cfg.data.grid);
    let k_max = cfg.model.text.k_max;

    let write_qa = |path: PathBuf, split: Split, n: usize| -> Result<()> {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        for i in 0..n as u64 {
            let mut rng = sample_rng(cfg.seed, split, i);
            let s = gen_qa_sample::<f32>(&cfg.data.grid, &cfg.data.question_forms, &space, &vocab, k_max, &mut rng);
            write_record(&mut w, &s.image, &s.question, s.answer_id as u16)?;
        }
        Ok(())
    };
    let write_cap = |path: PathBuf, split: Split, n: usize| -> Result<()> {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        for i in 0..n as u64 {
            let mut rng = sample_rng(cfg.seed, split, i);
            let s = gen_caption_sample::<f32>(&cfg.data.grid, &vocab, k_max, &mut rng);
            // Caption answers are the multi-hot bitmask packed into u16.
            let mask: u16 = s.target.iter().enumerate().map(|(k, &b)| if b { 1u16 << k } else { 0 }).sum();
            write_record(&mut w, &s.image, &s.instruction, mask)?;
        }
        Ok(())
    };

    write_qa(out.join("qa_train.bin"), Split::TrainQa, train_count)?;
    write_qa(out.join("qa_eval.bin"), Split::EvalQa, cfg.data.eval_qa)?;
    write_cap(out.join("caption_train.bin"), Split::TrainCaption, train_count)?;
    write_cap(out.join("caption_eval.bin"), Split::EvalCaption, cfg.data.eval_caption)?;
    fs::write(out.join("vocab.tsv"), vocab.to_tsv())?;
    println!("wrote datasets -> {}", out.display());
    Ok(0)
}
