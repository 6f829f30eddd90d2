//! Metrics and the ablation harness.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, RunConfig};
use crate::data::{
    build_vocab, fixed_prompt, gen_caption_sample, gen_qa_sample, sample_rng, AnswerSpace, CaptionSample, QASample,
    Split,
};
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, QaVitModel};
use crate::head::{HeadMode, Mode};
use crate::question::TextSource;
use crate::tensor::{no_grad, Element};
use crate::train::Trainer;

pub struct EvalSet<T: Element> {
    pub qa: Vec<QASample<T>>,
    pub caption: Vec<CaptionSample<T>>,
}

/// Deterministic evaluation sets drawn from the eval seed ranges, disjoint
/// from every training stream.
pub fn build_eval_set<T: Element>(data: &DataConfig, k_max: usize, seed: u64) -> EvalSet<T> {
    let vocab = build_vocab(&data.grid);
    let space = AnswerSpace::new(&data.question_forms, &data.grid);
    let qa = (0..data.eval_qa as u64)
        .map(|i| {
            let mut rng = sample_rng(seed, Split::EvalQa, i);
            gen_qa_sample(&data.grid, &data.question_forms, &space, &vocab, k_max, &mut rng)
        })
        .collect();
    let caption = (0..data.eval_caption as u64)
        .map(|i| {
            let mut rng = sample_rng(seed, Split::EvalCaption, i);
            gen_caption_sample(&data.grid, &vocab, k_max, &mut rng)
        })
        .collect();
    EvalSet { qa, caption }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub qa_acc: f64,
    pub cap_acc: f64,
    /// QA sample count (the primary benchmark size).
    pub n: usize,
    pub cap_n: usize,
    pub seed: u64,
    pub config_digest: String,
    pub wall_clock_s: f64,
}

pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of an arbitrary predictor over QA samples (used to check the
/// rule-based oracle and constant baselines).
pub fn evaluate_qa_with<T: Element>(predict: impl Fn(&QASample<T>) -> usize, qa: &[QASample<T>]) -> f64 {
    if qa.is_empty() {
        return 0.0;
    }
    let hits = qa.iter().filter(|s| predict(s) == s.answer_id).count();
    hits as f64 / qa.len() as f64
}

/// Argmax accuracy on QA, exact-set-match accuracy on caption targets.
/// Inference mode: no dropout, no gradient graphs, no parameter mutation.
pub fn evaluate<T: Element>(model: &QaVitModel<T>, set: &EvalSet<T>, seed: u64, config_digest: &str) -> Result<MetricsReport> {
    if set.qa.is_empty() && set.caption.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let start = Instant::now();
    let fixed = model.cfg.pt.then(|| fixed_prompt(&model.vocab, model.cfg.text.k_max));
    let qa_acc = no_grad(|| -> Result<f64> {
        if set.qa.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for s in &set.qa {
            let q = fixed.as_ref().unwrap_or(&s.question);
            let logits = model.qa_logits(&s.image, q, &mut Mode::Eval)?;
            if argmax(&logits.data()) == s.answer_id {
                hits += 1;
            }
        }
        Ok(hits as f64 / set.qa.len() as f64)
    })?;
    let cap_acc = no_grad(|| -> Result<f64> {
        if set.caption.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for s in &set.caption {
            let q = fixed.as_ref().unwrap_or(&s.instruction);
            let logits = model.caption_logits(&s.image, q, &mut Mode::Eval)?;
            let bits: Vec<bool> = logits.data().iter().map(|&v| v.to_f64() > 0.0).collect();
            if bits == s.target {
                hits += 1;
            }
        }
        Ok(hits as f64 / set.caption.len() as f64)
    })?;
    Ok(MetricsReport {
        qa_acc,
        cap_acc,
        n: set.qa.len(),
        cap_n: set.caption.len(),
        seed,
        config_digest: config_digest.to_string(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Train a model per the run config and evaluate it. The work cell of the
/// ablation grid and the headline benchmark runs.
pub fn train_and_evaluate(run: &RunConfig) -> Result<(MetricsReport, Vec<crate::train::LogRow>)> {
    run.validate()?;
    let model = QaVitModel::<f32>::from_run_config(run)?;
    let mut trainer = Trainer::new(&model, &run.data, &run.train, run.seed)?;
    trainer.run(|_| Ok(()))?;
    let set = build_eval_set::<f32>(&run.data, run.model.text.k_max, run.seed);
    let report = evaluate(&model, &set, run.seed, &run.digest())?;
    Ok((report, trainer.rows))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    #[serde(default)]
    pub base: RunConfig,
    pub modes: Vec<FusionMode>,
    #[serde(default = "d_l_values")]
    pub l_values: Vec<usize>,
    #[serde(default)]
    pub text_sources: Option<Vec<TextSource>>,
    #[serde(default)]
    pub head_modes: Option<Vec<HeadMode>>,
    #[serde(default = "d_flags_false")]
    pub pt_flags: Vec<bool>,
    #[serde(default = "d_flags_true")]
    pub freeze_flags: Vec<bool>,
    pub seeds: Vec<u64>,
    /// Total training-step budget shared equally by all cells.
    pub budget: u64,
    #[serde(default = "d_min_steps")]
    pub min_steps: u64,
}

fn d_l_values() -> Vec<usize> {
    vec![2]
}
fn d_flags_false() -> Vec<bool> {
    vec![false]
}
fn d_flags_true() -> Vec<bool> {
    vec![true]
}
fn d_min_steps() -> u64 {
    50
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub mode: String,
    pub l: usize,
    pub text_source: String,
    pub head_mode: String,
    pub pt: bool,
    pub freeze: bool,
    pub seed: u64,
    pub qa_acc: f64,
    pub cap_acc: f64,
    pub delta_vs_baseline: f64,
    pub config_digest: String,
}

pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub per_cell_steps: u64,
    pub cell_configs: Vec<RunConfig>,
}

fn text_source_name(s: TextSource) -> &'static str {
    match s {
        TextSource::EmbeddingOnly => "embedding_only",
        TextSource::TinyEncoder => "tiny_encoder",
    }
}

fn head_mode_name(m: HeadMode) -> &'static str {
    match m {
        HeadMode::VisualOnly => "visual_only",
        HeadMode::VisualPlusQuestion => "visual_plus_question",
    }
}

fn mode_name(m: FusionMode) -> &'static str {
    match m {
        FusionMode::None => "none",
        FusionMode::Early => "early",
        FusionMode::Late => "late",
        FusionMode::Sparse => "sparse",
        FusionMode::All => "all",
        FusionMode::Custom => "custom",
    }
}

/// Expand the grid into per-cell run configs, deduplicated by digest.
pub fn expand_cells(spec: &AblationSpec) -> Result<Vec<RunConfig>> {
    let text_sources = spec.text_sources.clone().unwrap_or_else(|| vec![spec.base.model.text.source]);
    let head_modes = spec.head_modes.clone().unwrap_or_else(|| vec![spec.base.model.head.mode]);
    let mut cells = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for &mode in &spec.modes {
        for &l in &spec.l_values {
            for &source in &text_sources {
                for &head_mode in &head_modes {
                    for &pt in &spec.pt_flags {
                        for &freeze in &spec.freeze_flags {
                            for &seed in &spec.seeds {
                                let mut cfg = spec.base.clone();
                                cfg.model.fusion.mode = mode;
                                // L is meaningful for early/late only; pin the
                                // derived plans so digests deduplicate.
                                cfg.model.fusion.l = match mode {
                                    FusionMode::None => 0,
                                    FusionMode::Sparse | FusionMode::All | FusionMode::Custom => 0,
                                    _ => l,
                                };
                                cfg.model.text.source = source;
                                cfg.model.head.mode = head_mode;
                                cfg.model.pt = pt;
                                cfg.model.freeze_backbone = freeze;
                                cfg.seed = seed;
                                cfg.validate()?;
                                if seen.insert(cfg.digest()) {
                                    cells.push(cfg);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Train every cell with an identical per-cell budget, in `jobs` worker
/// threads, and emit rows ranked by QA accuracy with deltas against the
/// unfused baseline cells.
pub fn run_ablation(spec: &AblationSpec, jobs: usize) -> Result<AblationOutcome> {
    let cells = expand_cells(spec)?;
    if cells.is_empty() {
        return Err(Error::Budget("ablation grid has no cells".into()));
    }
    let per_cell = spec.budget / cells.len() as u64;
    if per_cell < spec.min_steps {
        return Err(Error::Budget(format!(
            "budget {} over {} cells gives {} steps/cell, below min_steps {}",
            spec.budget,
            cells.len(),
            per_cell,
            spec.min_steps
        )));
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<AblationRow>)>> = Mutex::new(Vec::new());
    let jobs = jobs.max(1).min(cells.len());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let row = run_cell(&cells[i], per_cell);
                results.lock().expect("no poisoned lock").push((i, row));
            });
        }
    });

    let mut collected = results.into_inner().expect("workers done");
    collected.sort_by_key(|(i, _)| *i);
    let mut rows = Vec::with_capacity(collected.len());
    for (_, r) in collected {
        rows.push(r?);
    }

    // Baseline: median QA accuracy of the unfused cells; a grid without a
    // `none` cell is measured against its own median (a single cell thus
    // gets delta 0).
    let mut none_accs: Vec<f64> = rows.iter().filter(|r| r.mode == "none").map(|r| r.qa_acc).collect();
    let baseline = if none_accs.is_empty() {
        let mut all: Vec<f64> = rows.iter().map(|r| r.qa_acc).collect();
        median(&mut all)
    } else {
        median(&mut none_accs)
    };
    for r in &mut rows {
        r.delta_vs_baseline = r.qa_acc - baseline;
    }
    rows.sort_by(|a, b| {
        b.qa_acc
            .partial_cmp(&a.qa_acc)
            .expect("finite accuracy")
            .then_with(|| a.config_digest.cmp(&b.config_digest))
    });
    Ok(AblationOutcome { rows, per_cell_steps: per_cell, cell_configs: cells })
}

fn run_cell(cfg: &RunConfig, steps: u64) -> Result<AblationRow> {
    let mut cfg = cfg.clone();
    cfg.train.total_steps = steps;
    cfg.train.warmup_steps = cfg.train.warmup_steps.min(steps / 10);
    let digest = cfg.digest();
    let (report, _) = train_and_evaluate(&cfg)?;
    Ok(AblationRow {
        mode: mode_name(cfg.model.fusion.mode).to_string(),
        l: cfg.model.fusion.l,
        text_source: text_source_name(cfg.model.text.source).to_string(),
        head_mode: head_mode_name(cfg.model.head.mode).to_string(),
        pt: cfg.model.pt,
        freeze: cfg.model.freeze_backbone,
        seed: cfg.seed,
        qa_acc: report.qa_acc,
        cap_acc: report.cap_acc,
        delta_vs_baseline: 0.0,
        config_digest: digest,
    })
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("mode,L,text_source,head_mode,pt,freeze,seed,qa_acc,cap_acc,delta_vs_baseline\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.4},{:.4},{:+.4}\n",
            r.mode, r.l, r.text_source, r.head_mode, r.pt, r.freeze, r.seed, r.qa_acc, r.cap_acc, r.delta_vs_baseline
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{oracle_answer, GridWorldSpec};

    #[test]
    fn oracle_predictor_scores_one() {
        let data = DataConfig { eval_qa: 50, eval_caption: 0, ..DataConfig::default() };
        let set = build_eval_set::<f32>(&data, 32, 7);
        let spec = GridWorldSpec::default();
        let space = AnswerSpace::new(&data.question_forms, &spec);
        let acc = evaluate_qa_with(
            |s| oracle_answer(&s.image, &s.question_text, &spec, &space).expect("oracle parses"),
            &set.qa,
        );
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn constant_predictor_is_near_chance() {
        let data = DataConfig { eval_qa: 2000, eval_caption: 0, ..DataConfig::default() };
        let set = build_eval_set::<f32>(&data, 32, 11);
        let acc = evaluate_qa_with(|_| 3usize, &set.qa);
        // 99% binomial band around 0.125 for n = 2000.
        let sd = (0.125 * 0.875 / 2000.0f64).sqrt();
        assert!((acc - 0.125).abs() < 2.58 * sd + 1e-9, "acc = {}", acc);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn expand_cells_dedupes_none_mode() {
        let spec = AblationSpec {
            base: RunConfig::default(),
            modes: vec![FusionMode::None, FusionMode::Late],
            l_values: vec![1, 2],
            text_sources: None,
            head_modes: None,
            pt_flags: vec![false],
            freeze_flags: vec![true],
            seeds: vec![0],
            budget: 1000,
            min_steps: 1,
        };
        let cells = expand_cells(&spec).unwrap();
        // none collapses over l_values: 1 none + 2 late.
        assert_eq!(cells.len(), 3);
    }

    #[test]
    fn budget_error_when_too_small() {
        let spec = AblationSpec {
            base: RunConfig::default(),
            modes: vec![FusionMode::None],
            l_values: vec![0],
            text_sources: None,
            head_modes: None,
            pt_flags: vec![false],
            freeze_flags: vec![true],
            seeds: vec![0, 1],
            budget: 10,
            min_steps: 50,
        };
        assert!(matches!(run_ablation(&spec, 1), Err(Error::Budget(_))));
    }
}
