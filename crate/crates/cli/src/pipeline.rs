//! Command implementations: each takes a resolved [`Config`], runs one
//! stage of the workflow, and leaves its artifacts in the run directory.

use crate::config::Config;
use crate::dataset;
use crate::error::{CliError, Result};
use crate::report::{
    self, AnalysisReport, Diagnostics, SweepSummary, TrainSummary, WorstCaseReport,
};
use std::path::Path;
use std::time::Instant;
use wcq_core::data::Dataset;
use wcq_core::device::WeightPerturbation;
use wcq_core::hardening::{self, InnerSearchMode, SweepSpec};
use wcq_core::model::{self, Network};
use wcq_core::search::{self, SampleRecord};
use wcq_core::train::{self, streams, EpochRecord, TrainConfig, TrainOutcome};
use wcq_core::{analysis, baselines, checkpoint, Error};

/// Loads the configured dataset pair, applying the training-subset cap.
pub fn load_data(cfg: &Config) -> Result<(Dataset, Dataset)> {
    let root = Path::new(&cfg.data.dir);
    let (mut train_set, test_set) = dataset::load_by_name(&cfg.data.dataset, root)?;
    if cfg.data.train_subset > 0 && cfg.data.train_subset < train_set.len() {
        let per_class = cfg.data.train_subset / train_set.num_classes().max(1);
        let idxs = train_set.balanced_indices(per_class);
        train_set = train_set.subset(&idxs);
    }
    Ok((train_set, test_set))
}

/// Architecture sanity check between a config and a loaded dataset.
fn check_arch_matches_data(net: &Network, data: &Dataset) -> Result<()> {
    let want = [data.channels, data.height, data.width];
    if net.input_shape != want {
        return Err(CliError::Config(format!(
            "architecture `{}` expects input {:?} but dataset `{}` provides {:?}",
            net.arch, net.input_shape, data.name, want
        )));
    }
    Ok(())
}

/// Loads a trained checkpoint and snaps its weights to the deployment grid —
/// the network every analysis stage operates on.
fn load_deployed_checkpoint(path: &str, want_arch: &str) -> Result<Network> {
    if path.is_empty() {
        return Err(CliError::Config(
            "model.checkpoint is required for this stage; train one with `wcq train` \
             or pass --model"
                .into(),
        ));
    }
    let mut net = checkpoint::load_network(Path::new(path)).map_err(CliError::from)?;
    if net.arch != want_arch {
        return Err(CliError::Config(format!(
            "checkpoint {path} holds `{}`, config wants `{}`",
            net.arch, want_arch
        )));
    }
    net.quantize_weights();
    Ok(net)
}

fn load_deployed_model(cfg: &Config) -> Result<Network> {
    load_deployed_checkpoint(&cfg.model.checkpoint, &cfg.model.arch)
}

/// The evaluation slice analysis stages report over: a class-balanced subset
/// of the test set, or the whole set when the cap is 0 or not smaller.
fn eval_dataset(cfg: &Config, test: &Dataset) -> Dataset {
    let cap = cfg.attack.eval_subset;
    if cap > 0 && cap < test.len() {
        let per_class = cap / test.num_classes().max(1);
        test.subset(&test.balanced_indices(per_class))
    } else {
        test.clone()
    }
}

/// Full-test-set accuracy of the deployed (weight-snapped) model.
pub fn deployed_test_accuracy(net: &Network, test: &Dataset) -> Result<f64> {
    let mut deployed = net.clone();
    deployed.quantize_weights();
    let mut correct = 0usize;
    let idxs: Vec<usize> = (0..test.len()).collect();
    for chunk in idxs.chunks(256) {
        let (x, labels) = test.batch(chunk);
        let logits = deployed.eval_logits(x, None).map_err(CliError::from)?;
        let c = deployed.num_classes;
        for (s, &t) in labels.iter().enumerate() {
            if model::argmax_row(&logits.data()[s * c..(s + 1) * c]) == t {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Shared skeleton of the training stages: resolve data and model, run the
/// supplied trainer with progress lines and a crash-safe `last.bin`
/// snapshot, then save `model.bin` (best epoch), `curves.csv` and
/// `train_summary.json`.
fn train_pipeline(
    cfg: &Config,
    init_checkpoint: Option<&Path>,
    method: &str,
    intro: &str,
    trainer: impl FnOnce(
        &mut Network,
        &Dataset,
        &Dataset,
        &TrainConfig,
        &mut dyn FnMut(&EpochRecord, &Network),
    ) -> wcq_core::Result<TrainOutcome>,
) -> Result<()> {
    let started = Instant::now();
    let out = cfg.out_dir();
    report::ensure_dir(&out)?;
    report::write_json(&out.join("resolved_config.json"), cfg)?;

    let (train_set, test_set) = load_data(cfg)?;
    let mut net = match init_checkpoint {
        Some(path) => {
            let net = checkpoint::load_network(path).map_err(CliError::from)?;
            if net.arch != cfg.model.arch {
                return Err(CliError::Config(format!(
                    "checkpoint {} holds `{}`, config wants `{}`",
                    path.display(),
                    net.arch,
                    cfg.model.arch
                )));
            }
            println!("initialized from {}", path.display());
            net
        }
        None => {
            let mut net = model::by_name(&cfg.model.arch, cfg.quant_config())
                .map_err(|e: Error| CliError::Config(e.to_string()))?;
            net.init_parameters(&mut train::rng_for(cfg.experiment.seed, streams::INIT));
            net
        }
    };
    check_arch_matches_data(&net, &train_set)?;

    let tcfg = cfg.train_config()?;
    println!(
        "training {} on {} ({} samples, {} epochs, batch {}, lr {}, noise bound {})",
        net.arch,
        train_set.name,
        train_set.len(),
        tcfg.epochs,
        tcfg.batch_size,
        tcfg.lr,
        tcfg.noise_bound,
    );
    if !intro.is_empty() {
        println!("{intro}");
    }
    let last_path = out.join("last.bin");
    let mut on_epoch = |rec: &EpochRecord, snapshot: &Network| {
        println!(
            "epoch {:>3}: train loss {:.4}, deployed val accuracy {:.2}%  [{:.0}s]",
            rec.epoch,
            rec.train_loss,
            rec.val_accuracy * 100.0,
            started.elapsed().as_secs_f64(),
        );
        // crash-safe snapshot of the latest epoch
        if let Err(e) = checkpoint::save_network(&last_path, snapshot) {
            eprintln!("warning: could not write {}: {e}", last_path.display());
        }
    };
    let outcome =
        trainer(&mut net, &train_set, &test_set, &tcfg, &mut on_epoch).map_err(CliError::from)?;

    let final_test_accuracy = deployed_test_accuracy(&net, &test_set)?;
    checkpoint::save_network(out.join("model.bin"), &net).map_err(CliError::from)?;
    report::write_curves_csv(&out.join("curves.csv"), &outcome.history)?;
    report::write_json(
        &out.join("train_summary.json"),
        &TrainSummary {
            arch: net.arch.clone(),
            dataset: train_set.name.clone(),
            method: method.into(),
            epochs: tcfg.epochs,
            best_epoch: outcome.best_epoch,
            best_val_accuracy: outcome.best_val_accuracy,
            final_test_accuracy,
            seed: cfg.experiment.seed,
            runtime_seconds: started.elapsed().as_secs_f64(),
            notes: cfg.experiment.notes.clone(),
        },
    )?;
    println!(
        "best epoch {} with deployed accuracy {:.2}%; artifacts in {}",
        outcome.best_epoch,
        final_test_accuracy * 100.0,
        out.display()
    );
    Ok(())
}

/// `train`: quantization-aware training. With `train.noise_bound > 0` the
/// run is variation-aware by construction and labeled as such.
pub fn run_train(cfg: &Config, init_checkpoint: Option<&Path>) -> Result<()> {
    let method = if cfg.train.noise_bound > 0.0 { "variation_aware" } else { "regular" };
    train_pipeline(cfg, init_checkpoint, method, "", |net, tr, va, tcfg, cb| {
        train::train(net, tr, va, tcfg, cb)
    })
}

/// `va-train`: training under uniform weight noise bounded by the device
/// model's write-verify threshold.
pub fn run_va_train(cfg: &Config, init_checkpoint: Option<&Path>) -> Result<()> {
    if cfg.train.noise_bound > 0.0 {
        return Err(CliError::Config(
            "va-train derives the noise bound from the device section; \
             clear train.noise_bound (or use plain `train` to set it manually)"
                .into(),
        ));
    }
    let th_g = cfg.device_config()?.th_g();
    let intro = format!("variation-aware: uniform weight noise within ±{th_g} on every step");
    train_pipeline(cfg, init_checkpoint, "variation_aware", &intro, |net, tr, va, tcfg, cb| {
        hardening::variation_aware_train(net, tr, va, tcfg, th_g, cb)
    })
}

/// `adv-train`: training against a truncated worst-case search run on every
/// batch at the device bound.
pub fn run_adv_train(cfg: &Config, init_checkpoint: Option<&Path>) -> Result<()> {
    let th_g = cfg.device_config()?.th_g();
    let inner = cfg.inner_search_config()?;
    let mode =
        if cfg.adv.full_fidelity { InnerSearchMode::Full } else { InnerSearchMode::Truncated };
    let intro = format!(
        "adversarial: inner search {} iters at c {:.1e}, lr {:.1e}, bound {th_g}{}",
        inner.iters,
        inner.c,
        inner.lr,
        if cfg.adv.full_fidelity { " (full bisection per batch)" } else { "" },
    );
    train_pipeline(cfg, init_checkpoint, "adversarial", &intro, |net, tr, va, tcfg, cb| {
        hardening::adversarial_train(net, tr, va, tcfg, th_g, &inner, mode, cb)
    })
}

/// Everything the worst-case stages share when writing their artifacts.
struct WorstCaseRun<'a> {
    method: &'a str,
    clean_accuracy: f64,
    worst_accuracy: f64,
    chosen_c: f64,
    records: &'a [SampleRecord],
    perturbation: &'a WeightPerturbation,
    monotone_endpoints: Option<bool>,
    clamp_events: Option<usize>,
    worst_run: Option<usize>,
}

/// Validates the bound, derives the confusion/confidence/magnitude analyses,
/// and writes `report.json`, `diagnostics.json`, `records.csv` and
/// `perturbation.bin`.
fn emit_worstcase(
    out: &Path,
    cfg: &Config,
    net: &Network,
    run: &WorstCaseRun<'_>,
    started: Instant,
) -> Result<WorstCaseReport> {
    run.perturbation.check_bound(1e-12).map_err(CliError::from)?;
    let confusion = analysis::analyze_confusion(run.records, net.num_classes);
    let confidence = analysis::analyze_confidence(run.records);
    let profile = analysis::analyze_perturbation(run.perturbation, net);
    let report = WorstCaseReport {
        clean_accuracy: run.clean_accuracy,
        worst_accuracy: run.worst_accuracy,
        th_g: run.perturbation.th_g,
        chosen_c: run.chosen_c,
        achieved_l: run.perturbation.max_abs(),
        confusion: confusion.normalized.clone(),
        confidence_stats: confidence,
        per_layer: profile.per_layer.clone(),
        runtime_seconds: started.elapsed().as_secs_f64(),
        seed: cfg.experiment.seed,
    };
    report::write_json(&out.join("report.json"), &report)?;
    report::write_json(
        &out.join("diagnostics.json"),
        &Diagnostics {
            method: run.method.into(),
            eval_samples: run.records.len(),
            sink_class: confusion.sink_class,
            sink_share: confusion.sink_share,
            confusion_counts: confusion.counts,
            magnitude_histogram: profile.bins.clone(),
            histogram_degenerate: profile.degenerate,
            extreme_fraction: profile.extreme_fraction(),
            monotone_endpoints: run.monotone_endpoints,
            clamp_events: run.clamp_events,
            worst_run: run.worst_run,
            notes: cfg.experiment.notes.clone(),
        },
    )?;
    report::write_records_csv(&out.join("records.csv"), run.records)?;
    checkpoint::save_perturbation(
        out.join("perturbation.bin"),
        net,
        &run.perturbation.deltas,
        run.perturbation.th_g,
    )
    .map_err(CliError::from)?;
    Ok(report)
}

fn print_worstcase_summary(report: &WorstCaseReport, out: &Path) {
    println!(
        "clean {:.2}% → worst {:.2}% (max|ΔW| {:.6} ≤ th_g {:.6}); artifacts in {}",
        report.clean_accuracy * 100.0,
        report.worst_accuracy * 100.0,
        report.achieved_l,
        report.th_g,
        out.display()
    );
}

/// `attack`: the relaxed worst-case search with penalty-constant bisection.
pub fn run_attack(cfg: &Config) -> Result<()> {
    let started = Instant::now();
    let net = load_deployed_model(cfg)?;
    let out = cfg.out_dir();
    report::ensure_dir(&out)?;
    report::write_json(&out.join("resolved_config.json"), cfg)?;

    let (_, test_set) = load_data(cfg)?;
    check_arch_matches_data(&net, &test_set)?;
    let data = eval_dataset(cfg, &test_set);
    let scfg = cfg.search_config()?;
    println!(
        "worst-case search on {} over {} samples (th_g {}, surrogate {}, {} rounds × {} iters, {})",
        net.arch,
        data.len(),
        scfg.th_g,
        cfg.attack.surrogate,
        scfg.rounds,
        scfg.iters,
        if scfg.full_batch { "full-batch" } else { "chunked" },
    );

    let outcome = search::binary_search_c(&net, &data, &scfg).map_err(CliError::from)?;
    for r in &outcome.rounds {
        println!(
            "  c {:>10.4e}: L {:.6} {}, accuracy {:.2}%",
            r.c,
            r.achieved_l,
            if r.feasible { "feasible" } else { "infeasible" },
            r.accuracy * 100.0,
        );
    }

    let report = emit_worstcase(
        &out,
        cfg,
        &net,
        &WorstCaseRun {
            method: "search",
            clean_accuracy: outcome.clean_accuracy,
            worst_accuracy: outcome.worst_accuracy,
            chosen_c: outcome.chosen_c,
            records: &outcome.records,
            perturbation: &outcome.perturbation,
            monotone_endpoints: Some(outcome.monotone_endpoints),
            clamp_events: Some(outcome.clamp_events),
            worst_run: None,
        },
        started,
    )?;

    let trace_rows: Vec<Vec<String>> = outcome
        .trace
        .iter()
        .map(|t| {
            vec![
                t.iter.to_string(),
                t.objective.to_string(),
                t.batch_accuracy.to_string(),
                t.max_abs.to_string(),
            ]
        })
        .collect();
    report::write_csv(
        &out.join("trace.csv"),
        "iter,objective,batch_accuracy,max_abs",
        &trace_rows,
    )?;
    let round_rows: Vec<Vec<String>> = outcome
        .rounds
        .iter()
        .map(|r| {
            vec![
                r.c.to_string(),
                r.achieved_l.to_string(),
                r.feasible.to_string(),
                r.accuracy.to_string(),
            ]
        })
        .collect();
    report::write_csv(&out.join("rounds.csv"), "c,achieved_L,feasible,accuracy", &round_rows)?;

    println!("chosen c {:.4e}", report.chosen_c);
    print_worstcase_summary(&report, &out);
    Ok(())
}

/// `mc`: the Monte-Carlo baseline — many sampled perturbations, keep the
/// worst.
pub fn run_mc(cfg: &Config) -> Result<()> {
    let started = Instant::now();
    let net = load_deployed_model(cfg)?;
    let out = cfg.out_dir();
    report::ensure_dir(&out)?;
    report::write_json(&out.join("resolved_config.json"), cfg)?;

    let (_, test_set) = load_data(cfg)?;
    check_arch_matches_data(&net, &test_set)?;
    let data = eval_dataset(cfg, &test_set);
    let th_g = cfg.device_config()?.th_g();
    let dist = cfg.noise_distribution()?;
    println!(
        "Monte-Carlo scan on {}: {} runs × {} samples at th_g {} ({})",
        net.arch,
        cfg.mc.runs,
        data.len(),
        th_g,
        cfg.mc.distribution,
    );

    let outcome =
        baselines::mc_worstcase(&net, &data, th_g, cfg.mc.runs, dist, cfg.experiment.seed)
            .map_err(CliError::from)?;

    let report = emit_worstcase(
        &out,
        cfg,
        &net,
        &WorstCaseRun {
            method: "mc",
            clean_accuracy: outcome.clean_accuracy,
            worst_accuracy: outcome.worst_accuracy,
            chosen_c: 0.0,
            records: &outcome.records,
            perturbation: &outcome.perturbation,
            monotone_endpoints: None,
            clamp_events: None,
            worst_run: Some(outcome.worst_run),
        },
        started,
    )?;

    let rows: Vec<Vec<String>> = outcome
        .accuracies
        .iter()
        .enumerate()
        .map(|(i, a)| vec![i.to_string(), a.to_string()])
        .collect();
    report::write_csv(&out.join("runs.csv"), "run,accuracy", &rows)?;

    println!("worst run {} of {}", outcome.worst_run, outcome.accuracies.len());
    print_worstcase_summary(&report, &out);
    Ok(())
}

/// `pgd`: the sign-gradient ascent baseline with projection after every
/// step.
pub fn run_pgd(cfg: &Config) -> Result<()> {
    let started = Instant::now();
    let net = load_deployed_model(cfg)?;
    let out = cfg.out_dir();
    report::ensure_dir(&out)?;
    report::write_json(&out.join("resolved_config.json"), cfg)?;

    let (_, test_set) = load_data(cfg)?;
    check_arch_matches_data(&net, &test_set)?;
    let data = eval_dataset(cfg, &test_set);
    let th_g = cfg.device_config()?.th_g();
    if !(cfg.pgd.step_fraction > 0.0 && cfg.pgd.step_fraction.is_finite()) {
        return Err(CliError::Config(format!(
            "pgd.step_fraction must be positive, got {}",
            cfg.pgd.step_fraction
        )));
    }
    // At a zero bound every step projects back to the origin; any positive
    // step size yields the same (clean) result.
    let step = if th_g > 0.0 { th_g * cfg.pgd.step_fraction } else { 1.0 };
    println!(
        "projected-gradient ascent on {}: {} steps of {:.2e} over {} samples at th_g {}",
        net.arch,
        cfg.pgd.steps,
        step,
        data.len(),
        th_g,
    );

    let outcome =
        baselines::weight_pgd(&net, &data, th_g, cfg.pgd.steps, step).map_err(CliError::from)?;

    let report = emit_worstcase(
        &out,
        cfg,
        &net,
        &WorstCaseRun {
            method: "pgd",
            clean_accuracy: outcome.clean_accuracy,
            worst_accuracy: outcome.accuracy,
            chosen_c: 0.0,
            records: &outcome.records,
            perturbation: &outcome.perturbation,
            monotone_endpoints: None,
            clamp_events: None,
            worst_run: None,
        },
        started,
    )?;

    let rows: Vec<Vec<String>> = outcome
        .trace
        .iter()
        .enumerate()
        .map(|(i, l)| vec![(i + 1).to_string(), l.to_string()])
        .collect();
    report::write_csv(&out.join("trace.csv"), "step,max_abs", &rows)?;

    print_worstcase_summary(&report, &out);
    Ok(())
}

/// `sweep`: the write-verify threshold study — the worst-case search at
/// every bound on every listed checkpoint, plus the recommended threshold.
pub fn run_sweep(cfg: &Config) -> Result<()> {
    let started = Instant::now();
    if cfg.sweep.checkpoints.is_empty() {
        return Err(CliError::Config(
            "sweep.checkpoints must list at least one trained model".into(),
        ));
    }
    let mut nets = Vec::with_capacity(cfg.sweep.checkpoints.len());
    for path in &cfg.sweep.checkpoints {
        nets.push(load_deployed_checkpoint(path, &cfg.model.arch)?);
    }
    let out = cfg.out_dir();
    report::ensure_dir(&out)?;
    report::write_json(&out.join("resolved_config.json"), cfg)?;

    let (_, test_set) = load_data(cfg)?;
    check_arch_matches_data(&nets[0], &test_set)?;
    let data = eval_dataset(cfg, &test_set);
    let spec = SweepSpec {
        th_g_values: cfg.sweep.bounds.clone(),
        drop_threshold: cfg.sweep.drop_tolerance / 100.0,
    };
    let search = cfg.search_config()?;
    println!(
        "write-verify sweep on {}: {} bounds × {} networks over {} samples",
        cfg.model.arch,
        spec.th_g_values.len(),
        nets.len(),
        data.len(),
    );

    let outcome = hardening::write_verify_sweep(&nets, &data, &spec, &search, |p| {
        println!(
            "  th_g {:>7}: mean worst {:.2}% (±{:.2}), mean clean {:.2}%  [{:.0}s]",
            p.th_g,
            p.mean_worst * 100.0,
            p.std_worst * 100.0,
            p.mean_clean * 100.0,
            started.elapsed().as_secs_f64(),
        );
    })
    .map_err(CliError::from)?;

    let mut rows = Vec::new();
    for p in &outcome.points {
        for (seed, s) in p.seeds.iter().enumerate() {
            rows.push(vec![
                p.th_g.to_string(),
                seed.to_string(),
                s.clean_accuracy.to_string(),
                s.worst_accuracy.to_string(),
            ]);
        }
    }
    report::write_csv(&out.join("sweep.csv"), "th_g,seed,clean_acc,worst_acc", &rows)?;
    report::write_json(
        &out.join("sweep_summary.json"),
        &SweepSummary { checkpoints: cfg.sweep.checkpoints.clone(), outcome: outcome.clone() },
    )?;

    match outcome.star {
        Some(star) => println!(
            "star: th_g {} is the largest bound within {} points of the {:.2}% reference",
            star,
            cfg.sweep.drop_tolerance,
            outcome.reference_accuracy * 100.0,
        ),
        None => println!(
            "no swept bound keeps mean worst-case accuracy within {} points of the {:.2}% reference",
            cfg.sweep.drop_tolerance,
            outcome.reference_accuracy * 100.0,
        ),
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

/// `analyze`: re-derives every number in an existing run directory from its
/// recorded config, checkpoint and perturbation, fails on any mismatch, and
/// writes a fresh `analysis.json`.
pub fn run_analyze(run_dir: &Path) -> Result<()> {
    let read = |name: &str| -> Result<String> {
        let path = run_dir.join(name);
        std::fs::read_to_string(&path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    };
    let cfg: Config = serde_json::from_str(&read("resolved_config.json")?)
        .map_err(|e| CliError::Data(format!("resolved_config.json: {e}")))?;
    let report: WorstCaseReport = serde_json::from_str(&read("report.json")?)
        .map_err(|e| CliError::Data(format!("report.json: {e}")))?;

    let net = load_deployed_model(&cfg)?;
    let (deltas, meta) =
        checkpoint::load_perturbation(run_dir.join("perturbation.bin")).map_err(CliError::from)?;
    if meta.arch != net.arch {
        return Err(CliError::Config(format!(
            "perturbation was recorded for `{}`, checkpoint holds `{}`",
            meta.arch, net.arch
        )));
    }
    let pert = WeightPerturbation { deltas, th_g: meta.th_g };
    pert.check_bound(1e-12).map_err(CliError::from)?;

    let (_, test_set) = load_data(&cfg)?;
    let data = eval_dataset(&cfg, &test_set);
    let clean = search::evaluate_accuracy(&net, None, &data).map_err(CliError::from)?;
    let worst = search::evaluate_accuracy(&net, Some(&pert), &data).map_err(CliError::from)?;

    let checks = [
        ("clean_accuracy", clean.accuracy, report.clean_accuracy),
        ("worst_accuracy", worst.accuracy, report.worst_accuracy),
        ("achieved_L", pert.max_abs(), report.achieved_l),
        ("th_g", pert.th_g, report.th_g),
    ];
    for (name, recomputed, reported) in checks {
        if (recomputed - reported).abs() > 1e-12 {
            return Err(CliError::Numeric(format!(
                "round-trip mismatch on {name}: recomputed {recomputed}, report says {reported}"
            )));
        }
    }

    let confusion = analysis::analyze_confusion(&worst.records, net.num_classes);
    let confidence = analysis::analyze_confidence(&worst.records);
    let profile = analysis::analyze_perturbation(&pert, &net);
    report::write_json(
        &run_dir.join("analysis.json"),
        &AnalysisReport {
            checkpoint: cfg.model.checkpoint.clone(),
            eval_samples: worst.records.len(),
            clean_accuracy: clean.accuracy,
            worst_accuracy: worst.accuracy,
            achieved_l: pert.max_abs(),
            sink_class: confusion.sink_class,
            sink_share: confusion.sink_share,
            mean_confidence_correct: confidence.mean_correct,
            mean_confidence_wrong: confidence.mean_wrong,
            magnitude_histogram: profile.bins.clone(),
            histogram_degenerate: profile.degenerate,
            extreme_fraction: profile.extreme_fraction(),
            per_layer: profile.per_layer.clone(),
        },
    )?;

    println!(
        "round-trip verified: clean {:.2}%, worst {:.2}%, max|ΔW| {:.6} all match report.json",
        clean.accuracy * 100.0,
        worst.accuracy * 100.0,
        pert.max_abs(),
    );
    match (confusion.sink_class, confusion.sink_share) {
        (Some(class), Some(share)) => println!(
            "misclassifications sink into class {class} ({:.1}% of all errors)",
            share * 100.0
        ),
        _ => println!("no misclassifications under this perturbation"),
    }
    if let (Some(c), Some(w)) = (confidence.mean_correct, confidence.mean_wrong) {
        println!("mean confidence: correct {c:.3}, misclassified {w:.3}");
    }
    if !profile.degenerate {
        println!(
            "magnitude histogram mass in extreme bins: {:.1}%",
            profile.extreme_fraction() * 100.0
        );
    }
    println!("wrote {}", run_dir.join("analysis.json").display());
    Ok(())
}
