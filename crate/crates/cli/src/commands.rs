use std::collections::HashMap;
use std::path::Path;

use intent_core::annotation::{kappa_report, load_ratings_csv};
use intent_core::config::{ExperimentConfig, DEFAULT_CONFIG_TOML};
use intent_core::data::{load_dataset, Dataset};
use intent_core::evaluation::{
    evaluate_model, forbidden_cam_mass, group_report, is_rise_then_flat_or_peak, knn_sweep, macro_over,
    present_classes, run_disruption_study, ClassScores, DisruptionStudy, FineTune, KSweepConfig, StudyConfig, Target,
};
use intent_core::hashtags::{
    build_hashtag_feature, parse_hashtag_file, parse_vector_lines, EmbeddingTable, HashtagEncoder, KnnIndex,
    SegDictionary,
};
use intent_core::model::{load_checkpoint, IntentModel};
use intent_core::plot::{bar_chart, line_chart, Series};
use intent_core::synthetic::{neighbor_corpus, CorpusConfig, NeighborCorpus};
use intent_core::taxonomy::{group_classes, ClassEvidence, Taxonomy, NUM_CLASSES};
use intent_core::training::{train, EpochRecord, TrainOptions};
use intent_core::{Error, Result};

use crate::reports::{ClassMetric, EvalMetrics, SweepReport, METRICS_VERSION, SWEEP_VERSION};
use crate::{Cli, Command, PlotKind, TargetArg};

pub(crate) fn dispatch(cli: &Cli) -> Result<()> {
    if let Command::DefaultConfig = cli.command {
        print!("{DEFAULT_CONFIG_TOML}");
        return Ok(());
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Train(a) => cmd_train(&cfg, &a.manifest, a.val.as_deref(), &a.out),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::StudyDisruption(a) => cmd_study(&cfg, a),
        Command::GroupClasses(a) => cmd_group(&cfg, a),
        Command::HashtagBuild(a) => cmd_hashtags(&cfg, a),
        Command::KnnSweep(a) => cmd_sweep(&cfg, a),
        Command::Kappa(a) => cmd_kappa(a),
        Command::Plot(a) => cmd_plot(a),
        Command::DefaultConfig => unreachable!("handled above"),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("cannot read config {}: {source}", path.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn class_names(num_classes: usize) -> Option<Vec<String>> {
    (num_classes == NUM_CLASSES).then(|| Taxonomy::builtin().classes.into_iter().map(|c| c.name).collect())
}

fn check_classes(data: &Dataset, expected: usize, what: &str) -> Result<()> {
    match data.num_classes() {
        Some(k) if k != expected => Err(Error::Config(format!(
            "{what} has {expected} classes but the manifest has {k}"
        ))),
        _ => Ok(()),
    }
}

fn load_model(path: &Path) -> Result<IntentModel> {
    Ok(load_checkpoint(path)?.1)
}

fn cmd_train(cfg: &ExperimentConfig, manifest: &Path, val: Option<&Path>, out: &Path) -> Result<()> {
    let data = load_dataset(manifest, &cfg.masks)?;
    check_classes(&data, cfg.model.num_classes, "the config")?;
    let val_data = val.map(|p| load_dataset(p, &cfg.masks)).transpose()?;
    if let Some(v) = &val_data {
        check_classes(v, cfg.model.num_classes, "the config")?;
    }
    let model = IntentModel::new(cfg.model.clone(), cfg.loss.pi, cfg.seed)?;
    let opts = train_options(cfg, Some(out));
    let outcome = train(
        model,
        &data,
        val_data.as_ref(),
        &cfg.train_config(),
        &cfg.loss,
        &cfg.content_sets,
        &opts,
    )?;
    write_file(&out.join("config.toml"), &cfg.to_toml_string())?;
    let best = &outcome.epochs[outcome.best_epoch];
    println!(
        "trained {} epochs ({} steps); best epoch {} macro F1 {:.4}",
        outcome.epochs.len(),
        outcome.steps.len(),
        outcome.best_epoch,
        best.macro_f1
    );
    Ok(())
}

fn train_options(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> TrainOptions {
    TrainOptions {
        resample: cfg.saliency.resample,
        threshold: cfg.evaluation.threshold,
        use_hashtags: cfg.model.is_multimodal() && cfg.hashtags.use_in_training,
        out_dir: out_dir.map(Path::to_path_buf),
    }
}

fn cmd_eval(cfg: &ExperimentConfig, a: &crate::EvalArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let data = load_dataset(&a.manifest, &cfg.masks)?;
    check_classes(&data, model.num_classes(), "the checkpoint")?;
    let threshold = cfg.evaluation.threshold;
    let report = evaluate_model(&model, &data, threshold, model.config().is_multimodal())?;
    let labels = data.label_matrix();
    let names = class_names(model.num_classes());
    let per_class = report
        .per_class
        .iter()
        .enumerate()
        .map(|(c, &f1)| ClassMetric {
            class_id: c,
            name: names.as_ref().map(|n| n[c].clone()),
            positives: labels.column(c).iter().filter(|&&b| b).count(),
            f1,
        })
        .collect();
    let (content_groups, difficulty_groups) = match &a.groups {
        Some(p) => {
            let table = intent_core::taxonomy::GroupTable::load(p)?;
            (
                group_report(&report.per_class, &table.content_map())?,
                group_report(&report.per_class, &table.difficulty_map())?,
            )
        }
        None => Default::default(),
    };
    let sets = &cfg.content_sets;
    if let Some((c, _)) = sets.iter().find(|(c, _)| *c >= model.num_classes()) {
        return Err(Error::Config(format!("content set class {c} out of range for the checkpoint")));
    }
    let forbidden_mass = if !sets.is_empty() && data.has_masks() {
        Some(forbidden_cam_mass(&model, &data, sets, cfg.saliency.resample)?)
    } else {
        None
    };
    let metrics = EvalMetrics {
        version: METRICS_VERSION,
        images: data.len(),
        threshold,
        macro_f1: report.macro_f1,
        macro_f1_present: macro_over(&report.per_class, &present_classes(labels.view())),
        per_class,
        content_groups,
        difficulty_groups,
        forbidden_mass,
    };
    write_file(&a.out, &metrics.to_json_string())?;
    if let Some(p) = &a.class_scores {
        ClassScores::from_report(&report, labels.view())?.save(p)?;
    }
    println!("{} images, macro F1 {:.4}", data.len(), report.macro_f1);
    Ok(())
}

fn cmd_study(cfg: &ExperimentConfig, a: &crate::StudyArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let data = load_dataset(&a.manifest, &cfg.masks)?;
    check_classes(&data, model.num_classes(), "the checkpoint")?;
    let target = match a.target {
        TargetArg::Object => Target::Object,
        TargetArg::Context => Target::Context,
    };
    let tune_data = a.fine_tune_on.as_deref().map(|p| load_dataset(p, &cfg.masks)).transpose()?;
    if let Some(t) = &tune_data {
        check_classes(t, model.num_classes(), "the checkpoint")?;
    }
    // Each level restarts from the checkpoint weights.
    let fine_tune = tune_data.as_ref().map(|train_set| FineTune {
        train_set,
        train: cfg.train_config(),
        loss: cfg.loss,
        sets: cfg.content_sets.clone(),
        options: train_options(cfg, None),
    });
    let study = run_disruption_study(
        &model,
        &data,
        &StudyConfig {
            levels: cfg.evaluation.levels.clone(),
            target,
            threshold: cfg.evaluation.threshold,
            use_hashtags: model.config().is_multimodal(),
            fine_tune,
        },
    )?;
    study.save(&a.out)?;
    let macro_curve: Vec<String> = study
        .levels
        .iter()
        .zip(&study.macro_f1)
        .map(|(l, f)| format!("{l}:{f:.4}"))
        .collect();
    println!("macro F1 by level: {}", macro_curve.join(" "));
    Ok(())
}

fn cmd_group(cfg: &ExperimentConfig, a: &crate::GroupArgs) -> Result<()> {
    let object = DisruptionStudy::load(&a.studies[0])?;
    let context = DisruptionStudy::load(&a.studies[1])?;
    if object.target != Target::Object || context.target != Target::Context {
        return Err(Error::Input("--studies expects the object study first, then the context study".into()));
    }
    if object.f1.len() != context.f1.len() {
        return Err(Error::Input("the two studies cover different class counts".into()));
    }
    let scores = ClassScores::load(&a.f1)?;
    let evidence = scores
        .classes
        .iter()
        .map(|s| {
            if s.class_id >= object.f1.len() {
                return Err(Error::Input(format!("class {} has scores but no study", s.class_id)));
            }
            Ok(ClassEvidence {
                class_id: s.class_id,
                random_score: s.random,
                model_score: s.model,
                object_series: object.series(s.class_id)?,
                context_series: context.series(s.class_id)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = group_classes(&evidence, &cfg.grouping)?;
    table.save(&a.out)?;
    let names = class_names(object.f1.len());
    println!("class\tname\tcontent\tdifficulty\tD\talpha_bar_o\talpha_bar_c");
    for g in &table.classes {
        let name = names.as_ref().map_or("-", |n| n[g.class_id].as_str());
        println!(
            "{}\t{name}\t{:?}\t{:?}\t{:.4}\t{:.4}\t{:.4}",
            g.class_id, g.content_group, g.difficulty_group, g.d, g.alpha_bar_o, g.alpha_bar_c
        );
    }
    Ok(())
}

fn cmd_hashtags(cfg: &ExperimentConfig, a: &crate::HashtagArgs) -> Result<()> {
    let posts = parse_vector_lines(&read_file(&a.posts)?, "posts")?;
    let images = parse_vector_lines(&read_file(&a.images)?, "images")?;
    let tags: HashMap<String, _> = parse_hashtag_file(&read_file(&a.tags)?)?.into_iter().collect();
    let dict = SegDictionary::load(&a.dict)?;
    let embeddings = EmbeddingTable::load(&a.embeddings)?;
    let dim = posts.first().map_or(0, |p| p.1.len());
    if posts.is_empty() {
        return Err(Error::Input("no posts to index".into()));
    }
    if cfg.hashtags.k > posts.len() {
        return Err(Error::Config(format!(
            "hashtags.k = {} exceeds the {} indexed posts",
            cfg.hashtags.k,
            posts.len()
        )));
    }
    let index = KnnIndex::from_entries(dim, posts)?;
    let mut encoder = HashtagEncoder::new(&dict, &embeddings);
    let mut empty = 0;
    for (id, feature) in &images {
        if id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::Input(format!("image id {id:?} is not usable as a file name")));
        }
        let f = build_hashtag_feature(feature, &index, &tags, &mut encoder, &cfg.hashtags)?;
        if f.source_count == 0 {
            empty += 1;
        }
        f.save(&a.out.join(format!("{id}.json")))?;
    }
    println!(
        "{} hashtag features written to {} ({empty} without any encodable hashtag)",
        images.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, a: &crate::SweepArgs) -> Result<()> {
    let corpus = match &a.corpus {
        Some(dir) => NeighborCorpus::load_dir(dir)?,
        None => neighbor_corpus(&CorpusConfig {
            seed: cfg.seed,
            ..Default::default()
        }),
    };
    if let Some(dir) = &a.dump_corpus {
        corpus.save_dir(dir)?;
    }
    if let Some(&k) = a.k.iter().find(|&&k| k == 0 || k > corpus.posts.len()) {
        return Err(Error::Config(format!("k = {k} outside 1..={}", corpus.posts.len())));
    }
    let sweep_cfg = KSweepConfig {
        ks: a.k.clone(),
        metric: cfg.hashtags.metric,
        pooling: cfg.hashtags.pooling,
        threshold: cfg.evaluation.threshold,
        ..Default::default()
    };
    let points = knn_sweep(&corpus, &sweep_cfg)?;
    let f1: Vec<f64> = points.iter().map(|p| p.macro_f1).collect();
    let report = SweepReport {
        version: SWEEP_VERSION,
        metric: sweep_cfg.metric,
        pooling: sweep_cfg.pooling,
        rise_then_flat_or_peak: is_rise_then_flat_or_peak(&f1, 0.01),
        points,
    };
    write_file(&a.out.join("sweep.json"), &report.to_json_string())?;
    write_file(&a.out.join("sweep.tsv"), &report.to_tsv())?;
    write_file(&a.out.join("sweep.svg"), &sweep_svg(&report)?)?;
    print!("{}", report.to_tsv());
    println!(
        "shape: {}",
        if report.rise_then_flat_or_peak { "rise then flat or peak" } else { "other" }
    );
    Ok(())
}

fn sweep_svg(r: &SweepReport) -> Result<String> {
    let pts = r.points.iter().map(|p| (p.k as f64, p.macro_f1)).collect();
    line_chart("Effect of k", "k (neighbours)", "macro F1", &[Series::new("hashtag only", pts)])
}

fn cmd_kappa(a: &crate::KappaArgs) -> Result<()> {
    let ratings = load_ratings_csv(&a.ratings)?;
    let report = kappa_report(&ratings)?;
    println!(
        "pooled kappa {:.4}{}",
        report.pooled.kappa,
        if report.pooled.degenerate { " (single category)" } else { "" }
    );
    for (task, k) in &report.per_task {
        println!("task {task}: {:.4}", k.kappa);
    }
    if let Some(m) = report.task_mean {
        println!("mean over {} tasks: {m:.4}", report.per_task.len());
    }
    if let Some(out) = &a.out {
        write_file(out, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    }
    Ok(())
}

fn cmd_plot(a: &crate::PlotArgs) -> Result<()> {
    let text = read_file(&a.input)?;
    let svg = match a.kind {
        PlotKind::Sweep => sweep_svg(&SweepReport::from_json_str(&text)?)?,
        PlotKind::Study => {
            let st = DisruptionStudy::from_json_str(&text)?;
            let curve = |ys: &[f64]| st.levels.iter().copied().zip(ys.iter().copied()).collect::<Vec<_>>();
            let mut series = vec![Series::new("macro F1", curve(&st.macro_f1))];
            for &c in &a.classes {
                let ys = st
                    .f1
                    .get(c)
                    .ok_or_else(|| Error::Input(format!("class {c} not in the study")))?;
                series.push(Series::new(format!("class {c}"), curve(ys)));
            }
            let title = format!("{:?} disruption", st.target);
            line_chart(&title, "disruption level", "F1", &series)?
        }
        PlotKind::Scores => {
            let s = ClassScores::from_json_str(&text)?;
            let labels: Vec<String> = s.classes.iter().map(|c| c.class_id.to_string()).collect();
            bar_chart(
                "Per-class F1",
                "F1 (%)",
                &labels,
                &[
                    ("random".into(), s.classes.iter().map(|c| c.random).collect()),
                    ("model".into(), s.classes.iter().map(|c| c.model).collect()),
                ],
            )?
        }
        PlotKind::Epochs => {
            let records = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, l)| {
                    serde_json::from_str::<EpochRecord>(l)
                        .map_err(|e| Error::parse(format!("epochs line {}", i + 1), e))
                })
                .collect::<Result<Vec<_>>>()?;
            let pts = |f: fn(&EpochRecord) -> f64| records.iter().map(|r| (r.epoch as f64, f(r))).collect();
            line_chart(
                "Training",
                "epoch",
                "value",
                &[
                    Series::new("macro F1", pts(|r| r.macro_f1)),
                    Series::new("classification loss", pts(|r| r.classification_loss)),
                    Series::new("localization loss", pts(|r| r.localization_loss)),
                ],
            )?
        }
    };
    write_file(&a.out, &svg)?;
    println!("wrote {}", a.out.display());
    Ok(())
}
