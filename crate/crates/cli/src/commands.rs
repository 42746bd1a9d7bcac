use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use eend_core::config::FlatConfig;
use eend_core::encoder::EncoderConfig;
use eend_core::features::{featurize as front_end, AudioClip, FeatureSequence, FEATURE_DIM};
use eend_core::inference::{decode, iterative_inference, iterative_inference_plus, sad_postprocess, SadLabels};
use eend_core::model::{EendModel, InferOptions, ModelConfig, MODEL_KEYS};
use eend_core::rttm::{read_rttm, segmentize, write_rttm, Annotation, FrameLabels};
use eend_core::scoring::{counting_confusion, der_times, jer, pair_by_recording, DerBreakdown};
use eend_core::simulate::{write_corpus, SimConfig, SimMode};
use eend_core::trainer::{load_corpus, read_manifest, TrainConfig, Trainer, TRAIN_KEYS};
use eend_core::combine::combine_annotations;

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::{CombineArgs, CountArgs, FeaturizeArgs, InferArgs, InferMode, ScoreArgs, SimModeArg, SimulateArgs, TrainArgs};

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{}: no such file", path.display())))
    }
}

fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn stem(path: &Path) -> CliResult<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| CliError::Usage(format!("{}: cannot derive a recording id", path.display())))
}

pub fn simulate(a: SimulateArgs) -> CliResult<()> {
    let mut run = RunManifest::start("simulate");
    let cfg = SimConfig {
        num_speakers: a.nspk,
        num_mixtures: a.count,
        beta: a.beta,
        seed: a.seed,
        mode: match a.mode {
            SimModeArg::Feature => SimMode::Feature,
            SimModeArg::Waveform => SimMode::Waveform,
        },
        max_duration: a.max_duration,
        frame_period: a.frame_period,
        speaker_pool: a.speaker_pool,
        pool_seed: a.pool_seed,
        subsampling: a.subsampling,
        ..SimConfig::default()
    };
    cfg.validate()?;
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    create_dir(&a.out)?;
    let summary = write_corpus(&cfg, &a.out, a.jobs)?;
    info!(
        "{} mixtures in {}, overlap ratio {:.2}%",
        summary.mixtures,
        a.out.display(),
        summary.overlap_ratio
    );
    run.seed = Some(a.seed);
    for (k, v) in [
        ("num_speakers", cfg.num_speakers.to_string()),
        ("num_mixtures", cfg.num_mixtures.to_string()),
        ("beta", cfg.beta.to_string()),
        ("mode", cfg.mode.to_string()),
        ("max_duration", cfg.max_duration.map_or("none".into(), |d| d.to_string())),
        ("frame_period", cfg.frame_period.to_string()),
        ("speaker_pool", cfg.speaker_pool.map_or("none".into(), |p| p.to_string())),
        ("pool_seed", cfg.pool_seed.to_string()),
        ("subsampling", cfg.subsampling.to_string()),
        ("overlap_ratio", format!("{:.4}", summary.overlap_ratio)),
    ] {
        run.set(k, v);
    }
    run.finish(&a.out.join("run.json"))
}

pub fn featurize(a: FeaturizeArgs) -> CliResult<()> {
    let mut run = RunManifest::start("featurize");
    if a.subsampling == 0 {
        return Err(CliError::Usage("--subsampling must be at least 1".into()));
    }
    for p in &a.inputs {
        require_file(p)?;
    }
    create_dir(&a.out)?;
    let one = |p: &PathBuf| -> CliResult<()> {
        let clip = AudioClip::read_wav(p)?;
        let f = front_end(&clip, a.subsampling)?;
        f.save(a.out.join(format!("{}.feat", stem(p)?)))?;
        Ok(())
    };
    pool(a.jobs)?.install(|| a.inputs.par_iter().map(one).collect::<CliResult<Vec<()>>>())?;
    info!("featurized {} files into {}", a.inputs.len(), a.out.display());
    run.set("subsampling", a.subsampling);
    run.finish(&a.out.join("run.json"))
}

/// Effective settings: defaults, then the config file, then `--set`, then
/// dedicated flags. With `init`, model settings come from the checkpoint
/// and may not be changed.
fn train_settings(a: &TrainArgs, init: Option<&EendModel>) -> CliResult<(ModelConfig, TrainConfig, FlatConfig)> {
    let base_model = match init {
        Some(m) => m.config.clone(),
        None => ModelConfig::eda(EncoderConfig::standard(FEATURE_DIM)),
    };
    let mut cfg = base_model.to_flat();
    cfg.merge(&TrainConfig::default().to_flat());
    let mut user = FlatConfig::new();
    if let Some(path) = &a.config {
        require_file(path)?;
        user = FlatConfig::load(path).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    user.apply_overrides(&a.overrides)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(v) = a.epochs {
        user.set("train.epochs", v);
    }
    if let Some(v) = a.seed {
        user.set("train.seed", v);
    }
    if let Some(v) = a.jobs {
        user.set("train.jobs", v);
    }
    let known: Vec<&str> = MODEL_KEYS.iter().chain(TRAIN_KEYS).copied().collect();
    user.check_known(&known)?;
    cfg.merge(&user);
    let model = ModelConfig::from_flat(&cfg)?;
    if init.is_some() && model != base_model {
        return Err(CliError::Usage(
            "model settings conflict with the --init checkpoint".into(),
        ));
    }
    let train = TrainConfig::from_flat(&cfg)?;
    Ok((model, train, cfg))
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut run = RunManifest::start("train");
    require_file(&a.manifest)?;
    let init = match &a.init {
        Some(p) => {
            require_file(p)?;
            run.add_checkpoint(p)?;
            Some(EendModel::load(p)?)
        }
        None => None,
    };
    let (model_cfg, train_cfg, flat) = train_settings(&a, init.as_ref())?;
    let model = match init {
        Some(m) => m,
        None => EendModel::new(model_cfg, train_cfg.seed)?,
    };
    let entries = read_manifest(&a.manifest)?;
    let chunks = load_corpus(&model, &entries, train_cfg.chunk_frames)?;
    info!(
        "{} recordings, {} chunks, {} parameters",
        entries.len(),
        chunks.len(),
        model.params.num_values()
    );
    create_dir(&a.out)?;
    write_text(&a.out.join("config.txt"), &flat.to_text())?;
    run.seed = Some(train_cfg.seed);
    let mut trainer = Trainer::new(model, train_cfg)?;
    trainer.train(&chunks, Some(&a.out))?;
    for line in flat.to_text().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            run.set(k, v);
        }
    }
    run.add_checkpoint(&a.out.join("model.ckpt"))?;
    run.finish(&a.out.join("run.json"))
}

struct Recording {
    id: String,
    source: PathBuf,
}

fn load_features(path: &Path, subsampling: usize) -> CliResult<FeatureSequence> {
    let is_wav = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        Ok(front_end(&AudioClip::read_wav(path)?, subsampling)?)
    } else {
        Ok(FeatureSequence::load(path)?)
    }
}

enum Sad {
    None,
    Segments(BTreeMap<String, Annotation>),
    Frames(FrameLabels),
}

fn load_sad(spec: &str, recordings: usize) -> CliResult<Sad> {
    if spec == "none" {
        return Ok(Sad::None);
    }
    let path = Path::new(spec);
    require_file(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if text.starts_with("# eend frame labels") {
        if recordings != 1 {
            return Err(CliError::Usage(
                "a frame-label speech activity file only fits a single recording".into(),
            ));
        }
        return Ok(Sad::Frames(FrameLabels::parse(&text, spec)?));
    }
    let anns = read_rttm(path)?;
    Ok(Sad::Segments(
        anns.into_iter().map(|a| (a.recording_id.clone(), a)).collect(),
    ))
}

fn sad_for(sad: &Sad, id: &str, frames: usize, frame_period: f64) -> CliResult<Option<SadLabels>> {
    match sad {
        Sad::None => Ok(None),
        Sad::Frames(f) => {
            let z = SadLabels::from_activity(&f.activity);
            if z.len() != frames {
                return Err(CliError::Usage(format!(
                    "speech activity covers {} frames, {id} has {frames}",
                    z.len()
                )));
            }
            Ok(Some(z))
        }
        Sad::Segments(map) => {
            let a = map
                .get(id)
                .ok_or_else(|| CliError::Usage(format!("no speech activity for recording {id}")))?;
            Ok(Some(SadLabels::from_annotation(a, frame_period, frames)?))
        }
    }
}

pub fn infer(a: InferArgs) -> CliResult<()> {
    let mut run = RunManifest::start("infer");
    require_file(&a.model)?;
    let recordings: Vec<Recording> = match &a.manifest {
        Some(m) => {
            require_file(m)?;
            read_manifest(m)?
                .into_iter()
                .map(|e| Recording {
                    id: e.recording_id,
                    source: e.features,
                })
                .collect()
        }
        None => a
            .inputs
            .iter()
            .map(|p| Ok(Recording { id: stem(p)?, source: p.clone() }))
            .collect::<CliResult<_>>()?,
    };
    if recordings.is_empty() {
        return Err(CliError::Usage("give --input files or --manifest".into()));
    }
    for r in &recordings {
        require_file(&r.source)?;
    }
    if a.mode != InferMode::Plain && a.sad != "none" {
        return Err(CliError::Usage(
            "speech activity post-processing applies to plain mode only".into(),
        ));
    }
    if a.mode != InferMode::Plain && a.num_speakers.is_some() {
        return Err(CliError::Usage("--num-speakers applies to plain mode only".into()));
    }
    if a.mode != InferMode::Plain && a.smax == 0 {
        return Err(CliError::Usage("--smax must be at least 1".into()));
    }
    let sad = load_sad(&a.sad, recordings.len())?;
    let model = EendModel::load(&a.model)?;
    run.add_checkpoint(&a.model)?;
    let opts = InferOptions {
        tau: a.tau,
        shuffle_seed: if a.chronological { None } else { Some(a.shuffle_seed) },
        num_speakers: a.num_speakers,
        ..InferOptions::default()
    };
    let one = |r: &Recording| -> CliResult<Annotation> {
        let f = load_features(&r.source, a.subsampling)?;
        let fp = f.frame_period;
        let x = model.prepare(&f)?;
        let y = match a.mode {
            InferMode::Plain => {
                let out = model.infer(&x, &opts)?;
                match sad_for(&sad, &r.id, x.rows(), fp)? {
                    Some(z) => sad_postprocess(&out.posteriors, &z, fp)?,
                    None => decode(&out.posteriors, fp),
                }
            }
            InferMode::Iterative => {
                iterative_inference(&x, &model.diarizer(opts.clone()), a.smax, fp)?.activity
            }
            InferMode::IterativePlus => iterative_inference_plus(&x, &model.diarizer(opts.clone()), a.smax, fp)?,
        };
        info!("{}: {} speakers", r.id, y.active_speakers());
        Ok(segmentize(&y, &[], &r.id))
    };
    let hyps = pool(a.jobs)?.install(|| recordings.par_iter().map(one).collect::<CliResult<Vec<_>>>())?;
    create_dir(&a.out)?;
    write_rttm(a.out.join("hyp.rttm"), &hyps)?;
    run.set("mode", format!("{:?}", a.mode).to_lowercase());
    run.set("smax", a.smax);
    run.set("tau", a.tau);
    run.set("sad", &a.sad);
    run.set("num_speakers", a.num_speakers.map_or("estimated".into(), |n| n.to_string()));
    run.set("shuffle", if a.chronological { "chronological".into() } else { a.shuffle_seed.to_string() });
    run.seed = if a.chronological { None } else { Some(a.shuffle_seed) };
    run.finish(&a.out.join("run.json"))
}

pub fn combine(a: CombineArgs) -> CliResult<()> {
    let mut run = RunManifest::start("combine");
    if !(a.frame_period > 0.0) {
        return Err(CliError::Usage("--frame-period must be positive".into()));
    }
    for p in &a.hyps {
        require_file(p)?;
    }
    let sets = a.hyps.iter().map(read_rttm).collect::<Result<Vec<_>, _>>()?;
    let mut ids: Vec<String> = Vec::new();
    for set in &sets {
        for ann in set {
            if !ids.contains(&ann.recording_id) {
                ids.push(ann.recording_id.clone());
            }
        }
    }
    let mut fused = Vec::with_capacity(ids.len());
    for id in &ids {
        let hyps: Vec<Annotation> = sets
            .iter()
            .map(|set| {
                set.iter()
                    .find(|h| &h.recording_id == id)
                    .cloned()
                    .unwrap_or_else(|| Annotation::new(id.clone()))
            })
            .collect();
        fused.push(combine_annotations(&hyps, a.frame_period)?);
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_rttm(&a.out, &fused)?;
    run.set("frame_period", a.frame_period);
    run.set("hypotheses", a.hyps.len());
    let mut manifest = a.out.clone().into_os_string();
    manifest.push(".run.json");
    run.finish(Path::new(&manifest))
}

fn fmt_der(d: &DerBreakdown) -> String {
    match d.der() {
        Ok(v) => format!("{:.2}", 100.0 * v),
        Err(_) => "-".into(),
    }
}

/// Tab-separated report. Columns: recording, scored speech, missed, false
/// alarm, confusion (seconds), DER (%), and JER (%) with `jer`. The last
/// two lines are the `ALL` totals and `DER <value>`.
pub fn score_report(refs: &[Annotation], hyps: &[Annotation], collar: f64, with_jer: bool) -> CliResult<String> {
    let mut out = String::from("recording\tspeech\tmissed\tfalse_alarm\tconfusion\tder");
    if with_jer {
        out.push_str("\tjer");
    }
    out.push('\n');
    let mut total = DerBreakdown::default();
    let (mut jer_sum, mut jer_n) = (0.0, 0usize);
    for (r, h) in pair_by_recording(refs, hyps) {
        let d = der_times(r, &h, collar)?;
        total.accumulate(&d);
        write!(
            out,
            "{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{}",
            r.recording_id,
            d.speech,
            d.missed,
            d.false_alarm,
            d.confusion,
            fmt_der(&d)
        )
        .expect("string write");
        if with_jer {
            match jer(r, &h) {
                Ok(j) => {
                    jer_sum += j.speakers.iter().map(|s| s.score).sum::<f64>();
                    jer_n += j.speakers.len();
                    write!(out, "\t{:.2}", 100.0 * j.jer).expect("string write");
                }
                Err(_) => out.push_str("\t-"),
            }
        }
        out.push('\n');
    }
    let der = total.der()?;
    write!(
        out,
        "ALL\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.2}",
        total.speech,
        total.missed,
        total.false_alarm,
        total.confusion,
        100.0 * der
    )
    .expect("string write");
    if with_jer {
        if jer_n > 0 {
            write!(out, "\t{:.2}", 100.0 * jer_sum / jer_n as f64).expect("string write");
        } else {
            out.push_str("\t-");
        }
    }
    writeln!(out, "\nDER\t{:.2}", 100.0 * der).expect("string write");
    Ok(out)
}

pub fn score(a: ScoreArgs) -> CliResult<()> {
    if !(a.collar >= 0.0) {
        return Err(CliError::Usage("--collar must be non-negative".into()));
    }
    require_file(&a.reference)?;
    require_file(&a.hyp)?;
    let refs = read_rttm(&a.reference)?;
    let hyps = read_rttm(&a.hyp)?;
    print!("{}", score_report(&refs, &hyps, a.collar, a.jer)?);
    Ok(())
}

pub fn count(a: CountArgs) -> CliResult<()> {
    require_file(&a.reference)?;
    require_file(&a.hyp)?;
    let refs = read_rttm(&a.reference)?;
    let hyps = read_rttm(&a.hyp)?;
    let (r, h): (Vec<Annotation>, Vec<Annotation>) = pair_by_recording(&refs, &hyps)
        .into_iter()
        .map(|(r, h)| (r.clone(), h))
        .unzip();
    let c = counting_confusion(&r, &h)?;
    let n = c.matrix.len();
    let mut out = String::from("estimated\\reference");
    for j in 0..n {
        write!(out, "\t{j}").expect("string write");
    }
    out.push('\n');
    for (i, row) in c.matrix.iter().enumerate() {
        write!(out, "{i}").expect("string write");
        for v in row {
            write!(out, "\t{v}").expect("string write");
        }
        out.push('\n');
    }
    writeln!(out, "accuracy\t{:.2}", 100.0 * c.accuracy).expect("string write");
    print!("{out}");
    Ok(())
}
