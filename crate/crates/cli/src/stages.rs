use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use claimrisk::encoder::EncoderState;
use claimrisk::eval::{
    attention_html, bias_audit, drift_check, evaluate, scaling_experiment, EvalError, EvalResult,
};
use claimrisk::prep::{
    compression_stats, encode_timelines, prepare_dataset, read_prepared, write_prepared, PrepConfig, PreparedData,
};
use claimrisk::synth::{generate_cohort, load_cohort_dir, write_cohort};
use claimrisk::train::{finetune_classifier, pretrain_mtl, train_pipeline, EpochLog, Split, TrainHistory};

use crate::manifest::{sha256_file, RunManifest};
use crate::settings::Settings;

pub const CHECKPOINT_FILE: &str = "encoder.ckpt";
pub const HISTORY_FILE: &str = "history.tsv";
pub const EVAL_FILE: &str = "eval_result.json";

/// One stage invocation: upstream manifests read so far and files written.
pub struct StageRun<'a> {
    pub name: &'static str,
    pub run_dir: &'a Path,
    pub settings: &'a Settings,
    pub config_path: Option<&'a Path>,
    started_at: String,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl<'a> StageRun<'a> {
    pub fn new(name: &'static str, run_dir: &'a Path, settings: &'a Settings, config_path: Option<&'a Path>) -> Self {
        Self {
            name,
            run_dir,
            settings,
            config_path,
            started_at: chrono::Utc::now().to_rfc3339(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn dir(&self) -> PathBuf {
        self.run_dir.join(self.name)
    }

    /// Checks an upstream stage's outputs against its manifest and records
    /// them as inputs; returns that stage's directory.
    pub fn require(&mut self, stage: &str) -> anyhow::Result<PathBuf> {
        let m = RunManifest::verify(self.run_dir, stage)?;
        self.inputs.extend(m.outputs);
        Ok(self.run_dir.join(stage))
    }

    fn out_dir(&self) -> anyhow::Result<PathBuf> {
        let d = self.dir();
        std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    pub fn write(&mut self, file: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
        let path = self.out_dir()?.join(file);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(file.to_string());
        Ok(path)
    }

    pub fn record(&mut self, files: impl IntoIterator<Item = String>) {
        self.outputs.extend(files);
    }

    pub fn finish(self) -> anyhow::Result<RunManifest> {
        let dir = self.out_dir()?;
        let mut outputs = BTreeMap::new();
        for f in &self.outputs {
            outputs.insert(format!("{}/{f}", self.name), sha256_file(&dir.join(f))?);
        }
        let config_sha256 = match self.config_path {
            Some(p) => Some(sha256_file(p)?),
            None => None,
        };
        let m = RunManifest {
            stage: self.name.to_string(),
            config_path: self.config_path.map(|p| p.display().to_string()),
            config_sha256,
            input_dir: self.run_dir.display().to_string(),
            output_dir: dir.display().to_string(),
            seed: self.settings.seed,
            started_at: self.started_at,
            finished_at: chrono::Utc::now().to_rfc3339(),
            inputs: self.inputs,
            outputs,
        };
        m.write(&dir)?;
        Ok(m)
    }
}

fn log_epoch(e: &EpochLog) {
    eprintln!("{}", e.to_line());
}

/// Epoch lines without wall-clock time so reruns stay byte-identical.
fn history_tsv(histories: &[TrainHistory]) -> String {
    let mut out = String::new();
    for h in histories {
        for e in &h.epochs {
            let line = e.to_line();
            out.push_str(line.rsplit_once("\tseconds=").map_or(line.as_str(), |(head, _)| head));
            out.push('\n');
        }
        out.push_str(&format!("best_epoch={}\tbest_metric={:.6}\tstopped_early={}\n", h.best_epoch, h.best_metric, h.stopped_early));
    }
    out
}

fn save_checkpoint(run: &mut StageRun, state: &EncoderState) -> anyhow::Result<()> {
    let path = run.out_dir()?.join(CHECKPOINT_FILE);
    let extra = BTreeMap::from([("stage".to_string(), run.name.to_string()), ("seed".to_string(), run.settings.seed.to_string())]);
    state.save(&path, &extra)?;
    run.record([CHECKPOINT_FILE.to_string()]);
    Ok(())
}

fn load_prepared(run: &mut StageRun) -> anyhow::Result<PreparedData> {
    let dir = run.require("prep")?;
    Ok(read_prepared(&dir)?)
}

fn load_model(run: &mut StageRun, stage: &str, data: &PreparedData) -> anyhow::Result<EncoderState> {
    let dir = run.require(stage)?;
    Ok(EncoderState::load_for_vocab(&dir.join(CHECKPOINT_FILE), &data.vocab)?)
}

pub fn synth(mut run: StageRun) -> anyhow::Result<RunManifest> {
    let cohort = generate_cohort(&run.settings.cohort)?;
    let files = write_cohort(&run.out_dir()?, &cohort)?;
    eprintln!("synth: {} beneficiaries, {} claims", cohort.timelines.len(), cohort.n_claims());
    run.record(files);
    run.finish()
}

fn prepare(run: &mut StageRun, config: &PrepConfig) -> anyhow::Result<(PreparedData, f64)> {
    let dir = run.require("synth")?;
    let (timelines, counties) = load_cohort_dir(&dir)?;
    let data = prepare_dataset(&timelines, &counties, config)?;
    let ratio = compression_stats(&timelines, &counties, &data.quantizer)?.ratio();
    Ok((data, ratio))
}

pub fn prep(mut run: StageRun) -> anyhow::Result<RunManifest> {
    let config = run.settings.prep.clone();
    let (data, ratio) = prepare(&mut run, &config)?;
    let files = write_prepared(&run.out_dir()?, &data)?;
    run.record(files);
    let counts: BTreeMap<String, usize> = Split::ALL.iter().map(|&s| (s.to_string(), data.split(s).len())).collect();
    let summary = serde_json::json!({
        "labels": data.summary,
        "vocab_size": data.vocab.len(),
        "samples_per_split": counts,
        "compression_ratio": ratio,
    });
    run.write("summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    eprintln!("prep: {} samples, vocabulary {}, compression {ratio:.1}x", data.samples.len(), data.vocab.len());
    run.finish()
}

pub fn pretrain(mut run: StageRun) -> anyhow::Result<RunManifest> {
    let data = load_prepared(&mut run)?;
    let s = run.settings;
    let state = EncoderState::init(s.encoder_config(data.vocab.len())?, data.vocab.hash(), s.init_seed())?;
    let (train, validate) = (data.split_owned(Split::Train), data.split_owned(Split::Validate));
    let (state, history) = pretrain_mtl(&train, &validate, state, &data.vocab, &s.pretrain, &mut log_epoch)?;
    save_checkpoint(&mut run, &state)?;
    run.write(HISTORY_FILE, history_tsv(&[history]))?;
    run.finish()
}

pub fn finetune(mut run: StageRun) -> anyhow::Result<RunManifest> {
    let data = load_prepared(&mut run)?;
    let s = run.settings;
    let state = if s.from_pretrained {
        load_model(&mut run, "pretrain", &data)?
    } else {
        EncoderState::init(s.encoder_config(data.vocab.len())?, data.vocab.hash(), s.init_seed())?
    };
    let (train, validate) = (data.split_owned(Split::Train), data.split_owned(Split::Validate));
    let (state, history) = finetune_classifier(&train, &validate, state, &data.vocab, &s.finetune, &mut log_epoch)?;
    save_checkpoint(&mut run, &state)?;
    run.write(HISTORY_FILE, history_tsv(&[history]))?;
    run.finish()
}

pub fn eval(mut run: StageRun) -> anyhow::Result<RunManifest> {
    let data = load_prepared(&mut run)?;
    let state = load_model(&mut run, "finetune", &data)?;
    let r = evaluate(&state, &data.vocab, &data.split_owned(Split::Validate), &data.split_owned(Split::Test))?;
    println!(
        "auc={:.4}\trecall={:.4}\tspecificity={:.4}\tprecision={:.4}\talpha={:.4}\tn={}",
        r.auc, r.recall, r.specificity, r.precision, r.chosen_alpha, r.n_samples
    );
    run.write(EVAL_FILE, r.to_json() + "\n")?;
    run.finish()
}

pub fn scale(mut run: StageRun) -> anyhow::Result<RunManifest> {
    let data = load_prepared(&mut run)?;
    let s = run.settings;
    let encoder = s.encoder_config(data.vocab.len())?;
    let (train, validate, test) =
        (data.split_owned(Split::Train), data.split_owned(Split::Validate), data.split_owned(Split::Test));
    let pretrain = s.from_pretrained.then_some(&s.pretrain);
    let mut fit = |size: usize, tr: &[_], va: &[_]| {
        eprintln!("scale: size {size}, {} training samples", tr.len());
        train_pipeline(tr, va, &data.vocab, encoder.clone(), s.init_seed(), pretrain, &s.finetune, &mut log_epoch)
            .map(|(state, _)| state)
            .map_err(|e| EvalError::Training(e.to_string()))
    };
    let outcome = scaling_experiment(&s.sizes, &train, &validate, &test, &data.vocab, &mut fit)?;
    print!("{}", outcome.report.to_tsv());
    run.write("scaling.tsv", outcome.report.to_tsv())?;
    run.write("scaling.json", outcome.report.to_json() + "\n")?;
    run.finish()
}

pub fn drift(mut run: StageRun) -> anyhow::Result<RunManifest> {
    let data = load_prepared(&mut run)?;
    let state = load_model(&mut run, "finetune", &data)?;
    let eval_dir = run.require("eval")?;
    let reference: EvalResult = serde_json::from_str(&std::fs::read_to_string(eval_dir.join(EVAL_FILE))?)?;
    let later = generate_cohort(&run.settings.drift)?;
    let (samples, _) =
        encode_timelines(&later.timelines, &later.counties, &data.vocab, &data.quantizer, &run.settings.prep)?;
    let report = drift_check(&state, &data.vocab, &reference, &samples)?;
    println!(
        "reference_auc={:.4}\tlater_auc={:.4}\tdelta={:+.4}\tshift={}",
        report.reference_auc, report.later.auc, report.auc_delta, run.settings.drift.shift_strength
    );
    run.write("drift.json", report.to_json() + "\n")?;
    run.finish()
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn explain(mut run: StageRun, beneficiary: &str) -> anyhow::Result<RunManifest> {
    let data = load_prepared(&mut run)?;
    let state = load_model(&mut run, "finetune", &data)?;
    // most recent index stay of the beneficiary
    let Some(sample) = data.samples.iter().filter(|s| s.beneficiary_id == beneficiary).last() else {
        bail!("beneficiary {beneficiary} has no labeled inpatient stay in the prepared data");
    };
    let report = state.extract_attention(sample, &data.vocab)?;
    let stem = file_stem(beneficiary);
    let json = run.write(&format!("attention_{stem}.json"), report.to_json() + "\n")?;
    let html = run.write(&format!("attention_{stem}.html"), attention_html(&report))?;
    println!("{}\n{}", json.display(), html.display());
    run.finish()
}

pub fn audit(mut run: StageRun) -> anyhow::Result<RunManifest> {
    let full = load_prepared(&mut run)?;
    let full_state = load_model(&mut run, "finetune", &full)?;
    let s = run.settings;
    let masked_config = PrepConfig { mask_demographics: true, ..s.prep.clone() };
    let (masked, _) = prepare(&mut run, &masked_config)?;
    let (train, validate) = (masked.split_owned(Split::Train), masked.split_owned(Split::Validate));
    let encoder = s.encoder_config(masked.vocab.len())?;
    let pretrain = s.from_pretrained.then_some(&s.pretrain);
    let (masked_state, histories) =
        train_pipeline(&train, &validate, &masked.vocab, encoder, s.init_seed(), pretrain, &s.finetune, &mut log_epoch)?;
    save_checkpoint(&mut run, &masked_state)?;
    run.write(HISTORY_FILE, history_tsv(&histories))?;
    let (fv, ft) = (full.split_owned(Split::Validate), full.split_owned(Split::Test));
    let mt = masked.split_owned(Split::Test);
    let report = bias_audit(&full_state, &full.vocab, (&fv, &ft), &masked_state, &masked.vocab, (&validate, &mt))?;
    for d in &report.deltas {
        println!(
            "{}={}\tauc_delta={}\trecall_delta={:+.4}\tppr_delta={:+.4}",
            d.attribute,
            d.group,
            d.auc.map_or("n/a".to_string(), |a| format!("{a:+.4}")),
            d.recall,
            d.positive_prediction_rate
        );
    }
    run.write("audit.json", report.to_json() + "\n")?;
    run.finish()
}
