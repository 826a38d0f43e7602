//! The variant comparison: trains every variant plus a reference-rate control on one corpus,
//! evaluates them on the held-out split and reports directional verdicts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Variant};
use super::eval::{
    discrim_probe, evaluate_transcripts, flow_probe, reconstruct_utterances, summarize_recon, test_split,
    tokenize_utterances, train_split, EvalSummary, FlowProbeReport, ReconSummary,
};
use super::stream::{write_jsonl, Checkpoint};
use super::train::train;
use crate::corpus::Utterance;
use crate::error::Result;

/// One training run of the experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub name: String,
    pub cfg: RunConfig,
}

/// Report rows and the run that backs each of them.
#[derive(Clone, Debug, PartialEq)]
pub struct RowSpec {
    pub name: String,
    pub run: String,
}

pub const CONTROL_RUN: &str = "control";

/// Runs needed for the report. With a nonzero reconstruction weight the dynamic variant is
/// the with-recon variant, so both rows share one run.
pub fn plan(cfg: &RunConfig) -> (Vec<RunSpec>, Vec<RowSpec>) {
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    let shared = cfg.lambda_recon > 0.0;
    for v in Variant::ALL {
        let run = if v == Variant::WithRecon && shared { Variant::Dynamic.name() } else { v.name() };
        if run == v.name() {
            let mut c = cfg.for_variant(v);
            if v == Variant::WithRecon && c.lambda_recon == 0.0 {
                c.lambda_recon = 1.0;
            }
            runs.push(RunSpec { name: v.name().to_string(), cfg: c });
        }
        rows.push(RowSpec { name: v.name().to_string(), run: run.to_string() });
    }
    let mut control = cfg.for_variant(Variant::WithRecon).with_ratio(cfg.control_ratio);
    if control.lambda_recon == 0.0 {
        control.lambda_recon = 1.0;
    }
    runs.push(RunSpec { name: CONTROL_RUN.to_string(), cfg: control });
    rows.push(RowSpec { name: CONTROL_RUN.to_string(), run: CONTROL_RUN.to_string() });
    (runs, rows)
}

pub fn checkpoint_path(out_dir: &Path, run: &str) -> PathBuf {
    out_dir.join(run).join("checkpoint.json")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub name: String,
    pub run: String,
    pub ratio: f64,
    /// False when the backing checkpoint was not found; all metric columns are then empty.
    pub present: bool,
    pub eval: Option<EvalSummary>,
    pub probe_accuracy: Option<f64>,
    pub probe_untrained_accuracy: Option<f64>,
    pub recon: Option<ReconSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub id: String,
    pub claim: String,
    /// Absent when a required row is missing.
    pub pass: Option<bool>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<VariantRow>,
    pub verdicts: Vec<Verdict>,
    pub flow: Option<FlowProbeReport>,
}

impl ExperimentReport {
    pub fn row(&self, name: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.name == name && r.present)
    }

    pub fn verdict(&self, id: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.id == id)
    }

    /// A fixed-width text table of the rows followed by the verdicts.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>5} {:>8} {:>8} {:>7} {:>8} {:>8} {:>9} {:>9} {:>7}\n",
            "variant", "R", "cer_ctc", "cer_attn", "probe", "mel_mae", "mel_corr", "delta_mae", "flux_mae", "dur_ok"
        );
        for r in &self.rows {
            if !r.present {
                s += &format!("{:<14} {:>5} absent\n", r.name, r.ratio);
                continue;
            }
            let e = r.eval.as_ref();
            let a = r.recon.as_ref().map(|x| &x.aggregate);
            let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            s += &format!(
                "{:<14} {:>5} {:>8} {:>8} {:>7} {:>8} {:>8} {:>9} {:>9} {:>7}\n",
                r.name,
                r.ratio,
                f(e.map(|e| e.cer_ctc)),
                f(e.map(|e| e.cer_attention)),
                f(r.probe_accuracy),
                f(a.map(|a| a.mel_mae.median)),
                f(a.map(|a| a.mel_corr.median)),
                f(a.map(|a| a.delta_mae.median)),
                f(a.map(|a| a.flux_mae.median)),
                f(r.recon.as_ref().map(|x| x.duration_within_band)),
            );
        }
        for v in &self.verdicts {
            let status = match v.pass {
                Some(true) => "PASS",
                Some(false) => "FAIL",
                None => "ABSENT",
            };
            s += &format!("{status} {}: {} ({})\n", v.id, v.claim, v.detail);
        }
        if let Some(f) = &self.flow {
            s += &format!(
                "flow probe ({}): aligned fm loss {:.4}, permuted {:.4}, condition-sensitive {}\n",
                f.variant,
                f.aligned_fm_loss,
                f.permuted_fm_loss,
                f.condition_sensitive()
            );
        }
        s
    }
}

/// Trains every planned run, writing checkpoints and logs under `out_dir`, then reports.
pub fn run_experiment(cfg: &RunConfig, utts: &[Utterance], out_dir: &Path, with_flow: bool) -> Result<ExperimentReport> {
    let (runs, _) = plan(cfg);
    for run in &runs {
        let dir = out_dir.join(&run.name);
        train(&run.cfg, utts, Some(&dir.join("train_log.jsonl")), Some(&checkpoint_path(out_dir, &run.name)))?;
    }
    report(cfg, utts, out_dir, with_flow)
}

/// Evaluates whichever checkpoints exist under `out_dir`. Per-run tokens, transcripts and
/// reconstruction metrics are written next to each checkpoint; the report itself goes to
/// `report.json`.
pub fn report(cfg: &RunConfig, utts: &[Utterance], out_dir: &Path, with_flow: bool) -> Result<ExperimentReport> {
    let (runs, row_specs) = plan(cfg);
    let test = test_split(cfg, utts);
    let mut evaluated: Vec<(String, Option<VariantRow>)> = Vec::new();
    let mut flow = None;
    for run in &runs {
        let path = checkpoint_path(out_dir, &run.name);
        if !path.exists() {
            evaluated.push((run.name.clone(), None));
            continue;
        }
        let ckpt = Checkpoint::load(&path)?;
        let dir = out_dir.join(&run.name);
        let records = tokenize_utterances(&ckpt, utts)?;
        write_jsonl(&dir.join("tokens.jsonl"), &records)?;
        let (transcripts, eval) = evaluate_transcripts(&ckpt, &test, &records)?;
        write_jsonl(&dir.join("transcripts.jsonl"), &transcripts)?;
        let recon_records = reconstruct_utterances(&ckpt, &test, &records)?;
        write_jsonl(&dir.join("recon.jsonl"), &recon_records)?;
        let probe = discrim_probe(&ckpt.config, utts, &records)?;
        if with_flow && run.name == Variant::Dynamic.name() {
            let f = &ckpt.config.flow_train;
            let train_utts: Vec<Utterance> = train_split(cfg, utts).into_iter().take(f.train_utts).collect();
            let eval_utts: Vec<Utterance> = test.iter().take(f.eval_utts).cloned().collect();
            flow = Some(flow_probe(&ckpt, &train_utts, &eval_utts, &records)?);
        }
        evaluated.push((
            run.name.clone(),
            Some(VariantRow {
                name: run.name.clone(),
                run: run.name.clone(),
                ratio: ckpt.config.merge.ratio,
                present: true,
                eval: Some(eval),
                probe_accuracy: Some(probe.accuracy),
                probe_untrained_accuracy: Some(probe.untrained_accuracy),
                recon: Some(summarize_recon(&recon_records)?),
            }),
        ));
    }
    let rows: Vec<VariantRow> = row_specs
        .iter()
        .map(|spec| {
            let ratio = runs.iter().find(|r| r.name == spec.run).map_or(cfg.merge.ratio, |r| r.cfg.merge.ratio);
            match evaluated.iter().find(|(n, _)| *n == spec.run).and_then(|(_, r)| r.clone()) {
                Some(r) => VariantRow { name: spec.name.clone(), ..r },
                None => VariantRow {
                    name: spec.name.clone(),
                    run: spec.run.clone(),
                    ratio,
                    present: false,
                    eval: None,
                    probe_accuracy: None,
                    probe_untrained_accuracy: None,
                    recon: None,
                },
            }
        })
        .collect();
    let mut rep = ExperimentReport { rows, verdicts: Vec::new(), flow };
    rep.verdicts = verdicts(&rep);
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&rep)?)?;
    write_jsonl(&out_dir.join("report.jsonl"), &rep.rows)?;
    Ok(rep)
}

fn cer_of(rep: &ExperimentReport, name: &str) -> Option<f64> {
    rep.row(name).and_then(|r| r.eval.as_ref()).map(|e| e.cer_ctc)
}

fn recon_of<'a>(rep: &'a ExperimentReport, name: &str) -> Option<&'a ReconSummary> {
    rep.row(name).and_then(|r| r.recon.as_ref())
}

fn verdict(id: &str, claim: &str, outcome: Option<(bool, String)>) -> Verdict {
    match outcome {
        Some((pass, detail)) => Verdict { id: id.into(), claim: claim.into(), pass: Some(pass), detail },
        None => Verdict { id: id.into(), claim: claim.into(), pass: None, detail: "required run absent".into() },
    }
}

/// The directional verdicts over a report's rows.
pub fn verdicts(rep: &ExperimentReport) -> Vec<Verdict> {
    let dynamic = Variant::Dynamic.name();
    let fixed = Variant::FixedStride.name();
    let pure = Variant::PureSemantic.name();
    let recon = Variant::WithRecon.name();
    let a = cer_of(rep, dynamic).zip(cer_of(rep, fixed)).map(|(d, f)| (d < f, format!("dynamic {d:.4} vs fixed-stride {f:.4}")));
    let b = cer_of(rep, pure).zip(cer_of(rep, recon)).map(|(p, w)| (p <= w, format!("pure-semantic {p:.4} vs with-recon {w:.4}")));
    let c = recon_of(rep, recon).zip(recon_of(rep, CONTROL_RUN)).map(|(r, c)| {
        let dr = r.aggregate.delta_mae.median / c.aggregate.delta_mae.median;
        let fr = r.aggregate.flux_mae.median / c.aggregate.flux_mae.median;
        let pass = dr >= 2.0 && fr >= 2.0 && r.duration_within_band >= 0.9;
        (
            pass,
            format!(
                "delta_mae x{dr:.2}, flux_mae x{fr:.2} vs control; duration in band for {:.1}% of utterances",
                100.0 * r.duration_within_band
            ),
        )
    });
    let trap = recon_of(rep, pure).zip(recon_of(rep, recon)).map(|(p, w)| {
        let (p, w) = (p.aggregate.delta_mae.median, w.aggregate.delta_mae.median);
        (p > w, format!("pure-semantic {p:.4} vs with-recon {w:.4}"))
    });
    vec![
        verdict("8a", "dynamic CER < fixed-stride CER", a),
        verdict("8b", "pure-semantic CER <= with-recon CER", b),
        verdict("8c", "R-rate reconstruction loses micro-dynamics but keeps duration", c),
        verdict("trap", "pure-semantic delta_mae > with-recon delta_mae", trap),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_shares_the_dynamic_run_when_recon_is_on() {
        let cfg = RunConfig::default();
        let (runs, rows) = plan(&cfg);
        let names: Vec<&str> = runs.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["dynamic", "fixed-stride", "pure-semantic", CONTROL_RUN]);
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[3].run, "dynamic");
        let control = &runs[3].cfg;
        assert_eq!(control.merge.ratio, cfg.control_ratio);
        assert!(control.effective_lambda_recon() > 0.0);

        let mut off = cfg.clone();
        off.lambda_recon = 0.0;
        let (runs, rows) = plan(&off);
        assert_eq!(runs.len(), 5);
        assert_eq!(rows[3].run, "with-recon");
        assert_eq!(runs[3].cfg.lambda_recon, 1.0);
    }

    #[test]
    fn missing_checkpoints_are_reported_absent() {
        let cfg = crate::harness::model::tests::tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let vocab = cfg.corpus.vocab().unwrap();
        let utts = crate::corpus::generate_corpus(&vocab, 8, (4, 5), 1).unwrap();
        let rep = report(&cfg, &utts, dir.path(), false).unwrap();
        assert_eq!(rep.rows.len(), 5);
        assert!(rep.rows.iter().all(|r| !r.present));
        assert!(rep.verdicts.iter().all(|v| v.pass.is_none()));
        assert!(rep.table().contains("absent"));
    }
}
