use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dkt_core::io::{load_csv, load_model, save_json};
use dkt_core::synth::default_spec;
use dkt_core::transfer::{compare, ModelKind, TransferOptions};
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dkt")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small two-disease cohort (16 + 10 subjects) with a fitted model.
struct Small {
    _tmp: TempDir,
    dir: PathBuf,
}

impl Small {
    fn generated() -> Small {
        let tmp = TempDir::new().unwrap();
        let dir = tmp.path().to_path_buf();
        let mut spec = default_spec();
        spec.diseases[0].subjects = 16;
        spec.diseases[1].subjects = 10;
        save_json(&spec, dir.join("spec.json")).unwrap();
        ok(&["generate", "--spec", s(&dir.join("spec.json")), "--out", s(&dir.join("c"))]);
        Small { _tmp: tmp, dir }
    }

    fn fitted() -> Small {
        let w = Small::generated();
        ok(&["fit", "--data", s(&w.data()), "--config", s(&w.config()), "--out", s(&w.model())]);
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn data(&self) -> PathBuf {
        self.path("c/data.csv")
    }

    fn config(&self) -> PathBuf {
        self.path("c/config.json")
    }

    fn model(&self) -> PathBuf {
        self.path("model.json")
    }
}

#[test]
fn default_generation_has_150_subjects_and_repeats_exactly() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let msg = ok(&["generate", "--spec", "default", "--out", s(&a), "--seed", "5"]);
    assert!(msg.contains("150 subjects"), "{msg}");
    ok(&["generate", "--spec", "default", "--out", s(&b), "--seed", "5"]);
    for f in ["data.csv", "ground_truth.csv", "measured.csv", "config.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let truth = load_csv(a.join("ground_truth.csv")).unwrap();
    assert_eq!(truth.true_betas().unwrap().len(), 150);
    // every cell is present in the noise-free table
    assert!(truth.rows.iter().all(|r| r.values.iter().all(Option::is_some)));
    ok(&["generate", "--spec", "default", "--out", s(&b), "--seed", "6"]);
    assert_ne!(std::fs::read(a.join("data.csv")).unwrap(), std::fs::read(b.join("data.csv")).unwrap());
}

#[test]
fn bad_spec_is_reported() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("spec.json");
    std::fs::write(&spec, r#"{"biomarkers": ["a"]}"#).unwrap();
    let out = run(&["generate", "--spec", s(&spec), "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert_ne!(code(&["generate", "--spec", "/no/such/spec.json", "--out", s(tmp.path())]), 0);
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    assert_eq!(code(&["fit", "--nope"]), 2);
    assert_eq!(code(&[]), 2);
    let w = Small::generated();
    assert_eq!(
        code(&["fit", "--data", "/no/such.csv", "--config", s(&w.config()), "--out", s(&w.model())]),
        3
    );
    let bad = w.path("bad.json");
    std::fs::write(&bad, r#"{"units": {"k0": 0}, "sweeps": 4}"#).unwrap();
    assert_ne!(code(&["fit", "--data", s(&w.data()), "--config", s(&bad), "--out", s(&w.model())]), 0);
    assert_eq!(code(&["--threads", "0", "generate", "--out", s(&w.path("t"))]), 2);
}

#[test]
fn max_sweeps_flag_overrides_the_file() {
    let w = Small::generated();
    let out = ok(&[
        "fit", "--data", s(&w.data()), "--config", s(&w.config()), "--max-sweeps", "1", "--out", s(&w.model()),
    ]);
    assert!(out.contains("sweeps 1") && out.contains("converged false"), "{out}");
    let saved = load_model(w.model()).unwrap();
    let diag = saved.diagnostics.unwrap();
    assert_eq!(diag.sweeps, 1);
    assert_eq!(diag.trace.len(), 2);
    assert_eq!(saved.config.optimizer.max_sweeps, 1);
}

#[test]
fn predictions_cover_every_requested_cell() {
    let w = Small::fitted();
    let pred = w.path("pred.csv");
    let (model, data) = (w.model(), w.data());
    let args = ["predict", "--model", s(&model), "--data", s(&data), "--biomarkers", "k0,k5", "--out", s(&pred)];
    ok(&args);
    let first = std::fs::read(&pred).unwrap();
    let table = load_csv(w.data()).unwrap();
    let mut rdr = csv::Reader::from_path(&pred).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), table.rows.len() * 2);
    assert!(rows.iter().all(|r| r[4] == r[5] && r[4].parse::<f64>().unwrap().is_finite()));
    ok(&args);
    assert_eq!(std::fs::read(&pred).unwrap(), first);
    let bad = ["predict", "--model", s(&model), "--data", s(&data), "--biomarkers", "k9", "--out", s(&pred)];
    assert_eq!(code(&bad), 3);
}

#[test]
fn staging_writes_one_shift_per_subject() {
    let w = Small::fitted();
    let out = w.path("shifts.csv");
    ok(&["stage", "--model", s(&w.model()), "--data", s(&w.data()), "--using", "k2", "--out", s(&out)]);
    let n = csv::Reader::from_path(&out).unwrap().records().count();
    assert_eq!(n, 26);
}

#[test]
fn evaluating_truth_against_itself_gives_one() {
    let w = Small::generated();
    let truth = load_csv(w.path("c/ground_truth.csv")).unwrap();
    let pred = w.path("self.csv");
    let mut wr = csv::Writer::from_path(&pred).unwrap();
    wr.write_record(["subject_id", "disease", "months_since_baseline", "biomarker", "predicted", "normalized"]).unwrap();
    for r in &truth.rows {
        for (k, v) in r.values.iter().enumerate() {
            let v = v.unwrap().to_string();
            wr.write_record([&r.subject_id, &r.disease, &r.months.to_string(), &truth.biomarkers[k], &v, &v]).unwrap();
        }
    }
    wr.flush().unwrap();
    let out = w.path("report");
    let text = ok(&["evaluate", "--pred", s(&pred), "--truth", s(&w.path("c/ground_truth.csv")), "--out", s(&out)]);
    assert!(text.starts_with("# spread = std over 100 bootstrap resamples"), "{text}");
    let csv_text = std::fs::read_to_string(w.path("report.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| (2..4).all(|c| (r[c].parse::<f64>().unwrap() - 1.0).abs() < 1e-12)));
    assert_eq!(std::fs::read_to_string(w.path("report.txt")).unwrap(), text);

    // a prediction for a visit the truth does not have
    let mut wr = csv::Writer::from_path(&pred).unwrap();
    wr.write_record(["subject_id", "disease", "months_since_baseline", "biomarker", "predicted", "normalized"]).unwrap();
    wr.write_record(["ghost", "synthetic AD", "0", "k0", "0.5", "0.5"]).unwrap();
    wr.flush().unwrap();
    assert_eq!(code(&["evaluate", "--pred", s(&pred), "--truth", s(&w.path("c/ground_truth.csv")), "--out", s(&out)]), 3);
}

#[test]
fn evaluation_reports_recovery_with_a_model() {
    let w = Small::fitted();
    let pred = w.path("pred.csv");
    ok(&["predict", "--model", s(&w.model()), "--data", s(&w.data()), "--biomarkers", "k2", "--out", s(&pred)]);
    let text = ok(&[
        "evaluate", "--pred", s(&pred), "--truth", s(&w.path("c/ground_truth.csv")), "--out", s(&w.path("r")),
        "--model", s(&w.model()), "--spec", s(&w.path("spec.json")),
    ]);
    assert!(text.contains("trajectory MAE all"), "{text}");
    assert!(text.contains("time-shift R2 synthetic PCA"), "{text}");
}

#[test]
fn single_model_table_has_no_significance() {
    let w = Small::generated();
    let out = w.path("t");
    let text = ok(&[
        "compare", "--data", s(&w.data()), "--test", s(&w.path("c/measured.csv")), "--config", s(&w.config()),
        "--models", "linear", "--out", s(&out),
    ]);
    assert!(!text.contains('*') && !text.contains("t-test"), "{text}");
    let csv_text = std::fs::read_to_string(w.path("t.csv")).unwrap();
    assert!(!csv_text.lines().next().unwrap().contains("p_raw"));
    assert_eq!(csv_text.lines().count(), 7);
    assert_ne!(code(&["compare", "--data", s(&w.data()), "--test", s(&w.data()), "--config", s(&w.config()),
        "--models", "dkt,forest", "--out", s(&out)]), 0);
}

#[test]
fn table_matches_the_library_exactly() {
    let w = Small::generated();
    let out = w.path("t");
    ok(&[
        "compare", "--data", s(&w.data()), "--test", s(&w.path("c/measured.csv")), "--config", s(&w.config()),
        "--models", "dkt,spline,linear", "--out", s(&out),
    ]);
    let train = load_csv(w.data()).unwrap().to_dataset().unwrap();
    let test = load_csv(w.path("c/measured.csv")).unwrap().to_dataset().unwrap();
    let mut spec = default_spec();
    spec.diseases[0].subjects = 16;
    spec.diseases[1].subjects = 10;
    let config = spec.model_config().unwrap();
    let options = TransferOptions::new("synthetic PCA", vec![ModelKind::Dkt, ModelKind::Spline, ModelKind::Linear]);
    let report = compare(&train.align_to(&config).unwrap(), &test, &config, &options).unwrap();
    assert_eq!(report.regions.len(), 6);
    assert_eq!(std::fs::read_to_string(w.path("t.csv")).unwrap(), report.to_csv().unwrap());
    assert_eq!(std::fs::read_to_string(w.path("t.txt")).unwrap(), report.to_text());
}

#[test]
fn curves_cover_the_padded_shift_range() {
    let w = Small::fitted();
    let out = w.path("curves.csv");
    ok(&["export-curves", "--model", s(&w.model()), "--grid", "100", "--out", s(&out)]);
    let saved = load_model(w.model()).unwrap();
    let lo = saved.model.beta.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = saved.model.beta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), ["disease", "curve", "stage", "value"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    // 2 diseases × (2 units + 6 biomarkers)
    assert_eq!(rows.len(), 16 * 100);
    for curve in rows.chunks(100) {
        assert!(curve.iter().all(|r| r[1] == curve[0][1] && r[0] == curve[0][0]));
        let stage: Vec<f64> = curve.iter().map(|r| r[2].parse().unwrap()).collect();
        let value: Vec<f64> = curve.iter().map(|r| r[3].parse().unwrap()).collect();
        assert!((stage[0] - (lo - 0.2 * (hi - lo))).abs() < 1e-9);
        assert!((stage[99] - (hi + 0.2 * (hi - lo))).abs() < 1e-9);
        let up = value.windows(2).all(|v| v[1] >= v[0]);
        let down = value.windows(2).all(|v| v[1] <= v[0]);
        assert!(up || down, "curve {} is not monotone", &curve[0][1]);
    }
    assert_ne!(code(&["export-curves", "--model", s(&w.model()), "--grid", "1", "--out", s(&out)]), 0);
}

#[test]
fn normalized_fit_predicts_on_the_input_scale() {
    let w = Small::generated();
    // rescale one biomarker far away from [0, 1] and flip another
    let mut table = load_csv(w.data()).unwrap();
    for r in &mut table.rows {
        if let Some(v) = r.values[2].as_mut() {
            *v = 100.0 + 50.0 * *v;
        }
        if let Some(v) = r.values[3].as_mut() {
            *v = -*v;
        }
    }
    let raw = w.path("raw.csv");
    dkt_core::io::save_csv(&table, &raw).unwrap();
    let cfg = w.path("norm.json");
    std::fs::write(
        &cfg,
        r#"{"units": {"k0": 0, "k1": 1, "k2": 0, "k3": 1, "k4": 0, "k5": 1},
            "preprocess": {"decreasing": ["k3"]}}"#,
    )
    .unwrap();
    ok(&["fit", "--data", s(&raw), "--config", s(&cfg), "--out", s(&w.model())]);

    let processed = w.path("processed.csv");
    ok(&["preprocess", "--data", s(&raw), "--config", s(&cfg), "--out", s(&processed), "--params", s(&w.path("p.json"))]);
    let scaled = load_csv(&processed).unwrap();
    for k in 0..6 {
        let vals: Vec<f64> = scaled.rows.iter().filter_map(|r| r.values[k]).collect();
        let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12, "{k}: [{lo}, {hi}]");
    }

    let pred = w.path("pred.csv");
    ok(&["predict", "--model", s(&w.model()), "--data", s(&raw), "--biomarkers", "k2", "--out", s(&pred)]);
    let mut rdr = csv::Reader::from_path(&pred).unwrap();
    for r in rdr.records().map(Result::unwrap) {
        let (v, u): (f64, f64) = (r[4].parse().unwrap(), r[5].parse().unwrap());
        assert!(v > 90.0 && v < 160.0, "{v}");
        assert!((-0.5..1.5).contains(&u));
    }
}
