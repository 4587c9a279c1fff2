use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tdino::harness::metrics::read_rows;

const TINY: &str = r#"
[experiment]
seeds = [0]

[dataset]
master_seed = 11
n_videos = 8
video_length = 24
split = [0.5, 0.25, 0.25]

[backbone]
family = "Conv2dRecurrent"
embed_dim = 8
conv_widths = [2, 4]
recurrent_hidden = 8

[clip]
t = 3
t_pred = 3

[distill]
batch_size = 4
epochs = 2
steps_per_epoch = 3

[downstream]
epochs = 1
steps_per_epoch = 2
batch_size = 4
eval_stride = 8

[grid]
backbones = ["Conv2dRecurrent"]
intervals = [3]
losses = ["Cosine"]
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("exp.toml"), format!("{TINY}\n{extra}")).unwrap();
        Self { dir }
    }

    /// Builds a config by replacing one line of the tiny config.
    fn with_replacement(from: &str, to: &str) -> Self {
        assert!(TINY.contains(from));
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("exp.toml"), TINY.replacen(from, to, 1)).unwrap();
        Self { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("exp.toml")
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tdino"));
        cmd.args(args).env_remove("TDINO_OUT").env("RUST_LOG", "warn");
        if !matches!(args.first(), Some(&"report")) || args.contains(&"--config") {
            cmd.arg("--out").arg(self.out());
        }
        cmd.output().unwrap()
    }

    fn tdino(&self, sub: &str, extra: &[&str]) -> Output {
        let config = self.config();
        let mut args = vec![sub, "--config", config.to_str().unwrap()];
        args.extend_from_slice(extra);
        self.run(&args)
    }

    fn checkpoint(&self) -> PathBuf {
        self.out().join("checkpoints/Conv2dRecurrent_t3_p3_cosine_seed0.ckpt")
    }

    fn metrics(&self) -> PathBuf {
        self.out().join("metrics.csv")
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), stderr(o));
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

#[test]
fn missing_config_exits_two_and_names_path() {
    let env = Env::new("");
    let missing = env.dir.path().join("nope.toml");
    let o = env.run(&["pretrain", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_config_error() {
    let env = Env::with_replacement("eval_stride = 8", "eval_stride = 8\nbogus = 1");
    let o = env.tdino("pretrain", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
}

#[test]
fn pretrain_writes_checkpoint_and_log_deterministically() {
    let env = Env::new("");
    assert_ok(&env.tdino("pretrain", &[]));
    let ck = env.checkpoint();
    assert!(ck.exists());
    let log = tdino::distill::read_log_csv(&env.out().join("logs/Conv2dRecurrent_t3_p3_cosine_seed0.csv")).unwrap();
    assert_eq!(log.len(), 6, "one row per step, two epochs of three steps");
    let first = sha(&ck);
    assert_ok(&env.tdino("pretrain", &[]));
    assert_eq!(sha(&ck), first);
}

#[test]
fn supervised_needs_no_checkpoint() {
    let env = Env::new("");
    assert_ok(&env.tdino("finetune", &["--protocol", "FullSupervised"]));
    let rows = read_rows(&env.metrics()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].protocol, "FullSupervised");
}

#[test]
fn missing_checkpoint_is_reported() {
    let env = Env::new("");
    let o = env.tdino("finetune", &["--protocol", "FineTune"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Conv2dRecurrent_t3_p3_cosine_seed0.ckpt"), "{}", stderr(&o));
}

#[test]
fn full_pipeline_rows_determinism_and_probe_safety() {
    let env = Env::with_replacement("seeds = [0]", "seeds = [0, 1]");
    assert_ok(&env.tdino("pretrain", &[]));
    let ck = env.checkpoint();
    let before = sha(&ck);
    assert_ok(&env.tdino("finetune", &[]));
    assert_eq!(sha(&ck), before, "fine-tuning must not rewrite the pretrained checkpoint");
    let rows = read_rows(&env.metrics()).unwrap();
    assert_eq!(rows.len(), 3 * 2);

    let first_pass = std::fs::read_to_string(env.metrics()).unwrap();
    assert_ok(&env.tdino("finetune", &[]));
    let second_pass = std::fs::read_to_string(env.metrics()).unwrap();
    let body: Vec<&str> = first_pass.lines().skip(2).collect();
    let appended: Vec<&str> = second_pass.lines().skip(2 + body.len()).collect();
    assert_eq!(body, appended, "rerun must reproduce byte-identical rows");

    let evaluated = env.out().join("finetuned/Conv2dRecurrent_t3_p3_cosine_seed0_linearprobe.ckpt");
    let o = env.tdino("evaluate", &["--checkpoint", evaluated.to_str().unwrap(), "--seed", "0"]);
    assert_ok(&o);
    let json: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let probe = rows.iter().find(|r| r.protocol == "LinearProbe" && r.seed == 0).unwrap();
    assert_eq!(json["macro_precision"].as_f64().unwrap(), probe.macro_precision);
}

#[test]
fn spec_mismatch_exits_four() {
    let env = Env::new("");
    assert_ok(&env.tdino("pretrain", &[]));
    let other = Env::with_replacement("embed_dim = 8", "embed_dim = 12");
    let ck = env.checkpoint();
    let o = other.tdino("finetune", &["--protocol", "FineTune", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn ablate_then_rerun_skips_and_report_builds() {
    let env = Env::new("");
    let o = env.tdino("ablate", &[]);
    assert_ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("ran 1 cells, skipped 0"));
    let rows_before = read_rows(&env.metrics()).unwrap();
    assert_eq!(rows_before.len(), 3);
    let o = env.tdino("ablate", &[]);
    assert_ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("ran 0 cells, skipped 1"));
    assert_eq!(read_rows(&env.metrics()).unwrap(), rows_before);

    assert_ok(&env.tdino("report", &[]));
    let table = std::fs::read_to_string(env.out().join("report/table1.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(table.as_bytes());
    let record = reader.records().next().unwrap().unwrap();
    let headers = reader.headers().unwrap().clone();
    let get = |name: &str| record[headers.iter().position(|h| h == name).unwrap()].parse::<f64>().unwrap();
    let precision = |p: &str| rows_before.iter().find(|r| r.protocol == p).unwrap().macro_precision;
    assert_eq!(get("improvement"), precision("FineTune") - precision("FullSupervised"));
    assert!(env.out().join("report/loss_curves.svg").exists());
}

#[test]
fn three_loss_grid_gives_three_table_rows() {
    let env = Env::with_replacement(r#"losses = ["Cosine"]"#, r#"losses = ["Cosine", "CrossEntropy", "MSE"]"#);
    assert_ok(&env.tdino("ablate", &[]));
    assert_ok(&env.tdino("report", &[]));
    let table = std::fs::read_to_string(env.out().join("report/table2.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(table.as_bytes());
    let losses: Vec<String> = reader.records().map(|r| r.unwrap()[2].to_string()).collect();
    assert_eq!(losses, ["MSE", "Cosine", "CrossEntropy"]);
}

#[test]
fn empty_metrics_exit_five() {
    let env = Env::new("");
    let empty = env.dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let o = env.run(&["report", "--metrics", empty.to_str().unwrap(), "--out", env.out().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn partial_failure_writes_manifest() {
    let env = Env::with_replacement("intervals = [3]", "intervals = [3, 20]");
    let o = env.tdino("ablate", &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let failures: serde_json::Value = serde_json::from_slice(&std::fs::read(env.out().join("failures.json")).unwrap()).unwrap();
    assert_eq!(failures.as_array().unwrap().len(), 1);
    assert_eq!(failures[0]["interval"], 20);
    assert_eq!(read_rows(&env.metrics()).unwrap().len(), 3, "the healthy cell still records its rows");
}

#[test]
fn out_flag_beats_environment() {
    let env = Env::new("");
    let env_dir = env.dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_tdino"))
        .args(["finetune", "--protocol", "FullSupervised", "--config", env.config().to_str().unwrap()])
        .env("TDINO_OUT", &env_dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_ok(&o);
    assert!(env_dir.join("metrics.csv").exists());
    assert_ok(&env.tdino("finetune", &["--protocol", "FullSupervised"]));
    assert!(env.metrics().exists());
}
