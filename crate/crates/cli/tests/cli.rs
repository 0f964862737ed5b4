use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fas_cli::commands::{cmd_eval, cmd_train, Workspace};
use fas_cli::config::RunConfig;

fn fas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fas"))
        .args(args)
        .env_remove("FAS_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, strategy: &str, seeds: &str, iterations: usize) -> PathBuf {
    let out = dir.join(format!("run-{name}"));
    let text = format!(
        r#"output_dir = "{}"
seeds = {seeds}

[protocol]
id = "1"
split = "OCI->M"

[data.synthetic]
real = 8
print = 4
replay = 4

[train]
strategy = "{strategy}"
iterations = {iterations}
lr = 1e-3
checkpoint_every = 1000
"#,
        out.display()
    );
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn protocol_listings() {
    let o = fas(&["protocols", "list", "3"]);
    assert!(o.status.success());
    let rows = stdout(&o).lines().filter(|l| l.contains('→')).count();
    assert_eq!(rows, 12);

    let o = fas(&["protocols", "list", "1"]);
    assert!(stdout(&o).contains("OCI→M"));

    let o = fas(&["protocols", "list"]);
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("  ")).count(), 4 + 3 + 12 + 2);

    let o = fas(&["protocols", "describe", "2", "W"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("CS→W"));

    let o = fas(&["protocols", "list", "7"]);
    assert_eq!(o.status.code(), Some(2), "usage error expected: {}", stderr(&o));
}

#[test]
fn invalid_config_reports_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "bad", "mcl", "[0]", 1);
    let text = std::fs::read_to_string(&path).unwrap().replace("lr = 1e-3", "lr = -1.0");
    std::fs::write(&path, text).unwrap();
    let o = fas(&["train", "--config", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("lr"), "{}", stderr(&o));

    let o = fas(&["train", "--config", path.to_str().unwrap(), "--set", "train.lr=0.01", "--set", "train.bogus=1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
}

#[test]
fn five_seeds_give_five_checkpoints_and_a_stable_hash() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "five", "v", "[0, 1, 2, 3, 4]", 2);
    let o = fas(&["train", "--config", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run-five");
    let finals = (0..5)
        .filter(|s| run.join(format!("seed_{s}")).join("final.safetensors").is_file())
        .count();
    assert_eq!(finals, 5);
    let first = stdout(&o).lines().next().unwrap().to_string();
    let again = fas(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(stdout(&again).lines().next().unwrap(), first);
    let stamp = std::fs::read_to_string(run.join("seed_3").join("run.json")).unwrap();
    assert!(stamp.contains(first.trim_start_matches("config hash ")));
    assert!(stamp.contains("\"seed\": 3"));

    let o = fas(&["eval", "--config", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(run.join("table.txt")).unwrap();
    assert!(table.contains("FLIP-V") && table.contains('('), "{table}");
    let scores = std::fs::read_to_string(run.join("seed_0").join("scores.csv")).unwrap();
    assert!(scores.starts_with("# config_hash="));

    let o = fas(&["report", run.to_str().unwrap(), "--out", dir.path().join("rep").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("rep").join("table.txt").is_file());
}

#[test]
fn eval_rejects_missing_baseline_and_strategy_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "a", "it", "[0]", 1);
    let o = fas(&["train", "--config", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = fas(&["eval", "--config", path.to_str().unwrap(), "--set", "eval.baseline=/no/such/dir"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("baseline directory"), "{}", stderr(&o));

    let o = fas(&["eval", "--config", path.to_str().unwrap(), "--set", "train.strategy=mcl"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("FLIP-IT"), "{}", stderr(&o));

    let ckpt = dir.path().join("run-a").join("seed_0").join("final.safetensors");
    let img = dir.path().join("face.png");
    let o = fas(&["synth", "--out", dir.path().join("syn").to_str().unwrap(), "--real", "1", "--print", "1", "--replay", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = std::fs::read_dir(dir.path().join("syn").join("msu").join("images"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    std::fs::copy(first, &img).unwrap();
    let o = fas(&["infer", "--checkpoint", ckpt.to_str().unwrap(), "--image", img.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let p: f64 = stdout(&o).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
}

/// Random features already split the synthetic classes, in a direction set
/// by the seed, so single checkpoints land anywhere in [0, 1]; the seed mean
/// is what sits at chance.
#[test]
fn untrained_checkpoints_score_at_chance_on_average() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "chance", "it", "[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]", 0);
    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replace("real = 8\nprint = 4\nreplay = 4", "real = 60\nprint = 30\nreplay = 30");
    std::fs::write(&path, text).unwrap();
    let ws = Workspace::new(RunConfig::load(&path, &[]).unwrap()).unwrap();
    cmd_train(&ws, false).unwrap();
    let out = cmd_eval(&ws, &[]).unwrap();
    let per_seed: Vec<f64> = out.reports.iter().map(|r| r.auc).collect();
    let mean_auc = out.aggregate.unwrap().auc.mean;
    assert!((0.3..=0.7).contains(&mean_auc), "mean AUC {mean_auc}, per seed {per_seed:?}");
}
