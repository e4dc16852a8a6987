use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[task]
kind = "cluster"
n_classes_total = 6
n_pretrain = 4
n_downstream = 2
dim = 3
radius = 3.0
class_sigma = 1.0
seed = 1

[data]
pretrain_samples = 120

[model]
input_dim = 3
hidden_widths = [6]
head_dim = 4
activation = "tanh"

[model.output_kind]
kind = "categorical_softmax"

[pretrain]
batch_size = 16
steps = 60
checkpoint_every = 20

[sweep]
axis = "learning_rate"
values = [0.01, 0.1]
seeds = [0, 1]

[sgld]
step_size = 1e-4
chain_length = 60
burn_in = 10
chains = 2

[finetune]
steps = 20

[full]
examples_per_class = 20

[fewshot]
n_way = 2
k_shot = 3
n_tasks = 4
test_per_class = 5
"#;

fn fesel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fesel")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let out = dir.join("run");
    let path = dir.join("config.toml");
    std::fs::write(&path, format!("output_dir = {:?}\n{body}", out.to_str().unwrap())).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_then_inspect_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let run_dir = tmp.path().join("run");
    let run = run_dir.to_str().unwrap();

    let o = fesel(&["run", "--config", &cfg, "--workers", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run_dir.join("manifest.json").exists());

    let o = fesel(&["rank", "--run", run, "--m-const", "1.5", "--m", "50"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("checkpoint_id,loss_term,complexity_term,score,rank"));
    assert_eq!(stdout(&o).lines().count(), 5);

    let o = fesel(&["correlate", "--run", run, "--metric", "llc", "--protocol", "fewshot"]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["pairs"].as_array().unwrap().len(), 4);

    let o = fesel(&["report", "--run", run]);
    assert_eq!(o.status.code(), Some(0));

    let ckpt = run_dir.join("cells/learning_rate=0.1-seed0/checkpoints/learning_rate=0.1-seed0-step60.json");
    let ckpt = ckpt.to_str().unwrap();
    let trace = tmp.path().join("trace.csv");
    let o = fesel(&["wbic", "--config", &cfg, "--checkpoint", ckpt, "--trace", trace.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let fe: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(fe["wbic"].as_f64().unwrap().is_finite());
    assert!(std::fs::read_to_string(&trace).unwrap().lines().count() > 1);

    for sub in ["finetune", "fewshot"] {
        let o = fesel(&[sub, "--config", &cfg, "--checkpoint", ckpt]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert!((0.0..=1.0).contains(&r["accuracy"].as_f64().unwrap()));
    }

    let o = fesel(&["gibbs", "--config", &cfg, "--checkpoint", ckpt, "--m", "30", "--eval-samples", "50"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn single_cell_and_pretrain_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let o = fesel(&["run", "--config", &cfg, "--cell", "learning_rate=0.01,seed=1"]);
    assert_eq!(o.status.code(), Some(0));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["cells"].as_array().unwrap().len(), 1);

    let sweep_dir = tmp.path().join("sweep");
    let o = fesel(&["pretrain", "--config", &cfg, "--out", sweep_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(Path::new(stdout(&o).trim()).exists());
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &TINY.replace("head_dim = 4", "head_dim = 5"));
    assert_eq!(fesel(&["run", "--config", &cfg]).status.code(), Some(1));
    let missing = tmp.path().join("nope.toml");
    assert_eq!(fesel(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(1));
    let cfg = write_config(tmp.path(), TINY);
    assert_eq!(fesel(&["run", "--config", &cfg, "--cell", "learning_rate=9,seed=0"]).status.code(), Some(1));
}

#[test]
fn failed_cells_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let body = TINY.replace("values = [0.01, 0.1]", "values = [0.01, 1e300]");
    let cfg = write_config(tmp.path(), &body);
    let o = fesel(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("run/manifest.json").exists());
}
