use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fesel::harness::{run_experiment, CellSelector, CellStatus, ExperimentConfig, RunManifest};
use fesel::model::empirical_nll;
use fesel::pretrain::Checkpoint;

const TINY: &str = r#"
output_dir = "unused"

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
learning_rate = 0.05
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

[evaluation]
checkpoints = "all"
"#;

const NUISANCE: &str = r#"
output_dir = "unused"

[task]
kind = "nuisance"
input_dim = 1
sigma0 = 1.0
sigma1 = 0.5
teacher_hidden = [3]
teacher_activation = "tanh"
teacher_seed = 4
seed = 2

[data]
pretrain_samples = 64

[model]
input_dim = 1
hidden_widths = [8, 8]
head_dim = 1
activation = "relu"

[model.output_kind]
kind = "gaussian_fixed_sigma"
sigma = 0.5

[pretrain]
learning_rate = 0.01
batch_size = 64
steps = 200
checkpoint_every = 100

[sweep]
axis = "learning_rate"
values = [0.001, 1000.0]
seeds = [0]

[sgld]
step_size = 1e-7
chain_length = 40
burn_in = 10
chains = 2

[evaluation]
protocols = []
"#;

fn config(text: &str, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml_str(text).unwrap();
    c.output_dir = out.to_path_buf();
    c
}

/// Every file under `dir` with its bytes, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn single_cell_run_writes_its_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(TINY, tmp.path());
    let only = "learning_rate=0.1,seed=1".parse::<CellSelector>().unwrap();
    let summary = run_experiment(&c, 1, Some(only)).unwrap();
    assert_eq!(summary.computed, vec!["learning_rate=0.1-seed1".to_string()]);
    assert!(summary.skipped.is_empty() && summary.failed.is_empty());

    let manifest = RunManifest::load(tmp.path()).unwrap();
    assert_eq!(manifest.cells.len(), 1);
    // Steps 20, 40, 60.
    assert_eq!(manifest.rows.len(), 3);
    let data = c.task.build().unwrap().sample(fesel::model::Side::Pretrain, 120, 0).unwrap();
    for row in &manifest.rows {
        let ck = Checkpoint::load(&tmp.path().join(&row.checkpoint_path)).unwrap();
        assert_eq!(ck.id, row.id);
        assert_eq!(ck.train_loss.to_bits(), row.train_loss.to_bits());
        assert!((empirical_nll(&ck.spec, &ck.params, &data).unwrap() - ck.train_loss).abs() < 1e-9);
        assert!(row.wbic.is_some() && row.full_acc.is_some() && row.fewshot_acc.is_some());
    }
    assert!("learning_rate=0.5,seed=0".parse::<CellSelector>().is_ok_and(|s| run_experiment(&c, 1, Some(s)).is_err()));
}

#[test]
fn replay_skips_completed_cells_and_reproduces_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(TINY, tmp.path());
    let first = run_experiment(&c, 2, None).unwrap();
    assert_eq!(first.computed.len(), 4);
    let before = snapshot(tmp.path());

    let again = run_experiment(&c, 1, None).unwrap();
    assert!(again.computed.is_empty());
    assert_eq!(again.skipped.len(), 4);
    assert_eq!(snapshot(tmp.path()), before);

    // A selected rerun keeps the other completed cells in the manifest.
    let one = run_experiment(&c, 1, Some("learning_rate=0.01,seed=0".parse().unwrap())).unwrap();
    assert_eq!(one.skipped.len(), 4);
    assert_eq!(snapshot(tmp.path()), before);

    let mut changed = c.clone();
    changed.sgld.chains = 3;
    let rerun = run_experiment(&changed, 1, None).unwrap();
    assert_eq!(rerun.computed.len(), 4);
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(TINY, tmp.path());
    run_experiment(&c, 1, None).unwrap();
    let serial = snapshot(tmp.path());
    std::fs::remove_dir_all(tmp.path()).unwrap();
    run_experiment(&c, 4, None).unwrap();
    let parallel = snapshot(tmp.path());
    assert_eq!(serial.keys().collect::<Vec<_>>(), parallel.keys().collect::<Vec<_>>());
    for (k, v) in &serial {
        assert!(parallel[k] == *v, "{} differs", k.display());
    }
}

#[test]
fn csv_headers_match_golden_file() {
    let tmp = tempfile::tempdir().unwrap();
    run_experiment(&config(TINY, tmp.path()), 1, None).unwrap();
    let golden = include_str!("golden/csv_headers.txt");
    for line in golden.lines().filter(|l| !l.is_empty()) {
        let (file, header) = line.split_once(": ").unwrap();
        let text = std::fs::read_to_string(tmp.path().join(file)).unwrap_or_else(|e| panic!("{file}: {e}"));
        assert_eq!(text.lines().next().unwrap(), header, "{file}");
    }
    let correlations = std::fs::read_to_string(tmp.path().join("correlations.csv")).unwrap();
    // Three metrics by two protocols.
    assert_eq!(correlations.lines().count(), 7);
    for kind in ["train_loss_vs_step", "wbic_vs_step", "accuracy_vs_axis", "wbic_vs_accuracy"] {
        let svg = std::fs::read_to_string(tmp.path().join(format!("plots/{kind}.svg"))).unwrap();
        assert!(svg.starts_with("<svg"));
    }
}

#[test]
fn diverging_cell_is_recorded_and_the_rest_completes() {
    let tmp = tempfile::tempdir().unwrap();
    let c = config(NUISANCE, tmp.path());
    let summary = run_experiment(&c, 1, None).unwrap();
    assert_eq!(summary.computed, vec!["learning_rate=0.001-seed0".to_string()]);
    assert_eq!(summary.failed.len(), 1);
    let manifest = RunManifest::load(tmp.path()).unwrap();
    let failed = manifest.failed_cells();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].status, CellStatus::Failed);
    assert!(failed[0].error.as_deref().unwrap().contains("diverged"));

    // Failed cells are retried, completed ones are not.
    let again = run_experiment(&c, 1, None).unwrap();
    assert_eq!(again.skipped.len(), 1);
    assert_eq!(again.failed.len(), 1);
}
