use std::path::Path;
use std::process::Command;

use rface::pipeline::{AblationGrid, ExperimentConfig};

fn rface(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_rface")).args(args).output().unwrap();
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "rface {args:?} failed: {stderr}");
    String::from_utf8(out.stdout).unwrap()
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn shipped_configs_parse() {
    let toy = ExperimentConfig::load(&configs().join("toy.toml")).unwrap();
    assert_eq!(toy, ExperimentConfig::toy());
    let full = ExperimentConfig::load(&configs().join("full.toml")).unwrap();
    assert_eq!(full.generator.image_size, 256);
    let (grid, base) = AblationGrid::load(&configs().join("ablation.toml")).unwrap();
    assert_eq!(grid.variants.len(), 5);
    assert_eq!(base, toy);
}

const QUICK: &str = r#"
[generator]
base_channels = 8
downsample_steps = 2
dilation_schedule = [1, 2, 4, 8, 4, 2, 1]
image_size = 32
discriminator_channels = 8

[train]
steps = 3
batch_size = 2
image_size = 32

[train.data]
kind = "celebamask-hq"
root = "data"
test_size = 4
"#;

#[test]
fn prepare_train_edit_evaluate_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let p = |path: &Path| path.to_str().unwrap().to_string();

    rface(&["prepare-data", "--root", &p(&data), "--toy", "10", "--size", "32", "--seed", "3"]);
    assert_eq!(std::fs::read_dir(data.join("images")).unwrap().count(), 10);
    assert_eq!(std::fs::read_dir(data.join("labels")).unwrap().count(), 10);

    let cfg = root.join("quick.toml");
    std::fs::write(&cfg, QUICK).unwrap();
    let run = root.join("run");
    rface(&["train", "--config", &p(&cfg), "--out", &p(&run)]);
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let ckpt = run.join("checkpoint.safetensors");
    assert!(ckpt.is_file());

    let source = data.join("images/toy-00001.png");
    let reference = data.join("images/toy-00002.png");
    let mut outputs = Vec::new();
    for name in ["a.png", "b.png"] {
        let out = root.join(name);
        rface(&[
            "edit", "--source", &p(&source), "--reference", &p(&reference), "--components", "eyes,mouth",
            "--checkpoint", &p(&ckpt), "--out", &p(&out),
        ]);
        let img = image::open(&out).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (32, 32));
        let stem = name.trim_end_matches(".png");
        assert!(root.join(format!("{stem}_grid.png")).is_file());
        outputs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "editing is deterministic");

    let table = root.join("metrics.tsv");
    let printed = rface(&["evaluate", "--checkpoint", &p(&ckpt), "--split", "test", "--out-table", &p(&table)]);
    let text = std::fs::read_to_string(&table).unwrap();
    assert_eq!(text, printed);
    assert!(text.starts_with("config\tFID\tMS-SSIM\n"));
    assert_eq!(text.lines().count(), 2);

    let grid = root.join("grid.toml");
    std::fs::write(&grid, "config = \"quick.toml\"\nvariants = [\"full\", \"no-attention\"]\n").unwrap();
    let ablation = root.join("ablation.tsv");
    rface(&["ablate", "--grid", &p(&grid), "--out-table", &p(&ablation), "--runs", &p(&root.join("runs"))]);
    let rows: Vec<String> = std::fs::read_to_string(&ablation).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[2].starts_with("w/o attention\t"));
    assert!(root.join("runs/no-attention/checkpoint.safetensors").is_file());
}

#[test]
fn edit_rejects_unknown_components() {
    let out = Command::new(env!("CARGO_BIN_EXE_rface"))
        .args(["edit", "--source", "x.png", "--reference", "y.png", "--components", "ears"])
        .args(["--checkpoint", "c.safetensors", "--out", "o.png"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ears"));
}
