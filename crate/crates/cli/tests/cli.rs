use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ecae::data::{synth_dataset, SynthKind};
use ecae::evolution::GenerationRecord;

const TINY: &str = r#"
profile = "desk"
seeds = [1]

[evolution]
generations = 2
children = 2
rows = 2
cols = 3
level_back = 2
filters = [4, 8]
kernels = [1, 3]
mode = "denoising"
input_size = 8
input_channels = 1
iterations = 5
batch_size = 4

[evolution.corruption]
kind = "gaussian_noise"
sigma = 30.0

[data]
split = [0.5, 0.25, 0.25]
split_seed = 7

[data.source]
type = "synthetic"
kind = "gradients"
count = 12

[finetune]
iterations = 10
milestones = [4, 8]
"#;

fn ecae(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecae"))
        .args(args)
        .current_dir(dir)
        .env_remove("ECAE_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(o), stderr(o));
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

fn records(path: &Path) -> Vec<GenerationRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<GenerationRecord>(l).unwrap().without_timing())
        .collect()
}

#[test]
fn arch_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ecae(&["arch", "parse", "CS(64,3) - C(128,5)"], tmp.path());
    assert_ok(&o);
    assert_eq!(stdout(&o).trim(), "CS(64,3)-C(128,5)");

    let o = ecae(&["arch", "params", "C(4,3)", "--mode", "denoising", "--channels", "1", "--size", "8"], tmp.path());
    assert_ok(&o);
    // conv 1->4 k3, conv 4->4 k3 decoder, output 4->1 k3
    assert_eq!(stdout(&o).trim(), (9 * 4 + 4 + 9 * 16 + 4 + 9 * 4 + 1).to_string());

    let o = ecae(&["arch", "shapes", "C(4,3)", "--size", "8"], tmp.path());
    assert_ok(&o);
    let out = stdout(&o);
    assert!(out.contains("input (3,8,8)"), "{out}");
    assert!(out.contains("(4,4,4)"), "{out}");
    assert!(out.lines().last().unwrap().contains("(3,8,8)"), "{out}");

    let o = ecae(&["arch", "expand", "CS(8,1)"], tmp.path());
    assert_ok(&o);
    assert!(stdout(&o).contains("output_layer"));
}

#[test]
fn bad_inputs_exit_with_code_two_and_one_error_line() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ecae(&["arch", "parse", "C(64,2)"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: kind=parse message=\""), "{err}");

    let o = ecae(&["evolve", "--no-such-flag"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: kind=usage"));

    fs::write(tmp.path().join("bad.toml"), "colour = 3\n").unwrap();
    let o = ecae(&["config", "--config", "bad.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: kind=config"));

    let o = ecae(&["--help"], tmp.path());
    assert_ok(&o);
    assert!(stdout(&o).contains("evolve"));
}

#[test]
fn config_command_merges_profile_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let o = ecae(&["config", "--config", &cfg, "--generations", "9"], tmp.path());
    assert_ok(&o);
    let out = stdout(&o);
    assert!(out.contains("generations = 9"), "{out}");
    assert!(out.contains("level_back = 2"), "{out}");
    assert!(out.contains("mutation_rate = 0.1"), "{out}");
}

#[test]
fn evolve_report_eval_finetune() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let o = ecae(&["evolve", "--config", &cfg, "--seeds", "1,2", "--out-dir", "runs"], tmp.path());
    assert_ok(&o);
    for seed in [1, 2] {
        let d = tmp.path().join(format!("runs/seed-{seed}"));
        for f in ["log.jsonl", "best.genotype.toml", "best.weights", "checkpoint.bin", "run.json", "config.toml"] {
            assert!(d.join(f).exists(), "missing {f} for seed {seed}");
        }
        assert_eq!(records(&d.join("log.jsonl")).len(), 2);
    }
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("seed=")).count(), 2);

    let o = ecae(
        &["report", "runs/seed-1/log.jsonl", "runs/seed-2/log.jsonl", "--output", "rep"],
        tmp.path(),
    );
    assert_ok(&o);
    let summary = fs::read_to_string(tmp.path().join("rep/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "run,generations,best_psnr,best_arch");
    assert!(lines[1].starts_with("seed-1,2,") && lines[2].starts_with("seed-2,2,"));
    assert!(lines[3].starts_with("mean,"));
    assert_eq!(fs::read_to_string(tmp.path().join("rep/seed-1.csv")).unwrap().lines().count(), 3);
    let svg = fs::read_to_string(tmp.path().join("rep/fitness.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("seed-2"));

    let o = ecae(
        &["eval", "--config", &cfg, "--weights", "runs/seed-1/best.weights", "--output", "eval.csv"],
        tmp.path(),
    );
    assert_ok(&o);
    let csv = fs::read_to_string(tmp.path().join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 1, "{csv}");
    assert!(stdout(&o).contains("input_psnr="));

    let o = ecae(
        &["finetune", "--config", &cfg, "--genotype", "runs/seed-1/best.genotype.toml", "--out-dir", "ft"],
        tmp.path(),
    );
    assert_ok(&o);
    for f in ["weights.bin", "report.csv", "input_report.csv", "trace.csv"] {
        assert!(tmp.path().join("ft/finetune").join(f).exists(), "missing {f}");
    }
    let trace = fs::read_to_string(tmp.path().join("ft/finetune/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 11);
}

#[test]
fn stopped_and_resumed_run_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let full = ["evolve", "--config", &cfg, "--generations", "4", "--out-dir", "full"];
    assert_ok(&ecae(&full, tmp.path()));

    let part = ["evolve", "--config", &cfg, "--generations", "4", "--out-dir", "part"];
    let mut stopped = part.to_vec();
    stopped.extend(["--stop-after", "2"]);
    let o = ecae(&stopped, tmp.path());
    assert_ok(&o);
    assert!(stdout(&o).contains("completed=false"));
    assert_eq!(records(&tmp.path().join("part/seed-1/log.jsonl")).len(), 2);

    let mut resumed = part.to_vec();
    resumed.push("--resume");
    let o = ecae(&resumed, tmp.path());
    assert_ok(&o);
    assert!(stdout(&o).contains("completed=true"));
    assert_eq!(
        records(&tmp.path().join("part/seed-1/log.jsonl")),
        records(&tmp.path().join("full/seed-1/log.jsonl"))
    );
    assert_eq!(
        fs::read(tmp.path().join("part/seed-1/best.genotype.toml")).unwrap(),
        fs::read(tmp.path().join("full/seed-1/best.genotype.toml")).unwrap()
    );

    let mut changed = resumed.clone();
    changed.extend(["--mutation-rate", "0.3"]);
    let o = ecae(&changed, tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn out_dir_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let o = Command::new(env!("CARGO_BIN_EXE_ecae"))
        .args(["evolve", "--config", &cfg, "--generations", "1"])
        .current_dir(tmp.path())
        .env("ECAE_OUT_DIR", "from-env")
        .output()
        .unwrap();
    assert_ok(&o);
    assert!(tmp.path().join("from-env/seed-1/log.jsonl").exists());
}

#[test]
fn corrupt_writes_one_png_per_image() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("clean");
    fs::create_dir(&src).unwrap();
    let set = synth_dataset(SynthKind::Rectangles, 3, 16, 3, 5).unwrap();
    for (img, label) in set.images.iter().zip(&set.labels) {
        img.save(&src.join(format!("{label}.png"))).unwrap();
    }
    let o = ecae(
        &["corrupt", "--input", "clean", "--output", "noisy", "--corruption", "center:0.5"],
        tmp.path(),
    );
    assert_ok(&o);
    let out = ecae::data::load_images(&tmp.path().join("noisy"), 3).unwrap();
    assert_eq!(out.len(), 3);
    // The central 8x8 block is filled with zeros.
    let img = &out.images[0];
    assert_eq!(img.get(0, 8, 8), 0.0);
    assert_eq!(img.get(2, 4, 11), 0.0);
}

#[test]
fn gradcheck_passes_and_report_rejects_empty_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ecae(&["gradcheck", "--layers"], tmp.path());
    assert_ok(&o);
    assert!(stdout(&o).contains("layer=tconv_k3_s2"));
    assert!(stdout(&o).lines().last().unwrap().starts_with("ok"));

    fs::write(tmp.path().join("junk.jsonl"), "{not json}\n").unwrap();
    let o = ecae(&["report", "junk.jsonl", "--output", "r"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error: kind=data"));
}
