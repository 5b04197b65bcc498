use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gmk_core::attacks::VARIANT_PLAIN;
use gmk_core::data_io::*;
use gmk_core::genmodels::{DiscriminatorConfig, GeneratorConfig};
use gmk_core::img::Region;
use gmk_core::losses::ObjectiveSpec;

fn config(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        model: ModelSection {
            kind: ModelKind::Gan,
            preset: Preset::Desk,
            generator: Some(GeneratorConfig { base_channels: 16, widths: vec![8, 8, 8], ..GeneratorConfig::desk() }),
            discriminator: Some(DiscriminatorConfig::scaled(32)),
            vae: None,
        },
        train: TrainSection { steps: 3, batch_size: 8, seed: 5, ..Default::default() },
        objective: ObjectiveSpec::default(),
        trigger: Some(TriggerSource::Generate { n: 5, c: -10.0, seed: 1 }),
        watermark: Some(WatermarkSource { builtin: Some("ring".into()), path: None, name: None, region: Region::top_left(24, 24) }),
        signature: Some(SignatureSource { text: Some("HI".into()), file: None, gamma0: 0.1 }),
        uchida: None,
        dataset: DatasetSection::Shapes { spec: SyntheticShapesSpec { n_samples: 80, ..Default::default() } },
        eval: EvalSection {
            n_queries: 8,
            n_fidelity: 80,
            fidelity: gmk_core::metrics::FrechetProxyConfig { feature_dim: 8, ..Default::default() },
            ..Default::default()
        },
        attacker: Some(AttackerSection {
            trigger: TriggerSource::Generate { n: 5, c: 10.0, seed: 99 },
            watermark: WatermarkSource { builtin: Some("cross".into()), path: None, name: None, region: Region::top_left(24, 24) },
            signature: None,
        }),
        output_dir: PathBuf::from("runs"),
    }
}

fn gmk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmk")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn embed_verify_attack_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, config("cli").to_json()).unwrap();
    let out = gmk(&["embed", s(&cfg), "--out", s(tmp.path())]);
    let run = tmp.path().join("cli");
    assert!(out.status.code().is_some_and(|c| [0, 2, 3, 4].contains(&c)), "{out:?}");
    let ckpt = run.join(CHECKPOINT_FILE);
    assert!(ckpt.exists());
    verify_manifest(&run).unwrap();

    let vdir = tmp.path().join("v");
    let out = gmk(&["verify", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&vdir)]);
    let vdir = vdir.join("cli/verify");
    let report: serde_json::Value = serde_json::from_slice(&fs::read(vdir.join("report.json")).unwrap()).unwrap();
    let bb = report["blackbox"]["verdict"].as_bool().unwrap();
    let wb = report["whitebox"]["verdict"].as_bool().unwrap();
    let expected = match (bb, wb) {
        (true, true) => 0,
        (true, false) => 2,
        (false, true) => 3,
        (false, false) => 4,
    };
    assert_eq!(out.status.code(), Some(expected));
    // 3 steps cannot move γ out of its seeded margin
    assert!(wb);

    let adir = tmp.path().join("atk");
    let out = gmk(&["attack", "flip-signs", s(&cfg), "--checkpoint", s(&ckpt), "--p", "0.5", "--out", s(&adir), "--seed", "3"]);
    assert!(out.status.success(), "{out:?}");
    let csv = fs::read_to_string(adir.join("cli/attacks/flip_signs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let out = gmk(&["attack", "overwrite", s(&cfg), "--checkpoint", s(&ckpt), "--steps", "1", "--out", s(&adir)]);
    assert!(out.status.success(), "{out:?}");
    assert!(adir.join(format!("cli/attacks/overwrite_{VARIANT_PLAIN}.gmk")).exists());

    let out = gmk(&["sweep-flips", s(&cfg), "--checkpoint", s(&ckpt), "--fractions", "0,1", "--seeds", "1", "--out", s(&adir)]);
    assert!(out.status.success(), "{out:?}");
    assert_eq!(fs::read_to_string(adir.join("cli/flip_sweep.csv")).unwrap().lines().count(), 3);

    let out = gmk(&["report", s(&run), s(&tmp.path().join("missing"))]);
    assert!(out.status.success(), "{out:?}");
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with(TABLE_HEADER));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn ablate_lambda_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    let mut c = config("abl");
    c.train.steps = 1;
    fs::write(&cfg, c.to_json()).unwrap();
    let out = gmk(&["ablate-lambda", s(&cfg), "--lambdas", "0.5,2", "--out", s(tmp.path())]);
    assert!(out.status.success(), "{out:?}");
    let csv = fs::read_to_string(tmp.path().join("abl/ablation_lambda.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(tmp.path().join("abl/lambda_0.5").join(MANIFEST).exists());
}

#[test]
fn bad_input_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"name": "x", "bogus": 1}"#).unwrap();
    let out = gmk(&["embed", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let out = gmk(&["verify", s(&cfg), "--checkpoint", "/nonexistent.gmk"]);
    assert_eq!(out.status.code(), Some(1));
}
