use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use w3_cli::export::{decode_pgm, last_stage_masks, parse_channel_csv, pgm_name, CHANNEL_CSV};
use w3_cli::manifest::load_config;
use w3_cli::run::load_model;
use w3_core::data::{clip_spec, generate_clip, load_clip, Split};

const TINY: &str = "frames = 4\nheight = 8\nwidth = 8\nstage_channels = 4,8\nstage_blocks = 1,1\n\
                    stage_strides = 1,2\nreduction = 4\nfold_div = 4\nepochs = 1\nbatch_size = 4\n\
                    n_train_per_class = 1\nn_val_per_class = 1\n";

fn w3(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_w3"))
        .args(args)
        .env_remove(w3_cli::OUT_DIR_ENV)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Writes [`TINY`] with the `key = value` lines of `extra` replacing or
/// extending it.
fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let key = |l: &str| l.split('=').next().unwrap_or("").trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut text: String = TINY
        .lines()
        .filter(|l| !overridden.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str(extra);
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `(key, value)` of every summary record in the CSV output.
fn csv_summary(csv: &str) -> Vec<(String, String)> {
    csv.lines()
        .filter(|l| l.starts_with("summary,"))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].to_string(), f[5].to_string())
        })
        .collect()
}

#[test]
fn flops_formats_carry_the_same_totals() {
    let csv = stdout(&w3(&["flops", "--variant", "w3", "--frames", "16", "--format", "csv"]));
    let table = stdout(&w3(&[
        "flops",
        "--variant",
        "w3",
        "--frames",
        "16",
        "--format",
        "table",
    ]));
    let summary = csv_summary(&csv);
    assert_eq!(summary.len(), 9);
    for (key, value) in &summary {
        let line = table
            .lines()
            .find(|l| l.split_whitespace().next() == Some(key.as_str()))
            .unwrap_or_else(|| panic!("{key} missing from table"));
        assert_eq!(line.split_whitespace().nth(1), Some(value.as_str()), "{key}");
    }
    // per-stage totals agree as well
    for l in csv.lines().filter(|l| l.starts_with("stage,")) {
        let f: Vec<&str> = l.split(',').collect();
        assert!(
            table
                .lines()
                .any(|t| t.split_whitespace().collect::<Vec<_>>().starts_with(&[f[1], f[5]])),
            "{l}"
        );
    }
}

#[test]
fn flops_assertions_set_the_exit_code() {
    assert_eq!(
        code(&w3(&["flops", "--variant", "w3", "--frames", "16", "--assert-paper"])),
        0
    );
    assert_eq!(
        code(&w3(&["flops", "--variant", "tsm", "--frames", "8", "--assert-paper"])),
        0
    );
    assert_eq!(
        code(&w3(&["flops", "--variant", "cbam", "--frames", "16", "--assert-paper"])),
        0
    );
    // the 8-frame module overhead is linear in frames and misses its reference
    assert_eq!(
        code(&w3(&["flops", "--variant", "w3", "--frames", "8", "--assert-paper"])),
        4
    );
    assert_eq!(code(&w3(&["flops", "--variant", "resnet"])), 2);
    let out = stdout(&w3(&["flops", "--variant", "tsm", "--frames", "8", "--format", "csv"]));
    let gflops: f64 = csv_summary(&out)
        .into_iter()
        .find(|(k, _)| k == "total_gflops")
        .unwrap()
        .1
        .parse()
        .unwrap();
    assert!((gflops - 33.0).abs() < 0.05 * 33.0, "{gflops}");
}

#[test]
fn gradcheck_reports_and_rejects_unknown_scopes() {
    let out = w3(&["gradcheck", "--scope", "w3", "--seed", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("mlp.w1") && text.contains("PASS"));
    assert_eq!(code(&w3(&["gradcheck", "--scope", "everything"])), 2);
}

#[test]
fn train_usage_and_numeric_failures() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "c.conf", "");
    let out_dir = dir.path().join("o");
    assert_eq!(
        code(&w3(&[
            "train",
            "--config",
            s(&conf),
            "--stage",
            "2",
            "--out",
            s(&out_dir)
        ])),
        2
    );
    assert_eq!(
        code(&w3(&[
            "train",
            "--config",
            s(&conf),
            "--ablate",
            "color",
            "--out",
            s(&out_dir)
        ])),
        2
    );

    let typo = write_config(dir.path(), "typo.conf", "learning_rate = 0.1\n");
    assert_eq!(code(&w3(&["train", "--config", s(&typo), "--out", s(&out_dir)])), 2);

    let hot = write_config(dir.path(), "hot.conf", "lr = 1e200\n");
    let out = w3(&["train", "--config", s(&hot), "--out", s(&dir.path().join("hot"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    // the manifest exists even though training failed
    assert!(dir.path().join("hot/manifest.txt").exists());
}

#[test]
fn ablated_stage_two_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "c.conf", "");
    let teacher_dir = dir.path().join("teacher");
    let out = w3(&[
        "train",
        "--config",
        s(&conf),
        "--ablate",
        "ta",
        "--out",
        s(&teacher_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(teacher_dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("temporal_attention = false"));
    assert!(manifest.contains("run.ablate = ta"));

    let student_dir = dir.path().join("student");
    let teacher = teacher_dir.join("model.ckpt");
    let out = w3(&[
        "train",
        "--config",
        s(&conf),
        "--stage",
        "2",
        "--teacher",
        s(&teacher),
        "--ablate",
        "ta",
        "--out",
        s(&student_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(student_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("stage,epoch,split,lr,ce,fm,total,top1\n"));
    assert!(metrics.lines().skip(1).all(|l| l.starts_with("2,")));
}

#[test]
fn output_directory_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "c.conf", "");
    let env_dir = dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_w3"))
        .args(["train", "--config", s(&conf)])
        .env(w3_cli::OUT_DIR_ENV, &env_dir)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(env_dir.join("model.ckpt").exists());
}

#[test]
fn exported_attention_of_an_untrained_zero_model_is_mid_gray() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "c.conf", "attention_init = zero\nlr = 0.0\n");
    let run_dir = dir.path().join("run");
    assert_eq!(code(&w3(&["train", "--config", s(&conf), "--out", s(&run_dir)])), 0);
    let ckpt = run_dir.join("model.ckpt");
    let maps = dir.path().join("maps");
    let out = w3(&[
        "export-attention",
        "--checkpoint",
        s(&ckpt),
        "--config",
        s(&run_dir.join("manifest.txt")),
        "--index",
        "3",
        "--out",
        s(&maps),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for t in 0..4 {
        let bytes = std::fs::read(maps.join(pgm_name(t))).unwrap();
        assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
        let (w, h, px) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h), (8, 8));
        assert!(px.iter().all(|&p| p == 128));
    }
    let rows = parse_channel_csv(&std::fs::read_to_string(maps.join(CHANNEL_CSV)).unwrap()).unwrap();
    assert_eq!((rows.len(), rows[0].len()), (4, 8));
    assert!(rows.iter().flatten().all(|&v| v == 0.5));
}

#[test]
fn exported_channel_csv_matches_in_memory_masks() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "c.conf", "epochs = 2\n");
    let run_dir = dir.path().join("run");
    assert_eq!(code(&w3(&["train", "--config", s(&conf), "--out", s(&run_dir)])), 0);
    let ckpt = run_dir.join("model.ckpt");
    let maps = dir.path().join("maps");
    let out = w3(&[
        "export-attention",
        "--checkpoint",
        s(&ckpt),
        "--config",
        s(&conf),
        "--index",
        "5",
        "--split",
        "train",
        "--out",
        s(&maps),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = load_config(&conf).unwrap();
    let model = load_model(&ckpt, &cfg.backbone, cfg.flags).unwrap();
    let clip = generate_clip(&clip_spec(&cfg.data_config(), cfg.data.seed, Split::Train, 5)).unwrap();
    let expect = last_stage_masks(&model, &clip).unwrap();
    let rows = parse_channel_csv(&std::fs::read_to_string(maps.join(CHANNEL_CSV)).unwrap()).unwrap();
    for (got, want) in rows.iter().flatten().zip(expect.channel.data()) {
        assert!((got - want).abs() < 1e-6);
    }
    // nearest-neighbour upsampling of a 4×4 map to 8×8
    let (_, _, px) = decode_pgm(&std::fs::read(maps.join(pgm_name(0))).unwrap()).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            let m = expect.spatial.at(&[0, y / 2, x / 2]);
            assert_eq!(px[y * 8 + x], (m * 255.0).round() as u8);
        }
    }
}

#[test]
fn gen_data_dumps_clips_and_export_rejects_mismatched_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "c.conf", "");
    let data = dir.path().join("data");
    let out = w3(&["gen-data", "--config", s(&conf), "--split", "val", "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut files: Vec<_> = std::fs::read_dir(&data).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 8);
    let (clip, label) = load_clip(&files[2]).unwrap();
    assert_eq!(clip.shape(), &[4, 3, 8, 8]);
    assert_eq!(label, 2);

    let run_dir = dir.path().join("run");
    assert_eq!(code(&w3(&["train", "--config", s(&conf), "--out", s(&run_dir)])), 0);
    let ckpt = run_dir.join("model.ckpt");

    let wide = write_config(dir.path(), "wide.conf", "width = 16\n");
    let wide_data = dir.path().join("wide");
    assert_eq!(
        code(&w3(&["gen-data", "--config", s(&wide), "--out", s(&wide_data)])),
        0
    );
    let clip = std::fs::read_dir(&wide_data).unwrap().next().unwrap().unwrap().path();
    let out = w3(&[
        "export-attention",
        "--checkpoint",
        s(&ckpt),
        "--config",
        s(&conf),
        "--clip",
        s(&clip),
        "--out",
        s(&dir.path().join("m")),
    ]);
    assert_eq!(code(&out), 2);

    // a checkpoint of another architecture is a usage error too
    let narrow = write_config(dir.path(), "narrow.conf", "stage_channels = 4,4\n");
    let out = w3(&[
        "export-attention",
        "--checkpoint",
        s(&ckpt),
        "--config",
        s(&narrow),
        "--index",
        "0",
        "--out",
        s(&dir.path().join("m2")),
    ]);
    assert_eq!(code(&out), 2);
}
