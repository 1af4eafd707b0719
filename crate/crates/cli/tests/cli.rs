use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use glasskit::io::{load_grey, load_mask, save_grey};
use glasskit::maps::FloatMap;

fn glasskit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glasskit"))
        .args(args)
        .env("GLASSKIT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_lines(out: &Output) -> usize {
    String::from_utf8_lossy(&out.stderr).lines().count()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, count: usize, size: usize) {
    let out = glasskit(&["synth", "--out", s(dir), "--count", &count.to_string(), "--size", &size.to_string(), "--seed", "5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_lists_flags_and_exits_zero() {
    let cases: [(&str, &[&str]); 6] = [
        ("synth", &["--out", "--count", "--size", "--seed"]),
        ("decouple", &["--gt", "--out"]),
        ("train", &["--data", "--config", "--out"]),
        ("eval", &["--pred", "--gt", "--report"]),
        ("predict", &["--ckpt", "--image", "--out"]),
        ("gradcheck", &["--seed"]),
    ];
    for (cmd, flags) in cases {
        let out = glasskit(&[cmd, "--help"]);
        assert_eq!(code(&out), 0, "{cmd}");
        let text = stdout(&out);
        for f in flags {
            assert!(text.contains(f), "{cmd} help lacks {f}");
        }
    }
    assert_eq!(code(&glasskit(&["--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        &["synth", "--out", "x", "--count", "1", "--bogus"][..],
        &["decouple", "--gt", "x"],
        &["frobnicate"],
        &["synth", "--out", "x", "--count", "many"],
    ] {
        let out = glasskit(args);
        assert_eq!(code(&out), 1, "{args:?}");
        assert_eq!(stderr_lines(&out), 1, "{args:?}");
    }
}

#[test]
fn synth_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 3, 32);
    synth(&b, 3, 32);
    for rel in ["manifest.txt", "images/00002.png", "masks/00002.png"] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn decoupled_pngs_sum_to_mask() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, 4, 32);
    let dec = tmp.path().join("dec");
    assert_eq!(code(&glasskit(&["decouple", "--gt", s(&ds.join("masks")), "--out", s(&dec)])), 0);
    for i in 0..4 {
        let name = format!("{i:05}.png");
        let gt = load_mask(&ds.join("masks").join(&name)).unwrap();
        let bl = fs::read(dec.join("bl").join(&name)).unwrap();
        let dl = fs::read(dec.join("dl").join(&name)).unwrap();
        let decode = |bytes: Vec<u8>| {
            let mut r = png::Decoder::new(&bytes[..]).read_info().unwrap();
            let mut buf = vec![0; r.output_buffer_size()];
            r.next_frame(&mut buf).unwrap();
            buf
        };
        let (bl, dl) = (decode(bl), decode(dl));
        for (k, &g) in gt.data().iter().enumerate() {
            let sum = i32::from(bl[k]) + i32::from(dl[k]);
            assert!((sum - 255 * i32::from(g)).abs() <= 1, "{name} pixel {k}: {sum}");
        }
        assert!(dec.join("bl").join(format!("{i:05}.gldt")).exists());
    }
}

#[test]
fn eval_on_identical_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, 3, 32);
    let masks = ds.join("masks");
    let report = tmp.path().join("r.txt");
    let out = glasskit(&["eval", "--pred", s(&masks), "--gt", s(&masks), "--report", s(&report)]);
    assert_eq!(code(&out), 0);
    let table = stdout(&out);
    assert!(table.contains("1.000") && table.contains("0.00"), "{table}");
    let kv = fs::read_to_string(&report).unwrap();
    for key in ["acc:", "iou:", "fbeta:", "mae:", "ber:", "n_images: 3"] {
        assert!(kv.contains(key), "{kv}");
    }

    let json = tmp.path().join("r.json");
    assert_eq!(code(&glasskit(&["eval", "--pred", s(&masks), "--gt", s(&masks), "--report", s(&json)])), 0);
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(doc["acc"], 1.0);
    assert_eq!(doc["ber"], 0.0);
    assert_eq!(doc["n_images"], 3);
}

#[test]
fn eval_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, 2, 32);
    let missing = glasskit(&["eval", "--pred", s(&tmp.path().join("none")), "--gt", s(&ds.join("masks"))]);
    assert_eq!(code(&missing), 2);
    assert_eq!(stderr_lines(&missing), 1);

    let small = tmp.path().join("small");
    fs::create_dir(&small).unwrap();
    for name in ["00000.png", "00001.png"] {
        save_grey(&small.join(name), &FloatMap::zeros(16, 16).unwrap()).unwrap();
    }
    let shape = glasskit(&["eval", "--pred", s(&small), "--gt", s(&ds.join("masks"))]);
    assert_eq!(code(&shape), 3);
}

#[test]
fn train_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, 6, 32);
    let cfg = tmp.path().join("run.txt");
    fs::write(
        &cfg,
        "# tiny run\nnet.input_size = 32\nnet.width_factor = 0.25\ntrain.max_iters = 4\ntrain.eval_every = 2\ntrain.batch_size = 2\ndata.val_fraction = 0.34\n",
    )
    .unwrap();
    let run = |dir: &Path| {
        let out = glasskit(&["train", "--data", s(&ds), "--config", s(&cfg), "--out", s(dir)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        stdout(&out)
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let log = run(&a);
    assert_eq!(log.lines().filter(|l| l.starts_with("iter ")).count(), 4);
    run(&b);
    for f in ["final.glck", "best.glck", "history.txt", "config.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(a.join("history.txt")).unwrap().lines().count(), 2);

    let pred = tmp.path().join("p.png");
    let image = ds.join("images/00000.png");
    let out = glasskit(&["predict", "--ckpt", s(&a.join("final.glck")), "--image", s(&image), "--out", s(&pred)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let map = load_grey(&pred).unwrap();
    assert_eq!((map.height(), map.width()), (32, 32));

    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "train.learning_rate = 1\n").unwrap();
    let out = glasskit(&["train", "--data", s(&ds), "--config", s(&bad), "--out", s(&a)]);
    assert_eq!(code(&out), 1);

    let out = glasskit(&["predict", "--ckpt", s(&cfg), "--image", s(&image), "--out", s(&pred)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_seed_7_passes() {
    let out = glasskit(&["gradcheck", "--seed", "7"]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).lines().all(|l| l.starts_with("PASS")));
}
