use std::path::Path;
use std::process::{Command, Output};

use groco::dataio::{gvec_write, Dataset};

fn groco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_groco"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--synth",
    "--clusters",
    "3",
    "--per-cluster",
    "20",
    "--dim",
    "6",
    "--epochs",
    "2",
    "--batch-size",
    "16",
    "--hidden",
    "16",
    "--rep-dim",
    "16",
    "--proj-dim",
    "16",
    "--neg",
    "4",
];

#[test]
fn sort_examples() {
    let o = groco(&["sort", "--values", "6,1,4,2", "--hard"]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.starts_with("sorted: 1 2 4 6\n"), "{s}");
    assert!(s.contains("0 1 0 0\n0 0 0 1\n0 0 1 0\n1 0 0 0\n"), "{s}");

    let s = stdout(&groco(&["sort", "--values", "2,1", "--beta", "1"]));
    assert!(s.contains("sorted: 1.25000 1.75000"), "{s}");
    assert!(s.contains("0.250000 0.750000\n0.750000 0.250000\n"), "{s}");

    let o = groco(&["sort", "--values", "-1.5,3"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn exit_codes() {
    assert_eq!(groco(&["sort", "--values", "abc"]).status.code(), Some(2));
    assert_eq!(groco(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        groco(&["sort", "--values", "1,2", "--beta", "0"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        groco(&["eval", "--checkpoint", "/nonexistent/x.ckpt", "--synth"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(groco(&["--help"]).status.code(), Some(0));
}

#[test]
fn toy_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.csv");
    let i = dir.path().join("i.csv");
    assert_eq!(
        groco(&["toy", "--loss", "groco", "--out", p(&g)])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        groco(&["toy", "--loss", "infonce", "--out", p(&i)])
            .status
            .code(),
        Some(0)
    );
    let (g, i) = (
        std::fs::read_to_string(g).unwrap(),
        std::fs::read_to_string(i).unwrap(),
    );
    assert_eq!(g.lines().count(), 302);
    assert_eq!(i.lines().count(), 302);
    assert_eq!(
        g.lines().next(),
        Some("step,s_pos,s_neg1,s_neg2,s_neg3,s_neg4")
    );

    let s = stdout(&groco(&["toy", "--lr", "0", "--steps", "5"]));
    let rows: Vec<&str> = s
        .lines()
        .skip(1)
        .map(|l| l.split_once(',').unwrap().1)
        .collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| *r == rows[0]));

    assert_eq!(groco(&["toy", "--loss", "triplet"]).status.code(), Some(2));
}

#[test]
fn gradcheck_and_fault() {
    let o = groco(&["gradcheck", "--kmax", "2", "--nmax", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("gradcheck passed: 18 cases"));

    let o = groco(&[
        "gradcheck",
        "--kmax",
        "2",
        "--nmax",
        "3",
        "--inject-fault",
        "arctan",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL K=1 N=1"));
}

#[test]
fn train_each_loss_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    for loss in ["groco", "infonce", "triplet"] {
        let ckpt = dir.path().join(format!("{loss}.ckpt"));
        let metrics = dir.path().join(format!("{loss}.csv"));
        let mut args = vec![
            "--threads",
            "1",
            "train",
            "--loss",
            loss,
            "--out",
            p(&ckpt),
            "--metrics",
            p(&metrics),
        ];
        args.extend_from_slice(SMALL);
        let o = groco(&args);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{loss}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        let m = std::fs::read_to_string(&metrics).unwrap();
        assert!(m.starts_with("epoch,step,loss,lr\n"));
        assert!(m.lines().count() > 2);

        for space in ["representation", "projection"] {
            let o = groco(&[
                "eval",
                "--checkpoint",
                p(&ckpt),
                "--synth",
                "--clusters",
                "3",
                "--per-cluster",
                "20",
                "--dim",
                "6",
                "--k",
                "1,5",
                "--space",
                space,
            ]);
            assert_eq!(
                o.status.code(),
                Some(0),
                "{}",
                String::from_utf8_lossy(&o.stderr)
            );
            assert!(stdout(&o).contains(space));
        }
    }
    let ckpt = dir.path().join("groco.ckpt");
    let csv = dir.path().join("eval.csv");
    let o = groco(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--synth",
        "--clusters",
        "3",
        "--per-cluster",
        "20",
        "--dim",
        "6",
        "--mode",
        "linear",
        "--csv",
        p(&csv),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let c = std::fs::read_to_string(csv).unwrap();
    assert!(
        c.starts_with("space,mode,k,accuracy\nrepresentation,linear,,"),
        "{c}"
    );

    // wrong input dimension
    let o = groco(&["eval", "--checkpoint", p(&ckpt), "--synth", "--dim", "7"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_from_environment_and_dump_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str, seed: Option<&str>| {
        let ckpt = dir.path().join(format!("{tag}.ckpt"));
        let metrics = dir.path().join(format!("{tag}.csv"));
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_groco"));
        cmd.args([
            "--threads",
            "1",
            "train",
            "--dump-config",
            "--out",
            p(&ckpt),
            "--metrics",
            p(&metrics),
        ]);
        cmd.args(SMALL);
        match seed {
            Some(s) => cmd.env("GROCO_SEED", s),
            None => cmd.env_remove("GROCO_SEED"),
        };
        let o = cmd.output().unwrap();
        assert_eq!(o.status.code(), Some(0));
        (stdout(&o), std::fs::read(ckpt).unwrap())
    };
    let (out7, a) = run("a", Some("7"));
    let (_, b) = run("b", Some("7"));
    let (out0, c) = run("c", None);
    assert!(out7.contains("seed=7"), "{out7}");
    assert!(out0.contains("seed=0"));
    assert!(out0.contains("lr=3"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn gvec_input_without_labels() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("x.gvec");
    let vectors: Vec<f32> = (0..40 * 5)
        .map(|i| ((i * 37 % 11) as f32 - 5.0) / 3.0)
        .collect();
    gvec_write(&Dataset::new(5, vectors, None, "test").unwrap(), &data).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let metrics = dir.path().join("m.csv");
    let o = groco(&[
        "--threads",
        "1",
        "train",
        "--data",
        p(&data),
        "--epochs",
        "1",
        "--batch-size",
        "8",
        "--neg",
        "3",
        "--hidden",
        "16",
        "--rep-dim",
        "16",
        "--proj-dim",
        "16",
        "--out",
        p(&ckpt),
        "--metrics",
        p(&metrics),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    // unlabelled data cannot be evaluated
    let o = groco(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn default_training_lowers_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let metrics = dir.path().join("m.csv");
    let o = groco(&[
        "train",
        "--synth",
        "--epochs",
        "5",
        "--out",
        p(&ckpt),
        "--metrics",
        p(&metrics),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let means: Vec<f64> = stdout(&o)
        .lines()
        .filter_map(|l| l.strip_prefix("epoch "))
        .map(|l| l.rsplit(' ').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(means.len(), 5);
    assert!(means[4] < means[0], "{means:?}");
}
