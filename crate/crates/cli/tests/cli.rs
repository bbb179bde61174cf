use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BASE: &str = r#"
[dataset]
train_size = 400
val_size = 64
test_size = 64

[schedule]
steps = 16

[network]
hidden = 16
layers = 1
embed_dim = 8

[train]
steps = 40
batch_size = 32

[search]
K = 3
steps = 3
batch_size = 16
val_every = 1
val_size = 32

[search.features]
kind = "random_fourier"
dim = 16

[sample]
n = 100

[eval]
n_eval = 32
seeds = [0]
Ks = [3]

[eval.features]
kind = "random_fourier"
dim = 16
"#;

fn ddss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddss"))
        .args(args)
        .env("DDSS_THREADS", "2")
        .output()
        .expect("run ddss")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.toml");
        std::fs::write(&config, format!("out = {:?}\n{BASE}{extra}", root.join("out"))).unwrap();
        Self { _dir: dir, root, config }
    }

    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    fn cmd(&self, sub: &str, extra: &[&str]) -> Output {
        let mut args = vec![sub, "--config", self.config.to_str().unwrap()];
        args.extend_from_slice(extra);
        ddss(&args)
    }

    fn trained(extra: &str) -> Self {
        let run = Self::new(extra);
        ok(&run.cmd("train", &[]));
        run
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn train_is_deterministic_and_reproducible_from_resolved_config() {
    let run = Run::trained("");
    let out = run.out();
    let first = std::fs::read(out.join("model.ckpt")).unwrap();
    assert_eq!(read(&out.join("train_loss.csv")).lines().count(), 41);
    let resolved = out.join("train.resolved.toml");
    let copy = run.root.join("resolved.toml");
    std::fs::copy(&resolved, &copy).unwrap();
    ok(&ddss(&["train", "--config", copy.to_str().unwrap()]));
    assert_eq!(std::fs::read(out.join("model.ckpt")).unwrap(), first);
    assert_eq!(read(&resolved), read(&copy));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let no_data = dir.path().join("a.toml");
    std::fs::write(&no_data, "[train]\nsteps = 1\n").unwrap();
    let out = ddss(&["train", "--config", no_data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset"));

    let unknown = dir.path().join("b.toml");
    std::fs::write(&unknown, "[dataset]\n[train]\nstepz = 1\n").unwrap();
    let out = ddss(&["train", "--config", unknown.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));

    let out = ddss(&["train", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn search_writes_checkpoints_and_trace() {
    let run = Run::trained("");
    ok(&run.cmd("search", &["--family", "ggdm", "--time", "--K", "3"]));
    let out = run.out();
    assert!(out.join("sampler_best.ckpt").exists());
    assert!(out.join("sampler_final.ckpt").exists());
    let trace = read(&out.join("trace.csv"));
    assert_eq!(trace.lines().next(), Some("step,train_kid,val_kid"));
    assert_eq!(trace.lines().count(), 1 + 4);

    ok(&run.cmd("search", &["--steps", "0", "--family", "vars"]));
    assert_eq!(read(&out.join("trace.csv")).lines().count(), 2);
    let best = std::fs::read(out.join("sampler_best.ckpt")).unwrap();
    let last = std::fs::read(out.join("sampler_final.ckpt")).unwrap();
    assert_eq!(best, last);
}

#[test]
fn schedule_mismatch_exits_with_code_three() {
    let run = Run::trained("");
    ok(&run.cmd("search", &[]));
    let other = run.root.join("other.toml");
    let text = read(&run.config).replace("[schedule]\nsteps = 16", "[schedule]\nsteps = 16\nbeta_max = 0.3");
    std::fs::write(&other, text).unwrap();
    let out = ddss(&["search", "--config", other.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // A sampler searched on another schedule is refused as well.
    let alt = Run::trained("");
    let alt_cfg = alt.root.join("alt.toml");
    std::fs::write(
        &alt_cfg,
        read(&alt.config).replace("[schedule]\nsteps = 16", "[schedule]\nsteps = 16\nbeta_max = 0.3"),
    )
    .unwrap();
    ok(&ddss(&["train", "--config", alt_cfg.to_str().unwrap()]));
    let params = run.out().join("sampler_final.ckpt");
    let out = ddss(&["sample", "--config", alt_cfg.to_str().unwrap(), "--params", params.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn sample_eval_and_plot() {
    let run = Run::trained("");
    ok(&run.cmd("search", &[]));
    let out = run.out();
    ok(&run.cmd("sample", &["--n", "100"]));
    let samples = read(&out.join("samples.csv"));
    assert_eq!(samples.lines().count(), 101);
    assert_eq!(samples.lines().next(), Some("x0,x1"));

    let cfg = run.root.join("ddim.toml");
    std::fs::write(&cfg, format!("{}\n", read(&run.config).replace("[sample]\nn = 100", "[sample]\nn = 10\nsampler = \"ddim\"\ntrajectory = true"))).unwrap();
    ok(&ddss(&["sample", "--config", cfg.to_str().unwrap(), "--K", "3"]));
    assert_eq!(read(&out.join("trajectory.csv")).lines().count(), 1 + 4 * 10);

    let ggdm = format!("ggdm={}", out.join("sampler_final.ckpt").display());
    let eval_cfg = run.root.join("eval.toml");
    std::fs::write(
        &eval_cfg,
        read(&run.config).replace("[eval]\n", &format!("[eval]\nsamplers = [{ggdm:?}]\n")),
    )
    .unwrap();
    ok(&ddss(&["eval", "--config", eval_cfg.to_str().unwrap()]));
    let report = read(&out.join("report.csv"));
    assert_eq!(report.lines().count(), 2);
    assert!(report.starts_with("sampler,K,seed,rbf_mmd,kid_val,wasserstein2,mode_coverage\n"));
    assert!(report.lines().nth(1).unwrap().starts_with("ggdm,3,0,"));
    let first = report.clone();
    ok(&ddss(&["eval", "--config", eval_cfg.to_str().unwrap()]));
    assert_eq!(read(&out.join("report.csv")), first);

    let s = out.join("samples.csv");
    ok(&run.cmd("plot", &["--real", s.to_str().unwrap(), "--input", s.to_str().unwrap()]));
    let svg = read(&out.join("samples.svg"));
    assert!(svg.contains("config-hash"));
    let panels: Vec<Vec<&str>> = svg
        .split(r#"<g transform="translate(0,"#)
        .skip(1)
        .map(|p| p.split("</g>").next().unwrap().lines().filter(|l| l.starts_with("<circle")).collect())
        .collect();
    assert_eq!(panels.len(), 2);
    assert!(!panels[0].is_empty());
    assert_eq!(panels[0], panels[1]);

    let bad = run.root.join("bad.csv");
    std::fs::write(&bad, "x0,x1\n1.0,oops\n").unwrap();
    let out = run.cmd("plot", &["--input", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn invalid_thread_budget_is_a_config_error() {
    let run = Run::trained("");
    let out = Command::new(env!("CARGO_BIN_EXE_ddss"))
        .args(["eval", "--config", run.config.to_str().unwrap()])
        .env("DDSS_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
