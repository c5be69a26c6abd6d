use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mpflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// A tiny 16x16 run: a handful of phantoms, short training, 10 steps.
fn tiny(dir: &Path) -> Vec<String> {
    [
        format!("out_dir={}", dir.display()),
        "height=16".into(),
        "width=16".into(),
        "n_train=12".into(),
        "n_test=3".into(),
        "lesion_prob=1".into(),
        "prior_iterations=20".into(),
        "ssl_patch=8".into(),
        "ssl_batch=8".into(),
        "ssl_iterations=10".into(),
        "ssl_channels=4".into(),
        "embed_dim=8".into(),
        "steps=10".into(),
        "seeds=2".into(),
    ]
    .into_iter()
    .flat_map(|kv| ["--set".to_string(), kv])
    .collect()
}

fn run(sub: &str, dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub.to_string()];
    args.extend(tiny(dir));
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    mpflow(&refs)
}

fn ok(o: Output) -> Output {
    assert_eq!(
        code(&o),
        0,
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

#[test]
fn help_succeeds_and_bad_usage_exits_one() {
    assert_eq!(code(&mpflow(&["--help"])), 0);
    assert_eq!(code(&mpflow(&["no-such-command"])), 1);
    assert_eq!(code(&mpflow(&["reconstruct", "--ablate", "no-magic"])), 1);
    assert_eq!(code(&mpflow(&["gen-data", "--set", "height"])), 1);
    assert_eq!(code(&mpflow(&["gen-data", "--set", "height=abc"])), 1);
}

#[test]
fn missing_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("train-prior", dir.path(), &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest"));
}

#[test]
fn gen_data_is_deterministic_and_manifest_complete() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(run("gen-data", a.path(), &[]));
    ok(run("gen-data", b.path(), &[]));
    let manifest = fs::read_to_string(a.path().join("data/manifest.csv")).unwrap();
    let rows: Vec<&str> = manifest.lines().skip(1).collect();
    assert_eq!(rows.len(), 15);
    assert_eq!(rows.iter().filter(|r| r.contains(",test,")).count(), 3);
    for row in &rows {
        for rel in row.split(',').skip(3) {
            let (fa, fb) = (a.path().join("data").join(rel), b.path().join("data").join(rel));
            assert_eq!(fs::read(fa).unwrap(), fs::read(fb).unwrap(), "{rel}");
        }
    }
}

#[test]
fn existing_artifacts_need_force() {
    let dir = tempfile::tempdir().unwrap();
    ok(run("gen-data", dir.path(), &[]));
    assert_eq!(code(&run("gen-data", dir.path(), &[])), 1);
    ok(run("gen-data", dir.path(), &["--force"]));
    let changed = run("gen-data", dir.path(), &["--set", "seed=5"]);
    assert_eq!(code(&changed), 1);
    assert!(String::from_utf8_lossy(&changed.stderr).contains("--force"));
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let out = dir.path().join("out");
    fs::write(&cfg, format!("out_dir = {}\nheight = 16\nwidth = 16\nn_train = 4\nn_test = 9\n", out.display())).unwrap();
    ok(mpflow(&["gen-data", "-c", cfg.to_str().unwrap(), "--set", "n_test=2"]));
    let manifest = fs::read_to_string(out.join("data/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 4 + 2);
    let resolved = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(resolved.contains("n_test = 2"), "{resolved}");
    assert!(resolved.contains("height = 16"), "{resolved}");
}

#[test]
fn pipeline_runs_end_to_end_and_reproduces() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        ok(run("gen-data", dir, &[]));
        ok(run("train-prior", dir, &[]));
        ok(run("pretrain-pamri", dir, &[]));
        ok(run("reconstruct", dir, &["--ablate", "no-pamri+no-noiseopt,no-dc"]));
        ok(run("evaluate", dir, &[]));
    }
    for arm in ["full", "no-pamri+no-noiseopt", "no-dc"] {
        let recon = a.path().join("recon").join(arm);
        for id in 0..3 {
            let img = format!("{id:04}.img");
            assert_eq!(
                fs::read(recon.join(&img)).unwrap(),
                fs::read(b.path().join("recon").join(arm).join(&img)).unwrap(),
                "{arm}/{img}"
            );
            assert!(recon.join(format!("{id:04}.pgm")).exists());
            let diag = fs::read_to_string(recon.join(format!("{id:04}_diag.csv"))).unwrap();
            assert_eq!(diag.lines().count(), 1 + 10, "{arm}");
        }
        let seeds = fs::read_to_string(recon.join("seeds.csv")).unwrap();
        assert_eq!(seeds.lines().count(), 4);
        let per = fs::read_to_string(a.path().join("metrics").join(format!("{arm}.csv"))).unwrap();
        assert_eq!(per.lines().count(), 4, "{per}");
        let agg = fs::read_to_string(a.path().join("metrics").join(format!("{arm}_aggregate.csv"))).unwrap();
        assert!(agg.starts_with("metric,mean,std,n\n"));
        assert!(agg.lines().any(|l| l.starts_with("ssim,")));
    }
    // The base arm runs one seed; the full arm ranks two.
    let full = fs::read_to_string(a.path().join("recon/full/seeds.csv")).unwrap();
    assert_eq!(full.lines().nth(1).unwrap().split(',').nth(2).unwrap().split(';').count(), 2);
    // Rerunning without --force refuses; --limit with --force rewrites a prefix.
    assert_eq!(code(&run("reconstruct", a.path(), &[])), 1);
    ok(run("reconstruct", a.path(), &["--limit", "1", "--force"]));
}

#[test]
fn verify_oracle_passes() {
    let o = ok(mpflow(&["verify-oracle", "--seed", "3"]));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().count() >= 7, "{out}");
    assert!(out.lines().all(|l| l.starts_with("PASS ")), "{out}");
}
