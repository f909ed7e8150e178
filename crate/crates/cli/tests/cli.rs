use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedcache(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedcache"))
        .args(args)
        .env("FEDCACHE_OUT", out)
        .output()
        .expect("spawn fedcache")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn summaries(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut found = Vec::new();
    for cell in fs::read_dir(dir).unwrap() {
        for f in fs::read_dir(cell.unwrap().path()).unwrap() {
            let p = f.unwrap().path();
            if p.to_string_lossy().ends_with("_summary.json") {
                found.push(p);
            }
        }
    }
    found.sort();
    found
}

#[test]
fn missing_config_names_path() {
    let out = tempfile::tempdir().unwrap();
    let o = fedcache(&["run", "/no/such/experiment.cfg"], out.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/experiment.cfg"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_named() {
    let out = tempfile::tempdir().unwrap();
    let o = fedcache(&["run", "--set", "tua=0.3"], out.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tua"), "{}", stderr(&o));
}

#[test]
fn out_of_range_is_config_error() {
    let out = tempfile::tempdir().unwrap();
    let o = fedcache(&["run", "--set", "tau=1.5"], out.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tau"), "{}", stderr(&o));
}

#[test]
fn override_reaches_echo() {
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("small.cfg");
    fs::write(
        &cfg,
        "# quick run\nname = quick\nalgorithms = fedcache2\nrounds = 1\nper_class = 30\nclients = 4\n",
    )
    .unwrap();
    let o = fedcache(&["run", cfg.to_str().unwrap(), "--set", "tau=0.3"], out.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let files = summaries(&out.path().join("quick"));
    assert_eq!(files.len(), 1);
    let text = fs::read_to_string(&files[0]).unwrap();
    assert!(text.contains(r#""tau": "0.3""#), "{text}");
    assert!(text.contains(r#""rounds": "1""#), "{text}");
}

#[test]
fn tau_sweep_one_summary_per_tau() {
    let out = tempfile::tempdir().unwrap();
    let o = fedcache(
        &["run", "--preset", "tau-sweep", "--set", "rounds=1", "--set", "per_class=30"],
        out.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let files = summaries(&out.path().join("tau-sweep"));
    assert_eq!(files.len(), 5);
    let mut taus: Vec<String> = files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f).unwrap();
            let at = text.find(r#""tau": ""#).unwrap() + 8;
            text[at..].split('"').next().unwrap().to_string()
        })
        .collect();
    taus.sort();
    assert_eq!(taus, ["0", "0.3", "0.5", "0.7", "1"]);
    assert!(out.path().join("tau-sweep/tau=0.3_seed0/ua_vs_bytes.svg").exists());
}

#[test]
fn list_presets_shows_all() {
    let out = tempfile::tempdir().unwrap();
    let o = fedcache(&["list-presets"], out.path());
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for name in ["desk-default", "desk-hetero", "alpha-sweep", "tau-sweep", "model-hetero", "availability"] {
        assert!(text.contains(&format!("[{name}]")), "{name}");
    }
}
