//! End-to-end tests of the `ovk` binary: multi-process seed negotiation
//! over a directory channel, the HTTP service, and scenario/race
//! subcommands with their exit codes.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ovk"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ovk-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(command: &mut Command) -> String {
    let output = command.output().unwrap();
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
    String::from_utf8(output.stdout).unwrap()
}

fn create_fleet(dir: &Path, models: &[&str]) -> Vec<PathBuf> {
    run_ok(bin().args([
        "manufacturer",
        "create",
        "--id",
        "acme",
        "--out",
        dir.join("mf.json").to_str().unwrap(),
    ]));
    models
        .iter()
        .map(|model| {
            let path = dir.join(format!("device-{model}.json"));
            run_ok(bin().args([
                "device",
                "create",
                "--manufacturer",
                dir.join("mf.json").to_str().unwrap(),
                "--model",
                model,
                "--out",
                path.to_str().unwrap(),
            ]));
            path
        })
        .collect()
}

fn negotiate(dir: &Path, devices: &[PathBuf], epoch: u64) -> Vec<String> {
    let channel = dir.join(format!("channel-{epoch}"));
    let children: Vec<Child> = devices
        .iter()
        .enumerate()
        .map(|(id, device)| {
            bin()
                .args([
                    "device",
                    "negotiate",
                    "--device",
                    device.to_str().unwrap(),
                    "--channel",
                    channel.to_str().unwrap(),
                    "--id",
                    &id.to_string(),
                    "--parties",
                    &devices.len().to_string(),
                    "--password",
                    "orchard twelve lanterns",
                    "--epoch",
                    &epoch.to_string(),
                    "--iterations",
                    "1000",
                ])
                .stdout(Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect();

    children
        .into_iter()
        .map(|child| {
            let output = child.wait_with_output().unwrap();
            assert!(output.status.success(), "negotiate failed: {output:?}");
            String::from_utf8(output.stdout).unwrap()
        })
        .collect()
}

fn extract_fingerprint(stdout: &str) -> String {
    stdout
        .split_whitespace()
        .find_map(|token| token.strip_prefix("fingerprint="))
        .expect("fingerprint in output")
        .to_string()
}

#[test]
fn three_processes_negotiate_identical_seeds() {
    let dir = workdir("negotiate");
    let devices = create_fleet(&dir, &["phone", "laptop", "tablet"]);
    let outputs = negotiate(&dir, &devices, 1);
    let fingerprints: Vec<String> =
        outputs.iter().map(|out| extract_fingerprint(out)).collect();
    assert_eq!(fingerprints[0], fingerprints[1]);
    assert_eq!(fingerprints[1], fingerprints[2]);
    let _ = std::fs::remove_dir_all(&dir);
}

struct Server {
    child: Child,
    url: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(dir: &Path, origin: &str, policy: &Path) -> Server {
    let config = dir.join("svc.json");
    run_ok(bin().args([
        "service",
        "init",
        "--origin",
        origin,
        "--policy",
        policy.to_str().unwrap(),
        "--store",
        dir.join("store.json").to_str().unwrap(),
        "--out",
        config.to_str().unwrap(),
    ]));
    let mut child = bin()
        .args(["service", "serve", "--config", config.to_str().unwrap(), "--port", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let mut lines = BufReader::new(stdout).lines();
    let first = lines.next().unwrap().unwrap();
    let addr = first.strip_prefix("listening on ").expect("listen line").to_string();
    Server { child, url: format!("http://{addr}") }
}

#[test]
fn http_service_register_login_and_seamless_enroll() {
    let dir = workdir("serve");
    let devices = create_fleet(&dir, &["phone", "laptop"]);
    negotiate(&dir, &devices, 1);

    let policy = dir.join("policy.json");
    run_ok(bin().args([
        "policy",
        "create",
        "--manufacturer",
        dir.join("mf.json").to_str().unwrap(),
        "--models",
        "phone,laptop",
        "--out",
        policy.to_str().unwrap(),
    ]));

    let origin = "https://cli-demo.example";
    let server = serve(&dir, origin, &policy);

    let target = |device: &PathBuf| {
        vec![
            "--device".to_string(),
            device.to_str().unwrap().to_string(),
            "--url".to_string(),
            server.url.clone(),
            "--origin".to_string(),
            origin.to_string(),
            "--user".to_string(),
            "alice".to_string(),
        ]
    };

    let out = run_ok(bin().args(["device", "register"]).args(target(&devices[0])));
    assert!(out.contains("registered: credential=cred-1"), "{out}");

    // Never-enrolled sibling: login performs seamless enrollment.
    let out = run_ok(bin().args(["device", "login"]).args(target(&devices[1])));
    assert!(out.contains("seamless enrollment performed"), "{out}");

    // Both sign in normally afterwards.
    for device in &devices {
        let out = run_ok(bin().args(["device", "login"]).args(target(device)));
        assert!(out.contains("signed in"), "{out}");
    }

    // The state store persisted across requests.
    assert!(dir.join("store.json").exists());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn wrong_origin_is_refused_client_side() {
    let dir = workdir("homograph");
    let devices = create_fleet(&dir, &["phone", "laptop"]);
    negotiate(&dir, &devices, 1);
    let policy = dir.join("policy.json");
    run_ok(bin().args([
        "policy",
        "create",
        "--manufacturer",
        dir.join("mf.json").to_str().unwrap(),
        "--models",
        "phone,laptop",
        "--out",
        policy.to_str().unwrap(),
    ]));
    let origin = "https://real.example";
    let server = serve(&dir, origin, &policy);

    let register = bin()
        .args(["device", "register"])
        .args([
            "--device",
            devices[0].to_str().unwrap(),
            "--url",
            &server.url,
            "--origin",
            origin,
            "--user",
            "alice",
        ])
        .output()
        .unwrap();
    assert!(register.status.success());

    // The sibling is lured to the same backend under a different claimed
    // origin; the enrollment aborts client-side with WrongService.
    let output = bin()
        .args(["device", "login"])
        .args([
            "--device",
            devices[1].to_str().unwrap(),
            "--url",
            &server.url,
            "--origin",
            "https://evil.example",
            "--user",
            "alice",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.starts_with("WrongService"), "{stderr}");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn scenario_subcommand_exit_codes() {
    let scenario = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/device_lifecycle.json");
    let out = run_ok(bin().args(["scenario", "run", scenario.to_str().unwrap()]));
    assert!(out.contains(r#""failed":0"#));

    // A failing expectation exits 1 and names the step.
    let dir = workdir("scenario");
    let failing = dir.join("failing.json");
    std::fs::write(
        &failing,
        r#"{
          "name": "failing",
          "devices": [{"name": "A"}, {"name": "B"}],
          "services": [{"name": "svc", "origin": "https://s.example"}],
          "script": [
            {"action": "share_seed", "devices": ["A", "B"], "password": "pw"},
            {"action": "register", "device": "A", "service": "svc", "username": "u"},
            {"action": "expect", "check": {"what": "active_credentials", "service": "svc", "username": "u", "count": 5}}
          ]
        }"#,
    )
    .unwrap();
    let output = bin().args(["scenario", "run", failing.to_str().unwrap()]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("AssertionFailed"));

    // Unparseable scenario also fails crisply.
    let output = bin().args(["scenario", "run", "/nonexistent.json"]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));

    // Usage errors exit 2.
    let output = bin().args(["scenario"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn race_subcommand_reports_winner() {
    let out = run_ok(bin().args([
        "race", "run", "--n", "3", "--nu", "2", "--na", "1", "--attacker-first",
    ]));
    assert!(out.contains("winner: user"), "{out}");

    let out = run_ok(bin().args(["race", "run", "--n", "2", "--nu", "1", "--na", "1", "--attacker-first"]));
    assert!(out.contains("winner: attacker"), "{out}");
}
