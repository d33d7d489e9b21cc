use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::time::{Duration, Instant};

use fedgate::sim::SimEndpoint;
use tokio::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fedgate"));
    c.env_remove("FEDGATE_CONFIG")
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    c
}

fn write_config(dir: &Path, listen: &str, base_url: &str) -> PathBuf {
    std::fs::write(dir.join("geo.csv"), "10.1.0.0/16,46.2,6.05\n10.2.0.0/16,49.2,-123.2\n").unwrap();
    let text = format!(
        r#"
[federation]
listen_address = "{listen}"
fanout_timeout = "1s"
health_poll_interval = "200ms"

[geo]
db_path = "geo.csv"

[[endpoints]]
id = "near"
kind = "webdav"
base_url = "{base_url}"
location = {{ lat = 46.2, lon = 6.0 }}

[[endpoints]]
id = "far"
kind = "webdav"
base_url = "{base_url}far/"
location = {{ lat = 49.2, lon = -123.2 }}
"#
    );
    let path = dir.join("fedgate.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

#[tokio::test]
async fn check_accepts_a_valid_file_and_rejects_a_broken_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "127.0.0.1:0", "http://127.0.0.1:1/");
    let out = bin().arg("check").arg("--config").arg(&cfg).output().await.unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ok (2 endpoints)"));

    let out = bin().arg("--check").env("FEDGATE_CONFIG", &cfg).output().await.unwrap();
    assert!(out.status.success());

    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        "[[endpoints]]\nid = \"x\"\nkind = \"s3\"\nbase_url = \"http://h/\"\nlocation = { lat = 0, lon = 0 }\n",
    )
    .unwrap();
    let out = bin().arg("check").arg("--config").arg(&bad).output().await.unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("s3_"));

    let out = bin().arg("check").output().await.unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[tokio::test]
async fn serve_stops_cleanly_on_sigterm() {
    let dir = tempfile::tempdir().unwrap();
    let port = free_port();
    let cfg = write_config(dir.path(), &format!("127.0.0.1:{port}"), "http://127.0.0.1:1/");
    let mut child = bin().arg("serve").arg("--config").arg(&cfg).spawn().unwrap();
    let start = Instant::now();
    let url = format!("http://127.0.0.1:{port}/.well-known/fedgate/healthz");
    loop {
        if let Ok(r) = reqwest::get(&url).await {
            assert_eq!(r.status(), 200);
            break;
        }
        assert!(start.elapsed() < Duration::from_secs(10), "gateway never came up");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let pid = child.id().unwrap() as libc::pid_t;
    // SAFETY: plain signal delivery to our own child process.
    assert_eq!(unsafe { libc::kill(pid, libc::SIGTERM) }, 0);
    let status = tokio::time::timeout(Duration::from_secs(5), child.wait())
        .await
        .unwrap()
        .unwrap();
    assert_eq!(status.code(), Some(0));
}

#[tokio::test]
async fn serve_fails_when_the_port_is_taken() {
    let dir = tempfile::tempdir().unwrap();
    let holder = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = holder.local_addr().unwrap();
    let cfg = write_config(dir.path(), &addr.to_string(), "http://127.0.0.1:1/");
    let out = tokio::time::timeout(
        Duration::from_secs(10),
        bin().arg("serve").arg("--config").arg(&cfg).output(),
    )
    .await
    .unwrap()
    .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot bind"));
}

#[tokio::test]
async fn resolve_prints_replicas_nearest_first() {
    let sim = SimEndpoint::start_webdav().await.unwrap();
    sim.store().put("/data/f", &b"12345"[..]);
    sim.store().put("/far/data/f", &b"12345"[..]);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "127.0.0.1:0", sim.base_url().as_str());

    let run = |ip: &'static str| {
        let mut c = bin();
        c.args(["resolve", "/data/f", "--client-ip", ip])
            .arg("--config")
            .arg(&cfg);
        c
    };
    let out = run("10.2.3.4").output().await.unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        String::from_utf8_lossy(&out.stdout),
        "far\t/data/f\t5\nnear\t/data/f\t5\n"
    );
    let out = run("10.1.3.4").output().await.unwrap();
    assert_eq!(
        String::from_utf8_lossy(&out.stdout),
        "near\t/data/f\t5\nfar\t/data/f\t5\n"
    );

    let out = bin()
        .args(["resolve", "/data/none"])
        .arg("--config")
        .arg(&cfg)
        .output()
        .await
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
    let out = bin()
        .args(["resolve", "/../x"])
        .arg("--config")
        .arg(&cfg)
        .output()
        .await
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
