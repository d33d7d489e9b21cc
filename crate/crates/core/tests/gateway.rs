use fedgate::harness::{launch, ScenarioSpec};
use http::{Method, StatusCode};

const FILE: &str = "/atlas/data18/AOD.root";

fn scenario() -> ScenarioSpec {
    ScenarioSpec::three_sites().with_object_everywhere(FILE, b"0123456789")
}

#[tokio::test]
async fn get_redirects_to_the_nearest_replica() {
    let fed = launch(scenario()).await.unwrap();
    for (client, want) in [("geneva", "cern"), ("vancouver", "triumf"), ("victoria", "uvic")] {
        let r = fed.request(fed.client(client), Method::GET, FILE).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::FOUND, "{client}");
        let loc = url::Url::parse(r.headers()["location"].to_str().unwrap()).unwrap();
        assert_eq!(fed.endpoint_for_url(&loc), Some(want), "{client}");
        // The Location works without any credential.
        let got = fed.http().get(loc).send().await.unwrap();
        assert_eq!(got.status(), StatusCode::OK);
        assert_eq!(got.bytes().await.unwrap().as_ref(), b"0123456789");
    }
    fed.teardown().await;
}

#[tokio::test]
async fn head_reports_size_and_absent_paths_are_404() {
    let fed = launch(scenario()).await.unwrap();
    let geneva = fed.client("geneva");
    let r = fed.request(geneva, Method::HEAD, FILE).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.headers()["content-length"], "10");
    let r = fed
        .request(geneva, Method::HEAD, "/atlas/missing")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    let r = fed.request(geneva, Method::GET, "/atlas/missing").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    let r = fed.request(geneva, Method::HEAD, "/atlas").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.headers()["content-type"], "httpd/unix-directory");
    fed.teardown().await;
}

#[tokio::test]
async fn identity_failures_stop_before_resolution() {
    let fed = launch(scenario()).await.unwrap();
    let before = fed.total_sim_queries();
    let r = fed
        .request(fed.client("anonymous"), Method::GET, FILE)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    let r = fed
        .request(fed.client("outsider"), Method::HEAD, FILE)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::FORBIDDEN);
    let r = fed
        .request(fed.client("geneva"), Method::PUT, "/atlas/x")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::FORBIDDEN);
    assert_eq!(fed.total_sim_queries(), before);
    fed.teardown().await;
}

#[tokio::test]
async fn propfind_lists_the_union() {
    let mut spec = ScenarioSpec::three_sites();
    spec.endpoint_mut("cern").objects.insert("/d/a".into(), b"1".to_vec());
    spec.endpoint_mut("triumf")
        .objects
        .insert("/d/b".into(), b"22".to_vec());
    spec.endpoint_mut("uvic").objects.insert("/d/a".into(), b"333".to_vec());
    spec.endpoint_mut("uvic")
        .objects
        .insert("/d/sub/c".into(), b"4".to_vec());
    let fed = launch(spec).await.unwrap();
    let r = fed
        .request(fed.client("geneva"), Method::from_bytes(b"PROPFIND").unwrap(), "/d")
        .header("Depth", "1")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::MULTI_STATUS);
    assert!(r.headers()["content-type"].to_str().unwrap().starts_with("text/xml"));
    let body = r.text().await.unwrap();
    for href in [
        "<D:href>/d/</D:href>",
        "<D:href>/d/a</D:href>",
        "<D:href>/d/b</D:href>",
        "<D:href>/d/sub/</D:href>",
    ] {
        assert!(body.contains(href), "{href} missing from {body}");
    }
    // First endpoint in id order wins the size conflict on "a".
    assert!(body.contains("<D:href>/d/a</D:href><D:propstat><D:prop><D:resourcetype/><D:getcontentlength>1<"));
    let r = fed
        .request(fed.client("geneva"), Method::from_bytes(b"PROPFIND").unwrap(), "/d")
        .header("Depth", "infinity")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::FORBIDDEN);
    let r = fed
        .request(
            fed.client("geneva"),
            Method::from_bytes(b"PROPFIND").unwrap(),
            "/nowhere",
        )
        .header("Depth", "0")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    fed.teardown().await;
}

#[tokio::test]
async fn write_then_read_back_through_the_gateway() {
    let fed = launch(ScenarioSpec::three_sites()).await.unwrap();
    let report = fed
        .run_script(
            "GET 192.0.2.10 /scratch/user/out.log => 404\n\
             PUT 192.0.2.10 /scratch/user/out.log => 307 @cern\n\
             GET 192.0.2.10 /scratch/user/out.log => 302 @cern\n\
             DELETE 192.0.2.10 /scratch/user/out.log => 307 @cern\n\
             GET 192.0.2.10 /scratch/user/out.log => 404\n",
        )
        .await
        .unwrap();
    assert!(report.passed(), "{report}");
    fed.teardown().await;
}

#[tokio::test]
async fn admin_resources() {
    let fed = launch(scenario()).await.unwrap();
    fed.wait_polls(1).await;
    let base = fed.base_url();
    let r = fed
        .http()
        .get(format!("{base}/.well-known/fedgate/healthz"))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let body = fed
        .http()
        .get(format!("{base}/.well-known/fedgate/status"))
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    let status: serde_json::Value = serde_json::from_str(&body).unwrap();
    let rows = status["endpoints"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r["status"] == "online"), "{status}");
    let _ = fed
        .request(fed.client("geneva"), Method::GET, FILE)
        .send()
        .await
        .unwrap();
    let m = fed.metrics().await;
    assert_eq!(m["fedgate_requests_total{method=\"GET\",status=\"302\"}"], 1);
    assert_eq!(m["fedgate_cache_misses_total"], 1);
    fed.teardown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn a_hung_endpoint_does_not_block_cached_reads() {
    let fed = std::sync::Arc::new(launch(scenario()).await.unwrap());
    let geneva = fed.client("geneva").clone();
    let r = fed.request(&geneva, Method::GET, FILE).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::FOUND);
    fed.set_latency("triumf", std::time::Duration::from_secs(10));
    let start = std::time::Instant::now();
    let tasks: Vec<_> = (0..100)
        .map(|_| {
            let fed = fed.clone();
            let c = geneva.clone();
            tokio::spawn(async move { fed.request(&c, Method::GET, FILE).send().await.unwrap().status() })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::FOUND);
    }
    let took = start.elapsed();
    assert!(took < std::time::Duration::from_secs(1), "{took:?}");
}
