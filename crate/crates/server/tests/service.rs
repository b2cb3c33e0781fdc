use std::sync::Arc;

use fusebed::data::{generate_synthetic, Dataset, Item, MetadataKind, SynthConfig};
use fusebed::eval::{build_index, rank_items};
use fusebed::model::{FusionMode, HybridModel, ModelConfig};
use fusebed::tensor::Module;
use fusebed::train::{build_vocabulary, save_checkpoint, OptimizerState, TrainConfig};
use fusebed_server::{serve, HealthResponse, RankResponse, ServiceState};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::oneshot;

fn dataset(n: usize) -> Dataset {
    generate_synthetic(&SynthConfig {
        n_items: n,
        test_items: n / 2,
        frame_width: 4,
        min_frames: 2,
        max_frames: 5,
        seed: 13,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn model(mode: FusionMode, ds: &Dataset) -> HybridModel {
    let cfg = ModelConfig {
        mode,
        width: 8,
        heads: 2,
        text_depth: 1,
        audio_depth: 1,
        fusion_depth: 1,
        ff_mult: 2,
        frame_width: 4,
        ..ModelConfig::default()
    };
    let items: Vec<&Item> = ds.items().iter().collect();
    HybridModel::new(cfg, build_vocabulary(&items, mode), 2).unwrap()
}

fn state(mode: FusionMode, ds: &Dataset) -> Arc<ServiceState> {
    let m = model(mode, ds);
    let items: Vec<&Item> = ds.items().iter().collect();
    let index = build_index(&items, &m, MetadataKind::Cs).unwrap();
    Arc::new(ServiceState::new(m, index, 8).unwrap())
}

struct Running {
    addr: std::net::SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Running {
    async fn start(state: Arc<ServiceState>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = oneshot::channel();
        let task = tokio::spawn(serve(listener, state, async {
            let _ = rx.await;
        }));
        Self {
            addr,
            stop: Some(tx),
            task,
        }
    }

    async fn stop(mut self) {
        self.stop.take().unwrap().send(()).unwrap();
        self.task.await.unwrap().unwrap();
    }
}

/// Sends one HTTP/1.1 request over a fresh connection; returns status and body.
async fn request(addr: std::net::SocketAddr, method: &str, path: &str, body: &str) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).await.unwrap();
    let head = format!(
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    stream.write_all(head.as_bytes()).await.unwrap();
    stream.write_all(body.as_bytes()).await.unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).await.unwrap();
    let text = String::from_utf8(raw).unwrap();
    let (head, body) = text.split_once("\r\n\r\n").unwrap();
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    (status, body.to_string())
}

fn rank_body(query: &str, k: i64) -> String {
    serde_json::json!({ "query": query, "k": k }).to_string()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn health_reports_item_count() {
    let ds = dataset(100);
    let server = Running::start(state(FusionMode::Late, &ds)).await;
    let (status, body) = request(server.addr, "GET", "/health", "").await;
    assert_eq!(status, 200);
    let h: HealthResponse = serde_json::from_str(&body).unwrap();
    assert_eq!(h, HealthResponse { status: "ok".into(), items: 100 });
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn rank_matches_in_process_ranking() {
    let ds = dataset(40);
    for mode in FusionMode::ALL {
        let st = state(mode, &ds);
        let server = Running::start(Arc::clone(&st)).await;
        for (q, k) in [("t1k2 n3", 5), ("", 3), ("t0k0 t0k1 t0k2", 40), ("unknown words", 100)] {
            let (status, body) = request(server.addr, "POST", "/rank", &rank_body(q, k)).await;
            assert_eq!(status, 200, "{body}");
            let got: RankResponse = serde_json::from_str(&body).unwrap();
            let want = rank_items(st.index(), q, st.model(), k as usize).unwrap();
            assert_eq!(got.results, want, "{mode} {q:?}");
        }
        let (_, body) = request(server.addr, "POST", "/rank", &rank_body("t2k4", 1)).await;
        assert_eq!(serde_json::from_str::<RankResponse>(&body).unwrap().results.len(), 1);
        server.stop().await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn bad_requests_get_400() {
    let ds = dataset(20);
    let server = Running::start(state(FusionMode::Content, &ds)).await;
    for body in [
        rank_body("x", 0),
        rank_body("x", -3),
        "{not json".to_string(),
        r#"{"query": "x"}"#.to_string(),
        r#"{"query": 5, "k": 2}"#.to_string(),
        r#"{"query": "x", "k": 2.5}"#.to_string(),
    ] {
        let (status, text) = request(server.addr, "POST", "/rank", &body).await;
        assert_eq!(status, 400, "{body}");
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["error"].is_string(), "{text}");
    }
    server.stop().await;
}

fn fingerprint(st: &ServiceState) -> Vec<u64> {
    let mut bits = Vec::new();
    st.model().visit_params(&mut |p| bits.extend(p.value.data().iter().map(|v| v.to_bits())));
    bits
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_clients_see_the_serial_answer() {
    let ds = dataset(60);
    let st = state(FusionMode::Mid, &ds);
    let before = (fingerprint(&st), st.index().entries().to_vec());
    let server = Running::start(Arc::clone(&st)).await;
    let body = rank_body("t3k1 t3k4 n9", 10);
    let (_, serial) = request(server.addr, "POST", "/rank", &body).await;
    let clients: Vec<_> = (0..32)
        .map(|_| {
            let body = body.clone();
            let addr = server.addr;
            tokio::spawn(async move { request(addr, "POST", "/rank", &body).await })
        })
        .collect();
    for c in clients {
        let (status, text) = c.await.unwrap();
        assert_eq!(status, 200);
        assert_eq!(text, serial);
    }
    assert_eq!(st.requests_served(), 33);
    server.stop().await;
    assert!(before == (fingerprint(&st), st.index().entries().to_vec()));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn state_loads_from_files() {
    let ds = dataset(30);
    let m = model(FusionMode::Late, &ds);
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("model.ckpt");
    save_checkpoint(&ck, &m, &OptimizerState::new(&m), &TrainConfig::default(), 0).unwrap();
    ds.save(&dir.path().join("data")).unwrap();
    let st = ServiceState::from_files(&ck, &dir.path().join("data"), None, None, 8).unwrap();
    assert_eq!(st.index().len(), 30);
    let wrong = ServiceState::from_files(&ck, &dir.path().join("data"), Some(FusionMode::Mid), None, 8);
    assert!(wrong.is_err());
}
