//! Minimal memcached text-protocol server (get/set/delete/flush_all/version)
//! for exercising the shared L2 cache over a real socket.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio::task::JoinHandle;

#[derive(Debug, Default)]
pub struct MemcachedCounters {
    pub gets: AtomicU64,
    pub hits: AtomicU64,
    pub sets: AtomicU64,
    pub deletes: AtomicU64,
}

type Table = Mutex<HashMap<String, (Vec<u8>, u32, Option<Instant>)>>;

pub struct SimMemcached {
    addr: SocketAddr,
    table: Arc<Table>,
    counters: Arc<MemcachedCounters>,
    stop: watch::Sender<bool>,
    task: Mutex<Option<JoinHandle<()>>>,
}

impl SimMemcached {
    pub async fn start() -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let table: Arc<Table> = Default::default();
        let counters: Arc<MemcachedCounters> = Default::default();
        let (stop, stop_rx) = watch::channel(false);
        let (t, c) = (table.clone(), counters.clone());
        let task = tokio::spawn(async move {
            let mut conns = tokio::task::JoinSet::new();
            let mut stop = stop_rx.clone();
            loop {
                tokio::select! {
                    accepted = listener.accept() => {
                        let Ok((stream, _)) = accepted else { continue };
                        let (t, c, s) = (t.clone(), c.clone(), stop_rx.clone());
                        conns.spawn(serve_conn(stream, t, c, s));
                    }
                    _ = stop.wait_for(|s| *s) => break,
                }
            }
            conns.abort_all();
            while conns.join_next().await.is_some() {}
        });
        Ok(SimMemcached {
            addr,
            table,
            counters,
            stop,
            task: Mutex::new(Some(task)),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn counters(&self) -> &MemcachedCounters {
        &self.counters
    }

    pub fn len(&self) -> usize {
        self.table.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub async fn stop(&self) {
        let _ = self.stop.send(true);
        let task = self.task.lock().unwrap().take();
        if let Some(t) = task {
            let _ = t.await;
        }
    }
}

impl Drop for SimMemcached {
    fn drop(&mut self) {
        let _ = self.stop.send(true);
        if let Some(t) = self.task.get_mut().unwrap().take() {
            t.abort();
        }
    }
}

async fn serve_conn(
    stream: TcpStream,
    table: Arc<Table>,
    counters: Arc<MemcachedCounters>,
    mut stop: watch::Receiver<bool>,
) {
    let (read, mut write) = stream.into_split();
    let mut reader = BufReader::new(read);
    let mut line = String::new();
    loop {
        line.clear();
        let n = tokio::select! {
            n = reader.read_line(&mut line) => n,
            _ = stop.wait_for(|s| *s) => return,
        };
        match n {
            Ok(0) | Err(_) => return,
            Ok(_) => {}
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let reply = match parts.as_slice() {
            ["get", keys @ ..] | ["gets", keys @ ..] if !keys.is_empty() => {
                let mut out = Vec::new();
                let mut t = table.lock().unwrap();
                for key in keys {
                    counters.gets.fetch_add(1, Ordering::Relaxed);
                    let expired = matches!(t.get(*key), Some((_, _, Some(exp))) if *exp <= Instant::now());
                    if expired {
                        t.remove(*key);
                    }
                    if let Some((data, flags, _)) = t.get(*key) {
                        counters.hits.fetch_add(1, Ordering::Relaxed);
                        out.extend_from_slice(format!("VALUE {key} {flags} {}\r\n", data.len()).as_bytes());
                        out.extend_from_slice(data);
                        out.extend_from_slice(b"\r\n");
                    }
                }
                out.extend_from_slice(b"END\r\n");
                out
            }
            ["set", key, flags, exptime, bytes, rest @ ..] => {
                let (Ok(flags), Ok(exptime), Ok(bytes)) =
                    (flags.parse::<u32>(), exptime.parse::<u64>(), bytes.parse::<usize>())
                else {
                    let _ = write.write_all(b"CLIENT_ERROR bad command line format\r\n").await;
                    return;
                };
                let mut data = vec![0u8; bytes + 2];
                if reader.read_exact(&mut data).await.is_err() || !data.ends_with(b"\r\n") {
                    let _ = write.write_all(b"CLIENT_ERROR bad data chunk\r\n").await;
                    return;
                }
                data.truncate(bytes);
                counters.sets.fetch_add(1, Ordering::Relaxed);
                let expiry = (exptime > 0).then(|| Instant::now() + Duration::from_secs(exptime));
                table.lock().unwrap().insert(key.to_string(), (data, flags, expiry));
                if rest.first() == Some(&"noreply") {
                    continue;
                }
                b"STORED\r\n".to_vec()
            }
            ["delete", key, rest @ ..] => {
                counters.deletes.fetch_add(1, Ordering::Relaxed);
                let existed = table.lock().unwrap().remove(*key).is_some();
                if rest.first() == Some(&"noreply") {
                    continue;
                }
                if existed {
                    b"DELETED\r\n".to_vec()
                } else {
                    b"NOT_FOUND\r\n".to_vec()
                }
            }
            ["flush_all", ..] => {
                table.lock().unwrap().clear();
                b"OK\r\n".to_vec()
            }
            ["version"] => b"VERSION 1.6.0-fedgate-sim\r\n".to_vec(),
            _ => b"ERROR\r\n".to_vec(),
        };
        if write.write_all(&reply).await.is_err() {
            return;
        }
    }
}
