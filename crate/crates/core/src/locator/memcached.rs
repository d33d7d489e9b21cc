use std::fmt;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufStream};
use tokio::net::TcpStream;

use super::cache::{L2Cache, L2Error};

const OP_TIMEOUT: Duration = Duration::from_millis(500);
const MAX_IDLE: usize = 16;
/// memcached reads larger exptime values as absolute Unix times.
const MAX_RELATIVE_EXPTIME: u64 = 60 * 60 * 24 * 30;

type Conn = BufStream<TcpStream>;

/// memcached text-protocol client (get/set/delete, flags 0). Connections
/// are pooled; a connection that saw any error is discarded.
pub struct MemcachedL2 {
    addr: String,
    idle: Mutex<Vec<Conn>>,
}

impl fmt::Debug for MemcachedL2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemcachedL2").field("addr", &self.addr).finish()
    }
}

impl MemcachedL2 {
    /// `addr` is `host:port`. No connection is made until first use.
    pub fn new(addr: impl Into<String>) -> Self {
        MemcachedL2 {
            addr: addr.into(),
            idle: Mutex::new(Vec::new()),
        }
    }

    async fn roundtrip(&self, cmd: &[u8], expect: Expect<'_>) -> Result<Option<Vec<u8>>, L2Error> {
        let pooled = self.idle.lock().unwrap().pop();
        let work = async {
            let mut conn = match pooled {
                Some(c) => c,
                None => BufStream::new(TcpStream::connect(&self.addr).await?),
            };
            conn.write_all(cmd).await?;
            conn.flush().await?;
            let out = read_reply(&mut conn, expect).await?;
            Ok::<_, L2Error>((out, conn))
        };
        let (out, conn) = tokio::time::timeout(OP_TIMEOUT, work)
            .await
            .map_err(|_| L2Error::Timeout)??;
        let mut idle = self.idle.lock().unwrap();
        if idle.len() < MAX_IDLE {
            idle.push(conn);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy)]
enum Expect<'a> {
    Value(&'a str),
    Stored,
    Deleted,
}

async fn read_line(conn: &mut Conn) -> Result<String, L2Error> {
    let mut line = String::new();
    if conn.read_line(&mut line).await? == 0 {
        return Err(L2Error::Protocol("connection closed".into()));
    }
    Ok(line.trim_end_matches(['\r', '\n']).to_string())
}

async fn read_reply(conn: &mut Conn, expect: Expect<'_>) -> Result<Option<Vec<u8>>, L2Error> {
    let key = match expect {
        Expect::Value(key) => key,
        Expect::Stored => {
            return match read_line(conn).await?.as_str() {
                "STORED" => Ok(None),
                other => Err(L2Error::Protocol(format!("set answered {other:?}"))),
            };
        }
        Expect::Deleted => {
            return match read_line(conn).await?.as_str() {
                "DELETED" | "NOT_FOUND" => Ok(None),
                other => Err(L2Error::Protocol(format!("delete answered {other:?}"))),
            };
        }
    };
    let mut value = None;
    loop {
        let line = read_line(conn).await?;
        if line == "END" {
            return Ok(value);
        }
        let parts: Vec<&str> = line.split(' ').collect();
        let ["VALUE", k, _flags, len] = parts.as_slice() else {
            return Err(L2Error::Protocol(format!("unexpected reply {line:?}")));
        };
        let len: usize = len
            .parse()
            .map_err(|_| L2Error::Protocol(format!("bad length in {line:?}")))?;
        let mut data = vec![0u8; len + 2];
        conn.read_exact(&mut data).await?;
        if !data.ends_with(b"\r\n") {
            return Err(L2Error::Protocol("value not CRLF terminated".into()));
        }
        data.truncate(len);
        if *k == key {
            value = Some(data);
        }
    }
}

fn check_key(key: &str) -> Result<(), L2Error> {
    if key.is_empty() || key.len() > 250 || key.bytes().any(|b| b <= b' ' || b == 0x7f) {
        return Err(L2Error::Protocol(format!("invalid key {key:?}")));
    }
    Ok(())
}

#[async_trait]
impl L2Cache for MemcachedL2 {
    async fn get(&self, key: &str) -> Result<Option<Vec<u8>>, L2Error> {
        check_key(key)?;
        self.roundtrip(format!("get {key}\r\n").as_bytes(), Expect::Value(key))
            .await
    }

    async fn set(&self, key: &str, value: &[u8], ttl: Duration) -> Result<(), L2Error> {
        check_key(key)?;
        let secs = ttl.as_secs() + u64::from(ttl.subsec_nanos() > 0);
        let secs = secs.clamp(1, MAX_RELATIVE_EXPTIME);
        let mut cmd = format!("set {key} 0 {secs} {}\r\n", value.len()).into_bytes();
        cmd.extend_from_slice(value);
        cmd.extend_from_slice(b"\r\n");
        self.roundtrip(&cmd, Expect::Stored).await.map(|_| ())
    }

    async fn delete(&self, key: &str) -> Result<(), L2Error> {
        check_key(key)?;
        self.roundtrip(format!("delete {key}\r\n").as_bytes(), Expect::Deleted)
            .await
            .map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::memcached::SimMemcached;

    #[tokio::test]
    async fn talks_to_the_simulated_server() {
        let server = SimMemcached::start().await.unwrap();
        let client = MemcachedL2::new(server.addr().to_string());
        let payload: Vec<u8> = (0..=255u8).chain(b"\r\nEND\r\n".iter().copied()).collect();
        assert_eq!(client.get("loc:abc").await.unwrap(), None);
        client
            .set("loc:abc", &payload, Duration::from_millis(1500))
            .await
            .unwrap();
        assert_eq!(client.get("loc:abc").await.unwrap(), Some(payload));
        client.delete("loc:abc").await.unwrap();
        client.delete("loc:abc").await.unwrap();
        assert_eq!(client.get("loc:abc").await.unwrap(), None);
        assert!(client.get("bad key").await.is_err());
    }

    #[tokio::test]
    async fn unreachable_server_is_an_error_not_a_hang() {
        let server = SimMemcached::start().await.unwrap();
        let addr = server.addr().to_string();
        server.stop().await;
        drop(server);
        let client = MemcachedL2::new(addr);
        let started = std::time::Instant::now();
        assert!(client.get("k").await.is_err());
        assert!(started.elapsed() < Duration::from_secs(2));
    }
}
