#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

/// What the stub returns for one request.
pub enum Reply {
    Content(String),
    Status(u16),
}

/// Minimal chat-completions server. `respond` sees each request body and
/// picks the reply; bodies are recorded in order.
pub struct StubServer {
    pub base_url: String,
    pub requests: Arc<Mutex<Vec<serde_json::Value>>>,
}

impl StubServer {
    pub fn start<F>(respond: F) -> StubServer
    where
        F: Fn(usize, &serde_json::Value) -> Reply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        let respond = Arc::new(respond);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let log = log.clone();
                let respond = respond.clone();
                thread::spawn(move || {
                    let _ = serve(stream, &log, &*respond);
                });
            }
        });
        StubServer { base_url: format!("http://{addr}/v1"), requests }
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

fn serve(
    stream: TcpStream,
    log: &Mutex<Vec<serde_json::Value>>,
    respond: &(dyn Fn(usize, &serde_json::Value) -> Reply + Send + Sync),
) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut out = stream;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let mut len = 0;
        loop {
            let mut h = String::new();
            reader.read_line(&mut h)?;
            let h = h.trim_end();
            if h.is_empty() {
                break;
            }
            if let Some((k, v)) = h.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body)?;
        let json: serde_json::Value = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
        let index = {
            let mut l = log.lock().unwrap();
            l.push(json.clone());
            l.len() - 1
        };
        let (status, payload) = match respond(index, &json) {
            Reply::Content(c) => (
                200,
                serde_json::json!({
                    "choices": [{"message": {"role": "assistant", "content": c}}],
                    "usage": {"prompt_tokens": 10, "completion_tokens": 2, "total_tokens": 12}
                })
                .to_string(),
            ),
            Reply::Status(s) => (s, "{\"error\":\"stub\"}".to_string()),
        };
        write!(
            out,
            "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{payload}",
            payload.len()
        )?;
        out.flush()?;
    }
}

pub mod oracle;
