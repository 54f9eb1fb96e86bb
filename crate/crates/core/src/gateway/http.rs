//! The `cache-http` transfer endpoint: `GET /t/<token>` downloads a staged
//! copy, `PUT /t/<token>` delivers an upload.

use super::Gateway;
use crate::error::{ErrorCode, GvfError};
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use tiny_http::{Header, Method, Response, Server};

pub struct HttpServer {
    server: Arc<Server>,
    addr: SocketAddr,
    thread: Option<JoinHandle<()>>,
}

fn status_for(code: ErrorCode) -> u16 {
    match code {
        ErrorCode::NoEnt => 404,
        ErrorCode::Perm => 403,
        ErrorCode::Exists => 409,
        ErrorCode::NoSpace => 507,
        ErrorCode::BadReq => 400,
        _ => 503,
    }
}

fn error_response(e: &GvfError) -> Response<std::io::Cursor<Vec<u8>>> {
    Response::from_string(format!("{}: {}\n", e.code.as_str(), e.message)).with_status_code(status_for(e.code))
}

fn json_header() -> Header {
    Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header")
}

fn serve(gw: &Gateway, mut req: tiny_http::Request) {
    let token = req.url().strip_prefix("/t/").map(str::to_string);
    let resp = match (req.method(), token) {
        (Method::Get, Some(t)) => match gw.download(&t) {
            Ok(data) => Response::from_data(data),
            Err(e) => error_response(&e),
        },
        (Method::Put, Some(t)) => {
            let mut body = Vec::new();
            match req.as_reader().read_to_end(&mut body) {
                Err(e) => error_response(&GvfError::badreq(format!("reading upload: {e}"))),
                Ok(_) => match gw.upload(&t, &body) {
                    Ok(r) if r.error.is_none() => Response::from_data(serde_json::to_vec(&r).unwrap_or_default())
                        .with_header(json_header()),
                    Ok(r) => {
                        let code = r.error.unwrap_or(ErrorCode::Unavail);
                        Response::from_data(serde_json::to_vec(&r).unwrap_or_default())
                            .with_header(json_header())
                            .with_status_code(status_for(code))
                    }
                    Err(e) => error_response(&e),
                },
            }
        }
        _ => Response::from_string("not found\n").with_status_code(404),
    };
    if let Err(e) = req.respond(resp) {
        log::debug!("cache-http response: {e}");
    }
}

impl HttpServer {
    pub fn bind(addr: &str, gw: Arc<Gateway>) -> std::io::Result<HttpServer> {
        HttpServer::from_listener(std::net::TcpListener::bind(addr)?, gw)
    }

    pub fn from_listener(listener: std::net::TcpListener, gw: Arc<Gateway>) -> std::io::Result<HttpServer> {
        let server = Server::from_listener(listener, None).map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("cache-http bound to a non-IP address"))?;
        let server = Arc::new(server);
        let s = server.clone();
        let thread = std::thread::Builder::new()
            .name("cache-http".into())
            .spawn(move || {
                for req in s.incoming_requests() {
                    let gw = gw.clone();
                    // Uploads commit synchronously through the broker; don't block other clients.
                    std::thread::spawn(move || serve(&gw, req));
                }
            })?;
        Ok(HttpServer {
            server,
            addr,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.stop();
    }
}
