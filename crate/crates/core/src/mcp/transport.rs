use std::process::Stdio;

use async_trait::async_trait;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, Lines};
use tokio::process::{Child, ChildStdin, ChildStdout, Command};
use tokio::sync::mpsc::{unbounded_channel, UnboundedReceiver, UnboundedSender};

use super::McpError;

#[async_trait]
pub(crate) trait LineSink: Send {
    async fn send_line(&mut self, line: &str) -> Result<(), McpError>;
}

#[async_trait]
pub(crate) trait LineSource: Send {
    /// `Ok(None)` on clean end of stream.
    async fn next_line(&mut self) -> Result<Option<String>, McpError>;
}

/// A bidirectional line channel to one tool server.
pub struct Transport {
    pub(crate) sink: Box<dyn LineSink>,
    pub(crate) source: Box<dyn LineSource>,
    pub(crate) child: Option<Child>,
}

/// The server side of an in-process transport.
pub struct ServerEnd {
    pub incoming: UnboundedReceiver<String>,
    pub outgoing: UnboundedSender<String>,
}

struct ChannelSink(UnboundedSender<String>);

#[async_trait]
impl LineSink for ChannelSink {
    async fn send_line(&mut self, line: &str) -> Result<(), McpError> {
        self.0
            .send(line.to_string())
            .map_err(|_| McpError::TransportError("peer closed".into()))
    }
}

struct ChannelSource(UnboundedReceiver<String>);

#[async_trait]
impl LineSource for ChannelSource {
    async fn next_line(&mut self) -> Result<Option<String>, McpError> {
        Ok(self.0.recv().await)
    }
}

struct StdinSink(ChildStdin);

#[async_trait]
impl LineSink for StdinSink {
    async fn send_line(&mut self, line: &str) -> Result<(), McpError> {
        let io = |e: std::io::Error| McpError::TransportError(e.to_string());
        self.0.write_all(line.as_bytes()).await.map_err(io)?;
        self.0.write_all(b"\n").await.map_err(io)?;
        self.0.flush().await.map_err(io)
    }
}

struct StdoutSource(Lines<BufReader<ChildStdout>>);

#[async_trait]
impl LineSource for StdoutSource {
    async fn next_line(&mut self) -> Result<Option<String>, McpError> {
        self.0
            .next_line()
            .await
            .map_err(|e| McpError::TransportError(e.to_string()))
    }
}

impl Transport {
    /// In-process channel pair. The caller drives the returned [`ServerEnd`].
    pub fn pair() -> (Transport, ServerEnd) {
        let (to_server, incoming) = unbounded_channel();
        let (outgoing, from_server) = unbounded_channel();
        let transport = Transport {
            sink: Box::new(ChannelSink(to_server)),
            source: Box::new(ChannelSource(from_server)),
            child: None,
        };
        (transport, ServerEnd { incoming, outgoing })
    }

    /// Spawns `program args..` and talks to it over stdin/stdout.
    pub fn stdio(program: &str, args: &[String]) -> Result<Transport, McpError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| McpError::TransportError(format!("cannot spawn `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Transport {
            sink: Box::new(StdinSink(stdin)),
            source: Box::new(StdoutSource(BufReader::new(stdout).lines())),
            child: Some(child),
        })
    }
}
