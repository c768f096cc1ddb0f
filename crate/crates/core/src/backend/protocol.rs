//! Newline-delimited JSON protocol for external backend processes.
//!
//! The parent writes one request per line on the child's stdin and waits for
//! exactly one reply line on its stdout before sending the next request. The
//! first exchange is a `hello` / `hello_ack` handshake carrying role, protocol
//! version and patch size. Images travel as base64-encoded PNG.

use std::io::{self, BufRead, BufReader, Cursor, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::{
    validate_detections, BackendError, DetectorBackend, DetectorCapabilities, GeneratorBackend, GeneratorCapabilities,
};
use crate::dataset::BBox;
use crate::metrics::Detection;
use crate::patch::{mask_center, GenerationResult, MaskedPatch, Patch};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Generator,
    Detector,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Generator => "generator",
            Role::Detector => "detector",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub confidence: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Message {
    Hello {
        role: Role,
        version: u32,
        patch_size: u32,
    },
    HelloAck {
        role: Role,
        version: u32,
    },
    Generate {
        id: u64,
        patch_png: String,
        mask_png: String,
    },
    Result {
        id: u64,
        patch_png: String,
    },
    Detect {
        id: u64,
        image_png: String,
    },
    Detections {
        id: u64,
        items: Vec<WireDetection>,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        message: String,
    },
}

impl Message {
    fn id(&self) -> Option<u64> {
        match self {
            Message::Hello { .. } | Message::HelloAck { .. } => None,
            Message::Generate { id, .. }
            | Message::Result { id, .. }
            | Message::Detect { id, .. }
            | Message::Detections { id, .. } => Some(*id),
            Message::Error { id, .. } => *id,
        }
    }

    fn op(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::HelloAck { .. } => "hello_ack",
            Message::Generate { .. } => "generate",
            Message::Result { .. } => "result",
            Message::Detect { .. } => "detect",
            Message::Detections { .. } => "detections",
            Message::Error { .. } => "error",
        }
    }
}

fn png_base64(img: DynamicImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    STANDARD.encode(buf.into_inner())
}

pub fn encode_rgb_png(img: &RgbImage) -> String {
    png_base64(DynamicImage::ImageRgb8(img.clone()))
}

pub fn encode_gray_png(img: &GrayImage) -> String {
    png_base64(DynamicImage::ImageLuma8(img.clone()))
}

fn decode_png(data: &str) -> Result<DynamicImage, BackendError> {
    let bytes = STANDARD
        .decode(data.trim())
        .map_err(|e| BackendError::Protocol(format!("bad base64 payload: {e}")))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| BackendError::Protocol(format!("bad PNG payload: {e}")))
}

pub fn decode_rgb_png(data: &str) -> Result<RgbImage, BackendError> {
    Ok(decode_png(data)?.into_rgb8())
}

pub fn decode_gray_png(data: &str) -> Result<GrayImage, BackendError> {
    Ok(decode_png(data)?.into_luma8())
}

impl WireDetection {
    pub fn from_detection(d: &Detection) -> Self {
        Self {
            x_min: d.bbox.x_min(),
            y_min: d.bbox.y_min(),
            x_max: d.bbox.x_max(),
            y_max: d.bbox.y_max(),
            confidence: d.confidence,
            label: d.label.clone(),
        }
    }

    pub fn to_detection(&self) -> Result<Detection, BackendError> {
        let bbox = BBox::new(self.x_min, self.y_min, self.x_max, self.y_max)
            .map_err(|e| BackendError::InvalidOutput(e.to_string()))?;
        Ok(Detection::new(bbox, self.confidence, self.label.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolOptions {
    /// Limit on the wait for each reply, handshake included.
    pub timeout: Duration,
    /// Patch size announced in the handshake.
    pub patch_size: u32,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
            patch_size: 96,
        }
    }
}

/// One connection to a backend: strictly one request in flight.
///
/// A timed-out handle is poisoned, since a late reply would desynchronise
/// request and response ids.
pub struct ProtocolClient {
    label: String,
    role: Role,
    options: ProtocolOptions,
    writer: Option<Box<dyn Write + Send>>,
    replies: Receiver<io::Result<String>>,
    child: Option<Child>,
    next_id: u64,
    poisoned: Option<String>,
}

impl std::fmt::Debug for ProtocolClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProtocolClient")
            .field("label", &self.label)
            .field("role", &self.role)
            .field("next_id", &self.next_id)
            .finish_non_exhaustive()
    }
}

fn spawn_reader<R: Read + Send + 'static>(reader: R) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(reader);
        loop {
            let mut line = String::new();
            match reader.read_line(&mut line) {
                Ok(0) => break,
                Ok(_) => {
                    if tx.send(Ok(line)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        }
    });
    rx
}

impl ProtocolClient {
    /// Connects over arbitrary streams and performs the handshake.
    pub fn from_streams<R, W>(reader: R, writer: W, role: Role, options: ProtocolOptions) -> Result<Self, BackendError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let mut client = Self {
            label: "stream".into(),
            role,
            options,
            writer: Some(Box::new(writer)),
            replies: spawn_reader(reader),
            child: None,
            next_id: 0,
            poisoned: None,
        };
        client.handshake()?;
        Ok(client)
    }

    /// Starts `command` (split with shell quoting rules) and performs the handshake.
    pub fn spawn(command: &str, role: Role, options: ProtocolOptions) -> Result<Self, BackendError> {
        let spawn_err = |source| BackendError::SpawnFailure {
            command: command.to_owned(),
            source,
        };
        let argv = shlex::split(command).filter(|argv| !argv.is_empty()).ok_or_else(|| {
            spawn_err(io::Error::new(
                io::ErrorKind::InvalidInput,
                "empty or unparsable command line",
            ))
        })?;
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(spawn_err)?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        log::debug!("spawned {role} backend pid {}: {command}", child.id());
        let mut client = Self {
            label: command.to_owned(),
            role,
            options,
            writer: Some(Box::new(stdin)),
            replies: spawn_reader(stdout),
            child: Some(child),
            next_id: 0,
            poisoned: None,
        };
        client.handshake()?;
        Ok(client)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn patch_size(&self) -> u32 {
        self.options.patch_size
    }

    fn handshake(&mut self) -> Result<(), BackendError> {
        let hello = Message::Hello {
            role: self.role,
            version: PROTOCOL_VERSION,
            patch_size: self.options.patch_size,
        };
        match self.exchange(&hello)? {
            Message::HelloAck { role, version } if role == self.role && version == PROTOCOL_VERSION => Ok(()),
            Message::HelloAck { role, version } => {
                let reason = if version != PROTOCOL_VERSION {
                    format!("backend speaks version {version}, expected {PROTOCOL_VERSION}")
                } else {
                    format!("backend answered as {role}, expected {}", self.role)
                };
                Err(BackendError::HandshakeMismatch(reason))
            }
            Message::Error { message, .. } => Err(BackendError::HandshakeMismatch(message)),
            other => Err(BackendError::HandshakeMismatch(format!(
                "expected hello_ack, got {}",
                other.op()
            ))),
        }
    }

    fn crashed(&mut self, context: &str) -> BackendError {
        let status = self.child.as_mut().and_then(|c| {
            // give the process a moment to finish exiting
            let deadline = Instant::now() + Duration::from_millis(200);
            loop {
                match c.try_wait() {
                    Ok(Some(status)) => return Some(status.to_string()),
                    Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                    _ => return None,
                }
            }
        });
        let reason = match status {
            Some(s) => format!("{context} ({s})"),
            None => context.to_owned(),
        };
        self.poisoned = Some(reason.clone());
        BackendError::BackendCrashed(reason)
    }

    fn exchange(&mut self, request: &Message) -> Result<Message, BackendError> {
        if let Some(reason) = &self.poisoned {
            return Err(BackendError::BackendCrashed(format!("handle unusable: {reason}")));
        }
        let mut line = serde_json::to_string(request).expect("messages always serialize");
        line.push('\n');
        let writer = self.writer.as_mut().expect("writer lives until drop");
        if let Err(e) = writer.write_all(line.as_bytes()).and_then(|_| writer.flush()) {
            return Err(self.crashed(&format!("write failed: {e}")));
        }
        let reply = match self.replies.recv_timeout(self.options.timeout) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => return Err(self.crashed(&format!("read failed: {e}"))),
            Err(RecvTimeoutError::Disconnected) => return Err(self.crashed("stdout closed")),
            Err(RecvTimeoutError::Timeout) => {
                self.poisoned = Some(format!("timed out after {:?}", self.options.timeout));
                return Err(BackendError::ResponseTimeout(self.options.timeout));
            }
        };
        serde_json::from_str(reply.trim_end()).map_err(|e| {
            self.poisoned = Some("unparsable reply".into());
            BackendError::Protocol(format!("unparsable reply {:?}: {e}", reply.trim_end()))
        })
    }

    /// Sends a request with a fresh id and returns the matching reply.
    fn request(&mut self, build: impl FnOnce(u64) -> Message) -> Result<Message, BackendError> {
        let id = self.next_id;
        self.next_id += 1;
        let reply = self.exchange(&build(id))?;
        match reply.id() {
            Some(rid) if rid == id => {}
            Some(rid) => {
                self.poisoned = Some("reply id mismatch".into());
                return Err(BackendError::Protocol(format!(
                    "reply id {rid} does not echo request id {id}"
                )));
            }
            None => {
                if let Message::Error { message, .. } = reply {
                    return Err(BackendError::Remote(message));
                }
                return Err(BackendError::Protocol(format!("{} reply carries no id", reply.op())));
            }
        }
        match reply {
            Message::Error { message, .. } => Err(BackendError::Remote(message)),
            other => Ok(other),
        }
    }

    pub fn generate(&mut self, masked: &MaskedPatch) -> Result<RgbImage, BackendError> {
        let patch_png = encode_rgb_png(masked.masked_pixels());
        let mask_png = encode_gray_png(masked.mask());
        match self.request(|id| Message::Generate {
            id,
            patch_png,
            mask_png,
        })? {
            Message::Result { patch_png, .. } => decode_rgb_png(&patch_png),
            other => Err(BackendError::Protocol(format!("expected result, got {}", other.op()))),
        }
    }

    pub fn detect(&mut self, image: &RgbImage) -> Result<Vec<Detection>, BackendError> {
        let image_png = encode_rgb_png(image);
        match self.request(|id| Message::Detect { id, image_png })? {
            Message::Detections { items, .. } => items.iter().map(WireDetection::to_detection).collect(),
            other => Err(BackendError::Protocol(format!(
                "expected detections, got {}",
                other.op()
            ))),
        }
    }
}

impl Drop for ProtocolClient {
    fn drop(&mut self) {
        // closing stdin asks the child to exit; kill it if it lingers
        drop(self.writer.take());
        if let Some(mut child) = self.child.take() {
            let deadline = Instant::now() + Duration::from_secs(2);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => return,
                    Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                    _ => break,
                }
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Generator driven over the protocol.
#[derive(Debug)]
pub struct ProtocolGenerator {
    client: ProtocolClient,
}

impl ProtocolGenerator {
    pub fn new(client: ProtocolClient) -> Result<Self, BackendError> {
        if client.role() != Role::Generator {
            return Err(BackendError::HandshakeMismatch(
                "client is not a generator connection".into(),
            ));
        }
        Ok(Self { client })
    }
}

impl GeneratorBackend for ProtocolGenerator {
    fn capabilities(&self) -> GeneratorCapabilities {
        GeneratorCapabilities {
            patch_size: Some(self.client.patch_size()),
            deterministic: false,
        }
    }

    fn fill(&mut self, masked: &MaskedPatch, _seed: u64) -> Result<GenerationResult, BackendError> {
        if masked.size() != self.client.patch_size() {
            return Err(BackendError::InvalidOutput(format!(
                "patch size {} differs from the negotiated {}",
                masked.size(),
                self.client.patch_size()
            )));
        }
        let completed = self.client.generate(masked)?;
        if completed.dimensions() != (masked.size(), masked.size()) {
            return Err(BackendError::InvalidOutput(format!(
                "generator returned {:?} for a {1}x{1} patch",
                completed.dimensions(),
                masked.size()
            )));
        }
        Ok(GenerationResult::from_completed(completed, masked.size())?)
    }
}

/// Detector driven over the protocol.
#[derive(Debug)]
pub struct ProtocolDetector {
    client: ProtocolClient,
}

impl ProtocolDetector {
    pub fn new(client: ProtocolClient) -> Result<Self, BackendError> {
        if client.role() != Role::Detector {
            return Err(BackendError::HandshakeMismatch(
                "client is not a detector connection".into(),
            ));
        }
        Ok(Self { client })
    }
}

impl DetectorBackend for ProtocolDetector {
    fn capabilities(&self) -> DetectorCapabilities {
        DetectorCapabilities { min_input: 1 }
    }

    fn detect(&mut self, image: &RgbImage) -> Result<Vec<Detection>, BackendError> {
        let detections = self.client.detect(image)?;
        validate_detections(&detections, image.width(), image.height())?;
        Ok(detections)
    }
}

pub fn spawn_protocol_backend(
    command: &str,
    role: Role,
    options: ProtocolOptions,
) -> Result<ProtocolClient, BackendError> {
    ProtocolClient::spawn(command, role, options)
}

pub fn spawn_generator(command: &str, options: ProtocolOptions) -> Result<ProtocolGenerator, BackendError> {
    ProtocolGenerator::new(ProtocolClient::spawn(command, Role::Generator, options)?)
}

pub fn spawn_detector(command: &str, options: ProtocolOptions) -> Result<ProtocolDetector, BackendError> {
    ProtocolDetector::new(ProtocolClient::spawn(command, Role::Detector, options)?)
}

/// Backend served by [`serve`].
pub enum ServedBackend {
    Generator(Box<dyn GeneratorBackend>),
    Detector(Box<dyn DetectorBackend>),
}

impl ServedBackend {
    fn role(&self) -> Role {
        match self {
            ServedBackend::Generator(_) => Role::Generator,
            ServedBackend::Detector(_) => Role::Detector,
        }
    }
}

fn handle_request(backend: &mut ServedBackend, patch_size: u32, request: Message) -> Message {
    let id = request.id();
    let result = match (backend, request) {
        (ServedBackend::Generator(gen), Message::Generate { id, patch_png, .. }) => (|| {
            let pixels = decode_rgb_png(&patch_png)?;
            if pixels.dimensions() != (patch_size, patch_size) {
                return Err(BackendError::InvalidOutput(format!(
                    "patch is {:?}, handshake announced {patch_size}",
                    pixels.dimensions()
                )));
            }
            let masked = mask_center(&Patch::detached(pixels)?);
            let out = gen.fill(&masked, id)?;
            Ok(Message::Result {
                id,
                patch_png: encode_rgb_png(out.completed()),
            })
        })(),
        (ServedBackend::Detector(det), Message::Detect { id, image_png }) => (|| {
            let image = decode_rgb_png(&image_png)?;
            let items = det.detect(&image)?.iter().map(WireDetection::from_detection).collect();
            Ok(Message::Detections { id, items })
        })(),
        (_, other) => Err(BackendError::Protocol(format!("unexpected {} request", other.op()))),
    };
    result.unwrap_or_else(|e| Message::Error {
        id,
        message: e.to_string(),
    })
}

/// Answers protocol requests from `input` until it closes. Malformed lines and
/// failed requests get an `error` reply and the loop continues.
pub fn serve<R: BufRead, W: Write>(input: R, mut output: W, mut backend: ServedBackend) -> io::Result<()> {
    let mut patch_size = None;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Message>(&line) {
            Err(e) => Message::Error {
                id: None,
                message: format!("malformed request: {e}"),
            },
            Ok(Message::Hello {
                version,
                patch_size: size,
                ..
            }) => {
                patch_size = Some(size);
                Message::HelloAck {
                    role: backend.role(),
                    version: version.min(PROTOCOL_VERSION),
                }
            }
            Ok(request) => match patch_size {
                Some(size) => handle_request(&mut backend, size, request),
                None => Message::Error {
                    id: request.id(),
                    message: "hello required before requests".into(),
                },
            },
        };
        let mut text = serde_json::to_string(&reply).expect("messages always serialize");
        text.push('\n');
        output.write_all(text.as_bytes())?;
        output.flush()?;
    }
    Ok(())
}
