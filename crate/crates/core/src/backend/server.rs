//! Adapter for pretrained networks hosted by an external model-server process.
//!
//! The process is spawned from `command` and spoken to over stdin/stdout with
//! length-prefixed frames:
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | header length `n` (`u32` LE)            |
//! | n     | UTF-8 JSON header                       |
//! | 4     | payload length `k` in values (`u32` LE) |
//! | 4·k   | `f32` LE payload                        |
//!
//! Requests carry `{"op", "role", "shape"}`; `op` is `hello`, `forward` or
//! `vjp`. A `vjp` payload is the forward input followed by the cotangent of
//! the output. Replies carry `{"ok", "shape"}` or `{"ok": false, "error"}`.
//! `hello` lists the weight file of every role so the server can load them.
//!
//! Tensors cross the wire channel-first (`3 × H × W`). Resizing to each
//! model's input side and per-channel normalization happen here, so the
//! server sees exactly the tensors its networks expect. Resizing is bilinear
//! with half-pixel centres.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    AttributeClassifier, BackendBundle, BackendKind, Detection, FaceDetector, FeatureExtractor, Generator,
    IdentityEmbedding, IdentityEncoder, Inverter, SemanticEncoder, SemanticFeatures, FEATURE_DIM,
};
use crate::error::{Error, Result};
use crate::evaluation::AttributeSpec;
use crate::image::{ImageTensor, CHANNELS};
use crate::latent::{LatentCode, LATENT_COLS, LATENT_LEN};

const MAX_HEADER: usize = 1 << 20;
const MAX_PAYLOAD: usize = 1 << 28;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub weights: PathBuf,
    /// Expected SHA-256 of the weight file, hex.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    /// Square input side the network expects; 0 keeps the image size.
    #[serde(default)]
    pub input_side: usize,
    #[serde(default = "zero3")]
    pub mean: [f64; 3],
    #[serde(default = "one3")]
    pub std: [f64; 3],
}

fn zero3() -> [f64; 3] {
    [0.0; 3]
}

fn one3() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelServerConfig {
    /// Program and arguments of the server process.
    pub command: Vec<String>,
    /// Its `mean`/`std` map generator output to `[0, 1]`: `x = out·std + mean`.
    pub generator: ModelSpec,
    pub inverter: ModelSpec,
    pub identity_encoder: ModelSpec,
    pub semantic_encoder: ModelSpec,
    pub face_detector: ModelSpec,
    #[serde(default)]
    pub reid: BTreeMap<String, ModelSpec>,
    /// Feature extractor for FID; class-token features when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fid: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_classifier: Option<ModelSpec>,
    #[serde(default = "default_detection_threshold")]
    pub detection_threshold: f64,
    /// Minimum detector score for inversion to proceed.
    #[serde(default = "default_detection_threshold")]
    pub inversion_min_score: f64,
}

fn default_detection_threshold() -> f64 {
    0.5
}

impl ModelServerConfig {
    fn roles(&self) -> Vec<(String, &ModelSpec)> {
        let mut v: Vec<(String, &ModelSpec)> = vec![
            ("generator".into(), &self.generator),
            ("inverter".into(), &self.inverter),
            ("identity_encoder".into(), &self.identity_encoder),
            ("semantic_encoder".into(), &self.semantic_encoder),
            ("face_detector".into(), &self.face_detector),
        ];
        v.extend(self.reid.iter().map(|(k, s)| (format!("reid:{k}"), s)));
        if let Some(s) = &self.fid {
            v.push(("fid".into(), s));
        }
        if let Some(s) = &self.attribute_classifier {
            v.push(("attribute_classifier".into(), s));
        }
        v
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |s: &mut ModelSpec| {
            if s.weights.is_relative() {
                s.weights = base.join(&s.weights);
            }
        };
        fix(&mut self.generator);
        fix(&mut self.inverter);
        fix(&mut self.identity_encoder);
        fix(&mut self.semantic_encoder);
        fix(&mut self.face_detector);
        self.reid.values_mut().for_each(fix);
        self.fid.iter_mut().for_each(fix);
        self.attribute_classifier.iter_mut().for_each(fix);
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.command.is_empty() {
            out.push("command must name the server program".into());
        }
        for (role, s) in self.roles() {
            if !s.weights.is_file() {
                out.push(format!("{role}.weights: no such file {}", s.weights.display()));
            }
            if s.std.iter().any(|v| !(*v > 0.0)) {
                out.push(format!("{role}.std must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.detection_threshold) {
            out.push("detection_threshold must be in [0, 1]".into());
        }
        out
    }

    /// Hashes every weight file, checking expected digests.
    pub fn fingerprints(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for (role, s) in self.roles() {
            let found = crate::io_util::file_fingerprint(&s.weights)?;
            if let Some(expected) = &s.sha256 {
                if !expected.eq_ignore_ascii_case(&found) {
                    return Err(Error::Backend(format!(
                        "{role}: weight file {} has sha256 {found}, expected {expected}",
                        s.weights.display()
                    )));
                }
            }
            out.insert(role, found);
        }
        Ok(out)
    }

    /// Spawns the server and wires up every role.
    pub fn connect(&self) -> Result<BackendBundle> {
        let problems = self.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let fingerprints = self.fingerprints()?;
        let server = ProcessServer::spawn(&self.command)?;
        bundle_with_server(self, fingerprints, Box::new(server))
    }
}

/// One request/response exchange with a model server.
pub trait ModelServer: Send {
    fn call(&mut self, header: &Value, payload: &[f32]) -> Result<(Value, Vec<f32>)>;
}

pub fn write_frame(w: &mut impl Write, header: &Value, payload: &[f32]) -> std::io::Result<()> {
    let h = serde_json::to_vec(header).map_err(std::io::Error::other)?;
    w.write_all(&(h.len() as u32).to_le_bytes())?;
    w.write_all(&h)?;
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(payload.len() * 4);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()
}

pub fn read_frame(r: &mut impl Read) -> std::io::Result<(Value, Vec<f32>)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let n = u32::from_le_bytes(len) as usize;
    if n > MAX_HEADER {
        return Err(std::io::Error::other(format!("header of {n} bytes exceeds limit")));
    }
    let mut h = vec![0u8; n];
    r.read_exact(&mut h)?;
    let header: Value = serde_json::from_slice(&h).map_err(std::io::Error::other)?;
    r.read_exact(&mut len)?;
    let k = u32::from_le_bytes(len) as usize;
    if k > MAX_PAYLOAD {
        return Err(std::io::Error::other(format!("payload of {k} values exceeds limit")));
    }
    let mut bytes = vec![0u8; k * 4];
    r.read_exact(&mut bytes)?;
    let payload = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, payload))
}

/// Frames over any byte stream pair.
pub struct StreamServer<R: Read + Send, W: Write + Send> {
    reader: R,
    writer: W,
}

impl<R: Read + Send, W: Write + Send> StreamServer<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self { reader, writer }
    }
}

impl<R: Read + Send, W: Write + Send> ModelServer for StreamServer<R, W> {
    fn call(&mut self, header: &Value, payload: &[f32]) -> Result<(Value, Vec<f32>)> {
        let io = |e: std::io::Error| Error::Backend(format!("model server transport: {e}"));
        write_frame(&mut self.writer, header, payload).map_err(io)?;
        read_frame(&mut self.reader).map_err(io)
    }
}

struct ProcessServer {
    child: Child,
    stream: StreamServer<BufReader<ChildStdout>, BufWriter<ChildStdin>>,
}

impl ProcessServer {
    fn spawn(command: &[String]) -> Result<Self> {
        let mut child = Command::new(&command[0])
            .args(&command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start model server `{}`: {e}", command[0])))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self {
            child,
            stream: StreamServer::new(BufReader::new(stdout), BufWriter::new(stdin)),
        })
    }
}

impl ModelServer for ProcessServer {
    fn call(&mut self, header: &Value, payload: &[f32]) -> Result<(Value, Vec<f32>)> {
        self.stream.call(header, payload)
    }
}

impl Drop for ProcessServer {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Clone)]
struct Client(Arc<Mutex<Box<dyn ModelServer>>>);

impl Client {
    fn request(&self, op: &str, role: &str, shape: &[usize], payload: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
        let header = json!({"op": op, "role": role, "shape": shape});
        let payload: Vec<f32> = payload.iter().map(|&v| v as f32).collect();
        let (reply, data) = self
            .0
            .lock()
            .map_err(|_| Error::Backend("model server handle poisoned".into()))?
            .call(&header, &payload)?;
        if reply.get("ok").and_then(Value::as_bool) != Some(true) {
            let msg = reply.get("error").and_then(Value::as_str).unwrap_or("unspecified failure");
            return Err(Error::Backend(format!("{role} {op}: {msg}")));
        }
        let shape: Vec<usize> = serde_json::from_value(reply.get("shape").cloned().unwrap_or(Value::Null))
            .map_err(|e| Error::Backend(format!("{role} {op}: bad reply shape: {e}")))?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Backend(format!(
                "{role} {op}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        let data: Vec<f64> = data.into_iter().map(f64::from).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Backend(format!("{role} {op}: non-finite output")));
        }
        Ok((shape, data))
    }

    fn forward(&self, role: &str, shape: &[usize], x: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
        self.request("forward", role, shape, x)
    }

    fn vjp(&self, role: &str, shape: &[usize], x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let mut payload = x.to_vec();
        payload.extend_from_slice(cotangent);
        let (_, g) = self.request("vjp", role, shape, &payload)?;
        if g.len() != x.len() {
            return Err(Error::Backend(format!(
                "{role} vjp returned {} values for an input of {}",
                g.len(),
                x.len()
            )));
        }
        Ok(g)
    }
}

/// Bilinear resize (half-pixel centres) as an explicit sparse linear map.
#[derive(Clone, Debug)]
pub struct Resize {
    from: (usize, usize),
    to: (usize, usize),
    taps: Vec<[(usize, f64); 4]>,
}

fn axis_taps(src: usize, dst: usize, i: usize) -> [(usize, f64); 2] {
    let scale = src as f64 / dst as f64;
    let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
    let x0 = x.floor() as usize;
    let x1 = (x0 + 1).min(src - 1);
    let t = x - x0 as f64;
    [(x0, 1.0 - t), (x1, t)]
}

impl Resize {
    pub fn new(from: (usize, usize), to: (usize, usize)) -> Self {
        let mut taps = Vec::with_capacity(to.0 * to.1);
        for y in 0..to.0 {
            let ty = axis_taps(from.0, to.0, y);
            for x in 0..to.1 {
                let tx = axis_taps(from.1, to.1, x);
                taps.push([
                    (ty[0].0 * from.1 + tx[0].0, ty[0].1 * tx[0].1),
                    (ty[0].0 * from.1 + tx[1].0, ty[0].1 * tx[1].1),
                    (ty[1].0 * from.1 + tx[0].0, ty[1].1 * tx[0].1),
                    (ty[1].0 * from.1 + tx[1].0, ty[1].1 * tx[1].1),
                ]);
            }
        }
        Self { from, to, taps }
    }

    /// Interleaved HWC in, channel-first out.
    pub fn apply_hwc_to_chw(&self, src: &[f64]) -> Vec<f64> {
        let n = self.to.0 * self.to.1;
        let mut out = vec![0.0; CHANNELS * n];
        for (o, taps) in self.taps.iter().enumerate() {
            for &(i, w) in taps {
                for c in 0..CHANNELS {
                    out[c * n + o] += w * src[i * CHANNELS + c];
                }
            }
        }
        out
    }

    /// Adjoint of [`Resize::apply_hwc_to_chw`].
    pub fn adjoint_chw_to_hwc(&self, g: &[f64]) -> Vec<f64> {
        let n = self.to.0 * self.to.1;
        let mut out = vec![0.0; CHANNELS * self.from.0 * self.from.1];
        for (o, taps) in self.taps.iter().enumerate() {
            for &(i, w) in taps {
                for c in 0..CHANNELS {
                    out[i * CHANNELS + c] += w * g[c * n + o];
                }
            }
        }
        out
    }
}

/// A network that consumes images: resize, normalize, forward.
#[derive(Clone)]
struct ImageModel {
    client: Client,
    role: String,
    spec: ModelSpec,
}

impl ImageModel {
    fn prepare(&self, image: &ImageTensor) -> (Resize, Vec<usize>, Vec<f64>) {
        let side = |d: usize| if self.spec.input_side == 0 { d } else { self.spec.input_side };
        let to = (side(image.height()), side(image.width()));
        let resize = Resize::new((image.height(), image.width()), to);
        let mut x = resize.apply_hwc_to_chw(image.as_slice());
        let n = to.0 * to.1;
        for c in 0..CHANNELS {
            for v in &mut x[c * n..(c + 1) * n] {
                *v = (*v - self.spec.mean[c]) / self.spec.std[c];
            }
        }
        (resize, vec![CHANNELS, to.0, to.1], x)
    }

    fn forward(&self, image: &ImageTensor) -> Result<(Vec<usize>, Vec<f64>)> {
        let (_, shape, x) = self.prepare(image);
        self.client.forward(&self.role, &shape, &x)
    }

    /// Pulls an output cotangent back to the `[0, 1]` image.
    fn vjp(&self, image: &ImageTensor, cotangent: &[f64]) -> Result<Vec<f64>> {
        let (resize, shape, x) = self.prepare(image);
        let mut g = self.client.vjp(&self.role, &shape, &x, cotangent)?;
        let n = shape[1] * shape[2];
        for c in 0..CHANNELS {
            for v in &mut g[c * n..(c + 1) * n] {
                *v /= self.spec.std[c];
            }
        }
        Ok(resize.adjoint_chw_to_hwc(&g))
    }
}

struct RemoteGenerator {
    client: Client,
    spec: ModelSpec,
}

impl RemoteGenerator {
    fn raw(&self, code: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
        super::check_code(code)?;
        let (shape, out) = self.client.forward("generator", &[18, LATENT_COLS], code)?;
        if shape.len() != 3 || shape[0] != CHANNELS {
            return Err(Error::Backend(format!("generator returned shape {shape:?}, expected [3, H, W]")));
        }
        Ok((shape, out))
    }
}

impl Generator for RemoteGenerator {
    fn map_base(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (_, w) = self.client.forward("generator.mapping", &[LATENT_COLS], z)?;
        if w.len() != LATENT_COLS {
            return Err(Error::Backend(format!("mapping returned {} values", w.len())));
        }
        Ok(w)
    }

    fn synthesize(&self, code: &[f64]) -> Result<ImageTensor> {
        let (shape, out) = self.raw(code)?;
        let (h, w) = (shape[1], shape[2]);
        let n = h * w;
        let mut hwc = vec![0.0; out.len()];
        for c in 0..CHANNELS {
            for i in 0..n {
                hwc[i * CHANNELS + c] = out[c * n + i] * self.spec.std[c] + self.spec.mean[c];
            }
        }
        ImageTensor::new(h, w, hwc)
    }

    fn synthesize_vjp(&self, code: &[f64], grad_image: &[f64]) -> Result<Vec<f64>> {
        let (shape, out) = self.raw(code)?;
        let n = shape[1] * shape[2];
        if grad_image.len() != out.len() {
            return Err(Error::Validation("image gradient has the wrong size".into()));
        }
        let mut g = vec![0.0; out.len()];
        for c in 0..CHANNELS {
            for i in 0..n {
                let x = out[c * n + i] * self.spec.std[c] + self.spec.mean[c];
                if (0.0..=1.0).contains(&x) {
                    g[c * n + i] = grad_image[i * CHANNELS + c] * self.spec.std[c];
                }
            }
        }
        self.client.vjp("generator", &[18, LATENT_COLS], code, &g)
    }
}

struct RemoteInverter {
    model: ImageModel,
    detector: Arc<RemoteDetector>,
    min_score: f64,
}

impl Inverter for RemoteInverter {
    fn invert(&self, image: &ImageTensor) -> Result<LatentCode> {
        let d = self.detector.detect(image)?;
        if !d.found || d.confidence < self.min_score {
            return Err(Error::InversionRejected(format!(
                "no face detected (score {:.3})",
                d.confidence
            )));
        }
        let (_, w) = self.model.forward(image)?;
        if w.len() != LATENT_LEN {
            return Err(Error::Backend(format!("inverter returned {} values", w.len())));
        }
        LatentCode::from_f64(&w)
    }
}

struct RemoteIdentity(ImageModel);

fn normalize_vjp(raw: &[f64], g: &[f64]) -> Vec<f64> {
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let u: Vec<f64> = raw.iter().map(|v| v / n).collect();
    let d: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
    g.iter().zip(&u).map(|(gi, ui)| (gi - d * ui) / n).collect()
}

impl IdentityEncoder for RemoteIdentity {
    fn embed(&self, image: &ImageTensor) -> Result<IdentityEmbedding> {
        let (_, raw) = self.0.forward(image)?;
        IdentityEmbedding::normalize(raw)
    }

    fn embed_vjp(&self, image: &ImageTensor, grad: &[f64]) -> Result<Vec<f64>> {
        let (_, raw) = self.0.forward(image)?;
        self.0.vjp(image, &normalize_vjp(&raw, grad))
    }
}

struct RemoteSemantic(ImageModel);

impl SemanticEncoder for RemoteSemantic {
    fn encode(&self, image: &ImageTensor) -> Result<SemanticFeatures> {
        let (shape, out) = self.0.forward(image)?;
        if shape.len() != 2 || shape[1] != FEATURE_DIM || shape[0] < 2 {
            return Err(Error::Backend(format!(
                "semantic encoder returned shape {shape:?}, expected [1 + P, {FEATURE_DIM}]"
            )));
        }
        let p = shape[0] - 1;
        let side = (p as f64).sqrt().round() as usize;
        let cls = out[..FEATURE_DIM].to_vec();
        let patches = out[FEATURE_DIM..].to_vec();
        SemanticFeatures::new(cls, patches, side)
    }

    fn patch_vjp(&self, image: &ImageTensor, grad_patches: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; FEATURE_DIM];
        g.extend_from_slice(grad_patches);
        self.0.vjp(image, &g)
    }
}

struct RemoteDetector {
    model: ImageModel,
    threshold: f64,
}

impl FaceDetector for RemoteDetector {
    fn detect(&self, image: &ImageTensor) -> Result<Detection> {
        let (_, out) = self.model.forward(image)?;
        if out.len() != 5 {
            return Err(Error::Backend(format!(
                "face detector returned {} values, expected score and box",
                out.len()
            )));
        }
        let found = out[0] >= self.threshold;
        Ok(Detection {
            found,
            bbox: found.then(|| [out[1], out[2], out[3], out[4]]),
            confidence: out[0],
        })
    }
}

struct RemoteFeatures(ImageModel);

impl FeatureExtractor for RemoteFeatures {
    fn features(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.0.forward(image)?.1)
    }
}

struct ClsFeatures(Arc<RemoteSemantic>);

impl FeatureExtractor for ClsFeatures {
    fn features(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.0.encode(image)?.cls)
    }
}

struct RemoteAttributes {
    model: ImageModel,
    names: Vec<String>,
}

impl AttributeClassifier for RemoteAttributes {
    fn attribute_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn predict(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let (_, p) = self.model.forward(image)?;
        if p.len() != self.names.len() {
            return Err(Error::Backend(format!(
                "attribute classifier returned {} values for {} attributes",
                p.len(),
                self.names.len()
            )));
        }
        Ok(p)
    }
}

/// Builds a bundle on an already-running server.
pub fn bundle_with_server(
    cfg: &ModelServerConfig,
    model_fingerprints: BTreeMap<String, String>,
    server: Box<dyn ModelServer>,
) -> Result<BackendBundle> {
    let client = Client(Arc::new(Mutex::new(server)));
    let weights: BTreeMap<String, String> = cfg
        .roles()
        .into_iter()
        .map(|(r, s)| (r, s.weights.display().to_string()))
        .collect();
    let hello = json!({"op": "hello", "models": weights, "fingerprints": model_fingerprints});
    let (reply, _) = client
        .0
        .lock()
        .map_err(|_| Error::Backend("model server handle poisoned".into()))?
        .call(&hello, &[])?;
    if reply.get("ok").and_then(Value::as_bool) != Some(true) {
        let msg = reply.get("error").and_then(Value::as_str).unwrap_or("unspecified failure");
        return Err(Error::Backend(format!("model server refused weights: {msg}")));
    }
    let model = |role: &str, spec: &ModelSpec| ImageModel {
        client: client.clone(),
        role: role.into(),
        spec: spec.clone(),
    };
    let detector = Arc::new(RemoteDetector {
        model: model("face_detector", &cfg.face_detector),
        threshold: cfg.detection_threshold,
    });
    let semantic = Arc::new(RemoteSemantic(model("semantic_encoder", &cfg.semantic_encoder)));
    let identity: Arc<dyn IdentityEncoder> = Arc::new(RemoteIdentity(model("identity_encoder", &cfg.identity_encoder)));
    let mut reid_encoders: BTreeMap<String, Arc<dyn IdentityEncoder>> = cfg
        .reid
        .iter()
        .map(|(tag, s)| {
            let e: Arc<dyn IdentityEncoder> = Arc::new(RemoteIdentity(model(&format!("reid:{tag}"), s)));
            (tag.clone(), e)
        })
        .collect();
    if reid_encoders.is_empty() {
        reid_encoders.insert("identity".into(), identity.clone());
    }
    let fid_extractor: Arc<dyn FeatureExtractor> = match &cfg.fid {
        Some(s) => Arc::new(RemoteFeatures(model("fid", s))),
        None => Arc::new(ClsFeatures(semantic.clone())),
    };
    let attribute_classifier = cfg.attribute_classifier.as_ref().map(|s| {
        let c: Arc<dyn AttributeClassifier> = Arc::new(RemoteAttributes {
            model: model("attribute_classifier", s),
            names: AttributeSpec::celeba().names,
        });
        c
    });
    Ok(BackendBundle {
        kind: BackendKind::Pretrained,
        generator: Arc::new(RemoteGenerator {
            client: client.clone(),
            spec: cfg.generator.clone(),
        }),
        inverter: Arc::new(RemoteInverter {
            model: model("inverter", &cfg.inverter),
            detector: detector.clone(),
            min_score: cfg.inversion_min_score,
        }),
        identity_encoder: identity,
        semantic_encoder: semantic,
        face_detector: detector,
        reid_encoders,
        fid_extractor,
        attribute_classifier,
        model_fingerprints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Linear stand-ins for every role, served in-process.
    struct FakeServer {
        calls: usize,
    }

    fn lin(role: &str, i: usize, j: usize) -> f64 {
        let h = role.bytes().fold(7u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
        let v = (h ^ (i as u64).wrapping_mul(0x9E37_79B9) ^ (j as u64).wrapping_mul(0x85EB_CA6B)) % 1000;
        (v as f64 / 1000.0 - 0.5) * 0.02
    }

    fn out_len(role: &str, shape: &[usize]) -> (Vec<usize>, usize) {
        match role {
            "generator" => (vec![3, 4, 4], 48),
            "generator.mapping" => (vec![512], 512),
            "inverter" => (vec![18, 512], LATENT_LEN),
            "semantic_encoder" => (vec![5, 512], 5 * 512),
            "face_detector" => (vec![5], 5),
            _ => {
                let _ = shape;
                (vec![512], 512)
            }
        }
    }

    impl ModelServer for FakeServer {
        fn call(&mut self, header: &Value, payload: &[f32]) -> Result<(Value, Vec<f32>)> {
            self.calls += 1;
            let op = header["op"].as_str().unwrap();
            if op == "hello" {
                return Ok((json!({"ok": true}), vec![]));
            }
            let role = header["role"].as_str().unwrap();
            let shape: Vec<usize> = serde_json::from_value(header["shape"].clone()).unwrap();
            let n_in: usize = shape.iter().product();
            let (oshape, n_out) = out_len(role, &shape);
            if role == "face_detector" {
                let mean = payload[..n_in].iter().sum::<f32>() / n_in as f32;
                return Ok((json!({"ok": true, "shape": oshape}), vec![mean, 0.0, 0.0, 1.0, 1.0]));
            }
            if op == "forward" {
                let y: Vec<f32> = (0..n_out)
                    .map(|i| (0..n_in).map(|j| lin(role, i, j) * payload[j] as f64).sum::<f64>() as f32 + 0.01)
                    .collect();
                Ok((json!({"ok": true, "shape": oshape}), y))
            } else {
                let g = &payload[n_in..];
                let x: Vec<f32> = (0..n_in)
                    .map(|j| (0..n_out).map(|i| lin(role, i, j) * g[i] as f64).sum::<f64>() as f32)
                    .collect();
                Ok((json!({"ok": true, "shape": shape}), x))
            }
        }
    }

    fn config(dir: &Path) -> ModelServerConfig {
        let spec = |name: &str, side: usize| {
            let p = dir.join(name);
            std::fs::write(&p, name.as_bytes()).unwrap();
            ModelSpec {
                weights: p,
                sha256: None,
                input_side: side,
                mean: [0.5; 3],
                std: [0.5; 3],
            }
        };
        ModelServerConfig {
            command: vec!["unused".into()],
            generator: spec("g.bin", 0),
            inverter: spec("e4e.bin", 6),
            identity_encoder: spec("arc.bin", 6),
            semantic_encoder: spec("farl.bin", 8),
            face_detector: spec("det.bin", 0),
            reid: BTreeMap::new(),
            fid: None,
            attribute_classifier: None,
            detection_threshold: 0.0,
            inversion_min_score: -1.0,
        }
    }

    #[test]
    fn frames_roundtrip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &json!({"op": "forward"}), &[1.5, -2.0]).unwrap();
        let (h, p) = read_frame(&mut buf.as_slice()).unwrap();
        assert_eq!(h["op"], "forward");
        assert_eq!(p, vec![1.5, -2.0]);
        assert!(read_frame(&mut &buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn weight_hash_mismatch_is_a_backend_error() {
        let d = tempfile::tempdir().unwrap();
        let mut cfg = config(d.path());
        assert_eq!(cfg.fingerprints().unwrap().len(), 5);
        cfg.identity_encoder.sha256 = Some("00".repeat(32));
        assert!(matches!(cfg.fingerprints(), Err(Error::Backend(_))));
        let good = crate::hashing::sha256_hex(b"arc.bin");
        cfg.identity_encoder.sha256 = Some(good.to_uppercase());
        assert!(cfg.fingerprints().is_ok());
    }

    #[test]
    fn resize_adjoint_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for (from, to) in [((5, 7), (3, 3)), ((4, 4), (9, 9)), ((6, 6), (6, 6))] {
            let r = Resize::new(from, to);
            let x: Vec<f64> = (0..from.0 * from.1 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..to.0 * to.1 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lhs: f64 = r.apply_hwc_to_chw(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(r.adjoint_chw_to_hwc(&y)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
        let same = Resize::new((2, 2), (2, 2));
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let chw = same.apply_hwc_to_chw(&x);
        assert_eq!(chw[0], 0.0);
        assert_eq!(chw[4], 1.0);
    }

    #[test]
    fn adapter_shapes_and_gradients() {
        let d = tempfile::tempdir().unwrap();
        let cfg = config(d.path());
        let fps = cfg.fingerprints().unwrap();
        let b = bundle_with_server(&cfg, fps, Box::new(FakeServer { calls: 0 })).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let code: Vec<f64> = (0..LATENT_LEN).map(|_| rng.random_range(-0.05..0.05)).collect();
        let x = b.generator.synthesize(&code).unwrap();
        assert_eq!((x.height(), x.width()), (4, 4));
        let inv = b.invert(&x).unwrap();
        assert_eq!(inv.as_slice().len(), LATENT_LEN);
        let e = b.embed_identity(&x).unwrap();
        assert!((crate::backend::linalg::norm(e.as_slice()) - 1.0).abs() < 1e-9);
        let f = b.embed_semantic(&x).unwrap();
        assert_eq!(f.patch_count(), 4);

        // Chain rule through normalization and resize against finite differences.
        let g: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let an = b.identity_encoder.embed_vjp(&x, &g).unwrap();
        let dir: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = 1e-3;
        let shift = |s: f64| {
            let v: Vec<f64> = x.as_slice().iter().zip(&dir).map(|(a, d)| a + s * d).collect();
            let e = b.embed_identity(&ImageTensor::new(4, 4, v).unwrap()).unwrap();
            e.as_slice().iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = (shift(h) - shift(-h)) / (2.0 * h);
        let dot: f64 = an.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!((fd - dot).abs() < 1e-3 * dot.abs().max(1.0), "{fd} vs {dot}");
    }

    #[test]
    fn refused_hello_is_reported() {
        struct Refuse;
        impl ModelServer for Refuse {
            fn call(&mut self, _: &Value, _: &[f32]) -> Result<(Value, Vec<f32>)> {
                Ok((json!({"ok": false, "error": "checkpoint corrupt"}), vec![]))
            }
        }
        let d = tempfile::tempdir().unwrap();
        let cfg = config(d.path());
        let err = bundle_with_server(&cfg, BTreeMap::new(), Box::new(Refuse)).unwrap_err();
        assert!(err.to_string().contains("checkpoint corrupt"));
    }

    #[cfg(unix)]
    #[test]
    fn stream_transport_over_a_socket() {
        use std::os::unix::net::UnixStream;
        let (a, b) = UnixStream::pair().unwrap();
        let worker = std::thread::spawn(move || {
            let mut fake = FakeServer { calls: 0 };
            let mut r = BufReader::new(b.try_clone().unwrap());
            let mut w = BufWriter::new(b);
            while let Ok((h, p)) = read_frame(&mut r) {
                let (rh, rp) = fake.call(&h, &p).unwrap();
                write_frame(&mut w, &rh, &rp).unwrap();
            }
            fake.calls
        });
        let mut s = StreamServer::new(BufReader::new(a.try_clone().unwrap()), BufWriter::new(a));
        let (h, p) = s
            .call(&json!({"op": "forward", "role": "generator.mapping", "shape": [512]}), &[0.5; 512])
            .unwrap();
        assert_eq!(h["ok"], true);
        assert_eq!(p.len(), 512);
        drop(s);
        assert_eq!(worker.join().unwrap(), 1);
    }
}
