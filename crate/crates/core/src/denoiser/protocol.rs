//! Binary protocol between the sampler and an external noise predictor.
//!
//! Messages travel over the peer's stdin/stdout as frames: a `u32` little-endian
//! body length followed by the body. Bodies, all little-endian:
//!
//! ```text
//! HANDSHAKE req   "NRLG" | u16 version | u32 T | f64 beta_start | f64 beta_end | u8 ndim | u32 dims[ndim]
//! HANDSHAKE resp  "NRLG" | u16 version | u8 status (0 = ok)
//! PREDICT req     u8 2 | u32 t | f32 payload[∏dims]
//! PREDICT resp    u8 3 | f32 payload[∏dims]
//! ```
//!
//! The timestep is the integer index into the schedule both sides derive from
//! the handshake parameters.

use std::io::{self, Read, Write};

use super::{analytic_predict_noise, DenoiserError, GaussianPrior};
use crate::schedule::{DiffusionSchedule, ScheduleParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NRLG";
pub const VERSION: u16 = 1;
pub const MSG_PREDICT: u8 = 2;
pub const MSG_PREDICTION: u8 = 3;

/// Upper bound on accepted frame bodies (256 MiB).
pub const MAX_FRAME: usize = 256 << 20;

pub fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    let len = u32::try_from(body.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// Reads one frame length; `None` on a clean end of stream.
pub fn read_frame_len(r: &mut impl Read) -> io::Result<Option<usize>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut len[got..])?;
        if n == 0 {
            return if got == 0 {
                Ok(None)
            } else {
                Err(io::ErrorKind::UnexpectedEof.into())
            };
        }
        got += n;
    }
    Ok(Some(u32::from_le_bytes(len) as usize))
}

pub fn read_body(r: &mut impl Read, len: usize) -> io::Result<Vec<u8>> {
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(body)
}

pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    match read_frame_len(r)? {
        None => Ok(None),
        Some(len) => read_body(r, len).map(Some),
    }
}

struct Bytes<'a> {
    buf: &'a [u8],
}

impl<'a> Bytes<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DenoiserError> {
        if self.buf.len() < n {
            return Err(DenoiserError::Protocol("truncated message".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, DenoiserError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DenoiserError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DenoiserError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, DenoiserError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(self) -> Result<(), DenoiserError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(DenoiserError::Protocol(format!("{} trailing bytes", self.buf.len())))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Handshake {
    pub version: u16,
    pub num_steps: u32,
    pub beta_start: f64,
    pub beta_end: f64,
    pub dims: Vec<u32>,
}

impl Handshake {
    pub fn new(params: ScheduleParams, shape: &[usize]) -> Result<Self, DenoiserError> {
        if shape.len() > u8::MAX as usize {
            return Err(DenoiserError::Protocol("too many dimensions".into()));
        }
        let dims = shape
            .iter()
            .map(|&d| u32::try_from(d))
            .collect::<Result<_, _>>()
            .map_err(|_| DenoiserError::Protocol("dimension exceeds u32".into()))?;
        let num_steps = u32::try_from(params.num_steps).map_err(|_| DenoiserError::Protocol("T exceeds u32".into()))?;
        Ok(Self {
            version: VERSION,
            num_steps,
            beta_start: params.beta_start,
            beta_end: params.beta_end,
            dims,
        })
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        ScheduleParams {
            num_steps: self.num_steps as usize,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn payload_len(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(27 + 4 * self.dims.len());
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&self.version.to_le_bytes());
        b.extend_from_slice(&self.num_steps.to_le_bytes());
        b.extend_from_slice(&self.beta_start.to_le_bytes());
        b.extend_from_slice(&self.beta_end.to_le_bytes());
        b.push(self.dims.len() as u8);
        for d in &self.dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b
    }

    pub fn decode(body: &[u8]) -> Result<Self, DenoiserError> {
        let mut r = Bytes { buf: body };
        if r.take(4)? != MAGIC {
            return Err(DenoiserError::Protocol("bad handshake magic".into()));
        }
        let version = r.u16()?;
        let num_steps = r.u32()?;
        let beta_start = r.f64()?;
        let beta_end = r.f64()?;
        let ndim = r.u8()?;
        let dims = (0..ndim).map(|_| r.u32()).collect::<Result<_, _>>()?;
        r.finish()?;
        Ok(Self {
            version,
            num_steps,
            beta_start,
            beta_end,
            dims,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandshakeReply {
    pub version: u16,
    pub status: u8,
}

impl HandshakeReply {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&self.version.to_le_bytes());
        b.push(self.status);
        b
    }

    pub fn decode(body: &[u8]) -> Result<Self, DenoiserError> {
        let mut r = Bytes { buf: body };
        if r.take(4)? != MAGIC {
            return Err(DenoiserError::Protocol("bad handshake reply magic".into()));
        }
        let version = r.u16()?;
        let status = r.u8()?;
        r.finish()?;
        Ok(Self { version, status })
    }
}

fn encode_payload(tag: u8, t: Option<u32>, payload: &[f32]) -> Vec<u8> {
    let mut b = Vec::with_capacity(5 + 4 * payload.len());
    b.push(tag);
    if let Some(t) = t {
        b.extend_from_slice(&t.to_le_bytes());
    }
    for v in payload {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

fn decode_payload(bytes: &[u8]) -> Result<Vec<f32>, DenoiserError> {
    if bytes.len() % 4 != 0 {
        return Err(DenoiserError::Protocol("payload is not a whole number of f32 values".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn encode_predict(t: u32, payload: &[f32]) -> Vec<u8> {
    encode_payload(MSG_PREDICT, Some(t), payload)
}

pub fn decode_predict(body: &[u8]) -> Result<(u32, Vec<f32>), DenoiserError> {
    let mut r = Bytes { buf: body };
    let tag = r.u8()?;
    if tag != MSG_PREDICT {
        return Err(DenoiserError::Protocol(format!("unexpected message type {tag}")));
    }
    let t = r.u32()?;
    Ok((t, decode_payload(r.buf)?))
}

pub fn encode_prediction(payload: &[f32]) -> Vec<u8> {
    encode_payload(MSG_PREDICTION, None, payload)
}

pub fn decode_prediction(body: &[u8]) -> Result<Vec<f32>, DenoiserError> {
    match body.first() {
        Some(&MSG_PREDICTION) => decode_payload(&body[1..]),
        Some(&tag) => Err(DenoiserError::Protocol(format!("unexpected message type {tag}"))),
        None => Err(DenoiserError::Protocol("empty message".into())),
    }
}

/// Server side of the protocol.
pub trait PeerHandler {
    /// Status for the handshake reply; `0` accepts.
    fn handshake(&mut self, request: &Handshake) -> u8;
    fn predict(&mut self, t: u32, x_t: &[f32]) -> Result<Vec<f32>, DenoiserError>;
}

/// Answers one handshake and then predictions until the client closes the stream.
pub fn serve(r: &mut impl Read, w: &mut impl Write, handler: &mut impl PeerHandler) -> Result<(), DenoiserError> {
    let body = read_frame(r)?.ok_or_else(|| DenoiserError::Protocol("stream closed before handshake".into()))?;
    let hs = Handshake::decode(&body)?;
    let status = if hs.version == VERSION { handler.handshake(&hs) } else { 1 };
    write_frame(w, &HandshakeReply { version: VERSION, status }.encode())?;
    if status != 0 {
        return Ok(());
    }
    let n = hs.payload_len();
    while let Some(body) = read_frame(r)? {
        let (t, x) = decode_predict(&body)?;
        if x.len() != n {
            return Err(DenoiserError::PeerShape {
                expected: n,
                got: x.len(),
            });
        }
        let eps = handler.predict(t, &x)?;
        write_frame(w, &encode_prediction(&eps))?;
    }
    Ok(())
}

/// Prior a serving peer uses for the analytic predictor.
#[derive(Debug, Clone)]
pub enum PeerPrior {
    /// Same mean and variance everywhere; the shape comes from the handshake.
    Isotropic { mean: f64, variance: f64 },
    Full(GaussianPrior),
}

/// Peer that answers with the exact analytic predictor, computed in `f64`.
#[derive(Debug)]
pub struct AnalyticPeer {
    prior_spec: PeerPrior,
    state: Option<(GaussianPrior, DiffusionSchedule)>,
}

impl AnalyticPeer {
    pub fn new(prior: PeerPrior) -> Self {
        Self {
            prior_spec: prior,
            state: None,
        }
    }
}

impl PeerHandler for AnalyticPeer {
    fn handshake(&mut self, request: &Handshake) -> u8 {
        let Ok(schedule) = request.schedule_params().build() else {
            return 2;
        };
        let shape = request.shape();
        let prior = match &self.prior_spec {
            PeerPrior::Isotropic { mean, variance } => match GaussianPrior::isotropic(shape, *mean, *variance) {
                Ok(p) => p,
                Err(_) => return 3,
            },
            PeerPrior::Full(p) if p.shape() == shape.as_slice() => p.clone(),
            PeerPrior::Full(_) => return 3,
        };
        self.state = Some((prior, schedule));
        0
    }

    fn predict(&mut self, t: u32, x_t: &[f32]) -> Result<Vec<f32>, DenoiserError> {
        let (prior, schedule) = self.state.as_ref().ok_or(DenoiserError::Closed)?;
        let x = Tensor::new(prior.shape().to_vec(), x_t.iter().map(|&v| v as f64).collect())?;
        let eps = analytic_predict_noise(prior, schedule, &x, t as usize)?;
        Ok(eps.data().iter().map(|&v| v as f32).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn handshake_round_trip() {
        let hs = Handshake::new(ScheduleParams::default(), &[4, 5, 3]).unwrap();
        let body = hs.encode();
        assert_eq!(&body[..4], b"NRLG");
        assert_eq!(body.len(), 4 + 2 + 4 + 8 + 8 + 1 + 12);
        assert_eq!(Handshake::decode(&body).unwrap(), hs);
        assert!(Handshake::decode(&body[..10]).is_err());
        let reply = HandshakeReply { version: 1, status: 0 };
        assert_eq!(HandshakeReply::decode(&reply.encode()).unwrap(), reply);
    }

    #[test]
    fn predict_round_trip() {
        let body = encode_predict(17, &[1.5, -2.0]);
        assert_eq!(body[0], 2);
        assert_eq!(decode_predict(&body).unwrap(), (17, vec![1.5, -2.0]));
        let body = encode_prediction(&[0.25]);
        assert_eq!(decode_prediction(&body).unwrap(), vec![0.25]);
        assert!(decode_prediction(&[9, 0, 0, 0, 0]).is_err());
        assert!(decode_prediction(&[3, 0, 0]).is_err());
    }

    #[test]
    fn frames_are_length_prefixed() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"abc").unwrap();
        assert_eq!(buf, [3, 0, 0, 0, b'a', b'b', b'c']);
        let mut r = buf.as_slice();
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"abc");
        assert!(read_frame(&mut r).unwrap().is_none());
        let mut partial: &[u8] = &[1, 0];
        assert!(read_frame(&mut partial).is_err());
    }

    #[test]
    fn serve_in_memory() {
        let hs = Handshake::new(ScheduleParams::default(), &[2]).unwrap();
        let mut input = Vec::new();
        write_frame(&mut input, &hs.encode()).unwrap();
        write_frame(&mut input, &encode_predict(50, &[0.5, 0.1])).unwrap();
        let mut out = Vec::new();
        let mut peer = AnalyticPeer::new(PeerPrior::Isotropic {
            mean: 0.5,
            variance: 0.01,
        });
        serve(&mut input.as_slice(), &mut out, &mut peer).unwrap();
        let mut r = out.as_slice();
        let reply = HandshakeReply::decode(&read_frame(&mut r).unwrap().unwrap()).unwrap();
        assert_eq!(reply.status, 0);
        let eps = decode_prediction(&read_frame(&mut r).unwrap().unwrap()).unwrap();
        let schedule = ScheduleParams::default().build().unwrap();
        let prior = GaussianPrior::isotropic(vec![2], 0.5, 0.01).unwrap();
        let local = analytic_predict_noise(&prior, &schedule, &Tensor::from_vec(vec![0.5, 0.1]), 50).unwrap();
        for (a, b) in eps.iter().zip(local.data()) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }
}
