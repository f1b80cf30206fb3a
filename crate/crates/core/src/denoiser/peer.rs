//! Reference peers for the external protocol, including deliberately broken ones.

use std::io::{Read, Write};

use super::protocol::{
    read_frame, serve, write_frame, AnalyticPeer, Handshake, HandshakeReply, PeerHandler, PeerPrior, VERSION,
};
use super::{DenoiserError, GaussianPrior};
use crate::io::read_tensor;

#[derive(Debug, Clone)]
pub enum PeerMode {
    Analytic(PeerPrior),
    /// Predicts zero noise.
    Zero,
    /// Answers with one value too many.
    WrongShape,
    /// Replies to the handshake with a different protocol version.
    BadVersion,
    /// Refuses the handshake with this status.
    Reject(u8),
    /// Answers the first prediction with bytes that are not a frame.
    Garbage,
}

impl PeerMode {
    pub const NAMES: [&'static str; 6] = ["analytic", "zero", "wrong-shape", "bad-version", "reject", "garbage"];

    /// Parses `[--mode M] [--mean X --var V | --mean-file F --var-file F] [--status S]`.
    pub fn from_args(args: &[String]) -> Result<PeerMode, String> {
        let mut mode = "analytic".to_string();
        let (mut mean, mut var) = (0.5, 0.05);
        let (mut mean_file, mut var_file) = (None, None);
        let mut status = 7u8;
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let mut value = || it.next().cloned().ok_or_else(|| format!("{flag} needs a value"));
            match flag.as_str() {
                "--mode" => mode = value()?,
                "--mean" => mean = value()?.parse().map_err(|e| format!("--mean: {e}"))?,
                "--var" => var = value()?.parse().map_err(|e| format!("--var: {e}"))?,
                "--mean-file" => mean_file = Some(value()?),
                "--var-file" => var_file = Some(value()?),
                "--status" => status = value()?.parse().map_err(|e| format!("--status: {e}"))?,
                _ => return Err(format!("unknown flag {flag}")),
            }
        }
        Ok(match mode.as_str() {
            "analytic" => PeerMode::Analytic(match (mean_file, var_file) {
                (Some(m), Some(v)) => {
                    let load = |p: &str| read_tensor(std::path::Path::new(p)).map_err(|e| format!("{p}: {e}"));
                    PeerPrior::Full(GaussianPrior::new(load(&m)?, load(&v)?).map_err(|e| e.to_string())?)
                }
                (None, None) => PeerPrior::Isotropic { mean, variance: var },
                _ => return Err("--mean-file and --var-file go together".into()),
            }),
            "zero" => PeerMode::Zero,
            "wrong-shape" => PeerMode::WrongShape,
            "bad-version" => PeerMode::BadVersion,
            "reject" => PeerMode::Reject(status),
            "garbage" => PeerMode::Garbage,
            other => return Err(format!("unknown mode {other:?}; one of {:?}", PeerMode::NAMES)),
        })
    }
}

struct Scripted {
    mode: PeerMode,
    n: usize,
}

impl PeerHandler for Scripted {
    fn handshake(&mut self, request: &Handshake) -> u8 {
        self.n = request.payload_len();
        0
    }

    fn predict(&mut self, _t: u32, _x: &[f32]) -> Result<Vec<f32>, DenoiserError> {
        Ok(match self.mode {
            PeerMode::WrongShape => vec![0.0; self.n + 1],
            _ => vec![0.0; self.n],
        })
    }
}

fn reply_only(r: &mut impl Read, w: &mut impl Write, reply: HandshakeReply) -> Result<(), DenoiserError> {
    read_frame(r)?;
    write_frame(w, &reply.encode())?;
    Ok(())
}

/// Serves one session on `r`/`w` according to `mode`.
pub fn run_peer(mode: PeerMode, r: &mut impl Read, w: &mut impl Write) -> Result<(), DenoiserError> {
    match mode {
        PeerMode::Analytic(prior) => serve(r, w, &mut AnalyticPeer::new(prior)),
        PeerMode::Zero | PeerMode::WrongShape => serve(r, w, &mut Scripted { mode, n: 0 }),
        PeerMode::BadVersion => reply_only(
            r,
            w,
            HandshakeReply {
                version: VERSION + 98,
                status: 0,
            },
        ),
        PeerMode::Reject(status) => reply_only(r, w, HandshakeReply { version: VERSION, status }),
        PeerMode::Garbage => {
            reply_only(r, w, HandshakeReply { version: VERSION, status: 0 })?;
            read_frame(r)?;
            // a huge declared length followed by too few bytes
            w.write_all(&[0xff, 0xff, 0xff, 0x7f, 1, 2, 3])?;
            w.flush()?;
            Ok(())
        }
    }
}
