use std::io::{BufReader, BufWriter};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use super::protocol::{
    self, decode_prediction, encode_predict, read_body, read_frame, read_frame_len, write_frame, Handshake,
    HandshakeReply,
};
use super::{DenoiserError, NoisePredictor};
use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor;

struct Session {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// Noise predictor served by a child process over its stdin/stdout.
///
/// Requests are strictly alternating, so concurrent callers queue on an
/// internal lock. Any transport or protocol error terminates the child and
/// leaves the endpoint closed.
pub struct ExternalDenoiser {
    command: Vec<String>,
    shape: Vec<usize>,
    num_steps: usize,
    session: Mutex<Option<Session>>,
}

impl std::fmt::Debug for ExternalDenoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalDenoiser")
            .field("command", &self.command)
            .field("shape", &self.shape)
            .finish()
    }
}

impl ExternalDenoiser {
    /// Starts `command` and performs the handshake for tensors of `shape`.
    pub fn spawn(command: &[String], schedule: &DiffusionSchedule, shape: &[usize]) -> Result<Self, DenoiserError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| DenoiserError::Protocol("empty denoiser command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut session = Session { child, stdin, stdout };
        match handshake(&mut session, schedule, shape) {
            Ok(()) => {}
            Err(e) => {
                kill(session);
                return Err(e);
            }
        }
        log::debug!("external denoiser {program:?} ready for shape {shape:?}");
        Ok(Self {
            command: command.to_vec(),
            shape: shape.to_vec(),
            num_steps: schedule.num_steps(),
            session: Mutex::new(Some(session)),
        })
    }

    pub fn command(&self) -> &[String] {
        &self.command
    }

    fn exchange(session: &mut Session, t: usize, x_t: &Tensor) -> Result<Tensor, DenoiserError> {
        let payload: Vec<f32> = x_t.data().iter().map(|&v| v as f32).collect();
        write_frame(&mut session.stdin, &encode_predict(t as u32, &payload))?;
        let len = read_frame_len(&mut session.stdout)?
            .ok_or_else(|| DenoiserError::Protocol("peer closed the stream".into()))?;
        let expected = 1 + 4 * payload.len();
        if len != expected {
            // the tag byte plus a whole number of values means a wrongly shaped answer
            let got = len.saturating_sub(1) / 4;
            return Err(if len > 0 && (len - 1) % 4 == 0 {
                DenoiserError::PeerShape {
                    expected: payload.len(),
                    got,
                }
            } else {
                DenoiserError::Protocol(format!("prediction frame of {len} bytes, expected {expected}"))
            });
        }
        let body = read_body(&mut session.stdout, len)?;
        let eps = decode_prediction(&body)?;
        Ok(Tensor::new(x_t.shape().to_vec(), eps.into_iter().map(f64::from).collect())?)
    }
}

fn handshake(session: &mut Session, schedule: &DiffusionSchedule, shape: &[usize]) -> Result<(), DenoiserError> {
    let request = Handshake::new(schedule.params(), shape)?;
    write_frame(&mut session.stdin, &request.encode())?;
    let body = read_frame(&mut session.stdout)?
        .ok_or_else(|| DenoiserError::Protocol("peer closed the stream during handshake".into()))?;
    let reply = HandshakeReply::decode(&body)?;
    if reply.version != protocol::VERSION {
        return Err(DenoiserError::Version {
            ours: protocol::VERSION,
            theirs: reply.version,
        });
    }
    if reply.status != 0 {
        return Err(DenoiserError::Rejected(reply.status));
    }
    Ok(())
}

fn kill(mut session: Session) {
    let _ = session.child.kill();
    let _ = session.child.wait();
}

impl NoisePredictor for ExternalDenoiser {
    fn name(&self) -> String {
        format!("external({})", self.command.join(" "))
    }

    fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor, DenoiserError> {
        x_t.expect_shape(&self.shape)?;
        if t == 0 || t > self.num_steps {
            return Err(crate::schedule::ScheduleError::Timestep { t, max: self.num_steps }.into());
        }
        let mut guard = self.session.lock().unwrap_or_else(|e| e.into_inner());
        let session = guard.as_mut().ok_or(DenoiserError::Closed)?;
        match Self::exchange(session, t, x_t) {
            Ok(eps) => Ok(eps),
            Err(e) => {
                log::warn!("terminating external denoiser after error: {e}");
                if let Some(s) = guard.take() {
                    kill(s);
                }
                Err(e)
            }
        }
    }
}

impl Drop for ExternalDenoiser {
    fn drop(&mut self) {
        let slot = self.session.get_mut().unwrap_or_else(|e| e.into_inner());
        if let Some(session) = slot.take() {
            let Session { mut child, stdin, stdout } = session;
            // closing stdin lets a well-behaved peer exit on its own
            drop(stdin);
            drop(stdout);
            match child.try_wait() {
                Ok(Some(_)) => {}
                _ => {
                    std::thread::sleep(std::time::Duration::from_millis(20));
                    if !matches!(child.try_wait(), Ok(Some(_))) {
                        let _ = child.kill();
                    }
                    let _ = child.wait();
                }
            }
        }
    }
}
