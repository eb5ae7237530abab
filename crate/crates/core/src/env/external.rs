//! JSON-lines bridge to out-of-process environments.
//!
//! One UTF-8 JSON object per line. Requests:
//!
//! ```text
//! {"type":"reset"}
//! {"type":"step","action":[itn,irs]}
//! ```
//!
//! Responses:
//!
//! ```text
//! {"type":"state","reward":r,"action":[i,j],"t":n}
//! {"type":"transition","reward":r,"t":n,"done":b}
//! ```
//!
//! [`serve`] exposes any [`Environment`] over the same protocol, which is
//! what the `vbmcts serve` subcommand does for the surrogate.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EnvError, Environment, StepOutcome};
use crate::features::{ActionPair, State};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Request {
    Reset,
    Step { action: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Response {
    State {
        reward: f64,
        action: [f64; 2],
        t: u32,
    },
    Transition {
        reward: f64,
        t: u32,
        done: bool,
    },
    /// Not part of the client contract; sent by [`serve`] when a request fails.
    Error { message: String },
}

/// Parses one response line, attaching the line to any error.
pub fn parse_response(line: &str) -> Result<Response, EnvError> {
    let response: Response = serde_json::from_str(line).map_err(|e| EnvError::Protocol {
        message: e.to_string(),
        line: line.to_string(),
    })?;
    if let Response::Error { message } = &response {
        return Err(EnvError::Protocol {
            message: format!("environment reported: {message}"),
            line: line.to_string(),
        });
    }
    Ok(response)
}

/// Client side of the protocol.
pub struct ExternalEnv {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    timeout: Duration,
    horizon: u32,
    state: State,
    child: Option<Child>,
}

impl std::fmt::Debug for ExternalEnv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalEnv")
            .field("timeout", &self.timeout)
            .field("horizon", &self.horizon)
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

impl ExternalEnv {
    /// Launches `command` (program followed by arguments) and talks to its stdio.
    pub fn spawn(command: &[String], horizon: u32, timeout: Duration) -> Result<Self, EnvError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| EnvError::InvalidConfig("empty environment command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut env = Self::from_streams(stdout, stdin, horizon, timeout);
        env.child = Some(child);
        Ok(env)
    }

    /// Uses an existing byte stream pair; responses are read on a helper thread.
    pub fn from_streams<R, W>(reader: R, writer: W, horizon: u32, timeout: Duration) -> Self
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        ExternalEnv {
            writer: Box::new(writer),
            lines: rx,
            timeout,
            horizon,
            state: State::start(),
            child: None,
        }
    }

    /// Sends one request and waits for the matching response line.
    pub fn external_step(&mut self, request: &Request) -> Result<Response, EnvError> {
        let line = serde_json::to_string(request)?;
        writeln!(self.writer, "{line}")?;
        self.writer.flush()?;
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => parse_response(&line),
            Ok(Err(e)) => Err(EnvError::Io(e)),
            Err(RecvTimeoutError::Timeout) => Err(EnvError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(EnvError::StreamClosed),
        }
    }
}

impl Drop for ExternalEnv {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn unexpected(response: &Response, wanted: &str) -> EnvError {
    EnvError::Protocol {
        message: format!("expected a {wanted} response"),
        line: serde_json::to_string(response).unwrap_or_default(),
    }
}

impl Environment for ExternalEnv {
    fn reset(&mut self) -> Result<State, EnvError> {
        match self.external_step(&Request::Reset)? {
            Response::State { reward, action, t } => {
                self.state = State {
                    prev_reward: reward,
                    prev_action: ActionPair {
                        itn: action[0],
                        irs: action[1],
                    },
                    timestep: t,
                };
                Ok(self.state)
            }
            other => Err(unexpected(&other, "state")),
        }
    }

    fn step(&mut self, action: ActionPair) -> Result<StepOutcome, EnvError> {
        let request = Request::Step {
            action: action.as_array(),
        };
        match self.external_step(&request)? {
            Response::Transition { reward, t, done } => {
                let next = self.state.advance(action, reward);
                if t != next.timestep {
                    return Err(EnvError::Protocol {
                        message: format!("expected t = {}, got {t}", next.timestep),
                        line: format!("{{\"type\":\"transition\",\"t\":{t}}}"),
                    });
                }
                self.state = next;
                Ok(StepOutcome {
                    state: next,
                    reward,
                    done,
                })
            }
            other => Err(unexpected(&other, "transition")),
        }
    }

    fn horizon(&self) -> u32 {
        self.horizon
    }
}

/// Serves `env` over the protocol until the reader is exhausted.
pub fn serve<E, R, W>(env: &mut E, reader: R, mut writer: W) -> Result<(), EnvError>
where
    E: Environment + ?Sized,
    R: BufRead,
    W: Write,
{
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(Request::Reset) => match env.reset() {
                Ok(s) => Response::State {
                    reward: s.prev_reward,
                    action: s.prev_action.as_array(),
                    t: s.timestep,
                },
                Err(e) => Response::Error {
                    message: e.to_string(),
                },
            },
            Ok(Request::Step { action }) => {
                let action = ActionPair {
                    itn: action[0],
                    irs: action[1],
                };
                match env.step(action) {
                    Ok(out) => Response::Transition {
                        reward: out.reward,
                        t: out.state.timestep,
                        done: out.done,
                    },
                    Err(e) => Response::Error {
                        message: e.to_string(),
                    },
                }
            }
            Err(e) => Response::Error {
                message: format!("bad request: {e}"),
            },
        };
        writeln!(writer, "{}", serde_json::to_string(&response)?)?;
        writer.flush()?;
    }
    Ok(())
}
