use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Runs model-generated programs.
pub trait ProgramExecutor: Send + Sync {
    /// Returns captured standard output.
    fn execute(&self, code: &str) -> Result<String>;
}

/// Writes the program to a file in a scratch directory and runs it as a
/// subprocess under a wall-clock limit.
///
/// The child gets an empty environment apart from `PATH`, a null stdin and
/// the scratch directory as its working directory. Network isolation is the
/// job of `command`: prefix it with e.g. `unshare -rn` where available.
#[derive(Clone, Debug)]
pub struct ProcessExecutor {
    pub command: Vec<String>,
    pub timeout: Duration,
    pub scratch_dir: PathBuf,
    pub file_suffix: String,
}

impl ProcessExecutor {
    pub fn new(command: Vec<String>, timeout: Duration, scratch_dir: impl Into<PathBuf>) -> Self {
        ProcessExecutor {
            command,
            timeout,
            scratch_dir: scratch_dir.into(),
            file_suffix: ".py".into(),
        }
    }

    pub fn python(timeout: Duration, scratch_dir: impl Into<PathBuf>) -> Self {
        Self::new(vec!["python3".into()], timeout, scratch_dir)
    }
}

fn drain(mut pipe: impl Read + Send + 'static) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = pipe.read_to_end(&mut buf);
        buf
    })
}

impl ProgramExecutor for ProcessExecutor {
    fn execute(&self, code: &str) -> Result<String> {
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| Error::Config("executor command is empty".into()))?;
        std::fs::create_dir_all(&self.scratch_dir).map_err(|e| Error::io(&self.scratch_dir, e))?;
        let script = tempfile::Builder::new()
            .prefix("program-")
            .suffix(&self.file_suffix)
            .tempfile_in(&self.scratch_dir)
            .map_err(|e| Error::io(&self.scratch_dir, e))?;
        std::fs::write(script.path(), code).map_err(|e| Error::io(script.path(), e))?;

        let mut child = Command::new(program)
            .args(args)
            .arg(script.path())
            .current_dir(&self.scratch_dir)
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_default())
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::ExecutorFailure {
                code: None,
                stderr: format!("failed to start {program}: {e}"),
            })?;
        let stdout = drain(child.stdout.take().expect("piped stdout"));
        let stderr = drain(child.stderr.take().expect("piped stderr"));

        let started = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if started.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(Error::ExecutorTimeout {
                        timeout_ms: self.timeout.as_millis() as u64,
                    });
                }
                Ok(None) => thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(Error::io(script.path(), e)),
            }
        };
        let out = String::from_utf8_lossy(&stdout.join().unwrap_or_default()).into_owned();
        let err = String::from_utf8_lossy(&stderr.join().unwrap_or_default()).into_owned();
        if !status.success() {
            return Err(Error::ExecutorFailure {
                code: status.code(),
                stderr: err.trim().to_string(),
            });
        }
        Ok(out)
    }
}

/// Pulls the first fenced code block out of a model reply, or returns the
/// whole reply when there is none.
pub fn extract_code(reply: &str) -> String {
    if let Some(start) = reply.find("```") {
        let after = &reply[start + 3..];
        // skip the info string (e.g. "python")
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        let end = body.find("```").unwrap_or(body.len());
        return body[..end].trim_end().to_string();
    }
    reply.trim().to_string()
}
