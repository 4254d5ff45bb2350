//! Subprocess contract for external explainers.
//!
//! The harness runs one process per mosaic set:
//!
//! ```text
//! <command> [fixed args] --manifest <manifest.json> --output-dir <dir> --target-class-field target_class
//! ```
//!
//! The explainer writes `<mosaic id>.foc1` for every mosaic and exits 0.
//! Exit codes: 1 usage, 2 model/load failure, 3 inference failure. stdout is
//! either empty or `PROGRESS <done>/<total>` lines; stderr is free-form.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::Serialize;

use crate::attribution::{validate_run, ValidationReport};
use crate::error::{FocusError, Result};
use crate::mosaic::MosaicManifest;

pub const TARGET_CLASS_FIELD: &str = "target_class";
const STDERR_TAIL_LINES: usize = 20;
const POLL_INTERVAL: Duration = Duration::from_millis(10);

pub mod exit_code {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const MODEL_LOAD: i32 = 2;
    pub const INFERENCE: i32 = 3;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplainerInvocation {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub timeout: Duration,
    /// Environment variables passed to the child; everything else is
    /// cleared except `PATH`.
    pub env_passthrough: Vec<String>,
}

impl ExplainerInvocation {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>, timeout: Duration) -> Result<Self> {
        let program = program.into();
        if program.as_os_str().is_empty() {
            return Err(FocusError::InvalidArgument("explainer command is empty".into()));
        }
        if timeout.is_zero() {
            return Err(FocusError::InvalidArgument("explainer timeout must be positive".into()));
        }
        Ok(ExplainerInvocation {
            program,
            args,
            timeout,
            env_passthrough: Vec::new(),
        })
    }

    pub fn with_env(mut self, vars: impl IntoIterator<Item = String>) -> Self {
        self.env_passthrough.extend(vars);
        self
    }
}

/// Parse one stdout line of the progress protocol.
pub fn parse_progress(line: &str) -> Option<(u64, u64)> {
    let rest = line.trim().strip_prefix("PROGRESS ")?;
    let (done, total) = rest.split_once('/')?;
    Some((done.parse().ok()?, total.parse().ok()?))
}

#[derive(Debug, Clone, Serialize)]
pub struct ExplainerRun {
    pub report: ValidationReport,
    pub duration_secs: f64,
    pub last_progress: Option<(u64, u64)>,
}

/// Run the explainer over a manifest and validate what it wrote.
pub fn run_explainer(invocation: &ExplainerInvocation, manifest_path: &Path, out_dir: &Path) -> Result<ExplainerRun> {
    let manifest = MosaicManifest::load(manifest_path)?;
    std::fs::create_dir_all(out_dir).map_err(|e| FocusError::io(out_dir, e))?;

    let mut cmd = Command::new(&invocation.program);
    cmd.args(&invocation.args)
        .arg("--manifest")
        .arg(manifest_path)
        .arg("--output-dir")
        .arg(out_dir)
        .arg("--target-class-field")
        .arg(TARGET_CLASS_FIELD)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .env_clear();
    for var in std::iter::once("PATH").chain(invocation.env_passthrough.iter().map(String::as_str)) {
        if let Some(v) = std::env::var_os(var) {
            cmd.env(var, v);
        }
    }

    let start = Instant::now();
    let mut child = cmd.spawn().map_err(|e| FocusError::io(&invocation.program, e))?;

    let stdout = child.stdout.take().expect("piped stdout");
    let stdout_reader = thread::spawn(move || {
        let mut last = None;
        for line in BufReader::new(stdout).lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            match parse_progress(&line) {
                Some(p) => {
                    debug!("explainer progress {}/{}", p.0, p.1);
                    last = Some(p);
                }
                None => warn!("explainer wrote a non-protocol stdout line: {line}"),
            }
        }
        last
    });
    let mut stderr = child.stderr.take().expect("piped stderr");
    let stderr_reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr.read_to_end(&mut buf);
        let text = String::from_utf8_lossy(&buf).into_owned();
        let mut tail: VecDeque<&str> = VecDeque::with_capacity(STDERR_TAIL_LINES);
        for line in text.lines() {
            debug!("explainer: {line}");
            if tail.len() == STDERR_TAIL_LINES {
                tail.pop_front();
            }
            tail.push_back(line);
        }
        tail.into_iter().collect::<Vec<_>>().join("\n")
    });

    let status = loop {
        match child.try_wait().map_err(|e| FocusError::io(&invocation.program, e))? {
            Some(status) => break status,
            None if start.elapsed() >= invocation.timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(FocusError::ExplainerTimeout(invocation.timeout.as_secs_f64()));
            }
            None => thread::sleep(POLL_INTERVAL),
        }
    };
    let duration_secs = start.elapsed().as_secs_f64();
    let last_progress = stdout_reader.join().unwrap_or(None);
    let stderr_tail = stderr_reader.join().unwrap_or_default();

    if !status.success() {
        return Err(FocusError::ExplainerFailed {
            code: status.code(),
            stderr_tail,
        });
    }
    Ok(ExplainerRun {
        report: validate_run(&manifest, out_dir),
        duration_secs,
        last_progress,
    })
}
