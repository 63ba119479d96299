use std::fs::File;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::BackendResult;
use crate::model::ComputeUnitDescription;

#[derive(Debug, Error)]
#[error("cannot spawn `{executable}`: {source}")]
pub struct SpawnFailure {
    pub executable: String,
    #[source]
    pub source: std::io::Error,
}

/// Counts live child processes and remembers the peak.
#[derive(Debug, Default)]
pub struct ProcessGauge {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl ProcessGauge {
    fn enter(&self) {
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn exit(&self) {
        self.live.fetch_sub(1, Ordering::SeqCst);
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

/// Runs `cu` as a child process in `workdir`, capturing its output streams
/// into `workdir/stdout` and `workdir/stderr`. Setting `cancel` kills the
/// child; a killed child reports a nonzero exit code.
pub fn execute_local(
    cu: &ComputeUnitDescription,
    workdir: &Path,
    cancel: &AtomicBool,
    gauge: &ProcessGauge,
) -> Result<BackendResult, SpawnFailure> {
    let spawn_err = |source| SpawnFailure {
        executable: cu.executable.clone(),
        source,
    };
    let stdout_path = workdir.join("stdout");
    let stderr_path = workdir.join("stderr");
    let stdout = File::create(&stdout_path).map_err(spawn_err)?;
    let stderr = File::create(&stderr_path).map_err(spawn_err)?;

    let started = Instant::now();
    let mut child = Command::new(&cu.executable)
        .args(&cu.args)
        .current_dir(workdir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .spawn()
        .map_err(spawn_err)?;
    gauge.enter();

    let mut backoff = Duration::from_micros(200);
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) => {}
            Err(e) => {
                log::warn!("waiting on {}: {e}", cu.id);
                break None;
            }
        }
        if cancel.load(Ordering::SeqCst) {
            let _ = child.kill();
            break child.wait().ok();
        }
        std::thread::sleep(backoff);
        backoff = (backoff * 2).min(Duration::from_millis(10));
    };
    gauge.exit();

    let exit_code = status.and_then(|s| s.code()).unwrap_or(-1);
    Ok(BackendResult {
        cu_id: cu.id.clone(),
        exit_code,
        duration_s: started.elapsed().as_secs_f64(),
        stdout: Some(stdout_path),
        stderr: Some(stderr_path),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(exe: &str, args: &[&str]) -> Result<BackendResult, SpawnFailure> {
        let dir = tempfile::tempdir().unwrap();
        let mut cu = ComputeUnitDescription::new("c1", exe);
        cu.args = args.iter().map(|s| (*s).to_owned()).collect();
        let gauge = ProcessGauge::default();
        let r = execute_local(&cu, dir.path(), &AtomicBool::new(false), &gauge);
        assert_eq!(gauge.live(), 0);
        r
    }

    #[test]
    fn true_exits_zero() {
        assert_eq!(run("true", &[]).unwrap().exit_code, 0);
    }

    #[test]
    fn false_exits_one() {
        assert_eq!(run("false", &[]).unwrap().exit_code, 1);
    }

    #[test]
    fn missing_executable() {
        assert!(run("/definitely/not/here", &[]).is_err());
    }

    #[test]
    fn captures_stdout() {
        let dir = tempfile::tempdir().unwrap();
        let mut cu = ComputeUnitDescription::new("c1", "sh");
        cu.args = vec!["-c".into(), "echo hi; echo oops >&2".into()];
        let r = execute_local(&cu, dir.path(), &AtomicBool::new(false), &ProcessGauge::default()).unwrap();
        assert_eq!(std::fs::read_to_string(r.stdout.unwrap()).unwrap(), "hi\n");
        assert_eq!(std::fs::read_to_string(r.stderr.unwrap()).unwrap(), "oops\n");
    }

    #[test]
    fn cancel_kills_child() {
        let dir = tempfile::tempdir().unwrap();
        let mut cu = ComputeUnitDescription::new("c1", "sleep");
        cu.args = vec!["10".into()];
        let cancel = AtomicBool::new(true);
        let t = Instant::now();
        let r = execute_local(&cu, dir.path(), &cancel, &ProcessGauge::default()).unwrap();
        assert_ne!(r.exit_code, 0);
        assert!(t.elapsed() < Duration::from_secs(5));
    }
}
