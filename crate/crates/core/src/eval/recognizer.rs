//! Bridge to an external speech recognizer, spoken as a subprocess. The
//! recognizer is a black box here: it gets audio, prints a transcript, and
//! the bridge normalizes the transcript into score tokens.
//!
//! Two handoff conventions:
//! - a `{wav}` placeholder anywhere in the command is substituted with the
//!   path of a temporary WAV file, for recognizers that want a file;
//! - otherwise the WAV bytes are streamed to the child's stdin.

use std::io::Write;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::eval::score::tokenize;
use crate::signal::{wav_bytes, Waveform};

/// How to invoke the external recognizer.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognizerSpec {
    /// Whitespace-split command line; `{wav}` tokens receive the audio path.
    pub command: String,
    /// Wall-clock budget per utterance before the child is killed.
    pub timeout_s: u64,
}

const POLL: Duration = Duration::from_millis(5);

/// Run the recognizer on one waveform and return its transcript as
/// normalized tokens (lowercased, punctuation-trimmed).
pub fn recognize(w: &Waveform, spec: &RecognizerSpec) -> Result<Vec<String>> {
    let argv: Vec<&str> = spec.command.split_whitespace().collect();
    if argv.is_empty() {
        return Err(Error::BadConfig("recognizer command is empty".into()));
    }
    if spec.timeout_s == 0 {
        return Err(Error::BadConfig("recognizer timeout must be >= 1 s".into()));
    }

    let bytes = wav_bytes(w);
    let wants_file = argv.iter().any(|a| a.contains("{wav}"));

    // The temp file must outlive the child, so it is bound out here.
    let mut tmp = None;
    let mut cmd = Command::new(argv[0]);
    if wants_file {
        let file = tempfile::Builder::new().suffix(".wav").tempfile()?;
        std::fs::write(file.path(), &bytes)?;
        let path = file.path().to_string_lossy().into_owned();
        for a in &argv[1..] {
            cmd.arg(a.replace("{wav}", &path));
        }
        cmd.stdin(Stdio::null());
        tmp = Some(file);
    } else {
        cmd.args(&argv[1..]);
        cmd.stdin(Stdio::piped());
    }
    cmd.stdout(Stdio::piped()).stderr(Stdio::piped());

    let mut child = cmd
        .spawn()
        .map_err(|e| Error::RecognizerFailure(format!("spawn {}: {e}", argv[0])))?;

    // Dedicated threads drain both pipes (and feed stdin) so a chatty child
    // can never deadlock against a full pipe buffer.
    let feeder = child.stdin.take().map(|mut sin| {
        std::thread::spawn(move || {
            // A child that exits without reading breaks the pipe; that is
            // its prerogative, not an error of ours.
            let _ = sin.write_all(&bytes);
        })
    });
    let stdout = child.stdout.take().expect("stdout was piped");
    let stderr = child.stderr.take().expect("stderr was piped");
    let out_reader = std::thread::spawn(move || read_all(stdout));
    let err_reader = std::thread::spawn(move || read_all(stderr));

    let deadline = Instant::now() + Duration::from_secs(spec.timeout_s);
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            child.kill().ok();
            child.wait().ok();
            if let Some(f) = feeder {
                f.join().ok();
            }
            out_reader.join().ok();
            err_reader.join().ok();
            return Err(Error::Timeout(spec.timeout_s));
        }
        std::thread::sleep(POLL);
    };

    if let Some(f) = feeder {
        f.join().ok();
    }
    let out = out_reader.join().unwrap_or_default();
    let err = err_reader.join().unwrap_or_default();
    drop(tmp);

    if !status.success() {
        let code = status.code().map_or("signal".into(), |c| c.to_string());
        let err = err.trim();
        return Err(Error::RecognizerFailure(format!(
            "exit {code}{}{err}",
            if err.is_empty() { "" } else { ": " }
        )));
    }
    Ok(tokenize(&out))
}

fn read_all(mut r: impl std::io::Read) -> String {
    let mut buf = Vec::new();
    let _ = r.read_to_end(&mut buf);
    String::from_utf8_lossy(&buf).into_owned()
}
