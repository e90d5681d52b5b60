//! Adapter that delegates extraction to an external program.
//!
//! The program is invoked as `<command...> --input <wav> --output <file>`.
//! It receives a mono 32-bit float WAV at the adapter's declared rate and
//! must write an `LPEMB1` raw embedding file holding the outputs of the
//! transformer blocks (`L x D x T`).

use std::process::Command;

use super::cache::{decode_embedding_file, EmbeddingKind};
use super::ModelAdapter;
use crate::audio::write_wav;

#[derive(Debug, Clone)]
pub struct ExternalAdapter {
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub required_rate_hz: u32,
    pub min_samples: usize,
    pub command: Vec<String>,
}

impl ModelAdapter for ExternalAdapter {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn num_layers(&self) -> usize {
        self.num_layers
    }

    fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn required_rate_hz(&self) -> u32 {
        self.required_rate_hz
    }

    fn min_samples(&self) -> usize {
        self.min_samples
    }

    fn hidden_states(&self, waveform: &[f32]) -> Result<(Vec<f32>, usize), String> {
        let (program, args) = self.command.split_first().ok_or("empty adapter command")?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let input = dir.path().join("input.wav");
        let output = dir.path().join("output.emb");
        write_wav(&input, waveform, self.required_rate_hz, 1).map_err(|e| e.to_string())?;

        let result = Command::new(program)
            .args(args)
            .arg("--input")
            .arg(&input)
            .arg("--output")
            .arg(&output)
            .output()
            .map_err(|e| format!("cannot run {program}: {e}"))?;
        if !result.status.success() {
            return Err(format!(
                "{program} exited with {}: {}",
                result.status,
                String::from_utf8_lossy(&result.stderr).trim()
            ));
        }
        let bytes = std::fs::read(&output).map_err(|e| format!("no output from {program}: {e}"))?;
        let (kind, l, d, t, payload) = decode_embedding_file(&bytes, &output).map_err(|e| e.to_string())?;
        if kind != EmbeddingKind::Raw {
            return Err("adapter wrote a pooled file, expected raw hidden states".into());
        }
        if (l, d) != (self.num_layers, self.hidden_dim) {
            return Err(format!(
                "adapter reported {l} layers x {d} features, configured {} x {}",
                self.num_layers, self.hidden_dim
            ));
        }
        Ok((payload, t))
    }
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use crate::embedding::{encode_embedding_file, extract};

    #[test]
    fn runs_command_and_reads_its_output() {
        let dir = tempfile::tempdir().unwrap();
        let canned = dir.path().join("canned.emb");
        let payload: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32).collect();
        std::fs::write(&canned, encode_embedding_file(EmbeddingKind::Raw, 2, 3, 4, &payload)).unwrap();
        // `sh -c 'cp canned "$4"' sh --input <wav> --output <emb>`
        let adapter = ExternalAdapter {
            model_id: "ext".into(),
            num_layers: 2,
            hidden_dim: 3,
            required_rate_hz: 16_000,
            min_samples: 400,
            command: vec![
                "sh".into(),
                "-c".into(),
                format!("cp '{}' \"$4\"", canned.display()),
                "sh".into(),
            ],
        };
        let e = extract("r1", &vec![0.0; 1_000], &adapter).unwrap();
        assert_eq!((e.num_layers, e.hidden_dim, e.frames), (2, 3, 4));
        assert_eq!(e.data, payload);

        let mismatched = ExternalAdapter { hidden_dim: 5, ..adapter.clone() };
        assert!(extract("r1", &vec![0.0; 1_000], &mismatched).is_err());

        let failing = ExternalAdapter {
            command: vec!["sh".into(), "-c".into(), "echo boom >&2; exit 3".into()],
            ..adapter
        };
        let err = extract("r1", &vec![0.0; 1_000], &failing).unwrap_err().to_string();
        assert!(err.contains("boom"), "{err}");
    }
}
