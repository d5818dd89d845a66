//! Model persistence: a one-line JSON header followed by a text tensor
//! dump.
//!
//! Tensor values are written with Rust's shortest-round-trip float
//! formatting, so save/load reproduces parameters bit-exactly. The dropout
//! stream is reinitialized from the stored seed on load.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, MlpModel};

const FORMAT_NAME: &str = "asplab-mlp";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    layer_sizes: Vec<usize>,
    activation: Activation,
    dropout_rate: f64,
    l2_coeff: f64,
    seed: u64,
}

impl MlpModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            layer_sizes: self.layer_sizes().to_vec(),
            activation: self.activation(),
            dropout_rate: self.dropout_rate(),
            l2_coeff: self.l2_coeff(),
            seed: self.seed(),
        };
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&header).map_err(|e| Error::Serialize(e.to_string()))?);
        out.push('\n');
        for (l, (w, b)) in self.weights().iter().zip(self.biases()).enumerate() {
            write!(out, "W{l}").unwrap();
            for v in w.iter() {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
            write!(out, "b{l}").unwrap();
            for v in b.iter() {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Ingest("empty model file".into()))??;
        let header: Header = serde_json::from_str(&header_line)
            .map_err(|e| Error::Ingest(format!("bad model header: {e}")))?;
        if header.format != FORMAT_NAME {
            return Err(Error::Ingest(format!("unknown model format '{}'", header.format)));
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::Ingest(format!(
                "unsupported model format version {}",
                header.version
            )));
        }

        let mut model = MlpModel::new(
            &header.layer_sizes,
            header.activation,
            header.dropout_rate,
            header.l2_coeff,
            header.seed,
        )?;

        let n_layers = header.layer_sizes.len() - 1;
        for l in 0..n_layers {
            let w_line = lines
                .next()
                .ok_or_else(|| Error::Ingest(format!("missing weight tensor {l}")))??;
            let b_line = lines
                .next()
                .ok_or_else(|| Error::Ingest(format!("missing bias tensor {l}")))??;
            fill_tensor(&w_line, &format!("W{l}"), model.weights_mut()[l].as_slice_mut().unwrap())?;
            fill_tensor(&b_line, &format!("b{l}"), model.biases_mut()[l].as_slice_mut().unwrap())?;
        }
        Ok(model)
    }
}

fn fill_tensor(line: &str, tag: &str, out: &mut [f64]) -> Result<()> {
    let mut parts = line.split_ascii_whitespace();
    match parts.next() {
        Some(t) if t == tag => {}
        other => {
            return Err(Error::Ingest(format!(
                "expected tensor tag '{tag}', found {other:?}"
            )))
        }
    }
    let mut count = 0;
    for (slot, token) in out.iter_mut().zip(&mut parts) {
        *slot = token
            .parse()
            .map_err(|_| Error::Ingest(format!("bad float '{token}' in tensor {tag}")))?;
        count += 1;
    }
    if count != out.len() || parts.next().is_some() {
        return Err(Error::Ingest(format!(
            "tensor {tag} has wrong length (expected {})",
            out.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let model = MlpModel::new(&[3, 5, 2], Activation::Tanh, 0.25, 1e-4, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        model.save(&path).unwrap();
        let loaded = MlpModel::load(&path).unwrap();
        assert_eq!(model.layer_sizes(), loaded.layer_sizes());
        assert_eq!(model.dropout_rate(), loaded.dropout_rate());
        assert_eq!(model.l2_coeff(), loaded.l2_coeff());
        for (a, b) in model.weights().iter().zip(loaded.weights()) {
            assert_eq!(a, b);
        }
        for (a, b) in model.biases().iter().zip(loaded.biases()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let model = MlpModel::new(&[2, 2], Activation::Relu, 0.0, 0.0, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        model.save(&path).unwrap();
        let contents = std::fs::read_to_string(&path).unwrap();
        let truncated: String = contents.lines().take(2).collect::<Vec<_>>().join("\n");
        std::fs::write(&path, truncated).unwrap();
        assert!(MlpModel::load(&path).is_err());
    }
}
