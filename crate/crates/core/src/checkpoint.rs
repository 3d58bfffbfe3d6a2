//! JSON checkpoints and metrics files.
//!
//! Floats are written in scientific notation with 17 significant digits so
//! that every value reads back bit-for-bit.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mlp::{Activation, Layer, MlpParams};

pub const FORMAT_VERSION: u32 = 1;

/// Pretty JSON with every `f64` printed as `{:.16e}`.
struct ExactFloats<'a>(PrettyFormatter<'a>);

impl Formatter for ExactFloats<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{value:.8e}")
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_array(writer)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_object(writer)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(writer, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object_value(writer)
    }
}

/// Serialises `value` as pretty JSON with exact floats and a trailing newline.
pub fn to_exact_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloats(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerDoc {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    dims: Vec<usize>,
    hidden_activation: Activation,
    layers: Vec<LayerDoc>,
}

pub fn checkpoint_to_string(model: &MlpParams) -> Result<String> {
    let doc = CheckpointDoc {
        format_version: FORMAT_VERSION,
        dims: model.dims(),
        hidden_activation: model.activation(),
        layers: model
            .layers()
            .iter()
            .map(|l| LayerDoc { weight: l.weight.to_rows(), bias: l.bias.as_slice().to_vec() })
            .collect(),
    };
    to_exact_json(&doc)
}

pub fn checkpoint_from_str(text: &str) -> Result<MlpParams> {
    let doc: CheckpointDoc = serde_json::from_str(text)?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format_version {} (expected {FORMAT_VERSION})",
            doc.format_version
        )));
    }
    let layers = doc
        .layers
        .into_iter()
        .map(|l| {
            let bias_len = l.bias.len();
            Layer::new(Matrix::from_rows(&l.weight)?, Matrix::from_vec(1, bias_len, l.bias)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let model = MlpParams::new(layers, doc.hidden_activation)?;
    if model.dims() != doc.dims {
        return Err(Error::Format(format!("checkpoint dims {:?} disagree with its layers {:?}", doc.dims, model.dims())));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &MlpParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}
