//! Binary tensor records: `u32` little-endian header length, a JSON header,
//! then the flat little-endian payload.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Precision, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub precision: Precision,
    pub byte_order: String,
}

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, name: &str, tensor: &Tensor<T>) -> std::io::Result<()> {
    let header = TensorHeader {
        name: name.to_string(),
        shape: tensor.shape().to_vec(),
        precision: T::PRECISION,
        byte_order: "little".to_string(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut payload = Vec::with_capacity(tensor.len() * T::PRECISION.byte_width());
    for &x in tensor.data() {
        x.write_le(&mut payload);
    }
    w.write_all(&payload)
}

/// Reads one record. Returns `Ok(None)` at a clean end of stream.
pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Option<(TensorHeader, Tensor<T>)>, TensorError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(TensorError::Dump(e.to_string())),
    }
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(|e| TensorError::Dump(e.to_string()))?;
    let header: TensorHeader = serde_json::from_slice(&json).map_err(|e| TensorError::Dump(e.to_string()))?;
    if header.precision != T::PRECISION {
        return Err(TensorError::Dump(format!(
            "tensor {} stored as {:?}, requested {:?}",
            header.name,
            header.precision,
            T::PRECISION
        )));
    }
    if header.byte_order != "little" {
        return Err(TensorError::Dump(format!("unsupported byte order {}", header.byte_order)));
    }
    let width = T::PRECISION.byte_width();
    let n: usize = header.shape.iter().product();
    let mut payload = vec![0u8; n * width];
    r.read_exact(&mut payload).map_err(|e| TensorError::Dump(format!("{}: {e}", header.name)))?;
    let data = payload.chunks_exact(width).map(T::read_le).collect();
    let tensor = Tensor::from_vec(&header.shape, data)?;
    Ok(Some((header, tensor)))
}
