//! `GUIDENN1` model files.
//!
//! Layout: magic, `layer_count: u32`, input shape (`rank: u32`, dims),
//! `frozen: u8`, then per layer a kind tag byte, its hyper-parameters as
//! `u32` values and its parameter tensors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::layer::{Activation, Conv2d, Dense, Layer, Pool2d};
use super::model::Model;
use crate::error::{Error, Result};
use crate::framing::*;

pub const MODEL_MAGIC: &[u8; 8] = b"GUIDENN1";

const TAG_DENSE: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_AVGPOOL: u8 = 3;
const TAG_MAXPOOL: u8 = 4;
const TAG_FLATTEN: u8 = 5;
const TAG_ACTIVATION: u8 = 6;

pub fn write_model(w: &mut impl Write, model: &Model) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    write_usize(w, model.layers().len())?;
    write_usize(w, model.input_shape().len())?;
    for &d in model.input_shape() {
        write_usize(w, d)?;
    }
    write_u8(w, model.is_frozen() as u8)?;
    for layer in model.layers() {
        match layer {
            Layer::Dense(d) => {
                write_u8(w, TAG_DENSE)?;
                write_usize(w, d.inputs())?;
                write_usize(w, d.outputs())?;
            }
            Layer::Conv2d(c) => {
                write_u8(w, TAG_CONV)?;
                for v in [c.kernel(), c.in_channels(), c.out_channels(), c.stride, c.padding] {
                    write_usize(w, v)?;
                }
            }
            Layer::AvgPool2d(p) | Layer::MaxPool2d(p) => {
                write_u8(w, if matches!(layer, Layer::AvgPool2d(_)) { TAG_AVGPOOL } else { TAG_MAXPOOL })?;
                write_usize(w, p.size)?;
                write_usize(w, p.stride)?;
            }
            Layer::Flatten => write_u8(w, TAG_FLATTEN)?,
            Layer::Activation(a) => {
                write_u8(w, TAG_ACTIVATION)?;
                write_u32(w, a.code())?;
            }
        }
        for p in layer.parameters() {
            write_tensor(w, p)?;
        }
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<Model> {
    expect_magic(r, MODEL_MAGIC)?;
    let count = read_usize(r)?;
    let rank = read_usize(r)?;
    let input_shape = (0..rank).map(|_| read_usize(r)).collect::<Result<Vec<_>>>()?;
    let frozen = read_u8(r)? != 0;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let tag = read_u8(r)?;
        let layer = match tag {
            TAG_DENSE => {
                let (fi, fo) = (read_usize(r)?, read_usize(r)?);
                let (w, b) = (read_tensor(r)?, read_tensor(r)?);
                if w.shape() != [fi, fo] {
                    return Err(Error::Format(format!("dense weight {:?} != [{fi}, {fo}]", w.shape())));
                }
                Layer::Dense(Dense::new(w, b).map_err(|e| Error::Format(e.to_string()))?)
            }
            TAG_CONV => {
                let h = (0..5).map(|_| read_usize(r)).collect::<Result<Vec<_>>>()?;
                let (w, b) = (read_tensor(r)?, read_tensor(r)?);
                if w.shape() != [h[0], h[0], h[1], h[2]] {
                    return Err(Error::Format(format!("conv weight {:?} disagrees with header", w.shape())));
                }
                Layer::Conv2d(Conv2d::new(w, b, h[3], h[4]).map_err(|e| Error::Format(e.to_string()))?)
            }
            TAG_AVGPOOL | TAG_MAXPOOL => {
                let p = Pool2d { size: read_usize(r)?, stride: read_usize(r)? };
                if tag == TAG_AVGPOOL {
                    Layer::AvgPool2d(p)
                } else {
                    Layer::MaxPool2d(p)
                }
            }
            TAG_FLATTEN => Layer::Flatten,
            TAG_ACTIVATION => Layer::Activation(Activation::from_code(read_u32(r)?)?),
            other => return Err(Error::Format(format!("unknown layer tag {other}"))),
        };
        layers.push(layer);
    }
    let mut model = Model::new(input_shape, layers).map_err(|e| Error::Format(e.to_string()))?;
    model.set_frozen(frozen);
    Ok(model)
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, model)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    read_model(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::Architecture;

    #[test]
    fn lenet_round_trip_preserves_checksum() {
        let mut m = Architecture::LeNet5.build(&[28, 28, 1], 10, 7).unwrap();
        m.freeze();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        let back = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checksum(), m.checksum());
        assert!(back.is_frozen());
    }

    #[test]
    fn unknown_magic_is_rejected() {
        let m = Architecture::Linear.build(&[2, 2, 1], 2, 0).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        buf[7] = b'2';
        assert!(matches!(read_model(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
