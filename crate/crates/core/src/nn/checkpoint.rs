use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ParamSet;

const MAGIC: &[u8; 8] = b"DSGCKPT1";

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    step: u64,
    arrays: Vec<ArrayEntry>,
    meta: serde_json::Value,
}

/// Parameter archive: magic, little-endian header length, JSON header with
/// names, shapes, dtype, step counter and free-form metadata, then raw
/// little-endian `f64` data in array order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: ParamSet, meta: serde_json::Value) -> Self {
        Checkpoint { params, meta }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            dtype: "f64".into(),
            step: self.params.step(),
            arrays: self
                .params
                .iter()
                .map(|(n, a)| ArrayEntry {
                    name: n.to_owned(),
                    shape: a.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let bytes = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(&bytes)?;
        for (_, a) in self.params.iter() {
            for x in a.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::parse("checkpoint", "bad magic"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut hbytes = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut hbytes)?;
        let header: Header = serde_json::from_slice(&hbytes)?;
        if header.dtype != "f64" {
            return Err(Error::parse(
                "checkpoint",
                format!("unsupported dtype {}", header.dtype),
            ));
        }
        let mut params = ParamSet::new();
        let mut buf = [0u8; 8];
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), data).map_err(|err| Error::parse("checkpoint", err))?;
            params.insert(&e.name, arr);
        }
        params.set_step(header.step);
        Ok(Checkpoint {
            params,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.to_owned()),
            _ => Error::Io(e),
        })?;
        Checkpoint::read(BufReader::new(f))
    }
}
