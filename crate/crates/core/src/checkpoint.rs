//! `EVXM` model checkpoints.
//!
//! ```text
//! "EVXM" | u32 version = 1 | u32 len | config JSON (utf-8)
//! u32 tensor_count
//! repeated: u32 name_len | name (utf-8) | u32 rank | u32 dims[rank] | f32 data[prod(dims)]
//! ```
//!
//! All integers and floats are little-endian. Normalization statistics, when
//! present, are stored as the tensors `frontend.norm_mean` and
//! `frontend.norm_std` after the network tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array1;

use crate::audio::NormalizationStats;
use crate::binio;
use crate::model::{ModelParams, NamedTensor, StudentConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"EVXM";
const VERSION: u32 = 1;
const NORM_MEAN: &str = "frontend.norm_mean";
const NORM_STD: &str = "frontend.norm_std";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub norm: Option<NormalizationStats>,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        binio::write_u32(w, VERSION)?;
        binio::write_str(w, &serde_json::to_string(self.params.config())?)?;
        let mut tensors = self.params.named_tensors();
        if let Some(n) = &self.norm {
            tensors.push(NamedTensor {
                name: NORM_MEAN.into(),
                shape: vec![n.mean.len()],
                data: n.mean.to_vec(),
            });
            tensors.push(NamedTensor {
                name: NORM_STD.into(),
                shape: vec![n.std.len()],
                data: n.std.to_vec(),
            });
        }
        binio::write_u32(w, binio::len_u32(tensors.len())?)?;
        for t in &tensors {
            binio::write_str(w, &t.name)?;
            binio::write_u32(w, binio::len_u32(t.shape.len())?)?;
            for &d in &t.shape {
                binio::write_u32(w, binio::len_u32(d)?)?;
            }
            binio::write_f32s(w, t.data.iter().copied())?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::expect_header(r, MAGIC, VERSION)?;
        let cfg: StudentConfig = serde_json::from_str(&binio::read_str(r, "config")?)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        cfg.validate()?;
        let count = binio::read_u32(r, "tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = binio::read_str(r, "tensor name")?;
            let rank = binio::read_u32(r, "tensor rank")? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| binio::read_u32(r, "tensor dim").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = binio::read_f32s(r, n, &name)?;
            tensors.push(NamedTensor { name, shape, data });
        }
        binio::expect_eof(r)?;
        let norm = match tensors.iter().position(|t| t.name == NORM_MEAN) {
            Some(i) => {
                let std = tensors
                    .get(i + 1)
                    .filter(|t| t.name == NORM_STD)
                    .ok_or_else(|| Error::Format("norm mean without norm std".into()))?;
                let stats = NormalizationStats::new(Array1::from(tensors[i].data.clone()), Array1::from(std.data.clone()))?;
                tensors.truncate(i);
                Some(stats)
            }
            None => None,
        };
        let params = ModelParams::from_named_tensors(&cfg, &tensors)?;
        Ok(Self { params, norm })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::rng;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = StudentConfig::standard().with_width_multiplier(0.05);
        let params = init_params(&cfg, &mut rng::substream(1, "init")).unwrap();
        let norm = NormalizationStats::new(Array1::from_elem(512, 0.5), Array1::from_elem(512, 2.0)).unwrap();
        let ck = Checkpoint {
            params,
            norm: Some(norm),
        };
        let mut a = Vec::new();
        ck.write_to(&mut a).unwrap();
        assert_eq!(&a[..4], b"EVXM");
        let back = Checkpoint::read_from(&mut a.as_slice()).unwrap();
        assert_eq!(back.params.named_tensors(), ck.params.named_tensors());
        assert_eq!(back.norm, ck.norm);
        let mut b = Vec::new();
        back.write_to(&mut b).unwrap();
        assert_eq!(a, b);
        assert!(Checkpoint::read_from(&mut &a[..a.len() - 1]).is_err());
    }
}
