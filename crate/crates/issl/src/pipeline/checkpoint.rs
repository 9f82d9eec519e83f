//! Training checkpoints: parameters, optimizer moments, step count and the
//! hash of the config that produced them. The binary format round-trips f64
//! bits exactly, so a reloaded model reproduces forward outputs bit for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::encoder::ParamSet;
use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::pipeline::optim::AdamState;

const CKPT_MAGIC: &[u8; 4] = b"ISCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub opt: AdamState,
    pub step: usize,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        if self.opt.m.len() != self.params.len() || self.opt.v.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{}+{} moment matrices for {} params",
                self.opt.m.len(),
                self.opt.v.len(),
                self.params.len()
            )));
        }
        for i in 0..self.params.len() {
            let shape = self.params.value(i).shape();
            if self.opt.m[i].shape() != shape || self.opt.v[i].shape() != shape {
                return Err(Error::Contract(format!(
                    "moment shape mismatch for parameter {}",
                    self.params.name(i)
                )));
            }
        }
        Ok(())
    }
}

fn write_matrix(out: &mut Vec<u8>, m: &Matrix) {
    for &x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.step as u64).to_le_bytes());
    out.extend_from_slice(&(ckpt.opt.t as u64).to_le_bytes());
    let hash = ckpt.config_hash.as_bytes();
    out.extend_from_slice(&(hash.len() as u32).to_le_bytes());
    out.extend_from_slice(hash);
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for i in 0..ckpt.params.len() {
        let name = ckpt.params.name(i).as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let value = ckpt.params.value(i);
        out.extend_from_slice(&(value.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(value.cols() as u64).to_le_bytes());
        write_matrix(&mut out, value);
        write_matrix(&mut out, &ckpt.opt.m[i]);
        write_matrix(&mut out, &ckpt.opt.v[i]);
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let raw = self.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Matrix::from_vec(rows, cols, data)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Parse(format!("{}: not a checkpoint file", path.display())));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let step = r.u64()? as usize;
    let opt_t = r.u64()? as usize;
    let hash_len = r.u32()? as usize;
    let config_hash = String::from_utf8(r.take(hash_len)?.to_vec())
        .map_err(|_| Error::Parse("config hash is not UTF-8".into()))?;
    let n = r.u32()? as usize;
    let mut params = ParamSet::new();
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Parse("parameter name is not UTF-8".into()))?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        params.push(&name, r.matrix(rows, cols)?);
        m.push(r.matrix(rows, cols)?);
        v.push(r.matrix(rows, cols)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Parse("trailing bytes after checkpoint".into()));
    }
    let ckpt = Checkpoint { params, opt: AdamState { m, v, t: opt_t }, step, config_hash };
    ckpt.validate()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{self, EncoderConfig, MaskSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_encoder() -> EncoderConfig {
        EncoderConfig {
            conv_layers: vec![(6, 8, 4), (8, 4, 2)],
            model_dim: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 16,
            final_proj_dim: 12,
            mask_prob: 0.08,
            mask_span: 2,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact_and_forward_matches() {
        let cfg = small_encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = encoder::init_encoder_params(&cfg, &mut rng).unwrap();
        let mut opt = AdamState::new(&params);
        opt.t = 3;
        opt.m[0].data_mut()[0] = 0.125;
        let ckpt = Checkpoint { params, opt, step: 42, config_hash: "abc123".into() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.isck");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.opt.t, 3);
        assert_eq!(back.config_hash, "abc123");
        assert_eq!(back.params.len(), ckpt.params.len());
        for i in 0..ckpt.params.len() {
            assert_eq!(back.params.name(i), ckpt.params.name(i));
            let a = ckpt.params.value(i).data();
            let b = back.params.value(i).data();
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(ckpt.opt.m[i].data().iter().zip(back.opt.m[i].data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(ckpt.opt.v[i].data().iter().zip(back.opt.v[i].data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        let samples: Vec<f64> = (0..500).map(|i| (i as f64 * 0.21).sin() * 0.4).collect();
        let a = encoder::forward(&ckpt.params, &samples, &MaskSpec::empty(), &cfg).unwrap();
        let b = encoder::forward(&back.params, &samples, &MaskSpec::empty(), &cfg).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert!(la.data().iter().zip(lb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(a
            .final_proj
            .data()
            .iter()
            .zip(b.final_proj.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupt_magic_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.isck");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        match load_checkpoint(&path) {
            Err(Error::Parse(_)) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let cfg = small_encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = encoder::init_encoder_params(&cfg, &mut rng).unwrap();
        let opt = AdamState::new(&params);
        let ckpt = Checkpoint { params, opt, step: 1, config_hash: "h".into() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.isck");
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Parse(_))));
    }
}
