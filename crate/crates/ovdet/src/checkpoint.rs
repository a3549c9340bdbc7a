//! Binary checkpoint, little-endian throughout.
//!
//! ```text
//! magic      8 bytes  "OVDETCKP"
//! version    u32
//! stage      u8       0 base, 1 rkd, 2 pis, 3 naive, 4 wt
//! w_d frozen u8
//! world seed u64
//! world fp   u64      World::fingerprint
//! slopes     f64 f64  transfer, skip
//! tensors    u32 count, then per tensor:
//!            u16 name length, name, u32 rows, u32 cols, rows·cols f64
//! rng        32-byte seed, u64 stream, u128 word position
//! checksum   u64      FNV-1a over everything before it
//! ```
//!
//! Tensors are stored in sorted name order, so equal parameters give
//! equal bytes.

use ovdet_core::head::{HeadParams, Stage};
use ovdet_core::train::RngState;
use ovdet_core::weight_transfer::{ProjectionWeights, SkipParams, TransferParams};
use ovdet_core::Matrix;

pub const MAGIC: &[u8; 8] = b"OVDETCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: HeadParams,
    pub world_seed: u64,
    pub world_fingerprint: u64,
    pub rng: RngState,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl Checkpoint {
    pub fn stage(&self) -> Stage {
        self.params.stage
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(p.stage.tag());
        out.push(u8::from(p.w_d.frozen));
        out.extend_from_slice(&self.world_seed.to_le_bytes());
        out.extend_from_slice(&self.world_fingerprint.to_le_bytes());
        out.extend_from_slice(&p.transfer.slope.to_le_bytes());
        out.extend_from_slice(&p.skip.slope.to_le_bytes());
        let tensors = p.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, m) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 16 {
            return Err("file too short".into());
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body).to_le_bytes() != tail {
            return Err("checksum mismatch".into());
        }
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let stage_tag = r.take(1)?[0];
        let stage = Stage::from_tag(stage_tag).ok_or_else(|| format!("unknown stage tag {stage_tag}"))?;
        let frozen = r.take(1)?[0] != 0;
        let world_seed = r.u64()?;
        let world_fingerprint = r.u64()?;
        let transfer_slope = r.f64()?;
        let skip_slope = r.f64()?;
        let count = r.u32()? as usize;
        let mut named: Vec<(String, Matrix)> = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("two bytes")) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| e.to_string())?;
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            let n = rows.checked_mul(cols).ok_or("tensor too large")?;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f64()?);
            }
            named.push((name, Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())?));
        }
        let mut get = |key: &str| -> Result<Matrix, String> {
            let i = named.iter().position(|(n, _)| n == key).ok_or_else(|| format!("missing tensor {key}"))?;
            Ok(named.swap_remove(i).1)
        };
        let params = HeadParams {
            w_d: ProjectionWeights { matrix: get("w_d")?, frozen },
            reg: get("reg")?,
            transfer: TransferParams {
                w_theta1: get("transfer.theta1")?,
                w_theta2: get("transfer.theta2")?,
                slope: transfer_slope,
            },
            skip: SkipParams { w1: get("skip.w1")?, w2: get("skip.w2")?, slope: skip_slope },
            stage,
        };
        if let Some((extra, _)) = named.first() {
            return Err(format!("unknown tensor {extra}"));
        }
        check_shapes(&params)?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.pos != body.len() {
            return Err("trailing bytes".into());
        }
        Ok(Self { params, world_seed, world_fingerprint, rng: RngState { seed, stream, word_pos } })
    }
}

fn check_shapes(p: &HeadParams) -> Result<(), String> {
    let (d, f) = p.w_d.matrix.shape();
    let (h, hs) = (p.transfer.w_theta1.rows(), p.skip.w1.rows());
    let want = [
        (p.reg.shape(), (4, f)),
        (p.transfer.w_theta1.shape(), (h, d)),
        (p.transfer.w_theta2.shape(), (d, h)),
        (p.skip.w1.shape(), (hs, f)),
        (p.skip.w2.shape(), (d, hs)),
    ];
    if want.iter().all(|(got, exp)| got == exp) {
        Ok(())
    } else {
        Err("tensor shapes are inconsistent".into())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("unexpected end of file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_bits(self.u64()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ovdet_core::head::HeadDims;
    use ovdet_core::seeding::rng_from;

    fn sample() -> Checkpoint {
        let dims = HeadDims {
            embed_dim: 3,
            feature_dim: 5,
            transfer_hidden: 4,
            skip_hidden: 6,
            slope: 0.1,
            zero_skip_output: false,
            tied_transfer_init: true,
        };
        let mut params = HeadParams::init(dims, &mut rng_from(&[1]));
        params.enter_stage(Stage::Wt);
        params.reg[(2, 3)] = -0.0;
        params.reg[(1, 1)] = f64::MIN_POSITIVE / 3.0;
        Checkpoint { params, world_seed: 9, world_fingerprint: 0xdead_beef, rng: RngState::capture(&rng_from(&[2])) }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params.reg[(2, 3)].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.stage(), Stage::Wt);
        assert!(back.params.w_d.frozen);
        assert_eq!(back.rng, ck.rng);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[40] ^= 1;
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap_err(), "checksum mismatch");
        assert!(Checkpoint::from_bytes(b"OVDETCKP").is_err());
        let good = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&good[..good.len() - 9]).is_err());
    }
}
