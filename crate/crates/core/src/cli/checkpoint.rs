//! Binary training checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "MFTC" | version u32 | step u64 | epoch u64
//! rng seed [u8; 32] | rng stream u64 | rng word position u128
//! census: 11 x u64 | layer count u32 | has momentum u8
//! per layer: weight count u64 | weights f64[] | gamma f64
//!            | momentum f64[] (when present) | block length u64 | QuantBlock
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::mfmac::OpCensus;
use crate::nn::TrainerState;
use crate::quantizer::QuantBlock;

use super::output::write_atomic;

pub const MAGIC: &[u8; 4] = b"MFTC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainerState,
    /// Per-layer quantized weights at save time.
    pub quantized: Vec<QuantBlock>,
}

fn census_fields(c: &OpCensus) -> [u64; 11] {
    [
        c.mac_slots,
        c.small_int_adds,
        c.xors,
        c.accumulations,
        c.final_shifts,
        c.exponent_scalings,
        c.roundings,
        c.saturations,
        c.multiplies,
        c.fp_adds,
        c.scalar_ops,
    ]
}

fn census_from(f: [u64; 11]) -> OpCensus {
    OpCensus {
        mac_slots: f[0],
        small_int_adds: f[1],
        xors: f[2],
        accumulations: f[3],
        final_shifts: f[4],
        exponent_scalings: f[5],
        roundings: f[6],
        saturations: f[7],
        multiplies: f[8],
        fp_adds: f[9],
        scalar_ops: f[10],
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {n}")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&s.step.to_le_bytes());
        out.extend_from_slice(&(s.epoch as u64).to_le_bytes());
        out.extend_from_slice(&s.rng_seed);
        out.extend_from_slice(&s.rng_stream.to_le_bytes());
        out.extend_from_slice(&s.rng_word_pos.to_le_bytes());
        for v in census_fields(&s.census) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(s.weights.len() as u32).to_le_bytes());
        out.push(u8::from(!s.velocity.is_empty()));
        for (i, w) in s.weights.iter().enumerate() {
            out.extend_from_slice(&(w.len() as u64).to_le_bytes());
            w.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            out.extend_from_slice(&s.gammas[i].to_le_bytes());
            if let Some(v) = s.velocity.get(i) {
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
            let block = self.quantized.get(i).map(QuantBlock::to_bytes).unwrap_or_default();
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            out.extend_from_slice(&block);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (this build reads {VERSION})"
            )));
        }
        let step = r.u64()?;
        let epoch = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("epoch overflow".into()))?;
        let rng_seed = r.array()?;
        let rng_stream = r.u64()?;
        let rng_word_pos = u128::from_le_bytes(r.array()?);
        let mut fields = [0u64; 11];
        for f in &mut fields {
            *f = r.u64()?;
        }
        let layers = u32::from_le_bytes(r.array()?) as usize;
        let has_velocity = match r.take(1)?[0] {
            0 => false,
            1 => true,
            other => return Err(Error::Checkpoint(format!("bad momentum flag {other}"))),
        };
        let mut weights = Vec::new();
        let mut gammas = Vec::new();
        let mut velocity = Vec::new();
        let mut quantized = Vec::new();
        for _ in 0..layers {
            let n = r.len()?;
            weights.push(r.f64s(n)?);
            gammas.push(r.f64()?);
            if has_velocity {
                velocity.push(r.f64s(n)?);
            }
            let len = r.len()?;
            if len > 0 {
                let raw = r.take(len)?;
                let (block, used) = QuantBlock::from_bytes(raw)
                    .map_err(|e| Error::Checkpoint(format!("quantized weights: {e}")))?;
                if used != len {
                    return Err(Error::Checkpoint("quantized weight block length mismatch".into()));
                }
                quantized.push(block);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            state: TrainerState {
                step,
                epoch,
                rng_seed,
                rng_stream,
                rng_word_pos,
                weights,
                gammas,
                velocity,
                census: census_from(fields),
            },
            quantized,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potnum::BitWidth;
    use crate::quantizer::als_potq;

    fn sample() -> Checkpoint {
        let weights = vec![vec![0.5, -0.0, f64::MIN_POSITIVE, 1e300], vec![-3.25]];
        Checkpoint {
            state: TrainerState {
                step: 17,
                epoch: 2,
                rng_seed: [7; 32],
                rng_stream: 3,
                rng_word_pos: (1u128 << 70) + 5,
                velocity: vec![vec![0.1; 4], vec![f64::EPSILON]],
                gammas: vec![1.0, 0.25],
                census: OpCensus {
                    mac_slots: 99,
                    saturations: 2,
                    ..OpCensus::default()
                },
                weights: weights.clone(),
            },
            quantized: weights
                .iter()
                .map(|w| als_potq(w, &[w.len()], BitWidth::B5).unwrap())
                .collect(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"MFTC");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.state.weights[0][1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back, ck);
    }

    #[test]
    fn refuses_other_versions_and_damage() {
        let mut bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[4] = 2;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn empty_momentum_round_trips() {
        let mut ck = sample();
        ck.state.velocity.clear();
        ck.quantized.clear();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }
}
