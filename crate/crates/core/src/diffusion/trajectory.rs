use crate::error::{Error, Result};
use crate::image::{Image, Mask};

const MAGIC: &[u8; 4] = b"PFTJ";
const VERSION: u32 = 1;

/// A recorded reverse-diffusion path `x_T, x_{T-1}, ..., x_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt_index: usize,
    pub mask: Mask,
    /// `states[0]` is `x_T`, the last entry is the final sample `x_0`.
    pub states: Vec<Image>,
    pub seed: u64,
}

impl Trajectory {
    pub fn timesteps(&self) -> usize {
        self.states.len() - 1
    }

    /// The latent `x_t`.
    pub fn state(&self, t: usize) -> &Image {
        &self.states[self.timesteps() - t]
    }

    pub fn final_image(&self) -> &Image {
        self.states.last().expect("trajectory has states")
    }

    pub fn side(&self) -> usize {
        self.mask.side()
    }

    /// Little-endian binary record: magic `PFTJ`, version, prompt index,
    /// seed, state count, pixel count, mask bytes, then `f32` states.
    pub fn to_bytes(&self) -> Vec<u8> {
        let pixels = self.mask.len();
        let mut out = Vec::with_capacity(32 + pixels + self.states.len() * pixels * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.prompt_index as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.states.len() as u32).to_le_bytes());
        out.extend_from_slice(&(pixels as u32).to_le_bytes());
        out.extend_from_slice(self.mask.bits());
        for state in &self.states {
            for v in state.pixels() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::Data(format!("trajectory record: {reason}"));
        let mut cur = data;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated"));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let prompt_index = u32_at(take(4)?) as usize;
        let seed = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let count = u32_at(take(4)?) as usize;
        let pixels = u32_at(take(4)?) as usize;
        let side = (pixels as f64).sqrt().round() as usize;
        if side * side != pixels || count < 2 {
            return Err(bad("inconsistent dimensions"));
        }
        let mask = Mask::new(side, take(pixels)?.to_vec())?;
        let mut states = Vec::with_capacity(count);
        for _ in 0..count {
            let raw = take(pixels * 4)?;
            let px = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            states.push(Image::new(side, px)?);
        }
        if !cur.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            prompt_index,
            mask,
            states,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trajectory {
        let side = 4;
        let states = (0..5)
            .map(|k| Image::new(side, (0..16).map(|i| (i as f32 - k as f32) * 0.05).collect()).unwrap())
            .collect();
        Trajectory {
            prompt_index: 2,
            mask: Mask::rect_hole(side, 1, 1, 2, 2),
            states,
            seed: u64::MAX - 7,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let tr = sample();
        assert_eq!(Trajectory::from_bytes(&tr.to_bytes()).unwrap(), tr);
    }

    #[test]
    fn state_indexing() {
        let tr = sample();
        assert_eq!(tr.timesteps(), 4);
        assert_eq!(tr.state(4), &tr.states[0]);
        assert_eq!(tr.state(0), tr.final_image());
    }

    #[test]
    fn truncated_rejected() {
        let bytes = sample().to_bytes();
        assert!(Trajectory::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Trajectory::from_bytes(&extra).is_err());
    }
}
