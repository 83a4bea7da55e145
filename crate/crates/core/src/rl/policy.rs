//! Actor-critic policy over 8-bit camera frames, and its checkpoint format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::nn::{NetBuilder, Network, Tape};
use super::RlError;

const MAGIC: &[u8; 4] = b"SNCK";
const VERSION: u16 = 1;

/// Inference batch size; larger batches thrash the cache.
const INFER_CHUNK: usize = 16;

/// Initial gain of the actor head; small so the first policy is near uniform.
pub const ACTOR_GAIN: f64 = 0.01;

/// Network layout. Convolutions are stride 2 with "same" padding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub conv: Vec<usize>,
    pub kernel: usize,
    /// Width of the dense layer after flattening; 0 for none.
    pub hidden: usize,
    pub actions: usize,
}

impl PolicySpec {
    pub fn vision(height: usize, width: usize, actions: usize) -> Self {
        Self {
            height,
            width,
            channels: 3,
            conv: vec![16, 32, 32],
            kernel: 3,
            hidden: 128,
            actions,
        }
    }

    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(format!("policy spec: {m}")));
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("empty input");
        }
        if self.actions == 0 {
            return bad("no actions");
        }
        if !self.conv.is_empty() && (self.kernel == 0 || self.kernel % 2 == 0) {
            return bad("kernel must be odd");
        }
        if self.conv.iter().any(|&c| c == 0) {
            return bad("zero-channel convolution");
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(serde_json::to_vec(self).expect("spec serializes")).into()
    }

    fn build(&self) -> Network<f32> {
        let mut b = NetBuilder::new(self.height, self.width, self.channels);
        for &c in &self.conv {
            b = b.conv(c, self.kernel, 2, self.kernel / 2).relu();
        }
        if self.hidden > 0 {
            b = b.dense(self.hidden).relu();
        }
        b.heads(self.actions, (self.height, self.width, self.channels))
    }
}

/// One sampled action with its log-probability and value estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Act {
    pub action: usize,
    pub logp: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub spec: PolicySpec,
    pub net: Network<f32>,
}

/// Log-softmax in f64.
pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let z = logits.iter().map(|&l| (l as f64 - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|&l| l as f64 - z).collect()
}

/// First index of the largest logit.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

impl PolicyNet {
    pub fn new(spec: PolicySpec, seed: u64) -> Result<Self, RlError> {
        spec.validate()?;
        let mut net = spec.build();
        net.init_orthogonal(&mut ChaCha8Rng::seed_from_u64(seed), ACTOR_GAIN);
        Ok(Self { spec, net })
    }

    pub fn action_count(&self) -> usize {
        self.spec.actions
    }

    pub fn param_count(&self) -> usize {
        self.net.params.len()
    }

    pub fn params_finite(&self) -> bool {
        self.net.params.iter().all(|p| p.is_finite())
    }

    /// Scales 8-bit frames into `[0, 1]` and stacks them.
    pub fn encode<B: AsRef<[u8]>>(&self, obs: &[B]) -> Vec<f32> {
        let n = self.spec.input_len();
        let mut x = Vec::with_capacity(obs.len() * n);
        for o in obs {
            let o = o.as_ref();
            assert_eq!(o.len(), n, "observation size");
            x.extend(o.iter().map(|&b| b as f32 * (1.0 / 255.0)));
        }
        x
    }

    pub fn forward<B: AsRef<[u8]>>(&self, obs: &[B]) -> Tape<f32> {
        self.net.forward(&self.encode(obs), obs.len())
    }

    /// Samples one action per observation.
    pub fn act<B: AsRef<[u8]>, R: Rng>(&self, obs: &[B], rng: &mut R) -> Vec<Act> {
        let tape = self.forward(obs);
        let a = self.spec.actions;
        (0..obs.len())
            .map(|i| {
                let lp = log_softmax(&tape.logits[i * a..(i + 1) * a]);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut action = a - 1;
                for (k, l) in lp.iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        action = k;
                        break;
                    }
                }
                Act {
                    action,
                    logp: lp[action],
                    value: tape.values[i] as f64,
                }
            })
            .collect()
    }

    pub fn values<B: AsRef<[u8]>>(&self, obs: &[B]) -> Vec<f64> {
        obs.chunks(INFER_CHUNK)
            .flat_map(|c| self.forward(c).values.into_iter().map(|v| v as f64))
            .collect()
    }

    /// Argmax actions, lowest index on ties.
    pub fn greedy<B: AsRef<[u8]>>(&self, obs: &[B]) -> Vec<usize> {
        obs.chunks(INFER_CHUNK)
            .flat_map(|c| self.forward(c).logits.chunks_exact(self.spec.actions).map(argmax).collect::<Vec<_>>())
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), RlError> {
        let spec = serde_json::to_vec(&self.spec)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(spec.len() as u32).to_le_bytes())?;
        w.write_all(&spec)?;
        w.write_all(&self.spec.hash())?;
        w.write_all(&(self.net.params.len() as u64).to_le_bytes())?;
        for p in &self.net.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, RlError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = &buf[..];
        let mut take = |n: usize| -> Result<&[u8], RlError> {
            if cur.len() < n {
                return Err(RlError::Corrupt("truncated".into()));
            }
            let (a, b) = cur.split_at(n);
            cur = b;
            Ok(a)
        };
        let magic: [u8; 4] = take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(RlError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(RlError::Version(version));
        }
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let spec: PolicySpec = serde_json::from_slice(take(len)?)?;
        let hash: [u8; 32] = take(32)?.try_into().unwrap();
        if hash != spec.hash() {
            return Err(RlError::SpecMismatch);
        }
        spec.validate()?;
        let mut net = spec.build();
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if n != net.params.len() {
            return Err(RlError::Corrupt(format!("{n} parameters, network has {}", net.params.len())));
        }
        let raw = take(4 * n)?;
        for (p, b) in net.params.iter_mut().zip(raw.chunks_exact(4)) {
            *p = f32::from_le_bytes(b.try_into().unwrap());
        }
        if !cur.is_empty() {
            return Err(RlError::Corrupt("trailing bytes".into()));
        }
        Ok(Self { spec, net })
    }
}

pub fn save_checkpoint(policy: &PolicyNet, path: &Path) -> Result<(), RlError> {
    let mut w = BufWriter::new(File::create(path)?);
    policy.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyNet, RlError> {
    PolicyNet::read_from(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PolicySpec {
        PolicySpec {
            height: 8,
            width: 8,
            channels: 3,
            conv: vec![4, 4],
            kernel: 3,
            hidden: 16,
            actions: 6,
        }
    }

    #[test]
    fn vision_net_shapes() {
        let p = PolicyNet::new(PolicySpec::vision(64, 64, 6), 0).unwrap();
        let obs = vec![vec![128u8; 64 * 64 * 3]; 2];
        let t = p.forward(&obs);
        assert_eq!(t.logits.len(), 12);
        assert_eq!(t.values.len(), 2);
        // 3*3*3*16+16 + 3*3*16*32+32 + 3*3*32*32+32 + 8*8*32*128+128 + 128*6+6 + 128+1
        assert_eq!(p.param_count(), 448 + 4640 + 9248 + 262272 + 774 + 129);
    }

    #[test]
    fn initial_policy_is_near_uniform() {
        let p = PolicyNet::new(PolicySpec::vision(64, 64, 6), 3).unwrap();
        let obs = vec![(0..64 * 64 * 3).map(|i| (i % 251) as u8).collect::<Vec<u8>>()];
        let lp = log_softmax(&p.forward(&obs).logits);
        for l in lp {
            assert!((l.exp() - 1.0 / 6.0).abs() < 0.02);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let p = PolicyNet::new(small(), 1).unwrap();
        let obs = vec![vec![7u8; 192]; 5];
        let a = p.act(&obs, &mut ChaCha8Rng::seed_from_u64(9));
        let b = p.act(&obs, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        for x in a {
            assert!(x.action < 6 && x.logp <= 0.0);
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_validation() {
        let p = PolicyNet::new(small(), 5).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(PolicyNet::read_from(&mut &buf[..]).unwrap(), p);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(PolicyNet::read_from(&mut &bad[..]), Err(RlError::BadMagic(_))));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(PolicyNet::read_from(&mut &bad[..]), Err(RlError::Version(9))));
        // Flip a byte of the stored hash.
        let hash_at = 10 + serde_json::to_vec(&p.spec).unwrap().len();
        let mut bad = buf.clone();
        bad[hash_at] ^= 1;
        assert!(matches!(PolicyNet::read_from(&mut &bad[..]), Err(RlError::SpecMismatch)));
        assert!(PolicyNet::read_from(&mut &buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn log_softmax_normalizes() {
        let lp = log_softmax(&[1.0, 2.0, 3.0, 1000.0]);
        assert!((lp.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&[0.5, 2.0, 2.0]), 1);
    }
}
