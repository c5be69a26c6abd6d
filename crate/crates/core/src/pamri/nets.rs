//! Patch encoders and decoders.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Dense, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetShape {
    pub patch: usize,
    pub channels: usize,
    pub embed_dim: usize,
}

impl NetShape {
    fn validate(&self) -> Result<()> {
        if self.patch < 8 || self.patch % 8 != 0 || self.channels == 0 || self.embed_dim == 0 {
            return Err(Error::invalid(format!("pamri nets need a patch size divisible by 8, got {self:?}")));
        }
        Ok(())
    }

    fn to_tensor(self) -> Tensor {
        Tensor::from_vec(vec![self.patch as f64, self.channels as f64, self.embed_dim as f64])
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.data() {
            [p, c, e] => Ok(NetShape {
                patch: *p as usize,
                channels: *c as usize,
                embed_dim: *e as usize,
            }),
            _ => Err(Error::Format("malformed pamri shape record".into())),
        }
    }
}

/// Four convolutions (three of stride 2), global average pool, linear head.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub shape: NetShape,
    pub params: ParamSet,
    convs: [Conv; 4],
    head: Dense,
}

impl Encoder {
    pub fn new(shape: NetShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let c = shape.channels;
        let p = &mut params;
        let convs = [
            Conv::new(p, "conv1", 1, c, 3, 2, &mut rng),
            Conv::new(p, "conv2", c, 2 * c, 3, 2, &mut rng),
            Conv::new(p, "conv3", 2 * c, 2 * c, 3, 2, &mut rng),
            Conv::new(p, "conv4", 2 * c, 2 * c, 3, 1, &mut rng),
        ];
        let head = Dense::new(p, "head", 2 * c, shape.embed_dim, 1.0, &mut rng);
        Ok(Encoder {
            shape,
            params,
            convs,
            head,
        })
    }

    /// `x: [N, 1, P, P]` to raw features `[N, D]`.
    pub fn features(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != 1 || s[2] != self.shape.patch || s[3] != self.shape.patch {
            return Err(Error::ShapeMismatch {
                op: "encoder",
                lhs: vec![0, 1, self.shape.patch, self.shape.patch],
                rhs: s.to_vec(),
            });
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(tape, p, h)?;
            h = tape.silu(h)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        self.head.forward(tape, p, pooled)
    }

    /// Unit-norm embeddings `[N, D]`.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let f = self.features(tape, p, x)?;
        tape.l2_normalize(f)
    }

    /// Value-only embedding of a patch batch.
    pub fn embed_values(&self, patches: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(patches.clone());
        let e = self.embed(&mut tape, &p, x)?;
        Ok(tape.value(e).clone())
    }
}

/// Linear lift to a quarter-resolution map, then two upsample-and-convolve stages.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub shape: NetShape,
    pub params: ParamSet,
    lift: Dense,
    convs: [Conv; 2],
}

impl Decoder {
    pub fn new(shape: NetShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (c, q) = (shape.channels, shape.patch / 4);
        let p = &mut params;
        let lift = Dense::new(p, "lift", shape.embed_dim, c * q * q, 1.0, &mut rng);
        let convs = [
            Conv::new(p, "up1", c, c, 3, 1, &mut rng),
            Conv::new(p, "up2", c, 1, 3, 1, &mut rng),
        ];
        Ok(Decoder {
            shape,
            params,
            lift,
            convs,
        })
    }

    /// `[N, D]` to `[N, 1, P, P]`.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, e: Var) -> Result<Var> {
        let n = tape.shape(e)[0];
        let (c, q) = (self.shape.channels, self.shape.patch / 4);
        let h = self.lift.forward(tape, p, e)?;
        let h = tape.reshape(h, &[n, c, q, q])?;
        let h = tape.silu(h)?;
        let h = tape.upsample_nearest(h, 2)?;
        let h = self.convs[0].forward(tape, p, h)?;
        let h = tape.silu(h)?;
        let h = tape.upsample_nearest(h, 2)?;
        self.convs[1].forward(tape, p, h)
    }
}

/// Target encoder `phi` and auxiliary encoder `psi`.
#[derive(Clone, Debug)]
pub struct EncoderPair {
    pub phi: Encoder,
    pub psi: Encoder,
}

/// Target decoder and auxiliary decoder.
#[derive(Clone, Debug)]
pub struct DecoderPair {
    pub tar: Decoder,
    pub aux: Decoder,
}

const SHAPE_KEY: &str = "shape";

fn save_two(path: &Path, shape: NetShape, a: (&str, &ParamSet), b: (&str, &ParamSet)) -> Result<()> {
    let mut all = ParamSet::new();
    all.push(SHAPE_KEY, shape.to_tensor());
    all.extend_prefixed(a.0, a.1);
    all.extend_prefixed(b.0, b.1);
    all.save(path)
}

fn load_two(path: &Path) -> Result<(NetShape, ParamSet)> {
    let all = ParamSet::load(path)?;
    let shape = all
        .iter()
        .find(|(n, _)| *n == SHAPE_KEY)
        .map(|(_, t)| NetShape::from_tensor(t))
        .ok_or_else(|| Error::Format(format!("{} lacks a shape record", path.display())))??;
    Ok((shape, all))
}

impl EncoderPair {
    pub fn new(shape: NetShape, seed: u64) -> Result<Self> {
        Ok(EncoderPair {
            phi: Encoder::new(shape, seed.wrapping_mul(2).wrapping_add(1))?,
            psi: Encoder::new(shape, seed.wrapping_mul(2).wrapping_add(2))?,
        })
    }

    pub fn shape(&self) -> NetShape {
        self.phi.shape
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_two(path.as_ref(), self.shape(), ("phi.", &self.phi.params), ("psi.", &self.psi.params))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (shape, all) = load_two(path.as_ref())?;
        let mut pair = EncoderPair::new(shape, 0)?;
        pair.phi.params.assign_from(&all.strip_prefix("phi."))?;
        pair.psi.params.assign_from(&all.strip_prefix("psi."))?;
        Ok(pair)
    }
}

impl DecoderPair {
    pub fn new(shape: NetShape, seed: u64) -> Result<Self> {
        Ok(DecoderPair {
            tar: Decoder::new(shape, seed.wrapping_mul(2).wrapping_add(101))?,
            aux: Decoder::new(shape, seed.wrapping_mul(2).wrapping_add(102))?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_two(path.as_ref(), self.tar.shape, ("tar.", &self.tar.params), ("aux.", &self.aux.params))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (shape, all) = load_two(path.as_ref())?;
        let mut pair = DecoderPair::new(shape, 0)?;
        pair.tar.params.assign_from(&all.strip_prefix("tar."))?;
        pair.aux.params.assign_from(&all.strip_prefix("aux."))?;
        Ok(pair)
    }
}
