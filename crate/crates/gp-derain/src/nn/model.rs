//! Residual encoder–decoder for deraining.
//!
//! Three encoder blocks (3x3 conv, nonlinearity, 2x downsample) feed a
//! dense bottleneck whose pre-activation output is the latent `z` used for
//! GP pseudo-labeling. The decoder mirrors the encoder with nearest
//! upsampling and skip concatenations and emits a rain residual `r`; the
//! derained estimate is `x - r`, clipped to [0, 1] only when an image is
//! actually emitted (losses see the unclipped prediction).

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bytes::{write_f64s, write_string, Reader};
use crate::error::{Error, Result};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Pass-through; exists so the network can be made linear end to end
    /// for diagnostics.
    Identity,
}

/// Topology and init seed of the encoder–decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input patch edge; must be divisible by 8 (three 2x stages).
    pub patch: usize,
    pub in_channels: usize,
    /// Channel widths of the three encoder blocks.
    pub widths: [usize; 3],
    /// Latent dimension M.
    pub latent_dim: usize,
    pub activation: Activation,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    /// Small configuration that trains in seconds on a CPU.
    pub fn desk_default() -> Self {
        ModelConfig {
            patch: 32,
            in_channels: 1,
            widths: [8, 16, 32],
            latent_dim: 128,
            activation: Activation::Relu,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.patch % 8 != 0 {
            return Err(Error::Config(format!(
                "patch must be a positive multiple of 8, got {}",
                self.patch
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("channel widths must be >= 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Flattened size of the deepest feature map.
    pub fn bottleneck_len(&self) -> usize {
        let side = self.patch / 8;
        self.widths[2] * side * side
    }

    /// Layer name, weight count, bias count, and fan-in, in draw order.
    fn layer_specs(&self) -> Vec<(&'static str, usize, usize, usize)> {
        let [w1, w2, w3] = self.widths;
        let cin = self.in_channels;
        let m = self.latent_dim;
        let bn = self.bottleneck_len();
        vec![
            ("enc1", w1 * cin * 9, w1, cin * 9),
            ("enc2", w2 * w1 * 9, w2, w1 * 9),
            ("enc3", w3 * w2 * 9, w3, w2 * 9),
            ("enc_fc", m * bn, m, bn),
            ("dec_fc", bn * m, bn, m),
            ("dec3", w2 * (2 * w3) * 9, w2, (2 * w3) * 9),
            ("dec2", w1 * (2 * w2) * 9, w1, (2 * w2) * 9),
            ("dec1", cin * (2 * w1) * 9, cin, (2 * w1) * 9),
        ]
    }
}

/// Named parameters plus the topology they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero biases.
    /// Layers draw in architecture order from a stream seeded by
    /// `config.seed`, so the init is reproducible.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tensors = BTreeMap::new();
        for (layer, wn, bn, fan_in) in config.layer_specs() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..wn).map(|_| rng.gen_range(-bound..bound)).collect();
            tensors.insert(format!("{layer}.w"), Tensor::flat(w));
            tensors.insert(format!("{layer}.b"), Tensor::flat(vec![0.0; bn]));
        }
        Ok(ParamSet {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Parameters in deterministic (lexicographic) order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Writes the `S2RC` block: magic, version, topology, then every named
    /// parameter in deterministic order.
    pub(crate) fn write_block(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(b"S2RC")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&self.config.seed.to_le_bytes())?;
        w.write_all(&(self.config.patch as u64).to_le_bytes())?;
        w.write_all(&(self.config.in_channels as u64).to_le_bytes())?;
        for width in self.config.widths {
            w.write_all(&(width as u64).to_le_bytes())?;
        }
        w.write_all(&(self.config.latent_dim as u64).to_le_bytes())?;
        w.write_all(&[match self.config.activation {
            Activation::Relu => 0u8,
            Activation::Identity => 1u8,
        }])?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            write_string(w, name)?;
            w.write_all(&(tensor.len() as u64).to_le_bytes())?;
            write_f64s(w, tensor.values())?;
        }
        Ok(())
    }

    /// Reads an `S2RC` block and rejects any blob set that does not match
    /// the topology it declares.
    pub(crate) fn read_block(r: &mut Reader<impl Read>) -> Result<Self> {
        r.expect_magic(b"S2RC", "model parameter")?;
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::Format(format!(
                "unsupported model parameter version {version}"
            )));
        }
        let seed = r.u64()?;
        let patch = r.u64()? as usize;
        let in_channels = r.u64()? as usize;
        let widths = [r.u64()? as usize, r.u64()? as usize, r.u64()? as usize];
        let latent_dim = r.u64()? as usize;
        let activation = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            other => {
                return Err(Error::Format(format!("unknown activation code {other}")));
            }
        };
        let config = ModelConfig {
            patch,
            in_channels,
            widths,
            latent_dim,
            activation,
            seed,
        };
        config.validate().map_err(|e| {
            Error::Incompatible(format!("stored model topology is invalid: {e}"))
        })?;
        let count = r.u64()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let n = r.u64()? as usize;
            let values = r.f64_vec(n)?;
            tensors.insert(name, Tensor::flat(values));
        }
        // Topology check: exactly the blobs init would create, same sizes.
        for (layer, wn, bn, _) in config.layer_specs() {
            for (suffix, want) in [(".w", wn), (".b", bn)] {
                let name = format!("{layer}{suffix}");
                match tensors.get(&name) {
                    Some(t) if t.len() == want => {}
                    Some(t) => {
                        return Err(Error::Incompatible(format!(
                            "parameter {name} has {} values, topology needs {want}",
                            t.len()
                        )));
                    }
                    None => {
                        return Err(Error::Incompatible(format!(
                            "parameter {name} missing from checkpoint"
                        )));
                    }
                }
            }
        }
        if tensors.len() != 16 {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} parameter blobs, topology needs 16",
                tensors.len()
            )));
        }
        Ok(ParamSet { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(e, path))?;
        let mut w = BufWriter::new(file);
        self.write_block(&mut w).map_err(|e| Error::io(e, path))?;
        w.flush().map_err(|e| Error::io(e, path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(e, path))?;
        let mut r = Reader::new(BufReader::new(file));
        let params = ParamSet::read_block(&mut r)?;
        r.expect_eof("model parameters")?;
        Ok(params)
    }
}

/// Nodes produced by one encoder pass.
pub struct EncoderPass {
    pub input: NodeId,
    /// Pre-downsample activations of the three encoder blocks, shallow to
    /// deep; the decoder concatenates them back in.
    pub skips: [NodeId; 3],
    /// Dense-bottleneck output, pre-activation: the latent `z`.
    pub latent: NodeId,
}

/// One full forward: encoder, decoder, and the unclipped prediction
/// `x - residual`.
pub struct DerainPass {
    pub enc: EncoderPass,
    pub residual: NodeId,
    pub prediction: NodeId,
}

/// Parameters registered on a tape, one node per parameter per tape.
pub struct BoundModel {
    config: ModelConfig,
    ids: BTreeMap<String, NodeId>,
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Self {
        let ids = params
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.param(name, tensor.clone())))
            .collect();
        BoundModel {
            config: params.config.clone(),
            ids,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn id(&self, name: &str) -> NodeId {
        self.ids[name]
    }

    fn act(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self.config.activation {
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }

    fn check_finite(&self, tape: &Tape, id: NodeId, layer: &str) -> Result<()> {
        if tape.value(id).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{layer} output")))
        }
    }

    /// Runs the encoder on `x` (shape `in_channels x patch x patch`).
    pub fn encode(&self, tape: &mut Tape, x: &Tensor) -> Result<EncoderPass> {
        let want = Shape::Chw(self.config.in_channels, self.config.patch, self.config.patch);
        if x.shape() != want {
            return Err(Error::ShapeMismatch {
                context: "encoder input".into(),
                expected: want.to_string(),
                got: x.shape().to_string(),
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("encoder input".into()));
        }
        let input = tape.input(x.clone());
        let mut cur = input;
        let mut skips = Vec::with_capacity(3);
        for (i, layer) in ["enc1", "enc2", "enc3"].iter().enumerate() {
            let conv = tape.conv3x3(cur, self.id(&format!("{layer}.w")), self.id(&format!("{layer}.b")))?;
            let active = self.act(tape, conv);
            self.check_finite(tape, active, layer)?;
            skips.push(active);
            cur = tape.downsample2(active)?;
            let _ = i;
        }
        let latent = tape.dense(cur, self.id("enc_fc.w"), self.id("enc_fc.b"))?;
        self.check_finite(tape, latent, "enc_fc")?;
        Ok(EncoderPass {
            input,
            skips: [skips[0], skips[1], skips[2]],
            latent,
        })
    }

    /// Runs the decoder from a latent node, reusing the skip activations of
    /// the encoder pass. Returns the residual node (no output activation).
    pub fn decode(&self, tape: &mut Tape, enc: &EncoderPass) -> Result<NodeId> {
        let side = self.config.patch / 8;
        let fc = tape.dense(enc.latent, self.id("dec_fc.w"), self.id("dec_fc.b"))?;
        self.check_finite(tape, fc, "dec_fc")?;
        let mut cur = tape.reshape(fc, Shape::Chw(self.config.widths[2], side, side))?;
        for (layer, skip) in [("dec3", enc.skips[2]), ("dec2", enc.skips[1])] {
            let up = tape.upsample2(cur)?;
            let cat = tape.concat_c(up, skip)?;
            let conv = tape.conv3x3(cat, self.id(&format!("{layer}.w")), self.id(&format!("{layer}.b")))?;
            cur = self.act(tape, conv);
            self.check_finite(tape, cur, layer)?;
        }
        let up = tape.upsample2(cur)?;
        let cat = tape.concat_c(up, enc.skips[0])?;
        let residual = tape.conv3x3(cat, self.id("dec1.w"), self.id("dec1.b"))?;
        self.check_finite(tape, residual, "dec1")?;
        Ok(residual)
    }

    /// Encoder + decoder + `prediction = input - residual` (unclipped).
    pub fn derain_pass(&self, tape: &mut Tape, x: &Tensor) -> Result<DerainPass> {
        let enc = self.encode(tape, x)?;
        let residual = self.decode(tape, &enc)?;
        let prediction = tape.sub(enc.input, residual)?;
        Ok(DerainPass {
            enc,
            residual,
            prediction,
        })
    }
}

/// Convenience inference: derained estimate clipped into [0, 1].
pub fn derain(x: &Tensor, params: &ParamSet) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, params);
    let pass = bound.derain_pass(&mut tape, x)?;
    let pred = tape.value(pass.prediction);
    let clipped: Vec<f64> = pred.values().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(pred.shape(), clipped)
}

/// Convenience encoding: latent values of `x` without keeping the tape.
pub fn encode_latent(x: &Tensor, params: &ParamSet) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, params);
    let pass = bound.encode(&mut tape, x)?;
    Ok(tape.value(pass.latent).values().to_vec())
}

/// Parameter names that belong to the encoder; the rest are decoder-side.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc")
}
