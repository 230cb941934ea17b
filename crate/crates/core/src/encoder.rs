//! Patch-location encoder, projection heads and the mirrored decoder.
//!
//! An image is cut into a `g × g` grid of patches. A shared per-patch stack
//! maps each patch to a location feature vector (the location grid); an
//! aggregator stack maps the flattened grid to the latent vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_side: usize,
    /// Location-feature channels.
    pub d_loc: usize,
    /// Latent dimension; also the critic embedding width.
    pub d_z: usize,
    /// Hidden widths used by both the per-patch and the aggregator stacks.
    pub hidden: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_side: 16,
            patch_side: 4,
            d_loc: 32,
            d_z: 64,
            hidden: vec![64],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || self.patch_side == 0 || self.d_loc == 0 || self.d_z == 0 {
            return Err(Error::config("encoder sizes must be positive"));
        }
        if self.image_side % self.patch_side != 0 {
            return Err(Error::config(format!(
                "patch_side {} does not divide image_side {}",
                self.patch_side, self.image_side
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        Ok(())
    }

    /// Patches per grid side.
    pub fn grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// Number of locations `L = g²`.
    pub fn locations(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    fn patch_widths(&self) -> Vec<usize> {
        let mut w = vec![self.patch_side * self.patch_side];
        w.extend(&self.hidden);
        w.push(self.d_loc);
        w
    }

    fn agg_widths(&self) -> Vec<usize> {
        let mut w = vec![self.locations() * self.d_loc];
        w.extend(&self.hidden);
        w.push(self.d_z);
        w
    }

    /// Flat index map from a batch of images `[n, side, side]` to patch rows
    /// `[n·L, p²]`, rows ordered by (sample, location).
    pub fn patch_index(&self, n: usize) -> Vec<usize> {
        let (s, p, g) = (self.image_side, self.patch_side, self.grid());
        let mut idx = Vec::with_capacity(n * s * s);
        for m in 0..n {
            for gy in 0..g {
                for gx in 0..g {
                    for py in 0..p {
                        for px in 0..p {
                            idx.push(m * s * s + (gy * p + py) * s + gx * p + px);
                        }
                    }
                }
            }
        }
        idx
    }

    /// Inverse of [`EncoderConfig::patch_index`].
    pub fn unpatch_index(&self, n: usize) -> Vec<usize> {
        let fwd = self.patch_index(n);
        let mut inv = vec![0; fwd.len()];
        for (row_pos, &pix) in fwd.iter().enumerate() {
            inv[pix] = row_pos;
        }
        inv
    }
}

/// Location grid and latent vector of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `[L, d_loc]`
    pub locations: Tensor,
    /// `[d_z]`
    pub latent: Tensor,
}

/// Tape nodes for a batch of encoded images.
#[derive(Debug, Clone, Copy)]
pub struct BatchEncoding {
    /// `[n·L, d_loc]`, rows ordered by (sample, location).
    pub locations: Var,
    /// `[n, d_z]`
    pub latent: Var,
}

/// Latent projection head ψ.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentHead {
    #[default]
    Identity,
}

impl LatentHead {
    pub fn apply(self, _tape: &mut Tape, z: Var) -> Var {
        match self {
            LatentHead::Identity => z,
        }
    }
}

fn init_stack(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut impl Rng) {
    for (i, w) in widths.windows(2).enumerate() {
        store.init_affine(&format!("{name}.{i}"), w[0], w[1], rng);
    }
}

/// Affine layers with relu between; `relu_last` adds one after the final layer.
fn run_stack(
    tape: &mut Tape,
    params: &BoundParams,
    name: &str,
    layers: usize,
    mut x: Var,
    relu_last: bool,
) -> Result<Var> {
    for i in 0..layers {
        let w = params.get(&format!("{name}.{i}.w"))?;
        let b = params.get(&format!("{name}.{i}.b"))?;
        x = tape.matmul(x, w)?;
        x = tape.add_bias(x, b)?;
        if i + 1 < layers || relu_last {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// Encoder parameters for one modality under `prefix`.
pub fn init_encoder(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) {
    init_stack(store, &format!("{prefix}.patch"), &cfg.patch_widths(), rng);
    init_stack(store, &format!("{prefix}.agg"), &cfg.agg_widths(), rng);
}

/// Location projection head φ: `d_loc → d_z → d_z`.
pub fn init_location_head(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    rng: &mut impl Rng,
) {
    init_stack(store, &format!("{prefix}.phi"), &[cfg.d_loc, cfg.d_z, cfg.d_z], rng);
}

pub fn init_decoder(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) {
    let mut agg = cfg.agg_widths();
    agg.reverse();
    init_stack(store, &format!("{prefix}.dec.agg"), &agg, rng);
    let mut patch = cfg.patch_widths();
    patch.reverse();
    init_stack(store, &format!("{prefix}.dec.patch"), &patch, rng);
}

/// Encodes a batch `images: [n, side, side]`.
pub fn encode_batch(
    tape: &mut Tape,
    params: &BoundParams,
    prefix: &str,
    cfg: &EncoderConfig,
    images: Var,
) -> Result<BatchEncoding> {
    let shape = tape.shape(images).to_vec();
    if shape.len() != 3 || shape[1] != cfg.image_side || shape[2] != cfg.image_side {
        return Err(Error::shape(
            "encode",
            &shape,
            &[0, cfg.image_side, cfg.image_side],
        ));
    }
    let n = shape[0];
    let (l, p) = (cfg.locations(), cfg.patch_side);
    let patches = tape.gather(images, cfg.patch_index(n), &[n * l, p * p])?;
    let depth = cfg.hidden.len() + 1;
    let locations = run_stack(tape, params, &format!("{prefix}.patch"), depth, patches, true)?;
    let flat = tape.reshape(locations, &[n, l * cfg.d_loc])?;
    let latent = run_stack(tape, params, &format!("{prefix}.agg"), depth, flat, false)?;
    Ok(BatchEncoding { locations, latent })
}

/// Evaluates the encoder on a single image with frozen parameters.
pub fn encode(
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    image: &Tensor,
) -> Result<EncoderOutput> {
    if image.shape() != [cfg.image_side, cfg.image_side] {
        return Err(Error::shape(
            "encode",
            image.shape(),
            &[cfg.image_side, cfg.image_side],
        ));
    }
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let x = tape.constant(image.clone().reshaped(&[1, cfg.image_side, cfg.image_side])?);
    let enc = encode_batch(&mut tape, &params, prefix, cfg, x)?;
    Ok(EncoderOutput {
        locations: tape.value(enc.locations).clone(),
        latent: tape.value(enc.latent).clone().reshaped(&[cfg.d_z])?,
    })
}

/// Applies φ to location rows `[r, d_loc] → [r, d_z]`.
pub fn project_location(
    tape: &mut Tape,
    params: &BoundParams,
    prefix: &str,
    locations: Var,
) -> Result<Var> {
    run_stack(tape, params, &format!("{prefix}.phi"), 2, locations, false)
}

/// Maps latents `[n, d_z]` back to images `[n, side, side]`.
pub fn decode_batch(
    tape: &mut Tape,
    params: &BoundParams,
    prefix: &str,
    cfg: &EncoderConfig,
    z: Var,
) -> Result<Var> {
    let n = tape.shape(z)[0];
    let (l, p, s) = (cfg.locations(), cfg.patch_side, cfg.image_side);
    let depth = cfg.hidden.len() + 1;
    let grid = run_stack(tape, params, &format!("{prefix}.dec.agg"), depth, z, true)?;
    let rows = tape.reshape(grid, &[n * l, cfg.d_loc])?;
    let patches = run_stack(tape, params, &format!("{prefix}.dec.patch"), depth, rows, false)?;
    let flat = tape.reshape(patches, &[n * l * p * p])?;
    tape.gather(flat, cfg.unpatch_index(n), &[n, s, s])
}
