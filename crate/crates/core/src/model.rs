//! Two-modality model: one encoder per modality plus the heads an
//! objective graph needs.

use std::path::Path;

use crate::diffcore::{grad_check_many, Coords, Tape, Var};
use crate::encoder::{
    decode_batch, encode_batch, init_decoder, init_encoder, init_location_head, project_location,
    EncoderConfig, LatentHead,
};
use crate::error::{Error, Result};
use crate::objectives::{build_loss, CriticConfig, ModalityView, ObjectiveGraph};
use crate::params::{BoundParams, ParamStore};
use crate::rng::stream;
use crate::synthdata::{load_tensors, save_tensors};
use crate::tensor::Tensor;

pub const PREFIXES: [&str; 2] = ["m1", "m2"];

// init streams; encoders come first so every preset shares them
const S_ENCODER: u64 = 100;
const S_HEADS: u64 = 110;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub encoder: EncoderConfig,
    pub params: ParamStore,
}

/// Supervised targets for a batch: label per row and a mask that drops
/// rows without a binary label.
#[derive(Debug, Clone, Default)]
pub struct BatchTargets {
    pub labels: Vec<f64>,
    pub mask: Vec<f64>,
}

impl FusionModel {
    /// Encoder weights depend only on `(encoder, seed)`; heads are added per
    /// graph from their own stream.
    pub fn init(encoder: &EncoderConfig, graph: &ObjectiveGraph, seed: u64) -> Result<Self> {
        encoder.validate()?;
        let mut params = ParamStore::new();
        for (m, prefix) in PREFIXES.iter().enumerate() {
            let mut rng = stream(seed, S_ENCODER + m as u64);
            init_encoder(&mut params, prefix, encoder, &mut rng);
            let mut rng = stream(seed, S_HEADS + m as u64);
            if graph.uses_locations(m + 1) {
                init_location_head(&mut params, prefix, encoder, &mut rng);
            }
            if graph.aux().recon[m] {
                init_decoder(&mut params, prefix, encoder, &mut rng);
            }
            if graph.aux().supervised {
                params.init_affine(&format!("{prefix}.sup"), encoder.d_z, 1, &mut rng);
            }
        }
        Ok(FusionModel {
            encoder: encoder.clone(),
            params,
        })
    }

    /// Rebuilds a model from saved parameters.
    pub fn from_params(encoder: &EncoderConfig, params: ParamStore) -> Result<Self> {
        encoder.validate()?;
        for prefix in PREFIXES {
            if !params.contains(&format!("{prefix}.patch.0.w")) {
                return Err(Error::contract(format!("checkpoint has no encoder for '{prefix}'")));
            }
        }
        Ok(FusionModel {
            encoder: encoder.clone(),
            params,
        })
    }

    /// Writes the parameters as a tensor container.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_tensors(path, &self.params.to_named())
    }

    pub fn load(encoder: &EncoderConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_params(encoder, ParamStore::from_named(load_tensors(path)?))
    }

    /// Forward pass for both modalities of a batch, producing everything
    /// `build_loss` reads for `graph`.
    pub fn views(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        graph: &ObjectiveGraph,
        images: [Var; 2],
        targets: Option<&BatchTargets>,
    ) -> Result<[ModalityView; 2]> {
        let cfg = &self.encoder;
        let mut views: [ModalityView; 2] = Default::default();
        for (m, prefix) in PREFIXES.iter().enumerate() {
            let enc = encode_batch(tape, bound, prefix, cfg, images[m])?;
            let n = tape.shape(enc.latent)[0];
            let view = &mut views[m];
            view.raw_latent = Some(enc.latent);
            view.latent = Some(LatentHead::Identity.apply(tape, enc.latent));
            if graph.uses_locations(m + 1) {
                let proj = project_location(tape, bound, prefix, enc.locations)?;
                view.locations = Some(tape.reshape(proj, &[n, cfg.locations(), cfg.d_z])?);
            }
            if graph.aux().recon[m] {
                let xh = decode_batch(tape, bound, prefix, cfg, enc.latent)?;
                view.recon = Some((images[m], xh));
            }
            if graph.aux().supervised {
                let t = targets.ok_or_else(|| Error::contract("supervised objective needs batch labels"))?;
                let w = bound.get(&format!("{prefix}.sup.w"))?;
                let b = bound.get(&format!("{prefix}.sup.b"))?;
                let l = tape.matmul(enc.latent, w)?;
                let l = tape.add_bias(l, b)?;
                let l = tape.reshape(l, &[n])?;
                view.supervised = Some((l, t.labels.clone(), t.mask.clone()));
            }
        }
        Ok(views)
    }

    /// Finite-difference check of the full loss of `graph` with respect to
    /// every parameter, probing at most `per_tensor` coordinates of each.
    /// Returns the worst relative error.
    pub fn loss_grad_check(
        &self,
        graph: &ObjectiveGraph,
        critic: &CriticConfig,
        images: &[Tensor; 2],
        targets: Option<&BatchTargets>,
        per_tensor: usize,
    ) -> Result<f64> {
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.clone()).collect();
        let points: Vec<Tensor> = self.params.iter().map(|(_, t)| t.clone()).collect();
        let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            let bound = BoundParams::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let x = [tape.constant(images[0].clone()), tape.constant(images[1].clone())];
            let views = self.views(tape, &bound, graph, x, targets)?;
            Ok(build_loss(tape, graph, &views, critic)?.total)
        };
        grad_check_many(f, &points, 1e-6, Coords::Strided(per_tensor))
    }

    /// Frozen latents `[n, d_z]` of one modality for `images: [n, side, side]`.
    pub fn embed(&self, modality: usize, images: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 256;
        let prefix = PREFIXES
            .get(modality)
            .ok_or_else(|| Error::contract(format!("modality index {modality} out of range")))?;
        let s = self.encoder.image_side;
        if images.rank() != 3 || images.shape()[1..] != [s, s] {
            return Err(Error::shape("embed", images.shape(), &[0, s, s]));
        }
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n * self.encoder.d_z);
        for start in (0..n).step_by(CHUNK) {
            let rows: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let mut tape = Tape::new();
            let bound = self.params.bind_frozen(&mut tape);
            let x = tape.constant(images.select_rows(&rows));
            let enc = encode_batch(&mut tape, &bound, prefix, &self.encoder, x)?;
            out.extend_from_slice(tape.value(enc.latent).data());
        }
        Tensor::new(vec![n, self.encoder.d_z], out)
    }
}
