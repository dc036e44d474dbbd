//! Post-training resampling and self-extension of a grouped codebook.
//!
//! New cores are fresh N(0, 1) rows pushed through each group's frozen
//! projector. Self-extension keeps the trained core and appends rows after it,
//! so every trained code keeps its position inside its group.

use serde::{Deserialize, Serialize};

use crate::codebook::{GroupParams, GroupedCodebook};
use crate::error::{Error, Result};
use crate::numerics::{sample_standard_normal, RngStream, Scalar, StreamPurpose, Tensor};
use crate::trainer::{evaluate, Checkpoint, CodebookState, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMode {
    /// Replace each core with `m_j` fresh rows.
    Resample,
    /// Append `m_j - n_j` fresh rows after each trained core.
    SelfExtend,
}

#[derive(Clone, Debug)]
pub struct ResampleRequest {
    pub mode: ResampleMode,
    pub target_sizes: Vec<usize>,
    pub rng: RngStream,
}

impl ResampleRequest {
    /// Every group scaled by `multiple`.
    pub fn scaled(gc: &GroupedCodebook<impl Scalar>, mode: ResampleMode, multiple: usize, rng: RngStream) -> Self {
        Self {
            mode,
            target_sizes: gc.groups().iter().map(|g| g.size() * multiple).collect(),
            rng,
        }
    }
}

/// Old global index to new global index. Codes dropped by a resample have no
/// entry.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRemap {
    pub pairs: Vec<(usize, usize)>,
}

impl IndexRemap {
    pub fn get(&self, old: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == old).map(|p| p.1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("old_index,new_index\n");
        for (o, n) in &self.pairs {
            out.push_str(&format!("{o},{n}\n"));
        }
        out
    }
}

pub fn resample_codebook<T: Scalar>(
    gc: &GroupedCodebook<T>,
    req: &ResampleRequest,
) -> Result<(GroupedCodebook<T>, IndexRemap)> {
    if req.target_sizes.len() != gc.k() {
        return Err(Error::config(format!(
            "{} target sizes given for {} groups",
            req.target_sizes.len(),
            gc.k()
        )));
    }
    for (j, (&m, g)) in req.target_sizes.iter().zip(gc.groups()).enumerate() {
        if m == 0 {
            return Err(Error::config(format!("target size for group {j} must be at least 1")));
        }
        if req.mode == ResampleMode::SelfExtend && m < g.size() {
            return Err(Error::config(format!(
                "self-extension cannot shrink group {j} from {} to {m} codes",
                g.size()
            )));
        }
    }
    let mut rng = req.rng.clone();
    let mut groups = Vec::with_capacity(gc.k());
    let mut remap = IndexRemap::default();
    let mut new_offset = 0;
    for (j, (&m, g)) in req.target_sizes.iter().zip(gc.groups()).enumerate() {
        let r = g.rank();
        let core = match req.mode {
            ResampleMode::Resample => sample_standard_normal(&[m, r], &mut rng),
            ResampleMode::SelfExtend => {
                let fresh: Tensor<T> = sample_standard_normal(&[m - g.size(), r], &mut rng);
                let mut data = g.core().data().to_vec();
                data.extend_from_slice(fresh.data());
                let old = gc.offsets()[j];
                remap.pairs.extend((0..g.size()).map(|l| (old + l, new_offset + l)));
                Tensor::from_vec(&[m, r], data)?
            }
        };
        groups.push(GroupParams::new(core, g.projector.clone()));
        new_offset += m;
    }
    Ok((GroupedCodebook::from_groups(gc.d(), gc.variant(), groups)?, remap))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtensionRow {
    pub multiple: usize,
    pub codebook_size: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub utilization: f64,
}

/// Self-extends the checkpoint's codebook by each multiple and evaluates the
/// frozen model on `eval`.
pub fn extension_sweep<T: Scalar>(
    ckpt: &Checkpoint<T>,
    multiples: &[usize],
    eval: &Tensor<T>,
    batch_size: usize,
) -> Result<Vec<ExtensionRow>> {
    if multiples.is_empty() {
        return Err(Error::config("extension sweep needs at least one multiple"));
    }
    if let Some(m) = multiples.iter().find(|&&m| m == 0) {
        return Err(Error::config(format!("extension multiple must be at least 1, got {m}")));
    }
    let trainer = Trainer::from_checkpoint(ckpt)?;
    let gc = match trainer.codebook() {
        CodebookState::Grouped(gc) => gc,
        CodebookState::Free { .. } => {
            return Err(Error::config("vanilla codebooks have no projector to extend"))
        }
    };
    multiples
        .iter()
        .map(|&multiple| {
            let rng = RngStream::derive(ckpt.config.seed, StreamPurpose::Resample, 0);
            let req = ResampleRequest::scaled(gc, ResampleMode::SelfExtend, multiple, rng);
            let (extended, _) = resample_codebook(gc, &req)?;
            let m = evaluate(trainer.autoencoder(), &extended.materialized()?, eval, batch_size)?;
            Ok(ExtensionRow {
                multiple,
                codebook_size: extended.n(),
                mse: m.mse,
                psnr: m.psnr,
                ssim: m.ssim,
                utilization: m.utilization,
            })
        })
        .collect()
}
