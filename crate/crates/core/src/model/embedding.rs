//! Note-pooling embedding: per-note pitch/duration/position embeddings mean
//! pooled onto the tokens they are sung on, plus a causal convolution over
//! embedded cumulative alignment ratios.

use candle_core::{Device, Tensor};

use super::layers::{sinusoidal_positions, CausalConv1d};
use super::params::ParamStore;
use crate::alignment::bin_ratio;
use crate::error::{Error, Result};

const TABLE_STD: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct NotePooling {
    midi: Tensor,
    dur: Tensor,
    ratio: Tensor,
    conv: CausalConv1d,
    d: usize,
    ratio_bins: usize,
}

/// Rows of `table` for a `(B, T)` id tensor, as `(B, T, d)`.
pub fn lookup(table: &Tensor, ids: &Tensor) -> Result<Tensor> {
    let (b, t) = ids.dims2()?;
    let d = table.dim(1)?;
    Ok(table.index_select(&ids.flatten_all()?, 0)?.reshape((b, t, d))?)
}

impl NotePooling {
    pub fn new(
        ps: &ParamStore,
        name: &str,
        d: usize,
        midi_table: usize,
        dur_table: usize,
        ratio_bins: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(Self {
            midi: ps.normal(&format!("{name}.midi"), &[midi_table, d], TABLE_STD)?,
            dur: ps.normal(&format!("{name}.dur"), &[dur_table, d], TABLE_STD)?,
            ratio: ps.normal(&format!("{name}.ratio"), &[ratio_bins, d], TABLE_STD)?,
            conv: CausalConv1d::new(ps, &format!("{name}.conv"), d, kernel)?,
            d,
            ratio_bins,
        })
    }

    /// `(B, N)` pitch and duration ids to `(B, N, d)` note embeddings.
    pub fn embed_notes(&self, midi: &Tensor, dur: &Tensor) -> Result<Tensor> {
        let (_, n) = midi.dims2()?;
        let max_midi = midi.max_all()?.to_scalar::<u32>()? as usize;
        let max_dur = dur.max_all()?.to_scalar::<u32>()? as usize;
        if max_midi >= self.midi.dim(0)? || max_dur >= self.dur.dim(0)? {
            return Err(Error::Domain(format!("note id out of range (midi {max_midi}, duration {max_dur})")));
        }
        let pos = sinusoidal_positions(n, self.d, midi.device())?.to_dtype(self.midi.dtype())?;
        let e = (lookup(&self.midi, midi)? + lookup(&self.dur, dur)?)?;
        Ok(e.broadcast_add(&pos)?)
    }

    /// `(B, T, N)` pooling weights applied to `(B, N, d)` note embeddings.
    pub fn melody(&self, pool: &Tensor, notes: &Tensor) -> Result<Tensor> {
        Ok(pool.matmul(notes)?)
    }

    /// `ReLU(conv(E_ratio[bins]))` with masked positions zeroed on input and
    /// output, so unaligned prefix positions act as the causal left padding.
    pub fn alignment(&self, bins: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let e = lookup(&self.ratio, bins)?.broadcast_mul(mask)?;
        Ok(self.conv.forward(&e)?.relu()?.broadcast_mul(mask)?)
    }

    /// Alignment embedding of one ratio sequence, `(L, d)`.
    pub fn alignment_from_ratios(&self, ratios: &[f64]) -> Result<Tensor> {
        let mut prev = 0.0;
        let mut bins = Vec::with_capacity(ratios.len());
        for &r in ratios {
            if r < prev {
                return Err(Error::Domain(format!("alignment ratios decrease ({prev} then {r})")));
            }
            bins.push(bin_ratio(r, self.ratio_bins)? as u32);
            prev = r;
        }
        let l = ratios.len();
        let device = self.ratio.device();
        let bins = Tensor::from_vec(bins, (1, l), device)?;
        let mask = Tensor::ones((1, l, 1), self.ratio.dtype(), device)?;
        Ok(self.alignment(&bins, &mask)?.squeeze(0)?)
    }

    pub fn device(&self) -> &Device {
        self.ratio.device()
    }
}
