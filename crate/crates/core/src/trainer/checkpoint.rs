//! `OCKP` checkpoint encoding. Layout, all little-endian:
//!
//! ```text
//! "OCKP" u32 version
//! u32 config_len, config text (flat key = value)
//! u32 m, h, d, K, n_known
//! f64 blocks: w1 b1 w2 b2, prototypes (K x d), velocity w1 b1 w2 b2
//! u32 rng_count, 56 bytes per stream (data, augment)
//! u64 epochs done, u8 stopped early, K x u64 assignment counts
//! sampler: u32 len + u64 order, u64 cursor (labeled then unlabeled)
//! u32 report count, fixed-width report records
//! ```

use std::path::Path;

use crate::data::SplitDataset;
use crate::encoder::Mlp;
use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::prototype::PrototypeStore;
use crate::rng::{Rng, RNG_STATE_LEN};

use super::{EpochReport, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn opt_f64(&mut self, v: Option<f64>) {
        match v {
            Some(x) => {
                self.u8(1);
                self.f64s(&[x]);
            }
            None => {
                self.u8(0);
                self.f64s(&[0.0]);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corrupt(format!("checkpoint truncated at byte {} (need {n} more)", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("block size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn opt_f64(&mut self) -> Result<Option<f64>> {
        let tag = self.u8()?;
        let v = self.f64()?;
        match tag {
            0 => Ok(None),
            1 => Ok(Some(v)),
            t => Err(Error::Corrupt(format!("bad option tag {t}"))),
        }
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        (0..n).map(|_| self.u64().map(|v| v as usize)).collect()
    }
}

fn write_mlp_blocks(w: &mut Writer, blocks: [(&[f64], bool); 4]) {
    for (b, _) in blocks {
        w.f64s(b);
    }
}

fn read_into(r: &mut Reader, blocks: [(&mut [f64], bool); 4]) -> Result<()> {
    for (b, _) in blocks {
        let v = r.f64s(b.len())?;
        b.copy_from_slice(&v);
    }
    Ok(())
}

/// Reads only the header and embedded config, enough to rebuild the split a
/// checkpoint was trained on.
pub fn checkpoint_config(bytes: &[u8]) -> Result<TrainConfig> {
    let mut r = Reader { bytes, pos: 0 };
    read_header(&mut r)
}

fn read_header(r: &mut Reader) -> Result<TrainConfig> {
    if r.take(4).map_err(|_| Error::Corrupt("missing magic".into()))? != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("bad magic, expected OCKP".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let text_len = r.u32()?;
    let text =
        std::str::from_utf8(r.take(text_len)?).map_err(|_| Error::Corrupt("config text is not UTF-8".into()))?;
    TrainConfig::from_text(text).map_err(|e| Error::Corrupt(format!("embedded config: {e}")))
}

impl Trainer {
    /// Serializes the full training state.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config.to_text();
        w.u32(text.len());
        w.0.extend_from_slice(text.as_bytes());
        w.u32(self.mlp.input_dim());
        w.u32(self.mlp.hidden_dim());
        w.u32(self.mlp.output_dim());
        w.u32(self.store.n_classes());
        w.u32(self.store.n_known());
        write_mlp_blocks(&mut w, self.mlp.param_blocks());
        w.f64s(self.store.matrix().as_slice());
        write_mlp_blocks(&mut w, self.optimizer.velocity.blocks());
        w.u32(2);
        w.0.extend_from_slice(&self.data_rng.state_bytes());
        w.0.extend_from_slice(&self.augment_rng.state_bytes());
        w.u64(self.epoch as u64);
        w.u8(self.stopped_early as u8);
        for &c in self.store.assignment_counts() {
            w.u64(c);
        }
        let (lo, lc, uo, uc) = self.sampler.state();
        for (order, cursor) in [(lo, lc), (uo, uc)] {
            w.u32(order.len());
            for &i in order {
                w.u64(i as u64);
            }
            w.u64(cursor as u64);
        }
        w.u32(self.reports.len());
        for r in &self.reports {
            w.u64(r.epoch as u64);
            w.f64s(&[r.loss_total, r.loss_l, r.loss_u, r.loss_n, r.kl]);
            w.opt_f64(r.lambda_threshold);
            w.f64s(&[r.gated_fraction]);
            w.opt_f64(r.acc_all);
            w.opt_f64(r.acc_novel);
            w.opt_f64(r.acc_seen);
            w.u64(r.active_prototypes as u64);
        }
        w.0
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes())?;
        Ok(())
    }

    /// Rebuilds a trainer from checkpoint bytes. `split` must be the split the
    /// checkpoint was trained on.
    pub fn from_checkpoint(bytes: &[u8], split: SplitDataset) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let config = read_header(&mut r)?;
        let (m, h, d, k, n_known) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);

        if split.dim != m {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint expects input dimension {m}, dataset has {}",
                split.dim
            )));
        }
        let mut trainer = Trainer::new(config, split)?;
        if trainer.mlp.hidden_dim() != h
            || trainer.mlp.output_dim() != d
            || trainer.store.n_classes() != k
            || trainer.store.n_known() != n_known
        {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint layers {m}x{h}x{d} with {k} prototypes ({n_known} known) do not match \
                 {}x{}x{} with {} ({} known)",
                trainer.mlp.input_dim(),
                trainer.mlp.hidden_dim(),
                trainer.mlp.output_dim(),
                trainer.store.n_classes(),
                trainer.store.n_known()
            )));
        }
        let mut mlp: Mlp = trainer.mlp.clone();
        read_into(&mut r, mlp.param_blocks_mut())?;
        let protos = Matrix::from_vec(k, d, r.f64s(k * d)?)?;
        read_into(&mut r, trainer.optimizer.velocity.blocks_mut())?;
        let n_rng = r.u32()?;
        if n_rng != 2 {
            return Err(Error::Corrupt(format!("expected 2 rng streams, found {n_rng}")));
        }
        let data_rng = Rng::from_state_bytes(r.take(RNG_STATE_LEN)?)?;
        let augment_rng = Rng::from_state_bytes(r.take(RNG_STATE_LEN)?)?;
        let epoch = r.u64()? as usize;
        let stopped_early = match r.u8()? {
            0 => false,
            1 => true,
            t => return Err(Error::Corrupt(format!("bad stop flag {t}"))),
        };
        let counts = (0..k).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let lo = r.usizes()?;
        let lc = r.u64()? as usize;
        let uo = r.usizes()?;
        let uc = r.u64()? as usize;
        trainer.sampler.restore(lo, lc, uo, uc)?;
        let n_reports = r.u32()?;
        let mut reports = Vec::with_capacity(n_reports.min(1 << 16));
        for _ in 0..n_reports {
            let epoch = r.u64()? as usize;
            let losses = r.f64s(5)?;
            let lambda_threshold = r.opt_f64()?;
            let gated_fraction = r.f64()?;
            reports.push(EpochReport {
                epoch,
                loss_total: losses[0],
                loss_l: losses[1],
                loss_u: losses[2],
                loss_n: losses[3],
                kl: losses[4],
                lambda_threshold,
                gated_fraction,
                acc_all: r.opt_f64()?,
                acc_novel: r.opt_f64()?,
                acc_seen: r.opt_f64()?,
                active_prototypes: r.u64()? as usize,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if !mlp.is_finite() || !protos.is_finite() {
            return Err(Error::Corrupt("non-finite parameters".into()));
        }
        trainer.mlp = mlp;
        trainer.store = PrototypeStore::from_parts(protos, n_known, counts)?;
        trainer.data_rng = data_rng;
        trainer.augment_rng = augment_rng;
        trainer.epoch = epoch;
        trainer.stopped_early = stopped_early;
        trainer.reports = reports;
        Ok(trainer)
    }

    pub fn load_checkpoint(path: &Path, split: SplitDataset) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint(&bytes, split)
    }
}
