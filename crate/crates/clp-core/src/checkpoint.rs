//! Binary checkpoints for trained state: magic `CLPW`, a format version,
//! run counters, and named little-endian `f64` parameter blocks. The same
//! codec discipline as the dataset container format — structural violations
//! are format errors naming the byte offset, loads are all-or-nothing, and
//! writes are atomic (write-to-temp, rename).
//!
//! Restoring into a model template checks every block name and shape;
//! a checkpoint that does not match the requested architecture is a
//! versioning error, never a partial load.

use std::path::Path;

use thiserror::Error;

use crate::characteristics::{ClassStats, FeatureNormalizer};
use crate::metatrain::TrainState;
use crate::models::{Mlp, PerturbNet};
use crate::scalar::{lit, upcast, Scalar};
use crate::tensorad::Tensor;
use crate::util::atomic_write;

const MAGIC: &[u8; 4] = b"CLPW";
const FORMAT_VERSION: u16 = 1;
/// Sanity bound on block dimensionality (tensors here are 1-D or 2-D).
const MAX_NDIM: u16 = 4;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("checkpoint versioning: {0}")]
    Versioning(String),
}

pub type CheckResult<T> = Result<T, CheckpointError>;

/// An in-memory checkpoint: run counters plus named `f64` tensors.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub iteration: u64,
    pub epochs_completed: u64,
    blocks: Vec<(String, Tensor<f64>)>,
}

fn block_f64<F: Scalar>(t: &Tensor<F>) -> Tensor<f64> {
    Tensor::from_vec(
        t.shape().to_vec(),
        t.data().iter().map(|&v| upcast(v)).collect(),
    )
    .expect("shape preserved")
}

fn block_downcast<F: Scalar>(t: &Tensor<f64>) -> Tensor<F> {
    Tensor::from_vec(
        t.shape().to_vec(),
        t.data().iter().map(|&v| lit::<F>(v)).collect(),
    )
    .expect("shape preserved")
}

impl Checkpoint {
    /// Snapshots a training state. All tensors are stored as `f64`.
    pub fn from_state<F: Scalar>(state: &TrainState<F>) -> Self {
        let mut blocks = Vec::new();
        for (i, (w, b)) in state.model.layer_tensors().enumerate() {
            blocks.push((format!("clf.w{i}"), block_f64(w)));
            blocks.push((format!("clf.b{i}"), block_f64(b)));
        }
        if let Some(pnet) = &state.pnet {
            for (i, (w, b)) in pnet.layer_tensors().enumerate() {
                blocks.push((format!("pnet.w{i}"), block_f64(w)));
                blocks.push((format!("pnet.b{i}"), block_f64(b)));
            }
        }
        let stats_raw = state.stats.to_raw();
        blocks.push((
            "stats.raw".into(),
            Tensor::from_vec(vec![stats_raw.len()], stats_raw).expect("1-d"),
        ));
        let norm_raw = state.normalizer.to_raw();
        blocks.push((
            "norm.raw".into(),
            Tensor::from_vec(vec![norm_raw.len()], norm_raw).expect("1-d"),
        ));
        Checkpoint {
            iteration: state.iteration as u64,
            epochs_completed: state.epochs_completed as u64,
            blocks,
        }
    }

    pub fn block(&self, name: &str) -> Option<&Tensor<f64>> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn block_names(&self) -> Vec<&str> {
        self.blocks.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn has_pnet(&self) -> bool {
        self.blocks.iter().any(|(n, _)| n.starts_with("pnet."))
    }

    /// Rebuilds a training state inside the given architecture templates.
    /// Every expected block must be present with the template's shape, and
    /// no unknown blocks may remain; any mismatch is a versioning error.
    pub fn restore<F: Scalar>(
        &self,
        model_template: &Mlp<F>,
        pnet_template: Option<&PerturbNet<F>>,
    ) -> CheckResult<TrainState<F>> {
        if pnet_template.is_some() != self.has_pnet() {
            return Err(CheckpointError::Versioning(if self.has_pnet() {
                "checkpoint carries a perturbation net but none was requested".into()
            } else {
                "a perturbation net was requested but the checkpoint has none".into()
            }));
        }

        let mut taker = BlockTaker {
            blocks: &self.blocks,
            consumed: vec![false; self.blocks.len()],
        };

        let mut model = model_template.clone();
        let mut layers = Vec::new();
        for (i, (w, b)) in model_template.layer_tensors().enumerate() {
            let wt = taker.take_shaped(&format!("clf.w{i}"), w.shape())?;
            let bt = taker.take_shaped(&format!("clf.b{i}"), b.shape())?;
            layers.push((block_downcast::<F>(wt), block_downcast::<F>(bt)));
        }
        model
            .set_layer_tensors(layers)
            .map_err(|e| CheckpointError::Versioning(e.to_string()))?;

        let pnet = match pnet_template {
            None => None,
            Some(tpl) => {
                let mut pnet = tpl.clone();
                let mut layers = Vec::new();
                for (i, (w, b)) in tpl.layer_tensors().enumerate() {
                    let wt = taker.take_shaped(&format!("pnet.w{i}"), w.shape())?;
                    let bt = taker.take_shaped(&format!("pnet.b{i}"), b.shape())?;
                    layers.push((block_downcast::<F>(wt), block_downcast::<F>(bt)));
                }
                pnet.set_layer_tensors(layers)
                    .map_err(|e| CheckpointError::Versioning(e.to_string()))?;
                Some(pnet)
            }
        };

        let stats_raw = taker.take_raw("stats.raw")?;
        let classes = model_template.classes();
        let stats = ClassStats::from_raw(&stats_raw, classes)
            .map_err(|e| CheckpointError::Versioning(e.to_string()))?;
        let norm_raw = taker.take_raw("norm.raw")?;
        let normalizer = FeatureNormalizer::from_raw(&norm_raw)
            .map_err(|e| CheckpointError::Versioning(e.to_string()))?;

        if let Some(name) = taker.leftover() {
            return Err(CheckpointError::Versioning(format!(
                "unexpected block `{name}` (wrong architecture or newer writer?)"
            )));
        }

        Ok(TrainState {
            model,
            pnet,
            stats,
            normalizer,
            iteration: self.iteration as usize,
            epochs_completed: self.epochs_completed as usize,
        })
    }

    /// Little-endian serialization: magic, version u16, iteration u64,
    /// epochs u64, block count u32, then per block: name length u16, name
    /// bytes, ndim u16, dims u32 each, data f64 each.
    pub fn to_bytes(&self) -> CheckResult<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.epochs_completed.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in &self.blocks {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(CheckpointError::Versioning(format!(
                    "block name too long ({} bytes)",
                    nb.len()
                )));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(t.shape().len() as u16).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> CheckResult<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let version_at = r.pos;
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Format {
                offset: version_at,
                msg: format!("unsupported version {version}, expected {FORMAT_VERSION}"),
            });
        }
        let iteration = r.u64("iteration counter")?;
        let epochs_completed = r.u64("epoch counter")?;
        let n_blocks = r.u32("block count")? as usize;
        let mut blocks = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let name_len = r.u16("block name length")? as usize;
            let name_at = r.pos;
            let name_bytes = r.take(name_len, "block name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| CheckpointError::Format {
                    offset: name_at,
                    msg: format!("block {b}: name is not UTF-8"),
                })?
                .to_string();
            if blocks.iter().any(|(n, _): &(String, _)| *n == name) {
                return Err(CheckpointError::Format {
                    offset: name_at,
                    msg: format!("duplicate block `{name}`"),
                });
            }
            let ndim_at = r.pos;
            let ndim = r.u16("block rank")?;
            if ndim == 0 || ndim > MAX_NDIM {
                return Err(CheckpointError::Format {
                    offset: ndim_at,
                    msg: format!("block `{name}`: rank {ndim} outside 1..={MAX_NDIM}"),
                });
            }
            let mut shape = Vec::with_capacity(ndim as usize);
            let mut numel = 1usize;
            for _ in 0..ndim {
                let dims_at = r.pos;
                let d = r.u32("block dimension")? as usize;
                if d == 0 {
                    return Err(CheckpointError::Format {
                        offset: dims_at,
                        msg: format!("block `{name}`: zero dimension"),
                    });
                }
                numel = numel.checked_mul(d).ok_or_else(|| CheckpointError::Format {
                    offset: dims_at,
                    msg: format!("block `{name}`: element count overflow"),
                })?;
                shape.push(d);
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.f64("block data")?);
            }
            blocks.push((
                name,
                Tensor::from_vec(shape, data).expect("validated shape"),
            ));
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Format {
                offset: r.pos,
                msg: format!("{} trailing bytes after the last block", buf.len() - r.pos),
            });
        }
        Ok(Checkpoint {
            iteration,
            epochs_completed,
            blocks,
        })
    }

    pub fn write(&self, path: &Path) -> CheckResult<()> {
        atomic_write(path, &self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> CheckResult<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Tracks which blocks a restore has claimed so leftovers can be reported.
struct BlockTaker<'a> {
    blocks: &'a [(String, Tensor<f64>)],
    consumed: Vec<bool>,
}

impl<'a> BlockTaker<'a> {
    fn take(&mut self, name: &str) -> CheckResult<&'a Tensor<f64>> {
        match self.blocks.iter().position(|(n, _)| n == name) {
            None => Err(CheckpointError::Versioning(format!(
                "missing block `{name}`"
            ))),
            Some(i) => {
                self.consumed[i] = true;
                Ok(&self.blocks[i].1)
            }
        }
    }

    fn take_shaped(&mut self, name: &str, shape: &[usize]) -> CheckResult<&'a Tensor<f64>> {
        let t = self.take(name)?;
        if t.shape() != shape {
            return Err(CheckpointError::Versioning(format!(
                "block `{name}` has shape {:?}, the model expects {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    }

    /// Raw vectors are self-describing (their parser validates length), so
    /// only rank is checked here.
    fn take_raw(&mut self, name: &str) -> CheckResult<Vec<f64>> {
        let t = self.take(name)?;
        if t.shape().len() != 1 {
            return Err(CheckpointError::Versioning(format!(
                "block `{name}` should be rank 1, has shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data().to_vec())
    }

    fn leftover(&self) -> Option<&str> {
        self.consumed
            .iter()
            .position(|&c| !c)
            .map(|i| self.blocks[i].0.as_str())
    }
}

/// Byte-offset-tracking little-endian reader.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> CheckResult<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Format {
                offset: self.pos,
                msg: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> CheckResult<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> CheckResult<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> CheckResult<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> CheckResult<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::characteristics::CharVector;

    fn trained_like_state(with_pnet: bool) -> TrainState<f64> {
        let model = Mlp::<f64>::init(6, &[5], 3, 11).unwrap();
        let pnet = with_pnet.then(|| PerturbNet::<f64>::init(3, 4, 12).unwrap());
        let mut stats = ClassStats::new(&[7, 5, 9], 0.9).unwrap();
        stats
            .update(&[(0, 1.1, 0.2), (2, 0.7, -0.1)])
            .unwrap();
        let mut normalizer = FeatureNormalizer::standard();
        for phase in 0..4 {
            let mut arr = [0.0; 10];
            for (i, a) in arr.iter_mut().enumerate() {
                *a = ((i + 2 * phase) % 5) as f64 * 0.7 - 1.0;
            }
            normalizer.update(&CharVector::from_array(arr));
        }
        TrainState {
            model,
            pnet,
            stats,
            normalizer,
            iteration: 137,
            epochs_completed: 4,
        }
    }

    fn assert_states_bit_equal(a: &TrainState<f64>, b: &TrainState<f64>) {
        let fa: Vec<f64> = a.model.params_flatten().data().to_vec();
        let fb: Vec<f64> = b.model.params_flatten().data().to_vec();
        assert_eq!(fa, fb);
        match (&a.pnet, &b.pnet) {
            (None, None) => {}
            (Some(pa), Some(pb)) => {
                assert_eq!(
                    pa.params_flatten().data(),
                    pb.params_flatten().data()
                );
            }
            _ => panic!("perturbation net presence diverged"),
        }
        // stats raw holds NaN encodings for absent EMA slots: compare bits
        let sa: Vec<u64> = a.stats.to_raw().iter().map(|v| v.to_bits()).collect();
        let sb: Vec<u64> = b.stats.to_raw().iter().map(|v| v.to_bits()).collect();
        assert_eq!(sa, sb);
        let na: Vec<u64> = a.normalizer.to_raw().iter().map(|v| v.to_bits()).collect();
        let nb: Vec<u64> = b.normalizer.to_raw().iter().map(|v| v.to_bits()).collect();
        assert_eq!(na, nb);
        assert_eq!(a.iteration, b.iteration);
        assert_eq!(a.epochs_completed, b.epochs_completed);
    }

    #[test]
    fn round_trip_preserves_everything() {
        let state = trained_like_state(true);
        let ck = Checkpoint::from_state(&state);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let template = Mlp::<f64>::init(6, &[5], 3, 0).unwrap();
        let ptpl = PerturbNet::<f64>::init(3, 4, 0).unwrap();
        let restored = back.restore(&template, Some(&ptpl)).unwrap();
        assert_states_bit_equal(&state, &restored);
    }

    #[test]
    fn erm_round_trip_without_pnet() {
        let state = trained_like_state(false);
        let ck = Checkpoint::from_state(&state);
        assert!(!ck.has_pnet());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let template = Mlp::<f64>::init(6, &[5], 3, 0).unwrap();
        let restored = back.restore(&template, None).unwrap();
        assert_states_bit_equal(&state, &restored);
    }

    #[test]
    fn file_round_trip_is_atomic_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.clpw");
        let state = trained_like_state(true);
        let ck = Checkpoint::from_state(&state);
        ck.write(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        ck.write(&path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.iteration, 137);
        assert_eq!(back.epochs_completed, 4);
        assert_eq!(back.block_names(), ck.block_names());
    }

    #[test]
    fn truncation_reports_the_offset() {
        let ck = Checkpoint::from_state(&trained_like_state(true));
        let bytes = ck.to_bytes().unwrap();
        let cut = bytes.len() - 5;
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        match err {
            CheckpointError::Format { offset, ref msg } => {
                assert!(offset <= cut, "offset {offset} past cut {cut}");
                assert!(msg.contains("truncated"), "{msg}");
            }
            other => panic!("expected a format error, got {other}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let mut bytes = Checkpoint::from_state(&trained_like_state(false))
            .to_bytes()
            .unwrap();
        bytes[0] = b'X';
        match Checkpoint::from_bytes(&bytes).unwrap_err() {
            CheckpointError::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected a format error, got {other}"),
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut bytes = Checkpoint::from_state(&trained_like_state(false))
            .to_bytes()
            .unwrap();
        let end = bytes.len();
        bytes.push(0);
        match Checkpoint::from_bytes(&bytes).unwrap_err() {
            CheckpointError::Format { offset, ref msg } => {
                assert_eq!(offset, end);
                assert!(msg.contains("trailing"), "{msg}");
            }
            other => panic!("expected a format error, got {other}"),
        }
    }

    #[test]
    fn architecture_mismatch_is_a_versioning_error() {
        let ck = Checkpoint::from_state(&trained_like_state(true));
        let wrong_width = Mlp::<f64>::init(6, &[9], 3, 0).unwrap();
        let ptpl = PerturbNet::<f64>::init(3, 4, 0).unwrap();
        let err = ck.restore(&wrong_width, Some(&ptpl)).unwrap_err();
        match err {
            CheckpointError::Versioning(msg) => {
                assert!(msg.contains("clf.w0"), "{msg}");
                assert!(msg.contains("shape"), "{msg}");
            }
            other => panic!("expected a versioning error, got {other}"),
        }

        // extra hidden layer → some block is missing
        let deeper = Mlp::<f64>::init(6, &[5, 5], 3, 0).unwrap();
        let err = ck.restore(&deeper, Some(&ptpl)).unwrap_err();
        assert!(matches!(err, CheckpointError::Versioning(_)));
    }

    #[test]
    fn pnet_presence_must_match_request() {
        let with = Checkpoint::from_state(&trained_like_state(true));
        let without = Checkpoint::from_state(&trained_like_state(false));
        let template = Mlp::<f64>::init(6, &[5], 3, 0).unwrap();
        let ptpl = PerturbNet::<f64>::init(3, 4, 0).unwrap();
        assert!(matches!(
            with.restore(&template, None).unwrap_err(),
            CheckpointError::Versioning(_)
        ));
        assert!(matches!(
            without.restore(&template, Some(&ptpl)).unwrap_err(),
            CheckpointError::Versioning(_)
        ));
    }

    #[test]
    fn unknown_extra_block_is_a_versioning_error() {
        let state = trained_like_state(false);
        let mut ck = Checkpoint::from_state(&state);
        ck.blocks.push((
            "clf.w9".into(),
            Tensor::from_vec(vec![2, 2], vec![0.0; 4]).unwrap(),
        ));
        let ck = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let template = Mlp::<f64>::init(6, &[5], 3, 0).unwrap();
        let err = ck.restore(&template, None).unwrap_err();
        match err {
            CheckpointError::Versioning(msg) => assert!(msg.contains("clf.w9"), "{msg}"),
            other => panic!("expected a versioning error, got {other}"),
        }
    }

    #[test]
    fn f32_state_survives_the_f64_container() {
        // f32 → f64 → f32 is exact
        let model = Mlp::<f32>::init(6, &[5], 3, 11).unwrap();
        let mut stats = ClassStats::new(&[4, 4, 4], 0.9).unwrap();
        stats.update(&[(1, 0.9, 0.05)]).unwrap();
        let mut normalizer = FeatureNormalizer::standard();
        normalizer.update(&CharVector::from_array([0.3; 10]));
        let state = TrainState::<f32> {
            model: model.clone(),
            pnet: None,
            stats,
            normalizer,
            iteration: 9,
            epochs_completed: 1,
        };
        let ck = Checkpoint::from_bytes(
            &Checkpoint::from_state(&state).to_bytes().unwrap(),
        )
        .unwrap();
        let template = Mlp::<f32>::init(6, &[5], 3, 0).unwrap();
        let restored = ck.restore(&template, None).unwrap();
        assert_eq!(
            state.model.params_flatten().data(),
            restored.model.params_flatten().data()
        );
    }

    #[test]
    fn duplicate_blocks_are_rejected_by_the_parser() {
        let state = trained_like_state(false);
        let mut ck = Checkpoint::from_state(&state);
        let dup = ck.blocks[0].clone();
        ck.blocks.push(dup);
        let err = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap_err();
        match err {
            CheckpointError::Format { ref msg, .. } => {
                assert!(msg.contains("duplicate"), "{msg}")
            }
            other => panic!("expected a format error, got {other}"),
        }
    }
}
