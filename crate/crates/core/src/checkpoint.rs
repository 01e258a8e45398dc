//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   6 bytes  "EASEv1"
//! dims    9 x u32  frame_px, feat_h, feat_w, feat_d, pred_hidden,
//!                  q_gru, q_fc1, q_fc2, n_actions
//! tau     f64
//! nblocks u32
//! blocks  nblocks x { u16 name_len, name bytes, u64 value_count }
//! data    f64 values, all blocks concatenated in table order
//! ```
//!
//! The three blocks are "encoder", "predictor", and "qnet", whose value
//! counts must match the parameter counts implied by the dims header.

use std::path::Path;

use crate::controller::QNet;
use crate::error::{Error, Result};
use crate::perception::{Encoder, PerceptionConfig, Predictor};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"EASEv1";
const BLOCK_NAMES: [&str; 3] = ["encoder", "predictor", "qnet"];

/// A complete set of model weights plus the two scalars needed to run
/// them: the frame size they expect and the uncertainty temperature.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub frame_px: usize,
    pub tau: f64,
    pub encoder: Encoder,
    pub predictor: Predictor,
    pub qnet: QNet,
}

impl Snapshot {
    pub fn new(
        frame_px: usize,
        tau: f64,
        encoder: Encoder,
        predictor: Predictor,
        qnet: QNet,
    ) -> Result<Snapshot> {
        if encoder.feature_shape() != predictor.feature_shape() {
            return Err(Error::shape(
                format!("{:?} predictor grid", encoder.feature_shape()),
                format!("{:?}", predictor.feature_shape()),
            ));
        }
        if encoder.input_px() != frame_px {
            return Err(Error::shape(
                format!("{frame_px}px frames"),
                format!("{}px encoder", encoder.input_px()),
            ));
        }
        let (h, w, d) = encoder.feature_shape();
        let expected_input = h * w * d + h * w;
        if qnet.input_dim() != expected_input {
            return Err(Error::shape(
                format!("{expected_input} controller inputs"),
                format!("{}", qnet.input_dim()),
            ));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::config("tau", "must be finite and > 0"));
        }
        Ok(Snapshot { frame_px, tau, encoder, predictor, qnet })
    }

    fn dims(&self) -> [u32; 9] {
        let (h, w, d) = self.encoder.feature_shape();
        let (_, q_gru, q_fc1, q_fc2, n_actions) = self.qnet.dims();
        [
            self.frame_px as u32,
            h as u32,
            w as u32,
            d as u32,
            self.predictor.hidden_dim() as u32,
            q_gru as u32,
            q_fc1 as u32,
            q_fc2 as u32,
            n_actions as u32,
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let enc_params = {
            let mut v = Vec::with_capacity(self.encoder.param_count());
            self.encoder.write_params(&mut v);
            v
        };
        let pred_params = {
            let mut v = Vec::with_capacity(self.predictor.param_count());
            self.predictor.write_params(&mut v);
            v
        };
        let q_params = {
            let mut v = Vec::with_capacity(self.qnet.param_count());
            self.qnet.write_params(&mut v);
            v
        };
        let blocks = [&enc_params, &pred_params, &q_params];

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for dim in self.dims() {
            out.extend_from_slice(&dim.to_le_bytes());
        }
        out.extend_from_slice(&self.tau.to_le_bytes());
        out.extend_from_slice(&(BLOCK_NAMES.len() as u32).to_le_bytes());
        for (name, params) in BLOCK_NAMES.iter().zip(blocks) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        }
        for params in blocks {
            for v in params {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(data: &[u8]) -> Result<Snapshot> {
        let mut cur = Cursor { data, pos: 0 };
        let magic = cur.take(CHECKPOINT_MAGIC.len())?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let mut dims = [0u32; 9];
        for d in &mut dims {
            *d = cur.u32()?;
        }
        if dims.iter().any(|d| *d == 0) {
            return Err(Error::Format("checkpoint header contains a zero dimension".into()));
        }
        let tau = cur.f64()?;
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Format(format!("checkpoint tau {tau} is not a valid temperature")));
        }
        let n_blocks = cur.u32()? as usize;
        if n_blocks != BLOCK_NAMES.len() {
            return Err(Error::Format(format!(
                "checkpoint has {n_blocks} blocks, expected {}",
                BLOCK_NAMES.len()
            )));
        }
        let mut counts = [0usize; 3];
        for (i, expected_name) in BLOCK_NAMES.iter().enumerate() {
            let name_len = cur.u16()? as usize;
            let name = cur.take(name_len)?;
            if name != expected_name.as_bytes() {
                return Err(Error::Format(format!(
                    "checkpoint block {i} is `{}`, expected `{expected_name}`",
                    String::from_utf8_lossy(name)
                )));
            }
            counts[i] = cur.u64()? as usize;
        }

        let [frame_px, feat_h, feat_w, feat_d, pred_hidden, q_gru, q_fc1, q_fc2, n_actions] =
            dims.map(|d| d as usize);
        let pcfg = PerceptionConfig {
            feat_h,
            feat_w,
            feat_d,
            tau,
            hidden_dim: pred_hidden,
            ..PerceptionConfig::default()
        };
        let mut encoder = Encoder::new(frame_px, &pcfg)?;
        let mut predictor = Predictor::new(&pcfg, 0)?;
        let input_dim = feat_h * feat_w * feat_d + feat_h * feat_w;
        let mut qnet = QNet::new(0, input_dim, q_gru, q_fc1, q_fc2, n_actions);

        let expected_counts =
            [encoder.param_count(), predictor.param_count(), qnet.param_count()];
        for ((name, got), expected) in BLOCK_NAMES.iter().zip(counts).zip(expected_counts) {
            if got != expected {
                return Err(Error::shape(
                    format!("{expected} values in block `{name}`"),
                    format!("{got}"),
                ));
            }
        }

        let total: usize = counts.iter().sum();
        let mut values = Vec::with_capacity(total);
        for _ in 0..total {
            values.push(cur.f64()?);
        }
        if cur.pos != data.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} trailing bytes",
                data.len() - cur.pos
            )));
        }
        let mut pos = 0;
        encoder.read_params(&values, &mut pos);
        predictor.read_params(&values, &mut pos);
        qnet.read_params(&values, &mut pos);

        Snapshot::new(frame_px, tau, encoder, predictor, qnet)
    }

    pub fn load(path: &Path) -> Result<Snapshot> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Snapshot::from_bytes(&data)
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.data.len()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("sized slice")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("sized slice")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("sized slice")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("sized slice")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_snapshot() -> Snapshot {
        let pcfg = PerceptionConfig {
            feat_h: 3,
            feat_w: 3,
            feat_d: 4,
            hidden_dim: 5,
            ..PerceptionConfig::default()
        };
        let encoder = Encoder::new(32, &pcfg).unwrap();
        let predictor = Predictor::new(&pcfg, 11).unwrap();
        let qnet = QNet::new(12, 3 * 3 * 4 + 9, 6, 7, 5, 7);
        Snapshot::new(32, 1.5, encoder, predictor, qnet).unwrap()
    }

    fn params_of(s: &Snapshot) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (mut a, mut b, mut c) = (Vec::new(), Vec::new(), Vec::new());
        s.encoder.write_params(&mut a);
        s.predictor.write_params(&mut b);
        s.qnet.write_params(&mut c);
        (a, b, c)
    }

    #[test]
    fn round_trip_preserves_everything() {
        let snap = small_snapshot();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        snap.save(&path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        assert!(bytes1.starts_with(b"EASEv1"));

        let back = Snapshot::load(&path).unwrap();
        assert_eq!(back.frame_px, snap.frame_px);
        assert_eq!(back.tau, snap.tau);
        assert_eq!(params_of(&back), params_of(&snap));

        let path2 = dir.path().join("checkpoint2.bin");
        back.save(&path2).unwrap();
        assert_eq!(bytes1, std::fs::read(&path2).unwrap(), "round trip changed bytes");
    }

    #[test]
    fn loaded_networks_behave_identically() {
        let snap = small_snapshot();
        let back = Snapshot::from_bytes(&snap.to_bytes()).unwrap();
        let input: Vec<f64> = (0..snap.qnet.input_dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(snap.qnet.q_values(&input), back.qnet.q_values(&input));
        let frame = crate::env::Observation { px: 32, data: vec![0.4; 32 * 32] };
        assert_eq!(
            snap.encoder.encode(&frame).unwrap(),
            back.encoder.encode(&frame).unwrap()
        );
        assert_eq!(snap.predictor.predict(), back.predictor.predict());
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = small_snapshot().to_bytes();
        bytes[0] ^= 0xff;
        match Snapshot::from_bytes(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_files_are_format_errors() {
        let bytes = small_snapshot().to_bytes();
        for cut in [3, 20, 60, bytes.len() - 5] {
            match Snapshot::from_bytes(&bytes[..cut]) {
                Err(Error::Format(_)) => {}
                other => panic!("cut at {cut}: expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn doctored_dimension_is_a_shape_error() {
        let mut bytes = small_snapshot().to_bytes();
        // dims[4] (predictor hidden width) lives at offset 6 + 4*4.
        let off = 6 + 4 * 4;
        bytes[off] = bytes[off].wrapping_add(1);
        match Snapshot::from_bytes(&bytes) {
            Err(Error::Shape { .. }) | Err(Error::Format(_)) => {}
            other => panic!("expected shape/format error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = small_snapshot().to_bytes();
        bytes.extend_from_slice(&[0u8; 8]);
        match Snapshot::from_bytes(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("trailing"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_component_shapes_are_rejected_at_build_time() {
        let pcfg = PerceptionConfig {
            feat_h: 3,
            feat_w: 3,
            feat_d: 4,
            hidden_dim: 5,
            ..PerceptionConfig::default()
        };
        let encoder = Encoder::new(32, &pcfg).unwrap();
        let predictor = Predictor::new(&pcfg, 1).unwrap();
        // Wrong controller input width.
        let qnet = QNet::new(2, 10, 6, 7, 5, 7);
        assert!(matches!(
            Snapshot::new(32, 1.0, encoder, predictor, qnet),
            Err(Error::Shape { .. })
        ));
    }
}
