//! Binary wire format.
//!
//! Frame layout (little-endian throughout):
//!
//! ```text
//! offset  size  field
//! 0       2     magic 0x50 0x44
//! 2       1     version: 0x01, high bit set when scalars are 64-bit
//! 3       1     message type
//! 4       2     worker id
//! 6       2     layer id
//! 8       4     clock
//! 12      8     payload length
//! 20      ...   payload
//! ```
//!
//! Payload bodies:
//! - tensor (PushFull): rows u32, cols u32, weights row-major, then an
//!   optional bias tail of (len u32, data) when the layer has a bias.
//! - factors (PushSF / SFBroadcast): m u32, n u32, pair count u32, bias flag
//!   u8, scale scalar, then per pair the row factor (m scalars) and column
//!   factor (n scalars), then the bias column (m scalars) if flagged.
//! - params (PullResponse): stamp count u32, per-worker applied clocks u32
//!   each, then a tensor body.
//! - Ack: one status byte. PullRequest / ClockAdvance: empty. Checkpoint:
//!   opaque bytes.

use crate::error::{Error, Result};
use crate::network::LayerTensor;
use crate::scalar::Scalar;
use crate::sufficient_factor::{FactorPair, SufficientFactorSet};
use crate::tensor::{DenseMatrix, DenseVector};

pub const MAGIC: [u8; 2] = [0x50, 0x44];
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgKind {
    PushFull = 1,
    PushSf = 2,
    PullRequest = 3,
    PullResponse = 4,
    SfBroadcast = 5,
    ClockAdvance = 6,
    Ack = 7,
    Checkpoint = 8,
}

impl MsgKind {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            1 => MsgKind::PushFull,
            2 => MsgKind::PushSf,
            3 => MsgKind::PullRequest,
            4 => MsgKind::PullResponse,
            5 => MsgKind::SfBroadcast,
            6 => MsgKind::ClockAdvance,
            7 => MsgKind::Ack,
            8 => MsgKind::Checkpoint,
            _ => return Err(Error::protocol(format!("unknown message type {b}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AckCode {
    Ok = 0,
    DuplicateDiscarded = 1,
    StaleRejected = 2,
}

impl AckCode {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => AckCode::Ok,
            1 => AckCode::DuplicateDiscarded,
            2 => AckCode::StaleRejected,
            _ => return Err(Error::protocol(format!("unknown ack code {b}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload<S: Scalar> {
    Empty,
    Tensor(LayerTensor<S>),
    Factors(SufficientFactorSet<S>),
    Params {
        /// Per-worker applied clock for this layer, worker order.
        stamps: Vec<u32>,
        tensor: LayerTensor<S>,
    },
    Ack(AckCode),
    Opaque(Vec<u8>),
}

/// One wire-level unit: either gradient data, parameter data, or control.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMessage<S: Scalar> {
    pub kind: MsgKind,
    pub worker: u16,
    pub layer: u16,
    pub clock: u32,
    pub payload: Payload<S>,
}

impl<S: Scalar> UpdateMessage<S> {
    pub fn control(kind: MsgKind, worker: u16, layer: u16, clock: u32) -> Self {
        UpdateMessage {
            kind,
            worker,
            layer,
            clock,
            payload: Payload::Empty,
        }
    }

    fn payload_matches(&self) -> bool {
        matches!(
            (self.kind, &self.payload),
            (MsgKind::PushFull, Payload::Tensor(_))
                | (MsgKind::PushSf, Payload::Factors(_))
                | (MsgKind::SfBroadcast, Payload::Factors(_))
                | (MsgKind::PullResponse, Payload::Params { .. })
                | (MsgKind::PullRequest, Payload::Empty)
                | (MsgKind::ClockAdvance, Payload::Empty)
                | (MsgKind::Ack, Payload::Ack(_))
                | (MsgKind::Checkpoint, Payload::Opaque(_))
        )
    }

    /// Data scalars this message carries (gradient / parameter / factor
    /// entries); framing metadata and the factor scale are not counted.
    pub fn payload_floats(&self) -> u64 {
        match &self.payload {
            Payload::Tensor(t) => t.float_count(),
            Payload::Params { tensor, .. } => tensor.float_count(),
            Payload::Factors(f) => f.float_count(),
            _ => 0,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<S: Scalar>(out: &mut Vec<u8>, t: &LayerTensor<S>) {
    put_u32(out, t.weights.rows() as u32);
    put_u32(out, t.weights.cols() as u32);
    for &v in t.weights.as_slice() {
        v.write_le(out);
    }
    if let Some(b) = &t.bias {
        put_u32(out, b.len() as u32);
        for &v in b.as_slice() {
            v.write_le(out);
        }
    }
}

/// Serializes a message to one complete frame.
pub fn encode<S: Scalar>(msg: &UpdateMessage<S>) -> Result<Vec<u8>> {
    if !msg.payload_matches() {
        return Err(Error::Encoding(format!(
            "payload does not match message type {:?}",
            msg.kind
        )));
    }
    let mut payload = Vec::new();
    match &msg.payload {
        Payload::Empty => {}
        Payload::Tensor(t) => put_tensor(&mut payload, t),
        Payload::Params { stamps, tensor } => {
            put_u32(&mut payload, stamps.len() as u32);
            for &s in stamps {
                put_u32(&mut payload, s);
            }
            put_tensor(&mut payload, tensor);
        }
        Payload::Factors(f) => {
            f.validate()?;
            put_u32(&mut payload, f.rows()? as u32);
            put_u32(&mut payload, f.cols()? as u32);
            put_u32(&mut payload, f.pairs.len() as u32);
            payload.push(u8::from(f.bias.is_some()));
            f.scale.write_le(&mut payload);
            for p in &f.pairs {
                for &v in p.row_factor.as_slice() {
                    v.write_le(&mut payload);
                }
                for &v in p.col_factor.as_slice() {
                    v.write_le(&mut payload);
                }
            }
            if let Some(b) = &f.bias {
                for &v in b.as_slice() {
                    v.write_le(&mut payload);
                }
            }
        }
        Payload::Ack(code) => payload.push(*code as u8),
        Payload::Opaque(bytes) => payload.extend_from_slice(bytes),
    }
    if payload.len() as u64 >= 1u64 << 63 {
        return Err(Error::Encoding("payload exceeds 2^63 bytes".into()));
    }

    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.extend_from_slice(&MAGIC);
    frame.push(VERSION | if S::WIDE { 0x80 } else { 0x00 });
    frame.push(msg.kind as u8);
    frame.extend_from_slice(&msg.worker.to_le_bytes());
    frame.extend_from_slice(&msg.layer.to_le_bytes());
    frame.extend_from_slice(&msg.clock.to_le_bytes());
    frame.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::protocol("payload truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn scalar<S: Scalar>(&mut self) -> Result<S> {
        Ok(S::read_le(self.take(S::WIRE_WIDTH)?))
    }

    fn scalars<S: Scalar>(&mut self, n: usize) -> Result<Vec<S>> {
        let raw = self.take(n * S::WIRE_WIDTH)?;
        Ok(raw
            .chunks_exact(S::WIRE_WIDTH)
            .map(|c| S::read_le(c))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn read_tensor<S: Scalar>(r: &mut Reader) -> Result<LayerTensor<S>> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::protocol("zero tensor dimension"));
    }
    let weights = DenseMatrix::from_vec(rows, cols, r.scalars(rows * cols)?)?;
    let bias = if r.remaining() > 0 {
        let len = r.u32()? as usize;
        if len == 0 {
            return Err(Error::protocol("zero-length bias"));
        }
        Some(DenseVector::from_vec(r.scalars(len)?))
    } else {
        None
    };
    Ok(LayerTensor { weights, bias })
}

/// Attempts to decode one frame from the front of `buf`.
///
/// Returns `Ok(None)` when more bytes are needed (partial frame), otherwise
/// the message and the number of bytes consumed. Bad magic, a version or
/// precision mismatch, or a malformed payload are protocol errors.
pub fn try_decode<S: Scalar>(buf: &[u8]) -> Result<Option<(UpdateMessage<S>, usize)>> {
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    if buf[0..2] != MAGIC {
        return Err(Error::protocol("bad magic"));
    }
    let version = buf[2];
    if version & 0x7F != VERSION {
        return Err(Error::protocol(format!("unsupported version {version:#x}")));
    }
    if (version & 0x80 != 0) != S::WIDE {
        return Err(Error::protocol("scalar precision mismatch"));
    }
    let kind = MsgKind::from_byte(buf[3])?;
    let worker = u16::from_le_bytes(buf[4..6].try_into().unwrap());
    let layer = u16::from_le_bytes(buf[6..8].try_into().unwrap());
    let clock = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    let payload_len = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
    if buf.len() < HEADER_LEN + payload_len {
        return Ok(None);
    }
    let mut r = Reader {
        buf: &buf[HEADER_LEN..HEADER_LEN + payload_len],
        pos: 0,
    };

    let payload = match kind {
        MsgKind::PullRequest | MsgKind::ClockAdvance => Payload::Empty,
        MsgKind::PushFull => Payload::Tensor(read_tensor(&mut r)?),
        MsgKind::PullResponse => {
            let n = r.u32()? as usize;
            let mut stamps = Vec::with_capacity(n);
            for _ in 0..n {
                stamps.push(r.u32()?);
            }
            Payload::Params {
                stamps,
                tensor: read_tensor(&mut r)?,
            }
        }
        MsgKind::PushSf | MsgKind::SfBroadcast => {
            let m = r.u32()? as usize;
            let n = r.u32()? as usize;
            let count = r.u32()? as usize;
            let has_bias = r.u8()? != 0;
            let scale: S = r.scalar()?;
            let mut pairs = Vec::with_capacity(count);
            for _ in 0..count {
                pairs.push(FactorPair {
                    row_factor: DenseVector::from_vec(r.scalars(m)?),
                    col_factor: DenseVector::from_vec(r.scalars(n)?),
                });
            }
            let bias = has_bias
                .then(|| r.scalars(m).map(DenseVector::from_vec))
                .transpose()?;
            Payload::Factors(SufficientFactorSet {
                layer_id: layer,
                clock,
                worker_id: worker,
                pairs,
                bias,
                scale,
            })
        }
        MsgKind::Ack => Payload::Ack(AckCode::from_byte(r.u8()?)?),
        MsgKind::Checkpoint => Payload::Opaque(r.take(r.remaining())?.to_vec()),
    };
    if r.remaining() != 0 {
        return Err(Error::protocol("trailing bytes in payload"));
    }

    Ok(Some((
        UpdateMessage {
            kind,
            worker,
            layer,
            clock,
            payload,
        },
        HEADER_LEN + payload_len,
    )))
}

/// Decodes exactly one complete frame.
pub fn decode<S: Scalar>(buf: &[u8]) -> Result<UpdateMessage<S>> {
    match try_decode::<S>(buf)? {
        Some((msg, consumed)) if consumed == buf.len() => Ok(msg),
        Some(_) => Err(Error::protocol("trailing bytes after frame")),
        None => Err(Error::protocol("incomplete frame")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clock_msg(worker: u16, clock: u32) -> UpdateMessage<f32> {
        UpdateMessage::control(MsgKind::ClockAdvance, worker, 0, clock)
    }

    #[test]
    fn control_frame_is_header_only() {
        let frame = encode(&clock_msg(3, 7)).unwrap();
        assert_eq!(frame.len(), HEADER_LEN);
        assert_eq!(&frame[0..2], &MAGIC);
        assert_eq!(frame[2], 0x01); // 32-bit scalars: high bit clear
        assert_eq!(frame[3], MsgKind::ClockAdvance as u8);
        assert_eq!(u16::from_le_bytes(frame[4..6].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(frame[8..12].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(frame[12..20].try_into().unwrap()), 0);
    }

    #[test]
    fn tensor_payload_has_shape_prefix() {
        let msg = UpdateMessage {
            kind: MsgKind::PushFull,
            worker: 1,
            layer: 2,
            clock: 5,
            payload: Payload::Tensor(LayerTensor {
                weights: DenseMatrix::<f32>::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                bias: None,
            }),
        };
        let frame = encode(&msg).unwrap();
        // 8-byte shape prefix + 16 data bytes.
        assert_eq!(frame.len(), HEADER_LEN + 24);
        assert_eq!(u64::from_le_bytes(frame[12..20].try_into().unwrap()), 24);
        // A full-matrix push tallies exactly M*N data floats.
        assert_eq!(msg.payload_floats(), 4);
    }

    #[test]
    fn wide_scalars_flag_version_high_bit() {
        let msg: UpdateMessage<f64> = UpdateMessage::control(MsgKind::ClockAdvance, 1, 0, 1);
        let frame = encode(&msg).unwrap();
        assert_eq!(frame[2], 0x81);
        // Decoding as f32 must be rejected.
        assert!(matches!(try_decode::<f32>(&frame), Err(Error::Protocol(_))));
        assert!(try_decode::<f64>(&frame).unwrap().is_some());
    }

    #[test]
    fn truncated_frame_asks_for_more() {
        let frame = encode(&clock_msg(1, 1)).unwrap();
        for cut in 0..frame.len() {
            assert!(try_decode::<f32>(&frame[..cut]).unwrap().is_none());
        }
    }

    #[test]
    fn bad_magic_is_protocol_error() {
        let mut frame = encode(&clock_msg(1, 1)).unwrap();
        frame[0] = 0x00;
        assert!(matches!(try_decode::<f32>(&frame), Err(Error::Protocol(_))));
    }

    #[test]
    fn mismatched_payload_is_encoding_error() {
        let msg: UpdateMessage<f32> = UpdateMessage {
            kind: MsgKind::PushFull,
            worker: 1,
            layer: 1,
            clock: 1,
            payload: Payload::Empty,
        };
        assert!(matches!(encode(&msg), Err(Error::Encoding(_))));
    }

    #[test]
    fn factor_payload_serializes_exactly_the_counted_floats() {
        let set = SufficientFactorSet {
            layer_id: 2,
            clock: 3,
            worker_id: 1,
            pairs: (0..4)
                .map(|i| FactorPair {
                    row_factor: DenseVector::from_vec(vec![i as f32; 6]),
                    col_factor: DenseVector::from_vec(vec![0.5; 5]),
                })
                .collect(),
            bias: Some(DenseVector::from_vec(vec![1.0; 6])),
            scale: 0.125,
        };
        let msg = UpdateMessage {
            kind: MsgKind::SfBroadcast,
            worker: 1,
            layer: 2,
            clock: 3,
            payload: Payload::Factors(set),
        };
        // K(M+N) + bias column; plus the scale scalar and 13 bytes of
        // factor metadata beyond the frame header.
        assert_eq!(msg.payload_floats(), 4 * (6 + 5) + 6);
        let frame = encode(&msg).unwrap();
        let payload_len = frame.len() - HEADER_LEN;
        assert_eq!(payload_len, 13 + (msg.payload_floats() as usize + 1) * 4);
    }

    #[test]
    fn round_trips_randomized_messages() {
        // Bijection property over randomized well-formed messages.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for case in 0..300 {
            let kind = match case % 8 {
                0 => MsgKind::PushFull,
                1 => MsgKind::PushSf,
                2 => MsgKind::PullRequest,
                3 => MsgKind::PullResponse,
                4 => MsgKind::SfBroadcast,
                5 => MsgKind::ClockAdvance,
                6 => MsgKind::Ack,
                _ => MsgKind::Checkpoint,
            };
            let worker = rng.gen::<u16>() % 64;
            let layer = rng.gen::<u16>() % 32;
            let clock = rng.gen::<u32>() % 10_000;
            let tensor = |rng: &mut rand_chacha::ChaCha8Rng| {
                let rows = rng.gen_range(1..6);
                let cols = rng.gen_range(1..6);
                LayerTensor::<f64> {
                    weights: DenseMatrix::from_vec(
                        rows,
                        cols,
                        (0..rows * cols).map(|_| rng.gen_range(-10.0..10.0)).collect(),
                    )
                    .unwrap(),
                    bias: rng
                        .gen_bool(0.5)
                        .then(|| DenseVector::from_vec((0..rows).map(|_| rng.gen()).collect())),
                }
            };
            let payload = match kind {
                MsgKind::PushFull => Payload::Tensor(tensor(&mut rng)),
                MsgKind::PullResponse => Payload::Params {
                    stamps: (0..rng.gen_range(1..5)).map(|_| rng.gen()).collect(),
                    tensor: tensor(&mut rng),
                },
                MsgKind::PushSf | MsgKind::SfBroadcast => {
                    let m = rng.gen_range(1..6);
                    let n = rng.gen_range(1..6);
                    Payload::Factors(SufficientFactorSet {
                        layer_id: layer,
                        clock,
                        worker_id: worker,
                        pairs: (0..rng.gen_range(1..5))
                            .map(|_| FactorPair {
                                row_factor: DenseVector::from_vec(
                                    (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                                ),
                                col_factor: DenseVector::from_vec(
                                    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                                ),
                            })
                            .collect(),
                        bias: rng
                            .gen_bool(0.5)
                            .then(|| DenseVector::from_vec((0..m).map(|_| rng.gen()).collect())),
                        scale: rng.gen_range(0.001..1.0),
                    })
                }
                MsgKind::Ack => Payload::Ack(match case % 3 {
                    0 => AckCode::Ok,
                    1 => AckCode::DuplicateDiscarded,
                    _ => AckCode::StaleRejected,
                }),
                MsgKind::Checkpoint => {
                    Payload::Opaque((0..rng.gen_range(0..64)).map(|_| rng.gen()).collect())
                }
                _ => Payload::Empty,
            };
            let msg = UpdateMessage {
                kind,
                worker,
                layer,
                clock,
                payload,
            };
            let frame = encode(&msg).unwrap();
            let back = decode::<f64>(&frame).unwrap();
            assert_eq!(back, msg, "case {case}");
        }
    }

    #[test]
    fn round_trips_all_payload_kinds() {
        let tensor = LayerTensor {
            weights: DenseMatrix::<f64>::from_vec(2, 3, vec![1.0, -2.0, 3.5, 0.0, 4.25, -1.5])
                .unwrap(),
            bias: Some(DenseVector::from_vec(vec![0.5, -0.25])),
        };
        let factors = SufficientFactorSet {
            layer_id: 4,
            clock: 9,
            worker_id: 2,
            pairs: vec![
                FactorPair {
                    row_factor: DenseVector::from_vec(vec![1.0, 2.0]),
                    col_factor: DenseVector::from_vec(vec![3.0, 4.0, 5.0]),
                },
                FactorPair {
                    row_factor: DenseVector::from_vec(vec![-1.0, 0.5]),
                    col_factor: DenseVector::from_vec(vec![0.0, 1.0, -2.0]),
                },
            ],
            bias: Some(DenseVector::from_vec(vec![0.125, 8.0])),
            scale: 0.25,
        };
        let messages: Vec<UpdateMessage<f64>> = vec![
            UpdateMessage {
                kind: MsgKind::PushFull,
                worker: 1,
                layer: 3,
                clock: 12,
                payload: Payload::Tensor(tensor.clone()),
            },
            UpdateMessage {
                kind: MsgKind::PushSf,
                worker: 2,
                layer: 4,
                clock: 9,
                payload: Payload::Factors(factors.clone()),
            },
            UpdateMessage {
                kind: MsgKind::SfBroadcast,
                worker: 2,
                layer: 4,
                clock: 9,
                payload: Payload::Factors(factors),
            },
            UpdateMessage {
                kind: MsgKind::PullResponse,
                worker: 1,
                layer: 3,
                clock: 2,
                payload: Payload::Params {
                    stamps: vec![4, 5, 6],
                    tensor,
                },
            },
            UpdateMessage::control(MsgKind::PullRequest, 1, 3, 2),
            UpdateMessage::control(MsgKind::ClockAdvance, 2, 0, 11),
            UpdateMessage {
                kind: MsgKind::Ack,
                worker: 0,
                layer: 3,
                clock: 12,
                payload: Payload::Ack(AckCode::DuplicateDiscarded),
            },
            UpdateMessage {
                kind: MsgKind::Checkpoint,
                worker: 1,
                layer: 0,
                clock: 10,
                payload: Payload::Opaque(vec![1, 2, 3, 4]),
            },
        ];
        for msg in messages {
            let frame = encode(&msg).unwrap();
            let back = decode::<f64>(&frame).unwrap();
            assert_eq!(back, msg);
        }
    }
}
