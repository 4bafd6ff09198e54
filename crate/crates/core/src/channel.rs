//! Lossless broadcast channel with exact byte accounting.
//!
//! Wire layout, all little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `R2VW`                            |
//! | 4      | 2    | version (1)                             |
//! | 6      | 1    | kind: 0 pose, 1 feature, 2 compressed   |
//! | 7      | 1    | bytes per value: 4 (f32) or 8 (f64)     |
//! | 8      | 4    | sender id                               |
//! | 12     | 4    | H                                       |
//! | 16     | 4    | W                                       |
//! | 20     | 4    | C                                       |
//! | 24     | …    | `H·W·C` values, row-major               |
//!
//! A pose travels as a `1 × 1 × 6` f64 payload: position then the rotation
//! matrix row by row.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Rotation2};
use crate::tensor::FeatureMap;

pub const WIRE_MAGIC: &[u8; 4] = b"R2VW";
pub const WIRE_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 24;

/// Agent index; 0 is the RSU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Pose,
    Feature,
    CompressedFeature,
}

impl PayloadKind {
    fn code(self) -> u8 {
        match self {
            PayloadKind::Pose => 0,
            PayloadKind::Feature => 1,
            PayloadKind::CompressedFeature => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(PayloadKind::Pose),
            1 => Ok(PayloadKind::Feature),
            2 => Ok(PayloadKind::CompressedFeature),
            _ => Err(Error::Wire(format!("unknown payload kind {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireFloat {
    F32,
    #[default]
    F64,
}

impl WireFloat {
    pub fn bytes(self) -> usize {
        match self {
            WireFloat::F32 => 4,
            WireFloat::F64 => 8,
        }
    }

    /// Value as it survives the wire.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            WireFloat::F32 => v as f32 as f64,
            WireFloat::F64 => v,
        }
    }

    pub fn quantize_map(self, m: &FeatureMap) -> FeatureMap {
        let mut out = m.clone();
        if self == WireFloat::F32 {
            out.as_mut_slice().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        out
    }
}

/// Serialized message; the payload is shared between recipients.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: AgentId,
    pub kind: PayloadKind,
    payload: Arc<[u8]>,
}

impl Message {
    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn byte_count(&self) -> usize {
        self.payload.len()
    }

    pub fn feature(sender: AgentId, m: &FeatureMap, compressed: bool, float: WireFloat) -> Result<Self> {
        let kind = if compressed {
            PayloadKind::CompressedFeature
        } else {
            PayloadKind::Feature
        };
        Ok(Self {
            sender,
            kind,
            payload: serialize_feature(sender, kind, m, float)?.into(),
        })
    }

    pub fn pose(sender: AgentId, pose: &Pose) -> Result<Self> {
        Ok(Self {
            sender,
            kind: PayloadKind::Pose,
            payload: serialize_pose(sender, pose)?.into(),
        })
    }
}

/// Bytes a feature message of this shape occupies on the wire.
pub fn feature_message_bytes(height: usize, width: usize, channels: usize, float: WireFloat) -> usize {
    HEADER_BYTES + height * width * channels * float.bytes()
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Wire(format!("dimension {v} exceeds u32")))
}

pub fn serialize_feature(
    sender: AgentId,
    kind: PayloadKind,
    m: &FeatureMap,
    float: WireFloat,
) -> Result<Vec<u8>> {
    let (h, w, c) = m.shape();
    let mut out = Vec::with_capacity(feature_message_bytes(h, w, c, float));
    out.extend_from_slice(WIRE_MAGIC);
    out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    out.push(kind.code());
    out.push(float.bytes() as u8);
    out.extend_from_slice(&sender.0.to_le_bytes());
    for d in [h, w, c] {
        out.extend_from_slice(&dim_u32(d)?.to_le_bytes());
    }
    for &v in m.as_slice() {
        match float {
            WireFloat::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            WireFloat::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireHeader {
    pub kind: PayloadKind,
    pub float: WireFloat,
    pub sender: AgentId,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

pub fn parse_header(bytes: &[u8]) -> Result<WireHeader> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Wire(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != WIRE_MAGIC {
        return Err(Error::Wire("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != WIRE_VERSION {
        return Err(Error::Wire(format!("unsupported version {version}")));
    }
    let kind = PayloadKind::from_code(bytes[6])?;
    let float = match bytes[7] {
        4 => WireFloat::F32,
        8 => WireFloat::F64,
        b => return Err(Error::Wire(format!("unsupported value width {b}"))),
    };
    let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    Ok(WireHeader {
        kind,
        float,
        sender: AgentId(u(8)),
        height: u(12) as usize,
        width: u(16) as usize,
        channels: u(20) as usize,
    })
}

pub fn deserialize_feature(bytes: &[u8]) -> Result<(WireHeader, FeatureMap)> {
    let hdr = parse_header(bytes)?;
    let count = hdr
        .height
        .checked_mul(hdr.width)
        .and_then(|v| v.checked_mul(hdr.channels))
        .ok_or_else(|| Error::Wire("shape overflows".into()))?;
    let body = &bytes[HEADER_BYTES..];
    let width = hdr.float.bytes();
    if body.len() != count * width {
        return Err(Error::Wire(format!(
            "payload has {} bytes, header implies {}",
            body.len(),
            count * width
        )));
    }
    let data = match hdr.float {
        WireFloat::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        WireFloat::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let m = FeatureMap::from_vec(hdr.height, hdr.width, hdr.channels, data)?;
    Ok((hdr, m))
}

pub fn serialize_pose(sender: AgentId, pose: &Pose) -> Result<Vec<u8>> {
    let r = pose.rotation.matrix();
    let values = vec![pose.position[0], pose.position[1], r[0][0], r[0][1], r[1][0], r[1][1]];
    let m = FeatureMap::from_vec(1, 1, 6, values)?;
    serialize_feature(sender, PayloadKind::Pose, &m, WireFloat::F64)
}

pub fn deserialize_pose(bytes: &[u8]) -> Result<(AgentId, Pose)> {
    let (hdr, m) = deserialize_feature(bytes)?;
    if hdr.kind != PayloadKind::Pose || m.shape() != (1, 1, 6) || hdr.float != WireFloat::F64 {
        return Err(Error::Wire("not a pose message".into()));
    }
    let v = m.as_slice();
    let rotation = Rotation2::from_matrix([[v[2], v[3]], [v[4], v[5]]])?;
    Ok((hdr.sender, Pose::new([v[0], v[1]], rotation)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ByteCount {
    /// Header plus payload.
    pub total: u64,
    /// Values only, headers excluded.
    pub payload: u64,
    pub messages: u64,
}

impl ByteCount {
    fn add(&mut self, bytes: usize) {
        self.total += bytes as u64;
        self.payload += bytes.saturating_sub(HEADER_BYTES) as u64;
        self.messages += 1;
    }
}

/// Per-step and cumulative byte totals split by kind and sender.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BandwidthLedger {
    steps: Vec<ByteCount>,
    by_kind: BTreeMap<PayloadKind, ByteCount>,
    by_sender: BTreeMap<AgentId, ByteCount>,
    cumulative: ByteCount,
}

impl BandwidthLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens a new step; records before the first call land in step 0.
    pub fn begin_step(&mut self) {
        self.steps.push(ByteCount::default());
    }

    pub fn record(&mut self, msg: &Message) {
        self.charge(msg.sender, msg.kind, msg.byte_count());
    }

    /// Records a send of `bytes` wire bytes without materialising it.
    pub fn charge(&mut self, sender: AgentId, kind: PayloadKind, bytes: usize) {
        if self.steps.is_empty() {
            self.begin_step();
        }
        self.steps.last_mut().unwrap().add(bytes);
        self.by_kind.entry(kind).or_default().add(bytes);
        self.by_sender.entry(sender).or_default().add(bytes);
        self.cumulative.add(bytes);
    }

    pub fn cumulative(&self) -> ByteCount {
        self.cumulative
    }

    pub fn steps(&self) -> &[ByteCount] {
        &self.steps
    }

    pub fn by_kind(&self, kind: PayloadKind) -> ByteCount {
        self.by_kind.get(&kind).copied().unwrap_or_default()
    }

    pub fn by_sender(&self, sender: AgentId) -> ByteCount {
        self.by_sender.get(&sender).copied().unwrap_or_default()
    }

    /// Running total after each step.
    pub fn cumulative_by_step(&self) -> Vec<u64> {
        self.steps
            .iter()
            .scan(0u64, |acc, s| {
                *acc += s.total;
                Some(*acc)
            })
            .collect()
    }
}

/// Delivers one shared copy per recipient and charges the ledger once.
pub fn broadcast(msg: &Message, recipients: &[AgentId], ledger: &mut BandwidthLedger) -> Vec<(AgentId, Message)> {
    ledger.record(msg);
    recipients.iter().map(|&r| (r, msg.clone())).collect()
}

/// Who exchanges features each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Every vehicle sends its map to every other vehicle, plus one upload
    /// and one RSU download per vehicle.
    #[default]
    VehicleToVehicle,
    /// The shared model runs at the RSU; only uploads and downloads remain.
    ModelAtRsu,
}

impl Topology {
    pub fn feature_sends_per_step(self, num_vehicles: usize) -> usize {
        let n = num_vehicles;
        match self {
            Topology::VehicleToVehicle => n * n.saturating_sub(1) + 2 * n,
            Topology::ModelAtRsu => 2 * n,
        }
    }
}

/// Charges one step of feature traffic: `maps[0]` belongs to the RSU and
/// `maps[1..]` to the vehicles. Returns the number of sends.
pub fn account_step(
    ledger: &mut BandwidthLedger,
    topology: Topology,
    maps: &[FeatureMap],
    compressed: bool,
    float: WireFloat,
) -> Result<usize> {
    ledger.begin_step();
    let kind = if compressed {
        PayloadKind::CompressedFeature
    } else {
        PayloadKind::Feature
    };
    let n = maps.len().saturating_sub(1);
    let mut sends = 0;
    let mut send = |ledger: &mut BandwidthLedger, sender: usize| {
        let (h, w, c) = maps[sender].shape();
        ledger.charge(AgentId(sender as u32), kind, feature_message_bytes(h, w, c, float));
        sends += 1;
    };
    for v in 1..=n {
        // upload to the RSU
        send(ledger, v);
        // RSU map back to the vehicle
        send(ledger, 0);
        if topology == Topology::VehicleToVehicle {
            for _ in 1..n {
                send(ledger, v);
            }
        }
    }
    Ok(sends)
}
