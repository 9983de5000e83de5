//! Gradient-message wire format and the two interchangeable transports
//! (in-process FIFO, length-prefixed TCP stream).

mod channel;
pub(crate) mod codec;

pub use channel::{
    frame_cap_from_env, in_process_pair, FramedReader, FramedWriter, InProcReceiver, InProcSender,
    DEFAULT_FRAME_CAP, FRAME_CAP_ENV,
};
pub use codec::{crc32, decode, encode, encoded_len, message_size};

use thiserror::Error;

use crate::nn::{Domain, Role};
use crate::tensor::Tensor;

/// Protocol version emitted by this build.
pub const WIRE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("payload contains a non-finite value in {group}/{name} at {index}")]
    NonFinitePayload {
        group: Role,
        name: String,
        index: usize,
    },
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    BadCrc { stored: u32, computed: u32 },
    #[error("buffer truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("unknown protocol version {0:#06x}")]
    UnknownVersion(u16),
    #[error("declared length overflows the buffer or the frame cap ({context})")]
    LengthOverflow { context: &'static str },
    #[error("unknown {what} byte {value:#04x}")]
    UnknownByte { what: &'static str, value: u8 },
    #[error("invalid UTF-8 in entry name")]
    BadName,
    #[error("frame of {len} bytes exceeds cap of {cap} bytes")]
    FrameTooLarge { len: usize, cap: usize },
    #[error("connection closed mid-frame")]
    ClosedMidFrame,
    #[error("channel closed")]
    ChannelClosed,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Which practical loss a message's gradients came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StepKind {
    /// Single gradient of the whole per-domain objective.
    Combined,
    /// Discriminator-step gradients (generator outputs held constant).
    DStep,
    /// Generator-step gradients (discriminator parameters held constant).
    GStep,
}

impl StepKind {
    pub fn wire_byte(self) -> u8 {
        match self {
            StepKind::Combined => 0,
            StepKind::DStep => 1,
            StepKind::GStep => 2,
        }
    }

    pub fn from_wire_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(StepKind::Combined),
            1 => Some(StepKind::DStep),
            2 => Some(StepKind::GStep),
            _ => None,
        }
    }
}

pub fn domain_wire_byte(d: Domain) -> u8 {
    match d {
        Domain::X => 0,
        Domain::Y => 1,
    }
}

pub fn domain_from_wire_byte(b: u8) -> Option<Domain> {
    match b {
        0 => Some(Domain::X),
        1 => Some(Domain::Y),
        _ => None,
    }
}

/// One named-gradient group inside a message, in parameter-registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradGroup {
    pub role: Role,
    pub entries: Vec<(String, Tensor<f32>)>,
}

/// The wire unit a client sends for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMessage {
    pub version: u16,
    pub round: u32,
    pub client_id: u32,
    pub domain: Domain,
    pub step_kind: StepKind,
    pub groups: Vec<GradGroup>,
}

impl GradientMessage {
    pub fn new(
        round: u32,
        client_id: u32,
        domain: Domain,
        step_kind: StepKind,
        groups: Vec<GradGroup>,
    ) -> Self {
        Self {
            version: WIRE_VERSION,
            round,
            client_id,
            domain,
            step_kind,
            groups,
        }
    }
}
