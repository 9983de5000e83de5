//! Message movement: an in-process FIFO and a length-prefixed stream framing
//! with identical delivery semantics (whole messages, per-connection order).

use std::collections::VecDeque;
use std::io::{ErrorKind, Read, Write};
use std::sync::{Arc, Condvar, Mutex};

use super::{decode, encode, GradientMessage, TransportError};

/// Default ceiling on one framed message.
pub const DEFAULT_FRAME_CAP: usize = 64 * 1024 * 1024;
/// Environment variable overriding the frame cap (bytes).
pub const FRAME_CAP_ENV: &str = "FEDCYCLE_FRAME_CAP";

pub fn frame_cap_from_env() -> usize {
    std::env::var(FRAME_CAP_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(DEFAULT_FRAME_CAP)
}

struct Queue {
    frames: Mutex<(VecDeque<Vec<u8>>, usize /* live senders */)>,
    ready: Condvar,
}

/// Sending half of the in-process transport. Frames carry encoded bytes so
/// both transports exercise the same codec path.
pub struct InProcSender {
    queue: Arc<Queue>,
    cap: usize,
}

pub struct InProcReceiver {
    queue: Arc<Queue>,
    cap: usize,
}

pub fn in_process_pair(cap: usize) -> (InProcSender, InProcReceiver) {
    let queue = Arc::new(Queue {
        frames: Mutex::new((VecDeque::new(), 1)),
        ready: Condvar::new(),
    });
    (
        InProcSender {
            queue: queue.clone(),
            cap,
        },
        InProcReceiver { queue, cap },
    )
}

impl Clone for InProcSender {
    fn clone(&self) -> Self {
        self.queue.frames.lock().expect("queue poisoned").1 += 1;
        Self {
            queue: self.queue.clone(),
            cap: self.cap,
        }
    }
}

impl Drop for InProcSender {
    fn drop(&mut self) {
        let mut guard = self.queue.frames.lock().expect("queue poisoned");
        guard.1 -= 1;
        drop(guard);
        self.queue.ready.notify_all();
    }
}

impl InProcSender {
    pub fn send(&self, msg: &GradientMessage) -> Result<(), TransportError> {
        let bytes = encode(msg)?;
        if bytes.len() > self.cap {
            return Err(TransportError::FrameTooLarge {
                len: bytes.len(),
                cap: self.cap,
            });
        }
        self.queue
            .frames
            .lock()
            .expect("queue poisoned")
            .0
            .push_back(bytes);
        self.queue.ready.notify_all();
        Ok(())
    }
}

impl InProcReceiver {
    /// Blocks until a frame arrives or every sender is gone.
    pub fn recv(&self) -> Result<GradientMessage, TransportError> {
        let mut guard = self.queue.frames.lock().expect("queue poisoned");
        loop {
            if let Some(bytes) = guard.0.pop_front() {
                if bytes.len() > self.cap {
                    return Err(TransportError::FrameTooLarge {
                        len: bytes.len(),
                        cap: self.cap,
                    });
                }
                return decode(&bytes);
            }
            if guard.1 == 0 {
                return Err(TransportError::ChannelClosed);
            }
            guard = self.queue.ready.wait(guard).expect("queue poisoned");
        }
    }
}

/// Writes `4-byte LE length || encoded message` frames to a byte stream.
pub struct FramedWriter<W: Write> {
    inner: W,
    cap: usize,
}

impl<W: Write> FramedWriter<W> {
    pub fn new(inner: W, cap: usize) -> Self {
        Self { inner, cap }
    }

    pub fn send(&mut self, msg: &GradientMessage) -> Result<(), TransportError> {
        let bytes = encode(msg)?;
        if bytes.len() > self.cap {
            return Err(TransportError::FrameTooLarge {
                len: bytes.len(),
                cap: self.cap,
            });
        }
        self.inner.write_all(&(bytes.len() as u32).to_le_bytes())?;
        self.inner.write_all(&bytes)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Reads frames written by [`FramedWriter`].
pub struct FramedReader<R: Read> {
    inner: R,
    cap: usize,
}

impl<R: Read> FramedReader<R> {
    pub fn new(inner: R, cap: usize) -> Self {
        Self { inner, cap }
    }

    /// Reads the next whole message; clean EOF at a frame boundary yields
    /// `None`, EOF inside a frame is an error.
    pub fn recv(&mut self) -> Result<Option<GradientMessage>, TransportError> {
        let mut len_bytes = [0u8; 4];
        match self.inner.read_exact(&mut len_bytes) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(len_bytes) as usize;
        // Reject before allocating anything of that size.
        if len > self.cap {
            return Err(TransportError::FrameTooLarge { len, cap: self.cap });
        }
        let mut frame = vec![0u8; len];
        self.inner.read_exact(&mut frame).map_err(|e| {
            if e.kind() == ErrorKind::UnexpectedEof {
                TransportError::ClosedMidFrame
            } else {
                TransportError::Io(e)
            }
        })?;
        Ok(Some(decode(&frame)?))
    }
}
