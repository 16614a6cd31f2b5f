//! Go-Back-N sender and receiver state machines.
//!
//! The sender tracks a sliding window over unbounded sequence numbers: the
//! highest cumulative ACK received, the highest id transmitted, and the id it
//! will transmit next. On timeout it rewinds the next id to the window base
//! and resends the whole window. The receiver keeps the set of delivered
//! packet ids and answers with cumulative ACKs; by default it ignores
//! out-of-order packets, optionally it buffers them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A message on the wire: a positive id and a string payload whose length
/// stands in for the byte size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Datagram {
    pub id: u64,
    pub payload: String,
}

impl Datagram {
    pub fn new(id: u64, payload: impl Into<String>) -> Self {
        Datagram { id, payload: payload.into() }
    }

    /// ACKs carry the fixed 3-byte payload "ACK".
    pub fn ack(id: u64) -> Self {
        Datagram { id, payload: "ACK".into() }
    }

    /// Byte size of the datagram.
    pub fn size(&self) -> u64 {
        self.payload.len() as u64
    }
}

/// Sender window state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SenderState {
    /// Window size N; the sender may have ids [highest_ack, highest_ack + N)
    /// in flight.
    pub window: u64,
    /// Highest cumulative ACK received (1 before any ACK arrives).
    pub highest_ack: u64,
    /// Highest id transmitted so far; `None` until the first send.
    pub highest_sent: Option<u64>,
    /// Id of the next transmission.
    pub next_seq: u64,
}

impl SenderState {
    /// Fresh sender: nothing sent, next transmission is id 1.
    pub fn new(window: u64) -> Self {
        assert!(window >= 1, "window must be positive");
        SenderState { window, highest_ack: 1, highest_sent: None, next_seq: 1 }
    }

    /// The state one send after [`SenderState::new`]; some formalizations use
    /// this as their initial state, and both generate the same trace suffixes.
    pub fn after_first_send(window: u64) -> Self {
        SenderState { window, highest_ack: 1, highest_sent: Some(1), next_seq: 2 }
    }

    fn highest_sent_or_zero(&self) -> u64 {
        self.highest_sent.unwrap_or(0)
    }

    /// Processes a cumulative ACK. Slides the window when the ACK is new and
    /// only acknowledges data actually transmitted; otherwise a no-op.
    pub fn rcv_ack(&mut self, ack: u64) {
        if self.highest_ack < ack && ack <= self.highest_sent_or_zero() + 1 {
            self.highest_ack = ack;
            self.next_seq = self.next_seq.max(ack);
        }
    }

    /// Transmits the next id in the window, returning the emitted datagram.
    /// Requires room in the window.
    pub fn adv_cur(&mut self, payload: &str) -> Result<Datagram> {
        if self.next_seq >= self.highest_ack + self.window {
            return Err(Error::precondition(
                "sender.adv_cur",
                format!(
                    "window full: next {} not below {} + {}",
                    self.next_seq, self.highest_ack, self.window
                ),
            ));
        }
        let dg = Datagram::new(self.next_seq, payload);
        self.highest_sent = Some(self.highest_sent_or_zero().max(self.next_seq));
        self.next_seq += 1;
        Ok(dg)
    }

    /// Goes back N: rewinds the next transmission to the window base.
    /// Only applicable once the whole window has been transmitted.
    pub fn timeout(&mut self) -> Result<()> {
        if self.next_seq != self.highest_ack + self.window {
            return Err(Error::precondition(
                "sender.timeout",
                format!(
                    "window not exhausted: next {} != {} + {}",
                    self.next_seq, self.highest_ack, self.window
                ),
            ));
        }
        self.next_seq = self.highest_ack;
        Ok(())
    }

    /// The two sender invariants: ACKs only cover transmitted data, and the
    /// next transmission stays within one window of the base.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if self.highest_ack > self.highest_sent_or_zero() + 1 {
            return Err(format!(
                "ACK {} outruns transmissions ({:?})",
                self.highest_ack, self.highest_sent
            ));
        }
        if self.next_seq < self.highest_ack || self.next_seq > self.highest_ack + self.window {
            return Err(format!(
                "next {} outside [{}, {}]",
                self.next_seq,
                self.highest_ack,
                self.highest_ack + self.window
            ));
        }
        Ok(())
    }
}

/// Receiver state: the delivered-id set, stored as a contiguous prefix plus
/// a sparse overflow so the common (in-order-only) mode is O(1).
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ReceiverState {
    prefix_max: u64,
    overflow: std::collections::BTreeSet<u64>,
    buffer_out_of_order: bool,
}

impl ReceiverState {
    /// Default mode: out-of-order packets are ignored.
    pub fn new() -> Self {
        ReceiverState::default()
    }

    /// Buffering mode: out-of-order packets are retained and absorbed once
    /// the gap below them fills.
    pub fn new_buffering() -> Self {
        ReceiverState { buffer_out_of_order: true, ..Default::default() }
    }

    pub fn contains(&self, id: u64) -> bool {
        id != 0 && (id <= self.prefix_max || self.overflow.contains(&id))
    }

    /// Largest delivered id (0 when nothing was delivered).
    pub fn max_received(&self) -> u64 {
        self.overflow.iter().next_back().copied().unwrap_or(0).max(self.prefix_max)
    }

    /// Length of the delivered in-order prefix.
    pub fn prefix_len(&self) -> u64 {
        self.prefix_max
    }

    /// Handles a packet delivery. In default mode only the next expected id
    /// is absorbed; in buffering mode everything new is retained.
    pub fn rcv_pkt(&mut self, id: u64) {
        if id == self.prefix_max + 1 {
            self.prefix_max = id;
            while self.overflow.remove(&(self.prefix_max + 1)) {
                self.prefix_max += 1;
            }
        } else if self.buffer_out_of_order && id > self.prefix_max {
            self.overflow.insert(id);
        }
    }

    /// The cumulative ACK: the smallest positive id not yet delivered.
    pub fn cum_ack(&self) -> u64 {
        self.prefix_max + 1
    }

    /// Emits an ACK datagram; the receiver state is unchanged.
    pub fn snd_ack(&self) -> Datagram {
        Datagram::ack(self.cum_ack())
    }
}
