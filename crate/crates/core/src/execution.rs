//! Observable sender/channel/receiver behavior as flat event sequences.
//!
//! An execution records four kinds of events by packet or ACK id: the sender
//! transmitting a packet, the channel delivering a packet to the receiver,
//! the receiver transmitting a cumulative ACK, and the channel delivering an
//! ACK back to the sender. Payloads and wall-clock time are deliberately
//! absent; durations are measured on the sender-side event counter (the same
//! clock the sampling monitor in [`crate::karn`] uses).

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rational;

/// One observable event, identified by packet or ACK id (ids start at 1).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Action {
    /// Sender transmits packet `id` (`snd_s`).
    PacketSend(u64),
    /// Channel delivers packet `id` to the receiver (`dlv_r`).
    PacketDeliver(u64),
    /// Receiver transmits cumulative ACK `id` (`snd_r`).
    AckSend(u64),
    /// Channel delivers ACK `id` to the sender (`dlvr_r`).
    AckDeliver(u64),
}

impl Action {
    pub fn id(&self) -> u64 {
        match *self {
            Action::PacketSend(id)
            | Action::PacketDeliver(id)
            | Action::AckSend(id)
            | Action::AckDeliver(id) => id,
        }
    }

    /// Sender-side events are the ones the sampling monitor observes.
    pub fn is_sender_event(&self) -> bool {
        matches!(self, Action::PacketSend(_) | Action::AckDeliver(_))
    }

    /// Wire label used in the CSV export.
    pub fn label(&self) -> &'static str {
        match self {
            Action::PacketSend(_) => "snd_s",
            Action::PacketDeliver(_) => "dlv_r",
            Action::AckSend(_) => "snd_r",
            Action::AckDeliver(_) => "dlvr_r",
        }
    }

    fn actor(&self) -> &'static str {
        match self {
            Action::PacketSend(_) => "sender",
            Action::AckSend(_) => "receiver",
            Action::PacketDeliver(_) | Action::AckDeliver(_) => "channel",
        }
    }
}

/// An ordered sequence of events; position in the sequence is the event index.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Execution {
    events: Vec<Action>,
}

impl Execution {
    pub fn new(events: Vec<Action>) -> Self {
        Execution { events }
    }

    pub fn events(&self) -> &[Action] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

impl From<Vec<Action>> for Execution {
    fn from(events: Vec<Action>) -> Self {
        Execution::new(events)
    }
}

/// A single violated rule, pointing at the offending event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub rule: &'static str,
    pub detail: String,
}

/// Outcome of [`validate`]: ok, or every violation found.
#[derive(Clone, Debug, Default)]
pub struct ValidityReport {
    pub violations: Vec<Violation>,
}

impl ValidityReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the three well-formedness rules, reporting every violation.
///
/// 1. `matching-transmission`: deliveries must be preceded by a matching
///    transmission of the same id (rules out corruption and insertion, not
///    loss, reordering, or duplication).
/// 2. `sender-order`: packet `x+1` is only sent after packet `x` was sent.
/// 3. `ack-monotone`: transmitted ACK ids never decrease.
///
/// Ids must be positive; zero is reserved for "undefined".
pub fn validate(e: &Execution) -> ValidityReport {
    let mut report = ValidityReport::default();
    let mut sent_packets = BTreeSet::new();
    let mut sent_acks = BTreeSet::new();
    let mut last_ack_sent: u64 = 0;

    for (i, a) in e.events().iter().enumerate() {
        if a.id() == 0 {
            report.violations.push(Violation {
                index: i,
                rule: "positive-id",
                detail: "id 0 is reserved for undefined".into(),
            });
            continue;
        }
        match *a {
            Action::PacketSend(id) => {
                if id > 1 && !sent_packets.contains(&(id - 1)) {
                    report.violations.push(Violation {
                        index: i,
                        rule: "sender-order",
                        detail: format!("packet {id} sent before packet {}", id - 1),
                    });
                }
                sent_packets.insert(id);
            }
            Action::PacketDeliver(id) => {
                if !sent_packets.contains(&id) {
                    report.violations.push(Violation {
                        index: i,
                        rule: "matching-transmission",
                        detail: format!("packet {id} delivered without a prior send"),
                    });
                }
            }
            Action::AckSend(id) => {
                if id < last_ack_sent {
                    report.violations.push(Violation {
                        index: i,
                        rule: "ack-monotone",
                        detail: format!("ACK {id} after ACK {last_ack_sent}"),
                    });
                }
                last_ack_sent = last_ack_sent.max(id);
                sent_acks.insert(id);
            }
            Action::AckDeliver(id) => {
                if !sent_acks.contains(&id) {
                    report.violations.push(Violation {
                        index: i,
                        rule: "matching-transmission",
                        detail: format!("ACK {id} delivered without a prior send"),
                    });
                }
            }
        }
    }
    report
}

fn require_valid(e: &Execution, op: &'static str) -> Result<()> {
    let report = validate(e);
    match report.violations.first() {
        None => Ok(()),
        Some(v) => Err(Error::InvalidExecution(format!(
            "{op}: {} at index {} ({})",
            v.rule, v.index, v.detail
        ))),
    }
}

/// True iff at every prefix the delivered ACK ids are a prefix of the
/// transmitted ACK ids: no ACK loss or reordering, pending ACKs only at the
/// tail.
pub fn is_fifo_ack(e: &Execution) -> Result<bool> {
    require_valid(e, "is_fifo_ack")?;
    let mut sent: Vec<u64> = Vec::new();
    let mut delivered = 0usize;
    for a in e.events() {
        match *a {
            Action::AckSend(id) => sent.push(id),
            Action::AckDeliver(id) => {
                if delivered >= sent.len() || sent[delivered] != id {
                    return Ok(false);
                }
                delivered += 1;
            }
            _ => {}
        }
    }
    Ok(true)
}

/// Round-trip-time lookups over one execution, precomputed in a single scan.
///
/// The clock is the sender-side event counter: it starts at 1 and advances on
/// each sender event (packet send or ACK delivery). `rtt(i)` is defined when
/// packet `i` was transmitted exactly once and some ACK with id > `i` was
/// delivered; its value is the time from that single send to the first such
/// delivery, i.e. until the sender first learns packet `i` arrived. Measuring
/// against the first ACK above `i` (rather than exactly `i+1`) is what makes
/// the value an over-approximation when the channel reorders.
pub struct RttOracle {
    first_send: BTreeMap<u64, u64>,
    send_count: BTreeMap<u64, u64>,
    /// ACK deliveries in order, as (id, clock at delivery).
    ack_deliveries: Vec<(u64, u64)>,
}

impl RttOracle {
    pub fn new(e: &Execution) -> Result<Self> {
        require_valid(e, "rtt")?;
        let mut first_send = BTreeMap::new();
        let mut send_count: BTreeMap<u64, u64> = BTreeMap::new();
        let mut ack_deliveries = Vec::new();
        let mut clock: u64 = 1;
        for a in e.events() {
            match *a {
                Action::PacketSend(id) => {
                    first_send.entry(id).or_insert(clock);
                    *send_count.entry(id).or_insert(0) += 1;
                    clock += 1;
                }
                Action::AckDeliver(id) => {
                    ack_deliveries.push((id, clock));
                    clock += 1;
                }
                _ => {}
            }
        }
        Ok(RttOracle { first_send, send_count, ack_deliveries })
    }

    /// RTT of packet `i` in clock ticks, or `None` where it is undefined.
    pub fn rtt(&self, i: u64) -> Option<u64> {
        if self.send_count.get(&i).copied().unwrap_or(0) != 1 {
            return None;
        }
        let sent_at = *self.first_send.get(&i)?;
        let (_, delivered_at) =
            self.ack_deliveries.iter().find(|(id, _)| *id >= i + 1)?;
        delivered_at.checked_sub(sent_at)
    }
}

/// One-off RTT query; prefer [`RttOracle`] when querying many ids.
pub fn rtt(e: &Execution, i: u64) -> Result<Option<u64>> {
    Ok(RttOracle::new(e)?.rtt(i))
}

/// Parameters for the seeded random execution generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecConfig {
    /// Number of distinct packet ids to transmit.
    pub n_packets: u64,
    /// Probability (in \[0,1)) that a transmitted message is lost in the
    /// channel. Applies to ACKs only when `allow_ack_loss` is set.
    pub loss_rate: Rational,
    /// How far from FIFO order the channel may deliver (0 = FIFO).
    pub reorder_window: u64,
    pub allow_ack_loss: bool,
    /// Restrict the ACK path to perfect in-order, loss-free delivery.
    pub fifo_acks: bool,
    /// Total extra transmissions allowed across all packets.
    pub max_retransmissions: u64,
    /// Probability that a delivered message is delivered twice. Duplication
    /// is rare in practice, so this defaults to zero.
    pub dup_rate: Rational,
    pub seed: u64,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            n_packets: 10,
            loss_rate: Rational::zero(),
            reorder_window: 0,
            allow_ack_loss: false,
            fifo_acks: false,
            max_retransmissions: 0,
            dup_rate: Rational::zero(),
            seed: 0,
        }
    }
}

/// Probability as parts per million, for exact threshold draws.
fn ppm(p: &Rational) -> u64 {
    let scaled = p * &Rational::from_u64(1_000_000);
    let (q, _) = num::Integer::div_rem(scaled.numer(), scaled.denom());
    use num::ToPrimitive;
    q.to_u64().unwrap_or(0).min(1_000_000)
}

/// Generates a valid execution, deterministically in the seed.
///
/// The modeled receiver keeps a set of delivered packet ids (which may have
/// gaps) and answers every packet delivery with the cumulative ACK for the
/// lowest id it is still missing. The modeled sender never retransmits a
/// packet that a delivered ACK already covers, so RTT values for sampled
/// ranges stay stable as the execution extends.
pub fn gen_execution(cfg: &ExecConfig) -> Execution {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let loss_ppm = ppm(&cfg.loss_rate);
    let dup_ppm = ppm(&cfg.dup_rate);

    let mut events = Vec::new();
    let mut pkt_channel: VecDeque<u64> = VecDeque::new();
    let mut ack_channel: VecDeque<u64> = VecDeque::new();
    let mut rcvd: BTreeSet<u64> = BTreeSet::new();
    let mut next_new: u64 = 1;
    let mut retrans_left = cfg.max_retransmissions;
    // Highest ACK id delivered to the sender so far; ids below it are
    // acknowledged and never retransmitted.
    let mut high_ack: u64 = 0;

    let lost = |rng: &mut ChaCha8Rng, p: u64| p > 0 && rng.gen_range(0..1_000_000u64) < p;

    let cum_ack = |rcvd: &BTreeSet<u64>| -> u64 {
        let mut a = 1;
        while rcvd.contains(&a) {
            a += 1;
        }
        a
    };

    loop {
        let can_send_new = next_new <= cfg.n_packets;
        let can_retransmit = retrans_left > 0 && high_ack.max(1) < next_new;
        let can_dlv_pkt = !pkt_channel.is_empty();
        let can_dlv_ack = !ack_channel.is_empty();
        if !(can_send_new || can_dlv_pkt || can_dlv_ack) {
            break;
        }

        // Weighted pick among enabled moves: favor fresh sends and
        // deliveries, keep retransmissions occasional.
        let mut moves: Vec<(u32, u8)> = Vec::new();
        if can_send_new {
            moves.push((4, 0));
        }
        if can_retransmit {
            moves.push((1, 1));
        }
        if can_dlv_pkt {
            moves.push((4, 2));
        }
        if can_dlv_ack {
            moves.push((4, 3));
        }
        let total: u32 = moves.iter().map(|(w, _)| w).sum();
        let mut pick = rng.gen_range(0..total);
        let mut chosen = moves[0].1;
        for (w, m) in moves {
            if pick < w {
                chosen = m;
                break;
            }
            pick -= w;
        }

        match chosen {
            0 | 1 => {
                let id = if chosen == 0 {
                    let id = next_new;
                    next_new += 1;
                    id
                } else {
                    retrans_left -= 1;
                    rng.gen_range(high_ack.max(1)..next_new)
                };
                events.push(Action::PacketSend(id));
                if !lost(&mut rng, loss_ppm) {
                    pkt_channel.push_back(id);
                    if lost(&mut rng, dup_ppm) {
                        pkt_channel.push_back(id);
                    }
                }
            }
            2 => {
                let window = pkt_channel.len().min(cfg.reorder_window as usize + 1);
                let idx = rng.gen_range(0..window);
                let id = pkt_channel.remove(idx).unwrap();
                events.push(Action::PacketDeliver(id));
                rcvd.insert(id);
                // One cumulative ACK per delivery.
                let ack = cum_ack(&rcvd);
                events.push(Action::AckSend(ack));
                let ack_lost = cfg.allow_ack_loss && !cfg.fifo_acks && lost(&mut rng, loss_ppm);
                if !ack_lost {
                    ack_channel.push_back(ack);
                    if !cfg.fifo_acks && lost(&mut rng, dup_ppm) {
                        ack_channel.push_back(ack);
                    }
                }
            }
            _ => {
                let window = if cfg.fifo_acks {
                    1
                } else {
                    ack_channel.len().min(cfg.reorder_window as usize + 1)
                };
                let idx = rng.gen_range(0..window);
                let id = ack_channel.remove(idx).unwrap();
                events.push(Action::AckDeliver(id));
                high_ack = high_ack.max(id);
            }
        }
    }

    Execution::new(events)
}

/// Writes the execution as CSV with columns `index,actor,action,id`.
pub fn write_csv<W: Write>(e: &Execution, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["index", "actor", "action", "id"])?;
    for (i, a) in e.events().iter().enumerate() {
        out.write_record([i.to_string(), a.actor().into(), a.label().into(), a.id().to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads an execution written by [`write_csv`].
pub fn read_csv<R: Read>(r: R) -> Result<Execution> {
    let mut reader = csv::Reader::from_reader(r);
    let mut events = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 4 {
            return Err(Error::Parse(format!("execution row {row}: expected 4 columns")));
        }
        let id = u64::from_str(record[3].trim())
            .map_err(|_| Error::Parse(format!("execution row {row}: bad id {:?}", &record[3])))?;
        if id == 0 {
            return Err(Error::Parse(format!("execution row {row}: id 0 is reserved")));
        }
        let action = match record[2].trim() {
            "snd_s" => Action::PacketSend(id),
            "dlv_r" => Action::PacketDeliver(id),
            "snd_r" => Action::AckSend(id),
            "dlvr_r" => Action::AckDeliver(id),
            other => {
                return Err(Error::Parse(format!("execution row {row}: unknown action {other:?}")))
            }
        };
        if record[1].trim() != action.actor() {
            return Err(Error::Parse(format!(
                "execution row {row}: action {} belongs to {}, not {:?}",
                action.label(),
                action.actor(),
                &record[1]
            )));
        }
        events.push(action);
    }
    Ok(Execution::new(events))
}
