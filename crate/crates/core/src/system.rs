//! The composite Go-Back-N system: one sender, one receiver, and a token
//! bucket filter in each direction.
//!
//! Seven step kinds drive the system, mirroring which components move
//! together: the two transmit steps synchronize an endpoint with the filter
//! it feeds, the two receive steps synchronize a filter forward with the
//! consuming endpoint, and the remaining steps are internal to one
//! component. Replays are deterministic, and scenario builders construct the
//! scripts for the two closed-form efficiency results: lossless transfer at
//! efficiency one, and constant over-transmission into the forward filter,
//! whose efficiency is `(R*(D-R)/(R-rat) + R + rat) / N`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbn::{Datagram, ReceiverState, SenderState};
use crate::numerics::{ExtNat, Rational};
use crate::tbf::{TbfParams, TbfState};

/// Full system state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SystemState {
    pub sender: SenderState,
    pub receiver: ReceiverState,
    /// Sender-to-receiver filter (carries packets).
    pub forward_path: TbfState,
    /// Receiver-to-sender filter (carries ACKs).
    pub reverse_path: TbfState,
}

impl SystemState {
    pub fn new(sender: SenderState, forward_path: TbfState, reverse_path: TbfState) -> Self {
        SystemState { sender, receiver: ReceiverState::new(), forward_path, reverse_path }
    }

    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        self.sender.check_invariants()?;
        self.forward_path.check_invariants()?;
        self.reverse_path.check_invariants()?;
        Ok(())
    }
}

/// Internal operation of a single filter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TbfInternalOp {
    Tick,
    Decay,
    Drop(usize),
}

/// One step of the composite system.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepDescriptor {
    /// Sender transmits the next id with this payload into the forward
    /// filter.
    SenderSend(String),
    /// Receiver transmits its cumulative ACK into the reverse filter.
    ReceiverSend,
    /// Sender goes back N.
    SenderTimeout,
    /// Internal step of the forward (packet) filter.
    ForwardInternal(TbfInternalOp),
    /// Internal step of the reverse (ACK) filter.
    ReverseInternal(TbfInternalOp),
    /// Reverse filter forwards queue index `index`; the sender consumes the
    /// ACK.
    SenderReceive { index: usize },
    /// Forward filter forwards queue index `index`; the receiver consumes
    /// the packet.
    ReceiverReceive { index: usize },
}

/// Event emitted by a step, when the step has one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SysEvent {
    PacketSent(Datagram),
    AckSent(Datagram),
    PacketDelivered(Datagram),
    AckDelivered(Datagram),
}

impl SysEvent {
    pub fn label(&self) -> &'static str {
        match self {
            SysEvent::PacketSent(_) => "snd_s",
            SysEvent::AckSent(_) => "snd_r",
            SysEvent::PacketDelivered(_) => "dlv_r",
            SysEvent::AckDelivered(_) => "dlvr_r",
        }
    }

    pub fn datagram(&self) -> &Datagram {
        match self {
            SysEvent::PacketSent(d)
            | SysEvent::AckSent(d)
            | SysEvent::PacketDelivered(d)
            | SysEvent::AckDelivered(d) => d,
        }
    }
}

fn apply_internal(t: &mut TbfState, op: &TbfInternalOp, component: &'static str) -> Result<()> {
    match op {
        TbfInternalOp::Tick => t.tick(),
        TbfInternalOp::Decay => t.decay(),
        TbfInternalOp::Drop(i) => {
            t.drop_at(*i).map_err(|e| {
                Error::precondition("sys_step", format!("{component}: {e}"))
            })?;
        }
    }
    Ok(())
}

/// Applies one step. Each step kind touches exactly the components named in
/// its description; everything else is left untouched.
pub fn sys_step(sys: &mut SystemState, step: &StepDescriptor) -> Result<Option<SysEvent>> {
    match step {
        StepDescriptor::SenderSend(payload) => {
            let dg = sys
                .sender
                .adv_cur(payload)
                .map_err(|e| Error::precondition("sys_step", format!("sender: {e}")))?;
            sys.forward_path.process(dg.clone());
            Ok(Some(SysEvent::PacketSent(dg)))
        }
        StepDescriptor::ReceiverSend => {
            let ack = sys.receiver.snd_ack();
            sys.reverse_path.process(ack.clone());
            Ok(Some(SysEvent::AckSent(ack)))
        }
        StepDescriptor::SenderTimeout => {
            sys.sender
                .timeout()
                .map_err(|e| Error::precondition("sys_step", format!("sender: {e}")))?;
            Ok(None)
        }
        StepDescriptor::ForwardInternal(op) => {
            apply_internal(&mut sys.forward_path, op, "forward_path")?;
            Ok(None)
        }
        StepDescriptor::ReverseInternal(op) => {
            apply_internal(&mut sys.reverse_path, op, "reverse_path")?;
            Ok(None)
        }
        StepDescriptor::SenderReceive { index } => {
            let ack = sys
                .reverse_path
                .forward(*index)
                .map_err(|e| Error::precondition("sys_step", format!("reverse_path: {e}")))?;
            sys.sender.rcv_ack(ack.id);
            Ok(Some(SysEvent::AckDelivered(ack)))
        }
        StepDescriptor::ReceiverReceive { index } => {
            let dg = sys
                .forward_path
                .forward(*index)
                .map_err(|e| Error::precondition("sys_step", format!("forward_path: {e}")))?;
            sys.receiver.rcv_pkt(dg.id);
            Ok(Some(SysEvent::PacketDelivered(dg)))
        }
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

fn digest(sys: &SystemState) -> u64 {
    fnv1a64(format!("{sys:?}").as_bytes())
}

/// One applied step of a replay.
#[derive(Clone, Debug)]
pub struct TraceStep {
    pub index: usize,
    pub step: StepDescriptor,
    pub event: Option<SysEvent>,
    pub pre_digest: u64,
    pub post_digest: u64,
}

/// A completed replay with the counters the analyses need.
#[derive(Clone, Debug)]
pub struct Trace {
    pub steps: Vec<TraceStep>,
    pub final_state: SystemState,
    /// Packets delivered to the receiver, duplicates included.
    pub packets_received_by_receiver: u64,
    /// All delivery events (packets plus ACKs).
    pub dlv_events: u64,
}

/// Replays a script from an initial state; the first inapplicable step is
/// reported with its position.
pub fn replay(initial: &SystemState, script: &[StepDescriptor]) -> Result<Trace> {
    let mut sys = initial.clone();
    let mut steps = Vec::with_capacity(script.len());
    let mut packets_received = 0;
    let mut dlv_events = 0;
    for (index, step) in script.iter().enumerate() {
        let pre_digest = digest(&sys);
        let event = sys_step(&mut sys, step).map_err(|e| Error::InvalidStep {
            index,
            reason: e.to_string(),
        })?;
        match event {
            Some(SysEvent::PacketDelivered(_)) => {
                packets_received += 1;
                dlv_events += 1;
            }
            Some(SysEvent::AckDelivered(_)) => dlv_events += 1,
            _ => {}
        }
        steps.push(TraceStep { index, step: step.clone(), event, pre_digest, post_digest: digest(&sys) });
    }
    Ok(Trace {
        steps,
        final_state: sys,
        packets_received_by_receiver: packets_received,
        dlv_events,
    })
}

/// Fraction of received packets that were useful: the largest delivered id
/// over the number of packet deliveries (duplicates included). Requires at
/// least one delivery.
pub fn efficiency(trace: &Trace) -> Result<Rational> {
    if trace.packets_received_by_receiver == 0 {
        return Err(Error::precondition("efficiency", "no packets were received"));
    }
    Ok(Rational::from_u64(trace.final_state.receiver.max_received())
        / Rational::from_u64(trace.packets_received_by_receiver))
}

/// Bursts needed to fill the forward queue to `rate_in` below its capacity
/// when each burst adds `rate_in` and drains `refill`:
/// `(data_cap - rate_in) / (rate_in - refill)`, which must divide evenly.
pub fn steps_to_fill(rate_in: u64, refill: u64, data_cap: u64) -> Result<u64> {
    if !(refill < rate_in && rate_in < data_cap) {
        return Err(Error::precondition(
            "steps_to_fill",
            format!("need refill < rate < data_cap, got {refill}, {rate_in}, {data_cap}"),
        ));
    }
    let num = data_cap - rate_in;
    let den = rate_in - refill;
    if num % den != 0 {
        return Err(Error::precondition(
            "steps_to_fill",
            format!("{den} does not divide {num}"),
        ));
    }
    Ok(num / den)
}

/// Closed-form efficiency of the constant over-transmission scenario:
/// `(R*(D-R)/(R-rat) + R + rat) / N`, exact even when the fill count is not
/// integral.
pub fn predicted_overtx_eff(rate_in: u64, refill: u64, data_cap: u64, window: u64) -> Result<Rational> {
    if !(refill < rate_in && rate_in < data_cap && data_cap < window) {
        return Err(Error::precondition(
            "predicted_overtx_eff",
            format!("need refill < rate < data_cap < window, got {refill}, {rate_in}, {data_cap}, {window}"),
        ));
    }
    let r = Rational::from_u64(rate_in);
    let fill = &r * &(Rational::from_u64(data_cap) - &r)
        / (&r - &Rational::from_u64(refill));
    let delivered = fill + &r + &Rational::from_u64(refill);
    Ok(delivered / Rational::from_u64(window))
}

fn ack_path_tbf(ttl: ExtNat) -> TbfState {
    // Just enough for one 3-byte ACK per tick.
    TbfState::new(TbfParams::new(3, 3, 3, ttl).expect("static params"))
}

/// Builds the lossless scenario: each window's packets are sent, ticked
/// through, and delivered one by one, then the cumulative ACK returns.
/// Replay ends with the window fully acknowledged and efficiency one.
pub fn build_best_case(window: u64, windows: u64) -> Result<(SystemState, Vec<StepDescriptor>)> {
    if window == 0 || windows == 0 {
        return Err(Error::precondition("build_best_case", "window and windows must be positive"));
    }
    // One-byte payloads; both filters outlive the single tick each datagram
    // experiences.
    let forward = TbfState::new(TbfParams::new(1, 1, 1, ExtNat::Finite(2)).expect("static params"));
    let initial = SystemState::new(SenderState::new(window), forward, ack_path_tbf(ExtNat::Finite(2)));

    let mut script = Vec::new();
    for _ in 0..windows {
        for _ in 0..window {
            script.push(StepDescriptor::SenderSend("p".into()));
            script.push(StepDescriptor::ForwardInternal(TbfInternalOp::Tick));
            script.push(StepDescriptor::ReceiverReceive { index: 0 });
        }
        script.push(StepDescriptor::ReceiverSend);
        script.push(StepDescriptor::ReverseInternal(TbfInternalOp::Tick));
        script.push(StepDescriptor::SenderReceive { index: 0 });
    }
    Ok((initial, script))
}

/// The over-transmission scenario and the exact places its analysis refers
/// to.
#[derive(Clone, Debug)]
pub struct OvertxScenario {
    pub initial: SystemState,
    pub script: Vec<StepDescriptor>,
    /// Bursts needed to fill the forward queue to `rate` below capacity.
    pub warmup_bursts: u64,
    /// Script position right after the warm-up bursts.
    pub warmup_cut: usize,
}

/// Builds the constant over-transmission scenario: the sender pushes `rate`
/// one-byte packets into the forward filter per tick while the filter drains
/// `refill`, overflowing the queue, timing out, and retransmitting until the
/// receiver has received a full window of packets (duplicates included) and
/// ACKs.
///
/// Preconditions: `refill < rate < data_cap < window`, the fill count
/// divides evenly, and fewer packets survive per cycle than the window
/// (otherwise no over-transmission occurs).
pub fn build_overtx(
    window: u64,
    rate: u64,
    refill: u64,
    data_cap: u64,
) -> Result<OvertxScenario> {
    if rate <= refill {
        return Err(Error::precondition("build_overtx", "rate must exceed refill"));
    }
    if !(rate < data_cap && data_cap < window) {
        return Err(Error::precondition(
            "build_overtx",
            format!("need rate < data_cap < window, got {rate}, {data_cap}, {window}"),
        ));
    }
    let warmup_bursts = steps_to_fill(rate, refill, data_cap)?;
    let delivered_in_order = rate * warmup_bursts + rate + refill;
    if delivered_in_order >= window {
        return Err(Error::precondition(
            "build_overtx",
            format!(
                "no over-transmission: {delivered_in_order} in-order deliveries reach the window {window}"
            ),
        ));
    }

    // Bucket refills fully on every tick and packets never expire.
    let forward =
        TbfState::new(TbfParams::new(refill, data_cap, refill, ExtNat::Infinity).expect("params"));
    let initial =
        SystemState::new(SenderState::new(window), forward, ack_path_tbf(ExtNat::Infinity));

    let mut sys = initial.clone();
    let mut script: Vec<StepDescriptor> = Vec::new();
    let mut received: u64 = 0;
    let mut warmup_cut = None;
    let mut bursts_done = 0u64;

    let push = |sys: &mut SystemState, script: &mut Vec<StepDescriptor>, step: StepDescriptor| {
        sys_step(sys, &step).expect("over-transmission script construction");
        script.push(step);
    };

    'outer: loop {
        // Burst phase: rate sends, a tick, then FIFO forwards, while the
        // window has room.
        while sys.sender.next_seq < sys.sender.highest_ack + window {
            for _ in 0..rate {
                if sys.sender.next_seq >= sys.sender.highest_ack + window {
                    break;
                }
                push(&mut sys, &mut script, StepDescriptor::SenderSend("p".into()));
            }
            push(&mut sys, &mut script, StepDescriptor::ForwardInternal(TbfInternalOp::Tick));
            for _ in 0..refill.min(sys.forward_path.len() as u64) {
                let index = sys.forward_path.len() - 1;
                push(&mut sys, &mut script, StepDescriptor::ReceiverReceive { index });
                received += 1;
                if received == window {
                    break 'outer;
                }
            }
            bursts_done += 1;
            if bursts_done == warmup_bursts && warmup_cut.is_none() {
                warmup_cut = Some(script.len());
            }
        }
        // Drain phase: tick and forward until the queue empties.
        while !sys.forward_path.is_empty() {
            push(&mut sys, &mut script, StepDescriptor::ForwardInternal(TbfInternalOp::Tick));
            for _ in 0..refill.min(sys.forward_path.len() as u64) {
                let index = sys.forward_path.len() - 1;
                push(&mut sys, &mut script, StepDescriptor::ReceiverReceive { index });
                received += 1;
                if received == window {
                    break 'outer;
                }
            }
        }
        // Window exhausted, queue drained, not enough receptions yet: go
        // back N and repeat.
        push(&mut sys, &mut script, StepDescriptor::SenderTimeout);
    }

    // The receiver has now received a full window of packets; it ACKs, and
    // the ACK travels back.
    push(&mut sys, &mut script, StepDescriptor::ReceiverSend);
    push(&mut sys, &mut script, StepDescriptor::ReverseInternal(TbfInternalOp::Tick));
    push(&mut sys, &mut script, StepDescriptor::SenderReceive { index: 0 });

    let warmup_cut = warmup_cut.expect("warm-up completes before the first window ends");
    debug_assert_eq!(warmup_cut as u64, warmup_bursts * (rate + 1 + refill));
    Ok(OvertxScenario { initial, script, warmup_bursts, warmup_cut })
}

/// The reduced view of the system used to cross-check the over-transmission
/// analysis: only the forward queue's ids, the receiver's next ACK, and the
/// sender's counters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimplifiedSystem {
    /// Forward-queue ids, newest first.
    pub chan: Vec<u64>,
    pub data_cap: u64,
    /// The cumulative ACK the receiver would send next.
    pub ack: u64,
    pub next_seq: u64,
    pub highest_ack: u64,
    pub window: u64,
}

/// Projects the full system onto the reduced view. Faithful when payloads
/// are one byte (so bytes equal queue length).
pub fn simplify(sys: &SystemState) -> SimplifiedSystem {
    SimplifiedSystem {
        chan: sys.forward_path.ids(),
        data_cap: sys.forward_path.params.data_cap,
        ack: sys.receiver.cum_ack(),
        next_seq: sys.sender.next_seq,
        highest_ack: sys.sender.highest_ack,
        window: sys.sender.window,
    }
}

/// One burst of the reduced model, coded directly from its definition:
/// push `rate` ids (dropping past capacity), then deliver `refill` ids FIFO,
/// advancing the ACK only on in-order ids.
pub fn simplified_single_step(
    sm: &SimplifiedSystem,
    rate: u64,
    refill: u64,
) -> Result<SimplifiedSystem> {
    if sm.next_seq + rate > sm.highest_ack + sm.window {
        return Err(Error::precondition(
            "simplified_single_step",
            "burst would leave the window",
        ));
    }
    let mut next = sm.clone();
    for k in 0..rate {
        let id = sm.next_seq + k;
        if next.chan.len() < next.data_cap as usize {
            next.chan.insert(0, id);
        }
    }
    next.next_seq += rate;
    for _ in 0..refill {
        match next.chan.pop() {
            Some(id) if id == next.ack => next.ack += 1,
            Some(_) => {}
            None => break,
        }
    }
    Ok(next)
}

/// One gbn trace row: the step, its event if any, and the post-step summary
/// of all four components.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GbnTraceRow {
    pub step: usize,
    pub kind: String,
    pub arg: String,
    pub action: String,
    pub id: Option<u64>,
    pub payload: String,
    pub hi_ack: u64,
    pub hi_sent: Option<u64>,
    pub next_seq: u64,
    pub cum_ack: u64,
    pub fwd_bucket: u64,
    pub fwd_bytes: u64,
    pub rev_bucket: u64,
    pub rev_bytes: u64,
}

fn descriptor_kind(step: &StepDescriptor) -> (String, String) {
    fn internal(op: &TbfInternalOp) -> (&'static str, String) {
        match op {
            TbfInternalOp::Tick => ("tick", String::new()),
            TbfInternalOp::Decay => ("decay", String::new()),
            TbfInternalOp::Drop(i) => ("drop", i.to_string()),
        }
    }
    match step {
        StepDescriptor::SenderSend(p) => ("sender_snd".into(), p.clone()),
        StepDescriptor::ReceiverSend => ("receiver_snd".into(), String::new()),
        StepDescriptor::SenderTimeout => ("sender_timeout".into(), String::new()),
        StepDescriptor::ForwardInternal(op) => {
            let (name, arg) = internal(op);
            (format!("fwd_{name}"), arg)
        }
        StepDescriptor::ReverseInternal(op) => {
            let (name, arg) = internal(op);
            (format!("rev_{name}"), arg)
        }
        StepDescriptor::SenderReceive { index } => ("sender_rcv".into(), index.to_string()),
        StepDescriptor::ReceiverReceive { index } => ("receiver_rcv".into(), index.to_string()),
    }
}

/// Renders a replayed trace into rows (recomputing the state summaries).
pub fn gbn_trace_rows(initial: &SystemState, trace: &Trace) -> Vec<GbnTraceRow> {
    let mut sys = initial.clone();
    trace
        .steps
        .iter()
        .map(|ts| {
            sys_step(&mut sys, &ts.step).expect("trace replays deterministically");
            let (kind, arg) = descriptor_kind(&ts.step);
            let (action, id, payload) = match &ts.event {
                Some(ev) => {
                    (ev.label().to_string(), Some(ev.datagram().id), ev.datagram().payload.clone())
                }
                None => (String::new(), None, String::new()),
            };
            GbnTraceRow {
                step: ts.index,
                kind,
                arg,
                action,
                id,
                payload,
                hi_ack: sys.sender.highest_ack,
                hi_sent: sys.sender.highest_sent,
                next_seq: sys.sender.next_seq,
                cum_ack: sys.receiver.cum_ack(),
                fwd_bucket: sys.forward_path.bucket,
                fwd_bytes: sys.forward_path.queued_bytes(),
                rev_bucket: sys.reverse_path.bucket,
                rev_bytes: sys.reverse_path.queued_bytes(),
            }
        })
        .collect()
}

pub fn write_gbn_trace_csv<W: Write>(rows: &[GbnTraceRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "step", "kind", "arg", "action", "id", "payload", "hi_ack", "hi_sent", "next_seq",
        "cum_ack", "fwd_bucket", "fwd_bytes", "rev_bucket", "rev_bytes",
    ])?;
    for r in rows {
        out.write_record([
            r.step.to_string(),
            r.kind.clone(),
            r.arg.clone(),
            r.action.clone(),
            r.id.map(|i| i.to_string()).unwrap_or_default(),
            r.payload.clone(),
            r.hi_ack.to_string(),
            r.hi_sent.map(|i| i.to_string()).unwrap_or_default(),
            r.next_seq.to_string(),
            r.cum_ack.to_string(),
            r.fwd_bucket.to_string(),
            r.fwd_bytes.to_string(),
            r.rev_bucket.to_string(),
            r.rev_bytes.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_gbn_trace_csv<R: Read>(r: R) -> Result<Vec<GbnTraceRow>> {
    let mut reader = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 14 {
            return Err(Error::Parse(format!("gbn trace row {n}: expected 14 columns")));
        }
        let num = |i: usize| -> Result<u64> {
            record[i].trim().parse().map_err(|_| Error::Parse(format!("gbn trace row {n}: bad number")))
        };
        let opt = |i: usize| -> Result<Option<u64>> {
            if record[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        rows.push(GbnTraceRow {
            step: num(0)? as usize,
            kind: record[1].to_string(),
            arg: record[2].to_string(),
            action: record[3].to_string(),
            id: opt(4)?,
            payload: record[5].to_string(),
            hi_ack: num(6)?,
            hi_sent: opt(7)?,
            next_seq: num(8)?,
            cum_ack: num(9)?,
            fwd_bucket: num(10)?,
            fwd_bytes: num(11)?,
            rev_bucket: num(12)?,
            rev_bytes: num(13)?,
        });
    }
    Ok(rows)
}

/// Summary emitted by the gbn scenario runners.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GbnSummary {
    pub schema: String,
    pub scenario: String,
    pub efficiency: Rational,
    pub predicted: Rational,
    #[serde(rename = "match")]
    pub matches: bool,
    pub steps: usize,
}

impl GbnSummary {
    pub fn new(scenario: &str, efficiency: Rational, predicted: Rational, steps: usize) -> Self {
        let matches = efficiency == predicted;
        GbnSummary {
            schema: "rtt-forge/1".into(),
            scenario: scenario.into(),
            efficiency,
            predicted,
            matches,
            steps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_system(window: u64, fwd: (u64, u64, u64), rev_dcap: u64) -> SystemState {
        let forward =
            TbfState::new(TbfParams::new(fwd.0, fwd.1, fwd.2, ExtNat::Infinity).unwrap());
        let reverse = TbfState::new(TbfParams::new(3, rev_dcap, 3, ExtNat::Infinity).unwrap());
        SystemState::new(SenderState::new(window), forward, reverse)
    }

    #[test]
    fn sender_send_touches_only_its_components() {
        let initial = small_system(4, (5, 10, 5), 3);
        let mut sys = initial.clone();
        let ev = sys_step(&mut sys, &StepDescriptor::SenderSend("p".into())).unwrap();
        assert_eq!(ev, Some(SysEvent::PacketSent(Datagram::new(1, "p"))));
        assert_eq!(sys.forward_path.ids(), vec![1]);
        assert_eq!(sys.receiver, initial.receiver);
        assert_eq!(sys.reverse_path, initial.reverse_path);
        assert_eq!(sys.sender.next_seq, 2);
    }

    #[test]
    fn receive_from_empty_filter_rejected() {
        let mut sys = small_system(4, (5, 10, 5), 3);
        assert!(sys_step(&mut sys, &StepDescriptor::ReceiverReceive { index: 0 }).is_err());
        assert!(sys_step(&mut sys, &StepDescriptor::SenderReceive { index: 0 }).is_err());
    }

    #[test]
    fn one_packet_round_trip() {
        let initial = small_system(4, (5, 10, 5), 3);
        let script = vec![
            StepDescriptor::SenderSend("p".into()),
            StepDescriptor::ForwardInternal(TbfInternalOp::Tick),
            StepDescriptor::ReceiverReceive { index: 0 },
            StepDescriptor::ReceiverSend,
            StepDescriptor::ReverseInternal(TbfInternalOp::Tick),
            StepDescriptor::SenderReceive { index: 0 },
        ];
        let trace = replay(&initial, &script).unwrap();
        assert_eq!(trace.final_state.sender.highest_ack, 2);
        assert_eq!(trace.packets_received_by_receiver, 1);
        assert_eq!(trace.dlv_events, 2);
        assert_eq!(efficiency(&trace).unwrap(), Rational::one());
    }

    #[test]
    fn replay_reports_first_bad_step() {
        let initial = small_system(2, (5, 10, 5), 3);
        let script = vec![
            StepDescriptor::SenderSend("a".into()),
            StepDescriptor::SenderSend("b".into()),
            StepDescriptor::SenderSend("c".into()), // window full here
        ];
        match replay(&initial, &script) {
            Err(Error::InvalidStep { index: 2, .. }) => {}
            other => panic!("expected step-2 failure, got {other:?}"),
        }

        // Empty scripts replay to an empty trace, deterministically.
        let a = replay(&initial, &[]).unwrap();
        let b = replay(&initial, &[]).unwrap();
        assert_eq!(a.steps.len(), 0);
        assert_eq!(a.final_state, b.final_state);
    }

    #[test]
    fn digests_chain() {
        let (initial, script) = build_best_case(3, 1).unwrap();
        let trace = replay(&initial, &script).unwrap();
        for pair in trace.steps.windows(2) {
            assert_eq!(pair[0].post_digest, pair[1].pre_digest);
        }
    }

    #[test]
    fn frame_conditions_per_step_kind() {
        // Drive a short mixed script and verify the untouched components are
        // bit-identical across each step.
        let initial = small_system(4, (5, 10, 5), 3);
        let script = vec![
            StepDescriptor::SenderSend("p".into()),
            StepDescriptor::ForwardInternal(TbfInternalOp::Tick),
            StepDescriptor::ReverseInternal(TbfInternalOp::Decay),
            StepDescriptor::ReceiverReceive { index: 0 },
            StepDescriptor::ReceiverSend,
            StepDescriptor::ReverseInternal(TbfInternalOp::Tick),
            StepDescriptor::SenderReceive { index: 0 },
        ];
        let mut sys = initial;
        for step in &script {
            let before = sys.clone();
            sys_step(&mut sys, step).unwrap();
            match step {
                StepDescriptor::SenderSend(_) => {
                    assert_eq!(sys.receiver, before.receiver);
                    assert_eq!(sys.reverse_path, before.reverse_path);
                }
                StepDescriptor::ReceiverSend => {
                    assert_eq!(sys.sender, before.sender);
                    assert_eq!(sys.forward_path, before.forward_path);
                    assert_eq!(sys.receiver, before.receiver);
                }
                StepDescriptor::SenderTimeout => {
                    assert_eq!(sys.receiver, before.receiver);
                    assert_eq!(sys.forward_path, before.forward_path);
                    assert_eq!(sys.reverse_path, before.reverse_path);
                }
                StepDescriptor::ForwardInternal(_) => {
                    assert_eq!(sys.sender, before.sender);
                    assert_eq!(sys.receiver, before.receiver);
                    assert_eq!(sys.reverse_path, before.reverse_path);
                }
                StepDescriptor::ReverseInternal(_) => {
                    assert_eq!(sys.sender, before.sender);
                    assert_eq!(sys.receiver, before.receiver);
                    assert_eq!(sys.forward_path, before.forward_path);
                }
                StepDescriptor::SenderReceive { .. } => {
                    assert_eq!(sys.receiver, before.receiver);
                    assert_eq!(sys.forward_path, before.forward_path);
                }
                StepDescriptor::ReceiverReceive { .. } => {
                    assert_eq!(sys.sender, before.sender);
                    assert_eq!(sys.reverse_path, before.reverse_path);
                }
            }
            sys.check_invariants().unwrap();
        }
    }

    #[test]
    fn efficiency_duplicate_example() {
        // The receiver sees ids 1, 2, 2, 1, 3: two duplicates, so 3 of 5
        // receptions are useful.
        let initial = small_system(2, (5, 10, 5), 3);
        let tick = || StepDescriptor::ForwardInternal(TbfInternalOp::Tick);
        let script = vec![
            StepDescriptor::SenderSend("a".into()), // 1
            StepDescriptor::SenderSend("b".into()), // 2; window now full
            tick(),
            StepDescriptor::ReceiverReceive { index: 1 }, // oldest: id 1
            StepDescriptor::ReceiverReceive { index: 0 }, // id 2
            StepDescriptor::SenderTimeout,
            StepDescriptor::SenderSend("a".into()), // 1 again
            StepDescriptor::SenderSend("b".into()), // 2 again
            tick(),
            StepDescriptor::ReceiverReceive { index: 0 }, // newest: id 2 (dup)
            StepDescriptor::ReceiverReceive { index: 0 }, // id 1 (dup)
            StepDescriptor::ReceiverSend,                 // ACK 3
            StepDescriptor::ReverseInternal(TbfInternalOp::Tick),
            StepDescriptor::SenderReceive { index: 0 },
            StepDescriptor::SenderSend("c".into()), // 3
            tick(),
            StepDescriptor::ReceiverReceive { index: 0 },
        ];
        let trace = replay(&initial, &script).unwrap();
        assert_eq!(trace.packets_received_by_receiver, 5);
        assert_eq!(efficiency(&trace).unwrap(), Rational::new(3, 5));
    }

    #[test]
    fn efficiency_out_of_order_tail() {
        // First packet in order, the rest permuted: only one delivery is
        // useful.
        let initial = small_system(5, (5, 10, 5), 3);
        let tick = || StepDescriptor::ForwardInternal(TbfInternalOp::Tick);
        let mut script: Vec<StepDescriptor> =
            (0..5).map(|_| StepDescriptor::SenderSend("x".into())).collect();
        script.push(tick());
        // Queue (newest first) is [5,4,3,2,1]; deliver 1, then 3, 5, 4.
        script.push(StepDescriptor::ReceiverReceive { index: 4 });
        script.push(StepDescriptor::ReceiverReceive { index: 2 });
        script.push(StepDescriptor::ReceiverReceive { index: 0 });
        script.push(StepDescriptor::ReceiverReceive { index: 0 });
        let trace = replay(&initial, &script).unwrap();
        assert_eq!(trace.packets_received_by_receiver, 4);
        assert_eq!(efficiency(&trace).unwrap(), Rational::new(1, 4));
    }

    #[test]
    fn best_case_single_windows() {
        for n in [1u64, 2, 5, 10] {
            let (initial, script) = build_best_case(n, 1).unwrap();
            if n == 1 {
                assert_eq!(script.len(), 6);
            }
            let trace = replay(&initial, &script).unwrap();
            assert_eq!(efficiency(&trace).unwrap(), Rational::one(), "window {n}");
            assert_eq!(trace.final_state.sender.highest_ack, n + 1);
            assert_eq!(trace.final_state.sender.highest_sent, Some(n));
            assert_eq!(trace.final_state.sender.next_seq, n + 1);
            assert_eq!(trace.final_state.receiver.prefix_len(), n);
        }
    }

    #[test]
    fn best_case_repeated_windows() {
        let (initial, script) = build_best_case(4, 5).unwrap();
        let trace = replay(&initial, &script).unwrap();
        assert_eq!(efficiency(&trace).unwrap(), Rational::one());
        assert_eq!(trace.final_state.sender.highest_ack, 21);
        assert_eq!(trace.packets_received_by_receiver, 20);
    }

    #[test]
    fn steps_to_fill_cases() {
        assert_eq!(steps_to_fill(10, 1, 100).unwrap(), 10);
        assert_eq!(steps_to_fill(2, 1, 3).unwrap(), 1);
        assert!(steps_to_fill(10, 1, 99).is_err()); // 9 does not divide 89
        assert!(steps_to_fill(1, 1, 3).is_err());
        assert!(steps_to_fill(5, 1, 5).is_err());
    }

    #[test]
    fn predicted_efficiency_values() {
        assert_eq!(predicted_overtx_eff(10, 1, 100, 200).unwrap(), Rational::new(111, 200));
        // Non-integral fill count still yields an exact rational.
        assert_eq!(
            predicted_overtx_eff(200, 20, 400, 4000).unwrap(),
            Rational::new(199, 1800)
        );
        assert!(predicted_overtx_eff(1, 1, 3, 10).is_err());
        assert!(predicted_overtx_eff(10, 1, 100, 100).is_err());
    }

    #[test]
    fn predicted_efficiency_below_one_within_theorem_preconditions() {
        // Whenever the full set of scenario preconditions holds (including
        // the over-transmission inequality), the prediction stays below 1;
        // dropping that inequality lets it exceed 1.
        let mut checked = 0;
        for rate in 2..20u64 {
            for refill in 1..rate {
                for data_cap in (rate + 1)..40 {
                    if (data_cap - rate) % (rate - refill) != 0 {
                        continue;
                    }
                    let w = (data_cap - rate) / (rate - refill);
                    let delivered = rate * w + rate + refill;
                    for window in (data_cap + 1)..(data_cap + 40) {
                        let eff = predicted_overtx_eff(rate, refill, data_cap, window).unwrap();
                        if delivered < window {
                            assert!(eff < Rational::one());
                            checked += 1;
                        }
                    }
                }
            }
        }
        assert!(checked > 100);
        let above = predicted_overtx_eff(8, 7, 9, 10).unwrap();
        assert!(above > Rational::one());
    }

    #[test]
    fn overtx_small_grid_matches_prediction() {
        let scenario = build_overtx(200, 10, 1, 100).unwrap();
        let trace = replay(&scenario.initial, &scenario.script).unwrap();
        assert_eq!(trace.packets_received_by_receiver, 200);
        assert_eq!(efficiency(&trace).unwrap(), Rational::new(111, 200));
        assert_eq!(trace.final_state.sender.highest_ack, 112);
    }

    #[test]
    fn overtx_rejects_bad_parameters() {
        assert!(build_overtx(200, 10, 10, 100).is_err()); // rate == refill
        assert!(build_overtx(200, 10, 1, 99).is_err()); // divisibility
        assert!(build_overtx(100, 10, 1, 100).is_err()); // data_cap == window
        // In-order deliveries reach the window: no over-transmission.
        assert!(build_overtx(111, 10, 1, 100).is_err());
        assert!(build_overtx(112, 10, 1, 100).is_ok());
    }

    #[test]
    fn simplified_model_commutes_with_projection() {
        let scenario = build_overtx(200, 10, 1, 100).unwrap();
        let per_burst = (10 + 1 + 1) as usize;
        let mut sm = simplify(&scenario.initial);
        for burst in 1..=scenario.warmup_bursts {
            sm = simplified_single_step(&sm, 10, 1).unwrap();
            let cut = per_burst * burst as usize;
            let trace = replay(&scenario.initial, &scenario.script[..cut]).unwrap();
            assert_eq!(simplify(&trace.final_state), sm, "burst {burst}");
        }
    }

    #[test]
    fn warmup_state_shape() {
        let scenario = build_overtx(200, 10, 1, 100).unwrap();
        let w = scenario.warmup_bursts;
        assert_eq!(w, 10);
        let trace = replay(&scenario.initial, &scenario.script[..scenario.warmup_cut]).unwrap();
        let sm = simplify(&trace.final_state);
        // Forward queue holds the descending run just below the sender's
        // cursor, of length (rate - refill) * bursts.
        let top = 1 + 10 * w - 1;
        let expected: Vec<u64> = (0..(10 - 1) * w).map(|k| top - k).collect();
        assert_eq!(sm.chan, expected);
        assert_eq!(sm.ack, 1 + w);
        assert_eq!(sm.next_seq, 1 + 10 * w);
    }

    #[test]
    fn gbn_trace_csv_round_trip() {
        let (initial, script) = build_best_case(2, 1).unwrap();
        let trace = replay(&initial, &script).unwrap();
        let rows = gbn_trace_rows(&initial, &trace);
        let mut buf = Vec::new();
        write_gbn_trace_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_gbn_trace_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn summary_schema() {
        let s = GbnSummary::new("best-case", Rational::one(), Rational::one(), 6);
        assert!(s.matches);
        assert_eq!(s.schema, "rtt-forge/1");
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"match\":true"));
        assert!(text.contains("\"efficiency\":\"1/1\""));
    }
}
