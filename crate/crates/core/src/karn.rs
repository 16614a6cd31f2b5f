//! RTT sampling as a non-interfering monitor over sender events.
//!
//! The monitor watches packet sends and ACK deliveries, keeps per-id
//! transmission counts and first-send times, and emits a sample only when a
//! newly delivered ACK is unambiguous: every packet between the previous
//! highest ACK and the new one was transmitted exactly once. The sample is
//! measured from the first transmission of the *previous* highest ACK, which
//! makes it a pessimistic (upper-bound) estimate under reordering.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::execution::{is_fifo_ack, Action, Execution, RttOracle};

/// Monitor state. All counters default to zero; the clock starts at 1
/// (zero is reserved for "undefined").
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KarnState {
    clock: u64,
    send_count: BTreeMap<u64, u64>,
    first_send: BTreeMap<u64, u64>,
    highest_ack: u64,
    /// Samples emitted so far, as (event index, value).
    pub emitted: Vec<(usize, u64)>,
}

impl KarnState {
    pub fn new() -> Self {
        KarnState {
            clock: 1,
            send_count: BTreeMap::new(),
            first_send: BTreeMap::new(),
            highest_ack: 0,
            emitted: Vec::new(),
        }
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn highest_ack(&self) -> u64 {
        self.highest_ack
    }

    /// Number of times packet `id` was transmitted (0 if never).
    pub fn send_count(&self, id: u64) -> u64 {
        self.send_count.get(&id).copied().unwrap_or(0)
    }

    /// Clock value at the first transmission of `id` (0 if never sent).
    pub fn first_send_time(&self, id: u64) -> u64 {
        self.first_send.get(&id).copied().unwrap_or(0)
    }

    /// Checks the two inductive invariants of the monitor:
    /// every transmitted packet is preceded by transmissions of all lower
    /// ids, and first-send times are strictly increasing in id.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let mut prev: Option<(u64, u64)> = None;
        for (&id, &count) in &self.send_count {
            if count == 0 {
                continue;
            }
            let t = self.first_send_time(id);
            if t == 0 {
                return Err(format!("packet {id} counted but has no first-send time"));
            }
            if let Some((pid, pt)) = prev {
                if id != pid + 1 {
                    return Err(format!("packet {id} transmitted but {} was not", pid + 1));
                }
                if t <= pt {
                    return Err(format!(
                        "first-send time of {id} ({t}) not after that of {pid} ({pt})"
                    ));
                }
            } else if id != 1 {
                return Err(format!("packet {id} transmitted but 1 was not"));
            }
            prev = Some((id, t));
        }
        Ok(())
    }
}

impl Default for KarnState {
    fn default() -> Self {
        Self::new()
    }
}

/// Knobs for the monitor.
#[derive(Clone, Copy, Debug, Default)]
pub struct KarnConfig {
    /// Permit a sample on the very first ACK (highest ack still 0). The
    /// sampling guard is vacuously true there, but the measured base would be
    /// the reserved time 0, so sampling is refused unless this is set.
    pub allow_sample_at_high_zero: bool,
}

/// The sampling guard for a newly delivered ACK `j`: every id strictly
/// between the current highest ACK and `j` was transmitted exactly once, and
/// if there is a current highest ACK, it too was transmitted exactly once.
pub fn ok_to_sample(s: &KarnState, j: u64) -> bool {
    let lo = s.highest_ack;
    for k in (lo + 1)..j {
        if s.send_count(k) != 1 {
            return false;
        }
    }
    lo == 0 || s.send_count(lo) == 1
}

/// Feeds one sender event to the monitor, returning the fresh sample if the
/// event produced one. Channel and receiver events are rejected.
pub fn karn_step(s: &mut KarnState, a: &Action, cfg: &KarnConfig) -> Result<Option<u64>> {
    match *a {
        Action::PacketSend(id) => {
            *s.send_count.entry(id).or_insert(0) += 1;
            s.first_send.entry(id).or_insert(s.clock);
            s.clock += 1;
            Ok(None)
        }
        Action::AckDeliver(id) => {
            let mut sample = None;
            if id > s.highest_ack {
                if ok_to_sample(s, id) && (s.highest_ack > 0 || cfg.allow_sample_at_high_zero) {
                    sample = Some(s.clock - s.first_send_time(s.highest_ack));
                }
                s.highest_ack = id;
            }
            s.clock += 1;
            Ok(sample)
        }
        Action::PacketDeliver(_) | Action::AckSend(_) => Err(Error::precondition(
            "karn_step",
            format!("{} is not a sender event", a.label()),
        )),
    }
}

/// Runs the monitor over the sender projection of a valid execution.
///
/// Returns the final state and the emitted samples as
/// (index of the triggering event in the full execution, value).
pub fn karn_run(e: &Execution) -> Result<(KarnState, Vec<(usize, u64)>)> {
    karn_run_with(e, &KarnConfig::default())
}

pub fn karn_run_with(e: &Execution, cfg: &KarnConfig) -> Result<(KarnState, Vec<(usize, u64)>)> {
    let report = crate::execution::validate(e);
    if let Some(v) = report.violations.first() {
        return Err(Error::InvalidExecution(format!(
            "karn_run: {} at index {} ({})",
            v.rule, v.index, v.detail
        )));
    }
    let mut state = KarnState::new();
    for (i, a) in e.events().iter().enumerate() {
        if !a.is_sender_event() {
            continue;
        }
        if let Some(value) = karn_step(&mut state, a, cfg)? {
            state.emitted.push((i, value));
        }
    }
    let samples = state.emitted.clone();
    Ok((state, samples))
}

/// A fresh sample with the ACK window it covered.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub event_index: usize,
    pub value: u64,
    /// Highest ACK before the sample was taken.
    pub prev_high: u64,
    /// Highest ACK after (the ACK that triggered the sample).
    pub new_high: u64,
}

fn run_with_windows(e: &Execution) -> Result<Vec<SampleRecord>> {
    let report = crate::execution::validate(e);
    if let Some(v) = report.violations.first() {
        return Err(Error::InvalidExecution(format!(
            "{} at index {} ({})",
            v.rule, v.index, v.detail
        )));
    }
    let cfg = KarnConfig::default();
    let mut state = KarnState::new();
    let mut records = Vec::new();
    for (i, a) in e.events().iter().enumerate() {
        if !a.is_sender_event() {
            continue;
        }
        let prev_high = state.highest_ack();
        if let Some(value) = karn_step(&mut state, a, &cfg)? {
            records.push(SampleRecord {
                event_index: i,
                value,
                prev_high,
                new_high: state.highest_ack(),
            });
        }
    }
    Ok(records)
}

/// Result of replaying one of the sample/RTT cross-checks.
#[derive(Clone, Debug, Default)]
pub struct ObsReport {
    pub samples_checked: usize,
    pub violations: Vec<String>,
}

impl ObsReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that every fresh sample upper-bounds the RTT of all packets between
/// the old and new highest ACK, and equals the RTT of at least one of them.
pub fn check_obs3(e: &Execution) -> Result<ObsReport> {
    let records = run_with_windows(e)?;
    let oracle = RttOracle::new(e)?;
    let mut report = ObsReport { samples_checked: records.len(), ..Default::default() };
    for rec in &records {
        let lo = rec.prev_high.max(1);
        let mut witness = false;
        for id in lo..rec.new_high {
            match oracle.rtt(id) {
                Some(v) if v > rec.value => {
                    report.violations.push(format!(
                        "sample {} at event {} is below rtt({id}) = {v}",
                        rec.value, rec.event_index
                    ));
                }
                Some(v) if v == rec.value => witness = true,
                _ => {}
            }
        }
        if !witness {
            report.violations.push(format!(
                "sample {} at event {} equals no rtt in [{lo}, {})",
                rec.value, rec.event_index, rec.new_high
            ));
        }
    }
    Ok(report)
}

/// On FIFO-ACK executions, every sample must equal the RTT of the packet that
/// was the highest ACK just before the sample. Non-FIFO executions are
/// rejected.
pub fn check_obs4(e: &Execution) -> Result<ObsReport> {
    if !is_fifo_ack(e)? {
        return Err(Error::precondition("check_obs4", "execution is not FIFO-acknowledgement"));
    }
    let records = run_with_windows(e)?;
    let oracle = RttOracle::new(e)?;
    let mut report = ObsReport { samples_checked: records.len(), ..Default::default() };
    for rec in &records {
        let expected = oracle.rtt(rec.prev_high);
        if expected != Some(rec.value) {
            report.violations.push(format!(
                "sample {} at event {} but rtt({}) = {:?}",
                rec.value, rec.event_index, rec.prev_high, expected
            ));
        }
    }
    Ok(report)
}
