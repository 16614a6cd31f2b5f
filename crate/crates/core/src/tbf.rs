//! A generalized token bucket filter and its composition law.
//!
//! The filter holds a byte-capped queue of timed datagrams and a token
//! bucket. Ticks refill the bucket at a fixed rate and age the queue;
//! forwarding consumes tokens equal to the payload size; queue-full arrivals
//! and expired datagrams are dropped. Reordering is expressed by letting any
//! queue index be forwarded, and nondeterministic loss by letting any index
//! be dropped.
//!
//! Two filters chained in series (the first forwards straight into the
//! second) can be simulated by a single filter whose queue cap and maximum
//! delay are the sums and whose bucket is the second filter's.
//! [`simulate_serial`] replays a script on the serial pair while driving the
//! composed filter through the matching steps and checks the states stay
//! equivalent (same parameters, same multiset of queued ids).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::gbn::Datagram;
use crate::numerics::ExtNat;

/// Filter parameters. Refill rate must not exceed the bucket cap and the
/// maximum delay must be at least one tick.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TbfParams {
    pub bucket_cap: u64,
    pub data_cap: u64,
    pub refill_rate: u64,
    pub max_delay: ExtNat,
}

impl TbfParams {
    pub fn new(bucket_cap: u64, data_cap: u64, refill_rate: u64, max_delay: ExtNat) -> Result<Self> {
        if bucket_cap == 0 || data_cap == 0 || refill_rate == 0 {
            return Err(Error::precondition("TbfParams", "caps and rate must be positive"));
        }
        if refill_rate > bucket_cap {
            return Err(Error::precondition(
                "TbfParams",
                format!("refill rate {refill_rate} exceeds bucket cap {bucket_cap}"),
            ));
        }
        if max_delay == ExtNat::Finite(0) {
            return Err(Error::precondition("TbfParams", "max delay must be at least 1"));
        }
        Ok(TbfParams { bucket_cap, data_cap, refill_rate, max_delay })
    }
}

/// A queued datagram with the ticks it may still wait before being dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimedDatagram {
    pub remaining: ExtNat,
    pub datagram: Datagram,
}

/// Filter state: the bucket level and the queue, newest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TbfState {
    pub params: TbfParams,
    pub bucket: u64,
    pub queue: Vec<TimedDatagram>,
}

impl TbfState {
    /// Fresh filter with an empty bucket and queue.
    pub fn new(params: TbfParams) -> Self {
        TbfState { params, bucket: 0, queue: Vec::new() }
    }

    /// Total payload bytes queued.
    pub fn queued_bytes(&self) -> u64 {
        self.queue.iter().map(|td| td.datagram.size()).sum()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.queue.iter().map(|td| td.datagram.id).collect()
    }

    /// One clock cycle: ages the queue, drops expirations, refills the
    /// bucket up to its cap.
    pub fn tick(&mut self) {
        self.queue.retain_mut(|td| {
            td.remaining = td.remaining.pred().expect("queued datagram with zero delay");
            td.remaining != ExtNat::Finite(0)
        });
        self.bucket = (self.bucket + self.params.refill_rate).min(self.params.bucket_cap);
    }

    /// Token wastage: the bucket loses one token, never going negative.
    pub fn decay(&mut self) {
        self.bucket = self.bucket.saturating_sub(1);
    }

    /// Accepts a datagram into the head of the queue if it fits the byte
    /// cap; otherwise the datagram is silently dropped and the state is
    /// unchanged. Returns whether it was enqueued.
    pub fn process(&mut self, dg: Datagram) -> bool {
        if self.queued_bytes() + dg.size() > self.params.data_cap {
            return false;
        }
        self.queue.insert(0, TimedDatagram { remaining: self.params.max_delay, datagram: dg });
        true
    }

    /// Removes the queue element at `index` (nondeterministic loss).
    pub fn drop_at(&mut self, index: usize) -> Result<TimedDatagram> {
        if index >= self.queue.len() {
            return Err(Error::precondition(
                "tbf.drop",
                format!("index {index} out of range (len {})", self.queue.len()),
            ));
        }
        Ok(self.queue.remove(index))
    }

    /// Forwards the queue element at `index`, paying its size in tokens.
    pub fn forward(&mut self, index: usize) -> Result<Datagram> {
        if index >= self.queue.len() {
            return Err(Error::precondition(
                "tbf.forward",
                format!("index {index} out of range (len {})", self.queue.len()),
            ));
        }
        let size = self.queue[index].datagram.size();
        if size > self.bucket {
            return Err(Error::precondition(
                "tbf.forward",
                format!("needs {size} tokens, bucket has {}", self.bucket),
            ));
        }
        self.bucket -= size;
        Ok(self.queue.remove(index).datagram)
    }

    /// Forwards the oldest queued datagram (FIFO order).
    pub fn forward_fifo(&mut self) -> Result<Datagram> {
        if self.queue.is_empty() {
            return Err(Error::precondition("tbf.forward", "queue empty"));
        }
        self.forward(self.queue.len() - 1)
    }

    /// Index of the oldest entry with the given id, if present.
    pub fn position_of(&self, id: u64) -> Option<usize> {
        self.queue.iter().rposition(|td| td.datagram.id == id)
    }

    /// State invariants: bucket within cap, queue within byte cap, no queued
    /// datagram already expired or older than the configured delay.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if self.bucket > self.params.bucket_cap {
            return Err(format!("bucket {} over cap {}", self.bucket, self.params.bucket_cap));
        }
        if self.queued_bytes() > self.params.data_cap {
            return Err(format!(
                "queued {} bytes over cap {}",
                self.queued_bytes(),
                self.params.data_cap
            ));
        }
        for td in &self.queue {
            if td.remaining == ExtNat::Finite(0) {
                return Err(format!("datagram {} queued but expired", td.datagram.id));
            }
            if td.remaining > self.params.max_delay {
                return Err(format!(
                    "datagram {} remaining {} exceeds max delay {}",
                    td.datagram.id, td.remaining, self.params.max_delay
                ));
            }
        }
        Ok(())
    }
}

fn id_counts(ids: &[u64]) -> BTreeMap<u64, usize> {
    let mut m = BTreeMap::new();
    for &id in ids {
        *m.entry(id).or_insert(0) += 1;
    }
    m
}

/// The single filter that simulates `first` feeding into `second`: bucket
/// and refill from the second, caps and delays summed, and the first
/// filter's entries aged by the second's maximum delay.
pub fn abstract_compose(first: &TbfState, second: &TbfState) -> TbfState {
    let params = TbfParams {
        bucket_cap: second.params.bucket_cap,
        data_cap: first.params.data_cap + second.params.data_cap,
        refill_rate: second.params.refill_rate,
        max_delay: first.params.max_delay + second.params.max_delay,
    };
    let mut queue: Vec<TimedDatagram> = first
        .queue
        .iter()
        .map(|td| TimedDatagram {
            remaining: td.remaining + second.params.max_delay,
            datagram: td.datagram.clone(),
        })
        .collect();
    queue.extend(second.queue.iter().cloned());
    TbfState { params, bucket: second.bucket, queue }
}

/// Equivalence up to queue permutation: identical parameters and the same
/// multiset of queued ids (payloads are ignored; ids are assumed unique per
/// association).
pub fn tbf_equiv(a: &TbfState, b: &TbfState) -> bool {
    a.params == b.params && id_counts(&a.ids()) == id_counts(&b.ids())
}

/// One step of a serial pair `first ▷ second`. A forward out of the first
/// filter is processed by the second in the same step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SerialStep {
    TickFirst,
    TickSecond,
    DecayFirst,
    DecaySecond,
    /// External arrival into the first filter.
    Process(Datagram),
    DropFirst(usize),
    DropSecond(usize),
    /// Internal hop: the first filter forwards index `i` into the second.
    ForwardFirst(usize),
    /// Composite output: the second filter forwards index `i` outward.
    ForwardSecond(usize),
}

/// Outcome of a serial-vs-composed replay.
#[derive(Clone, Debug)]
pub struct SerialReport {
    pub first: TbfState,
    pub second: TbfState,
    pub composed: TbfState,
    /// Whether the composed filter ended equivalent to the composition of
    /// the final serial states.
    pub equivalent: bool,
}

fn expiring_ids(t: &TbfState) -> Vec<u64> {
    t.queue
        .iter()
        .filter(|td| td.remaining == ExtNat::Finite(1))
        .map(|td| td.datagram.id)
        .collect()
}

fn drop_id_if_present(t: &mut TbfState, id: u64) {
    if let Some(i) = t.position_of(id) {
        let _ = t.drop_at(i);
    }
}

/// Replays `script` on the serial pair while driving the composed filter
/// through the matching steps, then reports whether the end states are
/// equivalent.
///
/// The mirrored steps: a tick of the second filter is a tick of the composed
/// one; a tick of the first is a no-op unless datagrams expire, in which case
/// the composed filter drops them; decay and drop map directly; the internal
/// hop is a no-op unless the second filter's queue is full and loses the
/// datagram, which the composed filter mirrors as a drop.
///
/// Scripts are rejected when a step's preconditions fail or when an arriving
/// datagram reuses an id still in flight (id lookups would be ambiguous).
pub fn simulate_serial(
    first: &TbfState,
    second: &TbfState,
    script: &[SerialStep],
) -> Result<SerialReport> {
    let mut s1 = first.clone();
    let mut s2 = second.clone();
    let mut composed = abstract_compose(first, second);

    let invalid = |index: usize, reason: String| Error::InvalidStep { index, reason };

    for (index, step) in script.iter().enumerate() {
        match step {
            SerialStep::TickFirst => {
                let expiring = expiring_ids(&s1);
                s1.tick();
                for id in expiring {
                    drop_id_if_present(&mut composed, id);
                }
            }
            SerialStep::TickSecond => {
                let expiring = expiring_ids(&s2);
                s2.tick();
                composed.tick();
                for id in expiring {
                    drop_id_if_present(&mut composed, id);
                }
            }
            SerialStep::DecayFirst => s1.decay(),
            SerialStep::DecaySecond => {
                s2.decay();
                composed.decay();
            }
            SerialStep::Process(dg) => {
                if s1.position_of(dg.id).is_some() || s2.position_of(dg.id).is_some() {
                    return Err(invalid(index, format!("id {} already in flight", dg.id)));
                }
                s1.process(dg.clone());
                composed.process(dg.clone());
            }
            SerialStep::DropFirst(i) => {
                let td = s1.drop_at(*i).map_err(|e| invalid(index, e.to_string()))?;
                drop_id_if_present(&mut composed, td.datagram.id);
            }
            SerialStep::DropSecond(i) => {
                let td = s2.drop_at(*i).map_err(|e| invalid(index, e.to_string()))?;
                drop_id_if_present(&mut composed, td.datagram.id);
            }
            SerialStep::ForwardFirst(i) => {
                let dg = s1.forward(*i).map_err(|e| invalid(index, e.to_string()))?;
                let id = dg.id;
                if !s2.process(dg) {
                    // Lost at the hop; mirror as a loss in the composed filter.
                    drop_id_if_present(&mut composed, id);
                }
            }
            SerialStep::ForwardSecond(i) => {
                let dg = s2.forward(*i).map_err(|e| invalid(index, e.to_string()))?;
                let j = composed
                    .position_of(dg.id)
                    .ok_or_else(|| invalid(index, format!("id {} missing in composition", dg.id)))?;
                composed.forward(j).map_err(|e| invalid(index, e.to_string()))?;
            }
        }
    }

    let equivalent = tbf_equiv(&composed, &abstract_compose(&s1, &s2));
    Ok(SerialReport { first: s1, second: s2, composed, equivalent })
}

/// Generates a random serial-composition instance: two filter states and a
/// script valid for their serial pair, deterministically in the seed.
///
/// Scripts mix ticks, decays, arrivals, drops, and forwards on both filters,
/// including age-outs in the first filter and hop losses into a full second
/// filter. The second filter's maximum delay is kept beyond the script
/// length: a composed filter inherits the pair's summed delay but ages on
/// every tick of the second filter, so a shorter delay could expire entries
/// the serial pair still holds, which is outside the composition law's
/// intended regime.
pub fn random_serial_instance(
    seed: u64,
    max_steps: usize,
) -> (TbfState, TbfState, Vec<SerialStep>) {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    let ttl2 = if rng.gen_bool(0.5) {
        ExtNat::Infinity
    } else {
        ExtNat::Finite(rng.gen_range(max_steps as u64 + 1..=max_steps as u64 + 10))
    };
    let ttl1 =
        if rng.gen_bool(0.5) { ExtNat::Infinity } else { ExtNat::Finite(rng.gen_range(1..=5)) };
    let cap1 = rng.gen_range(1..=6);
    let cap2 = rng.gen_range(1..=6);
    let first = TbfState::new(
        TbfParams::new(cap1, rng.gen_range(2..=8), rng.gen_range(1..=cap1), ttl1)
            .expect("generated params are valid"),
    );
    let second = TbfState::new(
        TbfParams::new(cap2, rng.gen_range(2..=8), rng.gen_range(1..=cap2), ttl2)
            .expect("generated params are valid"),
    );

    // Mirror the pair locally so only applicable steps are emitted.
    let mut s1 = first.clone();
    let mut s2 = second.clone();
    let mut script = Vec::new();
    let mut next_id = 1u64;
    for _ in 0..rng.gen_range(0..=max_steps) {
        let step = match rng.gen_range(0..8) {
            0 => SerialStep::TickFirst,
            1 => SerialStep::TickSecond,
            2 => SerialStep::DecayFirst,
            3 => SerialStep::DecaySecond,
            4 => {
                let dg = Datagram::new(next_id, "x".repeat(rng.gen_range(1..=2)));
                next_id += 1;
                // Arrivals that overflow the first filter are outside the
                // composition law (the composed filter may still have room).
                if s1.queued_bytes() + dg.size() > s1.params.data_cap {
                    continue;
                }
                SerialStep::Process(dg)
            }
            5 if !s1.is_empty() => SerialStep::DropFirst(rng.gen_range(0..s1.len())),
            6 if !s1.is_empty() => {
                let i = rng.gen_range(0..s1.len());
                if s1.queue[i].datagram.size() > s1.bucket {
                    continue;
                }
                SerialStep::ForwardFirst(i)
            }
            7 if !s2.is_empty() => {
                let i = rng.gen_range(0..s2.len());
                if s2.queue[i].datagram.size() > s2.bucket {
                    continue;
                }
                SerialStep::ForwardSecond(i)
            }
            _ => continue,
        };
        match &step {
            SerialStep::TickFirst => s1.tick(),
            SerialStep::TickSecond => s2.tick(),
            SerialStep::DecayFirst => s1.decay(),
            SerialStep::DecaySecond => s2.decay(),
            SerialStep::Process(d) => {
                s1.process(d.clone());
            }
            SerialStep::DropFirst(i) => {
                let _ = s1.drop_at(*i);
            }
            SerialStep::DropSecond(i) => {
                let _ = s2.drop_at(*i);
            }
            SerialStep::ForwardFirst(i) => {
                let d = s1.forward(*i).expect("generator tracked tokens");
                s2.process(d);
            }
            SerialStep::ForwardSecond(i) => {
                s2.forward(*i).expect("generator tracked tokens");
            }
        }
        script.push(step);
    }
    (first, second, script)
}

/// A recorded operation on a single filter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TbfOp {
    Tick,
    Decay,
    Process(Datagram),
    Drop(usize),
    Forward(usize),
}

/// Replays `ops` from `initial` and checks the token bound: between
/// consecutive ticks, the total bytes forwarded never exceed the bucket
/// level right after the opening tick.
pub fn token_bound_check(initial: &TbfState, ops: &[TbfOp]) -> Result<bool> {
    let mut t = initial.clone();
    let mut budget: Option<u64> = None; // None until the first tick
    let mut forwarded: u64 = 0;
    for (index, op) in ops.iter().enumerate() {
        match op {
            TbfOp::Tick => {
                t.tick();
                budget = Some(t.bucket);
                forwarded = 0;
            }
            TbfOp::Decay => t.decay(),
            TbfOp::Process(dg) => {
                t.process(dg.clone());
            }
            TbfOp::Drop(i) => {
                t.drop_at(*i).map_err(|e| Error::InvalidStep { index, reason: e.to_string() })?;
            }
            TbfOp::Forward(i) => {
                let dg =
                    t.forward(*i).map_err(|e| Error::InvalidStep { index, reason: e.to_string() })?;
                forwarded += dg.size();
                if let Some(b) = budget {
                    if forwarded > b {
                        return Ok(false);
                    }
                }
            }
        }
    }
    Ok(true)
}

/// A rendered trace row: the operation and the state after it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TbfTraceRow {
    pub step: usize,
    pub op: TbfOp,
    pub bucket: u64,
    pub queued_bytes: u64,
    pub ids: Vec<u64>,
}

/// Replays `ops` and captures one row per step.
pub fn trace_rows(initial: &TbfState, ops: &[TbfOp]) -> Result<Vec<TbfTraceRow>> {
    let mut t = initial.clone();
    let mut rows = Vec::with_capacity(ops.len());
    for (step, op) in ops.iter().enumerate() {
        match op {
            TbfOp::Tick => t.tick(),
            TbfOp::Decay => t.decay(),
            TbfOp::Process(dg) => {
                t.process(dg.clone());
            }
            TbfOp::Drop(i) => {
                t.drop_at(*i).map_err(|e| Error::InvalidStep { index: step, reason: e.to_string() })?;
            }
            TbfOp::Forward(i) => {
                t.forward(*i)
                    .map_err(|e| Error::InvalidStep { index: step, reason: e.to_string() })?;
            }
        }
        rows.push(TbfTraceRow {
            step,
            op: op.clone(),
            bucket: t.bucket,
            queued_bytes: t.queued_bytes(),
            ids: t.ids(),
        });
    }
    Ok(rows)
}

/// Writes trace rows as CSV `step,op,arg,bucket,sz_data,ids`.
pub fn write_trace_csv<W: Write>(rows: &[TbfTraceRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "op", "arg", "bucket", "sz_data", "ids"])?;
    for r in rows {
        let (op, arg) = match &r.op {
            TbfOp::Tick => ("tick", String::new()),
            TbfOp::Decay => ("decay", String::new()),
            TbfOp::Process(dg) => ("process", format!("{}:{}", dg.id, dg.payload)),
            TbfOp::Drop(i) => ("drop", i.to_string()),
            TbfOp::Forward(i) => ("forward", i.to_string()),
        };
        let ids = r.ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";");
        out.write_record([
            r.step.to_string(),
            op.to_string(),
            arg,
            r.bucket.to_string(),
            r.queued_bytes.to_string(),
            ids,
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads rows written by [`write_trace_csv`].
pub fn read_trace_csv<R: Read>(r: R) -> Result<Vec<TbfTraceRow>> {
    let mut reader = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 6 {
            return Err(Error::Parse(format!("trace row {n}: expected 6 columns")));
        }
        let parse_idx = |s: &str| {
            s.trim().parse::<usize>().map_err(|_| Error::Parse(format!("trace row {n}: bad index")))
        };
        let op = match record[1].trim() {
            "tick" => TbfOp::Tick,
            "decay" => TbfOp::Decay,
            "process" => {
                let (id, payload) = record[2]
                    .split_once(':')
                    .ok_or_else(|| Error::Parse(format!("trace row {n}: bad process arg")))?;
                TbfOp::Process(Datagram::new(
                    id.parse().map_err(|_| Error::Parse(format!("trace row {n}: bad id")))?,
                    payload,
                ))
            }
            "drop" => TbfOp::Drop(parse_idx(&record[2])?),
            "forward" => TbfOp::Forward(parse_idx(&record[2])?),
            other => return Err(Error::Parse(format!("trace row {n}: unknown op {other:?}"))),
        };
        let ids = if record[5].is_empty() {
            Vec::new()
        } else {
            record[5]
                .split(';')
                .map(|s| s.parse().map_err(|_| Error::Parse(format!("trace row {n}: bad ids"))))
                .collect::<Result<Vec<u64>>>()?
        };
        rows.push(TbfTraceRow {
            step: parse_idx(&record[0])?,
            op,
            bucket: record[3]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("trace row {n}: bad bucket")))?,
            queued_bytes: record[4]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("trace row {n}: bad size")))?,
            ids,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(bucket_cap: u64, data_cap: u64, rate: u64, ttl: ExtNat) -> TbfParams {
        TbfParams::new(bucket_cap, data_cap, rate, ttl).unwrap()
    }

    fn dg(id: u64, payload: &str) -> Datagram {
        Datagram::new(id, payload)
    }

    #[test]
    fn params_validated() {
        assert!(TbfParams::new(5, 10, 3, ExtNat::Infinity).is_ok());
        assert!(TbfParams::new(2, 10, 3, ExtNat::Infinity).is_err()); // rate > cap
        assert!(TbfParams::new(5, 10, 3, ExtNat::Finite(0)).is_err());
        assert!(TbfParams::new(0, 10, 3, ExtNat::Infinity).is_err());
    }

    #[test]
    fn tick_caps_bucket() {
        let mut t = TbfState::new(params(5, 10, 3, ExtNat::Infinity));
        t.tick();
        assert_eq!(t.bucket, 3);
        t.tick();
        assert_eq!(t.bucket, 5);
    }

    #[test]
    fn tick_expires_datagrams() {
        let mut t = TbfState::new(params(5, 10, 3, ExtNat::Finite(1)));
        assert!(t.process(dg(1, "a")));
        t.tick();
        assert!(t.is_empty());

        let mut t = TbfState::new(params(5, 10, 3, ExtNat::Infinity));
        t.process(dg(1, "a"));
        for _ in 0..100 {
            t.tick();
        }
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn decay_floor_and_refill() {
        let mut t = TbfState::new(params(4, 10, 4, ExtNat::Infinity));
        t.decay();
        assert_eq!(t.bucket, 0);
        t.tick();
        assert_eq!(t.bucket, 4);
        t.decay();
        assert_eq!(t.bucket, 3);
        t.tick();
        // Full refill after decay when rate equals cap.
        assert_eq!(t.bucket, 4);
    }

    #[test]
    fn process_respects_byte_cap() {
        let mut t = TbfState::new(params(5, 5, 3, ExtNat::Infinity));
        assert!(t.process(dg(1, "abc")));
        assert!(t.process(dg(2, "de")));
        assert_eq!(t.queued_bytes(), 5);
        let before = t.clone();
        // Refused arrivals leave the state bit-identical.
        assert!(!t.process(dg(3, "x")));
        assert_eq!(t, before);
        // Newest sits at the head.
        assert_eq!(t.ids(), vec![2, 1]);
    }

    #[test]
    fn drop_and_forward_indexing() {
        let mut t = TbfState::new(params(10, 10, 10, ExtNat::Infinity));
        for (id, p) in [(1, "a"), (2, "b"), (3, "c")] {
            t.process(dg(id, p));
        }
        assert_eq!(t.ids(), vec![3, 2, 1]);
        assert!(t.drop_at(3).is_err());
        t.tick(); // bucket 10
        let out = t.forward(1).unwrap();
        assert_eq!(out.id, 2);
        assert_eq!(t.ids(), vec![3, 1]);
        assert_eq!(t.bucket, 9);

        let mut single = TbfState::new(params(10, 10, 10, ExtNat::Infinity));
        single.process(dg(7, "z"));
        single.drop_at(0).unwrap();
        assert!(single.is_empty());
        assert_eq!(single.bucket, 0);
    }

    #[test]
    fn forward_needs_tokens() {
        let mut t = TbfState::new(params(3, 10, 3, ExtNat::Infinity));
        t.process(dg(1, "ACK"));
        assert!(t.forward(0).is_err());
        t.tick();
        assert_eq!(t.bucket, 3);
        let out = t.forward(0).unwrap();
        assert_eq!(out.payload, "ACK");
        assert_eq!(t.bucket, 0);

        // Two tokens cannot pay for three bytes.
        let mut t = TbfState::new(params(2, 10, 2, ExtNat::Infinity));
        t.process(dg(1, "abc"));
        t.tick();
        assert!(t.forward(0).is_err());
    }

    #[test]
    fn ops_preserve_params_and_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..300 {
            let p = params(
                rng.gen_range(1..=8),
                rng.gen_range(1..=12),
                1,
                if rng.gen_bool(0.5) { ExtNat::Infinity } else { ExtNat::Finite(rng.gen_range(1..=4)) },
            );
            let p = TbfParams::new(p.bucket_cap, p.data_cap, rng.gen_range(1..=p.bucket_cap), p.max_delay)
                .unwrap();
            let mut t = TbfState::new(p.clone());
            let mut next_id = 1;
            for _ in 0..60 {
                match rng.gen_range(0..5) {
                    0 => t.tick(),
                    1 => t.decay(),
                    2 => {
                        let len = rng.gen_range(0..=3);
                        t.process(dg(next_id, &"x".repeat(len)));
                        next_id += 1;
                    }
                    3 if !t.is_empty() => {
                        let i = rng.gen_range(0..t.len());
                        t.drop_at(i).unwrap();
                    }
                    _ if !t.is_empty() => {
                        let i = rng.gen_range(0..t.len());
                        let _ = t.forward(i);
                    }
                    _ => {}
                }
                assert_eq!(t.params, p);
                t.check_invariants().unwrap();
            }
        }
    }

    #[test]
    fn token_bound_examples() {
        let t = TbfState::new(params(5, 20, 5, ExtNat::Infinity));
        assert!(token_bound_check(&t, &[]).unwrap());

        // Bucket 5 after the tick pays for sizes 2 + 3 and nothing more.
        let ops = vec![
            TbfOp::Process(dg(1, "ab")),
            TbfOp::Process(dg(2, "cde")),
            TbfOp::Process(dg(3, "f")),
            TbfOp::Tick,
            TbfOp::Forward(2),
            TbfOp::Forward(1),
        ];
        assert!(token_bound_check(&t, &ops).unwrap());
        let mut t2 = t.clone();
        for op in &ops {
            match op {
                TbfOp::Tick => t2.tick(),
                TbfOp::Process(d) => {
                    t2.process(d.clone());
                }
                TbfOp::Forward(i) => {
                    t2.forward(*i).unwrap();
                }
                _ => unreachable!(),
            }
        }
        // No tokens left for the remaining one-byte datagram.
        assert!(t2.forward(0).is_err());
    }

    #[test]
    fn token_bound_random_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..2000 {
            let bucket_cap = rng.gen_range(1..=6);
            let p = params(bucket_cap, rng.gen_range(1..=10), rng.gen_range(1..=bucket_cap), ExtNat::Infinity);
            let mut t = TbfState::new(p);
            let mut ops = Vec::new();
            let mut next_id = 1;
            for _ in 0..rng.gen_range(0..40) {
                match rng.gen_range(0..6) {
                    0 => {
                        ops.push(TbfOp::Tick);
                        t.tick();
                    }
                    1 => {
                        ops.push(TbfOp::Decay);
                        t.decay();
                    }
                    2 | 3 => {
                        let d = dg(next_id, &"x".repeat(rng.gen_range(0..=3)));
                        next_id += 1;
                        ops.push(TbfOp::Process(d.clone()));
                        t.process(d);
                    }
                    4 if !t.is_empty() => {
                        let i = rng.gen_range(0..t.len());
                        if t.queue[i].datagram.size() <= t.bucket {
                            ops.push(TbfOp::Forward(i));
                            t.forward(i).unwrap();
                        }
                    }
                    5 if !t.is_empty() => {
                        let i = rng.gen_range(0..t.len());
                        ops.push(TbfOp::Drop(i));
                        t.drop_at(i).unwrap();
                    }
                    _ => {}
                }
            }
            let fresh = TbfState::new(t.params.clone());
            assert!(token_bound_check(&fresh, &ops).unwrap(), "case {case}");
        }
    }

    #[test]
    fn composition_of_empty_states() {
        let a = TbfState::new(params(4, 6, 2, ExtNat::Finite(3)));
        let b = TbfState::new(params(5, 7, 3, ExtNat::Finite(4)));
        let c = abstract_compose(&a, &b);
        assert_eq!(c.params.bucket_cap, 5);
        assert_eq!(c.params.data_cap, 13);
        assert_eq!(c.params.refill_rate, 3);
        assert_eq!(c.params.max_delay, ExtNat::Finite(7));
        assert!(c.is_empty());
        assert_eq!(c.bucket, 0);
    }

    #[test]
    fn composition_ages_first_queue() {
        let mut a = TbfState::new(params(4, 6, 2, ExtNat::Finite(5)));
        a.process(dg(1, "ab"));
        a.queue[0].remaining = ExtNat::Finite(2);
        let b = TbfState::new(params(5, 7, 3, ExtNat::Finite(3)));
        let c = abstract_compose(&a, &b);
        assert_eq!(c.queue[0].remaining, ExtNat::Finite(5));

        let inf = TbfState::new(params(4, 6, 2, ExtNat::Infinity));
        assert_eq!(abstract_compose(&inf, &b).params.max_delay, ExtNat::Infinity);
    }

    #[test]
    fn equivalence_is_permutation_of_ids() {
        let mut a = TbfState::new(params(5, 10, 3, ExtNat::Infinity));
        a.process(dg(1, "a"));
        a.process(dg(2, "b"));
        let mut b = a.clone();
        assert!(tbf_equiv(&a, &b));
        b.queue.swap(0, 1);
        assert!(tbf_equiv(&a, &b));
        b.process(dg(3, "c"));
        assert!(!tbf_equiv(&a, &b));
    }

    #[test]
    fn serial_empty_script() {
        let a = TbfState::new(params(4, 6, 2, ExtNat::Infinity));
        let b = TbfState::new(params(5, 7, 3, ExtNat::Infinity));
        let report = simulate_serial(&a, &b, &[]).unwrap();
        assert!(report.equivalent);
    }

    #[test]
    fn serial_happy_path_hop() {
        let a = TbfState::new(params(4, 6, 4, ExtNat::Infinity));
        let b = TbfState::new(params(5, 7, 5, ExtNat::Infinity));
        let script = vec![
            SerialStep::Process(dg(1, "abc")),
            SerialStep::TickFirst,
            SerialStep::ForwardFirst(0),
            SerialStep::TickSecond,
            SerialStep::ForwardSecond(0),
        ];
        let report = simulate_serial(&a, &b, &script).unwrap();
        assert!(report.equivalent);
        assert!(report.first.is_empty());
        assert!(report.second.is_empty());
        assert!(report.composed.is_empty());
    }

    #[test]
    fn serial_age_out_in_first() {
        let a = TbfState::new(params(4, 6, 2, ExtNat::Finite(2)));
        let b = TbfState::new(params(5, 7, 3, ExtNat::Finite(40)));
        let script = vec![
            SerialStep::Process(dg(1, "ab")),
            SerialStep::TickFirst,
            SerialStep::TickFirst, // datagram expires in the first filter
        ];
        let report = simulate_serial(&a, &b, &script).unwrap();
        assert!(report.equivalent);
        assert!(report.first.is_empty());
    }

    #[test]
    fn serial_hop_loss_when_second_full() {
        let a = TbfState::new(params(4, 6, 4, ExtNat::Infinity));
        let b = TbfState::new(params(5, 2, 5, ExtNat::Infinity));
        let script = vec![
            SerialStep::Process(dg(1, "ab")),
            SerialStep::Process(dg(2, "ab")),
            SerialStep::TickFirst,
            SerialStep::ForwardFirst(1), // id 1 hops into the second filter
            SerialStep::ForwardFirst(0), // id 2 is lost: second filter full
        ];
        let report = simulate_serial(&a, &b, &script).unwrap();
        assert!(report.equivalent);
        assert_eq!(report.second.ids(), vec![1]);
    }

    #[test]
    fn serial_rejects_bad_steps() {
        let a = TbfState::new(params(4, 6, 2, ExtNat::Infinity));
        let b = TbfState::new(params(5, 7, 3, ExtNat::Infinity));
        let err = simulate_serial(&a, &b, &[SerialStep::ForwardFirst(0)]).unwrap_err();
        assert!(matches!(err, Error::InvalidStep { index: 0, .. }));

        let script =
            vec![SerialStep::Process(dg(1, "a")), SerialStep::Process(dg(1, "b"))];
        let err = simulate_serial(&a, &b, &script).unwrap_err();
        assert!(matches!(err, Error::InvalidStep { index: 1, .. }));
    }

    #[test]
    fn serial_random_scripts_stay_equivalent() {
        let mut saw_age_out = false;
        let mut saw_decay = false;
        for seed in 0..500 {
            let (a, b, script) = random_serial_instance(seed, 30);
            saw_age_out |= a.params.max_delay.is_finite()
                && script.iter().any(|s| matches!(s, SerialStep::TickFirst));
            saw_decay |= script
                .iter()
                .any(|s| matches!(s, SerialStep::DecayFirst | SerialStep::DecaySecond));
            let report = simulate_serial(&a, &b, &script).unwrap();
            assert!(report.equivalent, "seed {seed}: {script:?}");
        }
        assert!(saw_age_out && saw_decay);
    }

    #[test]
    fn trace_csv_round_trip() {
        let t = TbfState::new(params(5, 10, 3, ExtNat::Finite(4)));
        let ops = vec![
            TbfOp::Process(dg(1, "ab")),
            TbfOp::Process(dg(2, "c:d")),
            TbfOp::Tick,
            TbfOp::Forward(1),
            TbfOp::Decay,
            TbfOp::Drop(0),
            TbfOp::Tick,
        ];
        let rows = trace_rows(&t, &ops).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_trace_csv(buf.as_slice()).unwrap(), rows);
    }
}
