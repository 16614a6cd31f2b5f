//! Runnable property checks over the whole toolkit.
//!
//! Each check replays one verified result as a randomized (or fixed)
//! experiment and reports every violation it finds. The CLI selftest runs
//! them at moderate sizes; the acceptance suite runs them at full size. All
//! checks are deterministic in their seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::execution::{gen_execution, is_fifo_ack, validate, ExecConfig};
use crate::gbn::SenderState;
use crate::karn::{check_obs3, check_obs4, karn_step, KarnConfig, KarnState};
use crate::numerics::{qpow, Rational};
use crate::rto::{
    delta_expr, detect_timeouts, gen_spike_steady, gen_uniform_steady, limit_delta, rto_run,
    rto_step, rttvar_closed_bound, srtt_bounds, RtoParams, RtoState, SteadyBand,
};
use crate::system::{
    build_best_case, build_overtx, efficiency, predicted_overtx_eff, replay, simplify,
    simplified_single_step,
};
use crate::tbf::{random_serial_instance, simulate_serial, token_bound_check, TbfOp, TbfParams, TbfState};

/// Outcome of one check: how many trials ran and what failed.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub trials: u64,
    pub failures: Vec<String>,
}

impl CheckOutcome {
    fn new(name: &'static str) -> Self {
        CheckOutcome { name, trials: 0, failures: Vec::new() }
    }

    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }

    fn fail(&mut self, msg: String) {
        // Cap retained messages so a broken invariant cannot flood memory.
        if self.failures.len() < 32 {
            self.failures.push(msg);
        }
    }
}

fn mixed_exec_config(seed: u64) -> ExecConfig {
    ExecConfig {
        n_packets: 1 + seed % 16,
        loss_rate: Rational::new(1, 6),
        reorder_window: seed % 4,
        allow_ack_loss: seed % 2 == 0,
        fifo_acks: false,
        max_retransmissions: seed % 5,
        dup_rate: if seed % 7 == 0 { Rational::new(1, 12) } else { Rational::zero() },
        seed,
    }
}

/// Generated executions are valid; FIFO-flagged ones are FIFO.
pub fn check_generator_soundness(trials: u64, base_seed: u64) -> CheckOutcome {
    let mut out = CheckOutcome::new("generator-soundness");
    for k in 0..trials {
        let seed = base_seed + k;
        let mut cfg = mixed_exec_config(seed);
        cfg.fifo_acks = k % 2 == 0;
        let e = gen_execution(&cfg);
        out.trials += 1;
        let report = validate(&e);
        if !report.is_ok() {
            out.fail(format!("seed {seed}: invalid: {:?}", report.violations[0]));
            continue;
        }
        if cfg.fifo_acks && !is_fifo_ack(&e).unwrap_or(false) {
            out.fail(format!("seed {seed}: expected FIFO-ack execution"));
        }
    }
    out
}

/// Monitor invariants hold after every step and every sample upper-bounds
/// (and realizes) an RTT in its window, on mixed loss/reorder executions.
pub fn check_karn_mixed(trials: u64, base_seed: u64) -> CheckOutcome {
    let mut out = CheckOutcome::new("karn-mixed-observations");
    for k in 0..trials {
        let seed = base_seed + k;
        let e = gen_execution(&mixed_exec_config(seed));
        out.trials += 1;

        let mut state = KarnState::new();
        let mut high = 0;
        let mut stepped_ok = true;
        for a in e.events().iter().filter(|a| a.is_sender_event()) {
            if karn_step(&mut state, a, &KarnConfig::default()).is_err() {
                out.fail(format!("seed {seed}: monitor step rejected a sender event"));
                stepped_ok = false;
                break;
            }
            if let Err(m) = state.check_invariants() {
                out.fail(format!("seed {seed}: {m}"));
                stepped_ok = false;
                break;
            }
            if state.highest_ack() < high {
                out.fail(format!("seed {seed}: highest ACK regressed"));
                stepped_ok = false;
                break;
            }
            high = state.highest_ack();
        }
        if !stepped_ok {
            continue;
        }
        match check_obs3(&e) {
            Ok(report) if report.is_ok() => {}
            Ok(report) => out.fail(format!("seed {seed}: {}", report.violations[0])),
            Err(err) => out.fail(format!("seed {seed}: {err}")),
        }
    }
    out
}

/// On FIFO executions every sample equals the RTT of the previous highest
/// ACK.
pub fn check_karn_fifo(trials: u64, base_seed: u64) -> CheckOutcome {
    let mut out = CheckOutcome::new("karn-fifo-samples");
    for k in 0..trials {
        let seed = base_seed + k;
        let mut cfg = mixed_exec_config(seed);
        cfg.fifo_acks = true;
        cfg.dup_rate = Rational::zero();
        let e = gen_execution(&cfg);
        out.trials += 1;
        match check_obs4(&e) {
            Ok(report) if report.is_ok() => {}
            Ok(report) => out.fail(format!("seed {seed}: {}", report.violations[0])),
            Err(err) => out.fail(format!("seed {seed}: {err}")),
        }
    }
    out
}

fn random_band(rng: &mut ChaCha8Rng) -> SteadyBand {
    let center = Rational::new(rng.gen_range(2..=120), rng.gen_range(1..=4));
    // Radius zero is an interesting degenerate case; keep it common.
    let radius = if rng.gen_bool(0.25) {
        Rational::zero()
    } else {
        let c_num = rng.gen_range(1..=40);
        Rational::new(c_num, rng.gen_range(1..=4)).min(&center / &Rational::from_integer(2))
    };
    SteadyBand::new(center, radius).expect("generated band is positive")
}

fn random_params(rng: &mut ChaCha8Rng) -> RtoParams {
    let qa = rng.gen_range(2..=12);
    let qb = rng.gen_range(2..=12);
    RtoParams::new(
        Rational::new(rng.gen_range(1..qa), qa),
        Rational::new(rng.gen_range(1..qb), qb),
        Rational::new(1, rng.gen_range(10..=1000)),
    )
    .expect("generated weights are in range")
}

fn seed_state(srtt: Rational, rttvar: Rational, p: &RtoParams) -> RtoState {
    let rto = &srtt + &p.granularity.clone().max(Rational::from_integer(4) * &rttvar);
    RtoState { index: 1, srtt, rttvar, rto }
}

/// In-band sample runs stay inside the smoothed-RTT envelope, and the
/// deviation term stays below its closed-form bound.
pub fn check_steady_bounds(trials: u64, base_seed: u64) -> CheckOutcome {
    let mut out = CheckOutcome::new("steady-state-bounds");
    for k in 0..trials {
        let seed = base_seed + k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(&mut rng);
        let band = random_band(&mut rng);
        let srtt_prev = Rational::new(rng.gen_range(1..=300), rng.gen_range(1..=4));
        let rttvar_prev = Rational::new(rng.gen_range(0..=40), rng.gen_range(1..=4));
        let n: u64 = rng.gen_range(0..=50);
        let samples = gen_uniform_steady(&band, n as usize + 1, 16, seed ^ 0x5eed);

        out.trials += 1;
        let mut state = seed_state(srtt_prev.clone(), rttvar_prev.clone(), &p);
        let mut max_gap = Rational::zero();
        let mut ok = true;
        for s in &samples {
            let gap = (s - &state.srtt).abs();
            if gap > max_gap {
                max_gap = gap;
            }
            match rto_step(&state, s, &p) {
                Ok(next) => state = next,
                Err(err) => {
                    out.fail(format!("seed {seed}: {err}"));
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }

        let (lo, hi) = srtt_bounds(&srtt_prev, &band, &p.alpha, n).expect("valid inputs");
        if state.srtt < lo || state.srtt > hi {
            out.fail(format!(
                "seed {seed}: srtt {} escaped [{lo}, {hi}] (alpha {}, n {n})",
                state.srtt, p.alpha
            ));
        }

        // Any delta dominating every observed |sample - srtt| gives a valid
        // deviation bound.
        let delta = if max_gap.is_positive() { max_gap } else { Rational::one() };
        let bound = rttvar_closed_bound(&rttvar_prev, &delta, &p.beta, n).expect("valid inputs");
        if state.rttvar > bound {
            out.fail(format!(
                "seed {seed}: rttvar {} above closed bound {bound} (delta {delta})",
                state.rttvar
            ));
        }
    }
    out
}

/// The witness from [`limit_delta`] really does push powers below the
/// threshold: `alpha^(delta+1) < eps`, checked exactly.
pub fn check_limit_delta(trials: u64, base_seed: u64) -> CheckOutcome {
    let mut out = CheckOutcome::new("limit-delta-witness");
    for k in 0..trials {
        let seed = base_seed + k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = rng.gen_range(2..=60);
        let alpha = Rational::new(rng.gen_range(1..q), q);
        let eps = Rational::new(rng.gen_range(1..=8), rng.gen_range(1..=60));
        out.trials += 1;
        match limit_delta(&alpha, &eps) {
            Ok(delta) => {
                if !(qpow(&alpha, delta + 1) < eps) {
                    out.fail(format!("seed {seed}: alpha {alpha}, eps {eps}, delta {delta}"));
                }
            }
            Err(err) => out.fail(format!("seed {seed}: {err}")),
        }
    }
    out
}

/// Parameters of the pathological periodic-spike scenario.
pub fn spike_scenario_band() -> (SteadyBand, u64) {
    (SteadyBand::new(Rational::new(135, 2), Rational::new(15, 2)).expect("static band"), 100)
}

/// Steps after which the spike/non-spike timeout classification is stable in
/// the scenario below. Derived by running the chain once over the full
/// horizon: the classification is already exact from the first sample, so no
/// warm-up is needed.
pub const SPIKE_WARMUP: usize = 0;

/// The periodic-spike scenario: samples stay inside the band, yet every
/// spike (and nothing else) overshoots the previous timeout, forever.
pub fn check_spike_scenario(n: usize) -> CheckOutcome {
    let mut out = CheckOutcome::new("spike-scenario");
    out.trials = 1;
    let (band, period) = spike_scenario_band();
    let p = RtoParams::rfc_default();
    let samples = gen_spike_steady(&band, period, n).expect("valid period");
    if !crate::rto::steady_check(&samples, &band) {
        out.fail("spike samples escaped the band".into());
        return out;
    }
    let states = match rto_run(&samples, &p) {
        Ok(s) => s,
        Err(err) => {
            out.fail(format!("{err}"));
            return out;
        }
    };
    let flagged = detect_timeouts(&samples, &states).expect("lengths match");
    let flagged: std::collections::BTreeSet<usize> = flagged.into_iter().collect();

    let mut spikes = 0;
    for i in SPIKE_WARMUP.max(1)..n {
        let is_spike = (i as u64 + 1) % period == 0;
        if is_spike {
            spikes += 1;
        }
        if is_spike != flagged.contains(&i) {
            out.fail(format!(
                "index {i}: expected {} but detector said {}",
                if is_spike { "timeout" } else { "no timeout" },
                flagged.contains(&i)
            ));
        }
    }
    if spikes < 9 {
        out.fail(format!("only {spikes} spikes in horizon {n}"));
    }
    out
}

/// Sender window invariants and monotonicity over random step sequences.
pub fn check_sender_invariants(trials: u64, base_seed: u64) -> CheckOutcome {
    let mut out = CheckOutcome::new("sender-invariants");
    for k in 0..trials {
        let seed = base_seed + k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = if rng.gen_bool(0.5) {
            SenderState::new(rng.gen_range(1..=10))
        } else {
            SenderState::after_first_send(rng.gen_range(1..=10))
        };
        out.trials += 1;
        let steps = rng.gen_range(0..=200);
        for _ in 0..steps {
            let prev = s.clone();
            match rng.gen_range(0..4) {
                0 | 1 => {
                    let _ = s.adv_cur("p");
                }
                2 => {
                    let _ = s.timeout();
                }
                _ => {
                    let hi = s.highest_sent.unwrap_or(0);
                    s.rcv_ack(rng.gen_range(1..=hi + 3));
                }
            }
            if let Err(m) = s.check_invariants() {
                out.fail(format!("seed {seed}: {m}"));
                break;
            }
            if s.highest_ack < prev.highest_ack
                || s.highest_sent.unwrap_or(0) < prev.highest_sent.unwrap_or(0)
            {
                out.fail(format!("seed {seed}: monotonicity broken"));
                break;
            }
        }
    }
    out
}

/// Bytes forwarded between consecutive ticks never exceed the bucket level
/// right after the opening tick, on random operation traces.
pub fn check_token_bound(trials: u64, base_seed: u64) -> CheckOutcome {
    let mut out = CheckOutcome::new("tbf-token-bound");
    for k in 0..trials {
        let seed = base_seed + k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bucket_cap = rng.gen_range(1..=6);
        let params = TbfParams::new(
            bucket_cap,
            rng.gen_range(1..=10),
            rng.gen_range(1..=bucket_cap),
            crate::numerics::ExtNat::Infinity,
        )
        .expect("generated params are valid");
        let initial = TbfState::new(params);
        let mut t = initial.clone();
        let mut ops = Vec::new();
        let mut next_id = 1u64;
        for _ in 0..rng.gen_range(0..=50) {
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
                    let dg = crate::gbn::Datagram::new(next_id, "x".repeat(rng.gen_range(0..=3)));
                    next_id += 1;
                    ops.push(TbfOp::Process(dg.clone()));
                    t.process(dg);
                }
                4 if !t.is_empty() => {
                    let i = rng.gen_range(0..t.len());
                    if t.queue[i].datagram.size() <= t.bucket {
                        ops.push(TbfOp::Forward(i));
                        t.forward(i).expect("tracked tokens");
                    }
                }
                5 if !t.is_empty() => {
                    let i = rng.gen_range(0..t.len());
                    ops.push(TbfOp::Drop(i));
                    t.drop_at(i).expect("tracked length");
                }
                _ => {}
            }
        }
        out.trials += 1;
        match token_bound_check(&initial, &ops) {
            Ok(true) => {}
            Ok(false) => out.fail(format!("seed {seed}: bound violated")),
            Err(err) => out.fail(format!("seed {seed}: {err}")),
        }
    }
    out
}

/// Serial pairs stay equivalent to their composed filter across random
/// scripts (age-outs, decays, hop losses included).
pub fn check_composition(trials: u64, max_steps: usize, base_seed: u64) -> CheckOutcome {
    let mut out = CheckOutcome::new("tbf-composition");
    for k in 0..trials {
        let seed = base_seed + k;
        let (first, second, script) = random_serial_instance(seed, max_steps);
        out.trials += 1;
        match simulate_serial(&first, &second, &script) {
            Ok(report) if report.equivalent => {}
            Ok(_) => out.fail(format!("seed {seed}: composition diverged ({script:?})")),
            Err(err) => out.fail(format!("seed {seed}: {err}")),
        }
    }
    out
}

/// Lossless windows achieve efficiency exactly one, for single and repeated
/// windows.
pub fn check_best_case() -> CheckOutcome {
    let mut out = CheckOutcome::new("gbn-best-case");
    for window in [1u64, 2, 5, 10] {
        for windows in [1u64, 5] {
            out.trials += 1;
            let (initial, script) = match build_best_case(window, windows) {
                Ok(v) => v,
                Err(err) => {
                    out.fail(format!("window {window}: {err}"));
                    continue;
                }
            };
            match replay(&initial, &script).and_then(|t| efficiency(&t)) {
                Ok(eff) if eff == Rational::one() => {}
                Ok(eff) => out.fail(format!("window {window} x{windows}: efficiency {eff}")),
                Err(err) => out.fail(format!("window {window} x{windows}: {err}")),
            }
        }
    }
    out
}

/// The over-transmission parameter grid exercised by the closed-form
/// efficiency and warm-up checks.
pub fn overtx_grid() -> [(u64, u64, u64, u64); 3] {
    // (window, rate, refill, data_cap)
    [(200, 10, 1, 100), (500, 20, 4, 180), (1000, 50, 10, 450)]
}

/// Simulated over-transmission efficiency equals the closed form exactly.
pub fn check_overtx_grid() -> CheckOutcome {
    let mut out = CheckOutcome::new("gbn-over-transmission");
    for (window, rate, refill, data_cap) in overtx_grid() {
        out.trials += 1;
        let predicted = match predicted_overtx_eff(rate, refill, data_cap, window) {
            Ok(p) => p,
            Err(err) => {
                out.fail(format!("window {window}: {err}"));
                continue;
            }
        };
        let scenario = match build_overtx(window, rate, refill, data_cap) {
            Ok(s) => s,
            Err(err) => {
                out.fail(format!("window {window}: {err}"));
                continue;
            }
        };
        match replay(&scenario.initial, &scenario.script).and_then(|t| {
            let eff = efficiency(&t)?;
            Ok((eff, t))
        }) {
            Ok((eff, trace)) => {
                if eff != predicted {
                    out.fail(format!("window {window}: simulated {eff} != predicted {predicted}"));
                }
                if trace.packets_received_by_receiver != window {
                    out.fail(format!(
                        "window {window}: receiver saw {} packets",
                        trace.packets_received_by_receiver
                    ));
                }
            }
            Err(err) => out.fail(format!("window {window}: {err}")),
        }
    }
    out
}

/// Mid-replay warm-up claims: after the fill bursts the forward queue is the
/// descending id run just below the cursor, the receiver's next ACK grew by
/// refill per burst, and the cursor grew by rate per burst. The reduced
/// model, stepped independently, must agree with the projected engine state
/// after every burst.
pub fn check_warmup_lemma() -> CheckOutcome {
    let mut out = CheckOutcome::new("gbn-warmup");
    for (window, rate, refill, data_cap) in overtx_grid() {
        out.trials += 1;
        let scenario = match build_overtx(window, rate, refill, data_cap) {
            Ok(s) => s,
            Err(err) => {
                out.fail(format!("window {window}: {err}"));
                continue;
            }
        };
        let bursts = scenario.warmup_bursts;
        let per_burst = (rate + 1 + refill) as usize;

        // Projection commutes with the reduced model at every burst.
        let mut sm = simplify(&scenario.initial);
        let mut agreed = true;
        for burst in 1..=bursts {
            sm = match simplified_single_step(&sm, rate, refill) {
                Ok(next) => next,
                Err(err) => {
                    out.fail(format!("window {window} burst {burst}: {err}"));
                    agreed = false;
                    break;
                }
            };
            let cut = per_burst * burst as usize;
            let trace = replay(&scenario.initial, &scenario.script[..cut])
                .expect("warm-up prefix replays");
            if simplify(&trace.final_state) != sm {
                out.fail(format!("window {window} burst {burst}: projection disagrees"));
                agreed = false;
                break;
            }
        }
        if !agreed {
            continue;
        }

        // Shape of the state after the full warm-up.
        let trace = replay(&scenario.initial, &scenario.script[..scenario.warmup_cut])
            .expect("warm-up prefix replays");
        let sm = simplify(&trace.final_state);
        let top = 1 + rate * bursts - 1;
        let expected: Vec<u64> = (0..(rate - refill) * bursts).map(|i| top - i).collect();
        if sm.chan != expected {
            out.fail(format!("window {window}: queue is not the descending run"));
        }
        if sm.ack != 1 + refill * bursts {
            out.fail(format!("window {window}: ack {} != {}", sm.ack, 1 + refill * bursts));
        }
        if sm.next_seq != 1 + rate * bursts {
            out.fail(format!("window {window}: cursor {} != {}", sm.next_seq, 1 + rate * bursts));
        }
    }
    out
}

/// Long in-band runs pin the timeout into a band around the samples:
/// at least `c - r + 4*rttvar - (c-r)*eps`, and at most the exact
/// envelope-derived ceiling `H + 4*B`, which converges to `c + 9r` up to
/// multiples of `eps`.
pub fn check_asymptotic_band(trials: u64, base_seed: u64) -> CheckOutcome {
    let mut out = CheckOutcome::new("asymptotic-rto-band");
    let eps = Rational::new(1, 1000);
    for k in 0..trials {
        let seed = base_seed + k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(&mut rng);
        let band = random_band(&mut rng);
        let srtt_prev = Rational::new(rng.gen_range(1..=300), rng.gen_range(1..=4));
        let rttvar_prev = Rational::new(rng.gen_range(0..=40), rng.gen_range(1..=4));

        let one = Rational::one();
        let da = limit_delta(&(&one - &p.alpha), &eps).expect("decay factor in range");
        let db = limit_delta(&(&one - &p.beta), &eps).expect("decay factor in range");
        let n = da.max(db) + 1;
        out.trials += 1;

        // Two windows of n+1 in-band samples: the first washes out the
        // arbitrary starting point, the second is measured.
        let samples = gen_uniform_steady(&band, 2 * (n as usize + 1), 16, seed ^ 0xa5);
        let mut state = seed_state(srtt_prev.clone(), rttvar_prev.clone(), &p);
        for s in &samples[..n as usize + 1] {
            state = rto_step(&state, s, &p).expect("in-band samples are positive");
        }
        let mid = state.clone();
        let mut max_gap = Rational::zero();
        for s in &samples[n as usize + 1..] {
            let gap = (s - &state.srtt).abs();
            if gap > max_gap {
                max_gap = gap;
            }
            state = rto_step(&state, s, &p).expect("in-band samples are positive");
        }

        // Observed mid-window deviations are pinned near the band diameter.
        let two_r = Rational::from_integer(2) * &band.radius;
        let gap_ceiling = &two_r + &(&eps * &(&band.lo() + &srtt_prev));
        if max_gap > gap_ceiling {
            out.fail(format!("seed {seed}: deviation {max_gap} above ceiling {gap_ceiling}"));
            continue;
        }

        // Lower edge, when the deviation term dominates the granularity.
        let four_var = Rational::from_integer(4) * &state.rttvar;
        if four_var > p.granularity {
            let floor = &band.lo() + &four_var - &(&eps * &band.lo());
            if state.rto < floor {
                out.fail(format!("seed {seed}: rto {} below floor {floor}", state.rto));
            }
        }

        // Upper edge from the two envelopes, exact.
        let (_, hi) = srtt_bounds(&mid.srtt, &band, &p.alpha, n).expect("valid inputs");
        let delta = if max_gap.is_positive() { max_gap } else { Rational::one() };
        let var_bound = rttvar_closed_bound(&mid.rttvar, &delta, &p.beta, n).expect("valid inputs");
        let ceiling = &hi + &p.granularity.clone().max(Rational::from_integer(4) * &var_bound);
        if state.rto > ceiling {
            out.fail(format!("seed {seed}: rto {} above ceiling {ceiling}", state.rto));
            continue;
        }
        // And the ceiling itself converges to c + 9r, up to eps-terms.
        let nine_r = Rational::from_integer(9) * &band.radius;
        let slack = &eps
            * &(&mid.srtt
                + &(Rational::from_integer(4) * &(&mid.rttvar + &band.lo() + &srtt_prev)));
        let limit = &band.center + &nine_r + &slack + &p.granularity;
        if ceiling > limit {
            out.fail(format!("seed {seed}: ceiling {ceiling} beyond limit {limit}"));
        }
    }
    out
}
