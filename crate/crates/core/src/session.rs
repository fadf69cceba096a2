//! Three-node protocol session on a virtual clock.
//!
//! Alice and Bob commit their choices for each round before the Center Node
//! measures. The Center announces heralded rounds over a reliable, ordered
//! classical channel with constant latency, and periodically flushes: every
//! unannounced round below the flush mark failed. End Nodes keep heralded
//! rounds, exchange bases for them, and reveal bits for a hashed subset of
//! the sifted rounds. After the Center stops, each End Node publishes its
//! basis and intensity for every round so that per-cell gains can be
//! counted.
//!
//! Every message is public. The final report is computed from the transcript
//! alone, so an event log replays to the same report.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoy::DecoyResult;
use crate::forward::ScenarioConfig;
use crate::model::{Basis, BsmOutcome, ByIntensity, Cell, GainTable, Intensity, ModelError};
use crate::pipeline::{analyze_table, PipelineOptions};
use crate::pulse_sim::{Choice, RoundRng, SimEngine};
use crate::table_io::fmt_sci;

const CHUNK: u64 = 1 << 16;
/// Codes per published choice batch.
const BATCH: usize = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("rounds must be >= 1")]
    Rounds,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("protocol violation at {node} (t = {time_ps} ps): {detail}")]
    Protocol { node: NodeId, time_ps: u64, detail: String },
    #[error("event log line {line}: {msg}")]
    Log { line: usize, msg: String },
    #[error("internal: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeId {
    Alice,
    Bob,
    Center,
}

impl NodeId {
    pub fn label(self) -> &'static str {
        match self {
            NodeId::Alice => "alice",
            NodeId::Bob => "bob",
            NodeId::Center => "center",
        }
    }

    pub fn parse(s: &str) -> Option<NodeId> {
        match s {
            "alice" => Some(NodeId::Alice),
            "bob" => Some(NodeId::Bob),
            "center" => Some(NodeId::Center),
            _ => None,
        }
    }

    fn peer(self) -> NodeId {
        match self {
            NodeId::Alice => NodeId::Bob,
            NodeId::Bob => NodeId::Alice,
            NodeId::Center => NodeId::Center,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Control {
    Start { rounds: u64 },
    /// Every round below `upto` without an announcement failed.
    Flush { upto: u64 },
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Message {
    BsmAnnouncement { round_index: u64, outcome: BsmOutcome },
    BasisReveal { round_index: u64, basis: Basis },
    SubsetReveal { round_index: u64, bit: u8 },
    /// Basis and intensity of rounds `start..start + codes.len()`, coded `3 * basis + intensity`.
    ChoiceBatch { start: u64, codes: Vec<u8> },
    SessionControl(Control),
}

fn outcome_label(o: BsmOutcome) -> &'static str {
    match o {
        BsmOutcome::PsiMinus => "psi-",
        BsmOutcome::NoDetection => "none",
    }
}

fn choice_code(c: Choice) -> u8 {
    (c.basis.index() * 3 + c.intensity.index()) as u8
}

fn decode(code: u8) -> (Basis, Intensity) {
    let b = if code / 3 == 0 { Basis::Z } else { Basis::X };
    (b, Intensity::from_index((code % 3) as usize))
}

impl Message {
    pub fn variant(&self) -> &'static str {
        match self {
            Message::BsmAnnouncement { .. } => "BsmAnnouncement",
            Message::BasisReveal { .. } => "BasisReveal",
            Message::SubsetReveal { .. } => "SubsetReveal",
            Message::ChoiceBatch { .. } => "ChoiceBatch",
            Message::SessionControl(_) => "SessionControl",
        }
    }

    pub fn payload(&self) -> String {
        match self {
            Message::BsmAnnouncement { round_index, outcome } => {
                format!("round={round_index} outcome={}", outcome_label(*outcome))
            }
            Message::BasisReveal { round_index, basis } => format!("round={round_index} basis={basis}"),
            Message::SubsetReveal { round_index, bit } => format!("round={round_index} bit={bit}"),
            Message::ChoiceBatch { start, codes } => {
                let s: String = codes.iter().map(|&c| char::from(b'0' + c)).collect();
                format!("start={start} codes={s}")
            }
            Message::SessionControl(Control::Start { rounds }) => format!("start rounds={rounds}"),
            Message::SessionControl(Control::Flush { upto }) => format!("flush upto={upto}"),
            Message::SessionControl(Control::Stop) => "stop".to_string(),
        }
    }

    pub fn parse(variant: &str, payload: &str) -> Result<Message, String> {
        let mut words = payload.split(' ');
        let mut fields = BTreeMap::new();
        let mut head = None;
        for w in words.by_ref() {
            match w.split_once('=') {
                Some((k, v)) => {
                    fields.insert(k, v);
                }
                None => head = Some(w),
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| format!("missing field {k:?}"));
        let num = |k: &str| get(k)?.parse::<u64>().map_err(|e| format!("{k}: {e}"));
        Ok(match variant {
            "BsmAnnouncement" => Message::BsmAnnouncement {
                round_index: num("round")?,
                outcome: match get("outcome")? {
                    "psi-" => BsmOutcome::PsiMinus,
                    "none" => BsmOutcome::NoDetection,
                    o => return Err(format!("unknown outcome {o:?}")),
                },
            },
            "BasisReveal" => Message::BasisReveal {
                round_index: num("round")?,
                basis: Basis::parse(get("basis")?).ok_or("unknown basis")?,
            },
            "SubsetReveal" => {
                let bit = num("bit")?;
                if bit > 1 {
                    return Err(format!("bit {bit} is not 0 or 1"));
                }
                Message::SubsetReveal {
                    round_index: num("round")?,
                    bit: bit as u8,
                }
            }
            "ChoiceBatch" => {
                let codes = get("codes")?
                    .bytes()
                    .map(|c| match c {
                        b'0'..=b'5' => Ok(c - b'0'),
                        _ => Err(format!("bad choice code {:?}", char::from(c))),
                    })
                    .collect::<Result<Vec<u8>, String>>()?;
                Message::ChoiceBatch {
                    start: num("start")?,
                    codes,
                }
            }
            "SessionControl" => Message::SessionControl(match head {
                Some("start") => Control::Start { rounds: num("rounds")? },
                Some("flush") => Control::Flush { upto: num("upto")? },
                Some("stop") => Control::Stop,
                other => return Err(format!("unknown control {other:?}")),
            }),
            v => return Err(format!("unknown variant {v:?}")),
        })
    }
}

/// One sent message, as it appears in the event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub time_ps: u64,
    pub sender: NodeId,
    pub message: Message,
}

impl Event {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.time_ps,
            self.sender,
            self.message.variant(),
            self.message.payload()
        )
    }

    pub fn parse_line(line: &str) -> Result<Event, String> {
        let f: Vec<&str> = line.splitn(4, '\t').collect();
        if f.len() != 4 {
            return Err(format!("expected 4 tab-separated fields, found {}", f.len()));
        }
        Ok(Event {
            time_ps: f[0].parse().map_err(|e| format!("time: {e}"))?,
            sender: NodeId::parse(f[1]).ok_or_else(|| format!("unknown sender {:?}", f[1]))?,
            message: Message::parse(f[2], f[3])?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// One-way latency of the classical channel, seconds.
    pub latency: f64,
    /// Fraction of sifted X rounds whose bits are revealed.
    pub reveal_x: f64,
    /// Fraction of sifted Z rounds whose bits are revealed.
    pub reveal_z: f64,
    pub record_log: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            latency: 1e-4,
            reveal_x: 1.0,
            reveal_z: 0.1,
            record_log: false,
        }
    }
}

/// Deterministic subset selection shared by both End Nodes.
fn reveal_selected(seed: u64, round_index: u64, fraction: f64) -> bool {
    let mut z = seed ^ round_index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ((z >> 11) as f64) / ((1u64 << 53) as f64) < fraction
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiftedEntry {
    pub round_index: u64,
    pub basis: Basis,
    /// Own bit; `None` in a store rebuilt from the public transcript unless revealed.
    pub bit: Option<u8>,
    pub intensity: Intensity,
}

type CellCounts = [[[u64; 3]; 3]; 2];

/// Rounds one End Node kept after basis reconciliation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiftedStore {
    pub node: NodeId,
    /// Ascending by round index.
    pub entries: Vec<SiftedEntry>,
    /// Same-basis rounds sent, `[basis][alice intensity][bob intensity]`.
    pub sent: CellCounts,
    /// Sifted rounds, same layout.
    pub tallies: CellCounts,
}

impl SiftedStore {
    pub fn round_indices(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|e| e.round_index)
    }
}

/// Both parties' bits for a round revealed for estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevealedBit {
    pub round_index: u64,
    pub alice: u8,
    pub bob: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedTable {
    pub table: GainTable,
    /// Cells without revealed bits (E reported as 0.5) or without sent rounds.
    pub flagged: Vec<(Basis, Intensity, Intensity)>,
    pub revealed: CellCounts,
}

/// Per-cell gains from sifted and sent counts; error rates from revealed bits only.
pub fn estimate_from_session(
    alice: &SiftedStore,
    bob: &SiftedStore,
    revealed: &[RevealedBit],
) -> Result<EstimatedTable, SessionError> {
    let inconsistent = |d: &str| SessionError::Internal(format!("inconsistent stores: {d}"));
    if alice.sent != bob.sent {
        return Err(inconsistent("sent counts differ"));
    }
    if alice.entries.len() != bob.entries.len() {
        return Err(inconsistent("different numbers of sifted rounds"));
    }
    let mut heralds = [[[0u64; 3]; 3]; 2];
    let mut cell_of = BTreeMap::new();
    for (a, b) in alice.entries.iter().zip(&bob.entries) {
        if a.round_index != b.round_index || a.basis != b.basis {
            return Err(inconsistent(&format!("round {} vs {}", a.round_index, b.round_index)));
        }
        heralds[a.basis.index()][a.intensity.index()][b.intensity.index()] += 1;
        cell_of.insert(a.round_index, (a.basis, a.intensity, b.intensity));
    }
    let mut shown = [[[0u64; 3]; 3]; 2];
    let mut errors = [[[0u64; 3]; 3]; 2];
    for r in revealed {
        let (b, ia, ib) = *cell_of
            .get(&r.round_index)
            .ok_or_else(|| inconsistent(&format!("revealed round {} was not sifted", r.round_index)))?;
        shown[b.index()][ia.index()][ib.index()] += 1;
        if r.alice == r.bob {
            errors[b.index()][ia.index()][ib.index()] += 1;
        }
    }
    let mut flagged = Vec::new();
    let table = GainTable::from_fn(|b, ia, ib| {
        let (i, j, k) = (b.index(), ia.index(), ib.index());
        let sent = alice.sent[i][j][k];
        let q = if sent == 0 { 0.0 } else { heralds[i][j][k] as f64 / sent as f64 };
        let e = if shown[i][j][k] == 0 {
            0.5
        } else {
            errors[i][j][k] as f64 / shown[i][j][k] as f64
        };
        if sent == 0 || shown[i][j][k] == 0 {
            flagged.push((b, ia, ib));
        }
        Cell { q, e }
    })?;
    Ok(EstimatedTable {
        table,
        flagged,
        revealed: shown,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionReport {
    pub rounds: u64,
    pub heralded: u64,
    pub sifted: u64,
    /// Revealed rounds per basis, `[Z, X]`.
    pub revealed: [u64; 2],
    pub estimate: EstimatedTable,
    pub decoy: Result<DecoyResult, String>,
    pub rel_slack: f64,
}

impl SessionReport {
    /// Deterministic plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rounds={}", self.rounds);
        let _ = writeln!(s, "heralded={}", self.heralded);
        let _ = writeln!(s, "sifted={}", self.sifted);
        let _ = writeln!(s, "revealed_z={}", self.revealed[0]);
        let _ = writeln!(s, "revealed_x={}", self.revealed[1]);
        for (b, ia, ib, c) in self.estimate.table.iter() {
            let flag = if self.estimate.flagged.contains(&(b, ia, ib)) { " flagged" } else { "" };
            let _ = writeln!(s, "cell {b}{ia}{ib} Q={} E={}{flag}", fmt_sci(c.q), fmt_sci(c.e));
        }
        match &self.decoy {
            Ok(d) => {
                let _ = writeln!(s, "s11_z_lower={}", fmt_sci(d.s11_z_lower));
                let _ = writeln!(s, "e11_x_upper={}", fmt_sci(d.e11_x_upper));
                let _ = writeln!(s, "R={}", fmt_sci(d.r));
                let _ = writeln!(s, "R_clamped={}", fmt_sci(d.r_clamped));
                let _ = writeln!(s, "degenerate={}", d.degenerate);
            }
            Err(e) => {
                let _ = writeln!(s, "decoy_error={e}");
            }
        }
        let _ = writeln!(s, "rel_slack={}", fmt_sci(self.rel_slack));
        s
    }
}

/// Counters of the causality instrumentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CausalityMonitor {
    pub checks: u64,
    pub violations: u64,
}

impl CausalityMonitor {
    fn check(&mut self, ok: bool) {
        self.checks += 1;
        self.violations += u64::from(!ok);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutput {
    pub alice: SiftedStore,
    pub bob: SiftedStore,
    pub revealed: Vec<RevealedBit>,
    pub report: SessionReport,
    pub causality: CausalityMonitor,
    /// Event log, one line per message, when recording is enabled.
    pub log: Option<String>,
}

/// Everything an eavesdropper on the classical channel learns.
#[derive(Debug, Default)]
struct PublicView {
    rounds: u64,
    heralds: BTreeSet<u64>,
    bases: [BTreeMap<u64, Basis>; 2],
    bits: [BTreeMap<u64, u8>; 2],
    codes: [Vec<u8>; 2],
}

fn side(n: NodeId) -> usize {
    match n {
        NodeId::Alice => 0,
        _ => 1,
    }
}

impl PublicView {
    fn observe(&mut self, sender: NodeId, msg: &Message) -> Result<(), String> {
        match (sender, msg) {
            (NodeId::Center, Message::SessionControl(Control::Start { rounds })) => self.rounds = *rounds,
            (NodeId::Center, Message::SessionControl(_)) => {}
            (NodeId::Center, Message::BsmAnnouncement { round_index, outcome }) => {
                if *outcome == BsmOutcome::PsiMinus {
                    self.heralds.insert(*round_index);
                }
            }
            (NodeId::Center, m) => return Err(format!("center cannot send {}", m.variant())),
            (n, Message::BasisReveal { round_index, basis }) => {
                self.bases[side(n)].insert(*round_index, *basis);
            }
            (n, Message::SubsetReveal { round_index, bit }) => {
                self.bits[side(n)].insert(*round_index, *bit);
            }
            (n, Message::ChoiceBatch { start, codes }) => {
                let v = &mut self.codes[side(n)];
                if *start != v.len() as u64 {
                    return Err(format!("choice batch starts at {start}, expected {}", v.len()));
                }
                v.extend_from_slice(codes);
            }
            (n, m) => return Err(format!("{n} cannot send {}", m.variant())),
        }
        Ok(())
    }

    fn stores(&self) -> Result<(SiftedStore, SiftedStore, Vec<RevealedBit>), String> {
        let (ca, cb) = (&self.codes[0], &self.codes[1]);
        if ca.len() as u64 != self.rounds || cb.len() as u64 != self.rounds {
            return Err(format!(
                "published choices cover {} and {} of {} rounds",
                ca.len(),
                cb.len(),
                self.rounds
            ));
        }
        let mut sent = [[[0u64; 3]; 3]; 2];
        for (&a, &b) in ca.iter().zip(cb) {
            let ((ba, ia), (bb, ib)) = (decode(a), decode(b));
            if ba == bb {
                sent[ba.index()][ia.index()][ib.index()] += 1;
            }
        }
        let mut tallies = [[[0u64; 3]; 3]; 2];
        let mut ea = Vec::new();
        let mut eb = Vec::new();
        let mut revealed = Vec::new();
        for &k in &self.heralds {
            let (ba, ia) = decode(ca[k as usize]);
            let (bb, ib) = decode(cb[k as usize]);
            if ba != bb {
                continue;
            }
            tallies[ba.index()][ia.index()][ib.index()] += 1;
            let (xa, xb) = (self.bits[0].get(&k).copied(), self.bits[1].get(&k).copied());
            if let (Some(a), Some(b)) = (xa, xb) {
                revealed.push(RevealedBit {
                    round_index: k,
                    alice: a,
                    bob: b,
                });
            }
            ea.push(SiftedEntry {
                round_index: k,
                basis: ba,
                bit: xa,
                intensity: ia,
            });
            eb.push(SiftedEntry {
                round_index: k,
                basis: bb,
                bit: xb,
                intensity: ib,
            });
        }
        let store = |node, entries| SiftedStore {
            node,
            entries,
            sent,
            tallies,
        };
        Ok((store(NodeId::Alice, ea), store(NodeId::Bob, eb), revealed))
    }

    fn report(&self, mu_a: &ByIntensity<f64>, mu_b: &ByIntensity<f64>, opts: &PipelineOptions) -> Result<SessionReport, SessionError> {
        let (a, b, revealed) = self.stores().map_err(SessionError::Internal)?;
        let estimate = estimate_from_session(&a, &b, &revealed)?;
        let mut by_basis = [0u64; 2];
        for e in &a.entries {
            if self.bits[0].contains_key(&e.round_index) && self.bits[1].contains_key(&e.round_index) {
                by_basis[e.basis.index()] += 1;
            }
        }
        let (decoy, rel_slack) = match analyze_table(&estimate.table, mu_a, mu_b, opts) {
            Ok((d, eps)) => (Ok(d), eps),
            Err(e) => (Err(e.to_string()), f64::NAN),
        };
        Ok(SessionReport {
            rounds: self.rounds,
            heralded: self.heralds.len() as u64,
            sifted: a.entries.len() as u64,
            revealed: by_basis,
            estimate,
            decoy,
            rel_slack,
        })
    }
}

struct EndNode {
    /// Committed choices, indexed by round.
    committed: Vec<Choice>,
    flushed_upto: u64,
    /// Heralded rounds awaiting the peer's basis.
    retained: BTreeMap<u64, Choice>,
    sifted: BTreeMap<u64, Choice>,
    peer_bits: BTreeMap<u64, u8>,
    peer_codes: Vec<u8>,
}

impl EndNode {
    fn new(rounds: u64) -> Self {
        EndNode {
            committed: Vec::with_capacity(rounds as usize),
            flushed_upto: 0,
            retained: BTreeMap::new(),
            sifted: BTreeMap::new(),
            peer_bits: BTreeMap::new(),
            peer_codes: Vec::new(),
        }
    }
}

struct Envelope {
    to: NodeId,
    from: NodeId,
    message: Message,
}

struct Bus {
    latency_ps: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    pending: BTreeMap<u64, Envelope>,
    log: Option<String>,
    public: PublicView,
}

impl Bus {
    fn send(&mut self, time_ps: u64, from: NodeId, message: Message) -> Result<(), SessionError> {
        if let Some(log) = &mut self.log {
            log.push_str(
                &Event {
                    time_ps,
                    sender: from,
                    message: message.clone(),
                }
                .to_line(),
            );
            log.push('\n');
        }
        self.public
            .observe(from, &message)
            .map_err(|detail| SessionError::Protocol { node: from, time_ps, detail })?;
        let to: &[NodeId] = match from {
            NodeId::Center => &[NodeId::Alice, NodeId::Bob],
            NodeId::Alice => &[NodeId::Bob],
            NodeId::Bob => &[NodeId::Alice],
        };
        for &t in to {
            self.seq += 1;
            self.queue.push(Reverse((time_ps + self.latency_ps, self.seq)));
            self.pending.insert(
                self.seq,
                Envelope {
                    to: t,
                    from,
                    message: message.clone(),
                },
            );
        }
        Ok(())
    }

    fn next_before(&mut self, horizon: Option<u64>) -> Option<(u64, Envelope)> {
        let &Reverse((t, seq)) = self.queue.peek()?;
        if horizon.is_some_and(|h| t > h) {
            return None;
        }
        self.queue.pop();
        Some((t, self.pending.remove(&seq).expect("queued envelope")))
    }
}

struct Session<'a> {
    seed: u64,
    cfg: &'a SessionConfig,
    rounds: u64,
    nodes: [EndNode; 2],
    bus: Bus,
    monitor: CausalityMonitor,
    period: u64,
}

impl Session<'_> {
    fn violation(&self, node: NodeId, time_ps: u64, detail: String) -> SessionError {
        SessionError::Protocol { node, time_ps, detail }
    }

    fn deliver(&mut self, now: u64, env: Envelope) -> Result<(), SessionError> {
        let me = env.to;
        let i = side(me);
        match (env.from, env.message) {
            (NodeId::Center, Message::BsmAnnouncement { round_index: k, outcome }) => {
                let node = &self.nodes[i];
                if k >= node.committed.len() as u64 {
                    return Err(self.violation(me, now, format!("announcement for unknown round {k}")));
                }
                if k < node.flushed_upto {
                    return Err(self.violation(me, now, format!("announcement for round {k} after flush")));
                }
                if outcome != BsmOutcome::PsiMinus {
                    return Ok(());
                }
                let choice = node.committed[k as usize];
                // The store write happens on delivery, never before.
                self.monitor.check(now >= (k * self.period_ps()) + self.bus.latency_ps);
                self.nodes[i].retained.insert(k, choice);
                self.bus.send(
                    now,
                    me,
                    Message::BasisReveal {
                        round_index: k,
                        basis: choice.basis,
                    },
                )?;
            }
            (NodeId::Center, Message::SessionControl(Control::Flush { upto })) => {
                self.nodes[i].flushed_upto = upto;
            }
            (NodeId::Center, Message::SessionControl(Control::Start { rounds })) => {
                if rounds != self.rounds {
                    return Err(self.violation(me, now, format!("start announces {rounds} rounds")));
                }
            }
            (NodeId::Center, Message::SessionControl(Control::Stop)) => {
                let codes: Vec<u8> = self.nodes[i].committed.iter().map(|&c| choice_code(c)).collect();
                for (n, chunk) in codes.chunks(BATCH).enumerate() {
                    self.bus.send(
                        now,
                        me,
                        Message::ChoiceBatch {
                            start: (n * BATCH) as u64,
                            codes: chunk.to_vec(),
                        },
                    )?;
                }
            }
            (from, Message::BasisReveal { round_index: k, basis }) if from == me.peer() => {
                let Some(&own) = self.nodes[i].retained.get(&k) else {
                    return Err(self.violation(me, now, format!("basis reveal for unretained round {k}")));
                };
                if own.basis != basis {
                    self.nodes[i].retained.remove(&k);
                    return Ok(());
                }
                self.nodes[i].sifted.insert(k, own);
                let fraction = match basis {
                    Basis::X => self.cfg.reveal_x,
                    Basis::Z => self.cfg.reveal_z,
                };
                if me == NodeId::Alice && reveal_selected(self.seed, k, fraction) {
                    self.bus.send(now, me, Message::SubsetReveal { round_index: k, bit: own.bit })?;
                }
            }
            (from, Message::SubsetReveal { round_index: k, bit }) if from == me.peer() => {
                let Some(&own) = self.nodes[i].sifted.get(&k) else {
                    return Err(self.violation(me, now, format!("bit reveal for unsifted round {k}")));
                };
                self.nodes[i].peer_bits.insert(k, bit);
                if me == NodeId::Bob {
                    self.bus.send(now, me, Message::SubsetReveal { round_index: k, bit: own.bit })?;
                }
            }
            (from, Message::ChoiceBatch { start, codes }) if from == me.peer() => {
                let node = &mut self.nodes[i];
                if start != node.peer_codes.len() as u64 {
                    return Err(self.violation(me, now, format!("choice batch out of order at {start}")));
                }
                node.peer_codes.extend_from_slice(&codes);
            }
            (from, m) => {
                return Err(self.violation(me, now, format!("unexpected {} from {from}", m.variant())));
            }
        }
        Ok(())
    }

    fn period_ps(&self) -> u64 {
        self.period
    }

    fn drain(&mut self, horizon: Option<u64>) -> Result<(), SessionError> {
        while let Some((t, env)) = self.bus.next_before(horizon) {
            self.deliver(t, env)?;
        }
        Ok(())
    }

    /// The End Node's own view after the session: sifted rounds with its bits.
    fn private_store(&self, n: NodeId) -> Result<SiftedStore, SessionError> {
        let node = &self.nodes[side(n)];
        if node.peer_codes.len() != node.committed.len() {
            return Err(SessionError::Internal(format!("{n} is missing the peer's choices")));
        }
        let oriented = |own: Intensity, peer: Intensity| match n {
            NodeId::Alice => (own, peer),
            _ => (peer, own),
        };
        let mut sent = [[[0u64; 3]; 3]; 2];
        for (c, &p) in node.committed.iter().zip(&node.peer_codes) {
            let (pb, pi) = decode(p);
            if pb == c.basis {
                let (ia, ib) = oriented(c.intensity, pi);
                sent[c.basis.index()][ia.index()][ib.index()] += 1;
            }
        }
        let mut tallies = [[[0u64; 3]; 3]; 2];
        let mut entries = Vec::with_capacity(node.sifted.len());
        for (&k, c) in &node.sifted {
            let (_, pi) = decode(node.peer_codes[k as usize]);
            let (ia, ib) = oriented(c.intensity, pi);
            tallies[c.basis.index()][ia.index()][ib.index()] += 1;
            entries.push(SiftedEntry {
                round_index: k,
                basis: c.basis,
                bit: Some(c.bit),
                intensity: c.intensity,
            });
        }
        Ok(SiftedStore {
            node: n,
            entries,
            sent,
            tallies,
        })
    }
}

fn to_ps(seconds: f64) -> u64 {
    (seconds * 1e12).round().max(0.0) as u64
}

/// Run a full session of `rounds` rounds.
pub fn run_session(
    scenario: &ScenarioConfig,
    rounds: u64,
    seed: u64,
    cfg: &SessionConfig,
    opts: &PipelineOptions,
) -> Result<SessionOutput, SessionError> {
    if rounds == 0 {
        return Err(SessionError::Rounds);
    }
    for f in [cfg.reveal_x, cfg.reveal_z] {
        if !(0.0..=1.0).contains(&f) {
            return Err(ModelError::Invalid(format!("reveal fraction {f} outside [0, 1]")).into());
        }
    }
    if !(cfg.latency >= 0.0) {
        return Err(ModelError::Invalid(format!("latency {} must be >= 0", cfg.latency)).into());
    }
    let engine = SimEngine::new(scenario, seed)?;
    let period = to_ps(1.0 / scenario.detection.qubit_rate).max(1);
    let mut s = Session {
        seed,
        cfg,
        rounds,
        nodes: [EndNode::new(rounds), EndNode::new(rounds)],
        bus: Bus {
            latency_ps: to_ps(cfg.latency),
            seq: 0,
            queue: BinaryHeap::new(),
            pending: BTreeMap::new(),
            log: cfg.record_log.then(String::new),
            public: PublicView::default(),
        },
        monitor: CausalityMonitor::default(),
        period,
    };
    s.bus.send(0, NodeId::Center, Message::SessionControl(Control::Start { rounds }))?;

    let mut start = 0;
    while start < rounds {
        let n = CHUNK.min(rounds - start);
        // Each End Node commits its choice before the Center measures; the
        // Center reads the committed values only.
        let block: Vec<(Choice, Choice, BsmOutcome, bool)> = (start..start + n)
            .into_par_iter()
            .map(|k| {
                let mut rng = RoundRng::new(seed, k);
                let (a, b) = engine.choices(&mut rng);
                let committed = [a, b];
                let outcome = engine.measure(committed[0], committed[1], &mut rng);
                (a, b, outcome, committed == [a, b])
            })
            .collect();
        for (j, &(a, b, outcome, read_committed)) in block.iter().enumerate() {
            let k = start + j as u64;
            let t_commit = k * period;
            let t_measure = t_commit + period / 2;
            s.nodes[0].committed.push(a);
            s.nodes[1].committed.push(b);
            s.monitor.check(read_committed && t_commit < t_measure);
            if outcome == BsmOutcome::PsiMinus {
                s.drain(Some(t_measure))?;
                s.bus.send(t_measure, NodeId::Center, Message::BsmAnnouncement { round_index: k, outcome })?;
            }
        }
        start += n;
        let t = start * period;
        s.drain(Some(t))?;
        s.bus.send(t, NodeId::Center, Message::SessionControl(Control::Flush { upto: start }))?;
    }
    s.bus.send(rounds * period, NodeId::Center, Message::SessionControl(Control::Stop))?;
    s.drain(None)?;

    let alice = s.private_store(NodeId::Alice)?;
    let bob = s.private_store(NodeId::Bob)?;
    if !alice.round_indices().eq(bob.round_indices()) {
        return Err(SessionError::Internal("sifted round sets differ".into()));
    }
    let revealed: Vec<RevealedBit> = s.nodes[0]
        .peer_bits
        .iter()
        .map(|(&k, &bob_bit)| RevealedBit {
            round_index: k,
            alice: s.nodes[0].sifted[&k].bit,
            bob: bob_bit,
        })
        .collect();
    let private = estimate_from_session(&alice, &bob, &revealed)?;
    let report = s.bus.public.report(&scenario.alice.mu, &scenario.bob.mu, opts)?;
    if private != report.estimate {
        return Err(SessionError::Internal("public and private estimates differ".into()));
    }
    Ok(SessionOutput {
        alice,
        bob,
        revealed,
        report,
        causality: s.monitor,
        log: s.bus.log,
    })
}

/// Rebuild the final report from an event log.
pub fn replay(
    log: &str,
    mu_a: &ByIntensity<f64>,
    mu_b: &ByIntensity<f64>,
    opts: &PipelineOptions,
) -> Result<SessionReport, SessionError> {
    let mut view = PublicView::default();
    for (i, line) in log.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let err = |msg: String| SessionError::Log { line: i + 1, msg };
        let ev = Event::parse_line(line).map_err(err)?;
        view.observe(ev.sender, &ev.message).map_err(err)?;
    }
    view.report(mu_a, mu_b, opts)
}
