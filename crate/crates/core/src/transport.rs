//! Simulated device/server channel with byte accounting.
//!
//! Element-counting conventions:
//! - a distilled record costs `D + 1` elements (input plus label);
//! - a label profile costs `C` elements;
//! - logits cost `C` elements per sample, sample indices one element each;
//! - model parameters cost `param_count` elements per transfer.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;

use crate::data::LabelProfile;
use crate::distill::DistilledRecord;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PayloadKind {
    ModelParams,
    Logits,
    SampleIndex,
    DistilledData,
    LabelProfile,
}

impl PayloadKind {
    pub const ALL: [PayloadKind; 5] = [
        PayloadKind::ModelParams,
        PayloadKind::Logits,
        PayloadKind::SampleIndex,
        PayloadKind::DistilledData,
        PayloadKind::LabelProfile,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PayloadKind::ModelParams => "model_params",
            PayloadKind::Logits => "logits",
            PayloadKind::SampleIndex => "sample_index",
            PayloadKind::DistilledData => "distilled_data",
            PayloadKind::LabelProfile => "label_profile",
        }
    }
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PayloadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PayloadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown payload kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Uplink,
    Downlink,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Uplink => "uplink",
            Direction::Downlink => "downlink",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Payload {
    pub kind: PayloadKind,
    pub element_count: u64,
    pub direction: Direction,
    pub round: usize,
    pub client_id: usize,
}

/// Bytes per element for every payload kind.
pub type ByteWidths = BTreeMap<PayloadKind, u64>;

/// Four bytes per element for every kind.
pub fn default_byte_widths() -> ByteWidths {
    PayloadKind::ALL.into_iter().map(|k| (k, 4)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerEntry {
    pub round: usize,
    pub client_id: usize,
    pub direction: Direction,
    pub kind: PayloadKind,
    pub elements: u64,
    pub bytes: u64,
}

/// Append-only record of every transfer.
#[derive(Clone, Debug, PartialEq)]
pub struct CommLedger {
    widths: ByteWidths,
    entries: Vec<LedgerEntry>,
}

impl Default for CommLedger {
    fn default() -> Self {
        Self::new(default_byte_widths())
    }
}

impl CommLedger {
    pub fn new(widths: ByteWidths) -> Self {
        Self {
            widths,
            entries: Vec::new(),
        }
    }

    pub fn widths(&self) -> &ByteWidths {
        &self.widths
    }

    pub fn width(&self, kind: PayloadKind) -> Result<u64> {
        self.widths
            .get(&kind)
            .copied()
            .ok_or_else(|| Error::config(format!("width.{kind}"), "no byte width configured"))
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// Charges `p` and returns the bytes it cost.
    pub fn account_payload(&mut self, p: &Payload) -> Result<u64> {
        let bytes = p.element_count * self.width(p.kind)?;
        self.entries.push(LedgerEntry {
            round: p.round,
            client_id: p.client_id,
            direction: p.direction,
            kind: p.kind,
            elements: p.element_count,
            bytes,
        });
        Ok(bytes)
    }

    pub fn total(&self, direction: Direction) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.direction == direction)
            .map(|e| e.bytes)
            .sum()
    }

    /// Bytes in `direction` over entries with `round <= upto`.
    pub fn cumulative(&self, direction: Direction, upto: usize) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.direction == direction && e.round <= upto)
            .map(|e| e.bytes)
            .sum()
    }

    pub fn round_total(&self, direction: Direction, round: usize) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.direction == direction && e.round == round)
            .map(|e| e.bytes)
            .sum()
    }

    pub fn client_round_total(&self, client: usize, round: usize) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.client_id == client && e.round == round)
            .map(|e| e.bytes)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "round,client,direction,kind,bytes")?;
        for e in &self.entries {
            writeln!(out, "{},{},{},{},{}", e.round, e.client_id, e.direction, e.kind, e.bytes)?;
        }
        Ok(())
    }
}

/// Anything that can travel over the simulated channel.
pub trait Transmittable {
    fn element_count(&self) -> u64;
}

impl Transmittable for [DistilledRecord] {
    fn element_count(&self) -> u64 {
        self.iter().map(|r| r.input.len() as u64 + 1).sum()
    }
}

impl Transmittable for Vec<DistilledRecord> {
    fn element_count(&self) -> u64 {
        self.as_slice().element_count()
    }
}

impl Transmittable for LabelProfile {
    fn element_count(&self) -> u64 {
        self.freqs.len() as u64
    }
}

impl Transmittable for Matrix {
    fn element_count(&self) -> u64 {
        self.len() as u64
    }
}

impl Transmittable for Vec<f64> {
    fn element_count(&self) -> u64 {
        self.len() as u64
    }
}

impl Transmittable for Vec<usize> {
    fn element_count(&self) -> u64 {
        self.len() as u64
    }
}

/// Lossless delivery of `body`, charged to `ledger`.
pub fn transmit<T: Transmittable + ?Sized>(ledger: &mut CommLedger, p: &Payload, body: &T) -> Result<()> {
    let actual = body.element_count();
    if actual != p.element_count {
        return Err(Error::Consistency(format!(
            "{} payload for client {} declared {} elements but carries {actual}",
            p.kind, p.client_id, p.element_count
        )));
    }
    ledger.account_payload(p)?;
    Ok(())
}

/// Charges and returns `body`, building the payload header from it.
pub fn send<T: Transmittable>(
    ledger: &mut CommLedger,
    kind: PayloadKind,
    direction: Direction,
    round: usize,
    client_id: usize,
    body: T,
) -> Result<T> {
    let p = Payload {
        kind,
        element_count: body.element_count(),
        direction,
        round,
        client_id,
    };
    transmit(ledger, &p, &body)?;
    Ok(body)
}

/// Whether `client` is reachable in `round`; Bernoulli(`rate`) keyed by
/// `(round, client, seed)`.
pub fn draw_availability(round: usize, client: usize, rate: f64, seed: u64) -> bool {
    if rate >= 1.0 {
        return true;
    }
    let mut rng = stream_rng(seed, Stream::Availability, &[round as u64, client as u64]);
    rng.random::<f64>() < rate
}
