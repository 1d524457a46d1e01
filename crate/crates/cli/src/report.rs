//! Report documents and their JSON encoding.

use std::fs;
use std::io;
use std::path::Path;

use lgm_core::audit::AuditReport;
use lgm_core::centralized::CentralizedSolution;
use lgm_core::dynamics::Schedule;
use lgm_core::mechanism::{Allocation, MessageProfile};
use lgm_core::ne::{EquilibriumConditions, NeReport, PersonalizedPrices};
use lgm_core::network::NetworkTopology;
use lgm_core::Scalar;
use serde::Serialize;
use serde_json::ser::{Formatter, Serializer};

use crate::error::CliError;

/// Writes floats with 17 significant digits (9 for `f32`).
#[derive(Default)]
pub struct RoundTripFormatter {
    pretty: serde_json::ser::PrettyFormatter<'static>,
}

impl Formatter for RoundTripFormatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        write!(w, "{value:.8e}")
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.pretty.end_object_value(w)
    }
}

pub fn to_json<S: Serialize>(value: &S) -> String {
    let mut buf = Vec::new();
    let mut ser = Serializer::with_formatter(&mut buf, RoundTripFormatter::default());
    value.serialize(&mut ser).expect("report serializes");
    buf.push(b'\n');
    String::from_utf8(buf).expect("JSON is UTF-8")
}

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<(), CliError> {
    fs::write(path, to_json(value)).map_err(|source| CliError::Write { path: path.to_path_buf(), source })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PriceEntry<T> {
    pub i: usize,
    pub j: usize,
    pub value: T,
}

fn triples<T: Scalar>(topology: &NetworkTopology, rows: &[Vec<T>]) -> Vec<PriceEntry<T>> {
    (0..topology.n())
        .flat_map(|i| topology.r_set(i).iter().zip(&rows[i]).map(move |(&j, &value)| PriceEntry { i, j, value }))
        .collect()
}

#[derive(Debug, Serialize)]
pub struct CentralizedSection<T> {
    pub converged: bool,
    #[serde(flatten)]
    pub solution: CentralizedSolution<T>,
}

#[derive(Debug, Serialize)]
pub struct DynamicsSection<T> {
    pub schedule: Schedule,
    pub damping: T,
    pub iterations: usize,
    pub converged: bool,
    pub profile_delta: T,
    pub final_payoffs: Vec<lgm_core::ExtReal<T>>,
}

/// The single report document every command emits; sections a command
/// does not produce are omitted.
#[derive(Debug, Serialize)]
pub struct Report<T> {
    pub command: &'static str,
    pub scenario: String,
    pub precision: &'static str,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub centralized: Option<CentralizedSection<T>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub actions: Option<Vec<T>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taxes: Option<Vec<T>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prices: Option<Vec<PriceEntry<T>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tax_sum: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub personalized_prices: Option<Vec<PriceEntry<T>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equilibrium_conditions: Option<EquilibriumConditions<T>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<MessageProfile<T>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nash_verification: Option<NeReport<T>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditReport<T>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dynamics: Option<DynamicsSection<T>>,
}

impl<T: Scalar + Serialize> Report<T> {
    pub fn new(command: &'static str, scenario: &str) -> Self {
        let precision = if std::mem::size_of::<T>() == 4 { "f32" } else { "f64" };
        Self {
            command,
            scenario: scenario.to_string(),
            precision,
            passed: false,
            centralized: None,
            actions: None,
            taxes: None,
            prices: None,
            tax_sum: None,
            personalized_prices: None,
            equilibrium_conditions: None,
            profile: None,
            nash_verification: None,
            audit: None,
            dynamics: None,
        }
    }

    pub fn with_allocation(mut self, topology: &NetworkTopology, alloc: &Allocation<T>) -> Self {
        self.prices = Some(triples(topology, &alloc.prices));
        self.tax_sum = Some(alloc.tax_sum());
        self.actions = Some(alloc.actions.clone());
        self.taxes = Some(alloc.taxes.clone());
        self
    }

    pub fn with_personalized_prices(mut self, topology: &NetworkTopology, prices: &PersonalizedPrices<T>) -> Self {
        self.personalized_prices = Some(triples(topology, prices.rows()));
        self
    }
}
