//! Concrete alphabets used by transition and reward machines.
//!
//! β-inputs are label sets (subsets of the atomic propositions), α-inputs are
//! observation/action pairs and outputs are either observations (transition
//! machines) or exact decimal rewards (reward machines).
//!
//! Symbol text is shared (`Arc<str>`): traces of a few million steps clone
//! the same handful of names over and over.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rust_decimal::prelude::ToPrimitive;
use rust_decimal::Decimal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A canonical set of atomic propositions: sorted, without duplicates.
///
/// The empty set stands for "no event" (`None` in traces).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelSet(Arc<[Arc<str>]>);

impl LabelSet {
    pub fn empty() -> Self {
        LabelSet(Arc::new([]))
    }

    pub fn new<I, S>(props: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<Arc<str>>,
    {
        let mut props: Vec<Arc<str>> = props.into_iter().map(Into::into).collect();
        props.sort();
        props.dedup();
        LabelSet(props.into())
    }

    pub fn single(prop: impl Into<Arc<str>>) -> Self {
        LabelSet(Arc::new([prop.into()]))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn props(&self) -> &[Arc<str>] {
        &self.0
    }

    pub fn contains(&self, prop: &str) -> bool {
        self.0.binary_search_by(|p| (**p).cmp(prop)).is_ok()
    }
}

impl Default for LabelSet {
    fn default() -> Self {
        LabelSet::empty()
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("{}");
        }
        write!(f, "{{{}}}", self.0.join(","))
    }
}

impl Serialize for LabelSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        // `null` and `["None"]` are accepted as spellings of the empty set.
        let raw: Option<Vec<String>> = Option::deserialize(deserializer)?;
        let props = raw
            .unwrap_or_default()
            .into_iter()
            .filter(|p| p != "None");
        Ok(LabelSet::new(props))
    }
}

/// What the agent perceives: either a raw observation or one supplemented with
/// the state of a transition machine.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Observation {
    Plain(Arc<str>),
    Augmented(Arc<str>, Arc<str>),
}

impl Observation {
    pub fn plain(obs: impl Into<Arc<str>>) -> Self {
        Observation::Plain(obs.into())
    }

    /// The raw observation with any machine-state component dropped.
    pub fn raw(&self) -> &str {
        match self {
            Observation::Plain(o) | Observation::Augmented(o, _) => o,
        }
    }

    pub fn augment(&self, state: impl Into<Arc<str>>) -> Self {
        Observation::Augmented(self.raw_shared(), state.into())
    }

    pub fn project(&self) -> Self {
        Observation::Plain(self.raw_shared())
    }

    fn raw_shared(&self) -> Arc<str> {
        match self {
            Observation::Plain(o) | Observation::Augmented(o, _) => o.clone(),
        }
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observation::Plain(o) => f.write_str(o),
            Observation::Augmented(o, q) => write!(f, "({o},{q})"),
        }
    }
}

/// An α-input of a transition or reward machine.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(Observation, Arc<str>)", into = "(Observation, Arc<str>)")]
pub struct ObsAction {
    pub obs: Observation,
    pub action: Arc<str>,
}

impl ObsAction {
    pub fn new(obs: Observation, action: impl Into<Arc<str>>) -> Self {
        ObsAction {
            obs,
            action: action.into(),
        }
    }

    pub fn plain(obs: &str, action: &str) -> Self {
        ObsAction::new(Observation::plain(obs), action)
    }
}

impl From<(Observation, Arc<str>)> for ObsAction {
    fn from((obs, action): (Observation, Arc<str>)) -> Self {
        ObsAction { obs, action }
    }
}

impl From<ObsAction> for (Observation, Arc<str>) {
    fn from(p: ObsAction) -> Self {
        (p.obs, p.action)
    }
}

impl fmt::Display for ObsAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.obs, self.action)
    }
}

/// An exact decimal reward.
///
/// Equality is on the normalized decimal value, so `1`, `1.0` and `1.00`
/// are the same output while `0.1` and `0.10000001` are not.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reward(Decimal);

impl Reward {
    pub const ZERO: Reward = Reward(Decimal::ZERO);

    pub fn from_int(v: i64) -> Self {
        Reward(Decimal::from(v))
    }

    pub fn decimal(&self) -> Decimal {
        self.0
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl From<Decimal> for Reward {
    fn from(d: Decimal) -> Self {
        Reward(d.normalize())
    }
}

impl std::ops::Add for Reward {
    type Output = Reward;
    fn add(self, rhs: Reward) -> Reward {
        Reward::from(self.0 + rhs.0)
    }
}

impl std::ops::Neg for Reward {
    type Output = Reward;
    fn neg(self) -> Reward {
        Reward::from(-self.0)
    }
}

impl FromStr for Reward {
    type Err = rust_decimal::Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Decimal::from_str_exact(s.trim()).map(Reward::from)
    }
}

impl fmt::Display for Reward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl Serialize for Reward {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        rust_decimal::serde::arbitrary_precision::serialize(&self.0, serializer)
    }
}

impl<'de> Deserialize<'de> for Reward {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        rust_decimal::serde::arbitrary_precision::deserialize(deserializer).map(Reward::from)
    }
}
