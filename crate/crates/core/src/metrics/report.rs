//! Named metric values with units and regions, serialized as `key=value`
//! lines that parse back losslessly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::region::Region;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricValue {
    pub name: String,
    pub region: Region,
    pub value: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub config_hash: String,
    pub counts: BTreeMap<String, usize>,
    /// Free-form identifiers, such as feature extractor ids.
    pub tags: BTreeMap<String, String>,
    /// Metrics that could not be computed, with the reason.
    pub undefined: BTreeMap<String, String>,
    pub values: Vec<MetricValue>,
}

fn check_token(s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=') {
        return Err(Error::Format(format!("'{s}' cannot appear in a report line")));
    }
    Ok(())
}

impl MetricReport {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            config_hash: config_hash.into(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, name: &str, region: Region, value: f64, unit: &str) {
        self.values.push(MetricValue {
            name: name.into(),
            region,
            value,
            unit: unit.into(),
        });
    }

    pub fn get(&self, name: &str, region: Region) -> Option<f64> {
        self.values.iter().find(|m| m.name == name && m.region == region).map(|m| m.value)
    }

    pub fn non_finite(&self) -> Vec<&MetricValue> {
        self.values.iter().filter(|m| !m.value.is_finite()).collect()
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        check_token(&self.config_hash)?;
        writeln!(out, "config_hash={}", self.config_hash).unwrap();
        for (k, v) in &self.counts {
            check_token(k)?;
            writeln!(out, "count.{k}={v}").unwrap();
        }
        for (k, v) in &self.tags {
            check_token(k)?;
            check_token(v)?;
            writeln!(out, "tag.{k}={v}").unwrap();
        }
        for (k, v) in &self.undefined {
            check_token(k)?;
            writeln!(out, "undefined.{k}={}", v.replace(char::is_whitespace, "_")).unwrap();
        }
        for m in &self.values {
            check_token(&m.name)?;
            check_token(&m.unit)?;
            writeln!(out, "metric={} region={} value={} unit={}", m.name, m.region, m.value, m.unit).unwrap();
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = MetricReport::default();
        let bad = |line: &str| Error::Format(format!("bad report line '{line}'"));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if line.starts_with("metric=") {
                let fields: BTreeMap<&str, &str> = line
                    .split_whitespace()
                    .map(|kv| kv.split_once('=').ok_or_else(|| bad(line)))
                    .collect::<Result<_>>()?;
                let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(line));
                r.values.push(MetricValue {
                    name: get("metric")?.into(),
                    region: Region::parse(get("region")?)?,
                    value: get("value")?.parse().map_err(|_| bad(line))?,
                    unit: get("unit")?.into(),
                });
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            if k == "config_hash" {
                r.config_hash = v.into();
            } else if let Some(k) = k.strip_prefix("count.") {
                r.counts.insert(k.into(), v.parse().map_err(|_| bad(line))?);
            } else if let Some(k) = k.strip_prefix("tag.") {
                r.tags.insert(k.into(), v.into());
            } else if let Some(k) = k.strip_prefix("undefined.") {
                r.undefined.insert(k.into(), v.into());
            } else {
                return Err(bad(line));
            }
        }
        Ok(r)
    }
}
