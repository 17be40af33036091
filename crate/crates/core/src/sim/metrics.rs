//! Counters, histograms and samples collected during a run, and the
//! line-oriented report they render to.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Metrics {
    counters: BTreeMap<String, u64>,
    histograms: BTreeMap<String, BTreeMap<u64, u64>>,
    samples: BTreeMap<String, Vec<f64>>,
    gauges: BTreeMap<String, (f64, Option<&'static str>)>,
}

impl Metrics {
    pub fn incr(&mut self, name: &str, by: u64) {
        *self.counters.entry(name.to_string()).or_default() += by;
    }

    pub fn counter(&self, name: &str) -> u64 {
        self.counters.get(name).copied().unwrap_or(0)
    }

    pub fn observe(&mut self, name: &str, value: u64) {
        *self.histograms.entry(name.to_string()).or_default().entry(value).or_default() += 1;
    }

    pub fn histogram(&self, name: &str) -> Option<&BTreeMap<u64, u64>> {
        self.histograms.get(name)
    }

    pub fn sample(&mut self, name: &str, value: f64) {
        self.samples.entry(name.to_string()).or_default().push(value);
    }

    pub fn samples(&self, name: &str) -> &[f64] {
        self.samples.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn gauge(&mut self, name: &str, value: f64, unit: Option<&'static str>) {
        self.gauges.insert(name.to_string(), (value, unit));
    }

    pub fn report(&self, scenario: Option<&str>) -> MetricsReport {
        let mut lines = Vec::new();
        let mut push = |name: String, value: String, unit: Option<&str>| {
            lines.push(MetricLine {
                name,
                value,
                unit: unit.map(str::to_string),
                scenario: scenario.map(str::to_string),
            });
        };
        for (k, v) in &self.counters {
            let unit = if k.ends_with("bytes") { Some("bytes") } else { None };
            push(k.clone(), v.to_string(), unit);
        }
        for (k, h) in &self.histograms {
            let n: u64 = h.values().sum();
            let total: u64 = h.iter().map(|(v, c)| v * c).sum();
            push(format!("{k}.count"), n.to_string(), None);
            push(format!("{k}.mean"), fmt_f(total as f64 / n.max(1) as f64), None);
            push(format!("{k}.max"), h.keys().max().copied().unwrap_or(0).to_string(), None);
            for (v, c) in h {
                push(format!("{k}.bucket.{v}"), c.to_string(), None);
            }
        }
        for (k, s) in &self.samples {
            let mut sorted = s.clone();
            sorted.sort_by(f64::total_cmp);
            let mean = sorted.iter().sum::<f64>() / sorted.len().max(1) as f64;
            let p50 = sorted.get(sorted.len() / 2).copied().unwrap_or(0.0);
            let max = sorted.last().copied().unwrap_or(0.0);
            push(format!("{k}.count"), sorted.len().to_string(), None);
            let unit = k.contains("latency").then_some("ms");
            push(format!("{k}.mean"), fmt_f(mean), unit);
            push(format!("{k}.p50"), fmt_f(p50), unit);
            push(format!("{k}.max"), fmt_f(max), unit);
        }
        for (k, (v, unit)) in &self.gauges {
            push(k.clone(), fmt_f(*v), *unit);
        }
        MetricsReport { lines }
    }
}

pub(crate) fn fmt_f(v: f64) -> String {
    format!("{v:.3}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricLine {
    pub name: String,
    pub value: String,
    pub unit: Option<String>,
    pub scenario: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MetricsReport {
    pub lines: Vec<MetricLine>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.lines.iter().find(|l| l.name == name).and_then(|l| l.value.parse().ok())
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.lines.extend(other.lines);
    }

    /// `metric=<name> value=<v> [unit=<u>] [scenario=<s>]`, one per line.
    pub fn render_lines(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            let _ = write!(out, "metric={} value={}", l.name, l.value);
            if let Some(u) = &l.unit {
                let _ = write!(out, " unit={u}");
            }
            if let Some(s) = &l.scenario {
                let _ = write!(out, " scenario={s}");
            }
            out.push('\n');
        }
        out
    }

    pub fn render_table(&self) -> String {
        let w = self.lines.iter().map(|l| l.name.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<w$}  {:>14}  unit\n", "metric", "value");
        for l in &self.lines {
            let _ = writeln!(out, "{:<w$}  {:>14}  {}", l.name, l.value, l.unit.as_deref().unwrap_or(""));
        }
        out
    }

    pub fn render_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            let mut obj = serde_json::Map::new();
            obj.insert("metric".into(), l.name.clone().into());
            let value = match l.value.parse::<f64>() {
                Ok(v) if v.is_finite() => serde_json::Number::from_f64(v).map(Into::into).unwrap_or(l.value.clone().into()),
                _ => l.value.clone().into(),
            };
            obj.insert("value".into(), value);
            if let Some(u) = &l.unit {
                obj.insert("unit".into(), u.clone().into());
            }
            if let Some(s) = &l.scenario {
                obj.insert("scenario".into(), s.clone().into());
            }
            out.push_str(&serde_json::Value::Object(obj).to_string());
            out.push('\n');
        }
        out
    }

    /// Parses either rendering: `metric=` lines or JSON lines.
    pub fn parse_any(text: &str) -> Result<Self> {
        if !text.trim_start().starts_with('{') {
            return Self::parse(text);
        }
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |msg: String| Error::Parse { line: i + 1, msg };
            let v: serde_json::Value = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
            let field = |k: &str| v.get(k).map(|x| x.as_str().map_or_else(|| x.to_string(), str::to_string));
            lines.push(MetricLine {
                name: field("metric").ok_or_else(|| bad("missing metric".into()))?,
                value: field("value").ok_or_else(|| bad("missing value".into()))?,
                unit: field("unit"),
                scenario: field("scenario"),
            });
        }
        Ok(MetricsReport { lines })
    }

    /// Per-family totals followed by the distribution lines.
    pub fn summary(&self) -> String {
        let scenarios: BTreeSet<&str> = self.lines.iter().filter_map(|l| l.scenario.as_deref()).collect();
        let mut out = format!("{} metrics", self.lines.len());
        if !scenarios.is_empty() {
            let _ = write!(out, " from {}", scenarios.into_iter().collect::<Vec<_>>().join(", "));
        }
        out.push('\n');
        let mut families: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
        for l in &self.lines {
            let fam = l.name.split('.').next().unwrap_or(&l.name);
            let e = families.entry(fam).or_default();
            e.0 += 1;
            e.1 += l.value.parse::<f64>().unwrap_or(0.0);
        }
        let w = families.keys().map(|k| k.len()).max().unwrap_or(6).max(6);
        let _ = writeln!(out, "\n{:<w$}  {:>7}  {:>14}", "family", "metrics", "sum");
        for (fam, (n, sum)) in &families {
            let _ = writeln!(out, "{fam:<w$}  {n:>7}  {:>14}", fmt_f(*sum));
        }
        let dist: Vec<&MetricLine> = self
            .lines
            .iter()
            .filter(|l| [".mean", ".p50", ".max"].iter().any(|s| l.name.ends_with(s)))
            .collect();
        if !dist.is_empty() {
            let w = dist.iter().map(|l| l.name.len()).max().unwrap_or(6);
            out.push_str("\ndistributions\n");
            for l in dist {
                let _ = writeln!(out, "{:<w$}  {:>14}  {}", l.name, l.value, l.unit.as_deref().unwrap_or(""));
            }
        }
        out
    }

    /// Parses the output of [`render_lines`](Self::render_lines).
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let mut line = MetricLine { name: String::new(), value: String::new(), unit: None, scenario: None };
            for tok in raw.split_whitespace() {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key=value, got {tok:?}") })?;
                match k {
                    "metric" => line.name = v.to_string(),
                    "value" => line.value = v.to_string(),
                    "unit" => line.unit = Some(v.to_string()),
                    "scenario" => line.scenario = Some(v.to_string()),
                    _ => return Err(Error::Parse { line: i + 1, msg: format!("unknown key {k:?}") }),
                }
            }
            if line.name.is_empty() || line.value.is_empty() {
                return Err(Error::Parse { line: i + 1, msg: "missing metric or value".into() });
            }
            lines.push(line);
        }
        Ok(MetricsReport { lines })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips_through_text() {
        let mut m = Metrics::default();
        m.incr("delivered", 3);
        m.observe("lookup_hops", 2);
        m.observe("lookup_hops", 4);
        m.sample("discovery_latency", 12.0);
        m.gauge("codec_ratio", 0.4, None);
        let r = m.report(Some("demo"));
        assert_eq!(r.get("lookup_hops.mean"), Some(3.0));
        let text = r.render_lines();
        assert!(text.contains("metric=delivered value=3 scenario=demo\n"));
        assert_eq!(MetricsReport::parse(&text).unwrap(), r);
        assert!(matches!(MetricsReport::parse("metric=x\nbogus"), Err(Error::Parse { line: 1, .. })));
    }
}
