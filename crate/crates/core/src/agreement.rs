//! Accuracy, Cohen's kappa agreement and preference proportions over
//! multiple-choice prediction logs.
//!
//! Logs are JSON Lines: a header object `{"task", "size", "seed", "step"}`
//! followed by one `{"item", "chosen", "gold", "n_options"}` object per item.
//! Logs are aligned by item id, never by position.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogHeader {
    pub task: String,
    pub size: String,
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionItem {
    pub item: String,
    pub chosen: usize,
    pub gold: usize,
    pub n_options: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionLog {
    pub header: LogHeader,
    pub items: Vec<PredictionItem>,
}

impl PredictionLog {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::with_capacity(self.items.len());
        for it in &self.items {
            if it.chosen >= it.n_options || it.gold >= it.n_options {
                return Err(Error::invalid(format!(
                    "item `{}`: chosen {} / gold {} out of {} options",
                    it.item, it.chosen, it.gold, it.n_options
                )));
            }
            if !seen.insert(it.item.as_str()) {
                return Err(Error::invalid(format!("duplicate item id `{}`", it.item)));
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
        let header: LogHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::invalid("empty prediction log")),
        };
        let items = lines
            .map(|l| Ok(serde_json::from_str::<PredictionItem>(&l?)?))
            .collect::<Result<Vec<_>>>()?;
        let log = PredictionLog { header, items };
        log.validate()?;
        Ok(log)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", serde_json::to_string(&self.header)?)?;
        for it in &self.items {
            writeln!(out, "{}", serde_json::to_string(it)?)?;
        }
        Ok(())
    }

    fn by_id(&self) -> HashMap<&str, &PredictionItem> {
        self.items.iter().map(|it| (it.item.as_str(), it)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementResult {
    pub kappa: f64,
    pub observed: f64,
    pub expected: f64,
    pub items: usize,
}

/// Cohen's kappa between two aligned choice vectors.
pub fn cohens_kappa(a: &[usize], b: &[usize]) -> Result<AgreementResult> {
    if a.len() != b.len() {
        return Err(Error::Misaligned(format!("{} vs {} choices", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("kappa needs at least one item"));
    }
    let n = a.len() as f64;
    let options = a.iter().chain(b).max().unwrap() + 1;
    let mut ma = vec![0usize; options];
    let mut mb = vec![0usize; options];
    let mut same = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        ma[x] += 1;
        mb[y] += 1;
        same += usize::from(x == y);
    }
    let observed = same as f64 / n;
    let expected: f64 = ma.iter().zip(&mb).map(|(&x, &y)| (x as f64 / n) * (y as f64 / n)).sum();
    let kappa = if expected >= 1.0 {
        if same == a.len() {
            1.0
        } else {
            return Err(Error::Degenerate("expected agreement is 1 but raters disagree".into()));
        }
    } else {
        (observed - expected) / (1.0 - expected)
    };
    Ok(AgreementResult {
        kappa,
        observed,
        expected,
        items: a.len(),
    })
}

/// Kappa between two logs over the same item set.
pub fn kappa_between(a: &PredictionLog, b: &PredictionLog) -> Result<AgreementResult> {
    let bm = b.by_id();
    if a.items.len() != b.items.len() {
        return Err(Error::Misaligned(format!(
            "item sets differ in size ({} vs {})",
            a.items.len(),
            b.items.len()
        )));
    }
    let mut ca = Vec::with_capacity(a.items.len());
    let mut cb = Vec::with_capacity(a.items.len());
    for it in &a.items {
        let other = bm
            .get(it.item.as_str())
            .ok_or_else(|| Error::Misaligned(format!("item `{}` missing from the other log", it.item)))?;
        ca.push(it.chosen);
        cb.push(other.chosen);
    }
    cohens_kappa(&ca, &cb)
}

/// Kappa of every seed against the reference seed, for logs sharing task/size/step.
pub fn inter_seed_agreement(logs: &[PredictionLog], reference_seed: u64) -> Result<Vec<(u64, AgreementResult)>> {
    let reference = logs
        .iter()
        .find(|l| l.header.seed == reference_seed)
        .ok_or_else(|| Error::Misaligned(format!("reference seed {reference_seed} missing")))?;
    for l in logs {
        let h = &l.header;
        let r = &reference.header;
        if h.task != r.task || h.size != r.size || h.step != r.step {
            return Err(Error::Misaligned(format!(
                "log {}/{}/{}/{} does not match reference {}/{}/{}",
                h.task, h.size, h.seed, h.step, r.task, r.size, r.step
            )));
        }
    }
    logs.iter()
        .map(|l| Ok((l.header.seed, kappa_between(l, reference)?)))
        .collect()
}

/// Kappa of every checkpoint of one run against its final checkpoint, by step.
pub fn self_consistency(run_logs: &[PredictionLog]) -> Result<Vec<(u64, AgreementResult)>> {
    let last = run_logs
        .iter()
        .max_by_key(|l| l.header.step)
        .ok_or_else(|| Error::invalid("no logs"))?;
    let mut out: Vec<(u64, AgreementResult)> = run_logs
        .iter()
        .map(|l| {
            if l.header.seed != last.header.seed || l.header.task != last.header.task {
                return Err(Error::Misaligned("self-consistency logs must come from one run and task".into()));
            }
            Ok((l.header.step, kappa_between(l, last)?))
        })
        .collect::<Result<_>>()?;
    out.sort_by_key(|(s, _)| *s);
    Ok(out)
}

pub fn accuracy(log: &PredictionLog) -> Result<f64> {
    if log.items.is_empty() {
        return Err(Error::invalid("empty prediction log"));
    }
    let correct = log.items.iter().filter(|it| it.chosen == it.gold).count();
    Ok(correct as f64 / log.items.len() as f64)
}

/// Fraction of pairs whose first score is higher; exact ties count one half.
pub fn preference_proportion(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no preference pairs"));
    }
    let mut total = 0.0;
    for &(p, o) in pairs {
        if !p.is_finite() || !o.is_finite() {
            return Err(Error::NonFinite("preference score".into()));
        }
        total += if p > o {
            1.0
        } else if p == o {
            0.5
        } else {
            0.0
        };
    }
    Ok(total / pairs.len() as f64)
}

/// Groups logs by (task, size, step), each group sorted by seed.
pub fn group_by_checkpoint(logs: Vec<PredictionLog>) -> BTreeMap<(String, String, u64), Vec<PredictionLog>> {
    let mut groups: BTreeMap<(String, String, u64), Vec<PredictionLog>> = BTreeMap::new();
    for l in logs {
        let key = (l.header.task.clone(), l.header.size.clone(), l.header.step);
        groups.entry(key).or_default().push(l);
    }
    for g in groups.values_mut() {
        g.sort_by_key(|l| l.header.seed);
    }
    groups
}

/// Groups logs by (task, size, seed), each group sorted by step.
pub fn group_by_run(logs: Vec<PredictionLog>) -> BTreeMap<(String, String, u64), Vec<PredictionLog>> {
    let mut groups: BTreeMap<(String, String, u64), Vec<PredictionLog>> = BTreeMap::new();
    for l in logs {
        let key = (l.header.task.clone(), l.header.size.clone(), l.header.seed);
        groups.entry(key).or_default().push(l);
    }
    for g in groups.values_mut() {
        g.sort_by_key(|l| l.header.step);
    }
    groups
}
