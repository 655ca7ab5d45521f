//! Value grammars for the compound flags.

use std::str::FromStr;

use sgcn::analysis::AnalysisMethod;
use sgcn::sampler::Strategy;
use sgcn::train::MeasureConfig;
use sgcn::vr::SnapshotMode;

/// `full` or `large:<B'>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SnapshotArg(pub SnapshotMode);

impl FromStr for SnapshotArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "full" {
            return Ok(Self(SnapshotMode::FullBatch));
        }
        match s.strip_prefix("large:") {
            Some(n) => match n.parse::<usize>() {
                Ok(b) if b > 0 => Ok(Self(SnapshotMode::LargeBatch(b))),
                _ => Err(format!(
                    "large-batch size must be a positive integer, got {n:?}"
                )),
            },
            None => Err(format!("expected `full` or `large:<B'>`, got {s:?}")),
        }
    }
}

/// `off`, `every:<k>`, `draws:<n>`, or `every:<k>,draws:<n>`.
///
/// `draws` without `every` measures every iteration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeasureArg(pub MeasureConfig);

impl FromStr for MeasureArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "off" {
            return Ok(Self(MeasureConfig::off()));
        }
        let mut cfg = MeasureConfig::off();
        for part in s.split(',') {
            let (key, value) = part
                .split_once(':')
                .ok_or_else(|| format!("expected key:value, got {part:?}"))?;
            let n: usize = value
                .parse()
                .map_err(|_| format!("{key} needs a nonnegative integer, got {value:?}"))?;
            match key {
                "every" if n >= 1 => cfg.every = n,
                "every" => return Err("every:<k> needs k >= 1".into()),
                "draws" if n >= 2 => cfg.draws = n,
                "draws" => return Err("draws:<n> needs n >= 2".into()),
                _ => return Err(format!("unknown measurement key {key:?}")),
            }
        }
        Ok(Self(cfg))
    }
}

/// `enumerate` or `monte-carlo:<n>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MethodArg(pub AnalysisMethod);

impl FromStr for MethodArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "enumerate" {
            return Ok(Self(AnalysisMethod::Enumerate));
        }
        match s.strip_prefix("monte-carlo:") {
            Some(n) => match n.parse::<usize>() {
                Ok(k) if k >= 2 => Ok(Self(AnalysisMethod::MonteCarlo(k))),
                _ => Err(format!("monte-carlo needs at least 2 draws, got {n:?}")),
            },
            None => Err(format!(
                "expected `enumerate` or `monte-carlo:<n>`, got {s:?}"
            )),
        }
    }
}

/// One sweep entry: `exact`, or `<sampler>:<s1>,<s2>,...`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepArg {
    pub strategy: Strategy,
    pub sizes: Vec<usize>,
}

impl FromStr for SweepArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (name, sizes) = match s.split_once(':') {
            Some((name, rest)) => (name, Some(rest)),
            None => (s, None),
        };
        let strategy: Strategy = name.parse().map_err(|e: sgcn::Error| e.to_string())?;
        let sizes = match (strategy, sizes) {
            (Strategy::Exact, None) => Vec::new(),
            (Strategy::Exact, Some(_)) => return Err("the exact sampler takes no sizes".into()),
            (_, None) => return Err(format!("{name} needs sizes, e.g. {name}:1,2,4")),
            (_, Some(list)) => list
                .split(',')
                .map(|v| match v.parse::<usize>() {
                    Ok(k) if k > 0 => Ok(k),
                    _ => Err(format!("sample size must be a positive integer, got {v:?}")),
                })
                .collect::<Result<_, _>>()?,
        };
        Ok(Self { strategy, sizes })
    }
}

pub fn probability(s: &str) -> Result<f64, String> {
    let p: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(format!("{p} is outside [0, 1]"))
    }
}

pub fn positive_real(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{x} must be positive and finite"))
    }
}
