//! Seeded synthetic vulnerability corpus.
//!
//! Each sample is a short C-like function body built from filler statements
//! and calls into the API of one CWE category. Every category owns a set of
//! unsafe "sink" functions and matching safe functions; vulnerable samples
//! call at least one sink, secure samples only safe functions, so the two
//! classes share their shape and differ in which identifiers appear.
//! Categories follow a long-tailed frequency profile, so a single client's
//! share of the data covers only part of the API vocabulary. Some secure
//! samples also call a sink behind a guard call, which makes a sink alone an
//! imperfect signal.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

const CWE_IDS: [u32; 30] = [
    787, 125, 20, 416, 476, 190, 119, 200, 703, 401, 362, 264, 399, 189, 400, 835, 415, 772, 617,
    754, 284, 369, 120, 122, 269, 295, 404, 770, 908, 909,
];

const GUARDS: [&str; 4] = ["check_bounds", "validate_len", "is_null", "assert_range"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub vulnerable_fraction: f64,
    /// Number of CWE categories (at most 30).
    pub n_categories: usize,
    /// Unsafe sinks per category; each has a safe counterpart API.
    pub apis_per_category: usize,
    /// Category frequency decays as `rank^-category_skew`.
    pub category_skew: f64,
    /// Filler statements per sample, inclusive range.
    pub min_statements: usize,
    pub max_statements: usize,
    /// Category API calls per sample, inclusive upper bound (at least 1).
    /// A vulnerable sample's first call is a sink, later ones are sinks with
    /// probability one half; a secure sample only calls safe APIs.
    pub max_api_calls: usize,
    /// Fraction of secure samples containing a guarded sink call.
    pub decoy_fraction: f64,
    pub n_projects: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 3000,
            vulnerable_fraction: 0.5,
            n_categories: 20,
            apis_per_category: 6,
            category_skew: 1.0,
            min_statements: 1,
            max_statements: 3,
            max_api_calls: 3,
            decoy_fraction: 0.2,
            n_projects: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.vulnerable_fraction) {
            return bad("vulnerable_fraction must lie in [0, 1]");
        }
        if self.n_categories == 0 || self.n_categories > CWE_IDS.len() {
            return bad("n_categories must be between 1 and 30");
        }
        if self.apis_per_category == 0 || self.max_api_calls == 0 || self.n_projects == 0 {
            return bad("apis_per_category, max_api_calls and n_projects must be at least 1");
        }
        if self.min_statements > self.max_statements {
            return bad("min_statements exceeds max_statements");
        }
        if !(0.0..=1.0).contains(&self.decoy_fraction) || !(self.category_skew >= 0.0) {
            return bad("decoy_fraction must lie in [0, 1] and category_skew must be nonnegative");
        }
        Ok(())
    }
}

/// One generated record, in the shape `corpus::load_jsonl` reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub code: String,
    pub label: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cwe: Option<String>,
    pub project: String,
}

fn sink_name(cwe: u32, j: usize) -> String {
    format!("sink{cwe}_{j}")
}

fn safe_name(cwe: u32, j: usize) -> String {
    format!("api{cwe}_{j}")
}

fn filler(rng: &mut StreamRng, out: &mut String) {
    let v = |rng: &mut StreamRng| format!("v{}", rng.random_range(0..40));
    let f = |rng: &mut StreamRng| format!("fn{}", rng.random_range(0..30));
    let n = rng.random_range(0..10);
    let line = match rng.random_range(0..5) {
        0 => format!("{} = {} + {n};", v(rng), v(rng)),
        1 => format!("if ({} > {n}) {{ {}++; }}", v(rng), v(rng)),
        2 => format!("{}({}, {});", f(rng), v(rng), v(rng)),
        3 => format!("for (i = 0; i < {}; i++) {{ {} += i; }}", v(rng), v(rng)),
        _ => format!("return {};", v(rng)),
    };
    out.push_str("  ");
    out.push_str(&line);
    out.push('\n');
}

fn api_call(name: &str, rng: &mut StreamRng) -> String {
    format!(
        "  {name}(v{}, v{});\n",
        rng.random_range(0..40),
        rng.random_range(0..40)
    )
}

/// Generate `config.n_samples` records deterministically from `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<Vec<SynthRecord>> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, &[rng::TAG_SYNTH]);
    let cwes = &CWE_IDS[..config.n_categories];
    let weights: Vec<f64> = (1..=cwes.len())
        .map(|r| (r as f64).powf(-config.category_skew))
        .collect();
    let category = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;

    let mut records = Vec::with_capacity(config.n_samples);
    for _ in 0..config.n_samples {
        let vulnerable = rng.random_bool(config.vulnerable_fraction);
        let cwe = cwes[category.sample(&mut rng)];
        let n_statements = rng.random_range(config.min_statements..=config.max_statements);
        let mut lines: Vec<String> = (0..n_statements)
            .map(|_| {
                let mut s = String::new();
                filler(&mut rng, &mut s);
                s
            })
            .collect();
        let n_calls = rng.random_range(1..=config.max_api_calls);
        for call in 0..n_calls {
            let j = rng.random_range(0..config.apis_per_category);
            let sink = vulnerable && (call == 0 || rng.random_bool(0.5));
            let name = if sink {
                sink_name(cwe, j)
            } else {
                safe_name(cwe, j)
            };
            let at = rng.random_range(0..=lines.len());
            lines.insert(at, api_call(&name, &mut rng));
        }
        if !vulnerable && rng.random_bool(config.decoy_fraction) {
            let name = sink_name(cwe, rng.random_range(0..config.apis_per_category));
            let guard = GUARDS.choose(&mut rng).expect("nonempty guards");
            let at = rng.random_range(0..=lines.len());
            let call = api_call(&name, &mut rng);
            lines.insert(
                at,
                format!(
                    "  if ({guard}(v{})) {{\n  {}  }}\n",
                    rng.random_range(0..40),
                    call
                ),
            );
        }
        let mut code = String::from("int f(int v0, char *v1) {\n");
        for l in lines {
            code.push_str(&l);
        }
        code.push_str("}\n");
        records.push(SynthRecord {
            code,
            label: u8::from(vulnerable),
            cwe: vulnerable.then(|| format!("CWE-{cwe}")),
            project: format!("project{}", rng.random_range(0..config.n_projects)),
        });
    }
    Ok(records)
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(records: &[SynthRecord], out: &mut W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_jsonl, tokenize, Label, RawForm};

    fn small() -> SynthConfig {
        SynthConfig {
            n_samples: 400,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate(&small()).unwrap();
        assert_eq!(a, generate(&small()).unwrap());
        let other = SynthConfig { seed: 1, ..small() };
        assert_ne!(a, generate(&other).unwrap());
    }

    #[test]
    fn labels_and_sinks_agree() {
        let recs = generate(&small()).unwrap();
        let vulnerable = recs.iter().filter(|r| r.label == 1).count();
        assert!((vulnerable as f64 / 400.0 - 0.5).abs() < 0.1);
        for r in &recs {
            let tokens = tokenize(&r.code);
            let sinks = tokens.iter().filter(|t| t.starts_with("sink")).count();
            let guarded = tokens.iter().any(|t| GUARDS.contains(&t.as_str()));
            match &r.cwe {
                Some(cwe) => {
                    assert!(sinks >= 1 && !guarded);
                    let prefix = format!("sink{}_", &cwe[4..]);
                    assert!(tokens
                        .iter()
                        .filter(|t| t.starts_with("sink"))
                        .all(|t| t.starts_with(&prefix)));
                }
                None => assert_eq!(sinks > 0, guarded),
            }
        }
    }

    #[test]
    fn category_frequencies_are_long_tailed() {
        let recs = generate(&SynthConfig {
            n_samples: 4000,
            ..SynthConfig::default()
        })
        .unwrap();
        let count = |c: &str| recs.iter().filter(|r| r.cwe.as_deref() == Some(c)).count();
        assert!(count("CWE-787") > 3 * count("CWE-399"));
    }

    #[test]
    fn roundtrips_through_the_loader() {
        let recs = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        write_jsonl(&recs, &mut f).unwrap();
        let ds = load_jsonl(&path, RawForm::SourceCode).unwrap();
        assert_eq!(ds.len(), 400);
        for (s, r) in ds.samples.iter().zip(&recs) {
            assert_eq!(s.label == Label::Vulnerable, r.label == 1);
            assert_eq!(s.cwe, r.cwe);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate(&SynthConfig {
            n_categories: 31,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            min_statements: 9,
            max_statements: 2,
            ..small()
        })
        .is_err());
    }
}
