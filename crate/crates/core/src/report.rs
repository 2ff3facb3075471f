//! Campaign reports and artifact serialization.

use std::fmt::Write as _;

use serde::{Serialize, Serializer};

use crate::energy::EnergyRecord;
use crate::fuzz::{FuzzConfig, TestCase, TestSuite};
use crate::oracle::{Confidence, Finding, VulnClass};
use crate::vm::{callers, BlockContext, FunctionCall};
use crate::Word;

/// Serialize a word as a decimal string.
pub fn word_str<S: Serializer>(w: &Word, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&w.to_string())
}

fn words_str<S: Serializer>(ws: &[Word], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(ws.iter().map(|w| w.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CallRecord {
    pub function: String,
    #[serde(serialize_with = "words_str")]
    pub args: Vec<Word>,
    #[serde(serialize_with = "word_str")]
    pub value: Word,
    #[serde(serialize_with = "word_str")]
    pub caller: Word,
    #[serde(serialize_with = "word_str")]
    pub timestamp: Word,
    #[serde(serialize_with = "word_str")]
    pub number: Word,
}

impl From<&FunctionCall> for CallRecord {
    fn from(c: &FunctionCall) -> Self {
        CallRecord {
            function: c.function.clone(),
            args: c.args.clone(),
            value: c.value,
            caller: c.caller,
            timestamp: c.block.timestamp,
            number: c.block.number,
        }
    }
}

/// A test case in readable form plus its hex encoding.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseRecord {
    pub functions: Vec<String>,
    pub hex: String,
    pub calls: Vec<CallRecord>,
}

impl From<&TestCase> for CaseRecord {
    fn from(case: &TestCase) -> Self {
        CaseRecord {
            functions: case.functions().into_iter().map(String::from).collect(),
            hex: hex::encode(case.encode()),
            calls: case.calls.iter().map(CallRecord::from).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockRecord {
    #[serde(serialize_with = "word_str")]
    pub timestamp: Word,
    #[serde(serialize_with = "word_str")]
    pub number: Word,
}

impl From<BlockContext> for BlockRecord {
    fn from(b: BlockContext) -> Self {
        BlockRecord {
            timestamp: b.timestamp,
            number: b.number,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FindingRecord {
    pub kind: VulnClass,
    pub function: String,
    pub site: String,
    pub witness: CaseRecord,
    pub confidence: Confidence,
    pub explanation: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrast: Option<BlockRecord>,
}

impl From<&Finding> for FindingRecord {
    fn from(f: &Finding) -> Self {
        FindingRecord {
            kind: f.kind,
            function: f.function.clone(),
            site: f.site.to_string(),
            witness: CaseRecord::from(&f.witness),
            confidence: f.confidence,
            explanation: f.explanation.clone(),
            contrast: f.contrast.map(BlockRecord::from),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageStats {
    pub branches: usize,
    pub covered: usize,
    pub log_csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub contract: String,
    pub sequence: Vec<String>,
    pub coverage: CoverageStats,
    pub findings: Vec<FindingRecord>,
    pub executions: u64,
    pub elapsed_ms: u64,
    /// Energy decision per target branch, ordered by branch id.
    pub energy: Vec<EnergyRecord>,
    pub config: FuzzConfig,
}

/// Build the report of one campaign. Findings are sorted by kind, function
/// and site.
pub fn report(
    contract: &str,
    findings: &[Finding],
    suite: &TestSuite,
    config: &FuzzConfig,
) -> Report {
    let mut findings: Vec<FindingRecord> = findings.iter().map(FindingRecord::from).collect();
    findings.sort_by(|a, b| {
        (a.kind, &a.function, site_key(&a.site)).cmp(&(b.kind, &b.function, site_key(&b.site)))
    });
    Report {
        contract: contract.to_string(),
        sequence: suite.sequence.clone(),
        coverage: CoverageStats {
            branches: suite.total_branches,
            covered: suite.covered.len(),
            log_csv: suite.coverage_csv(),
        },
        findings,
        executions: suite.executions,
        elapsed_ms: suite.elapsed_ms(),
        energy: suite.energy_log.values().cloned().collect(),
        config: config.clone(),
    }
}

fn site_key(site: &str) -> (u32, u32) {
    let mut it = site.split(':').map(|p| p.parse().unwrap_or(0));
    (it.next().unwrap_or(0), it.next().unwrap_or(0))
}

fn caller_name(w: Word) -> String {
    match callers().iter().position(|c| *c == w) {
        Some(0) => "attacker".into(),
        Some(i) => format!("user{i}"),
        None => format!("{w:#x}"),
    }
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "contract {}", self.contract);
        let _ = writeln!(out, "sequence {}", self.sequence.join(" -> "));
        let _ = writeln!(
            out,
            "coverage {}/{} branches after {} executions ({} ms)",
            self.coverage.covered, self.coverage.branches, self.executions, self.elapsed_ms
        );
        if self.findings.is_empty() {
            let _ = writeln!(out, "no findings");
        }
        for f in &self.findings {
            let _ = writeln!(
                out,
                "\n[{}] {} at {} ({} confidence)",
                f.kind,
                f.function,
                f.site,
                match f.confidence {
                    Confidence::High => "high",
                    Confidence::Low => "low",
                }
            );
            let _ = writeln!(out, "  {}", f.explanation);
            for c in &f.witness.calls {
                let args: Vec<String> = c.args.iter().map(|a| a.to_string()).collect();
                let _ = write!(
                    out,
                    "  {}({}) from {}",
                    c.function,
                    args.join(", "),
                    caller_name(c.caller)
                );
                if !c.value.is_zero() {
                    let _ = write!(out, " value {}", c.value);
                }
                let _ = writeln!(out, " at block {} time {}", c.number, c.timestamp);
            }
            if let Some(b) = &f.contrast {
                let _ = writeln!(out, "  contrast block {} time {}", b.number, b.timestamp);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchivedCase {
    pub id: u64,
    pub functions: Vec<String>,
    pub hex: String,
    /// Branches covered by the case, as `site:dir`.
    pub covers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteArchive {
    pub contract: String,
    pub sequence: Vec<String>,
    pub cases: Vec<ArchivedCase>,
}

pub fn archive(contract: &str, suite: &TestSuite) -> SuiteArchive {
    SuiteArchive {
        contract: contract.to_string(),
        sequence: suite.sequence.clone(),
        cases: suite
            .seeds()
            .map(|s| ArchivedCase {
                id: s.id,
                functions: s.case.functions().into_iter().map(String::from).collect(),
                hex: hex::encode(s.case.encode()),
                covers: s.covers().iter().map(|b| b.to_string()).collect(),
            })
            .collect(),
    }
}

impl SuiteArchive {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("archive serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuzz::evolve;
    use crate::lang::{compile, parse};

    fn campaign(src: &str) -> (crate::lang::Program, TestSuite, FuzzConfig) {
        let c = parse(src).unwrap();
        let p = compile(&c).unwrap();
        let cfg = FuzzConfig {
            budget: 2000,
            ..Default::default()
        };
        let s = evolve(&p, &c, &cfg);
        (p, s, cfg)
    }

    #[test]
    fn empty_findings_keep_coverage() {
        let (_, suite, cfg) =
            campaign("contract C { uint256 x; fn f(uint256 a) { if (a > 5) { x = a; } } }");
        let r = report("C", &[], &suite, &cfg);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["findings"], serde_json::json!([]));
        assert_eq!(v["coverage"]["branches"], 2);
        assert_eq!(v["coverage"]["covered"], 2);
        assert!(v["coverage"]["log_csv"]
            .as_str()
            .unwrap()
            .starts_with("elapsed_ms,executions,branches_covered,total_branches\n"));
        assert!(r.to_text().contains("no findings"));
    }

    #[test]
    fn archive_cases_decode() {
        let (p, suite, _) = campaign("contract C { uint256 x; fn f(uint256 a) { if (a == 77) { x = a; } } fn g() { x = 0; } }");
        let a = archive("C", &suite);
        assert_eq!(a.cases.len(), suite.seeds.len());
        for (case, seed) in a.cases.iter().zip(suite.seeds()) {
            let names: Vec<&str> = case.functions.iter().map(String::as_str).collect();
            let bytes = hex::decode(&case.hex).unwrap();
            assert_eq!(TestCase::decode(&p, &names, &bytes).unwrap(), seed.case);
        }
    }
}
