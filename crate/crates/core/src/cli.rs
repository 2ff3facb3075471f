//! Campaign runner and corpus harness behind the `minifuzz` binary.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use crate::energy::EnergySchedule;
use crate::fuzz::{evolve_with, Ablation, FuzzConfig, TestSuite};
use crate::lang::{compile, parse, LangError, Program};
use crate::oracle::{detect, Detector, Finding, VulnClass};
use crate::report::{archive, report, Report};

#[derive(Debug, Parser)]
#[command(
    name = "minifuzz",
    version,
    about = "Greybox fuzzer for MiniSol contracts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuzz one contract and write its report, coverage log and suite archive.
    Fuzz {
        path: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Fuzz every contract of a directory and compare with the expectation files.
    Corpus {
        dir: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Flags {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Executions per contract.
    #[arg(long, default_value_t = 100_000)]
    pub budget: u64,
    /// VM steps per call.
    #[arg(long, default_value_t = crate::vm::DEFAULT_STEP_LIMIT)]
    pub step_limit: usize,
    /// Vulnerable-branch coefficient.
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    /// Base mutation energy per target branch.
    #[arg(long, default_value_t = 64)]
    pub base_energy: u64,
    /// Exponent `p` of the rarity multiplier `R^p`.
    #[arg(long, default_value_t = 1.0)]
    pub rarity_power: f64,
    /// Sequence variants generated before pairing.
    #[arg(long, default_value_t = 8)]
    pub variants: usize,
    /// Nesting depth of the reentry harness.
    #[arg(long, default_value_t = 1)]
    pub reentry_depth: u32,
    #[arg(long, value_parser = clap::value_parser!(Ablation))]
    pub ablation: Option<Ablation>,
    /// Output directory.
    #[arg(long, env = "MINIFUZZ_OUT", default_value = "minifuzz-out")]
    pub out: PathBuf,
}

impl clap::builder::ValueParserFactory for Ablation {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Ablation>())
    }
}

impl Default for Flags {
    fn default() -> Self {
        Flags {
            seed: 0,
            budget: 100_000,
            step_limit: crate::vm::DEFAULT_STEP_LIMIT,
            alpha: 2.0,
            base_energy: 64,
            rarity_power: 1.0,
            variants: 8,
            reentry_depth: 1,
            ablation: None,
            out: PathBuf::from("minifuzz-out"),
        }
    }
}

impl Flags {
    pub fn config(&self) -> FuzzConfig {
        FuzzConfig {
            seed: self.seed,
            budget: self.budget,
            step_limit: self.step_limit,
            reentry_depth: self.reentry_depth,
            variants: self.variants,
            schedule: EnergySchedule {
                base: self.base_energy,
                alpha: self.alpha,
                rarity_power: self.rarity_power,
            },
            ablation: self.ablation,
            ..FuzzConfig::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{source}")]
    Lang { path: PathBuf, source: LangError },
    #[error("{path}: bad expectation file: {msg}")]
    Expect { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything one campaign produced.
pub struct Campaign {
    pub name: String,
    pub program: Program,
    pub suite: TestSuite,
    pub findings: Vec<Finding>,
    pub report: Report,
}

/// Parse, compile, fuzz and analyze one source text.
pub fn run_campaign(path: &Path, source: &str, config: &FuzzConfig) -> Result<Campaign, CliError> {
    let lang = |source| CliError::Lang {
        path: path.to_path_buf(),
        source,
    };
    let contract = parse(source).map_err(lang)?;
    let program = compile(&contract).map_err(lang)?;
    let mut detector = Detector::new(&program);
    let suite = evolve_with(&program, &contract, config, &mut detector);
    let findings = detect(&program, &suite, detector, config);
    let report = report(&contract.name, &findings, &suite, config);
    Ok(Campaign {
        name: contract.name.clone(),
        program,
        suite,
        findings,
        report,
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "contract".into())
}

/// Write `<stem>.report.json`, `<stem>.report.txt`, `<stem>.coverage.csv`
/// and `<stem>.suite.json` into `out`.
fn write_artifacts(out: &Path, stem: &str, c: &Campaign) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let files = [
        (format!("{stem}.report.json"), c.report.to_json()),
        (format!("{stem}.report.txt"), c.report.to_text()),
        (format!("{stem}.coverage.csv"), c.suite.coverage_csv()),
        (
            format!("{stem}.suite.json"),
            archive(&c.name, &c.suite).to_json(),
        ),
    ];
    for (name, body) in files {
        let p = out.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
    }
    Ok(())
}

/// Fuzz the contract at `path` and write its artifacts to `flags.out`.
pub fn cmd_fuzz(path: &Path, flags: &Flags) -> Result<Campaign, CliError> {
    let source = fs::read_to_string(path).map_err(io_err(path))?;
    let campaign = run_campaign(path, &source, &flags.config())?;
    write_artifacts(&flags.out, &stem(path), &campaign)?;
    Ok(campaign)
}

#[derive(Debug, Deserialize)]
struct Expectation {
    findings: Vec<VulnClass>,
}

/// Expected classes from the `<stem>.expect.json` file next to `path`.
pub fn read_expectation(path: &Path) -> Result<BTreeSet<VulnClass>, CliError> {
    let p = path.with_extension("expect.json");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let e: Expectation = serde_json::from_str(&text).map_err(|e| CliError::Expect {
        path: p.clone(),
        msg: e.to_string(),
    })?;
    Ok(e.findings.into_iter().collect())
}

/// Outcome of one corpus entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRow {
    pub name: String,
    pub expected: BTreeSet<VulnClass>,
    pub reported: BTreeSet<VulnClass>,
    pub branches: usize,
    pub covered: usize,
    pub executions: u64,
    pub elapsed_ms: u64,
    /// Tool error message, when the campaign could not run.
    pub error: Option<String>,
}

impl CorpusRow {
    pub fn matches(&self) -> bool {
        self.error.is_none() && self.expected == self.reported
    }
}

/// True/false positive and false negative counts of one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSummary {
    /// Ordered by contract file name.
    pub rows: Vec<CorpusRow>,
}

impl CorpusSummary {
    pub fn class_counts(&self) -> Vec<(VulnClass, ClassCounts)> {
        VulnClass::ALL
            .iter()
            .map(|&k| {
                let mut c = ClassCounts::default();
                for r in &self.rows {
                    match (r.expected.contains(&k), r.reported.contains(&k)) {
                        (true, true) => c.tp += 1,
                        (false, true) => c.fp += 1,
                        (true, false) => c.fn_ += 1,
                        (false, false) => {}
                    }
                }
                (k, c)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "contract,expected,reported,match,branches,covered,executions,elapsed_ms,error\n",
        );
        let join =
            |s: &BTreeSet<VulnClass>| s.iter().map(|k| k.code()).collect::<Vec<_>>().join(" ");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.name,
                join(&r.expected),
                join(&r.reported),
                r.matches(),
                r.branches,
                r.covered,
                r.executions,
                r.elapsed_ms,
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            );
        }
        out
    }

    pub fn classes_csv(&self) -> String {
        let mut out = String::from("class,tp,fp,fn\n");
        for (k, c) in self.class_counts() {
            let _ = writeln!(out, "{},{},{},{}", k.code(), c.tp, c.fp, c.fn_);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:<12} {:<12} {:>5} {:>9} {:>10}",
            "contract", "expected", "reported", "ok", "coverage", "exec/s"
        );
        let join = |s: &BTreeSet<VulnClass>| {
            if s.is_empty() {
                "-".to_string()
            } else {
                s.iter().map(|k| k.code()).collect::<Vec<_>>().join(",")
            }
        };
        let (mut covered, mut branches, mut execs, mut ms) = (0, 0, 0, 0);
        for r in &self.rows {
            if let Some(e) = &r.error {
                let _ = writeln!(out, "{:<24} error: {e}", r.name);
                continue;
            }
            covered += r.covered;
            branches += r.branches;
            execs += r.executions;
            ms += r.elapsed_ms;
            let _ = writeln!(
                out,
                "{:<24} {:<12} {:<12} {:>5} {:>9} {:>10}",
                r.name,
                join(&r.expected),
                join(&r.reported),
                if r.matches() { "yes" } else { "NO" },
                format!("{}/{}", r.covered, r.branches),
                rate(r.executions, r.elapsed_ms)
            );
        }
        let _ = writeln!(
            out,
            "\ncoverage {covered}/{branches} branches, {execs} executions, {} exec/s (campaign clock)",
            rate(execs, ms)
        );
        let _ = writeln!(out, "\nclass   tp   fp   fn");
        for (k, c) in self.class_counts() {
            let _ = writeln!(out, "{:<5} {:>4} {:>4} {:>4}", k.code(), c.tp, c.fp, c.fn_);
        }
        out
    }
}

fn rate(execs: u64, ms: u64) -> u64 {
    execs * 1000 / ms.max(1)
}

fn corpus_entry(path: &Path, flags: &Flags) -> CorpusRow {
    let name = stem(path);
    let mut row = CorpusRow {
        name: name.clone(),
        expected: BTreeSet::new(),
        reported: BTreeSet::new(),
        branches: 0,
        covered: 0,
        executions: 0,
        elapsed_ms: 0,
        error: None,
    };
    let result = read_expectation(path).and_then(|expected| {
        row.expected = expected;
        cmd_fuzz(path, flags)
    });
    match result {
        Ok(c) => {
            row.reported = c.findings.iter().map(|f| f.kind).collect();
            row.branches = c.suite.total_branches;
            row.covered = c.suite.covered.len();
            row.executions = c.suite.executions;
            row.elapsed_ms = c.suite.elapsed_ms();
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Fuzz every `*.msol` file of `dir`, one worker thread per contract, and
/// write `summary.csv` and `classes.csv` into `flags.out`.
pub fn cmd_corpus(dir: &Path, flags: &Flags) -> Result<CorpusSummary, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "msol"))
        .collect();
    paths.sort();
    let rows = std::thread::scope(|s| {
        let handles: Vec<_> = paths
            .iter()
            .map(|p| s.spawn(move || corpus_entry(p, flags)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("corpus worker panicked"))
            .collect()
    });
    let summary = CorpusSummary { rows };
    fs::create_dir_all(&flags.out).map_err(io_err(&flags.out))?;
    for (name, body) in [
        ("summary.csv", summary.to_csv()),
        ("classes.csv", summary.classes_csv()),
    ] {
        let p = flags.out.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
    }
    Ok(summary)
}

/// Entry point of the binary; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Fuzz { path, flags } => cmd_fuzz(path, flags).map(|c| {
            print!("{}", c.report.to_text());
            println!("artifacts in {}", flags.out.display());
        }),
        Command::Corpus { dir, flags } => cmd_corpus(dir, flags).map(|s| {
            print!("{}", s.to_text());
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
