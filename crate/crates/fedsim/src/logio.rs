//! Persistent run outputs: the run manifest, round logs, participation
//! records, per-client logs, the theory sidecar used for replay, and the
//! multi-run summary.
//!
//! All tabular output is RFC-4180-style CSV with a header row and '.'
//! decimals. Floats are serialized with the shortest representation that
//! parses back to the same bits, so replaying a log reproduces every
//! column exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{FedError, Result};
use crate::metrics::{theorem1_round_envelope, weighting_skew, TheoryConstants};
use crate::orchestrator::RunOutput;
use crate::vector::ksum;

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const PARTICIPATION_FILE: &str = "participation.csv";
pub const CLIENTS_FILE: &str = "clients.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const THEORY_FILE: &str = "theory.json";

/// Shortest round-trip-exact decimal form; empty string for a missing
/// value (None columns).
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    match s {
        "nan" => Ok(Some(f64::NAN)),
        "inf" => Ok(Some(f64::INFINITY)),
        "-inf" => Ok(Some(f64::NEG_INFINITY)),
        _ => s
            .parse::<f64>()
            .map(Some)
            .map_err(|e| FedError::Usage(format!("bad float `{s}`: {e}"))),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FedError + '_ {
    move |source| FedError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

/// Written before round 0 and never touched again.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub run_seed: u64,
    pub started_unix_s: u64,
    pub config: ExperimentConfig,
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig, run_seed: u64) -> Self {
        let mut files = BTreeMap::new();
        files.insert("rounds".into(), ROUNDS_FILE.into());
        files.insert("participation".into(), PARTICIPATION_FILE.into());
        files.insert("clients".into(), CLIENTS_FILE.into());
        files.insert("theory".into(), THEORY_FILE.into());
        RunManifest {
            version: env!("CARGO_PKG_VERSION").into(),
            run_seed,
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config: cfg.clone(),
            files,
        }
    }
}

/// Everything replay needs to recompute the ρ and bound columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheorySidecar {
    pub constants: Option<TheoryConstants>,
    pub rho_bar: Option<f64>,
    pub rho_tilde: Option<f64>,
    pub gamma_het: Option<f64>,
    pub sum_p_f_star: Option<f64>,
    pub f_star_global: Option<f64>,
    pub w0_dist_sq: Option<f64>,
    pub epochs: usize,
    pub p: Vec<f64>,
    pub f_stars: Vec<f64>,
    pub f_stars_known: bool,
    /// Learning rates actually used, per round (present when theory
    /// tracing was on).
    pub etas_per_round: Option<Vec<Vec<f64>>>,
    pub finished_unix_s: u64,
}

/// Write manifest before training starts.
pub fn write_manifest(dir: &Path, cfg: &ExperimentConfig, run_seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = RunManifest::new(cfg, run_seed);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| FedError::Usage(format!("manifest serialization: {e}")))?;
    write_file(&dir.join(MANIFEST_FILE), &text)
}

pub fn load_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| FedError::Usage(format!("bad manifest: {e}")))
}

/// Serialize all outputs of a completed run into `dir`.
pub fn write_run_outputs(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let n = out.p.len();

    // rounds.csv
    let mut rounds = String::new();
    rounds.push_str("round,global_loss,accuracy,dist2_to_opt,rho,thm1_rhs,lemma2_lhs,lemma2_rhs");
    for i in 0..n {
        rounds.push_str(&format!(",alpha_{i}"));
    }
    rounds.push('\n');
    for rec in &out.records {
        rounds.push_str(&format!(
            "{},{},{},{},{},{},{},{}",
            rec.round,
            fmt_f64(rec.global_loss),
            fmt_opt(rec.accuracy),
            fmt_opt(rec.dist_sq_to_opt),
            fmt_opt(rec.rho),
            fmt_opt(rec.thm1_rhs),
            fmt_opt(rec.lemma2_lhs),
            fmt_opt(rec.lemma2_rhs),
        ));
        for a in &rec.alphas {
            rounds.push(',');
            rounds.push_str(&fmt_f64(*a));
        }
        rounds.push('\n');
    }
    write_file(&dir.join(ROUNDS_FILE), &rounds)?;

    // participation.csv: 1 for the ten largest α of the round
    let mut part = String::from("round");
    for i in 0..n {
        part.push_str(&format!(",client_{i}"));
    }
    part.push('\n');
    for rec in &out.records {
        let top = top_k_indices(&rec.alphas, 10);
        part.push_str(&rec.round.to_string());
        for i in 0..n {
            part.push_str(if top.contains(&i) { ",1" } else { ",0" });
        }
        part.push('\n');
    }
    write_file(&dir.join(PARTICIPATION_FILE), &part)?;

    // clients.csv
    let mut clients =
        String::from("round,client,p,f_star,loss_report,loss_at_agg,alpha\n");
    for rec in &out.records {
        for i in 0..n {
            clients.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                rec.round,
                i,
                fmt_f64(out.p[i]),
                fmt_f64(out.f_stars[i]),
                fmt_f64(rec.client_losses[i]),
                fmt_opt(rec.client_losses_at_agg.as_ref().map(|l| l[i])),
                fmt_f64(rec.alphas[i]),
            ));
        }
    }
    write_file(&dir.join(CLIENTS_FILE), &clients)?;

    // theory sidecar
    let sidecar = TheorySidecar {
        constants: out.constants,
        rho_bar: out.rho_bar,
        rho_tilde: out.rho_tilde,
        gamma_het: out.gamma_het,
        sum_p_f_star: out.sum_p_f_star,
        f_star_global: out.f_star_global,
        w0_dist_sq: out.w_star.as_ref().map(|ws| out.w0.dist_sq(ws)),
        epochs: cfg.experiment.local_epochs,
        p: out.p.clone(),
        f_stars: out.f_stars.clone(),
        f_stars_known: out.f_stars_known,
        etas_per_round: out
            .traces
            .as_ref()
            .map(|ts| ts.iter().map(|t| t.etas.clone()).collect()),
        finished_unix_s: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| FedError::Usage(format!("sidecar serialization: {e}")))?;
    write_file(&dir.join(THEORY_FILE), &text)
}

/// Indices of the `k` largest values (ties broken toward smaller index).
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k.min(values.len()));
    order
}

/// One parsed data row of rounds.csv.
#[derive(Debug, Clone)]
pub struct RoundRow {
    pub round: usize,
    pub global_loss: f64,
    pub accuracy: Option<f64>,
    pub dist2_to_opt: Option<f64>,
    pub rho: Option<f64>,
    pub thm1_rhs: Option<f64>,
    pub lemma2_lhs: Option<f64>,
    pub lemma2_rhs: Option<f64>,
    pub alphas: Vec<f64>,
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundRow>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| FedError::Usage("empty rounds.csv".into()))?;
    let n_alphas = header.split(',').filter(|c| c.starts_with("alpha_")).count();
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 + n_alphas {
            return Err(FedError::Usage(format!(
                "rounds.csv row has {} fields, expected {}",
                fields.len(),
                8 + n_alphas
            )));
        }
        let req = |s: &str| -> Result<f64> {
            parse_opt(s)?.ok_or_else(|| FedError::Usage("missing required field".into()))
        };
        rows.push(RoundRow {
            round: fields[0]
                .parse()
                .map_err(|e| FedError::Usage(format!("bad round index: {e}")))?,
            global_loss: req(fields[1])?,
            accuracy: parse_opt(fields[2])?,
            dist2_to_opt: parse_opt(fields[3])?,
            rho: parse_opt(fields[4])?,
            thm1_rhs: parse_opt(fields[5])?,
            lemma2_lhs: parse_opt(fields[6])?,
            lemma2_rhs: parse_opt(fields[7])?,
            alphas: fields[8..]
                .iter()
                .map(|s| req(s))
                .collect::<Result<Vec<f64>>>()?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct ClientRow {
    pub round: usize,
    pub client: usize,
    pub p: f64,
    pub f_star: f64,
    pub loss_report: f64,
    pub loss_at_agg: Option<f64>,
    pub alpha: f64,
}

pub fn read_clients_csv(path: &Path) -> Result<Vec<ClientRow>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(FedError::Usage(format!(
                "clients.csv row has {} fields, expected 7",
                f.len()
            )));
        }
        let req = |s: &str| -> Result<f64> {
            parse_opt(s)?.ok_or_else(|| FedError::Usage("missing required field".into()))
        };
        rows.push(ClientRow {
            round: f[0].parse().map_err(|e| FedError::Usage(format!("{e}")))?,
            client: f[1].parse().map_err(|e| FedError::Usage(format!("{e}")))?,
            p: req(f[2])?,
            f_star: req(f[3])?,
            loss_report: req(f[4])?,
            loss_at_agg: parse_opt(f[5])?,
            alpha: req(f[6])?,
        });
    }
    Ok(rows)
}

fn load_sidecar(dir: &Path) -> Result<TheorySidecar> {
    let path = dir.join(THEORY_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| FedError::Usage(format!("bad theory sidecar: {e}")))
}

/// Outcome of a log replay: how far the recomputed ρ and bound columns
/// drifted from the stored ones.
#[derive(Debug, Clone, Copy)]
pub struct InspectReport {
    pub rounds: usize,
    pub rho_checked: usize,
    pub thm1_checked: usize,
    pub max_rho_dev: f64,
    pub max_thm1_dev: f64,
}

fn rel_dev(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Recompute the ρ and Theorem-1 columns of an emitted log from the raw
/// per-client data and compare them to the stored values.
pub fn inspect_run(dir: &Path, tolerance: f64) -> Result<InspectReport> {
    let _manifest = load_manifest(dir)?;
    let sidecar = load_sidecar(dir)?;
    let rounds = read_rounds_csv(&dir.join(ROUNDS_FILE))?;
    let clients = read_clients_csv(&dir.join(CLIENTS_FILE))?;

    let n = sidecar.p.len();
    let mut by_round: BTreeMap<usize, Vec<&ClientRow>> = BTreeMap::new();
    for row in &clients {
        by_round.entry(row.round).or_default().push(row);
    }

    let mut report = InspectReport {
        rounds: rounds.len(),
        rho_checked: 0,
        thm1_checked: 0,
        max_rho_dev: 0.0,
        max_thm1_dev: 0.0,
    };

    let mut prev_dist = sidecar.w0_dist_sq;
    for row in &rounds {
        // ρ from the per-client table
        if let (Some(stored), Some(cr)) = (row.rho, by_round.get(&row.round)) {
            if cr.len() == n && cr.iter().all(|c| c.loss_at_agg.is_some()) {
                let mut sorted = cr.clone();
                sorted.sort_by_key(|c| c.client);
                let losses: Vec<f64> =
                    sorted.iter().map(|c| c.loss_at_agg.unwrap()).collect();
                let f_stars: Vec<f64> = sorted.iter().map(|c| c.f_star).collect();
                let alphas: Vec<f64> = sorted.iter().map(|c| c.alpha).collect();
                let global = ksum(losses.iter().zip(&sidecar.p).map(|(l, p)| p * l));
                let recomputed =
                    weighting_skew(&alphas, &losses, &f_stars, &sidecar.p, global)
                        .ok_or_else(|| {
                            FedError::Usage(format!(
                                "round {}: stored ρ but recomputation degenerate",
                                row.round
                            ))
                        })?;
                let dev = rel_dev(recomputed, stored);
                report.max_rho_dev = report.max_rho_dev.max(dev);
                report.rho_checked += 1;
                if dev > tolerance {
                    return Err(FedError::Usage(format!(
                        "round {}: ρ mismatch {recomputed} vs {stored}",
                        row.round
                    )));
                }
            }
        }

        // Theorem-1 envelope from the sidecar constants
        if let (Some(stored), Some(c), Some(d0), Some(rb), Some(etas)) = (
            row.thm1_rhs,
            sidecar.constants.as_ref(),
            prev_dist,
            sidecar.rho_bar,
            sidecar
                .etas_per_round
                .as_ref()
                .and_then(|e| e.get(row.round)),
        ) {
            let rt = sidecar.rho_tilde.unwrap_or(rb);
            let g = sidecar.gamma_het.unwrap_or(0.0);
            let (recomputed, _) =
                theorem1_round_envelope(d0, c, sidecar.epochs, rb, rt, g, etas);
            let dev = rel_dev(recomputed, stored);
            report.max_thm1_dev = report.max_thm1_dev.max(dev);
            report.thm1_checked += 1;
            if dev > tolerance {
                return Err(FedError::Usage(format!(
                    "round {}: bound mismatch {recomputed} vs {stored}",
                    row.round
                )));
            }
        }
        prev_dist = row.dist2_to_opt;
    }
    Ok(report)
}

/// One row of the multi-run summary table.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub framework: String,
    pub strategy: String,
    pub seeds: usize,
    pub r90_mean: Option<f64>,
    pub r90_lo: Option<f64>,
    pub r90_hi: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub stability: Option<f64>,
    pub pi: f64,
    pub cap_pi: f64,
    pub error_bound: f64,
    pub gamma_het: Option<f64>,
}

pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

/// Emit the per-(framework, strategy) summary in CSV and as a plain text
/// table.
pub fn emit_summary(dir: &Path, rows: &[SummaryRow]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut csv = String::from(
        "framework,strategy,seeds,r90_mean,r90_lo,r90_hi,final_accuracy,stability,pi,cap_pi,error_bound,gamma\n",
    );
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.framework,
            r.strategy,
            r.seeds,
            fmt_opt(r.r90_mean),
            fmt_opt(r.r90_lo),
            fmt_opt(r.r90_hi),
            fmt_opt(r.final_accuracy),
            fmt_opt(r.stability),
            fmt_f64(r.pi),
            fmt_f64(r.cap_pi),
            fmt_f64(r.error_bound),
            fmt_opt(r.gamma_het),
        ));
    }
    write_file(&dir.join(SUMMARY_CSV), &csv)?;

    let mut txt = String::new();
    txt.push_str(&format!(
        "{:<12} {:<12} {:>5} {:>22} {:>10} {:>10} {:>8} {:>8} {:>12} {:>10}\n",
        "framework", "strategy", "seeds", "R90 (95% CI)", "final acc", "stability", "pi", "Pi",
        "err bound", "Gamma"
    ));
    for r in rows {
        let r90 = match (r.r90_mean, r.r90_lo, r.r90_hi) {
            (Some(m), Some(lo), Some(hi)) => format!("{m:.1} [{lo:.1}, {hi:.1}]"),
            _ => "-".into(),
        };
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        txt.push_str(&format!(
            "{:<12} {:<12} {:>5} {:>22} {:>10} {:>10} {:>8.3} {:>8.3} {:>12.3} {:>10}\n",
            r.framework,
            r.strategy,
            r.seeds,
            r90,
            opt(r.final_accuracy),
            opt(r.stability),
            r.pi,
            r.cap_pi,
            r.error_bound,
            opt(r.gamma_het),
        ));
    }
    write_file(&dir.join(SUMMARY_TXT), &txt)
}

/// Resolve the output directory: explicit flag beats the FEDSIM_OUT
/// environment variable beats the default.
pub fn resolve_out_dir(flag: Option<PathBuf>, default: &str) -> PathBuf {
    flag.or_else(|| std::env::var_os("FEDSIM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(default))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_roundtrip_is_exact() {
        for &x in &[0.1, 1.0 / 3.0, 1e-300, 12345.6789e17, -0.0, 2.0_f64.powi(-53)] {
            let s = fmt_f64(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(fmt_opt(None), "");
        assert_eq!(parse_opt("").unwrap(), None);
        assert_eq!(parse_opt("inf").unwrap(), Some(f64::INFINITY));
    }

    #[test]
    fn top_k_tie_prefers_smaller_index() {
        let v = vec![0.1, 0.5, 0.5, 0.2];
        assert_eq!(top_k_indices(&v, 2), vec![1, 2]);
        assert_eq!(top_k_indices(&v, 10), vec![1, 2, 3, 0]);
    }

    #[test]
    fn round_log_writes_and_reads_back() {
        use crate::config::parse_config_str;
        use crate::orchestrator::run_training;
        let cfg = parse_config_str(
            "[experiment]\nn_clients = 3\nrounds = 3\nlocal_epochs = 2\nbatch_size = 8\n\
             [data]\nkind = \"quadratic\"\ndim = 1\nsamples_per_client = 8\n\
             [lr]\nkind = \"exponential\"\neta0 = 0.1\ndecay = 1.0\n",
        )
        .unwrap();
        let out = run_training(&cfg, 0, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_manifest(dir.path(), &cfg, 0).unwrap();
        write_run_outputs(dir.path(), &cfg, &out).unwrap();

        let rows = read_rounds_csv(&dir.path().join(ROUNDS_FILE)).unwrap();
        assert_eq!(rows.len(), 3, "one data row per round");
        for (row, rec) in rows.iter().zip(&out.records) {
            assert_eq!(row.global_loss.to_bits(), rec.global_loss.to_bits());
            assert_eq!(row.alphas, rec.alphas, "fedavg alphas equal p exactly");
        }

        // participation rows sum to min(10, N)
        let part = std::fs::read_to_string(dir.path().join(PARTICIPATION_FILE)).unwrap();
        for line in part.lines().skip(1) {
            let ones: usize = line
                .split(',')
                .skip(1)
                .map(|f| f.parse::<usize>().unwrap())
                .sum();
            assert_eq!(ones, 3);
        }

        let report = inspect_run(dir.path(), 1e-9).unwrap();
        assert_eq!(report.rounds, 3);
        assert!(report.rho_checked > 0);
        assert!(report.thm1_checked > 0);
        assert!(report.max_rho_dev <= 1e-9);
        assert!(report.max_thm1_dev <= 1e-9);
    }

    #[test]
    fn summary_emission_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            SummaryRow {
                framework: "quadratic".into(),
                strategy: "fedavg".into(),
                seeds: 1,
                r90_mean: Some(8.0),
                r90_lo: Some(8.0),
                r90_hi: Some(8.0),
                final_accuracy: Some(0.97),
                stability: Some(0.3),
                pi: 1.0,
                cap_pi: 1.0,
                error_bound: 0.0,
                gamma_het: Some(0.5),
            },
            SummaryRow {
                framework: "quadratic".into(),
                strategy: "fedsoftmax".into(),
                seeds: 1,
                r90_mean: None,
                r90_lo: None,
                r90_hi: None,
                final_accuracy: None,
                stability: None,
                pi: 0.5,
                cap_pi: 2.0,
                error_bound: 10.0,
                gamma_het: Some(0.5),
            },
        ];
        emit_summary(dir.path(), &rows).unwrap();
        let csv = std::fs::read_to_string(dir.path().join(SUMMARY_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 3, "header plus one row per strategy");
        assert!(csv.lines().nth(1).unwrap().starts_with("quadratic,fedavg,1,8,8,8,"));
        assert!(dir.path().join(SUMMARY_TXT).exists());
    }

    #[test]
    fn out_dir_resolution_order() {
        let flag = resolve_out_dir(Some(PathBuf::from("/tmp/x")), "out");
        assert_eq!(flag, PathBuf::from("/tmp/x"));
        // no flag and no env var (not set in tests) → default
        if std::env::var_os("FEDSIM_OUT").is_none() {
            assert_eq!(resolve_out_dir(None, "out"), PathBuf::from("out"));
        }
    }
}
