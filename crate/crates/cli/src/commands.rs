//! Command dispatch. Every command writes `report.txt` plus its CSV tables
//! into the output directory.

use crate::report::{num, nums, write_table, Report};
use crate::scenario::Scenario;
use crate::CliError;
use riskshare::capital::{self, CapitalOptions, RiskMeasurementRegime};
use riskshare::comonotone::improve_allocation;
use riskshare::diagnostics::{compatibility_check, is_admissible, mix, DiagnosticsError};
use riskshare::sharing::{
    brute_force_oracle, exactness_probe, precheck, solve, Precheck, SharingProblem, SharingSolution, SolveOptions,
};
use riskshare::space::{Allocation, Belief};
use std::fs;
use std::path::Path;

/// Default grid spacing of the brute-force oracle.
pub const DEFAULT_GRID: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Solve,
    Improve,
    Diagnose,
    Capital,
    Probe,
    Oracle,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Solve => "solve",
            Self::Improve => "improve",
            Self::Diagnose => "diagnose",
            Self::Capital => "capital",
            Self::Probe => "probe",
            Self::Oracle => "oracle",
        }
    }
}

/// Command-line overrides of the scenario's solver section.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub tolerance: Option<f64>,
    pub box_bound: Option<f64>,
    pub grid: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    /// False when the precheck (or the capital assumption) failed; the
    /// results were computed anyway.
    pub checks_passed: bool,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        if self.checks_passed {
            0
        } else {
            2
        }
    }
}

struct Settings {
    tolerance: Option<f64>,
    box_bound: Option<f64>,
    grid: f64,
    seed: u64,
    max_iterations: Option<usize>,
}

impl Settings {
    fn new(s: &Scenario, o: &RunOptions) -> Self {
        let f = &s.file.solver;
        Self {
            tolerance: o.tolerance.or(f.tolerance),
            box_bound: o.box_bound.or(f.box_bound),
            grid: o.grid.or(f.grid).unwrap_or(DEFAULT_GRID),
            seed: o.seed.or(f.seed).unwrap_or(0),
            max_iterations: f.max_iterations,
        }
    }

    fn solve_options(&self) -> SolveOptions {
        let mut opts = SolveOptions {
            box_bound: self.box_bound,
            seed: self.seed,
            ..SolveOptions::default()
        };
        if let Some(t) = self.tolerance {
            opts.tolerance = t;
        }
        if let Some(m) = self.max_iterations {
            opts.max_iterations = m;
        }
        opts
    }
}

pub fn run(command: Command, scenario: &Scenario, out: &Path, options: &RunOptions) -> Result<Outcome, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Io {
        path: out.display().to_string(),
        message: e.to_string(),
    })?;
    let settings = Settings::new(scenario, options);
    let mut report = Report::new(command.name());
    report.line("atoms", scenario.space.len().to_string());
    report.line("blocks", scenario.space.block_labels().join(", "));
    report.line("agents", scenario.names.join(", "));
    for (name, rho) in scenario.names.iter().zip(&scenario.agents) {
        report.line(&format!("measure {name}"), rho.label());
    }
    let outcome = match command {
        Command::Solve => solve_command(scenario, &settings, out, &mut report)?,
        Command::Improve => improve_command(scenario, out, &mut report)?,
        Command::Diagnose => diagnose_command(scenario, &settings, out, &mut report)?,
        Command::Capital => capital_command(scenario, &settings, out, &mut report)?,
        Command::Probe => probe_command(scenario, &settings, out, &mut report)?,
        Command::Oracle => oracle_command(scenario, &settings, out, &mut report)?,
    };
    report.line("exit", outcome.exit_code().to_string());
    report.write(out)?;
    Ok(outcome)
}

fn problem(s: &Scenario) -> Result<SharingProblem, CliError> {
    Ok(SharingProblem::new(s.space.clone(), s.agents.clone(), s.file.target.clone())?)
}

fn allocation_table(s: &Scenario, out: &Path, parts: &Allocation) -> Result<(), CliError> {
    let mut header = vec!["atom".to_string(), "X".to_string()];
    header.extend(s.names.iter().cloned());
    let rows: Vec<Vec<String>> = (0..s.space.len())
        .map(|k| {
            let mut row = vec![s.space.atoms()[k].clone(), num(s.file.target[k])];
            row.extend(parts.parts.iter().map(|p| num(p.0[k])));
            row
        })
        .collect();
    write_table(out, "allocation.csv", &header, &rows)
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

/// Distinct densities in order of first appearance, with ids `Z1, Z2, …`.
#[derive(Default)]
struct DensityRegistry(Vec<Vec<f64>>);

impl DensityRegistry {
    fn id(&mut self, z: &[f64]) -> String {
        let pos = match self.0.iter().position(|d| d.iter().zip(z).all(|(a, b)| (a - b).abs() <= 1e-12)) {
            Some(p) => p,
            None => {
                self.0.push(z.to_vec());
                self.0.len() - 1
            }
        };
        format!("Z{}", pos + 1)
    }

    fn report(&self, report: &mut Report) {
        for (i, d) in self.0.iter().enumerate() {
            report.line(&format!("Z{}", i + 1), nums(d));
        }
    }
}

fn precheck_report(s: &Scenario, pre: &Precheck, registry: &mut DensityRegistry, report: &mut Report) -> Vec<Vec<String>> {
    report.section("precheck");
    report.line("passed", pre.passed.to_string());
    let order: Vec<&str> = pre.order.iter().map(|&i| s.names[i].as_str()).collect();
    report.line("order", order.join(", "));
    if let Some((agent, z, u)) = &pre.witness {
        report.line("witness agent", &s.names[*agent]);
        report.line("witness density", nums(z));
        report.line("witness direction", nums(u));
    }
    (0..s.agents.len())
        .map(|i| {
            let admissible = match &pre.admissibility[i] {
                Some(a) => a.admissible.to_string(),
                None => "exempt".to_string(),
            };
            let density = pre.densities[i].as_ref().map_or(String::new(), |z| registry.id(z));
            let witness = match &pre.witness {
                Some((agent, _, u)) if *agent == i => num(u.iter().fold(0.0f64, |m, v| m.max(v.abs()))),
                _ => String::new(),
            };
            vec![s.names[i].clone(), admissible, density, witness]
        })
        .collect()
}

fn risks_table(s: &Scenario, out: &Path, sol: &SharingSolution) -> Result<(), CliError> {
    let mut rows = Vec::with_capacity(s.agents.len() + 1);
    for (i, rho) in s.agents.iter().enumerate() {
        let conj = match &sol.certificate {
            Some(c) => num(rho.conjugate(&c.density)?.conjugate_value.value()),
            None => String::new(),
        };
        rows.push(vec![s.names[i].clone(), num(sol.per_agent_risk[i]), conj]);
    }
    let lower = sol.certificate.as_ref().map_or(String::new(), |c| num(c.lower_bound));
    rows.push(vec!["total".into(), num(sol.total_risk), lower]);
    write_table(out, "risks.csv", &header(&["agent", "risk", "conjugate"]), &rows)
}

fn solution_report(sol: &SharingSolution, report: &mut Report) {
    report.section("solution");
    report.line("method", format!("{:?}", sol.method));
    report.value("total risk", sol.total_risk);
    report.line("per-agent risk", nums(&sol.per_agent_risk));
    report.line("selection", format!("{:?}", sol.selection));
    report.value("box", sol.box_bound);
    report.value("intercept norm", sol.intercept_norm);
    report.line("at box boundary", sol.at_boundary().to_string());
    if let Some(c) = &sol.certificate {
        report.line("certificate density", nums(&c.density));
        report.value("certificate lower bound", c.lower_bound);
        report.value("duality gap", sol.total_risk - c.lower_bound);
    }
}

fn solve_command(s: &Scenario, st: &Settings, out: &Path, report: &mut Report) -> Result<Outcome, CliError> {
    let sol = solve(&problem(s)?, &st.solve_options())?;
    solution_report(&sol, report);
    let mut registry = DensityRegistry::default();
    let pre = sol.precheck.as_ref().expect("solve runs the precheck");
    let diag = precheck_report(s, pre, &mut registry, report);
    report.section("densities");
    registry.report(report);
    allocation_table(s, out, &sol.allocation)?;
    risks_table(s, out, &sol)?;
    write_table(out, "diagnostics.csv", &header(&["agent", "admissible", "compatible_density", "witness_norm"]), &diag)?;
    Ok(Outcome {
        checks_passed: pre.passed,
    })
}

fn improve_command(s: &Scenario, out: &Path, report: &mut Report) -> Result<Outcome, CliError> {
    let rows = s.file.allocation.as_ref().ok_or_else(|| CliError::Validation {
        field: "allocation".into(),
        invariant: "required by improve".into(),
    })?;
    let x = &s.file.target;
    let given = Allocation::completing(x, rows[..rows.len() - 1].to_vec());
    let beliefs: Vec<Belief> = s.agents.iter().map(|a| a.belief().clone()).collect();
    let improved = improve_allocation(x, &given, &s.space, &beliefs)?;
    report.section("improvement");
    let mut table = Vec::with_capacity(s.agents.len());
    let (mut before_total, mut after_total) = (0.0, 0.0);
    for (i, rho) in s.agents.iter().enumerate() {
        let before = rho.evaluate(&rows[i])?;
        let after = rho.evaluate(&improved.realized.parts[i].0)?;
        before_total += before;
        after_total += after;
        table.push(vec![s.names[i].clone(), num(before), num(after)]);
    }
    table.push(vec!["total".into(), num(before_total), num(after_total)]);
    report.value("total risk before", before_total);
    report.value("total risk after", after_total);
    report.line("exact split", improved.realized.is_exact_split(x).to_string());
    allocation_table(s, out, &improved.realized)?;
    write_table(out, "risks.csv", &header(&["agent", "risk_before", "risk_after"]), &table)?;
    Ok(Outcome { checks_passed: true })
}

fn diagnose_command(s: &Scenario, st: &Settings, out: &Path, report: &mut Report) -> Result<Outcome, CliError> {
    let pre = precheck(&problem(s)?, st.seed)?;
    let mut registry = DensityRegistry::default();
    let mut diag = precheck_report(s, &pre, &mut registry, report);

    // Candidate densities: the constant, each belief density, the equal
    // mixture of belief densities.
    let n = s.space.len();
    let mut candidates = vec![vec![1.0; n]];
    for rho in &s.agents {
        candidates.push(rho.belief().density().to_vec());
    }
    let m = s.agents.len() as f64;
    candidates.push((0..n).map(|k| s.agents.iter().map(|a| a.belief().density()[k]).sum::<f64>() / m).collect());
    if s.agents.len() == 2 {
        candidates.push(mix(s.agents[0].belief().density(), s.agents[1].belief().density(), 0.5));
    }
    let ids: Vec<String> = candidates.iter().map(|z| registry.id(z)).collect();

    report.section("admissibility");
    for (i, rho) in s.agents.iter().enumerate() {
        let adm = is_admissible(rho, st.seed + i as u64)?;
        report.line(&format!("{} admissible", s.names[i]), adm.admissible.to_string());
        report.value(&format!("{} gap to belief expectation", s.names[i]), adm.gap);
        if diag[i][1] == "exempt" {
            diag[i][1] = adm.admissible.to_string();
        }
        let mut compatible = Vec::new();
        for (z, id) in candidates.iter().zip(&ids) {
            match compatibility_check(rho, z) {
                Ok(r) if r.compatible() => compatible.push(id.clone()),
                Ok(_) | Err(DiagnosticsError::ConeOracleUnavailable(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        compatible.dedup();
        report.line(&format!("{} compatible candidates", s.names[i]), format!("{{{}}}", compatible.join(", ")));
        if diag[i][2].is_empty() {
            if let Some(first) = compatible.first() {
                diag[i][2] = first.clone();
            }
        }
    }
    report.section("densities");
    registry.report(report);
    write_table(out, "diagnostics.csv", &header(&["agent", "admissible", "compatible_density", "witness_norm"]), &diag)?;
    Ok(Outcome {
        checks_passed: pre.passed,
    })
}

fn capital_command(s: &Scenario, st: &Settings, out: &Path, report: &mut Report) -> Result<Outcome, CliError> {
    let sec = s.file.securities.as_ref().ok_or_else(|| CliError::Validation {
        field: "securities".into(),
        invariant: "required by capital".into(),
    })?;
    let pricing = s.beliefs[&sec.pricing].density().to_vec();
    let regimes: Vec<RiskMeasurementRegime> = s
        .agents
        .iter()
        .zip(&sec.bases)
        .map(|(rho, basis)| RiskMeasurementRegime::new(&s.space, rho.clone(), basis.clone(), pricing.clone()))
        .collect::<Result<_, _>>()?;
    let options = CapitalOptions {
        coordinate_box: st.box_bound,
        solve: SolveOptions {
            certify: false,
            ..st.solve_options()
        },
    };
    let assumption = capital::verify_assumption(&regimes)?;
    report.section("assumption");
    report.line("satisfied", assumption.satisfied.to_string());
    report.line("explanation", &assumption.explanation);
    if let Some(z) = &assumption.common_density {
        report.line("common compatible density", nums(z));
    }
    let x = &s.file.target;
    let diag: Vec<Vec<String>> = (0..s.agents.len())
        .map(|i| {
            let rep = &assumption.pricing_reports[i];
            let witness = rep
                .witness
                .as_ref()
                .map_or(String::new(), |u| num(u.iter().fold(0.0f64, |m, v| m.max(v.abs()))));
            vec![
                s.names[i].clone(),
                regimes[i].is_finite().map(|f| f.to_string()).unwrap_or_default(),
                rep.compatible().to_string(),
                witness,
            ]
        })
        .collect();
    write_table(out, "diagnostics.csv", &header(&["agent", "finite_regime", "pricing_compatible", "witness_norm"]), &diag)?;

    report.section("requirements");
    let mut singles = Vec::with_capacity(regimes.len());
    for (name, r) in s.names.iter().zip(&regimes) {
        let eta = capital::eta_single(r, x, &options)?;
        report.value(&format!("{name} stand-alone requirement"), eta.value);
        singles.push(eta.value);
    }
    if !assumption.satisfied {
        let rows: Vec<Vec<String>> = s
            .names
            .iter()
            .zip(&singles)
            .map(|(n, v)| vec![n.clone(), num(*v), String::new()])
            .collect();
        write_table(out, "risks.csv", &header(&["agent", "requirement", "conjugate"]), &rows)?;
        return Ok(Outcome { checks_passed: false });
    }
    let g = capital::eta_global(&regimes, &s.space, x, sec.unit.clone(), &options)?;
    report.value("global requirement", g.eta);
    report.line("coordinates", nums(&g.coordinates));
    report.value("price of kernel part", g.kernel_price);
    report.value("decomposition gap", g.shape_gap);
    for i in 0..regimes.len() {
        report.line(&format!("{} accepted part", s.names[i]), nums(&g.accepted[i]));
        report.line(&format!("{} kernel part", s.names[i]), nums(&g.kernel_parts[i]));
        report.line(&format!("{} unit part", s.names[i]), nums(&g.unit[i]));
    }
    allocation_table(s, out, &g.parts)?;
    let mut rows = Vec::with_capacity(regimes.len() + 1);
    for (i, rho) in s.agents.iter().enumerate() {
        let conj = rho.conjugate(&pricing)?.conjugate_value.value();
        rows.push(vec![s.names[i].clone(), num(g.eta_parts[i]), num(conj)]);
    }
    rows.push(vec!["total".into(), num(g.eta), String::new()]);
    write_table(out, "risks.csv", &header(&["agent", "requirement", "conjugate"]), &rows)?;
    Ok(Outcome { checks_passed: true })
}

fn probe_command(s: &Scenario, st: &Settings, out: &Path, report: &mut Report) -> Result<Outcome, CliError> {
    let pr = problem(s)?;
    let base = st.box_bound.unwrap_or_else(|| pr.default_box());
    let boxes: Vec<f64> = (0..4).map(|k| base * f64::from(1u32 << k)).collect();
    let pre = precheck(&pr, st.seed)?;
    let mut registry = DensityRegistry::default();
    let diag = precheck_report(s, &pre, &mut registry, report);
    let probe = exactness_probe(&pr, &boxes, &st.solve_options())?;
    report.section("probe");
    report.line("strictly decreasing", probe.strictly_decreasing.to_string());
    report.line("saturates every box", probe.saturates_every_box.to_string());
    report.line("non-attainment evidence", probe.non_attainment_evidence().to_string());
    if let Some(d) = &probe.direction {
        report.line("direction", nums(d));
    }
    let rows: Vec<Vec<String>> = probe
        .rows
        .iter()
        .map(|r| vec![num(r.box_bound), num(r.minimum), num(r.intercept_norm), r.at_boundary.to_string()])
        .collect();
    write_table(out, "probe.csv", &header(&["box", "minimum", "intercept_norm", "at_boundary"]), &rows)?;
    report.section("densities");
    registry.report(report);
    write_table(out, "diagnostics.csv", &header(&["agent", "admissible", "compatible_density", "witness_norm"]), &diag)?;
    Ok(Outcome {
        checks_passed: pre.passed,
    })
}

fn oracle_command(s: &Scenario, st: &Settings, out: &Path, report: &mut Report) -> Result<Outcome, CliError> {
    let pr = problem(s)?;
    let bound = st
        .box_bound
        .unwrap_or_else(|| s.file.target.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1.0);
    let oracle = brute_force_oracle(&pr, st.grid, bound)?;
    let sol = solve(&pr, &st.solve_options())?;
    report.section("oracle");
    report.value("grid", st.grid);
    report.value("bound", bound);
    report.line("evaluations", oracle.evaluations.to_string());
    report.value("oracle total risk", oracle.total_risk);
    report.value("solver total risk", sol.total_risk);
    report.value("difference", oracle.total_risk - sol.total_risk);
    allocation_table(s, out, &oracle.allocation)?;
    let mut rows: Vec<Vec<String>> = (0..s.agents.len())
        .map(|i| vec![s.names[i].clone(), num(oracle.per_agent_risk[i]), num(sol.per_agent_risk[i])])
        .collect();
    rows.push(vec!["total".into(), num(oracle.total_risk), num(sol.total_risk)]);
    write_table(out, "risks.csv", &header(&["agent", "oracle_risk", "solver_risk"]), &rows)?;
    let passed = sol.precheck.as_ref().map_or(true, |p| p.passed);
    Ok(Outcome { checks_passed: passed })
}
