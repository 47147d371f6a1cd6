//! Subcommand bodies. Each returns `Outcome::Finding` for results that map to
//! exit code 1 and an error for everything that stops the run.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context};
use serde::Serialize;
use serde_json::json;
use statetame::american::{
    fixed_date_candidates, improve_to_value, price_sacc, snell_lattice_oracle, write_exercise_region_csv,
    BinomialLattice, MAX_PATH_STEPS,
};
use statetame::arbitrage::{construct_arbitrage_portfolio, detect_state_arbitrage, simulate_gain};
use statetame::deflator::{deflator_paths, estimate_ez0, integrability_diagnostic, DeflatorSet};
use statetame::european::{
    attainability_check, hedge_wealth_surface, price_secc, replication_portfolio, write_hedge_path_csv,
};
use statetame::portfolio::PortfolioProcess;
use statetame::sde::{simulate_scenarios, ScenarioSet};
use statetame::stats::Estimate;

use crate::config::{ClaimEntry, EstimatorKind, RunConfig, Style};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// Arbitrage found, claim not attainable, or replication failed.
    Finding,
}

impl Outcome {
    fn and(self, other: Outcome) -> Outcome {
        if self == Outcome::Finding || other == Outcome::Finding {
            Outcome::Finding
        } else {
            Outcome::Ok
        }
    }
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> anyhow::Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn scenarios(cfg: &RunConfig) -> anyhow::Result<ScenarioSet> {
    let grid = cfg.grid()?;
    let model = cfg.market()?;
    Ok(simulate_scenarios(&model, &grid, cfg.n_paths, cfg.seed)?)
}

fn scenarios_and_deflators(cfg: &RunConfig) -> anyhow::Result<(ScenarioSet, DeflatorSet)> {
    let scen = scenarios(cfg)?;
    let defl = deflator_paths(&scen, cfg.tolerances.rank)?;
    Ok((scen, defl))
}

/// Validates everything that can be checked without simulating.
pub fn validate(cfg: &RunConfig) -> anyhow::Result<()> {
    cfg.grid()?;
    let model = cfg.market()?;
    for c in &cfg.claims {
        c.spec()?
            .validate(model.n_assets(), model.n_drivers())
            .with_context(|| format!("claim `{}`", c.id))?;
    }
    if cfg.n_paths == 0 {
        bail!("n_paths must be positive");
    }
    Ok(())
}

pub fn simulate(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let scen = scenarios(cfg)?;
    let out = &cfg.output_dir;
    let mut w = create(out, "scenarios.csv")?;
    scen.write_csv(&mut w)?;
    w.flush()?;

    let (n, last) = (scen.n_paths(), scen.n_steps());
    let terminal_price: Vec<Estimate> = (0..scen.n_assets())
        .map(|i| Estimate::from_samples(&(0..n).map(|p| scen.price(p, last, i)).collect::<Vec<_>>()))
        .collect();
    let bond = Estimate::from_samples(&(0..n).map(|p| scen.bond(p, last)).collect::<Vec<_>>());
    let aux = scen
        .has_aux()
        .then(|| Estimate::from_samples(&(0..n).map(|p| scen.aux(p, last)).collect::<Vec<_>>()));
    write_json(
        out,
        "summary.json",
        &json!({
            "n_paths": n,
            "n_steps": last,
            "horizon": scen.grid().horizon(),
            "seed": cfg.seed,
            "terminal_price": terminal_price,
            "terminal_bond": bond,
            "terminal_aux": aux,
        }),
    )?;
    Ok(Outcome::Ok)
}

fn write_portfolio_csv<W: Write>(writer: W, pf: &PortfolioProcess, scen: &ScenarioSet) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["path".to_string(), "step".into(), "t".into()];
    header.extend((0..pf.n_assets()).map(|i| format!("pi_{i}")));
    w.write_record(&header)?;
    for p in 0..pf.n_paths() {
        for k in 0..pf.n_points() {
            let mut row = vec![p.to_string(), k.to_string(), scen.grid().t(k).to_string()];
            row.extend(pf.amounts(p, k).iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn check_arbitrage(cfg: &RunConfig) -> anyhow::Result<Outcome> {
    let (scen, defl) = scenarios_and_deflators(cfg)?;
    let out = &cfg.output_dir;
    let report = detect_state_arbitrage(&scen, &defl, cfg.tolerances.arbitrage)?;
    let integrability = integrability_diagnostic(&defl, scen.model().integral_cap());
    let ez0 = estimate_ez0(&defl)?;

    let mut gain_summary = serde_json::Value::Null;
    if !report.is_state_arbitrage_free {
        let pf = construct_arbitrage_portfolio(&scen, &defl, cfg.tolerances.arbitrage)?;
        let gain = simulate_gain(&pf, &scen)?;
        let terminal = gain.deflated_terminal(&defl);
        let n = terminal.len() as f64;
        gain_summary = json!({
            "deflated_terminal_gain": Estimate::from_samples(&terminal),
            "min_deflated_terminal_gain": terminal.iter().cloned().fold(f64::INFINITY, f64::min),
            "fraction_positive": terminal.iter().filter(|&&g| g > 0.0).count() as f64 / n,
            "portfolio_file": "arbitrage_portfolio.csv",
            "gain_file": "arbitrage_gain.csv",
        });
        write_portfolio_csv(create(out, "arbitrage_portfolio.csv")?, &pf, &scen)?;
        let mut w = create(out, "arbitrage_gain.csv")?;
        gain.write_csv(&mut w)?;
        w.flush()?;
        log::warn!(
            "state arbitrage: kernel residual up to {} at {} grid points",
            report.max_residual_norm,
            report.n_offending
        );
    }
    write_json(
        out,
        "arbitrage_report.json",
        &json!({
            "report": report,
            "min_rank": defl.min_rank(),
            "ez0": ez0,
            "integrability": integrability,
            "arbitrage_gain": gain_summary,
        }),
    )?;
    Ok(if report.is_state_arbitrage_free {
        Outcome::Ok
    } else {
        Outcome::Finding
    })
}

fn european_claim(
    cfg: &RunConfig,
    entry: &ClaimEntry,
    scen: &ScenarioSet,
    defl: &DeflatorSet,
    hedge: bool,
) -> anyhow::Result<Outcome> {
    let out = &cfg.output_dir;
    let id = &entry.id;
    let spec = entry.spec()?;
    let report = price_secc(&spec, scen, defl)?;
    write_json(out, &format!("valuation_{id}.json"), &report)?;

    let support = spec.support_or_all(scen.n_drivers());
    if hedge {
        let att = attainability_check(scen, &support, cfg.tolerances.rank)?;
        write_json(out, &format!("attainability_{id}.json"), &att)?;
        if !att.attainable() {
            eprintln!(
                "claim `{id}` is not attainable: rank condition fails, the volatility columns of drivers {:?} have rank {} < {} on some path",
                att.support, att.min_rank, att.k
            );
            return Ok(Outcome::Finding);
        }
    }
    let surface = hedge_wealth_surface(&spec, scen, defl, cfg.estimator.degree)?;
    let replication = if hedge {
        Some(replication_portfolio(&surface, defl, scen, cfg.tolerances.replication)?)
    } else {
        None
    };
    let mut w = create(out, &format!("hedge_path_{id}.csv"))?;
    write_hedge_path_csv(&mut w, &surface, replication.as_ref(), scen, 0)?;
    w.flush()?;
    let Some(rep) = replication else {
        return Ok(Outcome::Ok);
    };
    write_json(
        out,
        &format!("hedge_{id}.json"),
        &json!({
            "initial_wealth": surface.initial_wealth(),
            "support": surface.support(),
            "degrees": surface.degrees,
            "max_residual": rep.max_residual,
            "tolerance": rep.tolerance,
            "flagged": rep.flagged,
            "terminal_rmse": rep.terminal_rmse(),
            "terminal_max_abs": rep.terminal_max_abs(),
        }),
    )?;
    if rep.flagged {
        eprintln!(
            "claim `{id}`: replication residual {} exceeds tolerance {}",
            rep.max_residual, rep.tolerance
        );
        return Ok(Outcome::Finding);
    }
    Ok(Outcome::Ok)
}

pub fn price_european(cfg: &RunConfig, claim: Option<&str>, force_hedge: bool) -> anyhow::Result<Outcome> {
    let entries = cfg.select_claims(claim, Some(Style::European))?;
    let (scen, defl) = scenarios_and_deflators(cfg)?;
    let mut outcome = Outcome::Ok;
    for entry in entries {
        outcome = outcome.and(european_claim(cfg, entry, &scen, &defl, force_hedge || entry.hedge)?);
    }
    Ok(outcome)
}

fn american_on_lattice(cfg: &RunConfig, entry: &ClaimEntry) -> anyhow::Result<()> {
    let out = &cfg.output_dir;
    let id = &entry.id;
    let spec = entry.spec()?;
    if !spec.rate.is_zero() {
        bail!("claim `{id}`: the lattice backend prices settlement-only claims");
    }
    let steps = cfg.estimator.lattice_steps;
    if steps > MAX_PATH_STEPS {
        bail!("lattice_steps {steps} exceeds the enumerable limit {MAX_PATH_STEPS}");
    }
    let (p0, r, q, vol) = cfg.lattice_parameters()?;
    let lattice = BinomialLattice::crr(p0, r, q, vol, cfg.grid.horizon, steps, &spec.payoff)?;
    let paths = lattice.paths()?;
    let est = lattice.tree_estimator()?;
    let cands = fixed_date_candidates(&paths);
    let trace = improve_to_value(&cands, &paths, &est, cfg.estimator.order, cfg.estimator.rounds)?;
    let oracle = snell_lattice_oracle(&lattice);
    write_json(
        out,
        &format!("american_{id}.json"),
        &json!({
            "backend": "lattice",
            "n_steps": steps,
            "value": trace.value,
            "lattice_value": oracle.value,
            "european_value": lattice.european_value(),
            "order": trace.order,
            "max_decrease": trace.max_decrease,
        }),
    )?;
    let mut w = create(out, &format!("trace_{id}.csv"))?;
    trace.write_csv(&mut w)?;
    w.flush()?;
    write_boundary_csv(
        out,
        &format!("exercise_region_{id}.csv"),
        &oracle.exercise_boundary(&lattice),
    )
}

fn write_boundary_csv(out: &Path, name: &str, boundary: &[(usize, f64, f64)]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(create(out, name)?);
    w.write_record(["step", "price_min", "price_max"])?;
    for (k, lo, hi) in boundary {
        w.write_record(&[k.to_string(), lo.to_string(), hi.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn american_on_paths(
    cfg: &RunConfig,
    entry: &ClaimEntry,
    scen: &ScenarioSet,
    defl: &DeflatorSet,
) -> anyhow::Result<()> {
    let out = &cfg.output_dir;
    let id = &entry.id;
    let spec = entry.spec()?;
    let res = price_sacc(&spec, scen, defl, &cfg.estimator.american())?;
    write_json(
        out,
        &format!("american_{id}.json"),
        &json!({
            "backend": "regression",
            "report": res.report,
            "out_of_sample": res.out_of_sample,
            "training_value": res.trace.value,
            "order": res.trace.order,
            "payoff_max": res.trace.payoff_max,
            "near_payoff_max": res.trace.near_payoff_max,
            "max_decrease": res.trace.max_decrease,
            "min_payoff": res.min_payoff,
        }),
    )?;
    if res.trace.near_payoff_max {
        log::warn!("claim `{id}`: tournament value approaches the pathwise payoff maximum");
    }
    let mut w = create(out, &format!("trace_{id}.csv"))?;
    res.trace.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(out, &format!("exercise_region_{id}.csv"))?;
    write_exercise_region_csv(&mut w, &res.rule, &res.evaluation_paths, scen)?;
    w.flush()?;
    Ok(())
}

pub fn price_american(cfg: &RunConfig, claim: Option<&str>) -> anyhow::Result<Outcome> {
    let entries = cfg.select_claims(claim, Some(Style::American))?;
    match cfg.estimator.kind {
        EstimatorKind::Lattice => {
            for entry in entries {
                american_on_lattice(cfg, entry)?;
            }
        }
        EstimatorKind::Regression => {
            let (scen, defl) = scenarios_and_deflators(cfg)?;
            for entry in entries {
                american_on_paths(cfg, entry, &scen, &defl)?;
            }
        }
    }
    Ok(Outcome::Ok)
}

pub fn oracle(cfg: &RunConfig, claim: Option<&str>) -> anyhow::Result<Outcome> {
    let entries = cfg.select_claims(claim, None)?;
    let (p0, r, q, vol) = cfg.lattice_parameters()?;
    let out = &cfg.output_dir;
    for entry in entries {
        let id = &entry.id;
        let spec = entry.spec()?;
        if !spec.rate.is_zero() {
            bail!("claim `{id}`: the lattice oracle prices settlement-only claims");
        }
        let lattice = BinomialLattice::crr(p0, r, q, vol, cfg.grid.horizon, cfg.oracle.n_steps, &spec.payoff)?;
        let oracle = snell_lattice_oracle(&lattice);
        let european = lattice.european_value();
        write_json(
            out,
            &format!("oracle_{id}.json"),
            &json!({
                "n_steps": cfg.oracle.n_steps,
                "american_value": oracle.value,
                "european_value": european,
                "early_exercise_premium": oracle.value - european,
            }),
        )?;
        write_boundary_csv(
            out,
            &format!("exercise_boundary_{id}.csv"),
            &oracle.exercise_boundary(&lattice),
        )?;
    }
    Ok(Outcome::Ok)
}
