use std::fmt::Write as _;

use anyhow::Result;
use mvgp_core::dataio::{kfold_split, load_dataset, noanalog_split, CompositionMatrix};
use mvgp_core::eval::{
    crossval as run_crossval, reconstruct_with, ConfiguredModel, Holdout, ModelKind, ModelSettings, Reconstructor,
};
use mvgp_core::sim::{simulate as run_sim, SimConfig, SCENARIO_NOTE};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{self, usage};
use crate::output::{named, Manifest, Outputs};
use crate::{CrossvalArgs, FitArgs, SimulateArgs};

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let file = config::load(Some(&a.config))?;
    let sec = file
        .sim
        .clone()
        .ok_or_else(|| usage(format!("{} has no [sim] table", a.config.display())))?;
    let seed = a.seed.or(sec.seed).or(file.seed).unwrap_or(1);
    let cfg: SimConfig = sec.resolve(Some(seed));
    let out = run_sim(&cfg)?;
    let mut o = Outputs::default();
    o.add("counts.csv", out.counts.to_csv_string());
    o.add("covariates.csv", out.covariates.to_csv_string());
    o.add("truth.json", out.truth.to_json() + "\n");
    let mut m = Manifest::new("simulate", vec![a.config.display().to_string()], seed, &cfg);
    m.note = Some(SCENARIO_NOTE.to_string());
    m.finish(o, &a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct FitSnapshot<'a> {
    model: ModelKind,
    settings: &'a ModelSettings,
}

fn parse_model(s: &str) -> Result<ModelKind> {
    s.parse::<ModelKind>().map_err(|e| usage(e.to_string()))
}

fn report(warnings: &[String]) {
    for w in warnings {
        eprintln!("WARNING: {w}");
    }
}

fn matrix_csv(names: &[String], m: &DMatrix<f64>) -> String {
    let mut out = String::from("species");
    for n in names {
        write!(out, ",{n}").unwrap();
    }
    out.push('\n');
    for (i, n) in names.iter().enumerate() {
        out.push_str(n);
        for j in 0..m.ncols() {
            write!(out, ",{}", m[(i, j)]).unwrap();
        }
        out.push('\n');
    }
    out
}

fn curves_csv(names: &[String], grid: &[f64], m: &DMatrix<f64>) -> String {
    let mut out = String::from("x");
    for n in names {
        write!(out, ",{n}").unwrap();
    }
    out.push('\n');
    for (g, x) in grid.iter().enumerate() {
        write!(out, "{x}").unwrap();
        for j in 0..m.ncols() {
            write!(out, ",{}", m[(g, j)]).unwrap();
        }
        out.push('\n');
    }
    out
}

fn input_names(a: &crate::DataArgs) -> Vec<String> {
    let mut v = vec![a.counts.display().to_string(), a.covariates.display().to_string()];
    if let Some(c) = &a.config {
        v.push(c.display().to_string());
    }
    v
}

fn load(a: &crate::DataArgs) -> Result<(CompositionMatrix, mvgp_core::dataio::CovariateSet)> {
    Ok(load_dataset(&a.counts, &a.covariates)?)
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let file = config::load(a.data.config.as_deref())?;
    let kind = parse_model(&a.model)?;
    let seed = a.data.seed.or(file.seed).unwrap_or(1);
    let settings = config::resolve_settings(&file, &a.flags, seed)?;
    let (counts, cs) = load(&a.data)?;
    let rec = reconstruct_with(kind, &settings, &counts, &cs, seed, true)?;
    report(&rec.warnings);

    let mut o = Outputs::default();
    let mut pred = String::from("row_id,point,lower,upper\n");
    let mut draws = String::from("row_id,draw,value\n");
    for (row, p) in rec.rows.iter().zip(&rec.predictions) {
        let s = p.summary();
        writeln!(pred, "{row},{},{},{}", s.mean, s.lower, s.upper).unwrap();
        if let mvgp_core::eval::Prediction::Draws { draws: d } = p {
            for (k, v) in d.iter().enumerate() {
                writeln!(draws, "{row},{k},{v}").unwrap();
            }
        }
    }
    o.add("predictions.csv", pred);
    if kind.is_probabilistic() {
        o.add("draws.csv", draws);
    }
    let snapshot = FitSnapshot {
        model: kind,
        settings: &settings,
    };
    let mut m = Manifest::new("fit", input_names(&a.data), seed, snapshot);
    if let Some(art) = &rec.artifacts {
        for (c, csv) in art.chain_csvs.iter().enumerate() {
            o.add(format!("posterior/chain{}.csv", c + 1), csv.clone());
        }
        let names = counts.species_names();
        if let Some((grid, curves)) = &art.response {
            o.add("response_curves.csv", curves_csv(names, grid, curves));
        }
        if let Some(corr) = &art.correlation {
            o.add("correlation.csv", matrix_csv(names, corr));
        }
        if !art.knots.is_empty() {
            m.knots = Some(art.knots.clone());
        }
        m.rhat = named(&art.rhat);
        m.acceptance = art.acceptance.iter().map(|c| named(c)).collect();
    }
    m.max_rhat = rec.max_rhat;
    m.warnings = rec.warnings.clone();
    m.finish(o, &a.data.out)?;
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum HoldoutSpec {
    RandomFolds { k: usize },
    NoAnalog { quantile: f64, threshold: f64 },
}

#[derive(Serialize)]
struct CrossvalSnapshot<'a> {
    models: &'a [ModelKind],
    holdout: HoldoutSpec,
    settings: &'a ModelSettings,
}

pub fn crossval(a: &CrossvalArgs) -> Result<()> {
    let file = config::load(a.data.config.as_deref())?;
    let names: Vec<String> = if !a.models.is_empty() {
        a.models.clone()
    } else if let Some(m) = &file.models {
        m.clone()
    } else {
        ModelKind::ALL.iter().map(|m| m.name().to_string()).collect()
    };
    let mut kinds = Vec::new();
    for n in &names {
        let k = parse_model(n)?;
        if kinds.contains(&k) {
            return Err(usage(format!("model '{n}' listed twice")));
        }
        kinds.push(k);
    }
    let seed = a.data.seed.or(file.seed).unwrap_or(1);
    let settings = config::resolve_settings(&file, &a.flags, seed)?;
    let k = a.k.or(file.k).unwrap_or(12);
    if let Some(q) = a.no_analog {
        if !(q > 0.0 && q < 1.0) {
            return Err(usage(format!("--no-analog quantile {q} must lie in (0, 1)")));
        }
    }
    let (counts, cs) = load(&a.data)?;
    let holdout = match a.no_analog {
        Some(q) => Holdout::Split(noanalog_split(&cs, q)?),
        None => {
            if k < 2 || k > counts.n_rows() {
                return Err(usage(format!("--k {k} must lie in 2..={}", counts.n_rows())));
            }
            Holdout::Folds(kfold_split(counts.n_rows(), k, seed)?)
        }
    };
    let models: Vec<ConfiguredModel> = kinds.iter().map(|&kind| ConfiguredModel { kind, settings }).collect();
    let refs: Vec<&dyn Reconstructor> = models.iter().map(|m| m as &dyn Reconstructor).collect();
    let res = run_crossval(&refs, &counts, &cs, &holdout, seed)?;

    let mut o = Outputs::default();
    o.add("scores.csv", res.report.to_csv_string());
    let split_csv = match &holdout {
        Holdout::Folds(f) => f.to_csv_string(),
        Holdout::Split(s) => {
            let mut out = String::from("row_id,fold\n");
            let mut rows: Vec<(usize, u8)> = s.train.iter().map(|&r| (r, 0)).chain(s.test.iter().map(|&r| (r, 1))).collect();
            rows.sort_unstable();
            for (r, f) in rows {
                writeln!(out, "{r},{f}").unwrap();
            }
            out
        }
    };
    o.add("folds.csv", split_csv);
    let mut warnings = Vec::new();
    for f in &res.folds {
        match &f.result {
            Ok(ps) => o.add(format!("folds/{}_fold{:02}.csv", f.model, f.fold), ps.to_csv_string()),
            Err(e) => warnings.push(format!("{} failed on fold {}: {e}", f.model, f.fold)),
        }
        warnings.extend(f.warnings.iter().map(|w| format!("{} fold {}: {w}", f.model, f.fold)));
    }
    report(&warnings);
    let spec = match (&holdout, a.no_analog) {
        (Holdout::Split(s), Some(q)) => HoldoutSpec::NoAnalog {
            quantile: q,
            threshold: s.threshold,
        },
        _ => HoldoutSpec::RandomFolds { k },
    };
    let snapshot = CrossvalSnapshot {
        models: &kinds,
        holdout: spec,
        settings: &settings,
    };
    let mut m = Manifest::new("crossval", input_names(&a.data), seed, snapshot);
    m.warnings = warnings;
    m.finish(o, &a.data.out)?;
    Ok(())
}
