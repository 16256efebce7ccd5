//! Implementations of the subcommands. Each writes its report to `out`.

use std::io::Write;
use std::path::Path;

use cph_core::emfit::{self, EmConfig};
use cph_core::reference::{MatrixPareto1, MatrixWeibull};
use cph_core::tails::{self, TailSummary};
use cph_core::{CphModel, MixingFamily, Observation, PhParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::*;
use crate::data::{format_sig, load_dataset, write_atomic, write_values, Dataset, Preprocessing};
use crate::error::{CliError, CliResult};
use crate::model_file::ModelFile;

const SIG: usize = 12;
/// Tail probability left outside an automatically chosen support.
const SUPPORT_TAIL: f64 = 1e-10;

fn fmt(x: f64) -> String {
    format_sig(x, SIG)
}

fn fmt_list(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(fmt).collect::<Vec<_>>().join(" ")
}

pub fn em_config(args: &EmArgs) -> CliResult<EmConfig> {
    let mixing = match args.mixing {
        MixingArg::Gamma => MixingFamily::gamma(args.alpha0.unwrap_or(1.0)),
        MixingArg::Stable => MixingFamily::stable(args.alpha0.unwrap_or(0.9), args.eta),
    }
    .map_err(|e| CliError::usage(e.to_string()))?;
    let mut config = EmConfig::new(args.dim, args.structure.into(), mixing);
    config.max_iter = args.max_iter;
    config.tol = args.tol;
    config.nodes = args.nodes;
    config.seed = args.seed;
    config.free_pi = args.free_pi;
    config.threads = args.threads;
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(config)
}

fn print_model(out: &mut dyn Write, model: &CphModel) -> CliResult<()> {
    match model.mixing() {
        MixingFamily::Gamma { alpha } => writeln!(out, "mixing: gamma, alpha = {}", fmt(*alpha))?,
        MixingFamily::Stable { alpha, eta } => {
            writeln!(out, "mixing: stable, alpha = {}, eta = {}", fmt(*alpha), fmt(*eta))?
        }
        MixingFamily::Generic(_) => writeln!(out, "mixing: generic")?,
    }
    let ph = model.ph();
    writeln!(out, "pi: {}", fmt_list(ph.pi().iter().copied()))?;
    writeln!(out, "T:")?;
    for row in ph.t().row_iter() {
        writeln!(out, "  {}", fmt_list(row.iter().copied()))?;
    }
    Ok(())
}

fn print_report(out: &mut dyn Write, label: &str, report: &cph_core::FitReport) -> CliResult<()> {
    writeln!(out, "{label}: {}", fmt(report.loglik()))?;
    let status = if report.converged { "converged" } else { "iteration limit reached" };
    writeln!(out, "iterations: {} ({status})", report.iterations)?;
    if !report.frozen.is_empty() {
        writeln!(out, "frozen states: {:?}", report.frozen)?;
    }
    print_model(out, &report.model)
}

pub fn cmd_fit(args: &FitArgs, out: &mut dyn Write) -> CliResult<()> {
    let config = em_config(&args.em)?;
    let pre = Preprocessing::new(args.shift, args.scale)?;
    let data = load_dataset(&args.data, pre)?;
    let report = emfit::fit(&data.observations, &config)?;
    let file = ModelFile::from_fit(&report, config.structure, config.seed, pre)?;
    file.save(&args.out)?;
    writeln!(out, "observations: {}", data.observations.len())?;
    print_report(out, "log-likelihood", &report)?;
    writeln!(out, "model written to {}", args.out.display())?;
    Ok(())
}

fn parse_list(text: &str, what: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::usage(format!("{what}: cannot parse '{s}'"))))
        .collect()
}

fn parse_grid(text: &str, log: bool) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [lo, hi, n] = parts.as_slice() else {
        return Err(CliError::usage(format!("grid must be LO,HI,N, got '{text}'")));
    };
    let (lo, hi): (f64, f64) = match (lo.parse::<f64>(), hi.parse::<f64>()) {
        (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() && b >= a => (a, b),
        _ => return Err(CliError::usage(format!("grid bounds must be finite with LO <= HI, got '{text}'"))),
    };
    let n: usize = n.parse().ok().filter(|&n| n >= 2).ok_or_else(|| CliError::usage("grid needs N >= 2 points"))?;
    if log && !(lo > 0.0) {
        return Err(CliError::usage("log grid needs LO > 0"));
    }
    let at = |i: usize| {
        let s = i as f64 / (n - 1) as f64;
        if log {
            (lo.ln() + s * (hi.ln() - lo.ln())).exp()
        } else {
            lo + s * (hi - lo)
        }
    };
    // Pin the end points exactly.
    Ok((0..n).map(|i| if i == 0 { lo } else if i == n - 1 { hi } else { at(i) }).collect())
}

fn eval_point(model: &CphModel, f: Functional, pre: Option<Preprocessing>, x: f64) -> Result<f64, String> {
    let to_model = |x: f64| pre.map_or(x, |p| p.forward(x));
    let r = match f {
        Functional::Pdf => model.pdf(to_model(x)).map(|v| v * pre.map_or(1.0, |p| p.scale)),
        Functional::Cdf => {
            let y = to_model(x);
            if y <= 0.0 && pre.is_some() {
                Ok(0.0)
            } else {
                model.cdf(y)
            }
        }
        Functional::Survival => {
            let y = to_model(x);
            if y <= 0.0 && pre.is_some() {
                Ok(1.0)
            } else {
                model.survival(y)
            }
        }
        Functional::Quantile => model.quantile(x).map(|q| pre.map_or(q, |p| p.inverse(q))),
    };
    r.map_err(|e| e.to_string())
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let (file, model) = ModelFile::load(&args.model)?;
    let pre = args.original_scale.then_some(file.preprocessing);
    let mut points: Vec<Result<f64, String>> = args
        .points
        .iter()
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: '{s}'")))
        .collect();
    if let Some(g) = &args.grid {
        points.extend(parse_grid(g, false)?.into_iter().map(Ok));
    }
    if let Some(g) = &args.log_grid {
        points.extend(parse_grid(g, true)?.into_iter().map(Ok));
    }
    let f = args.functional();
    let column = match f {
        Functional::Pdf => "pdf",
        Functional::Cdf => "cdf",
        Functional::Survival => "survival",
        Functional::Quantile => "quantile",
    };
    writeln!(out, "point,{column}")?;
    for (raw, p) in args.points.iter().map(Some).chain(std::iter::repeat(None)).zip(points) {
        let label = match (&p, raw) {
            (Ok(x), _) => fmt(*x),
            (Err(_), Some(s)) => s.clone(),
            (Err(_), None) => String::new(),
        };
        let value = match p.and_then(|x| eval_point(&model, f, pre, x)) {
            Ok(v) => fmt(v),
            Err(e) => format!("\"error: {}\"", e.replace('"', "'")),
        };
        writeln!(out, "{label},{value}")?;
    }
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write) -> CliResult<()> {
    if args.n < 1 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    let (file, model) = ModelFile::load(&args.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut xs = model.sample_n(args.n, &mut rng);
    if args.original_scale {
        let pre = file.preprocessing;
        xs.iter_mut().for_each(|x| *x = pre.inverse(*x));
    }
    match &args.out {
        Some(path) => write_atomic(path, |w| Ok(write_values(w, &xs)?)),
        None => Ok(write_values(out, &xs)?),
    }
}

fn describe_tail(t: &TailSummary) -> Vec<String> {
    match t {
        TailSummary::RegularlyVarying { index, constant, relative_gap, .. } => vec![
            "tail: regularly varying".to_string(),
            format!("regular-variation index: {}", fmt(*index)),
            format!("tail constant: {} (relative change from x = 1e5 to 1e6: {:.3e})", fmt(*constant), relative_gap),
        ],
        TailSummary::WeibullType { shape, rate, power, constant, heavy } => vec![
            format!("tail: Weibull type ({})", if *heavy { "heavy" } else { "light" }),
            format!(
                "survival ~ {} x^{} exp(-{} x^{})",
                fmt(*constant),
                fmt(*power),
                fmt(*rate),
                fmt(*shape)
            ),
        ],
        TailSummary::Unclassified { heavy } => {
            vec![format!("tail: {}", if *heavy { "heavy (scaling law reaches zero)" } else { "light (scaling law bounded away from zero)" })]
        }
    }
}

pub fn cmd_diagnose(args: &DiagnoseArgs, out: &mut dyn Write) -> CliResult<()> {
    let (_, model) = ModelFile::load(&args.model)?;
    let grid = tails::eta_grid(args.eta_max, args.eta_points).map_err(|e| CliError::usage(e.to_string()))?;
    print_model(out, &model)?;
    let tail = tails::tail_summary(&model);
    match &tail {
        Ok(t) => {
            for line in describe_tail(t) {
                writeln!(out, "{line}")?;
            }
        }
        Err(e) => writeln!(out, "tail: unavailable ({e})")?,
    }
    let alpha = args.alpha.or_else(|| model.mixing().alpha());
    let mut rvd = None;
    let mut breiman = None;
    if let Some(alpha) = alpha {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(CliError::usage(format!("--alpha must be positive, got {alpha}")));
        }
        if let Ok(c) = tails::breiman_constant(model.ph(), alpha) {
            writeln!(out, "breiman constant E[Y^{}]: {}", fmt(alpha), fmt(c))?;
            breiman = Some(c);
        }
        match tails::rvd_check(model.ph(), alpha, &grid) {
            Ok(r) => {
                writeln!(
                    out,
                    "rvd check at alpha = {} over {} points on [0, {}]: min modulus {:.6e} at eta = {}",
                    fmt(alpha),
                    grid.len(),
                    fmt(args.eta_max),
                    r.min_modulus,
                    fmt(r.min_eta)
                )?;
                if r.flagged() {
                    writeln!(
                        out,
                        "potential rvd failure: modulus {:.3e} below threshold {:.3e} at eta = {}",
                        r.min_modulus,
                        r.threshold,
                        fmt(r.min_eta)
                    )?;
                } else {
                    writeln!(out, "no rvd failure detected on grid")?;
                }
                rvd = Some(r);
            }
            Err(e) => writeln!(out, "rvd check: unavailable ({e})")?,
        }
    } else {
        writeln!(out, "rvd check: skipped (no index; pass --alpha)")?;
    }
    if let Some(path) = &args.json {
        let doc = serde_json::json!({
            "tail": tail.ok(),
            "breiman_constant": breiman,
            "rvd": rvd.map(|r| serde_json::json!({
                "alpha": r.alpha,
                "min_modulus": r.min_modulus,
                "min_eta": r.min_eta,
                "threshold": r.threshold,
                "flagged": r.flagged(),
                "eta_grid": r.eta_grid,
                "modulus": r.modulus,
            })),
        });
        let text = serde_json::to_string_pretty(&doc).expect("report serializes") + "\n";
        write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))?;
    }
    Ok(())
}

/// A fitting target: density and survival function.
pub struct Target {
    pub pdf: Box<dyn Fn(f64) -> f64 + Sync>,
    pub survival: Option<Box<dyn Fn(f64) -> f64 + Sync>>,
    /// Table abscissae of a tabulated density, used as panel edges.
    pub edges: Option<Vec<f64>>,
}

fn require<T: Clone>(v: &Option<T>, flag: &str, target: &str) -> CliResult<T> {
    v.clone().ok_or_else(|| CliError::usage(format!("--target {target} requires {flag}")))
}

fn target_ph(args: &FitDensityArgs, name: &str) -> CliResult<(PhParams, f64)> {
    let pi = parse_list(&require(&args.pi, "--pi", name)?, "--pi")?;
    let t = parse_list(&require(&args.matrix, "--matrix", name)?, "--matrix")?;
    let beta = require(&args.beta, "--beta", name)?;
    let ph = PhParams::from_parts(&pi, &t).map_err(|e| CliError::usage(format!("target: {e}")))?;
    Ok((ph, beta))
}

fn read_table(path: &Path) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let file = std::fs::File::open(path).map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::data(e.to_string()))?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    if header != ["x", "density"] {
        return Err(CliError::data(format!("{}: header must be 'x,density'", path.display())));
    }
    let (mut xs, mut hs) = (Vec::new(), Vec::new());
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::data(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> CliResult<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::data(format!("{}: line {line}: expected two numbers", path.display())))
        };
        let (x, h) = (num(0)?, num(1)?);
        if x < 0.0 || h < 0.0 || xs.last().is_some_and(|&prev| x <= prev) {
            return Err(CliError::data(format!(
                "{}: line {line}: x must increase from 0 and densities must be nonnegative",
                path.display()
            )));
        }
        xs.push(x);
        hs.push(h);
    }
    if xs.len() < 2 {
        return Err(CliError::data(format!("{}: need at least two rows", path.display())));
    }
    Ok((xs, hs))
}

pub fn build_target(args: &FitDensityArgs) -> CliResult<Target> {
    Ok(match args.target {
        TargetKind::MatrixWeibull => {
            let (ph, beta) = target_ph(args, "matrix-weibull")?;
            let d = MatrixWeibull::new(ph, beta).map_err(|e| CliError::usage(e.to_string()))?;
            let s = d.clone();
            Target {
                pdf: Box::new(move |x| d.pdf(x).unwrap_or(f64::NAN)),
                survival: Some(Box::new(move |x| s.survival(x).unwrap_or(f64::NAN))),
                edges: None,
            }
        }
        TargetKind::MatrixPareto1 => {
            let (ph, beta) = target_ph(args, "matrix-pareto1")?;
            let d = MatrixPareto1::new(ph, beta).map_err(|e| CliError::usage(e.to_string()))?;
            let s = d.clone();
            Target {
                pdf: Box::new(move |x| d.pdf(x).unwrap_or(f64::NAN)),
                survival: Some(Box::new(move |x| s.survival(x).unwrap_or(f64::NAN))),
                edges: None,
            }
        }
        TargetKind::Tabulated => {
            let (xs, hs) = read_table(&require(&args.table, "--table", "tabulated")?)?;
            let edges = xs.clone();
            Target {
                pdf: Box::new(move |x| {
                    if x < xs[0] || x > xs[xs.len() - 1] {
                        return 0.0;
                    }
                    let i = xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1);
                    let s = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
                    hs[i - 1] + s * (hs[i] - hs[i - 1])
                }),
                survival: None,
                edges: Some(edges),
            }
        }
        TargetKind::Model => {
            let (_, m) = ModelFile::load(&require(&args.target_model, "--target-model", "model")?)?;
            let s = m.clone();
            Target {
                pdf: Box::new(move |x| m.pdf(x).unwrap_or(f64::NAN)),
                survival: Some(Box::new(move |x| s.survival(x).unwrap_or(f64::NAN))),
                edges: None,
            }
        }
    })
}

/// Integration range leaving at most [`SUPPORT_TAIL`] in each tail.
pub fn target_support(target: &Target) -> CliResult<(f64, f64)> {
    let s = target.survival.as_ref().expect("parametric targets have a survival function");
    let mut hi = 1.0;
    while !(s(hi) < SUPPORT_TAIL) {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(CliError::Numerical("cannot locate the upper tail of the target; pass --support".into()));
        }
    }
    let mut lo = 1.0;
    while !(1.0 - s(lo) < SUPPORT_TAIL) {
        lo *= 0.5;
        if lo < 1e-300 {
            return Err(CliError::Numerical("cannot locate the lower tail of the target; pass --support".into()));
        }
    }
    Ok((lo, hi))
}

pub fn cmd_fit_density(args: &FitDensityArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut config = em_config(&args.em)?;
    config.x_nodes = args.x_nodes;
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let target = build_target(args)?;
    let (support, report) = match (&target.edges, &args.support) {
        (Some(_), Some(_)) => return Err(CliError::usage("--support does not apply to a tabulated target")),
        (Some(edges), None) => {
            let r = emfit::fit_density_panels(&*target.pdf, edges, &config);
            ((edges[0], edges[edges.len() - 1]), r)
        }
        (None, support) => {
            let support = match support {
                Some(s) => match parse_list(s, "--support")?.as_slice() {
                    [lo, hi] => (*lo, *hi),
                    _ => return Err(CliError::usage("--support must be LO,HI")),
                },
                None => target_support(&target)?,
            };
            (support, emfit::fit_density(&*target.pdf, support, &config))
        }
    };
    let report = report?;
    let file = ModelFile::from_fit(&report, config.structure, config.seed, Preprocessing::default())?;
    file.save(&args.out)?;
    writeln!(out, "support: [{}, {}]", fmt(support.0), fmt(support.1))?;
    print_report(out, "cross-entropy", &report)?;
    writeln!(out, "model written to {}", args.out.display())?;
    Ok(())
}

/// Nelson–Aalen estimate at each distinct event time: `(t, Ĥ(t))`.
/// Censored observations at an event time are still at risk there.
pub fn nelson_aalen(data: &[(f64, bool)]) -> Vec<(f64, f64)> {
    let mut sorted = data.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let mut h = 0.0;
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let t = sorted[i].0;
        let at_risk = n - i;
        let mut j = i;
        let mut events = 0;
        while j < n && sorted[j].0 == t {
            events += usize::from(sorted[j].1);
            j += 1;
        }
        if events > 0 {
            h += events as f64 / at_risk as f64;
            out.push((t, h));
        }
        i = j;
    }
    out
}

fn exact_values(data: &Dataset, kind: &str) -> CliResult<Vec<f64>> {
    if data.has_censoring() {
        return Err(CliError::data(format!("{kind} requires exact observations only")));
    }
    Ok(data.observations.iter().map(|o| o.value()).collect())
}

pub fn cmd_plotdata(args: &PlotArgs, _out: &mut dyn Write) -> CliResult<()> {
    let (file, model) = ModelFile::load(&args.model)?;
    let pre = if args.original_scale { file.preprocessing } else { Preprocessing::default() };
    let data = load_dataset(&args.data, pre)?;
    let mut rows: Vec<[f64; 4]> = Vec::new();
    let header: &str;
    match args.kind {
        PlotKind::Hist => {
            header = "bin_left,bin_right,empirical_density,model_density";
            let xs: Vec<f64> = exact_values(&data, "a histogram")?.into_iter().map(|x| pre.inverse(x)).collect();
            let n = xs.len();
            let k = args.bins.unwrap_or(((n as f64).sqrt().ceil() as usize).clamp(5, 100));
            if k == 0 {
                return Err(CliError::usage("--bins must be positive"));
            }
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(hi > lo) {
                return Err(CliError::data("a histogram needs at least two distinct values"));
            }
            let width = (hi - lo) / k as f64;
            let edge = |i: usize| if i == k { hi } else { lo + width * i as f64 };
            let mut counts = vec![0usize; k];
            for x in &xs {
                counts[(((x - lo) / width) as usize).min(k - 1)] += 1;
            }
            for (i, c) in counts.iter().enumerate() {
                let (a, b) = (edge(i), edge(i + 1));
                let mid = 0.5 * (a + b);
                let f = model.pdf(pre.forward(mid))? * pre.scale;
                rows.push([a, b, *c as f64 / (n as f64 * (b - a)), f]);
            }
        }
        PlotKind::Qq => {
            header = "empirical_quantile,model_quantile";
            let mut xs = exact_values(&data, "a QQ plot")?;
            xs.sort_by(f64::total_cmp);
            let n = xs.len() as f64;
            for (i, x) in xs.iter().enumerate() {
                let q = model.quantile((i as f64 + 0.5) / n)?;
                rows.push([pre.inverse(*x), pre.inverse(q), 0.0, 0.0]);
            }
        }
        PlotKind::Cumhazard => {
            header = "time,nelson_aalen,model_cumhazard";
            let mut pts = Vec::with_capacity(data.observations.len());
            for o in &data.observations {
                pts.push(match *o {
                    Observation::Exact(x) => (x, true),
                    Observation::RightCensored(v) => (v, false),
                    Observation::Interval(v, w) if w.is_infinite() => (v, false),
                    Observation::Interval(..) => {
                        return Err(CliError::data("cumulative hazard supports exact and right-censored data only"))
                    }
                });
            }
            for (t, h) in nelson_aalen(&pts) {
                let model_h = -model.survival(t)?.ln();
                rows.push([pre.inverse(t), h, model_h, 0.0]);
            }
        }
    }
    let columns = header.split(',').count();
    write_atomic(&args.out, |w| {
        writeln!(w, "{header}")?;
        for r in &rows {
            let cells: Vec<String> = r[..columns].iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    })
}
