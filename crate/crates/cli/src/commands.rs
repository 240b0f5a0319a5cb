use std::fs;
use std::path::{Path, PathBuf};

use probe_core::data::{ingest_csv, mean_std, ColumnKind, Schema};
use probe_core::flow1d::{density_grid, train_1d};
use probe_core::flownd::{train_conditional, train_nd};
use probe_core::heads::{estimate_params, train_classifier, train_regression, FamilyKind};
use probe_core::numeric::{seeded_rng, streams};
use probe_core::timeevo::{
    evolve_nonlinear, recover_input_density, train_time_model, InputAssignment,
};
use probe_core::verify::{compare_densities, linspace, normal_cdf, VerificationRecord};
use probe_core::{Dataset, Error, Result, RunReport, TrainConfig};

use crate::cli::RunArgs;
use crate::plot::{line_plot, Series};

/// Auxiliary draws per point when recovering time-model densities.
const TIME_MODEL_DRAWS: usize = 64;

struct Run {
    data: Dataset,
    config: TrainConfig,
    out: PathBuf,
    reference: Option<Reference>,
}

/// Rows of a reference CSV: coordinates and the density value `phi`.
struct Reference {
    coords: Vec<Vec<f64>>,
    phi: Vec<f64>,
}

impl Reference {
    fn read(path: &Path) -> Result<Self> {
        let ds = ingest_csv(path, &Schema::new())?;
        let names = ds.names().to_vec();
        let phi_name = if names.iter().any(|n| n == "phi") {
            "phi".to_string()
        } else {
            names.last().cloned().ok_or(Error::EmptyData)?
        };
        let coord_names: Vec<String> = names
            .iter()
            .filter(|n| **n != phi_name && *n != "cdf")
            .cloned()
            .collect();
        if coord_names.is_empty() {
            return Err(Error::invalid(
                "reference CSV needs coordinate columns and a phi column",
            ));
        }
        Ok(Reference {
            coords: ds.numeric_rows(&coord_names)?,
            phi: ds.numeric(&phi_name)?.to_vec(),
        })
    }

    fn width(&self) -> usize {
        self.coords.first().map_or(0, Vec::len)
    }

    fn require_width(&self, n: usize) -> Result<()> {
        if self.width() != n {
            return Err(Error::invalid(format!(
                "reference has {} coordinate columns, the model has {n}",
                self.width()
            )));
        }
        Ok(())
    }

    /// Grid comparison for one coordinate; adds an L1 check.
    fn compare_1d(
        &self,
        config: &TrainConfig,
        estimate: impl Fn(f64) -> Result<f64>,
        report: &mut RunReport,
    ) -> Result<Series> {
        self.require_width(1)?;
        let grid: Vec<f64> = self.coords.iter().map(|c| c[0]).collect();
        let est: Vec<f64> = grid.iter().map(|&x| estimate(x)).collect::<Result<_>>()?;
        let cmp = compare_densities(&self.phi, &est, &grid)?;
        report.checks.push(VerificationRecord::at_most(
            "reference.l1",
            "grid L1 distance to reference",
            cmp.l1,
            config.tolerance_or("reference.l1", 0.15),
        ));
        Ok(Series::new(
            "reference",
            grid.into_iter().zip(self.phi.iter().copied()).collect(),
        ))
    }

    /// Pointwise comparison for several coordinates; adds a max-deviation check.
    fn compare_points(
        &self,
        config: &TrainConfig,
        estimate: impl Fn(&[f64]) -> Result<f64>,
        report: &mut RunReport,
    ) -> Result<()> {
        let mut worst: f64 = 0.0;
        for (c, p) in self.coords.iter().zip(&self.phi) {
            worst = worst.max((estimate(c)? - p).abs());
        }
        report.checks.push(VerificationRecord::at_most(
            "reference.max_abs",
            "max |estimate - reference|",
            worst,
            config.tolerance_or("reference.max_abs", 0.05),
        ));
        Ok(())
    }
}

fn load(args: &RunArgs) -> Result<Run> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Error::Io(format!("{}: {e}", args.config.display())))?;
    let mut config = TrainConfig::from_json(&text)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let mut schema = Schema::new();
    if let Some(label) = &config.columns.label {
        schema.insert(label.clone(), ColumnKind::Categorical);
    }
    let data = ingest_csv(&args.data, &schema)?;
    let reference = args.reference.as_deref().map(Reference::read).transpose()?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io(format!("{}: {e}", args.out.display())))?;
    Ok(Run {
        data,
        config,
        out: args.out.clone(),
        reference,
    })
}

impl Run {
    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    fn columns(&self, names: &[String]) -> Vec<String> {
        if names.is_empty() {
            self.data.numeric_names()
        } else {
            names.to_vec()
        }
    }

    fn stats(&self, names: &[String]) -> Result<Vec<ColumnStats>> {
        names
            .iter()
            .map(|n| ColumnStats::of(self.data.numeric(n)?))
            .collect()
    }

    fn no_reference(&self, what: &str) -> Result<()> {
        if self.reference.is_some() {
            return Err(Error::invalid(format!("--ref is not supported by {what}")));
        }
        Ok(())
    }

    fn finish(&self, command: &str, model_json: String, report: &RunReport) -> Result<()> {
        self.write("model.json", &model_json)?;
        self.write("metrics.jsonl", &report.metrics_jsonl())?;
        self.write("report.json", &serde_json::to_string_pretty(report)?)?;
        let passed = report.checks.iter().filter(|c| c.pass).count();
        println!(
            "{command}: {} epochs, loss {:.6} -> {:.6}, {passed}/{} checks passed, outputs in {}",
            report.epoch_loss.len(),
            report.initial_loss,
            report.final_loss(),
            report.checks.len(),
            self.out.display()
        );
        for c in report.checks.iter().filter(|c| !c.pass) {
            eprintln!(
                "warning: check {} failed ({} = {}, tolerance {})",
                c.check, c.metric, c.value, c.tolerance
            );
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct ColumnStats {
    min: f64,
    max: f64,
    mean: f64,
    std: f64,
}

impl ColumnStats {
    fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyData);
        }
        let (mean, std) = mean_std(values);
        Ok(ColumnStats {
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean,
            std,
        })
    }

    /// Data range padded by a fifth of its width on both sides.
    fn padded(&self) -> (f64, f64) {
        let pad = 0.2 * (self.max - self.min).max(self.std).max(1e-9);
        (self.min - pad, self.max + pad)
    }

    fn around_mean(&self, k: f64) -> (f64, f64) {
        let s = if self.std > 0.0 { self.std } else { 1.0 };
        (self.mean - k * s, self.mean + k * s)
    }
}

fn csv_line(values: impl IntoIterator<Item = f64>) -> String {
    let mut s = values
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",");
    s.push('\n');
    s
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

pub fn fit1d(args: &RunArgs) -> Result<()> {
    let run = load(args)?;
    let (net, mut report) = train_1d(&run.data, &run.config)?;
    let name = run.columns(&run.config.columns.x)[0].clone();
    let stats = ColumnStats::of(run.data.numeric(&name)?)?;
    let (lo, hi) = stats.padded();
    let grid = density_grid(&net, lo, hi, 401)?;
    let mut series = vec![Series::new(
        "estimate",
        grid.grid
            .iter()
            .copied()
            .zip(grid.phi.iter().copied())
            .collect(),
    )];
    if let Some(r) = &run.reference {
        series.push(r.compare_1d(&run.config, |x| Ok(net.forward_cdf(x)?.1), &mut report)?);
    }
    run.write("density.csv", &grid.to_csv())?;
    run.write(
        "density.svg",
        &line_plot("Estimated density", &name, "phi", &series),
    )?;
    run.finish("fit1d", to_json(&net.to_checkpoint())?, &report)
}

pub fn fitnd(args: &RunArgs) -> Result<()> {
    let run = load(args)?;
    let (net, mut report) = train_nd(&run.data, &run.config)?;
    let names = run.columns(&run.config.columns.x);
    let stats = run.stats(&names)?;
    let means: Vec<f64> = stats.iter().map(|s| s.mean).collect();

    let mut csv = format!("{},phi\n", names.join(","));
    if names.len() == 1 {
        let (lo, hi) = stats[0].around_mean(5.0);
        for x in linspace(lo, hi, 401) {
            csv.push_str(&csv_line([x, net.density(&[x]).unwrap_or(0.0)]));
        }
    } else {
        let (r0, r1) = (stats[0].around_mean(4.0), stats[1].around_mean(4.0));
        for p in net.density_slice((0, 1), r0, r1, 81, &means)? {
            let mut row = means.clone();
            row[0] = p[0];
            row[1] = p[1];
            row.push(p[2]);
            csv.push_str(&csv_line(row));
        }
    }

    let (lo, hi) = stats[0].around_mean(5.0);
    let along: Vec<(f64, f64)> = linspace(lo, hi, 401)
        .into_iter()
        .map(|x| {
            let mut a = means.clone();
            a[0] = x;
            (x, net.density(&a).unwrap_or(0.0))
        })
        .collect();
    let mut series = vec![Series::new("estimate", along)];
    if let Some(r) = &run.reference {
        r.require_width(names.len())?;
        if names.len() == 1 {
            series.push(r.compare_1d(&run.config, |x| net.density(&[x]), &mut report)?);
        } else {
            r.compare_points(&run.config, |a| net.density(a), &mut report)?;
        }
    }
    let title = if names.len() == 1 {
        "Estimated density".to_string()
    } else {
        format!("Density along {} (other columns at their means)", names[0])
    };
    run.write("density.csv", &csv)?;
    run.write("density.svg", &line_plot(&title, &names[0], "phi", &series))?;
    run.finish("fitnd", to_json(&net.to_checkpoint())?, &report)
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).round() as usize]
}

pub fn fit_conditional(args: &RunArgs) -> Result<()> {
    let run = load(args)?;
    let (net, mut report) = train_conditional(&run.data, &run.config)?;
    let (x_names, t_names) = (run.config.columns.x.clone(), run.config.columns.t.clone());
    let x_stats = run.stats(&x_names)?;
    let t_stats = run.stats(&t_names)?;
    let x_means: Vec<f64> = x_stats.iter().map(|s| s.mean).collect();
    let t_means: Vec<f64> = t_stats.iter().map(|s| s.mean).collect();
    let x0 = run.data.numeric(&x_names[0])?;

    let mut csv = format!("{},{},phi\n", x_names.join(","), t_names.join(","));
    let mut series = Vec::new();
    let (lo, hi) = t_stats[0].around_mean(4.0);
    for q in [0.1, 0.5, 0.9] {
        let mut x = x_means.clone();
        x[0] = quantile(x0, q);
        let mut points = Vec::new();
        for tv in linspace(lo, hi, 201) {
            let mut t = t_means.clone();
            t[0] = tv;
            let phi = net.density(&x, &t).unwrap_or(0.0);
            csv.push_str(&csv_line(x.iter().chain(&t).copied().chain([phi])));
            points.push((tv, phi));
        }
        series.push(Series::new(format!("{} = {:.3}", x_names[0], x[0]), points));
    }
    if let Some(r) = &run.reference {
        r.require_width(x_names.len() + t_names.len())?;
        let k = x_names.len();
        r.compare_points(&run.config, |c| net.density(&c[..k], &c[k..]), &mut report)?;
    }
    run.write("density.csv", &csv)?;
    run.write(
        "density.svg",
        &line_plot(
            &format!("Conditional density of {}", t_names[0]),
            &t_names[0],
            "phi",
            &series,
        ),
    )?;
    run.finish("fit-conditional", to_json(&net.to_checkpoint())?, &report)
}

/// Sweep of the first input over its range with the others at their means.
fn sweep(stats: &[ColumnStats], n: usize) -> Vec<Vec<f64>> {
    let means: Vec<f64> = stats.iter().map(|s| s.mean).collect();
    let (lo, hi) = (stats[0].min, stats[0].max.max(stats[0].min + 1e-9));
    linspace(lo, hi, n)
        .into_iter()
        .map(|v| {
            let mut x = means.clone();
            x[0] = v;
            x
        })
        .collect()
}

pub fn classify(args: &RunArgs) -> Result<()> {
    let run = load(args)?;
    run.no_reference("classify")?;
    let (model, report) = train_classifier(&run.data, &run.config)?;
    let names = run.columns(&run.config.columns.x);
    let xs = run.data.numeric_rows(&names)?;
    let grid = sweep(&run.stats(&names)?, 201);
    let mut series: Vec<Series> = model
        .labels
        .iter()
        .map(|l| Series::new(format!("P({l})"), Vec::new()))
        .collect();
    for x in &grid {
        for (s, p) in series.iter_mut().zip(model.probabilities(x)?) {
            s.points.push((x[0], p));
        }
    }
    run.write("predictions.csv", &model.predictions_csv(&names, &xs)?)?;
    run.write(
        "predictions.svg",
        &line_plot("Class probabilities", &names[0], "probability", &series),
    )?;
    run.finish("classify", to_json(&model)?, &report)
}

pub fn regress(args: &RunArgs) -> Result<()> {
    let run = load(args)?;
    run.no_reference("regress")?;
    let (head, report) = train_regression(&run.data, &run.config)?;
    let (x_names, t_names) = (run.config.columns.x.clone(), run.config.columns.t.clone());
    let xs = run.data.numeric_rows(&x_names)?;
    let mut series = vec![
        Series::new(format!("mean of {}", t_names[0]), Vec::new()),
        Series::new("mean - sd", Vec::new()),
        Series::new("mean + sd", Vec::new()),
    ];
    for x in sweep(&run.stats(&x_names)?, 201) {
        let out = head.predict(&x)?;
        let (mu, sd) = (out.mu[0], out.std_devs()[0]);
        series[0].points.push((x[0], mu));
        series[1].points.push((x[0], mu - sd));
        series[2].points.push((x[0], mu + sd));
    }
    run.write(
        "predictions.csv",
        &head.predictions_csv(&x_names, &t_names, &xs)?,
    )?;
    run.write(
        "predictions.svg",
        &line_plot("Predicted Gaussian", &x_names[0], &t_names[0], &series),
    )?;
    run.finish("regress", to_json(&head)?, &report)
}

pub fn estimate_params_cmd(args: &RunArgs) -> Result<()> {
    let run = load(args)?;
    let (est, mut report) = estimate_params(&run.data, FamilyKind::Gaussian1d, &run.config)?;
    let name = run.columns(&run.config.columns.x)[0].clone();
    let f = &est.family;
    let sd = f.variance().sqrt();
    let mut csv = String::from("x,phi,cdf\n");
    let mut points = Vec::new();
    for x in linspace(f.mean() - 6.0 * sd, f.mean() + 6.0 * sd, 401) {
        let phi = f.log_density(x).exp();
        csv.push_str(&csv_line([x, phi, normal_cdf(x, f.mean(), sd)]));
        points.push((x, phi));
    }
    let mut series = vec![Series::new("estimate", points)];
    if let Some(r) = &run.reference {
        series.push(r.compare_1d(&run.config, |x| Ok(f.log_density(x).exp()), &mut report)?);
    }
    run.write("density.csv", &csv)?;
    run.write(
        "density.svg",
        &line_plot("Fitted Gaussian", &name, "phi", &series),
    )?;
    run.finish("estimate-params", to_json(&est)?, &report)
}

pub fn evolve(args: &RunArgs) -> Result<()> {
    let run = load(args)?;
    let (model, mut report) = train_time_model(&run.data, &run.config)?;
    let names = run.columns(&run.config.columns.x);
    let stats = run.stats(&names)?;
    let means: Vec<f64> = stats.iter().map(|s| s.mean).collect();
    let density = |points: &[Vec<f64>]| {
        let mut rng = seeded_rng(run.config.seed, streams::SAMPLING);
        recover_input_density(&model, points, TIME_MODEL_DRAWS, &mut rng)
    };

    let (lo, hi) = (stats[0].min, stats[0].max);
    let line: Vec<Vec<f64>> = linspace(lo, hi, 201)
        .into_iter()
        .map(|v| {
            let mut a = means.clone();
            a[0] = v;
            a
        })
        .collect();
    let line_phi = density(&line)?;
    let mut csv = format!("{},phi\n", names.join(","));
    if names.len() == 1 {
        for (a, p) in line.iter().zip(&line_phi) {
            csv.push_str(&csv_line([a[0], *p]));
        }
    } else {
        let g0 = linspace(stats[0].min, stats[0].max, 41);
        let g1 = linspace(stats[1].min, stats[1].max, 41);
        let mut grid = Vec::with_capacity(g0.len() * g1.len());
        for &u in &g0 {
            for &v in &g1 {
                let mut a = means.clone();
                a[0] = u;
                a[1] = v;
                grid.push(a);
            }
        }
        for (a, p) in grid.iter().zip(density(&grid)?) {
            csv.push_str(&csv_line(a.iter().copied().chain([p])));
        }
    }
    let mut series = vec![Series::new(
        "estimate",
        line.iter()
            .map(|a| a[0])
            .zip(line_phi.iter().copied())
            .collect(),
    )];
    if let Some(r) = &run.reference {
        r.require_width(names.len())?;
        if names.len() == 1 {
            series.push(r.compare_1d(&run.config, |x| Ok(density(&[vec![x]])?[0]), &mut report)?);
        } else {
            r.compare_points(&run.config, |a| Ok(density(&[a.to_vec()])?[0]), &mut report)?;
        }
    }

    let first: Vec<f64> = run.data.numeric_rows(&names)?.swap_remove(0);
    let mut rng = seeded_rng(run.config.seed, streams::SAMPLING);
    let assignment = InputAssignment::sample(&model.to_model_units(&first), model.n, &mut rng)?;
    let trajectory = evolve_nonlinear(&model, &assignment)?;

    run.write("density.csv", &csv)?;
    run.write("trajectory.csv", &trajectory.to_csv())?;
    run.write(
        "density.svg",
        &line_plot("Recovered input density", &names[0], "phi", &series),
    )?;
    run.finish("evolve", to_json(&model)?, &report)
}
