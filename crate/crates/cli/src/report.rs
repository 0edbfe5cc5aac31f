//! CSV layouts shared by `evaluate`, `compare` and `plot`.

use anyhow::{bail, Context, Result};
use deepcox::metrics::{CalibrationRow, DiscriminationRow, FoldResults, Metric, MetricValues};

pub fn metrics_csv(v: &MetricValues) -> String {
    let mut s = String::from("metric,value\n");
    for m in Metric::ALL {
        s.push_str(&format!("{},{}\n", m.label(), m.of(v)));
    }
    s
}

pub fn calibration_csv(rows: &[CalibrationRow]) -> String {
    let mut s = String::from("decile,n,events,mean_predicted,observed,se\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.decile,
            r.n,
            r.events,
            r.mean_predicted,
            r.observed,
            r.binomial_se()
        ));
    }
    s
}

pub fn discrimination_csv(rows: &[DiscriminationRow]) -> String {
    let mut s = String::from("decile,events,share\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.decile, r.events, r.share));
    }
    s
}

fn records<'a>(text: &'a str, header: &str, what: &str) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        bail!("{what}: expected header {header:?}");
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != width {
                bail!("{what} line {}: expected {width} fields, got {}", i + 2, f.len());
            }
            Ok(f)
        })
        .collect()
}

fn num<T: std::str::FromStr>(field: &str, what: &str) -> Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    field.parse().with_context(|| format!("{what}: bad number {field:?}"))
}

pub fn parse_calibration(text: &str) -> Result<Vec<CalibrationRow>> {
    let what = "calibration table";
    records(text, "decile,n,events,mean_predicted,observed,se", what)?
        .into_iter()
        .map(|f| {
            Ok(CalibrationRow {
                decile: num(f[0], what)?,
                n: num(f[1], what)?,
                events: num(f[2], what)?,
                mean_predicted: num(f[3], what)?,
                observed: num(f[4], what)?,
            })
        })
        .collect()
}

pub fn parse_discrimination(text: &str) -> Result<Vec<DiscriminationRow>> {
    let what = "discrimination table";
    records(text, "decile,events,share", what)?
        .into_iter()
        .map(|f| {
            Ok(DiscriminationRow {
                decile: num(f[0], what)?,
                events: num(f[1], what)?,
                share: num(f[2], what)?,
            })
        })
        .collect()
}

pub fn folds_csv(results: &FoldResults) -> String {
    let mut s = String::from("replication,fold,model");
    for m in Metric::ALL {
        s.push(',');
        s.push_str(m.name());
    }
    s.push('\n');
    for f in results.folds() {
        for (name, v) in [("deep", &f.deep), ("cph", &f.cph)] {
            s.push_str(&format!("{},{},{name}", f.replication + 1, f.fold + 1));
            for m in Metric::ALL {
                s.push_str(&format!(",{}", m.of(v)));
            }
            s.push('\n');
        }
    }
    s
}

/// One row per metric: both models' means with intervals, and the F test
/// on the per-fold differences.
pub fn comparison_csv(results: &FoldResults) -> Result<String> {
    let mut s = String::from(
        "metric,deep_mean,deep_ci_low,deep_ci_high,cph_mean,cph_ci_low,cph_ci_high,mean_difference,f_statistic,p_value\n",
    );
    for m in Metric::ALL {
        let d = results.summary(m, true);
        let c = results.summary(m, false);
        let diffs = results.differences(m);
        let mean_diff = diffs.iter().flatten().sum::<f64>() / 10.0;
        let (f, p) = match results.f_test(m) {
            Ok(t) => (t.f.to_string(), t.p_value.to_string()),
            Err(_) => (String::new(), String::new()),
        };
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{f},{p}\n",
            m.label(),
            d.mean,
            d.ci_low,
            d.ci_high,
            c.mean,
            c.ci_low,
            c.ci_high,
            mean_diff
        ));
    }
    Ok(s)
}
