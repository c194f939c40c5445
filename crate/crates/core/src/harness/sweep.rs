//! One-parameter (or `q_base × p_exe`) sweeps; each grid point is a full
//! training run scored on the test split.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::dataset;
use crate::harness::train::train_on;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Window,
    Heads,
    Warmup,
    QBaseXPExe,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "window" => Ok(SweepParam::Window),
            "heads" => Ok(SweepParam::Heads),
            "warmup" => Ok(SweepParam::Warmup),
            "q_base,p_exe" | "q_base*p_exe" | "qbase-pexe" => Ok(SweepParam::QBaseXPExe),
            _ => Err(Error::Config(format!("unknown sweep parameter `{s}` (window, heads, warmup, q_base,p_exe)"))),
        }
    }

    /// Config keys set at each grid point.
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            SweepParam::Window => &["window"],
            SweepParam::Heads => &["heads"],
            SweepParam::Warmup => &["warmup"],
            SweepParam::QBaseXPExe => &["q_base", "p_exe"],
        }
    }

    pub fn default_grid(self) -> Vec<Vec<String>> {
        let strs = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        match self {
            SweepParam::Window => vec![strs(&["1", "3", "5", "7", "9"])],
            SweepParam::Heads => vec![strs(&["1", "2", "4", "8"])],
            SweepParam::Warmup => vec![strs(&["0", "20", "40", "60", "80"])],
            SweepParam::QBaseXPExe => vec![strs(&["0.1", "0.3", "0.5"]), strs(&["0.3", "0.5", "0.7"])],
        }
    }
}

/// Parse `1,3,5` (or `0.1,0.3;0.3,0.5` for the two-key sweep).
pub fn parse_grid(param: SweepParam, text: &str) -> Result<Vec<Vec<String>>> {
    let axes: Vec<Vec<String>> = text
        .split(';')
        .map(|a| a.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect())
        .collect();
    if axes.len() != param.keys().len() || axes.iter().any(Vec::is_empty) {
        return Err(Error::Config(format!(
            "grid `{text}` needs {} non-empty axis(es) separated by `;`",
            param.keys().len()
        )));
    }
    Ok(axes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub settings: Vec<(String, String)>,
    pub wa_acc: f64,
    pub wa_f1: f64,
    pub best_epoch: Option<usize>,
}

fn cartesian(axes: &[Vec<String>]) -> Vec<Vec<String>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect()
    })
}

/// Train once per grid point. Run directories go under `out_dir/<key>=<value>...`
/// and the table is written to `out_dir/sweep.csv`.
pub fn run_sweep(base: &RunConfig, param: SweepParam, axes: &[Vec<String>], out_dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    let data = dataset::load(base)?;
    let mut rows = Vec::new();
    for point in cartesian(axes) {
        let mut cfg = base.clone();
        let settings: Vec<(String, String)> = param.keys().iter().map(|k| k.to_string()).zip(point).collect();
        for (k, v) in &settings {
            cfg.set(k, v)?;
        }
        let name = settings.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",");
        log::info!("sweep point {name}");
        let run_dir = out_dir.map(|d| d.join(&name));
        let s = train_on(&cfg, &data, run_dir.as_deref(), false)?;
        rows.push(SweepRow {
            settings,
            wa_acc: s.test.wa_acc,
            wa_f1: s.test.wa_f1,
            best_epoch: s.best_epoch,
        });
    }
    if let Some(dir) = out_dir {
        let mut csv = param.keys().join(",");
        csv.push_str(",wa_acc,wa_f1,best_epoch\n");
        for r in &rows {
            let vals: Vec<&str> = r.settings.iter().map(|(_, v)| v.as_str()).collect();
            let best = r.best_epoch.map_or(String::new(), |e| e.to_string());
            let _ = writeln!(csv, "{},{},{},{best}", vals.join(","), r.wa_acc, r.wa_f1);
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("sweep.csv");
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        let p = SweepParam::QBaseXPExe;
        let axes = parse_grid(p, "0.1,0.3,0.5;0.3,0.5,0.7").unwrap();
        assert_eq!(cartesian(&axes).len(), 9);
        assert_eq!(cartesian(&parse_grid(SweepParam::Window, "1,3,5,7,9").unwrap()).len(), 5);
        assert!(parse_grid(p, "0.1,0.3").is_err());
        assert_eq!(cartesian(&p.default_grid())[1], vec!["0.1".to_string(), "0.5".to_string()]);
    }
}
