//! Long-format CSV export and import, plus small file helpers.
//!
//! Every table has a header row. Fields are written one row per grid node with
//! the axis coordinates first, so the same reader handles 2-D to 4-D data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::hjb::{FeedbackPolicy, NO_CONTROL};

/// A CSV file as read back: header plus numeric rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }
}

/// Formats with the shortest representation that round-trips.
fn fmt(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| wrap_csv(path, e))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|&v| fmt(v)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn wrap_csv(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Stage {
            stage: "csv".into(),
            message: format!("{}: {other:?}", path.display()),
        },
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path).map_err(|e| wrap_csv(path, e))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::config(
                        format!("{}:{}", path.display(), line + 2),
                        format!("not a number: `{s}`"),
                    )
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(Table { header, rows })
}

/// Two named columns of a CSV file.
pub fn read_two_columns(path: &Path, a: &str, b: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = read_table(path)?;
    let get = |name: &str| {
        t.column(name).ok_or_else(|| {
            Error::config(
                path.display().to_string(),
                format!("missing column `{name}`"),
            )
        })
    };
    Ok((get(a)?, get(b)?))
}

/// One field slice in long format: axis columns then `value_name`, plus any
/// `extra` columns computed per node.
pub fn write_slice(
    path: &Path,
    grid: &GridSpec,
    data: &[f64],
    value_name: &str,
    extra: &[(&str, &dyn Fn(usize) -> f64)],
) -> Result<()> {
    let mut header: Vec<&str> = grid.axes.iter().map(|a| a.name.as_str()).collect();
    header.push(value_name);
    header.extend(extra.iter().map(|(n, _)| *n));
    let rows: Vec<Vec<f64>> = (0..grid.len())
        .map(|n| {
            let mut r = grid.point(n);
            r.push(data[n]);
            r.extend(extra.iter().map(|(_, f)| f(n)));
            r
        })
        .collect();
    write_table(path, &header, &rows)
}

/// Policy slice: axis columns, control components, and `feasible`.
pub fn write_policy_slice(path: &Path, policy: &FeedbackPolicy, step: usize) -> Result<()> {
    let grid = &policy.grid;
    let two = policy.controls.first().is_some_and(|c| c.u2 != 0.0) || grid.axes.len() == 3;
    let mut header: Vec<&str> = grid.axes.iter().map(|a| a.name.as_str()).collect();
    header.push("u1");
    if two {
        header.push("u2");
    }
    let has_alpha = policy.alphas.as_ref().is_some_and(|a| !a[step].is_empty());
    if has_alpha {
        header.push("alpha");
    }
    header.push("feasible");
    let idx = &policy.indices[step];
    let rows: Vec<Vec<f64>> = (0..grid.len())
        .map(|n| {
            let mut r = grid.point(n);
            let k = idx[n];
            let (u1, u2, ok) = if k == NO_CONTROL {
                (f64::NAN, f64::NAN, 0.0)
            } else {
                let c = policy.controls[k as usize];
                (c.u1, c.u2, 1.0)
            };
            r.push(u1);
            if two {
                r.push(u2);
            }
            if has_alpha {
                r.push(policy.alphas.as_ref().unwrap()[step][n] as f64);
            }
            r.push(ok);
            r
        })
        .collect();
    write_table(path, &header, &rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `name_t<k>.csv` inside `dir`.
pub fn step_file(dir: &Path, name: &str, step: usize) -> PathBuf {
    dir.join(format!("{name}_t{step}.csv"))
}

/// Header of a saved policy; the arrays live in `policy.bin`.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
struct PolicyHeader {
    grid: GridSpec,
    controls: Vec<crate::system::ControlPoint>,
    has_alphas: bool,
    has_z_star: bool,
}

/// Writes `policy.json` and `policy.bin` (little-endian indices, then the
/// optional alpha and level arrays as `f32`).
pub fn save_policy(dir: &Path, policy: &FeedbackPolicy) -> Result<()> {
    let header = PolicyHeader {
        grid: policy.grid.clone(),
        controls: policy.controls.clone(),
        has_alphas: policy.alphas.is_some(),
        has_z_star: policy.z_star.is_some(),
    };
    write_json(&dir.join("policy.json"), &header)?;
    let mut bytes = Vec::new();
    for slice in &policy.indices {
        bytes.extend(slice.iter().flat_map(|v| v.to_le_bytes()));
    }
    for arr in [&policy.alphas, &policy.z_star].into_iter().flatten() {
        for slice in arr {
            bytes.extend(slice.iter().flat_map(|v| v.to_le_bytes()));
        }
    }
    let path = dir.join("policy.bin");
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

pub fn load_policy(dir: &Path) -> Result<FeedbackPolicy> {
    let hpath = dir.join("policy.json");
    let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: PolicyHeader = serde_json::from_str(&text)?;
    let path = dir.join("policy.bin");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let (steps, nodes) = (header.grid.n_steps, header.grid.len());
    let n_f32 = [header.has_alphas, header.has_z_star]
        .iter()
        .filter(|&&b| b)
        .count();
    let want = steps * nodes * (2 + 4 * n_f32);
    if bytes.len() != want {
        return Err(Error::config(
            path.display().to_string(),
            format!("expected {want} bytes, found {}", bytes.len()),
        ));
    }
    let (idx_bytes, mut rest) = bytes.split_at(steps * nodes * 2);
    let indices = idx_bytes
        .chunks_exact(nodes * 2)
        .map(|c| {
            c.chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
                .collect()
        })
        .collect();
    let mut take_f32 = |on: bool| -> Option<Vec<Vec<f32>>> {
        if !on {
            return None;
        }
        let (head, tail) = rest.split_at(steps * nodes * 4);
        rest = tail;
        Some(
            head.chunks_exact(nodes * 4)
                .map(|c| {
                    c.chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect()
                })
                .collect(),
        )
    };
    let alphas = take_f32(header.has_alphas);
    let z_star = take_f32(header.has_z_star);
    let mut p = FeedbackPolicy::new(header.grid, header.controls);
    p.indices = indices;
    p.alphas = alphas;
    p.z_star = z_star;
    Ok(p)
}

/// Generic matplotlib script for the long-format tables of one stage.
pub fn plot_script(kind: &str) -> String {
    let body = match kind {
        "viability" => {
            r#"theta = pd.read_csv(os.path.join(here, "theta.csv"))
region = pd.read_csv(os.path.join(here, "region.csv"))
fig, (a, b) = plt.subplots(1, 2, figsize=(11, 4))
piv = theta.pivot(index="y", columns="t", values="theta")
a.contourf(piv.columns, piv.index, piv.values, levels=30)
a.set_xlabel("t"); a.set_ylabel("y"); a.set_title("theta")
b.plot(region.t, region.hat_y_analytic, label="analytic")
b.plot(region.t, region.hat_y_levelset, "--", label="zero level of theta")
b.set_xlabel("t"); b.set_ylabel("upper boundary"); b.legend()
fig.tight_layout(); fig.savefig(os.path.join(here, "viability.png"), dpi=120)
"#
        }
        "levelset" => {
            r#"for name in sorted(glob.glob(os.path.join(here, "V_reconstructed_t*.csv"))):
    surface(pd.read_csv(name), "value", name[:-4] + ".png")
ls = os.path.join(here, "W_levelsets.csv")
if os.path.exists(ls):
    d = pd.read_csv(ls)
    for x, g in d.groupby("x"):
        piv = g.pivot(index="z", columns="y", values="value")
        fig, ax = plt.subplots()
        cs = ax.contour(piv.columns, piv.index, piv.values, levels=12)
        ax.clabel(cs, fontsize=7)
        ax.set_xlabel("y"); ax.set_ylabel("z"); ax.set_title(f"W at x = {x}")
        fig.savefig(os.path.join(here, f"W_levelsets_x{x:g}.png"), dpi=120)
"#
        }
        _ => {
            r#"for name in sorted(glob.glob(os.path.join(here, "V_t*.csv"))):
    surface(pd.read_csv(name), "value", name[:-4] + ".png")
for name in sorted(glob.glob(os.path.join(here, "policy_t*.csv"))):
    surface(pd.read_csv(name), "u1", name[:-4] + ".png")
"#
        }
    };
    format!(
        r#"#!/usr/bin/env python3
import glob, os
import pandas as pd
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))


def surface(d, col, out):
    # Two-dam tables are cut at the middle y2 node.
    if "y2" in d:
        mid = sorted(d.y2.unique())[len(d.y2.unique()) // 2]
        d = d[d.y2 == mid].rename(columns={{"y1": "y"}})
    d = d[d["x"] <= 10.0 + 1e-9]
    piv = d.pivot(index="y", columns="x", values=col)
    fig = plt.figure()
    ax = fig.add_subplot(projection="3d")
    xx, yy = piv.columns.values, piv.index.values
    import numpy as np
    X, Y = np.meshgrid(xx, yy)
    ax.plot_surface(X, Y, piv.values, cmap="viridis")
    ax.set_xlabel("x"); ax.set_ylabel("y"); ax.set_zlabel(col)
    fig.savefig(out, dpi=120)
    plt.close(fig)


{body}"#
    )
}
