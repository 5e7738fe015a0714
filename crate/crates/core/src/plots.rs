//! Emits a standalone matplotlib script that renders trace CSVs.

use std::path::Path;

use crate::sim::{parse_csv, SimError};

/// Panels drawn for each trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotLayout {
    /// Output vs reference, input, `V` vs `Γ`, `f_p`.
    Tracking,
    /// As `Tracking` plus `ρ` and `ρ̇`.
    Performance,
}

/// Guesses the layout from the trace: performance runs pin `gamma` at 1 and
/// carry a non-trivial `f_t`.
pub fn detect_layout(csv_text: &str) -> Result<PlotLayout, SimError> {
    let tr = parse_csv(csv_text)?;
    let gamma = tr.column("gamma").unwrap_or_default();
    let f_t = tr.column("f_t").unwrap_or_default();
    let perf = gamma.iter().all(|g| *g == 1.0) && f_t.iter().any(|v| *v != 1.0);
    Ok(if perf { PlotLayout::Performance } else { PlotLayout::Tracking })
}

fn py_str(s: &str) -> String {
    format!("{s:?}")
}

/// Validates every CSV and returns the script text. `traces` pairs a legend
/// label with a CSV path; the path is embedded as given.
pub fn plot_script(traces: &[(String, String)], csv_texts: &[String], layout: PlotLayout) -> Result<String, SimError> {
    if traces.is_empty() {
        return Err(SimError::MalformedTrace("no traces given".into()));
    }
    for t in csv_texts {
        parse_csv(t)?;
    }
    let entries: Vec<String> =
        traces.iter().map(|(label, path)| format!("    ({}, {}),", py_str(label), py_str(path))).collect();
    let panels = match layout {
        PlotLayout::Tracking => 4,
        PlotLayout::Performance => 5,
    };
    Ok(format!(
        r#"#!/usr/bin/env python3
"""Plots closed-loop traces written by `bcl simulate`."""
import csv
import sys

import matplotlib.pyplot as plt

TRACES = [
{entries}
]
PERFORMANCE = {perf}


def load(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = {{}}
    for key in rows[0]:
        if key == "region":
            cols[key] = [r[key] for r in rows]
        else:
            cols[key] = [float(r[key]) for r in rows]
    return cols


def rate(t, v):
    out = [0.0] * len(v)
    for i in range(1, len(v) - 1):
        out[i] = (v[i + 1] - v[i - 1]) / (t[i + 1] - t[i - 1])
    if len(v) > 1:
        out[0] = (v[1] - v[0]) / (t[1] - t[0])
        out[-1] = (v[-1] - v[-2]) / (t[-1] - t[-2])
    return out


def main():
    fig, axes = plt.subplots({panels}, 1, sharex=True, figsize=(9, 2.4 * {panels}))
    for label, path in TRACES:
        c = load(path)
        t = c["t"]
        axes[0].plot(t, c["x1"], label=f"{{label}} y")
        axes[1].plot(t, c["u_applied"], label=f"{{label}} sat(u)")
        if PERFORMANCE:
            axes[2].plot(t, c["lyap"], label=f"{{label}} Phi")
        else:
            axes[2].plot(t, c["lyap"], label=f"{{label}} V")
            axes[2].plot(t, c["gamma"], "--", label=f"{{label}} Gamma")
        axes[3].plot(t, c["f_p"], label=f"{{label}} f_p")
        if PERFORMANCE:
            axes[4].plot(t, c["rho"], label=f"{{label}} rho")
            axes[4].plot(t, rate(t, c["rho"]), ":", label=f"{{label}} d(rho)/dt")
            axes[4].plot(t, [abs(e) for e in c["e"]], alpha=0.6, label=f"{{label}} |e|")
    first = load(TRACES[0][1])
    axes[0].plot(first["t"], first["y_ref"], "k--", label="y_r")
    axes[0].set_ylabel("output")
    axes[1].set_ylabel("input")
    axes[2].set_ylabel("level")
    axes[3].set_ylabel("f_p")
    if PERFORMANCE:
        axes[4].set_ylabel("envelope")
    axes[-1].set_xlabel("t [s]")
    for ax in axes:
        ax.grid(True, alpha=0.3)
        ax.legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    out = sys.argv[1] if len(sys.argv) > 1 else None
    if out:
        fig.savefig(out, dpi=150)
    else:
        plt.show()


if __name__ == "__main__":
    main()
"#,
        entries = entries.join("\n"),
        perf = if layout == PlotLayout::Performance { "True" } else { "False" },
        panels = panels,
    ))
}

/// Reads the CSVs and builds the script; labels default to file stems.
pub fn plot_script_for_files(paths: &[&Path], layout: Option<PlotLayout>) -> Result<String, SimError> {
    let mut texts = Vec::with_capacity(paths.len());
    let mut traces = Vec::with_capacity(paths.len());
    for p in paths {
        let text = std::fs::read_to_string(p)
            .map_err(|e| SimError::MalformedTrace(format!("cannot read {}: {e}", p.display())))?;
        let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "trace".into());
        traces.push((label, p.display().to_string()));
        texts.push(text);
    }
    let layout = match layout {
        Some(l) => l,
        None => detect_layout(texts.first().ok_or_else(|| SimError::MalformedTrace("no traces".into()))?)?,
    };
    plot_script(&traces, &texts, layout)
}
