"""Figure recipes over harness artifact files.

Six families: spectrum (eigenvalue panels for the loss Hessian, gradient
second moment, and residual), angles (subspace-overlap trajectories),
dynamics (quantile bands for loss / gradient norm / successive-gradient
cosine), delta (loss-difference mean and variance trajectories), dk
(perturbation-bound curves), and bound (histograms of the generalization
bound terms, one color per input file).

Recipes only draw what the harness emitted; no statistics are recomputed
here. Output is deterministic: fixed style, hashed SVG ids, no embedded
dates.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams.update({
    "svg.hashsalt": "plotkit",
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "path.simplify": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
})

FAMILIES = ("spectrum", "angles", "dynamics", "delta", "dk", "bound")

# minimum run count before confidence bands are drawn
BAND_MIN_RUNS = 30


class SchemaError(ValueError):
    """Input file is missing or lacks required columns."""


@dataclass
class FigureRecipe:
    family: str
    inputs: list
    output: str  # base path; .png and .svg are appended
    title: str = None
    labels: list = field(default_factory=list)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SchemaError(f"unknown figure family {self.family!r}; "
                              f"expected one of {FAMILIES}")


def recipe_for_artifact(family, artifact_dir, output, labels=None):
    """Default input files for a family inside a harness artifact directory."""
    agg = os.path.join(artifact_dir, "aggregates")
    mapping = {
        "spectrum": [os.path.join(agg, f"spectra_mean_{k}.csv") for k in ("hf", "m", "hp")],
        "angles": [os.path.join(agg, "overlap.csv")],
        "dynamics": [os.path.join(agg, f"quantiles_{s}.csv")
                     for s in ("loss", "grad_norm", "cos_prev")],
        "delta": [os.path.join(agg, "delta_variance.csv"),
                  os.path.join(agg, "delta_stats.csv")],
        "dk": [os.path.join(agg, "dk_mean.csv")],
        "bound": [os.path.join(artifact_dir, "bound_reports.jsonl")],
    }
    return FigureRecipe(family=family, inputs=mapping[family], output=output,
                        labels=labels or [])


REQUIRED_COLUMNS = {
    "spectrum": ["iteration", "rank", "mean_eigenvalue"],
    "angles": ["iteration", "index", "mean_cos", "ci_lo", "ci_hi", "runs"],
    "dynamics": ["t"],  # plus at least one q* column, checked separately
    "delta_variance": ["t", "mean", "variance"],
    "delta_stats": ["t", "q", "count", "mean", "variance"],
    "dk": ["iteration", "s", "mean_sin_theta", "mean_bound"],
}

BOUND_FIELDS = ("effective_curvature", "weighted_frob", "train_loss_mc",
                "pop_loss_upper")


def _read_csv(path, required, optional_ok=False):
    if not os.path.exists(path):
        if optional_ok:
            return None
        raise SchemaError(f"missing input file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        rows = list(reader)
    return header, rows


def _read_jsonl(path):
    if not os.path.exists(path):
        raise SchemaError(f"missing input file: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{i + 1}: not valid JSON") from exc
            missing = [k for k in BOUND_FIELDS if k not in rec]
            if missing:
                raise SchemaError(f"{path}:{i + 1}: missing fields {missing}")
            records.append(rec)
    return records


def check(recipe: FigureRecipe):
    """Validate inputs without drawing. Raises SchemaError on problems."""
    fam = recipe.family
    if fam == "spectrum":
        for path in recipe.inputs:
            _read_csv(path, REQUIRED_COLUMNS["spectrum"])
    elif fam == "angles":
        _read_csv(recipe.inputs[0], REQUIRED_COLUMNS["angles"])
    elif fam == "dynamics":
        for path in recipe.inputs:
            header, _ = _read_csv(path, REQUIRED_COLUMNS["dynamics"])
            if not any(c.startswith("q") for c in header):
                raise SchemaError(f"{path}: no quantile columns (q*) present")
    elif fam == "delta":
        _read_csv(recipe.inputs[0], REQUIRED_COLUMNS["delta_variance"])
        if len(recipe.inputs) > 1 and os.path.exists(recipe.inputs[1]):
            _read_csv(recipe.inputs[1], REQUIRED_COLUMNS["delta_stats"])
    elif fam == "dk":
        _read_csv(recipe.inputs[0], REQUIRED_COLUMNS["dk"])
    elif fam == "bound":
        for path in recipe.inputs:
            _read_jsonl(path)


def _columns(rows, *names, cast=float):
    return [np.asarray([cast(r[n]) for r in rows]) for n in names]


def _finish(fig, output):
    base, ext = os.path.splitext(output)
    if ext.lower() in (".png", ".svg"):
        output = base
    os.makedirs(os.path.dirname(os.path.abspath(output)) or ".", exist_ok=True)
    png = output + ".png"
    svg = output + ".svg"
    fig.savefig(png, metadata={"Software": "plotkit"})
    fig.savefig(svg, metadata={"Date": None, "Creator": "plotkit"})
    plt.close(fig)
    return [png, svg]


def _warn_if_empty(rows, path):
    if not rows:
        warnings.warn(f"{path} is empty; drawing blank axes")
        return True
    return False


# ---------------------------------------------------------------------------
# family renderers


def _render_spectrum(recipe):
    fig, axes = plt.subplots(1, 3, figsize=(13, 4), sharex=True)
    panels = ("loss Hessian", "gradient second moment", "decomposition residual")
    for ax, path, name in zip(axes, recipe.inputs, panels):
        _, rows = _read_csv(path, REQUIRED_COLUMNS["spectrum"])
        ax.set_title(name)
        ax.set_xlabel("rank")
        ax.set_ylabel("mean eigenvalue")
        if _warn_if_empty(rows, path):
            continue
        iters, ranks, vals = _columns(rows, "iteration", "rank", "mean_eigenvalue")
        for it in sorted(set(int(i) for i in iters)):
            sel = iters == it
            order = np.argsort(ranks[sel])
            ax.plot(ranks[sel][order], vals[sel][order], label=f"iteration {it}")
        ax.legend(fontsize=7)
    fig.suptitle(recipe.title or "eigenvalue spectra across training")
    return fig


def _render_angles(recipe):
    path = recipe.inputs[0]
    _, rows = _read_csv(path, REQUIRED_COLUMNS["angles"])
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.set_xlabel("iteration")
    ax.set_ylabel("cos(principal angle)")
    ax.set_ylim(-0.02, 1.02)
    if not _warn_if_empty(rows, path):
        iters, idx, mean, lo, hi, runs = _columns(
            rows, "iteration", "index", "mean_cos", "ci_lo", "ci_hi", "runs")
        for i in sorted(set(int(v) for v in idx)):
            sel = idx == i
            order = np.argsort(iters[sel])
            x = iters[sel][order]
            ax.plot(x, mean[sel][order], label=f"angle {i + 1}")
            if runs[sel].min() >= BAND_MIN_RUNS:
                ax.fill_between(x, lo[sel][order], hi[sel][order], alpha=0.2)
        ax.legend(fontsize=6, ncol=3)
    fig.suptitle(recipe.title or "subspace overlap between Hessian and second moment")
    return fig


def _render_dynamics(recipe):
    fig, axes = plt.subplots(1, len(recipe.inputs), figsize=(4.5 * len(recipe.inputs), 4))
    if len(recipe.inputs) == 1:
        axes = [axes]
    for ax, path in zip(axes, recipe.inputs):
        header, rows = _read_csv(path, REQUIRED_COLUMNS["dynamics"])
        qcols = [c for c in header if c.startswith("q")]
        if not qcols:
            raise SchemaError(f"{path}: no quantile columns (q*) present")
        stat = os.path.basename(path).replace("quantiles_", "").replace(".csv", "")
        ax.set_title(stat)
        ax.set_xlabel("iteration")
        if _warn_if_empty(rows, path):
            continue
        (t,) = _columns(rows, "t")
        for c in qcols:
            (v,) = _columns(rows, c)
            ax.plot(t, v, label=c)
        if stat in ("loss", "grad_norm"):
            ax.set_yscale("log")
        ax.legend(fontsize=7)
    fig.suptitle(recipe.title or "training dynamics at loss quantiles")
    return fig


def _render_delta(recipe):
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    _, rows = _read_csv(recipe.inputs[0], REQUIRED_COLUMNS["delta_variance"])
    axes[0].set_title("loss difference, all runs")
    axes[0].set_xlabel("iteration")
    axes[1].set_title("loss-difference variance")
    axes[1].set_xlabel("iteration")
    if not _warn_if_empty(rows, recipe.inputs[0]):
        t, mean, var = _columns(rows, "t", "mean", "variance")
        sd = np.sqrt(var)
        axes[0].plot(t, mean, label="mean")
        axes[0].fill_between(t, mean - 2 * sd, mean + 2 * sd, alpha=0.25,
                             label="mean +- 2 sd")
        axes[0].axhline(0.0, color="red", lw=0.8)
        axes[0].legend(fontsize=7)
        axes[1].plot(t, var, label="pooled")
    if len(recipe.inputs) > 1 and os.path.exists(recipe.inputs[1]):
        _, rows2 = _read_csv(recipe.inputs[1], REQUIRED_COLUMNS["delta_stats"])
        if rows2:
            t2, q2, var2 = _columns(rows2, "t", "q", "variance")
            for q in sorted(set(q2)):
                sel = q2 == q
                order = np.argsort(t2[sel])
                axes[1].plot(t2[sel][order], var2[sel][order],
                             label=f"band q{q:g}", alpha=0.7)
    axes[1].legend(fontsize=7)
    fig.suptitle(recipe.title or "one-step loss-difference statistics")
    return fig


def _render_dk(recipe):
    path = recipe.inputs[0]
    _, rows = _read_csv(path, REQUIRED_COLUMNS["dk"])
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.set_xlabel("iteration")
    ax.set_ylabel("value")
    if not _warn_if_empty(rows, path):
        iters, s, sin_t, bound = _columns(rows, "iteration", "s", "mean_sin_theta",
                                          "mean_bound")
        for sv in sorted(set(int(v) for v in s)):
            sel = s == sv
            order = np.argsort(iters[sel])
            x = iters[sel][order]
            ax.plot(x, sin_t[sel][order], label=f"sin, s={sv}")
            ax.plot(x, bound[sel][order], "--", label=f"bound, s={sv}", alpha=0.6)
        ax.set_yscale("log")
        ax.legend(fontsize=7)
    fig.suptitle(recipe.title or "eigenspace perturbation and its upper bound")
    return fig


def _render_bound(recipe):
    data = [(_read_jsonl(path), label or os.path.basename(path))
            for path, label in zip(recipe.inputs,
                                   (recipe.labels + [None] * len(recipe.inputs)))]
    panels = [("effective_curvature", "effective curvature"),
              ("weighted_frob", "precision-weighted distance"),
              ("gen_gap", "0-1 generalization gap"),
              ("pop_loss_upper", "population-loss upper bound")]
    fig, axes = plt.subplots(1, 4, figsize=(16, 3.8))
    for ax, (key, name) in zip(axes, panels):
        ax.set_title(name, fontsize=9)
        for records, label in data:
            if key == "gen_gap":
                vals = [r.get("point_test_err", 0.0) - r.get("point_train_err", 0.0)
                        for r in records
                        if r.get("point_test_err") is not None]
            else:
                vals = [r[key] for r in records]
            if vals:
                ax.hist(vals, bins=20, alpha=0.55, label=label)
        ax.legend(fontsize=6)
    fig.suptitle(recipe.title or "generalization-bound terms across runs")
    return fig


_RENDERERS = {
    "spectrum": _render_spectrum,
    "angles": _render_angles,
    "dynamics": _render_dynamics,
    "delta": _render_delta,
    "dk": _render_dk,
    "bound": _render_bound,
}


def render(recipe: FigureRecipe):
    """Validate inputs, draw the family, save PNG and SVG. Returns file list."""
    check(recipe)
    fig = _RENDERERS[recipe.family](recipe)
    return _finish(fig, recipe.output)
