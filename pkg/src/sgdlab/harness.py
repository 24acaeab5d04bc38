"""Multi-run experiment driver with persistence.

One experiment trains R independent runs (fresh N(0, I) initialization and
an independent batch stream per run) on a shared dataset, streams per-step
records to CSV, computes dense spectral snapshots at selected iterations,
and finishes with a single-threaded aggregation pass (quantile series,
loss-difference statistics, subspace-overlap trajectories, rank-averaged
spectra). Every run owns an RNG stream derived from (experiment seed, run
index) through a counter-based generator, so any single run can be
re-executed bit for bit without touching the others.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import datagen, genbound, netcore, optim, spectra
from .errors import DivergenceError, InputError

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

MANIFEST_FORMAT = "sgdlab-experiment-1"
TRACE_FIELDS = ("run_id", "t", "loss", "grad_norm", "cos_prev", "delta_f",
                "step", "variant")

_TAG_DATA = 11
_TAG_RUN = 1000


def _fmt(x):
    return f"{float(x):.17g}"


@dataclass
class ExperimentConfig:
    # data
    data_kind: str = "gauss"
    n: int = 100
    d: int = 50
    k: int = 10
    corruption: float = 0.0
    n_test: int = 0
    data_path: str = None
    test_path: str = None
    normalize: bool = False
    feature_scale: float = 1.0   # applied after normalization
    redraw_per_run: bool = False
    # net
    hidden: tuple = (10, 30)
    # optimizer
    variant: str = "vanilla"
    eta: float = 0.1
    batch_m: int = 5
    max_iters: int = 400
    gamma1: float = 0.9
    gamma2: float = 0.999
    adam_eps: float = 1e-8
    L: float = None
    # experiment
    runs: int = 200
    seed: int = 0
    init_scale: float = 1.0      # theta0 ~ N(0, init_scale^2 I)
    snapshot_iters: object = "none"   # "none" | "geometric" | explicit list
    top_q: int = None                 # defaults to the class count
    quantiles: tuple = (10, 25, 50, 75, 90)
    quantile_window: float = 0.01
    threads: int = 1
    dense_limit: int = netcore.DENSE_LIMIT
    save_checkpoints: bool = True

    def __post_init__(self):
        if self.runs < 1:
            raise InputError("runs must be at least 1")
        if not all(0 < q < 100 for q in self.quantiles):
            raise InputError("quantiles must lie in (0, 100)")
        for t in self.resolved_snapshots():
            if t > self.max_iters:
                raise InputError("snapshot iterations must not exceed max_iters")

    def resolved_snapshots(self):
        if self.snapshot_iters == "none" or self.snapshot_iters is None:
            return []
        if self.snapshot_iters == "geometric":
            out = []
            t = 1
            while t < self.max_iters:
                out.append(t)
                t *= 2
            out.append(self.max_iters)
            return out
        return sorted(set(int(t) for t in self.snapshot_iters))

    def net_spec(self, input_dim, num_classes):
        return netcore.NetSpec(input_dim=input_dim, hidden_widths=tuple(self.hidden),
                               num_classes=num_classes)

    def optim_config(self, run_seed):
        return optim.OptimConfig(variant=self.variant, eta=self.eta,
                                 batch_m=self.batch_m, L=self.L, gamma1=self.gamma1,
                                 gamma2=self.gamma2, adam_eps=self.adam_eps,
                                 max_iters=self.max_iters, seed=run_seed)

    def to_dict(self):
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        d["quantiles"] = list(self.quantiles)
        if isinstance(d["snapshot_iters"], (list, tuple)):
            d["snapshot_iters"] = [int(t) for t in d["snapshot_iters"]]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        if "quantiles" in d:
            d["quantiles"] = tuple(d["quantiles"])
        return cls(**d)


def load_config(path, overrides=None) -> ExperimentConfig:
    """TOML config with [data] / [net] / [optim] / [experiment] tables."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    d = {}
    data = raw.get("data", {})
    for src, dst in (("kind", "data_kind"), ("n", "n"), ("d", "d"), ("k", "k"),
                     ("corruption", "corruption"), ("n_test", "n_test"),
                     ("path", "data_path"), ("test_path", "test_path"),
                     ("normalize", "normalize"), ("feature_scale", "feature_scale"),
                     ("redraw_per_run", "redraw_per_run")):
        if src in data:
            d[dst] = data[src]
    net = raw.get("net", {})
    if "hidden" in net:
        d["hidden"] = tuple(net["hidden"])
    o = raw.get("optim", {})
    for src, dst in (("variant", "variant"), ("eta", "eta"), ("batch", "batch_m"),
                     ("iters", "max_iters"), ("gamma1", "gamma1"), ("gamma2", "gamma2"),
                     ("adam_eps", "adam_eps"), ("L", "L")):
        if src in o:
            d[dst] = o[src]
    e = raw.get("experiment", {})
    for src, dst in (("runs", "runs"), ("seed", "seed"), ("snapshots", "snapshot_iters"),
                     ("top_q", "top_q"), ("quantiles", "quantiles"),
                     ("quantile_window", "quantile_window"), ("threads", "threads"),
                     ("dense_limit", "dense_limit"), ("init_scale", "init_scale"),
                     ("save_checkpoints", "save_checkpoints")):
        if src in e:
            d[dst] = e[src]
    if overrides:
        d.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(d)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# dataset plumbing


def build_dataset(cfg: ExperimentConfig, run_idx=None):
    """Returns (train, test_or_None) built from the experiment seed.

    The draw is fixed across runs unless redraw_per_run is set, in which
    case passing run_idx yields that run's own deterministic draw.
    Normalization statistics are fit on the training split and reapplied to
    the test split; feature_scale multiplies both afterwards.
    """
    if cfg.data_kind == "gauss":
        total = cfg.n + cfg.n_test
        entropy = [int(cfg.seed), _TAG_DATA]
        if cfg.redraw_per_run and run_idx is not None:
            entropy.append(int(run_idx))
        seq = np.random.SeedSequence(entropy)
        data_seed = int(seq.generate_state(1)[0])
        full = datagen.generate_gauss_k(total, cfg.d, cfg.k, data_seed)
        if cfg.n_test > 0:
            train, test = datagen.split_dataset(full, cfg.n)
        else:
            train, test = full, None
        if cfg.corruption > 0:
            train = datagen.corrupt_labels(train, cfg.corruption, data_seed + 1)
    elif cfg.data_kind == "file":
        if not cfg.data_path:
            raise InputError("data_kind='file' needs data.path")
        train = datagen.load_dataset(cfg.data_path)
        test = datagen.load_dataset(cfg.test_path) if cfg.test_path else None
        if cfg.corruption > 0:
            train = datagen.corrupt_labels(train, cfg.corruption, cfg.seed + 1)
    else:
        raise InputError(f"unknown data kind {cfg.data_kind!r}")
    if cfg.normalize:
        stats = datagen.fit_normalization(train)
        train = datagen.apply_normalization(train, stats)
        if test is not None:
            test = datagen.apply_normalization(test, stats)
    if cfg.feature_scale != 1.0:
        train = datagen.Dataset(train.features * cfg.feature_scale, train.labels,
                                train.k, {**train.meta, "feature_scale": cfg.feature_scale})
        if test is not None:
            test = datagen.Dataset(test.features * cfg.feature_scale, test.labels,
                                   test.k, {**test.meta, "feature_scale": cfg.feature_scale})
    return train, test


def run_rng(seed, run_idx):
    """Counter-based per-run stream: Philox keyed by (seed, run index)."""
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence([int(seed), _TAG_RUN + int(run_idx)])))


# ---------------------------------------------------------------------------
# single run


def _snapshot_files(run_dir):
    return {
        "hf": os.path.join(run_dir, "spectra_hf.csv"),
        "m": os.path.join(run_dir, "spectra_m.csv"),
        "hp": os.path.join(run_dir, "spectra_hp.csv"),
        "angles": os.path.join(run_dir, "angles.csv"),
        "dk": os.path.join(run_dir, "dk.csv"),
        "blocks": os.path.join(run_dir, "blocks.csv"),
        "loadings": os.path.join(run_dir, "loadings.csv"),
    }


def _write_csv(path, fields, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        w.writerows(rows)


def run_single(cfg: ExperimentConfig, run_idx: int, out_dir: str, train=None):
    """Execute one run and write its artifacts; returns (status, file list)."""
    if train is None or cfg.redraw_per_run:
        train, _ = build_dataset(cfg, run_idx=run_idx)
    spec = cfg.net_spec(train.d, train.k)
    rng = run_rng(cfg.seed, run_idx)
    ocfg = cfg.optim_config(run_seed=cfg.seed)
    run_dir = os.path.join(out_dir, "runs", f"run_{run_idx:04d}")
    os.makedirs(run_dir, exist_ok=True)

    snap_iters = set(cfg.resolved_snapshots())
    top_q = cfg.top_q if cfg.top_q is not None else train.k
    snap_rows = {"hf": [], "m": [], "hp": [], "angles": [], "dk": [], "blocks": [],
                 "loadings": []}
    dense_ok = spec.param_count() <= cfg.dense_limit

    def snapshot(t, theta):
        if t not in snap_iters or not dense_ok:
            return
        hf = netcore.dense_hessian(spec, theta, train.features, train.labels,
                                   dense_limit=cfg.dense_limit)
        G = netcore.per_sample_gradients(spec, theta, train.features, train.labels)
        m2 = G.T @ G / train.n
        hp = m2 - hf.dense
        rep_hf = spectra.dense_eigs(hf.dense)
        rep_m = spectra.dense_eigs(m2)
        rep_hp = spectra.dense_eigs(hp)
        for key, rep in (("hf", rep_hf), ("m", rep_m), ("hp", rep_hp)):
            snap_rows[key].extend(
                [t, rank, _fmt(val), rep.method, _fmt(res)]
                for rank, (val, res) in enumerate(zip(rep.eigenvalues, rep.residuals)))
        overlap = spectra.principal_angles(rep_hf.eigenvectors[:, :top_q],
                                           rep_m.eigenvectors[:, :top_q])
        snap_rows["angles"].extend(
            [t, i, _fmt(c)] for i, c in enumerate(overlap.cosines))
        for s in (1, 2, 3):
            try:
                dk = spectra.davis_kahan(hf.dense, hp, s, base=rep_hf, pert=rep_m)
                snap_rows["dk"].append([t, s, _fmt(dk.sin_theta_frob), _fmt(dk.bound),
                                        _fmt(dk.eigengap)])
            except Exception:
                pass
        gs, hs = netcore.layer_blocks(hf)
        for kind, mats in (("G", gs), ("H", hs)):
            for bi, mat in enumerate(mats):
                vals = np.sort(np.linalg.eigvalsh(mat))[::-1]
                snap_rows["blocks"].extend(
                    [t, kind, bi, rank, _fmt(v)] for rank, v in enumerate(vals))
        for entry in spectra.layer_loadings(rep_hf.eigenvectors[:, 0], hf.layout):
            snap_rows["loadings"].append([t, entry["layer"], _fmt(entry["raw"]),
                                          _fmt(entry["normalized"])])

    theta0 = netcore.random_params(spec, rng, scale=cfg.init_scale).values
    files = []
    trace_path = os.path.join(run_dir, "trace.csv")
    status = "ok"
    try:
        trace = optim.run_sgd(spec, train, ocfg, rng=rng, theta0=theta0,
                              snapshot_hook=snapshot)
    except DivergenceError as exc:
        status = f"failed: {exc}"
        trace = None

    if trace is not None:
        rows = [[run_idx, r.t, _fmt(r.loss), _fmt(r.grad_norm), _fmt(r.cos_prev),
                 _fmt(r.delta_f), _fmt(r.step_used), cfg.variant]
                for r in trace.records]
        _write_csv(trace_path, TRACE_FIELDS, rows)
        files.append(trace_path)
        if cfg.save_checkpoints:
            init_path = os.path.join(run_dir, "init.ckpt")
            final_path = os.path.join(run_dir, "final.ckpt")
            netcore.save_checkpoint(init_path, spec, theta0, seed=cfg.seed)
            netcore.save_checkpoint(final_path, spec, trace.final_theta, seed=cfg.seed)
            files.extend([init_path, final_path])
        if snap_iters and dense_ok:
            paths = _snapshot_files(run_dir)
            _write_csv(paths["hf"], spectra.SPECTRUM_FIELDS, snap_rows["hf"])
            _write_csv(paths["m"], spectra.SPECTRUM_FIELDS, snap_rows["m"])
            _write_csv(paths["hp"], spectra.SPECTRUM_FIELDS, snap_rows["hp"])
            _write_csv(paths["angles"], ("iteration", "index", "cosine"),
                       snap_rows["angles"])
            _write_csv(paths["dk"], ("iteration", "s", "sin_theta_frob", "bound",
                                     "eigengap"), snap_rows["dk"])
            _write_csv(paths["blocks"], ("iteration", "kind", "block", "rank",
                                         "eigenvalue"), snap_rows["blocks"])
            _write_csv(paths["loadings"], ("iteration", "layer", "raw", "normalized"),
                       snap_rows["loadings"])
            files.extend(paths.values())
    return status, files


def _run_single_star(args):
    cfg_dict, run_idx, out_dir = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    return run_idx, run_single(cfg, run_idx, out_dir)


# ---------------------------------------------------------------------------
# whole experiment


def run_experiment(cfg: ExperimentConfig, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "runs"), exist_ok=True)
    train, test = build_dataset(cfg)
    datagen.save_dataset(os.path.join(out_dir, "dataset_train.dsc"), train)
    dataset_entry = {"train": "dataset_train.dsc", "test": None}
    if test is not None:
        datagen.save_dataset(os.path.join(out_dir, "dataset_test.dsc"), test)
        dataset_entry["test"] = "dataset_test.dsc"

    results = {}
    if cfg.threads > 1:
        jobs = [(cfg.to_dict(), r, out_dir) for r in range(cfg.runs)]
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            for run_idx, (status, files) in pool.map(_run_single_star, jobs):
                results[run_idx] = (status, files)
    else:
        for r in range(cfg.runs):
            results[r] = run_single(cfg, r, out_dir, train=train)

    manifest = {
        "format": MANIFEST_FORMAT,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "versions": {"python": sys.version.split()[0], "numpy": np.__version__},
        "dataset": dataset_entry,
        "runs": [{"id": r, "status": results[r][0],
                  "files": [os.path.relpath(f, out_dir) for f in results[r][1]]}
                 for r in sorted(results)],
        "aggregates": [],
    }

    def _write_manifest():
        with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    _write_manifest()  # the aggregation pass reads it to locate the runs
    agg_files = aggregate(cfg, out_dir)
    manifest["aggregates"] = [os.path.relpath(f, out_dir) for f in agg_files]
    _write_manifest()
    return manifest


# ---------------------------------------------------------------------------
# aggregation over closed files


@dataclass
class QuantileSeries:
    stat: str
    quantiles: tuple
    values: np.ndarray  # (T, len(quantiles))


@dataclass
class DeltaDistribution:
    t: int
    q: float
    sample: np.ndarray
    mean: float
    variance: float


def load_traces(out_dir):
    """Stacked per-run trace columns; rejects mismatched iteration grids."""
    with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    cols = {"loss": [], "grad_norm": [], "cos_prev": [], "delta_f": []}
    lengths = set()
    run_ids = []
    for entry in manifest["runs"]:
        if entry["status"] != "ok":
            continue
        path = os.path.join(out_dir, "runs", f"run_{entry['id']:04d}", "trace.csv")
        data = {k: [] for k in cols}
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                for k in cols:
                    data[k].append(float(row[k]))
        lengths.add(len(data["loss"]))
        for k in cols:
            cols[k].append(data[k])
        run_ids.append(entry["id"])
    if len(lengths) > 1:
        raise InputError(f"runs have mismatched iteration grids: {sorted(lengths)}")
    return {k: np.asarray(v) for k, v in cols.items()}, run_ids, manifest


def quantile_series(stat_matrix, quantiles, stat="stat") -> QuantileSeries:
    """Per-iteration empirical quantiles, linear between order statistics."""
    stat_matrix = np.asarray(stat_matrix, dtype=np.float64)
    if stat_matrix.ndim != 2:
        raise InputError("need a (runs, iterations) matrix")
    vals = np.percentile(stat_matrix, list(quantiles), axis=0, method="linear").T
    return QuantileSeries(stat=stat, quantiles=tuple(quantiles), values=vals)


def delta_distribution(loss_matrix, delta_matrix, t, q, window) -> DeltaDistribution:
    """Loss-difference sample over runs ranked near the q-th loss quantile at t."""
    loss_matrix = np.asarray(loss_matrix)
    delta_matrix = np.asarray(delta_matrix)
    R = loss_matrix.shape[0]
    half = math.ceil(window * R)
    if 2 * half + 1 < 20:
        need = math.ceil((20 - 1) / 2 / R * 100) / 100
        raise InputError(
            f"rank band of {2 * half + 1} runs is below the minimum of 20; "
            f"need window >= {need}")
    order = np.argsort(loss_matrix[:, t], kind="stable")
    center = int(round(q / 100.0 * (R - 1)))
    lo = max(center - half, 0)
    hi = min(center + half + 1, R)
    chosen = order[lo:hi]
    sample = delta_matrix[chosen, t]
    return DeltaDistribution(t=t, q=q, sample=sample, mean=float(sample.mean()),
                             variance=float(sample.var()))


def overlap_trajectory(out_dir):
    """Mean cosine and normal 95% band per angle index across runs."""
    with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    per_key = {}
    for entry in manifest["runs"]:
        if entry["status"] != "ok":
            continue
        path = os.path.join(out_dir, "runs", f"run_{entry['id']:04d}", "angles.csv")
        if not os.path.exists(path):
            raise InputError(f"run {entry['id']} is missing eigenvector angles")
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                key = (int(row["iteration"]), int(row["index"]))
                per_key.setdefault(key, []).append(float(row["cosine"]))
    rows = []
    for (t, idx) in sorted(per_key):
        vals = np.asarray(per_key[(t, idx)])
        mean = float(vals.mean())
        hw = 1.96 * float(vals.std(ddof=1)) / math.sqrt(len(vals)) if len(vals) > 1 else 0.0
        rows.append((t, idx, mean, mean - hw, mean + hw, len(vals)))
    return rows


def aggregate(cfg: ExperimentConfig, out_dir):
    """Write the aggregate CSVs; returns the list of files produced."""
    agg_dir = os.path.join(out_dir, "aggregates")
    os.makedirs(agg_dir, exist_ok=True)
    files = []
    cols, run_ids, _ = load_traces(out_dir)
    if not run_ids:
        return files
    T = cols["loss"].shape[1]

    for stat in ("loss", "grad_norm", "cos_prev"):
        series = quantile_series(cols[stat], cfg.quantiles, stat=stat)
        path = os.path.join(agg_dir, f"quantiles_{stat}.csv")
        fields = ["t"] + [f"q{lvl:g}" for lvl in cfg.quantiles]
        _write_csv(path, fields,
                   [[t] + [_fmt(v) for v in series.values[t]] for t in range(T)])
        files.append(path)

    var_path = os.path.join(agg_dir, "delta_variance.csv")
    _write_csv(var_path, ("t", "mean", "variance"),
               [[t, _fmt(cols["delta_f"][:, t].mean()), _fmt(cols["delta_f"][:, t].var())]
                for t in range(T)])
    files.append(var_path)

    R = cols["loss"].shape[0]
    half = math.ceil(cfg.quantile_window * R)
    if 2 * half + 1 >= 20:
        rows = []
        for t in range(T):
            for q in cfg.quantiles:
                dd = delta_distribution(cols["loss"], cols["delta_f"], t, q,
                                        cfg.quantile_window)
                rows.append([t, q, len(dd.sample), _fmt(dd.mean), _fmt(dd.variance)])
        path = os.path.join(agg_dir, "delta_stats.csv")
        _write_csv(path, ("t", "q", "count", "mean", "variance"), rows)
        files.append(path)

    if cfg.resolved_snapshots():
        try:
            rows = overlap_trajectory(out_dir)
        except InputError:
            rows = []
        if rows:
            path = os.path.join(agg_dir, "overlap.csv")
            _write_csv(path, ("iteration", "index", "mean_cos", "ci_lo", "ci_hi", "runs"),
                       [[t, i, _fmt(m), _fmt(lo), _fmt(hi), cnt]
                        for (t, i, m, lo, hi, cnt) in rows])
            files.append(path)
        files.extend(aggregate_spectra(out_dir, agg_dir))
        files.extend(aggregate_dk(out_dir, agg_dir))
    return files


def _mean_by_key(paths, key_fields, value_field):
    acc = {}
    for path in paths:
        if not os.path.exists(path):
            continue
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                key = tuple(row[k] for k in key_fields)
                acc.setdefault(key, []).append(float(row[value_field]))
    return {k: float(np.mean(v)) for k, v in acc.items()}


def aggregate_spectra(out_dir, agg_dir):
    """Rank-wise mean eigenvalues across runs, per matrix kind."""
    with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    run_dirs = [os.path.join(out_dir, "runs", f"run_{e['id']:04d}")
                for e in manifest["runs"] if e["status"] == "ok"]
    files = []
    for kind in ("hf", "m", "hp"):
        means = _mean_by_key([os.path.join(d, f"spectra_{kind}.csv") for d in run_dirs],
                             ("iteration", "rank"), "eigenvalue")
        if not means:
            continue
        rows = [[int(t), int(r), _fmt(v)]
                for (t, r), v in sorted(means.items(), key=lambda kv: (int(kv[0][0]),
                                                                       int(kv[0][1])))]
        path = os.path.join(agg_dir, f"spectra_mean_{kind}.csv")
        _write_csv(path, ("iteration", "rank", "mean_eigenvalue"), rows)
        files.append(path)
    return files


def aggregate_dk(out_dir, agg_dir):
    with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    run_dirs = [os.path.join(out_dir, "runs", f"run_{e['id']:04d}")
                for e in manifest["runs"] if e["status"] == "ok"]
    paths = [os.path.join(d, "dk.csv") for d in run_dirs]
    sin_means = _mean_by_key(paths, ("iteration", "s"), "sin_theta_frob")
    bound_means = _mean_by_key(paths, ("iteration", "s"), "bound")
    if not sin_means:
        return []
    rows = [[int(t), int(s), _fmt(v), _fmt(bound_means[(t, s)])]
            for (t, s), v in sorted(sin_means.items(), key=lambda kv: (int(kv[0][0]),
                                                                       int(kv[0][1])))]
    path = os.path.join(agg_dir, "dk_mean.csv")
    _write_csv(path, ("iteration", "s", "mean_sin_theta", "mean_bound"), rows)
    return [path]


# ---------------------------------------------------------------------------
# bound reports over a finished artifact directory


def bound_over_runs(out_dir, delta=0.05, mc_draws=200, prior_sigma=1.0,
                    jsonl_path=None, seed=None):
    """One bound report per completed run, appended as JSON lines."""
    with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = ExperimentConfig.from_dict(manifest["config"])
    if seed is None:
        seed = cfg.seed
    train = datagen.load_dataset(os.path.join(out_dir, manifest["dataset"]["train"]))
    test_path = manifest["dataset"].get("test")
    test = datagen.load_dataset(os.path.join(out_dir, test_path)) if test_path else None
    if jsonl_path is None:
        jsonl_path = os.path.join(out_dir, "bound_reports.jsonl")
    reports = []
    with open(jsonl_path, "w", encoding="utf-8") as out:
        for entry in manifest["runs"]:
            if entry["status"] != "ok":
                continue
            run_dir = os.path.join(out_dir, "runs", f"run_{entry['id']:04d}")
            spec, theta0_pv, _ = netcore.load_checkpoint(os.path.join(run_dir, "init.ckpt"))
            _, theta_pv, _ = netcore.load_checkpoint(os.path.join(run_dir, "final.ckpt"))
            prior = genbound.PriorSpec(theta0=theta0_pv.values,
                                       sigmas=np.full(theta0_pv.size, prior_sigma))
            rep = genbound.bound_report(spec, theta_pv.values, prior, train, test,
                                        delta=delta, mc_draws=mc_draws,
                                        seed=seed + entry["id"],
                                        dense_limit=cfg.dense_limit)
            record = {"run_id": entry["id"], "config_hash": manifest["config_hash"],
                      **genbound.report_to_dict(rep)}
            out.write(json.dumps(record) + "\n")
            reports.append(record)
    return reports, jsonl_path


# ---------------------------------------------------------------------------
# validation


def validate_artifacts(out_dir) -> list:
    """Re-open every manifest-listed file and schema-check it. Returns problems."""
    problems = []
    manifest_path = os.path.join(out_dir, "manifest.json")
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except Exception as exc:
        return [f"manifest unreadable: {exc}"]
    if manifest.get("format") != MANIFEST_FORMAT:
        problems.append("manifest format mismatch")
    for key, path in (manifest.get("dataset") or {}).items():
        if path is None:
            continue
        try:
            datagen.load_dataset(os.path.join(out_dir, path))
        except Exception as exc:
            problems.append(f"dataset {key}: {exc}")
    expected_headers = {
        "trace.csv": list(TRACE_FIELDS),
        "spectra_hf.csv": list(spectra.SPECTRUM_FIELDS),
        "spectra_m.csv": list(spectra.SPECTRUM_FIELDS),
        "spectra_hp.csv": list(spectra.SPECTRUM_FIELDS),
        "angles.csv": ["iteration", "index", "cosine"],
        "dk.csv": ["iteration", "s", "sin_theta_frob", "bound", "eigengap"],
        "blocks.csv": ["iteration", "kind", "block", "rank", "eigenvalue"],
        "loadings.csv": ["iteration", "layer", "raw", "normalized"],
    }
    for entry in manifest.get("runs", []):
        for rel in entry.get("files", []):
            path = os.path.join(out_dir, rel)
            name = os.path.basename(rel)
            if not os.path.exists(path):
                problems.append(f"missing file {rel}")
                continue
            if name.endswith(".ckpt"):
                try:
                    netcore.load_checkpoint(path)
                except Exception as exc:
                    problems.append(f"{rel}: {exc}")
            elif name.endswith(".csv") and name in expected_headers:
                try:
                    with open(path, newline="", encoding="utf-8") as fh:
                        header = next(csv.reader(fh))
                    if header != expected_headers[name]:
                        problems.append(f"{rel}: unexpected header {header}")
                except StopIteration:
                    problems.append(f"{rel}: empty file")
                except Exception as exc:
                    problems.append(f"{rel}: {exc}")
    for rel in manifest.get("aggregates", []):
        if not os.path.exists(os.path.join(out_dir, rel)):
            problems.append(f"missing aggregate {rel}")
    return problems
