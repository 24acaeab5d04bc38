"""Feed-forward ReLU networks with exact first- and second-order oracles.

Everything is plain numpy, float64, and vectorized over both samples and
Hessian-product directions. The ReLU derivative uses the convention
relu'(0) = 1/2 and relu'' = 0 everywhere, so Hessian-vector products are
obtained by forward-mode differentiation of the backward pass with the
activation masks held fixed. Besides the softmax cross-entropy head used
by the experiments, two surrogate heads ("squared" with Gaussian noise
scale, "logistic" with binary labels) expose the closed-form regression
oracles through the same code path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, InputError, NumericError

DENSE_LIMIT = 5000

LOSS_HEADS = ("xent", "squared", "logistic")


@dataclass(frozen=True)
class NetSpec:
    """Architecture of a fully connected net.

    num_classes is the output dimension: the class count for the "xent"
    head, and 1 for the scalar "squared"/"logistic" surrogate heads.
    """

    input_dim: int
    hidden_widths: tuple
    num_classes: int
    biases: bool = True
    loss: str = "xent"
    noise_sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.num_classes < 1 or any(w < 1 for w in self.hidden_widths):
            raise InputError("all layer widths must be positive integers")
        if self.loss not in LOSS_HEADS:
            raise InputError(f"unknown loss head {self.loss!r}; expected one of {LOSS_HEADS}")
        if self.loss == "xent" and self.num_classes < 2:
            raise InputError("cross-entropy head needs at least 2 classes")
        if self.loss in ("squared", "logistic") and self.num_classes != 1:
            raise InputError(f"{self.loss} head has a scalar output (num_classes=1)")
        if self.loss == "squared" and not self.noise_sigma > 0:
            raise InputError("noise_sigma must be positive")

    @property
    def layer_dims(self):
        """(fan_in, fan_out) per layer, input to output."""
        dims = (self.input_dim,) + self.hidden_widths + (self.num_classes,)
        return tuple(zip(dims[:-1], dims[1:]))

    @property
    def num_layers(self):
        return len(self.hidden_widths) + 1

    def param_count(self):
        return sum(fi * fo + (fo if self.biases else 0) for fi, fo in self.layer_dims)

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "num_classes": self.num_classes,
            "biases": self.biases,
            "loss": self.loss,
            "noise_sigma": self.noise_sigma,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_widths=tuple(d["hidden_widths"]),
            num_classes=int(d["num_classes"]),
            biases=bool(d.get("biases", True)),
            loss=d.get("loss", "xent"),
            noise_sigma=float(d.get("noise_sigma", 1.0)),
        )


@dataclass(frozen=True)
class LayerLayout:
    """Slice bookkeeping for one layer inside the flat parameter vector."""

    offset: int
    rows: int  # fan_out
    cols: int  # fan_in
    bias_offset: int  # -1 when the layer has no bias

    @property
    def weight_size(self):
        return self.rows * self.cols

    @property
    def size(self):
        return self.weight_size + (self.rows if self.bias_offset >= 0 else 0)

    @property
    def end(self):
        return self.offset + self.size

    def to_dict(self):
        return {"offset": self.offset, "rows": self.rows, "cols": self.cols,
                "bias_offset": self.bias_offset}


def build_layout(spec: NetSpec):
    """Per-layer (offset, rows, cols, bias_offset) records partitioning [0, p)."""
    records = []
    off = 0
    for fan_in, fan_out in spec.layer_dims:
        wsize = fan_in * fan_out
        boff = off + wsize if spec.biases else -1
        records.append(LayerLayout(offset=off, rows=fan_out, cols=fan_in, bias_offset=boff))
        off += wsize + (fan_out if spec.biases else 0)
    return tuple(records)


@dataclass
class ParamVector:
    """Flat parameter array plus its layer layout map."""

    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise InputError("parameter values must be a flat vector")
        if self.layout and self.layout[-1].end != self.values.size:
            raise InputError("layout does not partition the value vector")

    @property
    def size(self):
        return self.values.size

    def weights(self, layer):
        rec = self.layout[layer]
        return self.values[rec.offset:rec.offset + rec.weight_size].reshape(rec.rows, rec.cols)

    def bias(self, layer):
        rec = self.layout[layer]
        if rec.bias_offset < 0:
            return None
        return self.values[rec.bias_offset:rec.bias_offset + rec.rows]

    def set_weights(self, layer, W):
        rec = self.layout[layer]
        W = np.asarray(W, dtype=np.float64)
        if W.shape != (rec.rows, rec.cols):
            raise InputError(f"layer {layer} weights must have shape {(rec.rows, rec.cols)}")
        self.values[rec.offset:rec.offset + rec.weight_size] = W.ravel()

    def set_bias(self, layer, b):
        rec = self.layout[layer]
        if rec.bias_offset < 0:
            raise InputError(f"layer {layer} has no bias")
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (rec.rows,):
            raise InputError(f"layer {layer} bias must have shape {(rec.rows,)}")
        self.values[rec.bias_offset:rec.bias_offset + rec.rows] = b

    def copy(self):
        return ParamVector(self.values.copy(), self.layout)


def zeros_params(spec: NetSpec) -> ParamVector:
    return ParamVector(np.zeros(spec.param_count()), build_layout(spec))


def random_params(spec: NetSpec, rng, scale=1.0) -> ParamVector:
    """theta ~ N(0, scale^2 I), the initialization used by the experiments."""
    return ParamVector(scale * rng.standard_normal(spec.param_count()), build_layout(spec))


@dataclass
class EvalReport:
    loss: float
    logits: np.ndarray
    prediction_probs: np.ndarray  # None for the squared head
    per_sample_losses: np.ndarray = field(repr=False, default=None)


@dataclass
class HessianHandle:
    """Dense matrix or matrix-free v -> H v operator, plus layer layout."""

    mode: str  # "dense" | "operator"
    layout: tuple
    dense: np.ndarray = None
    hvp: object = None  # callable v -> H v in operator mode
    dim: int = 0

    def matvec(self, v):
        if self.mode == "dense":
            return self.dense @ v
        return self.hvp(v)


# ---------------------------------------------------------------------------
# forward / backward primitives


def _relu(z):
    return np.maximum(z, 0.0)


def _drelu(z):
    # relu'(0) = 1/2 by convention; relu'' identically 0.
    return np.where(z > 0, 1.0, np.where(z == 0, 0.5, 0.0))


def _check_batch(spec, X, y):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise InputError(f"features must be (n, {spec.input_dim}); got {X.shape}")
    y = np.asarray(y)
    if y.shape != (X.shape[0],):
        raise InputError(f"labels must be ({X.shape[0]},); got {y.shape}")
    if spec.loss == "xent":
        y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= spec.num_classes:
            raise InputError(f"labels must lie in [0, {spec.num_classes})")
    elif spec.loss == "logistic":
        y = y.astype(np.float64)
        if not np.all((y == 0) | (y == 1)):
            raise InputError("logistic labels must be 0 or 1")
    else:
        y = y.astype(np.float64)
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite feature values")
    return X, y


def _check_theta(spec, theta):
    if isinstance(theta, ParamVector):
        pv = theta
    else:
        pv = ParamVector(np.asarray(theta, dtype=np.float64), build_layout(spec))
    if pv.size != spec.param_count():
        raise InputError(f"expected {spec.param_count()} parameters, got {pv.size}")
    if not np.all(np.isfinite(pv.values)):
        raise NumericError("non-finite parameter values")
    return pv


def _forward(spec, pv, X):
    """Returns (acts, masks, logits): acts[l] is the input to layer l."""
    acts = [X]
    masks = []
    a = X
    for l in range(spec.num_layers):
        z = a @ pv.weights(l).T
        b = pv.bias(l)
        if b is not None:
            z = z + b
        if l < spec.num_layers - 1:
            masks.append(_drelu(z))
            a = _relu(z)
            acts.append(a)
        else:
            return acts, masks, z


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_true(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return z[np.arange(len(y)), y] - lse


def _softplus(x):
    return np.logaddexp(0.0, x)


def _head_losses_probs(spec, logits, y):
    """Per-sample losses and the prediction-probability matrix (or None)."""
    if spec.loss == "xent":
        losses = -_log_softmax_true(logits, y)
        return losses, _softmax(logits)
    if spec.loss == "logistic":
        z = logits[:, 0]
        losses = y * _softplus(-z) + (1.0 - y) * _softplus(z)
        p1 = 1.0 / (1.0 + np.exp(-z))
        return losses, np.column_stack([1.0 - p1, p1])
    z = logits[:, 0]
    losses = (z - y) ** 2 / (2.0 * spec.noise_sigma ** 2)
    return losses, None


def _grad_seed(spec, logits, y):
    """d(per-sample loss)/d(logits), shape (n, out)."""
    if spec.loss == "xent":
        P = _softmax(logits)
        seed = P.copy()
        seed[np.arange(len(y)), y] -= 1.0
        return seed
    if spec.loss == "logistic":
        p1 = 1.0 / (1.0 + np.exp(-logits[:, 0]))
        return (p1 - y)[:, None]
    return (logits[:, 0] - y)[:, None] / spec.noise_sigma ** 2


def forward_loss(spec: NetSpec, theta, batch_X, batch_y) -> EvalReport:
    """Mean loss, logits, and per-sample prediction probabilities on a batch."""
    pv = _check_theta(spec, theta)
    X, y = _check_batch(spec, batch_X, batch_y)
    _, _, logits = _forward(spec, pv, X)
    losses, probs = _head_losses_probs(spec, logits, y)
    loss = float(losses.mean())
    if not np.isfinite(loss):
        raise NumericError("non-finite loss value")
    return EvalReport(loss=loss, logits=logits, prediction_probs=probs,
                      per_sample_losses=losses)


def per_sample_gradients(spec: NetSpec, theta, X, y) -> np.ndarray:
    """Row i is the gradient of the per-sample loss at sample i, shape (n, p)."""
    pv = _check_theta(spec, theta)
    X, y = _check_batch(spec, X, y)
    if len(y) == 0:
        raise InputError("dataset must be nonempty")
    acts, masks, logits = _forward(spec, pv, X)
    n = X.shape[0]
    out = np.empty((n, pv.size))
    delta = _grad_seed(spec, logits, y)
    for l in range(spec.num_layers - 1, -1, -1):
        rec = pv.layout[l]
        a_in = acts[l]
        gw = delta[:, :, None] * a_in[:, None, :]
        out[:, rec.offset:rec.offset + rec.weight_size] = gw.reshape(n, -1)
        if rec.bias_offset >= 0:
            out[:, rec.bias_offset:rec.bias_offset + rec.rows] = delta
        if l > 0:
            delta = (delta @ pv.weights(l)) * masks[l - 1]
    return out


def batch_gradient(spec: NetSpec, theta, X, y, chunk=4096) -> np.ndarray:
    """Gradient of the mean loss: the exact mean of per-sample gradient rows."""
    pv = _check_theta(spec, theta)
    X, y = _check_batch(spec, X, y)
    n = X.shape[0]
    if n <= chunk:
        return per_sample_gradients(spec, pv, X, y).mean(axis=0)
    acc = np.zeros(pv.size)
    for s in range(0, n, chunk):
        rows = per_sample_gradients(spec, pv, X[s:s + chunk], y[s:s + chunk])
        acc += rows.sum(axis=0)
    return acc / n


# ---------------------------------------------------------------------------
# Hessian-vector machinery
#
# Directions are carried as an extra axis q through a forward-tangent pass of
# the (forward + backward) computation with the ReLU masks frozen, which is
# exactly the relu''=0 convention. Seeds choose what is differentiated:
# "loss" gives the Hessian of the empirical loss, "prob" the Hessian of the
# per-sample true-class probability (used by the decomposition cross-check).


def _softmax_jvp(P, zdot):
    # (diag(P) - P P^T) zdot, batched: P (n,k), zdot (n,q,k)
    inner = (zdot * P[:, None, :]).sum(axis=2, keepdims=True)
    return P[:, None, :] * (zdot - inner)


def _hvp_engine(spec, pv, X, y, V, seed="loss", weights=None):
    """Weighted per-sample Hessian products: sum_i w_i H_i V. V is (p, q)."""
    n = X.shape[0]
    q = V.shape[1]
    acts, masks, logits = _forward(spec, pv, X)
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)

    nl = spec.num_layers
    Vw = []
    Vb = []
    for l in range(nl):
        rec = pv.layout[l]
        Vw.append(V[rec.offset:rec.offset + rec.weight_size, :].T.reshape(q, rec.rows, rec.cols))
        if rec.bias_offset >= 0:
            Vb.append(V[rec.bias_offset:rec.bias_offset + rec.rows, :].T)
        else:
            Vb.append(None)

    # forward tangents
    adots = [None]  # input tangent is zero
    adot = None
    for l in range(nl):
        a_in = acts[l]
        # zdot = a_in . Vw[l]^T over fan_in, shape (n, q, out)
        zdot = np.tensordot(a_in, Vw[l], axes=([1], [2]))
        if adot is not None:
            zdot = zdot + adot @ pv.weights(l).T
        if Vb[l] is not None:
            zdot = zdot + Vb[l][None, :, :]
        if l < nl - 1:
            adot = masks[l][:, None, :] * zdot
            adots.append(adot)
        else:
            zdot_out = zdot

    # seeds at the output
    if seed == "loss":
        delta = _grad_seed(spec, logits, y)
        if spec.loss == "xent":
            ddelta = _softmax_jvp(_softmax(logits), zdot_out)
        elif spec.loss == "logistic":
            p1 = 1.0 / (1.0 + np.exp(-logits[:, 0]))
            ddelta = (p1 * (1.0 - p1))[:, None, None] * zdot_out
        else:
            ddelta = zdot_out / spec.noise_sigma ** 2
    elif seed == "prob":
        # Seeds for (1/n) sum_i (1/p_i) grad^2 p_i with the 1/(n p_i) weight
        # folded in analytically, so nothing overflows when p_i underflows:
        # grad_z p_y = p_y (e_y - P) and its tangent is
        # p_y [(e_y - P)^T zdot] (e_y - P) - p_y Pdot, hence after weighting
        # delta = (e_y - P)/n and ddelta = ([(e_y - P)^T zdot](e_y - P) - Pdot)/n.
        if spec.loss != "xent":
            raise InputError("probability-seeded Hessians are defined for the xent head")
        P = _softmax(logits)
        idx = np.arange(n)
        onehot = np.zeros_like(P)
        onehot[idx, y] = 1.0
        direction = onehot - P
        delta = direction / n
        Pdot = _softmax_jvp(P, zdot_out)
        logpdot = (direction[:, None, :] * zdot_out).sum(axis=2)  # (n, q)
        ddelta = (logpdot[:, :, None] * direction[:, None, :] - Pdot) / n
        w = np.ones(n)
    else:
        raise InputError(f"unknown seed {seed!r}")

    result = np.empty((pv.size, q))
    for l in range(nl - 1, -1, -1):
        rec = pv.layout[l]
        a_in = acts[l]
        adot_in = adots[l]
        wa = a_in * w[:, None]
        # sum_i w_i ddelta_i (x) a_i : (q*out, n) @ (n, in)
        hw = (ddelta.transpose(1, 2, 0).reshape(q * rec.rows, n) @ wa).reshape(q, rec.rows, rec.cols)
        if adot_in is not None:
            wd = delta * w[:, None]
            hw += np.einsum("no,nqi->qoi", wd, adot_in, optimize=True)
        result[rec.offset:rec.offset + rec.weight_size, :] = hw.reshape(q, -1).T
        if rec.bias_offset >= 0:
            hb = np.einsum("nqo,n->qo", ddelta, w, optimize=True)
            result[rec.bias_offset:rec.bias_offset + rec.rows, :] = hb.T
        if l > 0:
            Wl = pv.weights(l)
            ddelta = masks[l - 1][:, None, :] * (
                np.einsum("no,qoi->nqi", delta, Vw[l], optimize=True) + ddelta @ Wl
            )
            delta = (delta @ Wl) * masks[l - 1]
    return result


def hessian_vector_product(spec: NetSpec, theta, X, y, v, chunk=4096) -> np.ndarray:
    """H_f(theta) v for the mean loss over (X, y). Exactly linear in v."""
    pv = _check_theta(spec, theta)
    X, y = _check_batch(spec, X, y)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (pv.size,):
        raise InputError(f"direction must have shape ({pv.size},)")
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite direction")
    n = X.shape[0]
    if n <= chunk:
        out = _hvp_engine(spec, pv, X, y, v[:, None])[:, 0]
    else:
        acc = np.zeros(pv.size)
        for s in range(0, n, chunk):
            Xs, ys = X[s:s + chunk], y[s:s + chunk]
            acc += len(ys) * _hvp_engine(spec, pv, Xs, ys, v[:, None])[:, 0]
        out = acc / n
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite Hessian-vector product")
    return out


def hessian_operator(spec: NetSpec, theta, X, y, chunk=4096) -> HessianHandle:
    """Matrix-free handle; use for parameter counts above the dense limit."""
    pv = _check_theta(spec, theta)
    X, y = _check_batch(spec, X, y)

    def hvp(v):
        return hessian_vector_product(spec, pv, X, y, v, chunk=chunk)

    return HessianHandle(mode="operator", layout=pv.layout, hvp=hvp, dim=pv.size)


def dense_hessian(spec: NetSpec, theta, X, y, dense_limit=DENSE_LIMIT,
                  dir_chunk=512) -> HessianHandle:
    """Full Hessian assembled from basis HVPs and symmetrized as (H+H^T)/2."""
    pv = _check_theta(spec, theta)
    X, y = _check_batch(spec, X, y)
    p = pv.size
    if p > dense_limit:
        raise CapacityError(
            f"p={p} exceeds dense limit {dense_limit}; use hessian_operator instead")
    H = np.empty((p, p))
    eye = np.eye(p)
    for s in range(0, p, dir_chunk):
        H[:, s:s + dir_chunk] = _hvp_engine(spec, pv, X, y, eye[:, s:s + dir_chunk])
    H = 0.5 * (H + H.T)
    if not np.all(np.isfinite(H)):
        raise NumericError("non-finite Hessian entries")
    return HessianHandle(mode="dense", layout=pv.layout, dense=H, dim=p)


def hessian_diagonal(spec: NetSpec, theta, X, y, dense_limit=DENSE_LIMIT) -> np.ndarray:
    """Exact diag(H_f) via basis products (p <= dense limit)."""
    return np.diag(dense_hessian(spec, theta, X, y, dense_limit=dense_limit).dense).copy()


def probability_weighted_hessian(spec: NetSpec, theta, X, y,
                                 dense_limit=DENSE_LIMIT, dir_chunk=512) -> np.ndarray:
    """(1/n) sum_i (1/p_i) grad^2 p_i, assembled from probability-seeded HVPs.

    This is the decomposition residual computed on its own, without ever
    forming M or H_f, so it can cross-check the subtraction path. The
    1/p_i weights are folded into the seeds, which keeps the assembly
    finite even when a true-class probability underflows.
    """
    pv = _check_theta(spec, theta)
    X, y = _check_batch(spec, X, y)
    p = pv.size
    if p > dense_limit:
        raise CapacityError(f"p={p} exceeds dense limit {dense_limit}")
    H = np.empty((p, p))
    eye = np.eye(p)
    for s in range(0, p, dir_chunk):
        H[:, s:s + dir_chunk] = _hvp_engine(spec, pv, X, y, eye[:, s:s + dir_chunk],
                                            seed="prob")
    return 0.5 * (H + H.T)


def layer_blocks(handle: HessianHandle):
    """Diagonal blocks G_h and trailing sub-Hessians H_h of a dense Hessian.

    H_0 is the full matrix and the last H equals the last G.
    """
    if handle.mode != "dense":
        raise CapacityError("layer blocks need a dense Hessian")
    H = handle.dense
    gs, hs = [], []
    for rec in handle.layout:
        gs.append(H[rec.offset:rec.end, rec.offset:rec.end].copy())
        hs.append(H[rec.offset:, rec.offset:].copy())
    return gs, hs


# ---------------------------------------------------------------------------
# checkpoint container: one JSON header line, then an optional raw payload

_CKPT_FORMAT = "sgdlab-ckpt-1"


def save_checkpoint(path, spec: NetSpec, theta, seed=None, json_limit=DENSE_LIMIT):
    """JSON header (spec, layout, seed) + little-endian float64 payload.

    Parameter vectors with p <= json_limit are stored as a single JSON file.
    """
    pv = _check_theta(spec, theta)
    header = {
        "format": _CKPT_FORMAT,
        "spec": spec.to_dict(),
        "layout": [rec.to_dict() for rec in pv.layout],
        "seed": seed,
        "p": pv.size,
    }
    if pv.size <= json_limit:
        header["encoding"] = "json"
        header["values"] = pv.values.tolist()
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(header, fh)
    else:
        header["encoding"] = "binary-le-f64"
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode("utf-8") + b"\n")
            fh.write(pv.values.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (spec, ParamVector, seed)."""
    with open(path, "rb") as fh:
        first = fh.readline()
        try:
            header = json.loads(first.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InputError(f"not a checkpoint file: {path}") from exc
        if header.get("format") != _CKPT_FORMAT:
            raise InputError(f"unknown checkpoint format in {path}")
        spec = NetSpec.from_dict(header["spec"])
        p = int(header["p"])
        if header["encoding"] == "json":
            values = np.asarray(header["values"], dtype=np.float64)
        else:
            payload = fh.read(8 * p)
            if len(payload) != 8 * p:
                raise InputError(f"truncated checkpoint payload in {path}")
            values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if values.size != p or p != spec.param_count():
        raise InputError(f"checkpoint size mismatch in {path}")
    return spec, ParamVector(values, build_layout(spec)), header.get("seed")
