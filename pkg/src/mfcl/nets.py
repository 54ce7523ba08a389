"""Dense MLPs, activations, initialization, and the multifidelity composite.

A multifidelity model corrects a frozen previous model: a linear subnet reads
the previous model's output, a nonlinear subnet reads the raw input
concatenated with the previous output, and the model output is their sum.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

ACTIVATIONS = ("swish", "tanh", "relu", "linear")


def swish(x):
    """x * sigmoid(x) (unit beta)."""
    return ad.mul(x, ad.sigmoid(x))


def apply_activation(name, x):
    if name == "tanh":
        return ad.tanh(x)
    if name == "swish":
        return swish(x)
    if name == "relu":
        return ad.relu(x)
    if name == "linear":
        return x
    raise ValueError(f"unknown activation {name!r}")


def activation_value_and_grad(name, z):
    """(f(z), f'(z)) on plain arrays, for hand-rolled backprop paths."""
    z = np.asarray(z, dtype=np.float64)
    if name == "tanh":
        t = np.tanh(z)
        return t, 1.0 - t * t
    if name == "swish":
        s = 0.5 * (np.tanh(z * 0.5) + 1.0)
        return z * s, s * (1.0 + z * (1.0 - s))
    if name == "relu":
        mask = (z > 0).astype(np.float64)
        return z * mask, mask
    if name == "linear":
        return z, np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a dense net: layer widths plus hidden activation."""

    layer_widths: tuple
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ValueError("layer_widths needs at least an input and an output width")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError(f"all widths must be >= 1, got {self.layer_widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self):
        return self.layer_widths[0]

    @property
    def n_out(self):
        return self.layer_widths[-1]

    @property
    def n_params(self):
        ws = self.layer_widths
        return sum(fi * fo + fo for fi, fo in zip(ws[:-1], ws[1:]))

    def layer_shapes(self):
        ws = self.layer_widths
        return [((fi, fo), (fo,)) for fi, fo in zip(ws[:-1], ws[1:])]


class MlpParams:
    """Per-layer (W, b) pairs matching an MlpSpec.

    Entries are float64 arrays during evaluation and tape Vars while a
    training step is recording. Canonical flat order: layer by layer,
    W (C order) then b.
    """

    __slots__ = ("spec", "layers")

    def __init__(self, spec, layers):
        self.spec = spec
        self.layers = layers

    @classmethod
    def from_flat(cls, spec, theta):
        """Views into a flat parameter buffer (no copies)."""
        layers = []
        off = 0
        for (wi, wo), (bo,) in spec.layer_shapes():
            W = theta[off:off + wi * wo].reshape(wi, wo)
            off += wi * wo
            b = theta[off:off + bo]
            off += bo
            layers.append((W, b))
        if off != theta.size:
            raise ValueError(f"flat buffer has {theta.size} entries, spec needs {off}")
        return cls(spec, layers)

    def flatten(self):
        out = np.empty(self.spec.n_params)
        off = 0
        for W, b in self.layers:
            out[off:off + W.size] = np.ravel(W)
            off += W.size
            out[off:off + b.size] = b
            off += b.size
        return out

    def copy(self):
        return MlpParams(self.spec, [(W.copy(), b.copy()) for W, b in self.layers])

    def entries(self):
        for W, b in self.layers:
            yield W
            yield b


def init_mlp(spec, seed):
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(int(seed))
    layers = []
    for (fi, fo), _ in spec.layer_shapes():
        bound = np.sqrt(6.0 / (fi + fo))
        W = rng.uniform(-bound, bound, size=(fi, fo))
        layers.append((W, np.zeros(fo)))
    return MlpParams(spec, layers)


def mlp_apply(params, x):
    """Forward pass on array / Var / Jet inputs. No validation (hot path)."""
    act = params.spec.activation
    h = x
    last = len(params.layers) - 1
    for i, (W, b) in enumerate(params.layers):
        h = ad.add(ad.matmul(h, W), b)
        if i != last:
            h = apply_activation(act, h)
    return h


def mlp_forward(params, x):
    """Validated forward pass on plain arrays; preserves vector/matrix shape."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != params.spec.n_in:
        raise ValueError(
            f"input width {x.shape[1]} does not match spec width {params.spec.n_in}")
    out = mlp_apply(params, x)
    return out[0] if squeeze else out


class SfModel:
    """A plain dense network as a callable model."""

    __slots__ = ("params",)

    def __init__(self, params):
        self.params = params

    @property
    def spec(self):
        return self.params.spec

    @property
    def n_in(self):
        return self.params.spec.n_in

    @property
    def n_out(self):
        return self.params.spec.n_out

    def __call__(self, x):
        return mlp_apply(self.params, x)


class MultiFidelityModel:
    """Frozen previous model plus trainable linear and nonlinear corrections."""

    __slots__ = ("prev", "linear", "nonlinear")

    def __init__(self, prev, linear, nonlinear):
        n_prev = prev.n_out
        n_in = prev.n_in
        if linear.spec.activation != "linear":
            raise ValueError("linear subnet must use the linear activation")
        if linear.spec.n_in != n_prev or linear.spec.n_out != n_prev:
            raise ValueError(
                f"linear subnet must map {n_prev} -> {n_prev}, got "
                f"{linear.spec.n_in} -> {linear.spec.n_out}")
        if nonlinear.spec.n_in != n_in + n_prev or nonlinear.spec.n_out != n_prev:
            raise ValueError(
                f"nonlinear subnet must map {n_in + n_prev} -> {n_prev}, got "
                f"{nonlinear.spec.n_in} -> {nonlinear.spec.n_out}")
        self.prev = prev
        self.linear = linear
        self.nonlinear = nonlinear

    @property
    def n_in(self):
        return self.prev.n_in

    @property
    def n_out(self):
        return self.prev.n_out

    def __call__(self, x):
        return mf_forward(self, x)


def mf_forward(model, x):
    """linear(prev(x)) + nonlinear(concat(x, prev(x))), jet/Var friendly."""
    p = model.prev(x)
    lin = mlp_apply(model.linear, p)
    nl = mlp_apply(model.nonlinear, ad.concat_cols(x, p))
    return ad.add(lin, nl)


def l2_penalty_nonlinear(model):
    """Sum of squares of every weight and bias of the nonlinear subnet."""
    total = 0.0
    for p in model.nonlinear.entries():
        total = ad.add(total, ad.sum_all(ad.mul(p, p)))
    return total


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line, then float64 little-endian parameters in
# canonical order (for mf files: linear subnet first, then nonlinear)
# ---------------------------------------------------------------------------

_MAGIC = "mfcl-checkpoint-v1"


def save_model(path, model, seed=None, prev_file=None):
    """Write one network file; `prev_file` names the already-saved prev net."""
    if isinstance(model, MultiFidelityModel):
        if prev_file is None:
            raise ValueError("multifidelity checkpoints need prev_file")
        header = {
            "format": _MAGIC,
            "kind": "mf",
            "linear_widths": list(model.linear.spec.layer_widths),
            "nonlinear_widths": list(model.nonlinear.spec.layer_widths),
            "activation": model.nonlinear.spec.activation,
            "seed": seed,
            "prev": prev_file,
        }
        theta = np.concatenate([model.linear.flatten(), model.nonlinear.flatten()])
    elif isinstance(model, SfModel):
        header = {
            "format": _MAGIC,
            "kind": "sf",
            "widths": list(model.spec.layer_widths),
            "activation": model.spec.activation,
            "seed": seed,
            "prev": None,
        }
        theta = model.params.flatten()
    else:
        raise ValueError(f"cannot checkpoint {type(model).__name__}")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(theta, dtype="<f8").tobytes())


def load_model(path):
    """Read a checkpoint, following the prev chain relative to its directory."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        if header.get("format") != _MAGIC:
            raise ValueError(f"{path} is not a {_MAGIC} file")
        raw = fh.read()
    theta = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if header["kind"] == "sf":
        spec = MlpSpec(tuple(header["widths"]), header["activation"])
        return SfModel(MlpParams.from_flat(spec, theta.copy()))
    if header["kind"] == "mf":
        prev = load_model(os.path.join(os.path.dirname(path), header["prev"]))
        lin_spec = MlpSpec(tuple(header["linear_widths"]), "linear")
        nl_spec = MlpSpec(tuple(header["nonlinear_widths"]), header["activation"])
        n_lin = lin_spec.n_params
        linear = MlpParams.from_flat(lin_spec, theta[:n_lin].copy())
        nonlinear = MlpParams.from_flat(nl_spec, theta[n_lin:].copy())
        return MultiFidelityModel(prev, linear, nonlinear)
    raise ValueError(f"unknown checkpoint kind {header['kind']!r}")
