"""Softplus MLPs for the potential phi(x, t) and the direct score s(x, t).

Parameters live in one flat float64 vector. Layer order: for each layer in
turn, the weight matrix (out x in, row-major) followed by its bias. Inputs
are the concatenation (x_1, ..., x_d, t) with t fed raw.

Derivatives with respect to the inputs are propagated forward through the
layers ("jets"), so gradients, Laplacians, Hessians and time derivatives are
exact to rounding and remain differentiable in the parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, NumericError
from .fields import DTYPE, PointDerivatives, ScoreField, as_points, as_times

LAYER_ORDER = "per layer: weight (out x in, row-major) then bias; layers input to output"
CHECKPOINT_MAGIC = b"FPGAPCK\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpConfig:
    in_dim: int = 3
    hidden: tuple[int, ...] = (80, 80)
    out_dim: int = 1
    activation: str = "softplus"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.in_dim < 2 or self.out_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError(f"invalid layer widths in {self}")
        if self.activation != "softplus":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @classmethod
    def potential(cls, dim: int = 2, hidden=(80, 80), activation: str = "softplus") -> "MlpConfig":
        return cls(dim + 1, tuple(hidden), 1, activation)

    @classmethod
    def score(cls, dim: int = 2, hidden=(80, 80), activation: str = "softplus") -> "MlpConfig":
        return cls(dim + 1, tuple(hidden), dim, activation)

    @property
    def dim(self) -> int:
        """Spatial dimension d (inputs are x and t)."""
        return self.in_dim - 1

    @property
    def widths(self) -> list[int]:
        return [self.in_dim, *self.hidden, self.out_dim]

    @property
    def n_params(self) -> int:
        w = self.widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def unflatten(theta: torch.Tensor, cfg: MlpConfig) -> list[tuple[torch.Tensor, torch.Tensor]]:
    if theta.shape != (cfg.n_params,):
        raise ConfigError(f"parameter vector has shape {tuple(theta.shape)}, expected ({cfg.n_params},)")
    layers, k = [], 0
    w = cfg.widths
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        W = theta[k:k + fan_in * fan_out].view(fan_out, fan_in)
        k += fan_in * fan_out
        b = theta[k:k + fan_out]
        k += fan_out
        layers.append((W, b))
    return layers


def init_params(cfg: MlpConfig, seed: int) -> torch.Tensor:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    rng = np.random.default_rng(seed)
    w = cfg.widths
    chunks = []
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, fan_out))
    return torch.as_tensor(np.concatenate(chunks), dtype=DTYPE)


def _softplus(h):
    return torch.logaddexp(h, torch.zeros((), dtype=h.dtype))


def _inputs(cfg: MlpConfig, x, t) -> torch.Tensor:
    x = as_points(x)
    if x.shape[1] != cfg.dim:
        raise ConfigError(f"input dimension {x.shape[1]} does not match network dimension {cfg.dim}")
    t = as_times(t, x.shape[0])
    return torch.cat([x, t[:, None]], dim=1)


def forward(theta, cfg: MlpConfig, x, t) -> torch.Tensor:
    """Plain forward pass, output shape (n, out_dim)."""
    a = _inputs(cfg, x, t)
    layers = unflatten(theta, cfg)
    for W, b in layers[:-1]:
        a = _softplus(torch.addmm(b, a, W.T))
    W, b = layers[-1]
    return torch.addmm(b, a, W.T)


@dataclass
class Jet:
    """Network outputs with input derivatives.

    ``value`` (n, m); ``jac`` (n, m, d+1) over (x, t); ``second`` maps a
    spatial index pair (i, j), i <= j, to d^2 out / dx_i dx_j of shape (n, m).
    """

    value: torch.Tensor
    jac: torch.Tensor
    second: dict = field(default_factory=dict)

    def laplacian(self) -> torch.Tensor:
        d = self.jac.shape[-1] - 1
        return sum(self.second[(i, i)] for i in range(d))

    def hessian(self) -> torch.Tensor:
        d = self.jac.shape[-1] - 1
        n, m = self.value.shape
        H = self.value.new_empty(n, m, d, d)
        for i in range(d):
            for j in range(i, d):
                H[:, :, i, j] = self.second[(i, j)]
                H[:, :, j, i] = self.second[(i, j)]
        return H


def jet(theta, cfg: MlpConfig, x, t, second: str | None = "diag") -> Jet:
    """Forward-mode propagation of input derivatives through the MLP.

    ``second``: None (first derivatives only), "diag" (pure second
    derivatives, enough for the Laplacian) or "full" (all spatial pairs).
    """
    z = _inputs(cfg, x, t)
    n, D = z.shape
    d = D - 1
    if second is None:
        pairs = []
    elif second == "diag":
        pairs = [(i, i) for i in range(d)]
    elif second == "full":
        pairs = [(i, j) for i in range(d) for j in range(i, d)]
    else:
        raise ConfigError(f"unknown second-derivative mode {second!r}")
    P = len(pairs)
    layers = unflatten(theta, cfg)

    W, b = layers[0]
    h = torch.addmm(b, z, W.T)
    J = W.T[:, None, :].expand(D, n, W.shape[0])  # (D, n, H); constant in the first layer
    S = None
    for li in range(1, len(layers)):
        s1 = torch.sigmoid(h)
        s2 = s1 * (1.0 - s1)
        a = _softplus(h)
        Ja = s1[None] * J
        if P:
            Sa = torch.stack([s2 * J[i] * J[j] for i, j in pairs])
            if S is not None:
                Sa = Sa + s1[None] * S
        W, b = layers[li]
        H_out = W.shape[0]
        parts = [a, Ja.reshape(D * n, -1)]
        if P:
            parts.append(Sa.reshape(P * n, -1))
        out = torch.cat(parts, 0) @ W.T
        h = out[:n] + b
        J = out[n:(D + 1) * n].reshape(D, n, H_out)
        S = out[(D + 1) * n:].reshape(P, n, H_out) if P else None
    value = h
    jac = J.permute(1, 2, 0)
    if P and S is None:
        S = torch.zeros(P, *h.shape, dtype=h.dtype)
    sec = {pair: S[k] for k, pair in enumerate(pairs)} if P else {}
    return Jet(value, jac, sec)


def potential_eval(theta, cfg: MlpConfig, x, t) -> torch.Tensor:
    if cfg.out_dim != 1:
        raise ConfigError("potential_eval needs a scalar-output network")
    out = forward(theta, cfg, x, t)[:, 0]
    if not torch.isfinite(out).all():
        raise NumericError("non-finite potential value")
    return out


def derivatives_eval(theta, cfg: MlpConfig, x, t) -> PointDerivatives:
    if cfg.out_dim != 1:
        raise ConfigError("derivatives_eval needs a scalar-output network")
    j = jet(theta, cfg, x, t, second="diag")
    d = cfg.dim
    return PointDerivatives(
        value=j.value[:, 0],
        grad=j.jac[:, 0, :d],
        laplacian=j.laplacian()[:, 0],
        dt=j.jac[:, 0, d],
    ).check_finite("network")


def potential_grad(theta, cfg: MlpConfig, x, t, with_time: bool = False):
    """Gradient of phi by hand-written backpropagation; cheapest route for sampling."""
    z = _inputs(cfg, x, t)
    layers = unflatten(theta, cfg)
    hs = []
    a = z
    for k, (W, b) in enumerate(layers[:-1]):
        h = torch.addmm(b, a, W.T)
        hs.append(h)
        if k < len(layers) - 2:  # the last activation only enters through its slope
            a = _softplus(h)
    delta = layers[-1][0]  # (1, H_L)
    for k in range(len(hs) - 1, -1, -1):
        delta = delta * torch.sigmoid(hs[k])
        delta = delta @ layers[k][0]
    d = cfg.dim
    if with_time:
        return delta[:, :d], delta[:, d]
    return delta[:, :d]


def direct_score_eval(theta, cfg: MlpConfig, x, t) -> torch.Tensor:
    if cfg.out_dim != cfg.dim:
        raise ConfigError("direct score network must have output dimension d")
    out = forward(theta, cfg, x, t)
    if not torch.isfinite(out).all():
        raise NumericError("non-finite score value")
    return out


class PotentialScore(ScoreField):
    """Score field grad phi of a potential network; divergence is its Laplacian."""

    def __init__(self, theta, cfg: MlpConfig):
        if cfg.out_dim != 1:
            raise ConfigError("PotentialScore needs a scalar-output network")
        self.theta = theta
        self.cfg = cfg
        self.dim = cfg.dim

    def __call__(self, x, t):
        return potential_grad(self.theta, self.cfg, x, t)

    def divergence(self, x, t):
        return jet(self.theta, self.cfg, x, t, second="diag").laplacian()[:, 0]

    def derivatives(self, x, t) -> PointDerivatives:
        return derivatives_eval(self.theta, self.cfg, x, t)


class DirectScore(ScoreField):
    """Score field given directly by a d-output network."""

    def __init__(self, theta, cfg: MlpConfig):
        if cfg.out_dim != cfg.dim:
            raise ConfigError("DirectScore needs an output dimension equal to d")
        self.theta = theta
        self.cfg = cfg
        self.dim = cfg.dim

    def __call__(self, x, t):
        return forward(self.theta, self.cfg, x, t)

    def jacobian(self, x, t):
        return jet(self.theta, self.cfg, x, t, second=None).jac[:, :, : self.dim]


def make_score(theta, cfg: MlpConfig) -> ScoreField:
    return PotentialScore(theta, cfg) if cfg.out_dim == 1 else DirectScore(theta, cfg)


def loss_gradient(theta, cfg: MlpConfig, loss) -> tuple[float, torch.Tensor]:
    """Value and exact parameter gradient of ``loss(theta)``.

    ``loss`` may return a scalar tensor or a dict of named scalar terms that
    are summed; a non-finite term is reported by name.
    """
    th = theta.detach().clone().requires_grad_(True)
    out = loss(th)
    terms = out if isinstance(out, dict) else {"loss": out}
    for name, v in terms.items():
        if not torch.isfinite(v).all():
            raise NumericError(f"non-finite loss term {name!r}")
    total = sum(terms.values())
    (grad,) = torch.autograd.grad(total, th)
    if not torch.isfinite(grad).all():
        bad = int((~torch.isfinite(grad)).sum())
        raise NumericError(
            f"non-finite parameter gradient ({bad} entries); terms: "
            + ", ".join(f"{k}={float(v):.4g}" for k, v in terms.items())
        )
    return float(total.detach()), grad


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    theta: torch.Tensor
    cfg: MlpConfig
    seed: int
    iteration: int
    arrays: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """JSON header followed by a little-endian float64 payload."""
    path = Path(path)
    arrays = {"theta": ckpt.theta, **ckpt.arrays}
    payload, index = [], []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(torch.as_tensor(arr).detach().cpu().numpy(), dtype="<f8").reshape(-1)
        payload.append(a.tobytes())
        index.append({"name": name, "length": int(a.size)})
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model": ckpt.cfg.to_dict(),
        "n_params": ckpt.cfg.n_params,
        "layer_order": LAYER_ORDER,
        "seed": int(ckpt.seed),
        "iteration": int(ckpt.iteration),
        "arrays": index,
        "meta": ckpt.meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for chunk in payload:
            fh.write(chunk)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    m = header["model"]
    cfg = MlpConfig(m["in_dim"], tuple(m["hidden"]), m["out_dim"], m["activation"])
    if header["n_params"] != cfg.n_params:
        raise ConfigError(f"{path}: parameter count does not match the stored architecture")
    offset = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        nbytes = 8 * entry["length"]
        arrays[entry["name"]] = torch.as_tensor(
            np.frombuffer(raw[offset:offset + nbytes], dtype="<f8").astype(np.float64))
        offset += nbytes
    theta = arrays.pop("theta")
    if theta.shape[0] != cfg.n_params:
        raise ConfigError(f"{path}: truncated parameter payload")
    return Checkpoint(theta, cfg, header["seed"], header["iteration"], arrays, header.get("meta", {}))
