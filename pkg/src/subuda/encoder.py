"""Fully connected feature encoder with a dimension-reduction head.

The backbone is a stack of affine+ReLU layers. The head follows it as
fc -> batchnorm -> relu -> dropout -> fc -> relu and produces the features
every distance in the package is measured on. Weights are stored as
``(fan_in, fan_out)`` so a layer is ``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    """Raised when backward is given a cache it cannot legally consume."""


@dataclass
class EncoderParams:
    sizes: list[int]  # input dim, hidden sizes..., backbone feature dim
    head_hidden: int
    d_head: int
    tensors: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    dropout: float = 0.5
    use_head: bool = True
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    version: int = 0

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def backbone_dim(self) -> int:
        return self.sizes[-1]

    @property
    def out_dim(self) -> int:
        return self.d_head if self.use_head else self.backbone_dim

    @property
    def n_backbone(self) -> int:
        return len(self.sizes) - 1

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            sizes=list(self.sizes),
            head_hidden=self.head_hidden,
            d_head=self.d_head,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
            dropout=self.dropout,
            use_head=self.use_head,
            bn_momentum=self.bn_momentum,
            bn_eps=self.bn_eps,
            version=self.version,
        )

    def expected_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            shapes[f"backbone.{i}.W"] = (a, b)
            shapes[f"backbone.{i}.b"] = (b,)
        if self.use_head:
            h, d = self.head_hidden, self.d_head
            shapes.update({
                "head.fc1.W": (self.backbone_dim, h),
                "head.fc1.b": (h,),
                "head.bn.gamma": (h,),
                "head.bn.beta": (h,),
                "head.fc2.W": (h, d),
                "head.fc2.b": (d,),
            })
        return shapes

    def expected_buffer_shapes(self) -> dict[str, tuple]:
        if not self.use_head:
            return {}
        return {"head.bn.running_mean": (self.head_hidden,), "head.bn.running_var": (self.head_hidden,)}

    def validate(self) -> None:
        for group, expected in ((self.tensors, self.expected_shapes()),
                                (self.buffers, self.expected_buffer_shapes())):
            if set(group) != set(expected):
                raise ShapeError(f"tensor names {sorted(group)} != {sorted(expected)}")
            for name, shape in expected.items():
                if group[name].shape != shape:
                    raise ShapeError(f"{name}: shape {group[name].shape}, expected {shape}")
        if self.use_head and np.any(self.buffers["head.bn.running_var"] < 0):
            raise ShapeError("running variance must be non-negative")


def init_encoder(
    input_dim: int,
    hidden: tuple[int, ...] = (32, 32),
    head_hidden: int = 32,
    d_head: int = 16,
    dropout: float = 0.5,
    use_head: bool = True,
    seed: int = 0,
) -> EncoderParams:
    """He-style uniform init scaled by fan-in; biases start at zero."""
    rng = np.random.Generator(np.random.Philox(seed))
    params = EncoderParams(
        sizes=[input_dim, *hidden],
        head_hidden=head_hidden,
        d_head=d_head,
        tensors={},
        buffers={},
        dropout=dropout,
        use_head=use_head,
    )
    for name, shape in params.expected_shapes().items():
        if name.endswith(".W"):
            bound = np.sqrt(6.0 / shape[0])
            params.tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("gamma"):
            params.tensors[name] = np.ones(shape)
        else:
            params.tensors[name] = np.zeros(shape)
    if use_head:
        params.buffers["head.bn.running_mean"] = np.zeros(head_hidden)
        params.buffers["head.bn.running_var"] = np.ones(head_hidden)
    return params


@dataclass
class ForwardCache:
    mode: str
    params_version: int
    params: EncoderParams
    acts: list = field(default_factory=list)  # inputs to each backbone layer
    pre: list = field(default_factory=list)  # backbone pre-activations
    backbone: Optional[np.ndarray] = None
    head: dict = field(default_factory=dict)
    batch_stats: Optional[tuple] = None
    consumed: bool = False


def relu(x):
    return np.maximum(x, 0.0)


def forward(params: EncoderParams, batch, mode: str = "eval", rng=None):
    """Run the encoder; returns ``(features, cache)``.

    In train mode the head normalises with batch statistics and applies an
    inverted-dropout mask drawn from ``rng``. Running statistics are not
    touched here; see :func:`update_running_stats`.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"expected batch of shape (M, {params.input_dim}), got {x.shape}")
    if mode == "train" and params.dropout > 0 and params.use_head and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    t = params.tensors
    cache = ForwardCache(mode=mode, params_version=params.version, params=params)
    h = x
    for i in range(params.n_backbone):
        cache.acts.append(h)
        z = h @ t[f"backbone.{i}.W"] + t[f"backbone.{i}.b"]
        cache.pre.append(z)
        h = relu(z)
    cache.backbone = h
    if not params.use_head:
        return h, cache

    z1 = h @ t["head.fc1.W"] + t["head.fc1.b"]
    if mode == "train":
        mu = z1.mean(axis=0)
        var = z1.var(axis=0)
        cache.batch_stats = (mu, var, z1.shape[0])
    else:
        mu = params.buffers["head.bn.running_mean"]
        var = params.buffers["head.bn.running_var"]
    inv_std = 1.0 / np.sqrt(var + params.bn_eps)
    xhat = (z1 - mu) * inv_std
    zb = t["head.bn.gamma"] * xhat + t["head.bn.beta"]
    a = relu(zb)
    if mode == "train" and params.dropout > 0:
        keep = 1.0 - params.dropout
        mask = (rng.random(a.shape) < keep) / keep
    else:
        mask = None
    d = a if mask is None else a * mask
    z2 = d @ t["head.fc2.W"] + t["head.fc2.b"]
    out = relu(z2)
    cache.head = dict(h=h, xhat=xhat, inv_std=inv_std, zb=zb, mask=mask, d=d, z2=z2)
    return out, cache


def update_running_stats(params: EncoderParams, cache: ForwardCache) -> None:
    """Fold a train-mode forward's batch statistics into the running buffers."""
    if cache.batch_stats is None:
        return
    mu, var, m = cache.batch_stats
    unbiased = var * m / (m - 1) if m > 1 else var
    rho = params.bn_momentum
    params.buffers["head.bn.running_mean"] = rho * params.buffers["head.bn.running_mean"] + (1 - rho) * mu
    params.buffers["head.bn.running_var"] = rho * params.buffers["head.bn.running_var"] + (1 - rho) * unbiased


def backward(cache: ForwardCache, upstream) -> dict[str, np.ndarray]:
    """Parameter gradients of a scalar loss given dL/d(features)."""
    params = cache.params
    if cache.consumed:
        raise StaleCacheError("forward cache already consumed by a backward pass")
    if cache.params_version != params.version:
        raise StaleCacheError("parameters changed since this forward pass")
    cache.consumed = True
    t = params.tensors
    g = np.asarray(upstream, dtype=np.float64)
    grads = {}
    if params.use_head:
        hc = cache.head
        if g.shape != hc["z2"].shape:
            raise ShapeError(f"upstream shape {g.shape} != features {hc['z2'].shape}")
        dz2 = g * (hc["z2"] > 0)
        grads["head.fc2.W"] = hc["d"].T @ dz2
        grads["head.fc2.b"] = dz2.sum(axis=0)
        dd = dz2 @ t["head.fc2.W"].T
        da = dd if hc["mask"] is None else dd * hc["mask"]
        dzb = da * (hc["zb"] > 0)
        grads["head.bn.gamma"] = (dzb * hc["xhat"]).sum(axis=0)
        grads["head.bn.beta"] = dzb.sum(axis=0)
        dxhat = dzb * t["head.bn.gamma"]
        if cache.mode == "train":
            m = dxhat.shape[0]
            xhat = hc["xhat"]
            dz1 = hc["inv_std"] / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dz1 = dxhat * hc["inv_std"]
        grads["head.fc1.W"] = hc["h"].T @ dz1
        grads["head.fc1.b"] = dz1.sum(axis=0)
        g = dz1 @ t["head.fc1.W"].T
    elif g.shape != cache.backbone.shape:
        raise ShapeError(f"upstream shape {g.shape} != features {cache.backbone.shape}")
    for i in reversed(range(params.n_backbone)):
        dz = g * (cache.pre[i] > 0)
        grads[f"backbone.{i}.W"] = cache.acts[i].T @ dz
        grads[f"backbone.{i}.b"] = dz.sum(axis=0)
        g = dz @ t[f"backbone.{i}.W"].T
    return grads


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def relative_error(analytic, numeric, floor: float = 1e-7):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    params: EncoderParams,
    batch,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    tolerance: float = 1e-4,
    step: float = 1e-4,
) -> GradCheckReport:
    """Compare backward() with central differences of ``loss_fn(forward(x))``.

    ``loss_fn`` maps eval-mode features to ``(loss, dloss/dfeatures)``.
    Errors are relative, with magnitudes below 1e-7 treated as 1e-7.
    """
    feats, cache = forward(params, batch, mode="eval")
    _, upstream = loss_fn(feats)
    analytic = backward(cache, upstream)

    def loss_at(p):
        return loss_fn(forward(p, batch, mode="eval")[0])[0]

    probe = params.copy()
    errors = {}
    for name, tensor in params.tensors.items():
        numeric = np.zeros_like(tensor)
        flat = probe.tensors[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = loss_at(probe)
            flat[j] = orig - step
            down = loss_at(probe)
            flat[j] = orig
            numeric.reshape(-1)[j] = (up - down) / (2 * step)
        errors[name] = float(relative_error(analytic[name], numeric).max()) if tensor.size else 0.0
    return GradCheckReport(max_rel_error=errors, tolerance=tolerance)
