"""Sequential network assembled from :class:`LayerSpec` entries."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import layers as L

LAYER_KINDS = ("conv2d", "relu", "maxpool2d", "flatten", "dropout", "dense", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernels: int = 0
    kernel_size: tuple[int, int] = (3, 3)
    padding: str = "same"
    rate: float = 0.0
    units: int = 0
    window: int = 2
    l2: float = 0.0
    init: str = "he_uniform"

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and self.kernels < 1:
            raise ValueError("conv2d needs at least one kernel")
        if self.kind == "dense" and self.units < 1:
            raise ValueError("dense needs at least one unit")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv2d", "dense")

    def to_dict(self) -> dict[str, Any]:
        d = {"kind": self.kind}
        if self.kind == "conv2d":
            d.update(kernels=self.kernels, kernel_size=list(self.kernel_size),
                     padding=self.padding, init=self.init)
        elif self.kind == "dense":
            d.update(units=self.units, l2=self.l2, init=self.init)
        elif self.kind == "dropout":
            d.update(rate=self.rate)
        elif self.kind == "maxpool2d":
            d.update(window=self.window)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LayerSpec":
        d = dict(d)
        if "kernel_size" in d:
            d["kernel_size"] = tuple(d["kernel_size"])
        return cls(**d)


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int, scheme: str) -> np.ndarray:
    if scheme == "he_uniform":
        limit = np.sqrt(6.0 / fan_in)
    elif scheme == "glorot_uniform":
        limit = np.sqrt(6.0 / (fan_in + fan_out))
    elif scheme == "zeros":
        return np.zeros(shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return rng.uniform(-limit, limit, size=shape)


class Network:
    """A feed-forward stack with manual backprop.

    Parameters live in ``self.params`` keyed ``"<layer index>.kernel"`` and
    ``"<layer index>.bias"``. A forward pass caches what the matching
    backward pass needs, so calls must alternate on one instance.
    """

    def __init__(
        self,
        specs: list[LayerSpec],
        input_shape: tuple[int, int, int],
        params: dict[str, np.ndarray] | None = None,
        seed: int = 0,
        dtype=np.float32,
    ):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.shapes = self._infer_shapes()
        self._relu_before_pool = {
            i for i, (a, b) in enumerate(zip(self.specs, self.specs[1:]))
            if a.kind == "relu" and b.kind == "maxpool2d"
        }
        self.seed = seed
        if params is None:
            params = self._init_params(np.random.default_rng(seed), dtype)
        self.params = params
        self._check_params()
        self._cache: list[Any] = []

    # shape bookkeeping -----------------------------------------------------

    def _infer_shapes(self) -> list[tuple[int, ...]]:
        shape = self.input_shape
        shapes = [shape]
        for spec in self.specs:
            if spec.kind == "conv2d":
                h, w, _ = shape
                kh, kw = spec.kernel_size
                if spec.padding == "valid":
                    h, w = h - kh + 1, w - kw + 1
                if h < 1 or w < 1:
                    raise L.ShapeError(f"conv2d {kh}x{kw} does not fit input {shape}")
                shape = (h, w, spec.kernels)
            elif spec.kind == "maxpool2d":
                h, w, c = shape
                if h < spec.window or w < spec.window:
                    raise L.ShapeError(f"maxpool window {spec.window} does not fit {shape}")
                shape = (h // spec.window, w // spec.window, c)
            elif spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif spec.kind == "dense":
                if len(shape) != 1:
                    raise L.ShapeError(f"dense layer needs a flat input, got {shape}")
                shape = (spec.units,)
            shapes.append(shape)
        return shapes

    def _param_shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for i, spec in enumerate(self.specs):
            before = self.shapes[i]
            if spec.kind == "conv2d":
                out[f"{i}.kernel"] = (*spec.kernel_size, before[-1], spec.kernels)
                out[f"{i}.bias"] = (spec.kernels,)
            elif spec.kind == "dense":
                out[f"{i}.kernel"] = (before[0], spec.units)
                out[f"{i}.bias"] = (spec.units,)
        return out

    def _init_params(self, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
        params = {}
        for i, spec in enumerate(self.specs):
            if not spec.has_params:
                continue
            before = self.shapes[i]
            if spec.kind == "conv2d":
                kh, kw = spec.kernel_size
                shape = (kh, kw, before[-1], spec.kernels)
                fan_in, fan_out = kh * kw * before[-1], kh * kw * spec.kernels
            else:
                shape = (before[0], spec.units)
                fan_in, fan_out = before[0], spec.units
            params[f"{i}.kernel"] = _uniform_init(rng, shape, fan_in, fan_out, spec.init).astype(dtype)
            params[f"{i}.bias"] = np.zeros(shape[-1], dtype=dtype)
        return params

    def _check_params(self) -> None:
        expected = self._param_shapes()
        if set(expected) != set(self.params):
            raise L.ShapeError(
                f"parameter names {sorted(self.params)} do not match {sorted(expected)}"
            )
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise L.ShapeError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def flatten_width(self) -> int:
        for i, spec in enumerate(self.specs):
            if spec.kind == "flatten":
                return self.shapes[i + 1][0]
        raise ValueError("network has no flatten layer")

    def astype(self, dtype) -> "Network":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return Network(self.specs, self.input_shape, params, seed=self.seed)

    def copy(self) -> "Network":
        return self.astype(self.dtype)

    # forward / backward ----------------------------------------------------

    def forward(
        self,
        x: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
        linear_output: bool = False,
    ) -> np.ndarray:
        """Run the stack on a ``(B, H, W, C)`` batch.

        With ``linear_output`` the trailing softmax is skipped and raw
        logits are returned.
        """
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise L.ShapeError(f"expected a batch of {self.input_shape} inputs, got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        self._cache = []
        for i, spec in enumerate(self.specs):
            cache: Any = None
            if spec.kind == "conv2d":
                out, cols = L._conv_cols(x, self.params[f"{i}.kernel"], self.params[f"{i}.bias"], spec.padding)
                cache, x = (x, cols), out
            elif spec.kind == "relu":
                if i in self._relu_before_pool:
                    # applied after the pool instead; the two orders are equivalent
                    self._cache.append(None)
                    continue
                cache = x
                x = L.relu(x)
            elif spec.kind == "maxpool2d":
                out, arg = L.maxpool2d_with_argmax(x, spec.window)
                pre_relu = None
                if i - 1 in self._relu_before_pool:
                    pre_relu, out = out, L.relu(out)
                cache, x = (x.shape, arg, pre_relu), out
            elif spec.kind == "flatten":
                cache = x.shape
                x = x.reshape(x.shape[0], -1)
            elif spec.kind == "dropout":
                x, cache = L.dropout(x, spec.rate, rng, training)
            elif spec.kind == "dense":
                cache = x
                x = L.dense_forward(x, self.params[f"{i}.kernel"], self.params[f"{i}.bias"])
            elif spec.kind == "softmax":
                if linear_output:
                    self._cache.append(None)
                    break
                x = L.softmax(x)
            self._cache.append(cache)
        return x

    def backward(
        self, grad_logits: np.ndarray, need_input_grad: bool = False
    ) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
        """Backpropagate a gradient taken w.r.t. the pre-softmax logits.

        Returns parameter gradients and, when requested, the gradient w.r.t.
        the network input.
        """
        if len(self._cache) != len(self.specs):
            raise RuntimeError("backward called without a matching forward pass")
        grads: dict[str, np.ndarray] = {}
        g = grad_logits.astype(self.dtype, copy=False)
        first_param = min((i for i, s in enumerate(self.specs) if s.has_params), default=0)
        for i in range(len(self.specs) - 1, -1, -1):
            spec, cache = self.specs[i], self._cache[i]
            if spec.kind == "softmax":
                continue
            if spec.kind == "conv2d":
                want_x = need_input_grad or i > first_param
                x_in, cols = cache
                g, gk, gb = L.conv2d_backward(
                    g, x_in, self.params[f"{i}.kernel"], spec.padding, want_x, cols=cols
                )
                grads[f"{i}.kernel"], grads[f"{i}.bias"] = gk, gb
            elif spec.kind == "relu":
                if cache is not None:
                    g = L.relu_backward(g, cache)
            elif spec.kind == "maxpool2d":
                in_shape, arg, pre_relu = cache
                if pre_relu is not None:
                    g = L.relu_backward(g, pre_relu)
                g = L.pool_backward_from_argmax(g, arg, in_shape[1:3], spec.window)
            elif spec.kind == "flatten":
                g = g.reshape(cache)
            elif spec.kind == "dropout":
                g = L.dropout_backward(g, cache)
            elif spec.kind == "dense":
                g, gw, gb = L.dense_backward(g, cache, self.params[f"{i}.kernel"])
                grads[f"{i}.kernel"], grads[f"{i}.bias"] = gw, gb
            if g is None:
                break
        return grads, (g if need_input_grad else None)

    def predict_proba(self, x: np.ndarray, chunk: int = 32) -> np.ndarray:
        """Inference-mode class probabilities, evaluated in fixed-size chunks."""
        out = [self.forward(x[s:s + chunk]) for s in range(0, len(x), chunk)]
        self._cache = []
        return np.concatenate(out, axis=0)

    def l2_penalty(self) -> float:
        total = 0.0
        for i, spec in enumerate(self.specs):
            if spec.kind == "dense" and spec.l2:
                w = self.params[f"{i}.kernel"]
                total += spec.l2 * float(np.sum(w.astype(np.float64) ** 2))
        return total


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean categorical cross-entropy for one-hot ``labels``."""
    p = np.clip(probs.astype(np.float64), 1e-12, 1.0)
    return float(-np.mean(np.sum(labels * np.log(p), axis=-1)))


def loss_and_grad(
    model: Network,
    batch: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator | None = None,
    training: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Cross-entropy plus the dense-layer L2 penalty, and its full gradient.

    ``labels`` are one-hot rows. The L2 strength is read from each dense
    layer's spec, so only layers built with ``l2 > 0`` are penalised.
    """
    if len(batch) != len(labels):
        raise ValueError(f"{len(batch)} inputs but {len(labels)} labels")
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[1] != 2:
        raise ValueError(f"labels must be one-hot (n, 2), got {labels.shape}")
    logits = model.forward(batch, training=training, rng=rng, linear_output=True)
    probs = L.softmax(logits.astype(np.float64))
    loss = cross_entropy(probs, labels) + model.l2_penalty()
    grad_logits = (probs - labels) / len(batch)
    grads, _ = model.backward(grad_logits.astype(model.dtype))
    for i, spec in enumerate(model.specs):
        if spec.kind == "dense" and spec.l2:
            w = model.params[f"{i}.kernel"]
            grads[f"{i}.kernel"] = grads[f"{i}.kernel"] + (2.0 * spec.l2) * w
    return loss, grads
