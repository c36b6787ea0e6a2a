"""Differentiable-computation substrate shared by every learnable module.

Parameters live in a :class:`ParameterStore` as named float64 torch leaves.
Forward passes are ordinary torch expressions over those leaves, analytic
gradients come from reverse-mode autodiff, and :func:`grad_check` verifies
them against central finite differences computed by re-evaluating the loss
at perturbed parameter values (the two routes never share code).

Checkpoints are a single binary file: a canonical JSON header line
(format version, sorted parameter manifest with shapes/dtype, rng seed,
optional metadata) followed by the row-major little-endian float64 values
of each parameter in manifest order. Identical stores produce identical
bytes on any platform.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    """Raised on structural misuse: duplicate names, shape mismatches."""


class NonFiniteLossError(RuntimeError):
    """Raised when an objective evaluates to a non-finite value."""

    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter


class ParameterStore:
    """Named collection of trainable tensors.

    Names are unique string paths ("vocab.shared", "gnn.layer1_weight");
    shapes are fixed at registration and enumeration order is sorted by
    name, so downstream serialization and optimizer sweeps are
    deterministic. Verification stores use float64; training may use
    float32 (checkpoints always hold 64-bit values).
    """

    def __init__(self, rng_seed: int = 0, dtype: torch.dtype = torch.float64):
        self.rng_seed = int(rng_seed)
        self.dtype = dtype
        self._entries: dict[str, torch.Tensor] = {}

    def register(self, name: str, value) -> torch.Tensor:
        """Add a parameter initialized from ``value`` (array-like)."""
        if name in self._entries:
            raise ConfigurationError(f"parameter {name!r} already registered")
        tensor = torch.as_tensor(np.asarray(value, dtype=np.float64)).to(self.dtype)
        tensor.requires_grad_(True)
        self._entries[name] = tensor
        return tensor

    def get(self, name: str) -> torch.Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self):
        for name in self.names():
            yield name, self._entries[name]

    def set_value(self, name: str, value) -> None:
        """Overwrite a parameter's values in place; the shape is immutable."""
        arr = np.asarray(value, dtype=np.float64)
        tensor = self._entries[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise ConfigurationError(
                f"shape mismatch for {name!r}: have {tuple(tensor.shape)}, got {tuple(arr.shape)}"
            )
        with torch.no_grad():
            tensor.copy_(torch.as_tensor(arr))

    def clone(self) -> "ParameterStore":
        other = ParameterStore(self.rng_seed, dtype=self.dtype)
        for name, tensor in self.items():
            other.register(name, tensor.detach().numpy().copy())
        return other

    def zero_grads(self) -> None:
        for tensor in self._entries.values():
            tensor.grad = None


@dataclass
class GradientReport:
    """Per-parameter gradients for one objective evaluation."""

    loss: float
    grads: dict[str, torch.Tensor] = field(default_factory=dict)


def collect_gradients(loss_fn, store: ParameterStore) -> GradientReport:
    """Evaluate ``loss_fn(store)`` and return analytic gradients.

    Parameters that do not participate in the objective get a zero
    gradient so the report always matches the store's manifest.
    """
    loss = loss_fn(store)
    if not torch.isfinite(loss):
        raise NonFiniteLossError("non-finite objective")
    names = store.names()
    leaves = [store.get(n) for n in names]
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    out = {}
    for name, leaf, grad in zip(names, leaves, grads):
        out[name] = torch.zeros_like(leaf) if grad is None else grad.detach()
    return GradientReport(loss=float(loss.detach()), grads=out)


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    max_abs_error: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(loss_fn, store: ParameterStore, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    For every element of every parameter the numeric gradient is
    (f(x+eps) - f(x-eps)) / (2 eps), and the reported figure per parameter
    is max |a - n| / (|a| + |n| + 1e-12). The loss function must be
    deterministic.
    """
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    report = collect_gradients(loss_fn, store)

    def eval_loss(param_name):
        with torch.no_grad():
            value = float(loss_fn(store))
        if not math.isfinite(value):
            raise NonFiniteLossError("non-finite objective", parameter=param_name)
        return value

    entries = []
    for name in store.names():
        tensor = store.get(name)
        analytic = report.grads[name].numpy()
        flat = tensor.detach().numpy().reshape(-1)
        numeric = np.zeros_like(flat)
        for idx in range(flat.size):
            orig = flat[idx]
            with torch.no_grad():
                tensor.view(-1)[idx] = orig + eps
            plus = eval_loss(name)
            with torch.no_grad():
                tensor.view(-1)[idx] = orig - eps
            minus = eval_loss(name)
            with torch.no_grad():
                tensor.view(-1)[idx] = orig
            numeric[idx] = (plus - minus) / (2.0 * eps)
        a = analytic.reshape(-1)
        denom = np.abs(a) + np.abs(numeric) + 1e-12
        rel = np.abs(a - numeric) / denom
        # Both routes agreeing on (near-)zero is a pass, not a 0/0 artifact.
        tiny = (np.abs(a) < 1e-10) & (np.abs(numeric) < 1e-10)
        rel[tiny] = 0.0
        entries.append(
            GradCheckEntry(
                name=name,
                max_rel_error=float(rel.max()) if rel.size else 0.0,
                max_abs_error=float(np.abs(a - numeric).max()) if rel.size else 0.0,
            )
        )
    return GradCheckReport(entries=entries)


def sgd_step(store: ParameterStore, grads: dict[str, torch.Tensor], lr: float) -> None:
    """In-place step p <- p - lr * grad(p). Missing gradients are zero."""
    if lr < 0:
        raise ConfigurationError("learning rate must be non-negative")
    with torch.no_grad():
        for name, tensor in store.items():
            grad = grads.get(name)
            if grad is None:
                continue
            if tuple(grad.shape) != tuple(tensor.shape):
                raise ConfigurationError(
                    f"gradient shape mismatch for {name!r}: {tuple(grad.shape)} vs {tuple(tensor.shape)}"
                )
            tensor.add_(grad, alpha=-lr)


class SgdOptimizer:
    """Plain SGD behind the shared step interface."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, store: ParameterStore, grads: dict[str, torch.Tensor]) -> None:
        sgd_step(store, grads, self.lr)


class AdamOptimizer:
    """First/second-moment adaptive optimizer (optional extra).

    Standard bias-corrected update; state is keyed by parameter name and
    created lazily, so the optimizer works for any store with stable
    names. Deterministic given the gradient sequence.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, torch.Tensor] = {}
        self._v: dict[str, torch.Tensor] = {}
        self._t = 0

    def step(self, store: ParameterStore, grads: dict[str, torch.Tensor]) -> None:
        self._t += 1
        bc1 = 1.0 - self.beta1 ** self._t
        bc2 = 1.0 - self.beta2 ** self._t
        names, params, gs = [], [], []
        for name, tensor in store.items():
            grad = grads.get(name)
            if grad is None:
                continue
            if tuple(grad.shape) != tuple(tensor.shape):
                raise ConfigurationError(f"gradient shape mismatch for {name!r}")
            if name not in self._m:
                self._m[name] = torch.zeros_like(tensor)
                self._v[name] = torch.zeros_like(tensor)
            names.append(name)
            params.append(tensor)
            gs.append(grad)
        if not names:
            return
        ms = [self._m[n] for n in names]
        vs = [self._v[n] for n in names]
        with torch.no_grad():
            torch._foreach_mul_(ms, self.beta1)
            torch._foreach_add_(ms, gs, alpha=1.0 - self.beta1)
            torch._foreach_mul_(vs, self.beta2)
            torch._foreach_addcmul_(vs, gs, gs, value=1.0 - self.beta2)
            denom = torch._foreach_div(vs, bc2)
            torch._foreach_sqrt_(denom)
            torch._foreach_add_(denom, self.eps)
            mhat = torch._foreach_div(ms, bc1)
            torch._foreach_addcdiv_(params, mhat, denom, value=-self.lr)


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return SgdOptimizer(lr)
    if kind == "adam":
        return AdamOptimizer(lr)
    raise ConfigurationError(f"unknown optimizer {kind!r}")


def save_checkpoint(store: ParameterStore, path, meta: dict | None = None) -> None:
    """Write the store to ``path`` in the canonical binary format."""
    manifest = [
        {"name": name, "shape": list(tensor.shape), "dtype": "float64"}
        for name, tensor in store.items()
    ]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "rng_seed": store.rng_seed,
        "params": manifest,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    with open(path, "wb") as fh:
        fh.write(blob)
        for _, tensor in store.items():
            arr = np.ascontiguousarray(tensor.detach().numpy(), dtype="<f8")
            fh.write(arr.tobytes())


def load_checkpoint(path, dtype: torch.dtype = torch.float64) -> tuple[ParameterStore, dict]:
    """Read a checkpoint back into a fresh store; returns (store, meta)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigurationError(
                f"unsupported checkpoint format version {header.get('format_version')!r}"
            )
        store = ParameterStore(header.get("rng_seed", 0), dtype=dtype)
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ConfigurationError(f"truncated checkpoint at {entry['name']!r}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            store.register(entry["name"], arr)
    return store, header.get("meta", {})
