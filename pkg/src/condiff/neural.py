"""Minimal feed-forward nets with hand-written reverse mode, and AdamW.

The operator set is deliberately small (affine, tanh/softplus, embedding
lookup); forward passes return a cache that the matching backward pass
consumes, so gradients are exact reverse-mode derivatives of the recorded
computation and can be validated against central finite differences.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .sde import ConfigurationError

Array = np.ndarray

CHECKPOINT_VERSION = 1


def _act(name: str, z: Array) -> Array:
    if name == "tanh":
        return np.tanh(z)
    if name == "softplus":
        return np.where(z > 30, z, np.log1p(np.exp(np.minimum(z, 30))))
    raise ConfigurationError(f"unsupported activation {name!r}")


def _act_grad(name: str, z: Array, a: Array) -> Array:
    """d act / d z, reusing the forward activation a where possible."""
    if name == "tanh":
        return 1.0 - a * a
    if name == "softplus":
        return 1.0 / (1.0 + np.exp(-z))
    raise ConfigurationError(f"unsupported activation {name!r}")


class Mlp:
    """Fully connected net, smooth hidden activation, linear output.

    `zero_final=True` zeroes the output layer so the map (and its input
    sensitivity) is identically zero at initialization.
    """

    def __init__(
        self,
        widths: list[int],
        rng: np.random.Generator,
        activation: str = "tanh",
        zero_final: bool = False,
    ):
        if len(widths) < 2:
            raise ConfigurationError("need at least input and output widths")
        self.widths = list(widths)
        self.activation = activation
        self.weights: list[Array] = []
        self.biases: list[Array] = []
        for i in range(len(widths) - 1):
            fan_in, fan_out = widths[i], widths[i + 1]
            scale = 1.0 / np.sqrt(fan_in)
            w = rng.normal(scale=scale, size=(fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))
        if zero_final:
            self.weights[-1][:] = 0.0
            self.biases[-1][:] = 0.0

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x: Array):
        """x (n, in) -> (y (n, out), cache)."""
        x = np.atleast_2d(x)
        inputs = [x]
        preacts = []
        h = x
        for i in range(self.n_layers):
            z = h @ self.weights[i] + self.biases[i]
            preacts.append(z)
            h = _act(self.activation, z) if i < self.n_layers - 1 else z
            inputs.append(h)
        return h, (inputs, preacts)

    def __call__(self, x: Array) -> Array:
        return self.forward(x)[0]

    def backward(self, cache, dy: Array):
        """Reverse pass: output sensitivity -> (input sensitivity, grads).

        grads is a list of (dW, db) matching self.weights / self.biases.
        """
        inputs, preacts = cache
        if dy.shape != inputs[-1].shape:
            raise ConfigurationError(f"output sensitivity shape {dy.shape} != {inputs[-1].shape}")
        grads = [None] * self.n_layers
        delta = dy
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                delta = delta * _act_grad(self.activation, preacts[i], inputs[i + 1])
            grads[i] = (inputs[i].T @ delta, delta.sum(axis=0))
            delta = delta @ self.weights[i].T
        return delta, grads

    def input_jacobian(self, x: Array) -> Array:
        """d out / d in, shape (n, out, in); one backward pass per output."""
        y, cache = self.forward(x)
        n, out = y.shape
        jac = np.empty((n, out, x.shape[1]))
        for j in range(out):
            dy = np.zeros_like(y)
            dy[:, j] = 1.0
            jac[:, j, :] = self.backward(cache, dy)[0]
        return jac

    def param_items(self, prefix: str):
        """(name, live array) pairs for ParamVector assembly."""
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.w{i}", w
            yield f"{prefix}.b{i}", b


class EmbeddingTable:
    """Per-id embedding rows plus one NULL row frozen at zero.

    Ids 0..n_real-1 are trainable; id NULL (-1 or n_real) selects the frozen
    zero row that represents the unconditional token.
    """

    def __init__(self, n_real: int, dim: int):
        if n_real < 1 or dim < 1:
            raise ConfigurationError("embedding table needs n_real >= 1 and dim >= 1")
        self.n_real = n_real
        self.dim = dim
        self.table = np.zeros((n_real + 1, dim))  # zero-initialized, last row = NULL

    def _resolve(self, ids: Array) -> Array:
        ids = np.asarray(ids)
        out = np.where(ids < 0, self.n_real, ids)
        if np.any(out > self.n_real):
            raise ConfigurationError(f"embedding id out of range (n_real={self.n_real})")
        return out

    def lookup(self, ids: Array) -> Array:
        return self.table[self._resolve(ids)]

    def backward(self, ids: Array, dvec: Array) -> Array:
        """Accumulate per-row gradients; the NULL row's gradient is dropped."""
        grad = np.zeros((self.n_real, self.dim))
        rows = self._resolve(ids)
        keep = rows < self.n_real
        np.add.at(grad, rows[keep], dvec[keep])
        return grad

    @property
    def trainable(self) -> Array:
        """View of the trainable rows; the NULL row stays frozen at zero."""
        return self.table[: self.n_real]


class ParamVector:
    """Flat view over named parameter arrays with group masks.

    Arrays are referenced live: `assign` writes updated values back in place,
    so optimizers can treat the whole model as one flat vector. Every
    parameter belongs to exactly one named part; group membership is by name
    prefix (e.g. "embed", "net").
    """

    def __init__(self, parts: list[tuple[str, Array]]):
        names = [n for n, _ in parts]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate parameter part names")
        self.parts = parts
        self._sizes = [a.size for _, a in parts]
        self._offsets = np.concatenate([[0], np.cumsum(self._sizes)])

    @property
    def size(self) -> int:
        return int(self._offsets[-1])

    def flatten(self) -> Array:
        return np.concatenate([a.reshape(-1) for _, a in self.parts]) if self.parts else np.zeros(0)

    def assign(self, vec: Array) -> None:
        if vec.shape != (self.size,):
            raise ConfigurationError(f"expected flat vector of size {self.size}, got {vec.shape}")
        for (name, a), lo, hi in zip(self.parts, self._offsets[:-1], self._offsets[1:]):
            a[...] = vec[lo:hi].reshape(a.shape)

    def pack(self, grads: dict[str, Array]) -> Array:
        """Flatten a name->gradient dict in part order; missing parts are zero."""
        out = np.zeros(self.size)
        for (name, a), lo, hi in zip(self.parts, self._offsets[:-1], self._offsets[1:]):
            if name in grads:
                g = grads[name]
                if g.shape != a.shape:
                    raise ConfigurationError(f"gradient shape {g.shape} != parameter shape {a.shape} for {name}")
                out[lo:hi] = g.reshape(-1)
        extra = set(grads) - {n for n, _ in self.parts}
        if extra:
            raise ConfigurationError(f"gradients for unknown parameters: {sorted(extra)}")
        return out

    def group_mask(self, prefix: str) -> Array:
        mask = np.zeros(self.size, dtype=bool)
        for (name, _), lo, hi in zip(self.parts, self._offsets[:-1], self._offsets[1:]):
            if name == prefix or name.startswith(prefix + "."):
                mask[lo:hi] = True
        return mask

    def names(self) -> list[str]:
        return [n for n, _ in self.parts]


@dataclass
class AdamWState:
    """Moments and step count; exported/imported for checkpoints."""

    m: Array
    v: Array
    step: int


class AdamW:
    """AdamW with decoupled weight decay and optional per-group lr/decay.

    Decay is applied to the parameters directly, never folded into the
    moments; moments are bias-corrected. Non-finite gradients skip the step
    with a warning instead of corrupting the state.
    """

    def __init__(
        self,
        pv: ParamVector,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        groups: dict[str, dict] | None = None,
    ):
        self.pv = pv
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lr_vec = np.full(pv.size, float(lr))
        self.wd_vec = np.full(pv.size, float(weight_decay))
        for prefix, over in (groups or {}).items():
            mask = pv.group_mask(prefix)
            if not mask.any():
                raise ConfigurationError(f"optimizer group {prefix!r} matches no parameters")
            if "lr" in over:
                self.lr_vec[mask] = float(over["lr"])
            if "weight_decay" in over:
                self.wd_vec[mask] = float(over["weight_decay"])
        self.state = AdamWState(m=np.zeros(pv.size), v=np.zeros(pv.size), step=0)

    def step(self, grad: Array, lr_scale: float = 1.0) -> bool:
        """One minimization step; returns False if skipped (non-finite grad).

        lr_scale multiplies every group's learning rate (for schedules).
        """
        if grad.shape != (self.pv.size,):
            raise ConfigurationError(f"gradient size {grad.shape} != parameter size {self.pv.size}")
        if not np.all(np.isfinite(grad)):
            warnings.warn("non-finite gradient: skipping optimizer step", RuntimeWarning)
            return False
        s = self.state
        s.step += 1
        s.m = self.beta1 * s.m + (1 - self.beta1) * grad
        s.v = self.beta2 * s.v + (1 - self.beta2) * grad * grad
        mhat = s.m / (1 - self.beta1**s.step)
        vhat = s.v / (1 - self.beta2**s.step)
        p = self.pv.flatten()
        p = p - lr_scale * self.lr_vec * (mhat / (np.sqrt(vhat) + self.eps) + self.wd_vec * p)
        self.pv.assign(p)
        return True

    def export_state(self) -> dict:
        return {"m": self.state.m.copy(), "v": self.state.v.copy(), "step": self.state.step}

    def import_state(self, blob: dict) -> None:
        self.state = AdamWState(m=np.asarray(blob["m"]).copy(), v=np.asarray(blob["v"]).copy(), step=int(blob["step"]))


def save_checkpoint(
    path,
    pv: ParamVector,
    optimizer: AdamW | None = None,
    rng_state: dict | None = None,
    meta: dict | None = None,
) -> None:
    """Versioned npz blob: flat parameters (+ optimizer moments, RNG state, meta).

    float64 arrays round-trip bit-exactly through npz.
    """
    arrays = {"params": pv.flatten()}
    header = {
        "version": CHECKPOINT_VERSION,
        "part_names": pv.names(),
        "part_shapes": [list(a.shape) for _, a in pv.parts],
        "meta": meta or {},
    }
    if optimizer is not None:
        st = optimizer.export_state()
        arrays["opt_m"] = st["m"]
        arrays["opt_v"] = st["v"]
        header["opt_step"] = st["step"]
    if rng_state is not None:
        header["rng_state"] = rng_state
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> dict:
    with np.load(path) as blob:
        header = json.loads(bytes(blob["header"].tobytes()).decode())
        if header["version"] != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {header['version']}")
        out = {"params": blob["params"].copy(), "header": header}
        if "opt_m" in blob:
            out["optimizer"] = {"m": blob["opt_m"].copy(), "v": blob["opt_v"].copy(), "step": header["opt_step"]}
        if "rng_state" in header:
            out["rng_state"] = header["rng_state"]
    return out


def restore_into(pv: ParamVector, ckpt: dict, optimizer: AdamW | None = None) -> None:
    """Load checkpointed parameters (and moments) into live arrays."""
    if ckpt["header"]["part_names"] != pv.names():
        raise ConfigurationError("checkpoint parameter layout does not match the model")
    pv.assign(ckpt["params"])
    if optimizer is not None and "optimizer" in ckpt:
        optimizer.import_state(ckpt["optimizer"])
