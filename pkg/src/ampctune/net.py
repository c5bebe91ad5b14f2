"""From-scratch feed-forward networks for imitating the horizon solver.

Two approximators share this machinery: a policy net mapping an encoded
state to the first optimal action, and a sensitivity net mapping the same
encoding to the flattened action-parameter sensitivity row.  Angles enter
as (sin, cos) so the wrap point carries no discontinuity; inputs and
targets are z-scored with statistics frozen from the training split.

Training is plain mini-batch Adam on mean squared error, seeded and
single-threaded, keeping the weights that achieved the best validation
loss.  Model files are a small versioned binary: JSON header for shapes
and activation tags, packed float64 for the parameters, so a save/load
round trip is bitwise exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetFile
from .plant import N_ACTION, N_PARAM

#: Input encoding dimension: (p, sin phi, cos phi, pdot, phidot).
N_ENCODED = 5

#: Hidden widths for the two default architectures.
ACTION_HIDDEN = (100, 100, 100, 100)
SENS_HIDDEN = (100, 100, 100, 100, 100, 100, 100, 100)

_KNOWN_ACTS = ("tanh", "relu", "identity")

MAGIC = b"AMLP"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sII")  # magic, version, header length


class MlpFormatError(RuntimeError):
    """Model file is not parseable or disagrees with its own header."""


class NonFiniteLoss(RuntimeError):
    """Training loss left the floats; learning rate is misconfigured."""


def encode_state(s: np.ndarray) -> np.ndarray:
    """Map plant states (p, phi, pdot, phidot) to network inputs
    (p, sin phi, cos phi, pdot, phidot).  Accepts one state or a batch."""
    s = np.asarray(s, dtype=float)
    squeeze = s.ndim == 1
    s = np.atleast_2d(s)
    out = np.column_stack([s[:, 0], np.sin(s[:, 1]), np.cos(s[:, 1]),
                           s[:, 2], s[:, 3]])
    return out[0] if squeeze else out


def default_activations(n_hidden: int) -> tuple:
    """First hidden layer tanh, remaining hidden layers relu, linear output."""
    if n_hidden == 0:
        return ("identity",)
    return ("tanh",) + ("relu",) * (n_hidden - 1) + ("identity",)


@dataclass
class Mlp:
    """Feed-forward network with stored input/output normalization."""

    weights: list            # W_l, shape (n_out_l, n_in_l)
    biases: list             # b_l, shape (n_out_l,)
    activations: tuple       # one tag per layer; final must be "identity"
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    #: Per-epoch train/validation MSE (normalized scale) recorded by train();
    #: not serialized.
    history: dict | None = field(default=None, compare=False)

    @property
    def layer_sizes(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def validate(self) -> None:
        if len(self.weights) != len(self.biases) or len(self.weights) != len(self.activations):
            raise ValueError("weights, biases, and activations must align")
        if not self.weights:
            raise ValueError("network needs at least one layer")
        for tag in self.activations:
            if tag not in _KNOWN_ACTS:
                raise ValueError(f"unknown activation {tag!r}")
        if self.activations[-1] != "identity":
            raise ValueError("final activation must be identity")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: weight/bias shapes disagree")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k}: input dim does not chain")
        n_in, n_out = self.layer_sizes[0], self.layer_sizes[-1]
        if self.in_mean.shape != (n_in,) or self.in_std.shape != (n_in,):
            raise ValueError("input normalization must match input dim")
        if self.out_mean.shape != (n_out,) or self.out_std.shape != (n_out,):
            raise ValueError("output normalization must match output dim")
        if not (np.all(self.in_std > 0) and np.all(self.out_std > 0)):
            raise ValueError("normalization stds must be positive")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Normalized affine+activation chain, denormalized output."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        z = np.atleast_2d(x)
        if z.shape[1] != self.layer_sizes[0]:
            raise ValueError(
                f"input dim {z.shape[1]} != network input {self.layer_sizes[0]}")
        z = (z - self.in_mean) / self.in_std
        for w, b, tag in zip(self.weights, self.biases, self.activations):
            z = z @ w.T + b
            if tag == "tanh":
                z = np.tanh(z)
            elif tag == "relu":
                z = np.maximum(z, 0.0)
        y = z * self.out_std + self.out_mean
        return y[0] if squeeze else y

    def input_jacobian(self, x: np.ndarray) -> np.ndarray:
        """d forward / d input at one point, shape (n_out, n_in)."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.layer_sizes[0],):
            raise ValueError("input_jacobian takes a single input vector")
        z = (x - self.in_mean) / self.in_std
        jac = np.diag(1.0 / self.in_std)
        for w, b, tag in zip(self.weights, self.biases, self.activations):
            a = w @ z + b
            jac = w @ jac
            if tag == "tanh":
                z = np.tanh(a)
                jac = (1.0 - z * z)[:, None] * jac
            elif tag == "relu":
                z = np.maximum(a, 0.0)
                jac = (a > 0.0)[:, None].astype(float) * jac
            else:
                z = a
        return self.out_std[:, None] * jac

    def save(self, path) -> None:
        self.validate()
        header = json.dumps({
            "sizes": [int(v) for v in self.layer_sizes],
            "activations": list(self.activations),
        }).encode()
        chunks = [np.asarray(a, dtype="<f8").tobytes()
                  for a in (self.in_mean, self.in_std, self.out_mean, self.out_std)]
        for w, b in zip(self.weights, self.biases):
            chunks.append(np.asarray(w, dtype="<f8").tobytes())
            chunks.append(np.asarray(b, dtype="<f8").tobytes())
        with open(path, "wb") as fh:
            fh.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)))
            fh.write(header)
            for c in chunks:
                fh.write(c)

    @classmethod
    def load(cls, path) -> "Mlp":
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < _PREAMBLE.size:
            raise MlpFormatError("corrupt header: file shorter than the preamble")
        magic, version, header_len = _PREAMBLE.unpack_from(raw)
        if magic != MAGIC:
            raise MlpFormatError(f"corrupt header: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise MlpFormatError(f"unsupported format version {version}")
        try:
            header = json.loads(raw[_PREAMBLE.size:_PREAMBLE.size + header_len])
            sizes = [int(v) for v in header["sizes"]]
            acts = tuple(header["activations"])
        except (ValueError, KeyError, TypeError) as exc:
            raise MlpFormatError(f"corrupt header: {exc}") from exc
        if len(acts) != len(sizes) - 1 or len(sizes) < 2:
            raise MlpFormatError("corrupt header: sizes/activations disagree")
        n_in, n_out = sizes[0], sizes[-1]
        n_params = 2 * (n_in + n_out)
        n_params += sum(sizes[k + 1] * sizes[k] + sizes[k + 1]
                        for k in range(len(sizes) - 1))
        body = raw[_PREAMBLE.size + header_len:]
        if len(body) != n_params * 8:
            raise MlpFormatError(
                f"dimension mismatch: header implies {n_params} parameters, "
                f"file holds {len(body) // 8}")
        flat = np.frombuffer(body, dtype="<f8")
        pos = 0

        def take(shape):
            nonlocal pos
            size = int(np.prod(shape))
            out = flat[pos:pos + size].reshape(shape).copy()
            pos += size
            return out

        in_mean, in_std = take((n_in,)), take((n_in,))
        out_mean, out_std = take((n_out,)), take((n_out,))
        weights, biases = [], []
        for k in range(len(sizes) - 1):
            weights.append(take((sizes[k + 1], sizes[k])))
            biases.append(take((sizes[k + 1],)))
        net = cls(weights=weights, biases=biases, activations=acts,
                  in_mean=in_mean, in_std=in_std,
                  out_mean=out_mean, out_std=out_std)
        net.validate()
        return net


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 200
    val_fraction: float = 0.1
    seed: int = 0
    lr_schedule: str = "constant"  # or "cosine": anneal to 0 over the run
    # The solved control problem is odd under state negation: solving from -s
    # yields exactly -u and negated sensitivities.  When enabled, training
    # adds that mirrored twin of every training record (validation stays
    # unmirrored), doubling coverage and pinning the learned map's sign
    # behavior near the symmetric hanging state.
    mirror_augment: bool = False

    def __post_init__(self):
        if not (0.0 < self.val_fraction < 0.5):
            raise ValueError("val_fraction must be in (0, 0.5)")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning rate, batch size, and epochs must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")


def _init_layers(sizes, rng):
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return weights, biases


def _forward_cached(weights, biases, acts, z0):
    """Forward pass on normalized inputs, keeping post-activations."""
    zs = [z0]
    pre = []
    z = z0
    for w, b, tag in zip(weights, biases, acts):
        a = z @ w.T + b
        pre.append(a)
        if tag == "tanh":
            z = np.tanh(a)
        elif tag == "relu":
            z = np.maximum(a, 0.0)
        else:
            z = a
        zs.append(z)
    return zs, pre


def _backward(weights, acts, zs, pre, d_out):
    """Gradient of the batch loss given d loss / d output."""
    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    delta = d_out
    for k in range(len(weights) - 1, -1, -1):
        if acts[k] == "tanh":
            delta = delta * (1.0 - zs[k + 1] ** 2)
        elif acts[k] == "relu":
            delta = delta * (pre[k] > 0.0)
        grads_w[k] = delta.T @ zs[k]
        grads_b[k] = delta.sum(axis=0)
        if k:
            delta = delta @ weights[k]
    return grads_w, grads_b


def train(data: DatasetFile, target: str, hidden=None,
          cfg: TrainConfig = TrainConfig()) -> Mlp:
    """Fit an MLP to imitate the solver on `data` by mini-batch Adam.

    `target` selects the regression output: "action" (first optimal action)
    or "sensitivity" (flattened action-parameter row).  Returns the weights
    with the best validation MSE; per-epoch losses (normalized scale) are
    left in `net.history`.
    """
    if data.n < 2:
        raise ValueError("dataset must hold at least 2 records")
    if target == "action":
        targets = data.actions.reshape(data.n, N_ACTION)
        hidden = ACTION_HIDDEN if hidden is None else tuple(hidden)
    elif target == "sensitivity":
        targets = data.sensitivities.reshape(data.n, N_ACTION * N_PARAM)
        hidden = SENS_HIDDEN if hidden is None else tuple(hidden)
    else:
        raise ValueError("target must be 'action' or 'sensitivity'")
    inputs = encode_state(data.states)

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(data.n)
    n_val = max(1, int(round(cfg.val_fraction * data.n)))
    if n_val >= data.n:
        raise ValueError("dataset too small for the validation split")
    val_idx, train_idx = order[:n_val], order[n_val:]

    x_train, y_train = inputs[train_idx], targets[train_idx]
    x_val, y_val = inputs[val_idx], targets[val_idx]
    if cfg.mirror_augment:
        # encoded mirror of (p, sin phi, cos phi, pdot, phidot): cos is even
        mirror_signs = np.array([-1.0, -1.0, 1.0, -1.0, -1.0])
        x_train = np.vstack([x_train, x_train * mirror_signs])
        y_train = np.vstack([y_train, -y_train])
    in_mean = x_train.mean(axis=0)
    in_std = np.maximum(x_train.std(axis=0), 1e-8)
    out_mean = y_train.mean(axis=0)
    out_std = np.maximum(y_train.std(axis=0), 1e-8)
    xn_train = (x_train - in_mean) / in_std
    yn_train = (y_train - out_mean) / out_std
    xn_val = (x_val - in_mean) / in_std
    yn_val = (y_val - out_mean) / out_std

    sizes = [inputs.shape[1], *hidden, targets.shape[1]]
    acts = default_activations(len(hidden))
    weights, biases = _init_layers(sizes, rng)

    # Adam state
    mw = [np.zeros_like(w) for w in weights]
    vw = [np.zeros_like(w) for w in weights]
    mb = [np.zeros_like(b) for b in biases]
    vb = [np.zeros_like(b) for b in biases]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    def val_mse():
        zs, _ = _forward_cached(weights, biases, acts, xn_val)
        return float(np.mean((zs[-1] - yn_val) ** 2))

    best_val = np.inf
    best_w = [w.copy() for w in weights]
    best_b = [b.copy() for b in biases]
    hist_train, hist_val = [], []
    n_train = x_train.shape[0]
    for epoch in range(cfg.epochs):
        if cfg.lr_schedule == "cosine":
            lr = cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * epoch / cfg.epochs))
        else:
            lr = cfg.learning_rate
        perm = rng.permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, cfg.batch_size):
            batch = perm[start:start + cfg.batch_size]
            xb, yb = xn_train[batch], yn_train[batch]
            zs, pre = _forward_cached(weights, biases, acts, xb)
            resid = zs[-1] - yb
            # Divergence shows up as overflow here; it is reported via
            # NonFiniteLoss rather than a numpy warning.
            with np.errstate(over="ignore", invalid="ignore"):
                loss = float(np.mean(resid ** 2))
            if not np.isfinite(loss):
                raise NonFiniteLoss(
                    f"batch loss became non-finite at Adam step {step}; "
                    "reduce the learning rate")
            epoch_loss += loss * len(batch)
            d_out = (2.0 / resid.size) * resid
            gw, gb = _backward(weights, acts, zs, pre, d_out)
            step += 1
            corr1 = 1.0 - beta1 ** step
            corr2 = 1.0 - beta2 ** step
            for k in range(len(weights)):
                mw[k] = beta1 * mw[k] + (1 - beta1) * gw[k]
                vw[k] = beta2 * vw[k] + (1 - beta2) * gw[k] ** 2
                weights[k] -= lr * (mw[k] / corr1) / (
                    np.sqrt(vw[k] / corr2) + eps)
                mb[k] = beta1 * mb[k] + (1 - beta1) * gb[k]
                vb[k] = beta2 * vb[k] + (1 - beta2) * gb[k] ** 2
                biases[k] -= lr * (mb[k] / corr1) / (
                    np.sqrt(vb[k] / corr2) + eps)
        hist_train.append(epoch_loss / n_train)
        v = val_mse()
        hist_val.append(v)
        if v < best_val:
            best_val = v
            best_w = [w.copy() for w in weights]
            best_b = [b.copy() for b in biases]

    net = Mlp(weights=best_w, biases=best_b, activations=acts,
              in_mean=in_mean, in_std=in_std,
              out_mean=out_mean, out_std=out_std,
              history={"train": np.array(hist_train),
                       "val": np.array(hist_val),
                       "best_val": best_val})
    net.validate()
    return net
