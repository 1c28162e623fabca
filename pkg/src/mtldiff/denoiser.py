"""Noise-prediction MLP with flat parameters and exact reverse-mode gradients.

The model maps a noised point plus a sinusoidal embedding of the normalised
timestep to a prediction of the noise that was added.  Parameters live in one
flat float64 vector so gradient surgery (projection, per-cluster weighting)
is plain vector arithmetic.  Checkpoints are a small self-describing binary
format, see :func:`save_checkpoint`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import FormatError, VersionError

# Frequency span of the timestep embedding; geometric from 1 to this value.
EMBED_FREQ_MAX = 1000.0

DEFAULT_HIDDEN = (128, 128, 128)
DEFAULT_TIME_EMBED_DIM = 32

CKPT_MAGIC = "MTLDIFF-CKPT"
CKPT_VERSION = "v1"
_CKPT_RESERVED = {"widths", "time_embed_dim", "seed", "iteration", "arrays", "param_count"}


def time_embedding(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal features of t / T: [sin(w_j s), cos(w_j s)] over dim/2 frequencies."""
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.geomspace(1.0, EMBED_FREQ_MAX, dim // 2)
    ang = np.outer(t / T, freqs)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def param_count(widths) -> int:
    """Flat parameter count for the given layer widths (weights plus biases)."""
    return sum((din + 1) * dout for din, dout in zip(widths[:-1], widths[1:]))


@dataclass
class MlpDenoiser:
    """SiLU MLP over [noised point, time embedding] predicting the added noise.

    ``widths`` lists every layer width from input to output; the input width
    must equal data dim plus ``time_embed_dim``.  ``params`` stores each
    layer's weight matrix (row-major) followed by its bias.
    """

    widths: tuple[int, ...]
    time_embed_dim: int
    params: np.ndarray

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"invalid layer widths {self.widths}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2 != 0:
            raise ValueError(f"time_embed_dim must be even and >= 2, got {self.time_embed_dim}")
        if self.widths[0] != self.widths[-1] + self.time_embed_dim:
            raise ValueError(
                "input width must be output width plus time_embed_dim, "
                f"got widths {self.widths} with time_embed_dim {self.time_embed_dim}"
            )
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        expect = param_count(self.widths)
        if self.params.shape != (expect,):
            raise ValueError(f"params must be flat with {expect} entries, got {self.params.shape}")

    @property
    def data_dim(self) -> int:
        return self.widths[-1]

    @property
    def param_total(self) -> int:
        return self.params.size

    @classmethod
    def create(cls, data_dim: int = 2, hidden=DEFAULT_HIDDEN,
               time_embed_dim: int = DEFAULT_TIME_EMBED_DIM, seed: int = 0) -> "MlpDenoiser":
        """Fresh model with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init."""
        widths = (data_dim + time_embed_dim, *hidden, data_dim)
        rng = np.random.default_rng(seed)
        parts = []
        for din, dout in zip(widths[:-1], widths[1:]):
            s = 1.0 / np.sqrt(din)
            parts.append(rng.uniform(-s, s, dout * din))
            parts.append(rng.uniform(-s, s, dout))
        return cls(widths=widths, time_embed_dim=time_embed_dim,
                   params=np.concatenate(parts))

    def weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer (W, b) views into the flat parameter vector (no copies)."""
        out = []
        off = 0
        for din, dout in zip(self.widths[:-1], self.widths[1:]):
            W = self.params[off:off + dout * din].reshape(dout, din)
            off += dout * din
            b = self.params[off:off + dout]
            off += dout
            out.append((W, b))
        return out

    def _features(self, X_t: np.ndarray, t, T: int) -> np.ndarray:
        emb = time_embedding(t, T, self.time_embed_dim)
        if emb.shape[0] == 1 and X_t.shape[0] > 1:
            emb = np.broadcast_to(emb, (X_t.shape[0], emb.shape[1]))
        return np.ascontiguousarray(np.concatenate([X_t, emb], axis=1))

    def predict_batch(self, X_t: np.ndarray, t: int, schedule) -> np.ndarray:
        """Predicted noise for a batch of points all at timestep t."""
        X_t = np.atleast_2d(np.asarray(X_t, dtype=np.float64))
        if X_t.shape[1] != self.data_dim:
            raise ValueError(f"expected points of dim {self.data_dim}, got {X_t.shape[1]}")
        schedule._check_t(t)
        X_in = self._features(X_t, int(t), schedule.T)
        Y, _ = _backend.kernels().mlp_forward(self.weights(), X_in)
        return Y

    def predict(self, x_t: np.ndarray, t: int, schedule) -> np.ndarray:
        """Predicted noise for a single point."""
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape != (self.data_dim,):
            raise ValueError(f"expected a point of shape ({self.data_dim},), got {x_t.shape}")
        return self.predict_batch(x_t[None, :], t, schedule)[0]

    def loss_and_grad(self, x0: np.ndarray, t: np.ndarray, eps: np.ndarray, schedule):
        """Per-sample losses and a gradient closure sharing one forward pass.

        The loss of sample i is ``||eps_i - predict(x_t_i, t_i)||^2`` with
        ``x_t_i`` the noised input.  Returns ``(losses, grad_fn)`` where
        ``grad_fn(subset)`` is the flat-parameter gradient of the mean loss
        over the given (unique) row indices.
        """
        x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
        t = np.asarray(t)
        if x0.shape != eps.shape or x0.shape[1] != self.data_dim:
            raise ValueError(f"bad batch shapes x0 {x0.shape}, eps {eps.shape}")
        if t.shape != (x0.shape[0],):
            raise ValueError(f"need one timestep per sample, got t shape {t.shape}")
        X_t = schedule.forward_sample(x0, t, eps)
        X_in = self._features(X_t, t, schedule.T)
        ker = _backend.kernels()
        weights = self.weights()
        Y, cache = ker.mlp_forward(weights, X_in)
        R = Y - eps
        losses = np.einsum("ij,ij->i", R, R)
        n = x0.shape[0]

        def grad_fn(subset) -> np.ndarray:
            subset = np.asarray(subset, dtype=np.intp)
            if subset.ndim != 1 or subset.size == 0:
                raise ValueError("gradient subset must be a nonempty 1-D index array")
            if np.any(subset < 0) or np.any(subset >= n):
                raise ValueError(f"subset indices out of range 0..{n - 1}")
            if np.unique(subset).size != subset.size:
                raise ValueError("subset indices must be unique")
            if subset.size == n:
                dY = (2.0 / n) * R
                parts = ker.mlp_backward(weights, cache, dY)
            else:
                # restrict the cached activations to the subset's rows; the
                # backward pass is row-separable so this is exact
                sub_cache = [c[subset] for c in cache]
                dY = (2.0 / subset.size) * R[subset]
                parts = ker.mlp_backward(weights, sub_cache, dY)
            return flatten_grads(parts)

        return losses, grad_fn


def flatten_grads(parts) -> np.ndarray:
    """Concatenate per-layer (dW, db) pairs into the flat parameter layout."""
    chunks = []
    for dW, db in parts:
        chunks.append(dW.ravel())
        chunks.append(db)
    return np.concatenate(chunks)


@dataclass
class Checkpoint:
    """Decoded checkpoint: the model plus training bookkeeping."""

    model: MlpDenoiser
    seed: int
    iteration: int
    meta: dict[str, str]
    arrays: dict[str, np.ndarray]


def save_checkpoint(path, model: MlpDenoiser, *, seed: int, iteration: int,
                    meta: dict[str, str] | None = None,
                    arrays: dict[str, np.ndarray] | None = None) -> None:
    """Write a checkpoint file.

    Layout: ascii header lines (magic+version, metadata key/value pairs, an
    ``arrays name:length,...`` announcement when extra state is present, then
    ``param_count N``), followed by the flat parameters and each announced
    array as little-endian float64.  Written atomically via rename.
    """
    meta = dict(meta or {})
    arrays = dict(arrays or {})
    lines = [
        f"{CKPT_MAGIC} {CKPT_VERSION}",
        "widths " + ",".join(str(w) for w in model.widths),
        f"time_embed_dim {model.time_embed_dim}",
        f"seed {int(seed)}",
        f"iteration {int(iteration)}",
    ]
    for key, value in meta.items():
        value = str(value)
        if key in _CKPT_RESERVED or not key or " " in key or "\n" in key or "\n" in value:
            raise ValueError(f"bad checkpoint metadata entry {key!r}")
        lines.append(f"{key} {value}")
    blobs = [np.ascontiguousarray(model.params, dtype="<f8").tobytes()]
    if arrays:
        spec = []
        for name, arr in arrays.items():
            if not name or any(ch in name for ch in " ,:\n"):
                raise ValueError(f"bad checkpoint array name {name!r}")
            flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
            spec.append(f"{name}:{flat.size}")
            blobs.append(flat.tobytes())
        lines.append("arrays " + ",".join(spec))
    lines.append(f"param_count {model.params.size}")
    payload = ("\n".join(lines) + "\n").encode("ascii") + b"".join(blobs)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as f:
        head = f.readline()
        try:
            magic, _, version = head.decode("ascii").rstrip("\n").partition(" ")
        except UnicodeDecodeError as e:
            raise FormatError(f"{path}: not a checkpoint file") from e
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file (header {head[:40]!r})")
        if version != CKPT_VERSION:
            raise VersionError(
                f"{path}: unsupported checkpoint version {version!r}, expected {CKPT_VERSION}"
            )
        meta: dict[str, str] = {}
        array_spec: list[tuple[str, int]] = []
        declared = None
        while True:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: header ended before param_count")
            try:
                key, _, value = line.decode("ascii").rstrip("\n").partition(" ")
            except UnicodeDecodeError as e:
                raise FormatError(f"{path}: corrupt header line") from e
            if key == "param_count":
                declared = value
                break
            meta[key] = value
        try:
            widths = tuple(int(w) for w in meta.pop("widths").split(","))
            time_embed_dim = int(meta.pop("time_embed_dim"))
            seed = int(meta.pop("seed"))
            iteration = int(meta.pop("iteration"))
            n_params = int(declared)
            for part in filter(None, meta.pop("arrays", "").split(",")):
                name, _, size = part.partition(":")
                array_spec.append((name, int(size)))
        except (KeyError, ValueError) as e:
            raise FormatError(f"{path}: missing or malformed header field ({e})") from e
        if n_params != param_count(widths):
            raise FormatError(
                f"{path}: param_count {n_params} does not match widths {widths}"
            )

        def read_block(count, label):
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise FormatError(f"{path}: truncated {label} block")
            return np.frombuffer(buf, dtype="<f8").astype(np.float64)

        params = read_block(n_params, "parameter")
        arrays = {name: read_block(size, name) for name, size in array_spec}
        if f.read(1):
            raise FormatError(f"{path}: trailing data after declared blocks")
    try:
        model = MlpDenoiser(widths=widths, time_embed_dim=time_embed_dim, params=params)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
    return Checkpoint(model=model, seed=seed, iteration=iteration, meta=meta, arrays=arrays)
