"""Optimisation loop: AdamW, warmup + cosine schedule, checkpoints, loss traces."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad

logger = logging.getLogger(__name__)

MAGIC = b"MQFC"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-4
    warmup_ratio: float = 0.15
    total_steps: int = 500
    batch_size: int = 16
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    seed: int = 0
    grad_clip: float = 1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in (0, 1)")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.total_steps < 0 or self.batch_size < 1:
            raise ValueError("total_steps must be >= 0 and batch_size >= 1")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def warmup_steps(config: TrainConfig) -> int:
    return int(math.floor(config.warmup_ratio * config.total_steps + 0.5))


def cosine_lr(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then half-cosine decay to 0 at ``total_steps``."""
    total = config.total_steps
    W = warmup_steps(config)
    if step < W:
        return config.peak_lr * step / W
    if total == W:
        return config.peak_lr
    progress = min(max((step - W) / (total - W), 0.0), 1.0)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str) -> bool:
    """Weight decay applies to matrices and embeddings, not to biases, LN gains or the temperature."""
    leaf = name.rsplit(".", 1)[-1]
    if name == "itc.temp" or leaf in ("g", "bias") or leaf.startswith("b"):
        return False
    return True


def adamw_step(params: dict, grads: dict, moments: dict, lr: float, config: TrainConfig, step: int) -> None:
    """In-place AdamW update; ``step`` counts from 1. ``moments`` holds m/<name>, v/<name>."""
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        theta = params[name]
        m = moments.setdefault(f"m/{name}", np.zeros_like(theta))
        v = moments.setdefault(f"v/{name}", np.zeros_like(theta))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        if decays(name):
            update = update + config.weight_decay * theta
        theta -= lr * update


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm if norm > 0 else 0.0
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: dict
    params: dict
    moments: dict = field(default_factory=dict)
    step: int = 0
    rng_state: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {"config": self.config, "step": self.step, "rng_state": self.rng_state},
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        buf.write(header)
        arrays = [("p", k, v) for k, v in self.params.items()] + [("o", k, v) for k, v in self.moments.items()]
        buf.write(struct.pack("<I", len(arrays)))
        for kind, name, arr in arrays:
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f8")
            buf.write(kind.encode("ascii"))
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(np.ascontiguousarray(arr).tobytes())
        body = buf.getvalue()
        return body + struct.pack("<QI", len(body), zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < 4 or data[:4] != MAGIC:
            raise ValueError("not a checkpoint: bad magic")
        if len(data) < 4 + 12 + 12:
            raise ValueError("checkpoint truncated")
        body, trailer = data[:-12], data[-12:]
        length, crc = struct.unpack("<QI", trailer)
        if length != len(body) or zlib.crc32(body) != crc:
            raise ValueError("checkpoint corrupt or truncated (length/checksum mismatch)")
        view = memoryview(body)
        pos = 4
        version, hlen = struct.unpack_from("<IQ", view, pos)
        pos += 12
        if version != FORMAT_VERSION:
            raise ValueError(f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})")
        header = json.loads(bytes(view[pos : pos + hlen]).decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        params, moments = {}, {}
        for _ in range(count):
            kind = bytes(view[pos : pos + 1]).decode("ascii")
            (nlen,) = struct.unpack_from("<H", view, pos + 1)
            pos += 3
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", view, pos)
            pos += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(view, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * n
            (params if kind == "p" else moments)[name] = arr
        if pos != len(body):
            raise ValueError("checkpoint has trailing bytes")
        return cls(header["config"], params, moments, header["step"], header["rng_state"])

    def save(self, path) -> None:
        data = self.to_bytes()
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    ckpt.save(path)


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.load(path)


# ---------------------------------------------------------------------------
# loss trace


TRACE_FIELDS = ("l_itc", "l_itm", "l_icg", "l_msp", "total")


def format_trace_line(step: int, values: dict, lr: float) -> str:
    """step, each loss value in ``values`` order, lr; tab-separated, shortest round-trip floats."""
    cols = [str(step)] + [repr(float(v)) for v in values.values()] + [repr(float(lr))]
    return "\t".join(cols)


# ---------------------------------------------------------------------------
# training loop


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Indices for ``step`` in the endless sequence of per-epoch shuffles of range(n)."""
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(perm[offset : offset + take].tolist())
    return np.asarray(out, dtype=np.int64)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, step])


LossFn = Callable[[dict, Sequence, np.random.Generator], object]


def train(
    config: TrainConfig,
    dataset: Sequence,
    params: dict,
    loss_fn: LossFn,
    trainable: Optional[Sequence[str]] = None,
    moments: Optional[dict] = None,
    start_step: int = 0,
    stop_step: Optional[int] = None,
    trace_path=None,
    checkpoint_dir=None,
    run_config: Optional[dict] = None,
    on_step: Optional[Callable] = None,
) -> tuple:
    """Run steps ``start_step`` .. ``stop_step`` (default ``total_steps``).

    ``loss_fn(tensor_params, batch, rng)`` returns an object with ``.total``
    (a scalar Tensor) and ``.values()``. Parameters are updated in place;
    batches and per-step randomness are pure functions of (seed, step), so
    resuming from a checkpoint reproduces the uninterrupted trace.

    Returns (Checkpoint, list of trace lines).
    """
    if not dataset:
        raise ValueError("dataset is empty")
    moments = {} if moments is None else moments
    stop = config.total_steps if stop_step is None else stop_step
    names = list(params) if trainable is None else [n for n in params if n in set(trainable)]
    lines = []
    trace_fh = open(trace_path, "a", encoding="utf-8") if trace_path else None
    step = start_step
    run_config = run_config or {}

    def snapshot(at_step):
        rng = step_rng(config.seed, at_step)
        return Checkpoint(
            dict(run_config, train=config.to_dict()),
            {k: v.copy() for k, v in params.items()},
            {k: v.copy() for k, v in moments.items()},
            at_step,
            _jsonable(rng.bit_generator.state),
        )

    try:
        for step in range(start_step, stop):
            idx = batch_indices(step, len(dataset), config.batch_size, config.seed)
            batch = [dataset[i] for i in idx]
            tensors = ad.parameters_from(params, names)
            result = loss_fn(tensors, batch, step_rng(config.seed, step))
            grads = ad.backward(result.total, {n: tensors[n] for n in names})
            norm = clip_global_norm(grads, config.grad_clip)
            lr = cosine_lr(step, config)
            if any(np.any(g != 0) for g in grads.values()):
                adamw_step(params, grads, moments, lr, config, step + 1)
            line = format_trace_line(step, result.values(), lr)
            lines.append(line)
            if trace_fh:
                trace_fh.write(line + "\n")
                trace_fh.flush()
            if on_step:
                on_step(step, result, norm)
            if checkpoint_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                snapshot(step + 1).save(Path(checkpoint_dir) / f"step{step + 1:07d}.ckpt")
    except BaseException:
        if checkpoint_dir:
            snapshot(step).save(Path(checkpoint_dir) / "abort.ckpt")
            logger.error("training aborted at step %d; checkpoint written", step)
        raise
    finally:
        if trace_fh:
            trace_fh.close()
    return snapshot(stop), lines


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj
