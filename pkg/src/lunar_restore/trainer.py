"""Adam training loop, loss history and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"LRUC" | u32 format version | u64 header length | UTF-8 JSON header |
    float64 tensor payloads in header order

The header holds both configs, the epoch and step counters, the loss history
and the ``name``/``shape`` list of every tensor (params, then Adam first and
second moments).
"""

import csv
import hashlib
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import CorruptCheckpointError, NonFiniteLossError, ValidationError
from .unet import UNetConfig, check_params, init_params, loss_and_grads

logger = logging.getLogger(__name__)

MAGIC = b"LRUC"
FORMAT_VERSION = 1
_DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0
    checkpoint_every: int = 10
    dtype: str = "float64"
    masked_loss: bool = False

    def __post_init__(self):
        for name in ("learning_rate", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1)")
        for name in ("batch_size", "epochs", "checkpoint_every"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ValidationError(f"{name} must be a positive integer, got {v!r}")
        if self.dtype not in _DTYPES:
            raise ValidationError(f"dtype must be one of {sorted(_DTYPES)}")
        if isinstance(self.seed, bool) or not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be an integer in [0, 2**64)")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
            0,
        )


def adam_step(params, grads, state, hyper, t=None):
    """One Adam update; returns new ``(params, state)`` and leaves inputs untouched.

    ``t`` is the 1-based step number used for bias correction; it defaults to
    ``state.step + 1``.
    """
    t = state.step + 1 if t is None else int(t)
    if t < 1:
        raise ValidationError("Adam step number must be >= 1")
    b1, b2, lr, eps = hyper.beta1, hyper.beta2, hyper.learning_rate, hyper.epsilon
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ValidationError(f"shape mismatch for {k}: param {p.shape}, grad {g.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        new_params[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[k], new_v[k] = m, v
    return new_params, AdamState(new_m, new_v, t)


@dataclass
class Checkpoint:
    unet_config: UNetConfig
    train_config: TrainConfig
    params: dict
    adam: AdamState
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    @classmethod
    def fresh(cls, unet_config, train_config, seed=None):
        dtype = train_config.np_dtype
        params = init_params(unet_config, train_config.seed if seed is None else seed, dtype)
        return cls(unet_config, train_config, params, AdamState.zeros_like(params))


def _tensor_list(ckpt):
    for prefix, group in (("params", ckpt.params), ("adam.m", ckpt.adam.m), ("adam.v", ckpt.adam.v)):
        for name, arr in group.items():
            yield f"{prefix}/{name}", arr


def save_checkpoint(ckpt, path):
    tensors = list(_tensor_list(ckpt))
    header = {
        "format_version": FORMAT_VERSION,
        "unet_config": ckpt.unet_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "step": ckpt.adam.step,
        "loss_history": ckpt.loss_history,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    hbytes = json.dumps(header).encode("utf-8")
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        f.write(hbytes)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    try:
        return _parse_checkpoint(blob)
    except CorruptCheckpointError as exc:
        raise CorruptCheckpointError(f"{path}: {exc}") from None


def _parse_checkpoint(blob):
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptCheckpointError("bad magic, not a checkpoint")
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != FORMAT_VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    start = 16
    if start + hlen > len(blob):
        raise CorruptCheckpointError("truncated header")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
        unet_config = UNetConfig(**header["unet_config"])
        train_config = TrainConfig(**header["train_config"])
        specs = [(t["name"], tuple(t["shape"])) for t in header["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"malformed header: {exc}") from None
    offset = start + hlen
    expected = offset + 8 * sum(int(np.prod(s)) for _, s in specs)
    if len(blob) != expected:
        raise CorruptCheckpointError(
            f"payload size mismatch ({len(blob)} bytes, expected {expected}); file truncated?"
        )
    dtype = train_config.np_dtype
    groups = {"params": {}, "adam.m": {}, "adam.v": {}}
    for name, shape in specs:
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
        prefix, _, pname = name.partition("/")
        if prefix not in groups:
            raise CorruptCheckpointError(f"unknown tensor group in {name!r}")
        groups[prefix][pname] = arr.astype(dtype)
    try:
        check_params(groups["params"], unet_config)
    except ValidationError as exc:
        raise CorruptCheckpointError(str(exc)) from None
    if list(groups["adam.m"]) != list(groups["params"]) or list(groups["adam.v"]) != list(groups["params"]):
        raise CorruptCheckpointError("optimizer state does not match parameters")
    return Checkpoint(
        unet_config,
        train_config,
        groups["params"],
        AdamState(groups["adam.m"], groups["adam.v"], int(header["step"])),
        epoch=int(header["epoch"]),
        loss_history=list(header["loss_history"]),
        format_version=version,
    )


def checkpoint_id(path):
    """Short content hash identifying a checkpoint file."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def epoch_permutation(seed, epoch, n):
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def mean_loss(params, config, X, Y, masks=None, batch_size=8):
    """Mean L2 over a dataset, evaluated in batches (no parameter update)."""
    total, count = 0.0, 0
    for s in range(0, len(X), batch_size):
        xb, yb = X[s : s + batch_size], Y[s : s + batch_size]
        mb = None if masks is None else masks[s : s + batch_size]
        loss, _ = loss_and_grads(params, config, xb, yb, mb)
        total += loss * len(xb)
        count += len(xb)
    return total / count


def train_arrays(X, Y, unet_config, train_config, masks=None, val=None, resume=None, on_checkpoint=None):
    """Minimize L2 from corrupted ``X`` to clean ``Y`` (both ``[N, 1, H, W]``).

    Trains from ``resume`` (a :class:`Checkpoint`) or a fresh seeded init up
    to ``train_config.epochs`` completed epochs. ``val`` is an optional
    ``(X, Y)`` pair scored at every checkpoint epoch. ``on_checkpoint`` is
    called with the current checkpoint at those epochs.
    """
    dtype = train_config.np_dtype
    X = unet_config.check_input(X).astype(dtype, copy=False)
    Y = np.asarray(Y, dtype=dtype)
    if X.shape != Y.shape:
        raise ValidationError(f"X shape {X.shape} does not match Y shape {Y.shape}")
    use_mask = train_config.masked_loss
    if use_mask and masks is None:
        raise ValidationError("masked_loss requires masks")
    if resume is None:
        ckpt = Checkpoint.fresh(unet_config, train_config)
    else:
        if resume.unet_config != unet_config:
            raise ValidationError("checkpoint UNetConfig does not match the requested config")
        ckpt = replace(
            resume,
            train_config=train_config,
            params={k: v.astype(dtype) for k, v in resume.params.items()},
            adam=AdamState(
                {k: v.astype(dtype) for k, v in resume.adam.m.items()},
                {k: v.astype(dtype) for k, v in resume.adam.v.items()},
                resume.adam.step,
            ),
            loss_history=list(resume.loss_history),
        )
    params, state = ckpt.params, ckpt.adam
    n = len(X)
    bs = train_config.batch_size
    for epoch in range(ckpt.epoch + 1, train_config.epochs + 1):
        order = epoch_permutation(train_config.seed, epoch, n)
        total = 0.0
        for b, s in enumerate(range(0, n, bs)):
            idx = order[s : s + bs]
            mb = masks[idx] if use_mask else None
            loss, grads = loss_and_grads(params, unet_config, X[idx], Y[idx], mb)
            if not np.isfinite(loss):
                raise NonFiniteLossError(epoch, b, loss)
            params, state = adam_step(params, grads, state, train_config)
            total += loss * len(idx)
        record = {"epoch": epoch, "train_loss": total / n, "val_loss": None}
        is_ckpt = epoch % train_config.checkpoint_every == 0 or epoch == train_config.epochs
        if is_ckpt and val is not None:
            vmasks = val[2] if use_mask and len(val) > 2 else None
            record["val_loss"] = mean_loss(params, unet_config, val[0], val[1], vmasks, bs)
        ckpt.loss_history.append(record)
        ckpt.params, ckpt.adam, ckpt.epoch = params, state, epoch
        logger.info("epoch %d train_loss %.6g val_loss %s", epoch, record["train_loss"], record["val_loss"])
        if is_ckpt and on_checkpoint is not None:
            on_checkpoint(ckpt)
    return ckpt


def write_loss_csv(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for r in history:
            w.writerow([
                r["epoch"],
                repr(float(r["train_loss"])),
                "" if r["val_loss"] is None else repr(float(r["val_loss"])),
            ])


def fit(manifest, unet_config, train_config, out_dir, resume=None):
    """Train on a dataset manifest, writing checkpoints and ``losses.csv`` to ``out_dir``.

    Returns the final :class:`Checkpoint`; its ``loss_history`` is the
    per-epoch record also written to CSV.
    """
    from .dataset import load_split

    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    X, Y, M = load_split(manifest, "train")
    if len(X) == 0:
        raise ValidationError("manifest has no training samples")
    val = None
    if manifest.counts.get("val", 0):
        val = load_split(manifest, "val")

    def on_checkpoint(c):
        save_checkpoint(c, os.path.join(ckpt_dir, f"epoch_{c.epoch:04d}.lruc"))
        write_loss_csv(c.loss_history, os.path.join(out_dir, "losses.csv"))

    ckpt = train_arrays(
        X, Y, unet_config, train_config, masks=M, val=val, resume=resume, on_checkpoint=on_checkpoint
    )
    save_checkpoint(ckpt, os.path.join(out_dir, "model.lruc"))
    write_loss_csv(ckpt.loss_history, os.path.join(out_dir, "losses.csv"))
    return ckpt
