"""Adversarial training of the conditional generator/discriminator pair.

One discriminator step and one generator step per iteration, both RMSProp.
Everything downstream of ``TrainingConfig.seed`` is deterministic.
"""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import nets
from . import tensor_core as tc
from .data_pipeline import ImagePair, crop_at, denormalize, normalize, resize
from .nets import NetworkSpec, ParameterSet
from .tensor_core import Tensor

log = logging.getLogger(__name__)

DIRECTIONS = ("visual_to_tactile", "tactile_to_visual")
MAGIC = b"XMGC"
FORMAT_VERSION = 1
LOSS_LOG_HEADER = "iteration,loss_d,loss_g,loss_l1"
DEFAULT_L1_WEIGHT = 100.0


class NumericalError(RuntimeError):
    """A loss became NaN or infinite."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


class CheckpointError(ValueError):
    code = "checkpoint_error"


class BadMagicError(CheckpointError):
    code = "bad_magic"


class VersionMismatchError(CheckpointError):
    code = "version_mismatch"


class TruncatedCheckpointError(CheckpointError):
    code = "truncated"


@dataclass
class TrainingConfig:
    direction: str = "visual_to_tactile"
    resolution: int = 256
    batch_size: int = 1
    iterations: int = 20000
    learning_rate: float = 2e-4
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    l1_weight: float = 0.0
    jitter_margin: int = 30
    seed: int = 0
    checkpoint_every: int = 0  # 0 writes only the final checkpoint
    gen_depth: int = 7
    gen_base_filters: int = 64
    disc_depth: int | None = None
    disc_base_filters: int = 64
    bn_momentum: float = nets.BN_MOMENTUM
    bn_eps: float = nets.BN_EPS
    freeze_generator: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        for name in ("learning_rate", "rmsprop_epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.rmsprop_decay < 1:
            raise ValueError("rmsprop_decay must lie in [0, 1)")
        if self.l1_weight < 0:
            raise ValueError("l1_weight must be nonnegative")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be at least 1")
        if self.jitter_margin < 0 or self.checkpoint_every < 0:
            raise ValueError("jitter_margin and checkpoint_every must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**data)


@dataclass
class OptimizerState:
    caches: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: ParameterSet) -> "OptimizerState":
        return cls({k: np.zeros_like(t.data) for k, t in params})


@dataclass
class LossRow:
    iteration: int
    loss_d: float
    loss_g: float
    loss_l1: float


@dataclass
class Checkpoint:
    config: TrainingConfig
    generator: ParameterSet
    discriminator: ParameterSet
    gen_opt: OptimizerState
    disc_opt: OptimizerState
    rng_state: bytes
    iteration: int

    def generator_spec(self) -> NetworkSpec:
        return build_networks(self.config, specs_only=True)[0]

    def discriminator_spec(self) -> NetworkSpec:
        return build_networks(self.config, specs_only=True)[1]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_log: list[LossRow]


# --- losses and optimizer -----------------------------------------------------

def discriminator_loss(d_real, d_fake) -> Tensor:
    return tc.bce_loss(d_real, 1.0) + tc.bce_loss(d_fake, 0.0)


def generator_loss(d_fake, generated: Tensor, target, l1_weight: float) -> Tensor:
    """Non-saturating adversarial term plus an optional weighted L1 term."""
    loss = tc.bce_loss(d_fake, 1.0)
    if l1_weight > 0:
        loss = loss + tc.l1_loss(generated, target) * l1_weight
    return loss


def rmsprop_step(params: ParameterSet, state: OptimizerState, learning_rate: float,
                 decay: float = 0.9, eps: float = 1e-8) -> None:
    """cache <- decay*cache + (1-decay)*g^2; p <- p - lr*g/sqrt(cache + eps)."""
    missing = [name for name, t in params if t.grad is None]
    if missing:
        raise RuntimeError(f"rmsprop_step: no gradient for {', '.join(missing[:5])}")
    for name, t in params:
        g = t.grad.astype(np.float64)
        cache = state.caches.get(name)
        if cache is None:
            cache = state.caches[name] = np.zeros_like(t.data)
        new_cache = decay * cache.astype(np.float64) + (1.0 - decay) * g * g
        state.caches[name] = new_cache.astype(cache.dtype)
        t.data = (t.data - learning_rate * g / np.sqrt(new_cache + eps)).astype(t.data.dtype)
    state.step += 1


# --- networks -------------------------------------------------------------------

def build_networks(config: TrainingConfig, specs_only: bool = False):
    """(gen_spec, disc_spec, gen_params, disc_params) seeded from ``config.seed``."""
    gspec, gparams = nets.build_unet_generator(
        config.resolution, 3, 3, config.gen_base_filters, config.gen_depth,
        seed=config.seed, bn_momentum=config.bn_momentum, bn_eps=config.bn_eps)
    dspec, dparams = nets.build_discriminator(
        config.resolution, 3, 3, config.disc_base_filters, config.disc_depth,
        seed=config.seed + 1, bn_momentum=config.bn_momentum, bn_eps=config.bn_eps)
    if specs_only:
        return gspec, dspec
    return gspec, dspec, gparams, dparams


def _roles(pair: ImagePair, direction: str) -> tuple[np.ndarray, np.ndarray]:
    if direction == "visual_to_tactile":
        return pair.visual, pair.tactile
    return pair.tactile, pair.visual


def _prepare(dataset: list[ImagePair], config: TrainingConfig) -> tuple[np.ndarray, np.ndarray]:
    if not dataset:
        raise ValueError("training dataset is empty")
    size = config.resolution + config.jitter_margin
    conds, targets = [], []
    for pair in dataset:
        for img in _roles(pair, config.direction):
            h, w = img.shape[:2]
            if h != w or h < config.resolution:
                raise ValueError(
                    f"pair {pair.source_id}: image {w}x{h} cannot feed resolution {config.resolution} "
                    "(needs a square image at least that large)")
        cond, target = _roles(pair, config.direction)
        conds.append(resize(cond, size))
        targets.append(resize(target, size))
    return np.stack(conds), np.stack(targets)


def _batch(conds, targets, config: TrainingConfig, rng: np.random.Generator):
    idx = rng.integers(0, len(conds), size=config.batch_size)
    offsets = rng.integers(0, config.jitter_margin + 1, size=(config.batch_size, 2))
    r = config.resolution
    c = np.stack([crop_at(conds[i], r, dy, dx) for i, (dy, dx) in zip(idx, offsets)])
    t = np.stack([crop_at(targets[i], r, dy, dx) for i, (dy, dx) in zip(idx, offsets)])
    return Tensor(normalize(c)), Tensor(normalize(t))


def _rng_bytes(rng: np.random.Generator) -> bytes:
    return json.dumps(rng.bit_generator.state, sort_keys=True).encode("utf-8")


def _rng_from_bytes(blob: bytes) -> np.random.Generator:
    state = json.loads(blob.decode("utf-8"))
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def train(config: TrainingConfig, dataset: list[ImagePair], output_dir=None,
          resume_from: Checkpoint | None = None,
          progress: Callable[[LossRow], None] | None = None) -> TrainResult:
    """Run the alternating D/G loop up to ``config.iterations``.

    With ``resume_from`` the networks, optimizer caches, RNG stream and
    iteration counter continue from the checkpoint.
    """
    config.validate()
    conds, targets = _prepare(dataset, config)
    gspec, dspec, gparams, dparams = build_networks(config)
    gopt, dopt = OptimizerState.for_params(gparams), OptimizerState.for_params(dparams)
    rng = np.random.default_rng(config.seed)
    start = 0
    if resume_from is not None:
        _check_resumable(resume_from.config, config)
        gparams, dparams = resume_from.generator.copy(), resume_from.discriminator.copy()
        gopt = OptimizerState({k: v.copy() for k, v in resume_from.gen_opt.caches.items()}, resume_from.gen_opt.step)
        dopt = OptimizerState({k: v.copy() for k, v in resume_from.disc_opt.caches.items()}, resume_from.disc_opt.step)
        rng = _rng_from_bytes(resume_from.rng_state)
        start = resume_from.iteration
    out_dir = Path(output_dir) if output_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    lam = config.l1_weight
    lr, rho, eps = config.learning_rate, config.rmsprop_decay, config.rmsprop_epsilon
    rows: list[LossRow] = []
    tape = tc.get_tape()
    tape.clear()

    def snapshot(it: int) -> Checkpoint:
        return Checkpoint(config, gparams, dparams, gopt, dopt, _rng_bytes(rng), it)

    for it in range(start + 1, config.iterations + 1):
        cond, target = _batch(conds, targets, config, rng)

        with tc.no_grad():
            fake = nets.forward(gspec, gparams, cond, "train", update_stats=False)
        dparams.zero_grad()
        loss_d = discriminator_loss(nets.discriminate(dspec, dparams, cond, target),
                                    nets.discriminate(dspec, dparams, cond, fake))
        tc.backward(loss_d)
        rmsprop_step(dparams, dopt, lr, rho, eps)

        if config.freeze_generator:
            with tc.no_grad():
                loss_g = generator_loss(nets.discriminate(dspec, dparams, cond, fake, update_stats=False),
                                        fake, target, lam)
                l1 = tc.l1_loss(fake, target)
        else:
            gparams.zero_grad()
            fake = nets.forward(gspec, gparams, cond, "train")
            loss_g = generator_loss(nets.discriminate(dspec, dparams, cond, fake), fake, target, lam)
            tc.backward(loss_g)
            rmsprop_step(gparams, gopt, lr, rho, eps)
            with tc.no_grad():
                l1 = tc.l1_loss(fake, target)

        row = LossRow(it, loss_d.item(), loss_g.item(), l1.item())
        if not all(math.isfinite(v) for v in (row.loss_d, row.loss_g, row.loss_l1)):
            raise NumericalError(it, f"non-finite loss (loss_d={row.loss_d}, loss_g={row.loss_g})")
        rows.append(row)
        if progress is not None:
            progress(row)
        if out_dir is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
            save_checkpoint(snapshot(it), out_dir / f"ckpt_{it:07d}.xmgc")

    final = snapshot(max(start, config.iterations))
    if out_dir is not None:
        save_checkpoint(final, out_dir / "final.xmgc")
        write_loss_log(rows, out_dir / "loss_log.csv")
    return TrainResult(final, rows)


def _check_resumable(saved: TrainingConfig, current: TrainingConfig) -> None:
    a, b = saved.to_dict(), current.to_dict()
    for key in ("iterations", "checkpoint_every"):
        a.pop(key), b.pop(key)
    if a != b:
        diff = sorted(k for k in a if a[k] != b[k])
        raise ValueError(f"cannot resume: config differs in {', '.join(diff)}")


def format_loss_log(rows: Iterable[LossRow]) -> str:
    lines = [LOSS_LOG_HEADER]
    lines += [f"{r.iteration},{r.loss_d!r},{r.loss_g!r},{r.loss_l1!r}" for r in rows]
    return "\n".join(lines) + "\n"


def write_loss_log(rows: Iterable[LossRow], path) -> None:
    Path(path).write_bytes(format_loss_log(rows).encode("utf-8"))


def generate(checkpoint: Checkpoint, inputs, batch_size: int = 16) -> list[np.ndarray]:
    """Translate uint8 HxWx3 images with the checkpoint's generator (infer mode)."""
    gspec = checkpoint.generator_spec()
    res = checkpoint.config.resolution
    images = [np.asarray(img) for img in inputs]
    for k, img in enumerate(images):
        if img.shape != (res, res, 3):
            raise ValueError(f"input {k} has shape {img.shape}; checkpoint expects ({res}, {res}, 3)")
    outputs: list[np.ndarray] = []
    with tc.no_grad():
        for i in range(0, len(images), batch_size):
            x = Tensor(normalize(np.stack(images[i:i + batch_size])))
            y = nets.forward(gspec, checkpoint.generator, x, "infer")
            outputs.extend(denormalize(y.data))
    return outputs


# --- checkpoint file ------------------------------------------------------------

def _tensor_records(params_by_prefix: list[tuple[str, dict[str, np.ndarray]]]) -> list[tuple[str, np.ndarray]]:
    recs = []
    for prefix, arrays in params_by_prefix:
        for name, arr in arrays.items():
            recs.append((f"{prefix}/{name}", arr))
    return recs


def _write_records(buf: io.BytesIO, records: list[tuple[str, np.ndarray]]) -> None:
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", 0, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, ck.iteration))
    blob = json.dumps({"training": ck.config.to_dict(),
                       "optimizer_steps": {"generator": ck.gen_opt.step, "discriminator": ck.disc_opt.step}},
                      sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    params = []
    for prefix, ps in (("generator", ck.generator), ("discriminator", ck.discriminator)):
        params.append((prefix, {k: t.data for k, t in ps}))
        params.append((prefix, dict(ps.buffers)))
    _write_records(buf, _tensor_records(params))
    _write_records(buf, _tensor_records([("generator", ck.gen_opt.caches), ("discriminator", ck.disc_opt.caches)]))
    buf.write(struct.pack("<I", len(ck.rng_state)))
    buf.write(ck.rng_state)
    return buf.getvalue()


def save_checkpoint(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def records(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<I")
            name = self.take(n).decode("utf-8")
            dtype, rank = self.unpack("<BI")
            if dtype != 0:
                raise CheckpointError(f"tensor {name}: unsupported dtype code {dtype}")
            dims = self.unpack(f"<{rank}I") if rank else ()
            size = int(np.prod(dims)) if dims else 1
            out[name] = np.frombuffer(self.take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        return out


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError("bad magic: not an XMGC checkpoint")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    (iteration,) = r.unpack("<Q")
    (blob_len,) = r.unpack("<I")
    meta = json.loads(r.take(blob_len).decode("utf-8"))
    config = TrainingConfig.from_dict(meta["training"])
    tensors = r.records()
    caches = r.records()
    (rng_len,) = r.unpack("<I")
    rng_state = r.take(rng_len)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint payload")

    _, _, gparams, dparams = build_networks(config)
    steps = meta.get("optimizer_steps", {})
    opts = {}
    for prefix, ps in (("generator", gparams), ("discriminator", dparams)):
        for name, t in ps:
            key = f"{prefix}/{name}"
            if key not in tensors or tensors[key].shape != t.shape:
                raise CheckpointError(f"checkpoint is missing or misshapes tensor {key}")
            t.data = tensors[key].copy()
        for name, b in ps.buffers.items():
            key = f"{prefix}/{name}"
            if key not in tensors or tensors[key].shape != b.shape:
                raise CheckpointError(f"checkpoint is missing or misshapes buffer {key}")
            ps.buffers[name] = tensors[key].copy()
        opt = OptimizerState(step=int(steps.get(prefix, 0)))
        for name, _ in ps:
            key = f"{prefix}/{name}"
            if key not in caches:
                raise CheckpointError(f"checkpoint is missing optimizer cache {key}")
            opt.caches[name] = caches[key].copy()
        opts[prefix] = opt
    return Checkpoint(config, gparams, dparams, opts["generator"], opts["discriminator"], rng_state, iteration)


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
