"""Colour-SSIM scoring and the real vs real+generated classification protocol."""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nets
from . import tensor_core as tc
from .data_pipeline import IMAGE_SUFFIXES, LabeledImage, load_image, mix_real_generated, normalize
from .tensor_core import Tensor

log = logging.getLogger(__name__)

CHANNELS = ("r", "g", "b")
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5


@dataclass(frozen=True)
class SsimConstants:
    k1: float = 0.01
    k2: float = 0.03
    L: float = 255.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.L) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.L) ** 2


@dataclass
class SsimReport:
    channels: tuple[float, float, float]
    mode: str

    @property
    def mean(self) -> float:
        r, g, b = self.channels
        return (r + g + b) / 3.0


@dataclass
class GroupReport:
    rows: list[tuple[str, SsimReport]]
    unmatched: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean([rep.mean for _, rep in self.rows]))

    def channel_means(self) -> tuple[float, float, float]:
        arr = np.array([rep.channels for _, rep in self.rows])
        return tuple(float(v) for v in arr.mean(axis=0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["filename", "ssim_r", "ssim_g", "ssim_b", "ssim_mean"])
        for name, rep in self.rows:
            w.writerow([name, *(repr(float(c)) for c in rep.channels), repr(rep.mean)])
        return buf.getvalue()


def _ssim_formula(mx, my, vx, vy, cxy, c1: float, c2: float):
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def _global_channel(x: np.ndarray, y: np.ndarray, c1: float, c2: float) -> float:
    n = x.size
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx = (dx * dx).sum() / (n - 1)
    vy = (dy * dy).sum() / (n - 1)
    cxy = (dx * dy).sum() / (n - 1)
    return float(_ssim_formula(mx, my, vx, vy, cxy, c1, c2))


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def _filter_valid(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    k = w.size
    a = np.lib.stride_tricks.sliding_window_view(a, k, axis=0) @ w
    return np.lib.stride_tricks.sliding_window_view(a, k, axis=1) @ w


def _windowed_channel(x: np.ndarray, y: np.ndarray, c1: float, c2: float) -> float:
    w = gaussian_window()
    n = w.size ** 2
    norm = n / (n - 1)  # sample-covariance correction
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    vx = norm * (_filter_valid(x * x, w) - mx * mx)
    vy = norm * (_filter_valid(y * y, w) - my * my)
    cxy = norm * (_filter_valid(x * y, w) - mx * my)
    return float(_ssim_formula(mx, my, vx, vy, cxy, c1, c2).mean())


def colour_ssim(x: np.ndarray, y: np.ndarray, constants: SsimConstants | None = None,
                mode: str = "global") -> SsimReport:
    """Per-channel SSIM of two HxWx3 images, averaged over R, G, B.

    ``global`` uses whole-channel statistics; ``windowed`` averages over
    valid 11x11 Gaussian (sigma 1.5) windows. Both use n-1 covariances.
    ``L`` defaults to 255 for uint8 input and 1.0 otherwise.
    """
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"expected HxWx3 images, got {x.shape}")
    if constants is None:
        constants = SsimConstants(L=255.0 if x.dtype == np.uint8 else 1.0)
    c1, c2 = constants.c1, constants.c2
    xf, yf = x.astype(np.float64), y.astype(np.float64)
    if mode == "global":
        if x.shape[0] * x.shape[1] < 2:
            raise ValueError("global mode needs at least two pixels per channel")
        fn = _global_channel
    elif mode == "windowed":
        if min(x.shape[:2]) < WINDOW_SIZE:
            raise ValueError(f"windowed mode needs images of at least {WINDOW_SIZE}x{WINDOW_SIZE}")
        fn = _windowed_channel
    else:
        raise ValueError(f"unknown mode {mode!r}")
    scores = tuple(fn(xf[..., i], yf[..., i], c1, c2) for i in range(3))
    return SsimReport(scores, mode)


def _image_files(directory: Path) -> dict[str, Path]:
    return {p.name: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def evaluate_experiment_group(generated_dir, real_dir, constants: SsimConstants | None = None,
                              mode: str = "global", csv_path=None) -> GroupReport:
    """Score every generated image against the real image of the same filename."""
    gen, real = _image_files(Path(generated_dir)), _image_files(Path(real_dir))
    matched = sorted(set(gen) & set(real))
    unmatched = sorted(set(gen) ^ set(real))
    if unmatched:
        warnings.warn(f"{len(unmatched)} unmatched file(s) excluded: {', '.join(unmatched)}")
    if not matched:
        raise ValueError(f"no matching filenames between {generated_dir} and {real_dir}")
    rows = [(name, colour_ssim(load_image(gen[name]), load_image(real[name]), constants, mode))
            for name in matched]
    report = GroupReport(rows, unmatched)
    if csv_path is not None:
        Path(csv_path).write_bytes(report.to_csv().encode("utf-8"))
    return report


def group_table(groups: dict[str, GroupReport], title: str = "Visual-to-Tactile") -> str:
    """Experiment-group averages in a two-column ``group,colour_ssim`` table."""
    lines = [f"{title},Colour-SSIM"]
    lines += [f"{name},{rep.mean:.5f}" for name, rep in groups.items()]
    return "\n".join(lines) + "\n"


# --- classification protocol ------------------------------------------------------

@dataclass
class AccuracyRow:
    iteration: int
    real_acc: float
    realgen_acc: float | None
    modality: str


@dataclass
class AccuracyTable:
    rows: list[AccuracyRow]
    initial: dict[str, tuple[float, float | None]] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "real_acc", "realgen_acc", "modality"])
        for r in self.rows:
            w.writerow([r.iteration, f"{r.real_acc:.4f}",
                        "" if r.realgen_acc is None else f"{r.realgen_acc:.4f}", r.modality])
        return buf.getvalue()

    def modalities(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.modality not in seen:
                seen.append(r.modality)
        return seen

    def wide(self) -> list[list[float | int | None]]:
        """One row per iteration: [iteration, real, real+gen] per modality, left to right."""
        mods = self.modalities()
        by_key = {(r.iteration, r.modality): r for r in self.rows}
        iterations = sorted({r.iteration for r in self.rows})
        out = []
        for it in iterations:
            row: list[float | int | None] = [it]
            for m in mods:
                r = by_key.get((it, m))
                row += [r.real_acc if r else None, r.realgen_acc if r else None]
            out.append(row)
        return out

    def __add__(self, other: "AccuracyTable") -> "AccuracyTable":
        return AccuracyTable(self.rows + other.rows, {**self.initial, **other.initial})


def format_wide(table: AccuracyTable) -> str:
    """Iterations down, real / real+generated per modality across; row 0 is the
    untrained baseline. A modality without generated data has no real+gen column."""
    mods = table.modalities()
    has_gen = {m: any(r.realgen_acc is not None for r in table.rows if r.modality == m) for m in mods}
    header = ["iteration"]
    for m in mods:
        header += [f"{m}_real"] + ([f"{m}_realgen"] if has_gen[m] else [])

    def cell(v):
        return "" if v is None else f"{v:.4f}"

    rows = []
    if all(m in table.initial for m in mods):
        rows.append([0] + [v for m in mods for v in table.initial[m]])
    rows += table.wide()
    lines = [",".join(header)]
    for row in rows:
        cells = [str(row[0])]
        for k, m in enumerate(mods):
            cells.append(cell(row[1 + 2 * k]))
            if has_gen[m]:
                cells.append(cell(row[2 + 2 * k]))
        lines.append(",".join(cells))
    return "\n".join(lines)


def _stack(samples: list[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    return normalize(np.stack([s.image for s in samples])), np.array([s.class_id for s in samples])


def accuracy(spec, params, samples: list[LabeledImage], batch_size: int = 64) -> float:
    x, y = _stack(samples)
    correct = 0
    with tc.no_grad():
        for i in range(0, len(y), batch_size):
            logits = nets.forward(spec, params, Tensor(x[i:i + batch_size]), "infer")
            correct += int((logits.data.argmax(axis=1) == y[i:i + batch_size]).sum())
    return correct / len(y)


def train_classifier(train_set: list[LabeledImage], test_set: list[LabeledImage], num_classes: int,
                     epochs: int, seed: int, batch_size: int = 8, learning_rate: float = 1e-3,
                     decay: float = 0.9, eps: float = 1e-8) -> tuple[float, list[float]]:
    """Train the from-scratch classifier; returns (untrained accuracy, per-epoch test accuracies).

    After each epoch the batchnorm running statistics are recomputed over the
    whole training set with the weights frozen, then test accuracy is taken in
    inference mode.
    """
    from .training import OptimizerState, rmsprop_step

    resolution = train_set[0].image.shape[0]
    spec, params = nets.build_classifier(resolution, num_classes, seed=seed)
    opt = OptimizerState.for_params(params)
    rng = np.random.default_rng(seed)
    x, y = _stack(train_set)
    initial = accuracy(spec, params, test_set)
    history = []
    tape = tc.get_tape()
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            if len(idx) < 2:
                continue
            tape.clear()
            params.zero_grad()
            logits = nets.forward(spec, params, Tensor(x[idx]), "train")
            tc.backward(tc.softmax_cross_entropy(logits, y[idx]))
            rmsprop_step(params, opt, learning_rate, decay, eps)
        # running statistics from batches this small are too noisy to evaluate with
        nets.recalibrate_batchnorm(spec, params, x)
        history.append(accuracy(spec, params, test_set))
    return initial, history


def classification_protocol(real_train: list[LabeledImage], test: list[LabeledImage], num_classes: int,
                            epochs: int, seed: int = 0, generated: list[LabeledImage] | None = None,
                            modality: str = "visual", require_disjoint: bool = True,
                            **train_kwargs) -> AccuracyTable:
    """Train once on real data and, if ``generated`` is given, once on a 50/50
    real/generated mix with the same seed; test accuracy is recorded per epoch.

    ``require_disjoint=False`` allows the memorization regime where the test
    set is the training set.
    """
    train_classes = {s.class_id for s in real_train}
    missing = sorted({s.class_id for s in test} - train_classes)
    if missing:
        raise ValueError(f"classes {missing} appear in the test set but not in training")
    if any(not 0 <= c < num_classes for c in train_classes):
        raise ValueError(f"class ids must lie in [0, {num_classes})")
    if require_disjoint:
        overlap = {s.source_id for s in real_train} & {s.source_id for s in test}
        if overlap:
            raise ValueError(f"test set shares source ids with training: {sorted(overlap)[:5]}")
    init_real, real_hist = train_classifier(real_train, test, num_classes, epochs, seed, **train_kwargs)
    init_mix, mix_hist = None, [None] * epochs
    if generated is not None:
        mixed = mix_real_generated(real_train, generated, 0.5, seed)
        init_mix, mix_hist = train_classifier(mixed, test, num_classes, epochs, seed, **train_kwargs)
    rows = [AccuracyRow(i + 1, real_hist[i], mix_hist[i], modality) for i in range(epochs)]
    return AccuracyTable(rows, {modality: (init_real, init_mix)})
