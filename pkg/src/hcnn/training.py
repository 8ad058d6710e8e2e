"""Deeply supervised BCE objective, momentum SGD and the training loop."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .exceptions import ShapeError
from .network import N_SCALES, Network, SideOutputs
from .tensor import sigmoid_map

logger = logging.getLogger(__name__)

DEFAULT_LR = 1e-5
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 0.0005
DEFAULT_EPOCHS = 20


def pixel_bce(logit, label):
    """Binary cross-entropy of a logit against a 0/1 label.

    Evaluated as ``max(f, 0) - f*y + log1p(exp(-|f|))`` so large logits
    neither overflow nor lose the loss to ``log(0)``.
    """
    f = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    return np.maximum(f, 0.0) - f * y + np.log1p(np.exp(-np.abs(f)))


def _check_maps(outputs: SideOutputs, gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt)
    for m in outputs.maps():
        if m.shape != gt.shape:
            raise ShapeError(f"logit map shape {m.shape} != mask shape {gt.shape}")
    if not np.isin(gt, (0, 1)).all():
        raise ValueError("ground-truth mask must be strictly binary")
    return gt.astype(np.float64)


def image_loss(outputs: SideOutputs, gt: np.ndarray) -> float:
    """Unnormalised sum of pixel BCE over the fused map and all five side maps.

    For a batch the per-image losses are summed as well.
    """
    y = _check_maps(outputs, gt)
    return float(sum(pixel_bce(m, y).sum() for m in outputs.maps()))


def image_loss_grad(outputs: SideOutputs, gt: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
    """Gradient of :func:`image_loss` w.r.t. each side map and the fused map."""
    y = _check_maps(outputs, gt)
    side = [sigmoid_map(m) - y for m in outputs.side]
    return side, sigmoid_map(outputs.fused) - y


# -- parameters as flat name -> array maps -----------------------------------


def flat_params(net: Network) -> Dict[str, np.ndarray]:
    return dict(net.named_arrays())


def flat_grads(grads: Dict[str, Tuple[np.ndarray, np.ndarray]]) -> Dict[str, np.ndarray]:
    out = {}
    for name, (gw, gb) in grads.items():
        out[f"{name}.weight"] = gw
        out[f"{name}.bias"] = gb
    return out


def set_flat_params(net: Network, values: Dict[str, np.ndarray]) -> None:
    for name, p in net.params.items():
        p.weight = np.asarray(values[f"{name}.weight"], dtype=net.dtype)
        p.bias = np.asarray(values[f"{name}.bias"], dtype=net.dtype)


def loss_and_grads(net: Network, image: np.ndarray, mask: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Forward, loss and backward for one batch; gradients keyed like :func:`flat_params`."""
    outputs, cache = net.forward(image)
    loss = image_loss(outputs, mask)
    g_side, g_fused = image_loss_grad(outputs, mask)
    return loss, flat_grads(net.backward(cache, g_side, g_fused))


# -- optimiser ---------------------------------------------------------------


@dataclass
class OptimizerState:
    learning_rate: float = DEFAULT_LR
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             state: OptimizerState) -> Dict[str, np.ndarray]:
    """One momentum step with L2 weight decay folded into the gradient.

    ``v <- momentum * v + (g + wd * w)``; ``w <- w - lr * v``.  Returns new
    parameter arrays in their original dtypes and updates ``state.velocity``.
    """
    updated = {}
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {w.shape}")
        w64 = w.astype(np.float64)
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(w64)
        v = state.momentum * v + (g + state.weight_decay * w64)
        state.velocity[name] = v
        updated[name] = (w64 - state.learning_rate * v).astype(w.dtype)
    return updated


# -- training loop -----------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float

    def line(self) -> str:
        return f"step {self.step} epoch {self.epoch} loss {self.loss!r}"

    def json(self) -> str:
        return json.dumps({"step": self.step, "epoch": self.epoch, "loss": self.loss})


class TrainingLog:
    """Append-only text log with a JSON-lines sidecar next to it."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.sidecar = self.path.with_suffix(".jsonl")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")
        self.sidecar.write_text("")

    def header(self, **settings) -> None:
        with self.path.open("a") as fh:
            for key, value in settings.items():
                fh.write(f"# {key}={value}\n")

    def append(self, record: StepRecord) -> None:
        with self.path.open("a") as fh:
            fh.write(record.line() + "\n")
        with self.sidecar.open("a") as fh:
            fh.write(record.json() + "\n")


def _as_pair(sample) -> Tuple[np.ndarray, np.ndarray]:
    if hasattr(sample, "image"):
        return sample.image, sample.mask
    return sample[0], sample[1]


def validate_dataset(net: Network, dataset: Sequence) -> None:
    div = 2 ** N_SCALES
    for i, sample in enumerate(dataset):
        image, mask = _as_pair(sample)
        image = np.asarray(image)
        mask = np.asarray(mask)
        if image.ndim != 4 or image.shape[0] != 1 or image.shape[1] != net.config.input_channels:
            raise ShapeError(f"sample {i}: image shape {image.shape} is not (1, {net.config.input_channels}, H, W)")
        if image.shape[2] % div or image.shape[3] % div:
            raise ShapeError(f"sample {i}: height and width must be divisible by {div}, got {image.shape[2:]}")
        if mask.shape != (1, 1) + image.shape[2:]:
            raise ShapeError(f"sample {i}: mask shape {mask.shape} does not match image {image.shape}")


def train(net: Network, dataset: Sequence, epochs: int = DEFAULT_EPOCHS, batch_size: int = 1,
          rng: np.random.Generator | int | None = None, checkpoint_dir: str | Path | None = None,
          state: OptimizerState | None = None, log: TrainingLog | None = None,
          seed: int | None = None) -> List[StepRecord]:
    """Train ``net`` in place and return the per-step loss records.

    Each epoch visits the samples in a fresh ``rng`` permutation; batches are
    stacked along the batch axis and their losses summed.  When
    ``checkpoint_dir`` is given a checkpoint is written after every epoch.
    """
    from .checkpoint import save_checkpoint

    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    validate_dataset(net, dataset)
    rng = np.random.default_rng(rng)
    state = state or OptimizerState()
    records: List[StepRecord] = []
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), batch_size):
            batch = [_as_pair(dataset[i]) for i in order[start:start + batch_size]]
            image = np.concatenate([b[0] for b in batch], axis=0)
            mask = np.concatenate([b[1] for b in batch], axis=0)
            loss, grads = loss_and_grads(net, image, mask)
            set_flat_params(net, sgd_step(flat_params(net), grads, state))
            step += 1
            record = StepRecord(step, epoch, loss)
            records.append(record)
            if log is not None:
                log.append(record)
            logger.debug(record.line())
        if checkpoint_dir is not None:
            save_checkpoint(net, Path(checkpoint_dir) / f"epoch_{epoch:03d}.hcnn",
                            {"epoch": epoch, "step": step, "seed": seed})
    return records


def dataset_loss(net: Network, dataset: Iterable) -> float:
    """Sum of :func:`image_loss` over every sample."""
    total = 0.0
    for sample in dataset:
        image, mask = _as_pair(sample)
        outputs, _ = net.forward(image)
        total += image_loss(outputs, mask)
    return total


# -- gradient verification ---------------------------------------------------


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    """``|a - n| / max(|a|, |n|)``, or the absolute error when both are below ``floor``."""
    diff = abs(analytic - numeric)
    scale = max(abs(analytic), abs(numeric))
    return diff if scale < floor else diff / scale


@dataclass
class GradCheckReport:
    max_error: float
    n_checked: int
    n_skipped: int
    errors: List[Tuple[str, tuple, float, float, float]]  # name, index, analytic, numeric, rel


def _piecewise_pattern(cache) -> List[np.ndarray]:
    """Which linear piece the network is on: ReLU signs and pool argmaxes."""
    parts = [cache.pre_relu[k] > 0 for k in sorted(cache.pre_relu)]
    parts += [cache.pool_indices[k] for k in sorted(cache.pool_indices)]
    parts += [cache.branch_pool_indices[k] for k in sorted(cache.branch_pool_indices)]
    return parts


def _same_piece(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_report(net: Network, sample, parameter_sample_size: int = 200,
                      epsilon: float = 1e-5,
                      rng: np.random.Generator | int | None = None) -> GradCheckReport:
    """Compare backprop against central differences on random scalar parameters.

    Runs on a float64 copy of ``net``.  Parameters are visited in a random
    order; one whose +/- ``epsilon`` perturbation moves a ReLU input across 0
    or changes a pooling argmax is skipped (the loss is not differentiable
    across that interval) and the next one is taken, until
    ``parameter_sample_size`` parameters have been compared.
    """
    rng = np.random.default_rng(rng)
    net = net.astype(np.float64)
    image, mask = _as_pair(sample)
    y = np.asarray(mask, dtype=np.float64)
    outputs, cache = net.forward(image)
    g_side, g_fused = image_loss_grad(outputs, mask)
    grads = flat_grads(net.backward(cache, g_side, g_fused))
    base_pattern = _piecewise_pattern(cache)

    def perturbed(arr, pos, value):
        arr[pos] = value
        out, c = net.forward(image)
        return np.stack([pixel_bce(m, y) for m in out.maps()]), _piecewise_pattern(c)

    arrays = flat_params(net)
    names = list(arrays)
    offsets = np.concatenate([[0], np.cumsum([arrays[n].size for n in names])])
    errors = []
    skipped = 0
    for flat in rng.permutation(int(offsets[-1])):
        if len(errors) >= parameter_sample_size:
            break
        j = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[j]
        arr = arrays[name]
        pos = np.unravel_index(int(flat - offsets[j]), arr.shape)
        orig = arr[pos]
        up, pat_up = perturbed(arr, pos, orig + epsilon)
        down, pat_down = perturbed(arr, pos, orig - epsilon)
        arr[pos] = orig
        if not (_same_piece(base_pattern, pat_up) and _same_piece(base_pattern, pat_down)):
            skipped += 1
            continue
        # differencing per pixel before summing avoids cancellation in the ~1e3 total
        numeric = float((up - down).sum()) / (2 * epsilon)
        analytic = float(grads[name][pos])
        errors.append((name, tuple(int(p) for p in pos), analytic, numeric,
                       relative_error(analytic, numeric)))
    worst = max((e[-1] for e in errors), default=0.0)
    if skipped:
        logger.info("grad_check skipped %d parameters whose perturbation crossed a kink", skipped)
    return GradCheckReport(worst, len(errors), skipped, errors)


def grad_check(net: Network, sample, parameter_sample_size: int = 200, epsilon: float = 1e-5,
               rng: np.random.Generator | int | None = None) -> float:
    """Worst relative error of :func:`grad_check_report`.

    Check at a point where no pre-activation sits exactly on the ReLU kink;
    freshly initialised zero biases put many there, so use
    :func:`jitter_biases` first.
    """
    return grad_check_report(net, sample, parameter_sample_size, epsilon, rng).max_error


def jitter_biases(net: Network, scale: float = 0.1,
                  rng: np.random.Generator | int | None = None) -> Network:
    """Return a copy of ``net`` with every bias drawn from ``N(0, scale**2)``."""
    rng = np.random.default_rng(rng)
    out = net.copy()
    for p in out.params.values():
        p.bias = rng.normal(0.0, scale, p.bias.shape).astype(out.dtype)
    return out
