"""Per-point weight prediction, outlier rejection and training.

The weight network is a small point-feature model: a shared per-point
encoder 3→32→64 (ReLU), a global feature by coordinate-wise max over all
points, and a head on [per-point; global] 128→64→1 with a sigmoid output.
Inputs are coordinates relative to the cloud centroid.

Parameters live in one flat float64 vector (per layer: W (in, out), then
b (out,)), so a single tape Var covers the whole model during training.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import ValidationError

from ..utils.consts import (
    CHECKPOINT_FORMAT_VERSION,
    CHECKPOINT_MAGIC,
    ENCODER_WIDTHS,
    HEAD_WIDTHS,
    SIGMA_FLOOR,
)
from ..utils.errors import Diverged, EmptyCloud, FileIoError, ShapeMismatch, TruncatedFile
from ..utils.schemas import CheckpointHeader, TrainConfig, TrainSummary
from . import autodiff_tools as ad
from .geometry_tools import PointCloud, RigidTransform
from .registration_tools import WgicpProblem, pose_error, unroll_wgicp

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_HEADER_LEN = struct.Struct("<I")


def layer_shapes() -> List[Tuple[int, int]]:
    encoder = list(zip(ENCODER_WIDTHS[:-1], ENCODER_WIDTHS[1:]))
    head = list(zip(HEAD_WIDTHS[:-1], HEAD_WIDTHS[1:]))
    return encoder + head


def _param_slices() -> List[Tuple[slice, Tuple[int, int], slice, int]]:
    """(weight slice, weight shape, bias slice, bias size) per layer."""
    out = []
    offset = 0
    for fan_in, fan_out in layer_shapes():
        w = slice(offset, offset + fan_in * fan_out)
        offset = w.stop
        b = slice(offset, offset + fan_out)
        offset = b.stop
        out.append((w, (fan_in, fan_out), b, fan_out))
    return out


N_PARAMS = _param_slices()[-1][2].stop


# =============================================================================
# MODEL
# =============================================================================


class WeightModel:
    """Immutable parameter vector plus the seed it was initialized from."""

    __slots__ = ("_params", "seed")

    def __init__(self, params, seed: int = 0) -> None:
        p = np.array(params, dtype=np.float64).reshape(-1)
        if p.shape != (N_PARAMS,):
            raise ShapeMismatch(f"expected {N_PARAMS} parameters, got {p.size}")
        p.flags.writeable = False
        self._params = p
        self.seed = seed

    @classmethod
    def init(cls, seed: int = 0) -> "WeightModel":
        """Glorot-uniform weights in ±√(6/(fan_in+fan_out)), zero biases."""
        rng = np.random.default_rng(seed)
        params = np.zeros(N_PARAMS)
        for w, (fan_in, fan_out), _, _ in _param_slices():
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            params[w] = rng.uniform(-bound, bound, size=fan_in * fan_out)
        return cls(params, seed=seed)

    @property
    def params(self) -> NDArray[np.float64]:
        return self._params

    def with_params(self, params) -> "WeightModel":
        return WeightModel(params, seed=self.seed)

    def __len__(self) -> int:
        return N_PARAMS


def head_output_slices() -> Tuple[slice, slice]:
    """Slices of the last layer's weights and bias in the flat vector."""
    w, _, b, _ = _param_slices()[-1]
    return w, b


def _canonical_order(points: NDArray[np.float64]) -> NDArray[np.intp]:
    """Lexicographic (x, y, z) order; equal points keep their relative order."""
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


def _forward(params, points: NDArray[np.float64]):
    # Canonical point order: outputs are bitwise permutation-equivariant
    layers = _param_slices()
    n = len(points)
    order = _canonical_order(points)
    ordered = points[order]
    x = ordered - ordered.mean(axis=0)

    def dense(h, layer):
        w, shape, b, size = layer
        W = ad.reshape(ad.getitem(params, w), shape)
        bias = ad.reshape(ad.getitem(params, b), (1, size))
        return ad.add(ad.matmul(h, W), bias)

    h = ad.relu(dense(x, layers[0]))
    h = ad.relu(dense(h, layers[1]))
    width = ENCODER_WIDTHS[-1]
    pooled = ad.reshape(ad.amax(h, axis=0), (1, width))
    features = ad.concat([h, ad.broadcast_to(pooled, (n, width))], axis=1)
    z = ad.relu(dense(features, layers[2]))
    out = ad.reshape(ad.sigmoid(dense(z, layers[3])), (n,))
    restore = np.empty(n, dtype=np.intp)
    restore[order] = np.arange(n)
    return ad.take(out, restore)


def predict_weights(model: Union[WeightModel, "ad.Var"], cloud: PointCloud):
    """One weight in (0, 1) per point. Pass a tape Var of parameters to record."""
    if cloud.is_empty:
        raise EmptyCloud("cannot predict weights for an empty cloud")
    params = model.params if isinstance(model, WeightModel) else model
    return _forward(params, cloud.points)


# =============================================================================
# REJECTION
# =============================================================================


def soft_reject(weights):
    """sigmoid((w − μ)/σ) with per-cloud mean μ and std σ, σ floored at 1e-6."""
    mu = ad.mean(weights)
    centered = ad.sub(weights, mu)
    var = ad.mean(ad.mul(centered, centered))
    sigma = ad.sqrt(ad.maximum(var, SIGMA_FLOOR * SIGMA_FLOOR))
    return ad.sigmoid(ad.div(centered, sigma))


def survivor_count(n: int, rejection_ratio: float) -> int:
    if not 0.0 <= rejection_ratio < 1.0:
        raise ValueError(f"rejection ratio must be in [0, 1), got {rejection_ratio}")
    if n == 0:
        return 0
    return max(1, math.ceil((1.0 - rejection_ratio) * n - 1e-9))


def survivor_indices(weights, rejection_ratio: float) -> NDArray[np.intp]:
    """Indices of the highest-weight points (ties → lower index), in original order."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    keep = survivor_count(len(w), rejection_ratio)
    order = np.lexsort((np.arange(len(w)), -w))
    return np.sort(order[:keep])


def hard_reject(cloud: PointCloud, weights, rejection_ratio: float) -> PointCloud:
    if rejection_ratio == 0.0:
        return cloud
    return cloud.select(survivor_indices(weights, rejection_ratio))


def pose_loss(est: RigidTransform, gt: RigidTransform) -> float:
    """Frobenius norm of the 4×4 matrix difference."""
    return float(pose_error(est.rotation, est.translation, gt))


# =============================================================================
# TRAINING
# =============================================================================


@dataclass(frozen=True)
class TrainingPair:
    """Consecutive preprocessed clouds; `gt` maps `current` into `previous`'s frame."""

    previous: PointCloud
    current: PointCloud
    gt: RigidTransform


class Adam:
    """Adam on a flat parameter vector."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: NDArray[np.float64], grad: NDArray[np.float64]) -> NDArray[np.float64]:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _subsample(cloud: PointCloud, max_points: Optional[int], rng: np.random.Generator) -> PointCloud:
    if max_points is None or len(cloud) <= max_points:
        return cloud
    return cloud.select(np.sort(rng.choice(len(cloud), size=max_points, replace=False)))


def pair_loss(params, pair: TrainingPair, config: TrainConfig):
    ws = soft_reject(predict_weights(params, pair.current))
    wt = soft_reject(predict_weights(params, pair.previous))
    problem = WgicpProblem(
        source=pair.current,
        target=pair.previous,
        k_d=config.k_d,
        knn_temperature=config.knn_temperature,
        lm=config.lm,
    )
    solution = unroll_wgicp(problem, ws, wt)
    return pose_error(solution.rotation, solution.translation, pair.gt)


def pair_loss_and_gradient(
    model: WeightModel, pair: TrainingPair, config: TrainConfig, tape: Optional[ad.Tape] = None
) -> Tuple[float, NDArray[np.float64]]:
    """Pose loss of one pair and its gradient with respect to every model parameter."""
    tape = tape or ad.Tape()
    theta = tape.variable(model.params)
    loss = pair_loss(theta, pair, config)
    return float(ad.value(loss)), tape.backward(loss)[theta]


def evaluate_loss(model: WeightModel, pairs: Sequence[TrainingPair], config: TrainConfig) -> float:
    """Mean pose loss without recording a tape."""
    return float(np.mean([float(pair_loss(model.params, pair, config)) for pair in pairs]))


def train(
    model: WeightModel, dataset: Sequence[TrainingPair], config: TrainConfig
) -> Tuple[WeightModel, TrainSummary]:
    """
    Adam on the mean pose loss of each batch of pairs.

    Every pair is subsampled once (seeded) to at most `max_points` per
    cloud. The loss history holds, per epoch, the mean loss of its steps
    evaluated before each update; `final_loss` is evaluated after the
    last update.
    """
    rng = np.random.default_rng(config.seed)
    pairs = [
        TrainingPair(
            previous=_subsample(p.previous, config.max_points, rng),
            current=_subsample(p.current, config.max_points, rng),
            gt=p.gt,
        )
        for p in dataset
    ]
    optimizer = Adam(N_PARAMS, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    params = np.array(model.params)
    history: List[float] = []
    step = 0
    for epoch in range(config.epochs):
        losses = []
        for start in range(0, len(pairs), config.batch):
            batch = pairs[start:start + config.batch]
            grad = np.zeros(N_PARAMS)
            batch_loss = 0.0
            current = model.with_params(params)
            for pair in batch:
                try:
                    loss, g = pair_loss_and_gradient(current, pair, config)
                except Diverged as e:
                    raise Diverged(f"training step {step}: {e.message}", step=step) from e
                if not (math.isfinite(loss) and np.all(np.isfinite(g))):
                    raise Diverged(f"training step {step}: non-finite loss or gradient", step=step)
                batch_loss += loss / len(batch)
                grad += g / len(batch)
            params = optimizer.step(params, grad)
            losses.append(batch_loss)
            step += 1
        history.append(float(np.mean(losses)) if losses else 0.0)
        logger.info("epoch=%d loss=%.6f steps=%d", epoch, history[-1], step)

    trained = model.with_params(params)
    final_loss = evaluate_loss(trained, pairs, config) if pairs else 0.0
    initial_loss = history[0] if history else final_loss
    summary = TrainSummary(
        epochs=config.epochs, initial_loss=initial_loss, final_loss=final_loss, loss_history=history
    )
    return trained, summary


# =============================================================================
# CHECKPOINTS
# =============================================================================


def save_checkpoint(model: WeightModel, path: PathLike) -> None:
    """Magic, uint32 header length, JSON header, then `<f8` parameters."""
    header = CheckpointHeader(
        format_version=CHECKPOINT_FORMAT_VERSION,
        layer_shapes=[list(s) for s in layer_shapes()],
        seed=model.seed,
        n_params=N_PARAMS,
    )
    blob = header.model_dump_json().encode("utf-8")
    data = CHECKPOINT_MAGIC + _HEADER_LEN.pack(len(blob)) + blob + model.params.astype("<f8").tobytes()
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise FileIoError(str(path), e.strerror or str(e)) from e


def load_checkpoint(path: PathLike) -> WeightModel:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FileIoError(str(path), e.strerror or str(e)) from e

    if not data.startswith(CHECKPOINT_MAGIC):
        raise FileIoError(str(path), "not a weight model checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    if len(data) < offset + _HEADER_LEN.size:
        raise TruncatedFile(str(path), len(data), _HEADER_LEN.size)
    (header_len,) = _HEADER_LEN.unpack_from(data, offset)
    offset += _HEADER_LEN.size
    if len(data) < offset + header_len:
        raise TruncatedFile(str(path), len(data), header_len)
    try:
        header = CheckpointHeader.model_validate(json.loads(data[offset:offset + header_len]))
    except (ValueError, ValidationError) as e:
        raise FileIoError(str(path), f"bad checkpoint header: {e}") from e
    offset += header_len

    if header.format_version != CHECKPOINT_FORMAT_VERSION:
        raise ShapeMismatch(
            f"{path}: checkpoint format {header.format_version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    expected = [list(s) for s in layer_shapes()]
    if header.layer_shapes != expected or header.n_params != N_PARAMS:
        raise ShapeMismatch(
            f"{path}: layer shapes {header.layer_shapes} do not match {expected}",
            hint="The checkpoint was written by a different network layout",
        )
    body = data[offset:]
    if len(body) > 8 * N_PARAMS:
        raise ShapeMismatch(f"{path}: {len(body) // 8} parameters stored, expected {N_PARAMS}")
    if len(body) < 8 * N_PARAMS:
        raise TruncatedFile(str(path), offset + len(body) - len(body) % 8, 8)
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    logger.debug("loaded checkpoint path=%s seed=%d", path, header.seed)
    return WeightModel(params, seed=header.seed)
