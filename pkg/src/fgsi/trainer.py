"""Adam optimisation with polynomial learning-rate decay, and checkpoints.

Training is a pure function of (config, data, seed): epoch ``e`` shuffles
bags with ``default_rng([seed, 2, e])`` and dropout masks come from
``(seed, epoch, bag index)``, so a run resumed from a checkpoint replays the
uninterrupted run exactly.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .corpus import Bag, RelationInventory, Vocabulary
from .model import FGSIConfig, FGSIModel, PreparedBag

logger = logging.getLogger(__name__)

MAGIC = b"FGSI"
FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class NonFiniteGradient(TrainingError):
    pass


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0, beta1, beta2, eps)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    A non-finite gradient rejects the whole step before anything changes.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ad.ShapeError("adam_step", params[name].shape, g.shape)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in grads:
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


@dataclass
class LrSchedule:
    total_steps: int
    lr0: float = 1e-2
    lr_min: float = 1e-6
    power: float = 1.0


def lr_at(step: int, schedule: LrSchedule) -> float:
    """lr_min + (lr0 - lr_min) * (1 - min(step, total) / total) ** power."""
    if step < 0:
        raise ValueError("step must be non-negative")
    total = max(schedule.total_steps, 1)
    frac = 1.0 - min(step, total) / total
    return schedule.lr_min + (schedule.lr0 - schedule.lr_min) * frac ** schedule.power


# ---------------------------------------------------------------- epochs


@dataclass
class EpochReport:
    epoch: int
    steps: int
    mean_loss: float
    grad_norm: float
    gated_fraction: float
    lr_last: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def epoch_order(seed: int, epoch: int, n_bags: int) -> np.ndarray:
    return np.random.default_rng([seed, 2, epoch]).permutation(n_bags)


def batches_per_epoch(n_bags: int, batch_size: int) -> int:
    return -(-n_bags // batch_size)


def schedule_for(config: FGSIConfig, n_bags: int) -> LrSchedule:
    total = config.total_steps or config.epochs * batches_per_epoch(n_bags, config.batch_size)
    return LrSchedule(total, config.lr0, config.lr_min, config.decay_power)


def _locate_bad_bag(model: FGSIModel, prepared, indices, mask) -> int:
    start = 0
    for i, b in zip(indices, prepared):
        rows = b.n_sentences
        sub = None if mask is None else mask[start:start + rows]
        start += rows
        try:
            with ad.no_grad():
                loss, _ = model.loss([b], sub)
            if not np.isfinite(loss.item()):
                return int(i)
        except FloatingPointError:
            return int(i)
    return -1


def train_step(model: FGSIModel, prepared: Sequence[PreparedBag], state: AdamState, schedule: LrSchedule,
               step_in_epoch: int, epoch: int) -> tuple[float, float, float]:
    """Run one batch; returns (loss, gradient norm, fraction of sentences gated out)."""
    c = model.config
    n = len(prepared)
    order = epoch_order(c.seed, epoch, n)
    idx = order[step_in_epoch * c.batch_size:(step_in_epoch + 1) * c.batch_size]
    idx_sorted = np.sort(idx)   # fixed accumulation order within the batch
    batch = [prepared[i] for i in idx_sorted]
    mask = model.training_mask(idx_sorted, batch, epoch)
    decoys = model.draw_decoys(np.array([b.gold for b in batch]), epoch, step_in_epoch)
    store = model.store
    store.zero_grad()
    try:
        with ad.Tape() as tape:
            loss, res = model.loss(batch, mask, decoys=decoys)
    except FloatingPointError as err:
        bad = _locate_bad_bag(model, batch, idx_sorted, mask)
        raise TrainingError(f"epoch {epoch}: non-finite loss at bag {bad}: {err}") from None
    value = loss.item()
    if not np.isfinite(value):
        bad = _locate_bad_bag(model, batch, idx_sorted, mask)
        raise TrainingError(f"epoch {epoch}: non-finite loss at bag {bad}")
    ad.backward(tape, loss, store)
    lr = lr_at(state.t, schedule)
    trainable = {k: g for k, g in store.grads.items() if k not in c.frozen}
    adam_step({k: t.data for k, t in store.items()}, trainable, state, lr)
    gnorm = float(np.sqrt(sum(float((g * g).sum()) for g in store.grads.values())))
    gated = 1.0 - len(res.survivors) / len(res.relevance.data)
    return value, gnorm, gated


def train_epoch(model: FGSIModel, prepared: Sequence[PreparedBag], state: AdamState,
                schedule: LrSchedule, max_steps: int | None = None) -> EpochReport:
    """Train from the current step to the end of its epoch (or ``max_steps`` batches)."""
    if not prepared:
        raise TrainingError("no training bags")
    nb = batches_per_epoch(len(prepared), model.config.batch_size)
    epoch, first = divmod(state.t, nb)
    losses, norms, gated = [], [], []
    lr = lr_at(state.t, schedule)
    for j in range(first, nb):
        if max_steps is not None and len(losses) >= max_steps:
            break
        lr = lr_at(state.t, schedule)
        loss, gn, gf = train_step(model, prepared, state, schedule, j, epoch)
        losses.append(loss)
        norms.append(gn)
        gated.append(gf)
    return EpochReport(epoch, len(losses), float(np.mean(losses)) if losses else float("nan"),
                       float(np.mean(norms)) if norms else 0.0,
                       float(np.mean(gated)) if gated else 0.0, lr)


def fit(model: FGSIModel, bags: Sequence[Bag], state: AdamState | None = None,
        until_step: int | None = None,
        on_epoch: Callable[[EpochReport, FGSIModel], bool | None] | None = None
        ) -> tuple[AdamState, list[EpochReport]]:
    """Train for ``config.epochs`` epochs (or up to global step ``until_step``).

    ``on_epoch`` may return True to stop early.
    """
    c = model.config
    prepared = model.prepare(bags)
    if not prepared:
        raise TrainingError("no training bags")
    if state is None:
        state = AdamState.zeros_like({k: t.data for k, t in model.store.items()},
                                     c.adam_beta1, c.adam_beta2, c.adam_eps)
    schedule = schedule_for(c, len(prepared))
    nb = batches_per_epoch(len(prepared), c.batch_size)
    final = c.epochs * nb if until_step is None else until_step
    reports = []
    while state.t < final:
        rep = train_epoch(model, prepared, state, schedule, max_steps=final - state.t)
        reports.append(rep)
        logger.info("epoch %d loss %.4f |g| %.3f gated %.3f", rep.epoch, rep.mean_loss, rep.grad_norm,
                    rep.gated_fraction)
        if on_epoch is not None and on_epoch(rep, model):
            break
    return state, reports


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: FGSIModel
    state: AdamState
    rng_state: bytes
    batches_per_epoch: int | None = None


def _rng_state_bytes(config: FGSIConfig, step: int, n_batches: int | None) -> bytes:
    epoch = step // n_batches if n_batches else 0
    bitgen = np.random.default_rng([config.seed, 2, epoch]).bit_generator.state
    return json.dumps({"epoch": epoch, "bit_generator": bitgen}, sort_keys=True).encode()


def _write_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _write_tensors(buf: io.BytesIO, tensors: list[tuple[str, np.ndarray]]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)


def checkpoint_bytes(model: FGSIModel, state: AdamState, n_batches: int | None = None,
                     rng_state: bytes | None = None) -> bytes:
    meta = {
        "config": model.config.to_dict(),
        "vocab": model.vocab.tokens(),
        "relations": model.relations.names,
        "na": model.relations.na,
        "adam": {"beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
        "batches_per_epoch": n_batches,
    }
    blob = json.dumps(meta, sort_keys=True, ensure_ascii=False).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    _write_tensors(buf, [(k, t.data) for k, t in model.store.items()])
    adam = [("step", np.array(float(state.t)))]
    for k in model.store.names():
        if k in state.m:
            adam.append((f"m/{k}", state.m[k]))
            adam.append((f"v/{k}", state.v[k]))
    _write_tensors(buf, adam)
    rng = rng_state if rng_state is not None else _rng_state_bytes(model.config, state.t, n_batches)
    buf.write(struct.pack("<I", len(rng)))
    buf.write(rng)
    return buf.getvalue()


def save_checkpoint(path, model: FGSIModel, state: AdamState, n_batches: int | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, state, n_batches))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.data)} "
                                           f"(needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        return name, arr

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        return [self.tensor() for _ in range(self.u32())]


def parse_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointFormatError("not an FGSI checkpoint (bad magic bytes)")
    r = _Reader(data)
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
        config = FGSIConfig.from_dict(meta["config"])
        vocab = Vocabulary(meta["vocab"])
        relations = RelationInventory(meta["relations"], meta["na"])
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError) as err:
        raise CheckpointFormatError(f"bad configuration blob: {err}") from None
    params = r.tensors()
    adam = dict(r.tensors())
    rng_state = r.take(r.u32())
    if r.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    store = ParamStore()
    for name, arr in params:
        store.add(name, arr)
    model = FGSIModel(config, vocab, relations, store)
    expected = model.expected_shapes()
    if set(expected) != set(store.names()):
        raise CheckpointShapeError(f"parameter names {sorted(store.names())} do not match "
                                   f"configuration {sorted(expected)}")
    for name, shape in expected.items():
        if store[name].shape != shape:
            raise CheckpointShapeError(f"parameter {name!r} has shape {store[name].shape}, "
                                       f"configuration implies {shape}")
    hyper = meta.get("adam", {})
    state = AdamState({}, {}, int(adam.pop("step", np.array(0.0))),
                      hyper.get("beta1", 0.9), hyper.get("beta2", 0.999), hyper.get("eps", 1e-8))
    for key, arr in adam.items():
        kind, _, name = key.partition("/")
        if name not in expected or arr.shape != expected[name]:
            raise CheckpointShapeError(f"optimizer tensor {key!r} does not match any parameter")
        (state.m if kind == "m" else state.v)[name] = arr
    return Checkpoint(model, state, rng_state, meta.get("batches_per_epoch"))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
