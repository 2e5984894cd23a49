"""Training loop: Adam with decoupled weight decay, class-balanced batch
sampling, per-step loss logging, and binary checkpoint round-trips.

Checkpoint layout: magic "MTFC", u32 version, body, u32 CRC-32 of the
body. The body holds a JSON header (configs, step, seed), the parameter
tensor table, and the two Adam moment tables; every tensor is serialized
as name length + name + rows + cols + raw little-endian float64 values.
"""

from __future__ import annotations

import json
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model as model_mod
from . import objective
from .dataio import Dataset, to_multiscale
from .diffcore import Tape, backward, backward_from
from .model import ModelConfig
from .objective import LossBreakdown, LossWeights

CKPT_MAGIC = b"MTFC"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_normal: int = 64
    batch_abnormal: int = 64
    epochs: int = 1000
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0
    workers: int = 1

    def validate(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        if self.batch_normal < 1 or self.batch_abnormal < 1:
            raise ValueError("batch halves must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.model.validate()
        self.loss.validate()
        return self


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig) -> dict[str, np.ndarray]:
    """Bias-corrected Adam with decoupled weight decay (biases exempt).

    Mutates `state`, returns the updated parameter dict.
    """
    state.step += 1
    t = state.step
    lr, b1, b2 = cfg.learning_rate, cfg.beta1, cfg.beta2
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(
                f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1 ** t)
        v_hat = state.v[name] / (1 - b2 ** t)
        new_p = p - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        if cfg.weight_decay > 0 and not name.endswith("_b"):
            new_p = new_p - lr * cfg.weight_decay * new_p
        out[name] = new_p
    return out


def sample_batch(dataset: Dataset, rng: np.random.Generator,
                 n_normal: int, n_abnormal: int):
    """Class-balanced batch of video indices, with replacement when a class
    is smaller than its half."""
    normals = [i for i, v in enumerate(dataset.videos) if v.label == 0]
    abnormals = [i for i, v in enumerate(dataset.videos) if v.label == 1]
    if not normals or not abnormals:
        raise ValueError("dataset must contain both classes")

    def pick(pool, n):
        replace_ = len(pool) < n
        return list(rng.choice(pool, size=n, replace=replace_))

    return pick(normals, n_normal), pick(abnormals, n_abnormal)


def _video_rng(seed: int, step: int, video_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, video_index]))


def _forward_one(args):
    msf, params, config, mode, rng = args
    tape, x, s = model_mod.forward(msf, params, config, mode=mode, rng=rng)
    return tape, x, s


def batch_gradients(dataset: Dataset, indices: list[int],
                    params: dict[str, np.ndarray], cfg: TrainConfig,
                    step: int, mode: str = "train",
                    executor: ThreadPoolExecutor | None = None):
    """Loss gradients for one batch, staged per video so forwards/backwards
    can run in parallel; reduction is in fixed batch order regardless of
    worker count.

    Returns (grads, LossBreakdown).
    """
    mcfg = cfg.model
    jobs = []
    for slot, i in enumerate(indices):
        rng = _video_rng(cfg.seed, step, slot) if mode == "train" else None
        jobs.append((to_multiscale(dataset.videos[i], mcfg.t), params, mcfg,
                     mode, rng))
    if executor is not None:
        per_video = list(executor.map(_forward_one, jobs))
    else:
        per_video = [_forward_one(j) for j in jobs]

    # Couple the per-video outputs through the loss on a separate tape.
    loss_tape = Tape()
    forwards = []
    for slot, (tape, x, s) in enumerate(per_video):
        forwards.append((loss_tape.leaf(x.value, name=f"x{slot}"),
                         loss_tape.leaf(s.value, name=f"s{slot}")))
    labels = [dataset.videos[i].label for i in indices]
    total, breakdown = objective.total_loss(forwards, labels, cfg.loss)
    boundary = backward(total)

    def one_video_grads(slot):
        tape, x, s = per_video[slot]
        return backward_from(tape, {x.index: boundary[f"x{slot}"],
                                    s.index: boundary[f"s{slot}"]})
    if executor is not None:
        partials = list(executor.map(one_video_grads, range(len(per_video))))
    else:
        partials = [one_video_grads(i) for i in range(len(per_video))]

    grads = {name: np.zeros_like(p) for name, p in params.items()}
    for partial in partials:  # fixed order: deterministic reduction
        for name, g in partial.items():
            grads[name] = grads[name] + g
    return grads, breakdown


def steps_per_epoch(dataset: Dataset, cfg: TrainConfig) -> int:
    n_norm = sum(1 for v in dataset.videos if v.label == 0)
    n_abn = sum(1 for v in dataset.videos if v.label == 1)
    largest = max(n_norm, n_abn)
    half = max(cfg.batch_normal, cfg.batch_abnormal)
    return max(1, -(-largest // half))


def train(dataset: Dataset, cfg: TrainConfig, out_dir=None,
          log_path=None):
    """Run the full optimization; returns (params, AdamState, log rows).

    Log rows are (step, LossBreakdown); also written as CSV when
    `log_path` is given. Deterministic in (dataset, cfg, seed).
    """
    cfg.validate()
    dataset.validate()
    params = model_mod.init_params(cfg.model, cfg.seed)
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBA7C4]))
    executor = (ThreadPoolExecutor(max_workers=cfg.workers)
                if cfg.workers > 1 else None)
    log: list[tuple[int, LossBreakdown]] = []
    log_file = open(log_path, "w") if log_path else None
    if log_file:
        log_file.write("step,bce,fm,sparsity,smoothness,total\n")
    try:
        per_epoch = steps_per_epoch(dataset, cfg)
        step = 0
        for _epoch in range(cfg.epochs):
            for _ in range(per_epoch):
                normals, abnormals = sample_batch(
                    dataset, rng, cfg.batch_normal, cfg.batch_abnormal)
                indices = normals + abnormals
                grads, breakdown = batch_gradients(
                    dataset, indices, params, cfg, step, mode="train",
                    executor=executor)
                if not np.isfinite(breakdown.total):
                    raise RuntimeError(
                        f"non-finite loss {breakdown.total} at step {step}")
                params = adam_step(params, grads, state, cfg)
                log.append((step, breakdown))
                if log_file:
                    log_file.write(
                        f"{step},{breakdown.bce!r},{breakdown.fm!r},"
                        f"{breakdown.sparsity!r},{breakdown.smoothness!r},"
                        f"{breakdown.total!r}\n")
                step += 1
                if (out_dir is not None and cfg.checkpoint_every > 0
                        and step % cfg.checkpoint_every == 0):
                    save_checkpoint(Path(out_dir) / f"step_{step:07d}.mtfc",
                                    cfg, params, state)
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "final.mtfc", cfg, params, state)
    finally:
        if executor is not None:
            executor.shutdown()
        if log_file:
            log_file.close()
    return params, state, log


def score_video(record, params, cfg_model: ModelConfig) -> np.ndarray:
    """Eval-mode snippet scores for one video."""
    msf = to_multiscale(record, cfg_model.t)
    _, _, s = model_mod.forward(msf, params, cfg_model, mode="eval")
    return s.value.ravel()


def _pack_tensor_table(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<II", arr.shape[0], arr.shape[1]))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, raw: bytes, offset: int):
        self.raw = raw
        self.pos = offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncationError(
                f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _unpack_tensor_table(r: _Reader) -> dict[str, np.ndarray]:
    count = r.u32()
    out = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rows, cols = struct.unpack("<II", r.take(8))
        data = np.frombuffer(r.take(8 * rows * cols), dtype="<f8")
        out[name] = data.reshape(rows, cols).copy()
    return out


def _config_to_json(cfg: TrainConfig, step: int) -> bytes:
    blob = asdict(cfg)
    blob["model"]["hidden"] = list(cfg.model.hidden)
    return json.dumps({"train": blob, "step": step, "seed": cfg.seed},
                      sort_keys=True).encode("utf-8")


def _config_from_json(raw: bytes) -> tuple[TrainConfig, int]:
    blob = json.loads(raw.decode("utf-8"))
    t = dict(blob["train"])
    m = dict(t.pop("model"))
    m["hidden"] = tuple(m["hidden"])
    loss = LossWeights(**t.pop("loss"))
    cfg = TrainConfig(model=ModelConfig(**m), loss=loss, **t)
    return cfg, int(blob["step"])


def save_checkpoint(path, cfg: TrainConfig, params: dict[str, np.ndarray],
                    state: AdamState):
    header = _config_to_json(cfg, state.step)
    body = b"".join([
        struct.pack("<I", len(header)), header,
        struct.pack("<I", state.step),
        _pack_tensor_table(params),
        _pack_tensor_table(state.m),
        _pack_tensor_table(state.v),
    ])
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path):
    """Returns (TrainConfig, params, AdamState)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise TruncationError(f"{path}: file too short ({len(raw)} bytes)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    # Structural parse first so a chopped file reports truncation, not a
    # checksum mismatch; CRC catches in-place corruption afterwards.
    r = _Reader(raw, 8)
    header = r.take(r.u32())
    step = r.u32()
    params = _unpack_tensor_table(r)
    m = _unpack_tensor_table(r)
    v = _unpack_tensor_table(r)
    if r.pos + 4 > len(raw):
        raise TruncationError(f"{path}: missing trailing checksum")
    if r.pos + 4 != len(raw):
        raise TruncationError(f"{path}: trailing bytes after tensor tables")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[8:-4]) != stored_crc:
        raise ChecksumError(f"{path}: CRC mismatch")
    cfg, _ = _config_from_json(header)
    return cfg, params, AdamState(m=m, v=v, step=step)
