"""Time-weighted loss, regularization, training loop and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .data_model import NEGATIVE, POSITIVE, DatasetManifest, FeatureBundle, VideoSample
from .network import AccidentAnticipator, ModelConfig, build_model, prepare_inputs

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-7
CKPT_MAGIC = b"ACCK"
CKPT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 10
    lr: float = 1e-4
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    l1_coeff: float = 1e-3
    l2_coeff: float = 1e-4
    val_fraction: float = 0.1
    seed: int = 0
    checkpoint_dir: str | None = None
    num_threads: int = 1

    def __post_init__(self):
        for name in ("lr", "l1_coeff", "l2_coeff", "val_fraction"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def desk_train_config(**overrides) -> TrainConfig:
    """Settings for small synthetic runs.

    The full-scale defaults (lr 1e-4 with L1/L2 penalties) barely move a F=32 model in 15 epochs
    of 200 clips, so desk runs use a larger step and no penalties.
    """
    return TrainConfig(**{"lr": 2e-3, "l1_coeff": 0.0, "l2_coeff": 0.0, **overrides})


# -- losses ------------------------------------------------------------------


def frame_weights(num_frames: int, label: str, toa: int, fps: float) -> np.ndarray:
    """Per-frame loss multiplier: 1 + exp(-(toa - t - 1) / fps) before the accident, else 1."""
    w = np.ones(num_frames)
    if label == POSITIVE:
        t = np.arange(min(max(toa, 0), num_frames))
        w[: t.size] += np.exp(-(toa - t - 1) / fps)
    return w


def frame_loss(probs, sample: VideoSample) -> torch.Tensor:
    """Mean over frames of the time-weighted cross entropy for one clip.

    probs: [T, 2] class probabilities (column 1 = accident).
    """
    probs = torch.as_tensor(probs)
    if not torch.all(torch.isfinite(probs)):
        raise ValueError("non-finite probabilities")
    target = 1 if sample.label == POSITIVE else 0
    ce = -torch.log(probs[:, target].clamp_min(PROB_FLOOR))
    w = torch.as_tensor(frame_weights(probs.shape[0], sample.label, sample.toa, sample.fps), dtype=ce.dtype)
    return (w * ce).mean()


def batch_loss(logits: torch.Tensor, samples: list[VideoSample], lengths) -> torch.Tensor:
    """Mean over clips of ``frame_loss``, ignoring padded frames."""
    probs = torch.softmax(logits, dim=-1)
    losses = [frame_loss(probs[i, : int(n)], s) for i, (s, n) in enumerate(zip(samples, lengths))]
    return torch.stack(losses).mean()


def regularization(params, l1_coeff: float = 1e-3, l2_coeff: float = 1e-4) -> torch.Tensor:
    params = list(params)
    l1 = sum(p.abs().sum() for p in params)
    l2 = sum((p * p).sum() for p in params)
    return l1_coeff * l1 + l2_coeff * l2


def regularized_loss(data_loss, params, l1_coeff: float = 1e-3, l2_coeff: float = 1e-4):
    return data_loss + regularization(params, l1_coeff, l2_coeff)


# -- checkpoints -------------------------------------------------------------


@dataclass
class TrainState:
    model: AccidentAnticipator
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.ReduceLROnPlateau
    train_config: TrainConfig
    epoch: int = 0
    best_val_loss: float = math.inf
    lr_history: list[float] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]


def _make_optimizer(model, train_config: TrainConfig):
    opt = torch.optim.Adam(model.parameters(), lr=train_config.lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=train_config.plateau_factor, patience=train_config.plateau_patience
    )
    return opt, sched


def new_state(model_config: ModelConfig, train_config: TrainConfig) -> TrainState:
    model = build_model(model_config)
    opt, sched = _make_optimizer(model, train_config)
    return TrainState(model, opt, sched, train_config)


def _json_float(x):
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


def _unjson_float(x):
    return float(x) if x in ("inf", "-inf", "nan") else x


def save_checkpoint(state: TrainState, path: str | Path, metrics: dict | None = None) -> None:
    """Write a checkpoint: magic, version, JSON index, then raw float32 arrays.

    Arrays are the model parameters in declaration order followed by the Adam
    moments, each little-endian float32, row-major, no padding.
    """
    names = [n for n, _ in state.model.named_parameters()]
    arrays: list[tuple[str, np.ndarray]] = []
    for n, p in state.model.named_parameters():
        arrays.append((n, p.detach().cpu().numpy()))
    steps = {}
    for n, p in state.model.named_parameters():
        st = state.optimizer.state.get(p)
        if st:
            arrays.append((f"adam.exp_avg.{n}", st["exp_avg"].cpu().numpy()))
            arrays.append((f"adam.exp_avg_sq.{n}", st["exp_avg_sq"].cpu().numpy()))
            steps[n] = int(st["step"])
    index, offset = [], 0
    for n, arr in arrays:
        index.append({"name": n, "shape": list(arr.shape), "offset": offset})
        offset += 4 * arr.size
    sched = {k: _json_float(v) for k, v in state.scheduler.state_dict().items() if k != "_last_lr"}
    meta = {
        "model_config": state.model.config.to_json(),
        # the output location is left out so identical runs give identical bytes
        "train_config": {**state.train_config.to_json(), "checkpoint_dir": None},
        "epoch": state.epoch,
        "metrics": {k: _json_float(v) for k, v in (metrics or {}).items()},
        "best_val_loss": _json_float(state.best_val_loss),
        "lr": state.lr,
        "lr_history": state.lr_history,
        "history": state.history,
        "param_names": names,
        "adam_steps": steps,
        "scheduler": sched,
        "arrays": index,
        "dtype": "f32le",
    }
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC or len(raw) < 12:
        raise CheckpointError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    blob = memoryview(raw)[12 + hlen :]
    arrays = {}
    for entry in meta["arrays"]:
        count = math.prod(entry["shape"])
        if entry["offset"] + 4 * count > len(blob):
            raise CheckpointError(f"{path}: truncated array {entry['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return meta, arrays


def load_checkpoint(
    path: str | Path,
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
) -> TrainState:
    """Rebuild the full training state; raises if ``model_config`` disagrees with the file."""
    meta, arrays = read_checkpoint(path)
    stored = ModelConfig.from_json(meta["model_config"])
    if model_config is not None and model_config.to_json() != stored.to_json():
        raise CheckpointError(f"{path}: checkpoint was trained with a different model config")
    tc = train_config or TrainConfig.from_json(meta["train_config"])
    state = new_state(stored, tc)
    params = dict(state.model.named_parameters())
    if list(params) != meta["param_names"]:
        raise CheckpointError(f"{path}: parameter layout does not match the model config")
    with torch.no_grad():
        for n, p in params.items():
            if tuple(arrays[n].shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: shape mismatch for {n}")
            p.copy_(torch.from_numpy(arrays[n]))
    for n, step in meta["adam_steps"].items():
        state.optimizer.state[params[n]] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(arrays[f"adam.exp_avg.{n}"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"adam.exp_avg_sq.{n}"].copy()),
        }
    sched = {k: _unjson_float(v) for k, v in meta["scheduler"].items()}
    state.scheduler.load_state_dict(sched)
    for group in state.optimizer.param_groups:
        group["lr"] = meta["lr"]
    state.scheduler._last_lr = [meta["lr"]]
    state.epoch = meta["epoch"]
    state.best_val_loss = _unjson_float(meta["best_val_loss"])
    state.lr_history = list(meta["lr_history"])
    state.history = list(meta["history"])
    return state


# -- loop --------------------------------------------------------------------


def split_validation(ids: list[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    if fraction <= 0 or len(ids) < 2:
        return list(ids), []
    k = max(1, int(round(len(ids) * fraction)))
    order = np.random.default_rng([seed, 0xBA1]).permutation(len(ids))
    held = set(order[:k].tolist())
    return [i for j, i in enumerate(ids) if j not in held], [i for j, i in enumerate(ids) if j in held]


def _batches(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def dataset_loss(model, samples: list[VideoSample], bundles: dict[str, FeatureBundle], batch_size: int) -> float:
    """Unregularized loss averaged over clips."""
    if not samples:
        return math.nan
    total = 0.0
    with torch.no_grad():
        for chunk in _batches(samples, batch_size):
            batch = prepare_inputs([bundles[s.id] for s in chunk], model.config)
            total += float(batch_loss(model(batch), chunk, batch["lengths"])) * len(chunk)
    return total / len(samples)


def train(
    manifest: DatasetManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    resume: str | Path | None = None,
    bundles: dict[str, FeatureBundle] | None = None,
    split: str = "train",
    on_epoch=None,
) -> TrainState:
    """Train on ``split`` with a seeded validation hold-out driving the plateau scheduler."""
    torch.set_num_threads(train_config.num_threads)
    samples = manifest.split(split)
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    if bundles is None:
        bundles = {s.id: manifest.load_bundle(s) for s in samples}
    train_ids, val_ids = split_validation([s.id for s in samples], train_config.val_fraction, train_config.seed)
    by_id = {s.id: s for s in samples}
    train_samples = [by_id[i] for i in train_ids]
    val_samples = [by_id[i] for i in val_ids]

    if resume is not None:
        state = load_checkpoint(resume, model_config, train_config)
    else:
        state = new_state(model_config, train_config)
    model, opt = state.model, state.optimizer
    ckpt_dir = Path(train_config.checkpoint_dir) if train_config.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    while state.epoch < train_config.epochs:
        epoch = state.epoch + 1
        order = np.random.default_rng([train_config.seed, epoch]).permutation(len(train_samples))
        shuffled = [train_samples[i] for i in order]
        model.train()
        running = 0.0
        for chunk in _batches(shuffled, train_config.batch_size):
            batch = prepare_inputs([bundles[s.id] for s in chunk], model.config)
            data = batch_loss(model(batch), chunk, batch["lengths"])
            loss = regularized_loss(data, model.parameters(), train_config.l1_coeff, train_config.l2_coeff)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += float(data.detach()) * len(chunk)
        model.eval()
        train_loss = running / len(shuffled)
        val_loss = dataset_loss(model, val_samples, bundles, train_config.batch_size)
        monitored = val_loss if val_samples else train_loss
        if not math.isfinite(monitored):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        state.scheduler.step(monitored)
        state.epoch = epoch
        state.lr_history.append(state.lr)
        record = {"epoch": epoch, "train_loss": train_loss, "val_loss": monitored, "lr": state.lr}
        state.history.append(record)
        improved = monitored < state.best_val_loss
        if improved:
            state.best_val_loss = monitored
        log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss, monitored, state.lr)
        if ckpt_dir:
            save_checkpoint(state, ckpt_dir / f"epoch_{epoch:03d}.ckpt", record)
            if improved:
                save_checkpoint(state, ckpt_dir / "best.ckpt", record)
            with open(ckpt_dir / "train_log.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
        if on_epoch is not None:
            on_epoch(record)
    return state
