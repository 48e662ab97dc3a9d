"""Training loop: fresh random segment per recording per epoch, Adam with a
staircase learning-rate decay, checkpoints and a per-step loss log."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import nncore as nn
from .dataset import SEGMENT_SAMPLES, Recording, sample_segment
from .dsp import compute_frontend
from .model import ModelConfig, full_forward, init_params, normalize_mode, total_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lr", "recon_l2", "bce_post1", "bce_post2", "total")


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 32
    lr0: float = 6e-4
    decay: float = 0.98
    decay_steps: int = 10_000
    seed: int = 0
    mode: str = "proposed"
    frontend: str = "mel"
    enc_channels: tuple = (16, 32, 64, 128)
    lstm_hidden: int = 256
    checkpoint_every: int = 0  # epochs; 0 writes only the final checkpoint
    max_steps: Optional[int] = None

    def __post_init__(self):
        self.mode = normalize_mode(self.mode)
        self.enc_channels = tuple(int(c) for c in self.enc_channels)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.decay_steps < 1:
            raise ValueError("decay_steps must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.frontend, self.mode, self.enc_channels, self.lstm_hidden, self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        return d


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.lr0 * cfg.decay ** (step // cfg.decay_steps)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def record(self, step: int, lr: float, losses: dict) -> None:
        if self.steps and step <= self.steps[-1]["step"]:
            raise ValueError("log steps must be strictly increasing")
        self.steps.append({"step": step, "lr": lr, **losses})

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for rec in self.steps:
                w.writerow([rec["step"]] + [repr(float(rec[c])) for c in LOG_COLUMNS[1:]])

    @staticmethod
    def read_csv(path) -> list[dict]:
        with open(path, newline="") as fh:
            return [
                {k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)
            ]


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(store: nn.ParameterStore, path, model_cfg: ModelConfig, **extra) -> None:
    meta = {"model_config": model_cfg.to_json(), "step_count": store.step_count}
    meta.update(extra)
    nn.save_tensors(path, store.state_arrays(), meta)


def load_checkpoint(path, model_cfg: Optional[ModelConfig] = None, dtype=torch.float32):
    """Load parameters (and optimiser state) from ``path``.

    Without ``model_cfg`` the configuration stored in the checkpoint is used.
    With one, every tensor must match the shapes that configuration implies;
    the first offending tensor is named in the error.
    """
    tensors, meta = nn.load_tensors(path)
    stored_cfg = ModelConfig.from_dict(json.loads(meta["model_config"])) if "model_config" in meta else None
    cfg = model_cfg or stored_cfg
    if cfg is None:
        raise nn.CorruptCheckpoint(f"corrupt checkpoint {path}: no model configuration")
    template = init_params(cfg, dtype)
    store = nn.ParameterStore(dtype)
    store.step_count = int(meta.get("step_count", 0))
    for name in template:
        if name not in tensors:
            raise ValueError(f"checkpoint {path} lacks tensor {name!r} required by the model")
        expected = tuple(template[name].shape)
        if tensors[name].shape != expected:
            raise ValueError(
                f"shape mismatch for tensor {name!r}: checkpoint {tensors[name].shape} vs model {expected}"
            )
        store.add(name, tensors[name])
        for slot in ("adam_m", "adam_v"):
            key = f"{slot}/{name}"
            if key in tensors:
                setattr(store.entries[name], slot, torch.as_tensor(tensors[key], dtype=dtype).clone())
    extra = set(tensors) - set(template) - {f"{s}/{n}" for s in ("adam_m", "adam_v") for n in template}
    if extra:
        raise ValueError(f"checkpoint {path} has tensors the model does not use: {sorted(extra)[:5]}")
    return store, cfg


# --------------------------------------------------------------------------- loop


def _segment_arrays(segment, frontend):
    spec = compute_frontend(segment.audio, frontend).values.astype(np.float32)
    return spec, segment.roll.values.astype(np.float32)


def train(
    recordings: list[Recording],
    cfg: TrainConfig,
    out_dir=None,
    callback: Optional[Callable] = None,
    store: Optional[nn.ParameterStore] = None,
):
    """Train from scratch (or continue ``store``) and return ``(store, TrainLog)``.

    Every epoch draws one segment per recording, seeded by
    ``(seed, epoch, recording index)``, shuffles them with ``(seed, epoch)``
    and steps once per batch; the last partial batch is kept.
    ``callback(step, store, losses)`` runs after each optimiser step and may
    return True to stop early.
    """
    if not recordings:
        raise ValueError("empty training set")
    model_cfg = cfg.model_config()
    store = store if store is not None else init_params(model_cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    tlog = TrainLog()
    cache: dict = {}
    step = store.step_count
    mode = cfg.mode
    stop = False

    for epoch in range(cfg.epochs):
        batch_items = []
        for i, rec in enumerate(recordings):
            seg = sample_segment(rec, (cfg.seed, epoch, i))
            key = (i, seg.start_sample)
            if len(rec.audio) <= SEGMENT_SAMPLES and key in cache:
                batch_items.append(cache[key])
                continue
            arrays = _segment_arrays(seg, cfg.frontend)
            if len(rec.audio) <= SEGMENT_SAMPLES:
                cache[key] = arrays
            batch_items.append(arrays)
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(batch_items))
        epoch_losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            x = torch.from_numpy(np.stack([batch_items[j][0] for j in idx]))[:, None]
            y = torch.from_numpy(np.stack([batch_items[j][1] for j in idx]))
            if not store.grads_are_zero():
                raise RuntimeError("stale gradients present before backward")
            out = full_forward(x, store, mode, with_post2=mode != "recon_only")
            losses = total_loss(x, out, y, mode)
            values = losses.as_floats()
            if not np.all(np.isfinite(list(values.values()))):
                _dump_divergence(out_dir, step, epoch, values, store)
                raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch}): {values}")
            losses.total.backward()
            lr = lr_at(step, cfg)
            nn.adam_step(store, lr)
            tlog.record(step, lr, values)
            epoch_losses.append(values["total"])
            step += 1
            if callback is not None and callback(step, store, values):
                stop = True
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stop = True
            if stop:
                break
        tlog.epochs.append({"epoch": epoch, "steps": len(epoch_losses), "mean_total": float(np.mean(epoch_losses))})
        log.info("epoch %d: %d step(s), mean loss %.5f", epoch, len(epoch_losses), tlog.epochs[-1]["mean_total"])
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(store, out_dir / f"checkpoint_epoch{epoch + 1}.bin", model_cfg, epoch=epoch + 1)
        if stop:
            break

    if out_dir is not None:
        save_checkpoint(store, out_dir / "checkpoint.bin", model_cfg, epoch=len(tlog.epochs))
        tlog.to_csv(out_dir / "train_log.csv")
    return store, tlog


def _dump_divergence(out_dir, step, epoch, values, store):
    if out_dir is None:
        return
    report = {
        "step": step,
        "epoch": epoch,
        "losses": {k: repr(v) for k, v in values.items()},
        "param_max_abs": {n: float(store[n].detach().abs().max()) for n in store},
    }
    (Path(out_dir) / f"diverged_step{step}.json").write_text(json.dumps(report, indent=2))
