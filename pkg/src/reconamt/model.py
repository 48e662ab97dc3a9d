"""Transcriber / reconstructer network and its three-term training loss.

The transcriber is U-net 1 followed by BiLSTM 1 and a sigmoid projection to
88 pitches. The reconstructer maps that posteriorgram back to a spectrogram
through BiLSTM 2, a linear projection to F bins and U-net 2. In the full model
the same transcriber is applied a second time to the reconstruction.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import nncore as nn
from .dataset import N_PITCHES, SEGMENT_FRAMES
from .dsp import frontend_bins

MODES = ("proposed", "baseline", "recon_only")
FRONTENDS = ("mel", "cqt")
UNET_DEPTH = 4
# Output-bias prior: expected fraction of active piano-roll cells.
PRIOR_ACTIVATION = 0.02
# U-net 2 input starts mid-range of a normalised spectrogram, away from the ReLU kink.
RECON_LEVEL = 0.5
# Identity path through the top skip: features start as sigmoid(GAIN * (x - CENTRE)).
IDENTITY_GAIN = 4.0
IDENTITY_CENTRE = 0.3
# Keeps identity-path pre-activations off the ReLU kink when the input is clipped to 0.
IDENTITY_BIAS = 0.01


def normalize_mode(mode: str) -> str:
    mode = mode.replace("-", "_")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


@dataclass
class ModelConfig:
    frontend: str = "mel"
    mode: str = "proposed"
    enc_channels: tuple = (16, 32, 64, 128)
    lstm_hidden: int = 256
    seed: int = 0
    n_bins: Optional[int] = None  # defaults to the frontend's bin count

    def __post_init__(self):
        if self.frontend not in FRONTENDS:
            raise ValueError(f"frontend must be one of {FRONTENDS}, got {self.frontend!r}")
        self.mode = normalize_mode(self.mode)
        self.enc_channels = tuple(int(c) for c in self.enc_channels)
        if len(self.enc_channels) != UNET_DEPTH or min(self.enc_channels) < 1:
            raise ValueError(f"enc_channels needs {UNET_DEPTH} positive entries, got {self.enc_channels}")
        if self.lstm_hidden < 1:
            raise ValueError("lstm_hidden must be >= 1")
        if self.n_bins is None:
            self.n_bins = frontend_bins(self.frontend)

    @property
    def has_reconstructer(self) -> bool:
        return self.mode != "baseline"

    def to_json(self) -> str:
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in ("frontend", "mode", "enc_channels", "lstm_hidden", "seed", "n_bins") if k in d}
        return cls(**known)


# --------------------------------------------------------------------------- parameters


def _add_unet(store, rng, prefix, channels):
    c_in = 1
    for i, c in enumerate(channels):
        for j, (a, b) in enumerate(((c_in, c), (c, c))):
            store.add(f"{prefix}.enc{i}.conv{j}.weight", nn.he_uniform(rng, (b, a, 3, 3), a * 9))
            store.add(f"{prefix}.enc{i}.conv{j}.bias", nn.uniform(rng, (b,), 1.0 / math.sqrt(a * 9)))
        c_in = c
    up = channels[-1]
    for i in reversed(range(UNET_DEPTH)):
        out = channels[i - 1] if i > 0 else channels[0]
        for j, (a, b) in enumerate(((up + channels[i], out), (out, out))):
            store.add(f"{prefix}.dec{i}.conv{j}.weight", nn.he_uniform(rng, (b, a, 3, 3), a * 9))
            store.add(f"{prefix}.dec{i}.conv{j}.bias", nn.uniform(rng, (b,), 1.0 / math.sqrt(a * 9)))
        up = out
    store.add(f"{prefix}.out.weight", nn.uniform(rng, (1, up, 1, 1), 1.0 / math.sqrt(up)))
    store.add(f"{prefix}.out.bias", np.zeros(1))
    _identity_path(store, prefix, channels)


def _identity_path(store, prefix, channels):
    """Route the input through channel 0 of the top encoder and decoder blocks.

    Without this the single sigmoid output of a freshly initialised U-net is
    nearly constant (or, with few channels, fully cut off by dead ReLUs), and
    Adam drives it into saturation before any input-dependent signal arrives.
    """
    with torch.no_grad():
        for block, src in (("enc0.conv0", 0), ("enc0.conv1", 0), ("dec0.conv0", -channels[0]), ("dec0.conv1", 0)):
            w, b = store[f"{prefix}.{block}.weight"], store[f"{prefix}.{block}.bias"]
            w[0].zero_()
            w[0, src % w.shape[1], w.shape[2] // 2, w.shape[3] // 2] = 1.0
            b[0] = IDENTITY_BIAS
        store[f"{prefix}.out.weight"].zero_()
        store[f"{prefix}.out.weight"][0, 0] = IDENTITY_GAIN
        store[f"{prefix}.out.bias"].fill_(-IDENTITY_GAIN * (IDENTITY_CENTRE + 4 * IDENTITY_BIAS))


def _add_bilstm(store, rng, prefix, d_in, hidden):
    bound = 1.0 / math.sqrt(hidden)
    for d in ("fwd", "bwd"):
        store.add(f"{prefix}.w_ih_{d}", nn.uniform(rng, (4 * hidden, d_in), bound))
        store.add(f"{prefix}.w_hh_{d}", nn.uniform(rng, (4 * hidden, hidden), bound))
        store.add(f"{prefix}.b_{d}", nn.uniform(rng, (4 * hidden,), bound))


def _add_linear(store, rng, prefix, d_in, d_out, bias=0.0):
    store.add(f"{prefix}.weight", nn.uniform(rng, (d_out, d_in), 1.0 / math.sqrt(d_in)))
    store.add(f"{prefix}.bias", np.full(d_out, bias))


def init_params(cfg: ModelConfig, dtype=torch.float32) -> nn.ParameterStore:
    """Fresh parameters. Each sub-network draws from its own seeded stream, so
    the transcriber weights do not depend on the mode. Modes trained with BCE
    start the pitch outputs at a sparse prior; recon_only starts them at 0.5,
    where the sigmoid passes the most signal to the reconstructer."""
    store = nn.ParameterStore(dtype)
    h, f = cfg.lstm_hidden, cfg.n_bins

    def rng(k):
        return np.random.default_rng([cfg.seed, k])

    _add_unet(store, rng(1), "unet1", cfg.enc_channels)
    _add_bilstm(store, rng(2), "lstm1", f, h)
    prior_logit = 0.0 if cfg.mode == "recon_only" else math.log(PRIOR_ACTIVATION / (1.0 - PRIOR_ACTIVATION))
    _add_linear(store, rng(3), "proj1", 2 * h, N_PITCHES, bias=prior_logit)
    if cfg.has_reconstructer:
        _add_bilstm(store, rng(4), "lstm2", N_PITCHES, h)
        _add_linear(store, rng(5), "proj2", 2 * h, f, bias=RECON_LEVEL)
        _add_unet(store, rng(6), "unet2", cfg.enc_channels)
    return store


# --------------------------------------------------------------------------- forward


def _pad_to_multiple(x, multiple):
    f, t = x.shape[-2:]
    pf, pt = -f % multiple, -t % multiple
    if not (pf or pt):
        return x
    mode = "reflect" if pf < f and pt < t else "replicate"
    return F.pad(x, (0, pt, 0, pf), mode=mode)


def _block(x, store, prefix):
    x = nn.activation(nn.conv2d(x, store[f"{prefix}.conv0.weight"], store[f"{prefix}.conv0.bias"]), "relu")
    return nn.activation(nn.conv2d(x, store[f"{prefix}.conv1.weight"], store[f"{prefix}.conv1.bias"]), "relu")


def unet_forward(x, store, prefix: str = "unet1"):
    """``[B, 1, F, T]`` -> ``[B, 1, F, T]`` in [0, 1].

    F and T are padded up to a multiple of 16 (reflection, or edge
    replication when the input is too short to reflect) and cropped back
    after decoding.
    """
    if x.ndim == 3:
        return unet_forward(x.unsqueeze(0), store, prefix).squeeze(0)
    f, t = x.shape[-2:]
    if f == 0 or t == 0:
        raise ValueError(f"unet input must be non-empty, got F={f}, T={t}")
    h = _pad_to_multiple(x, 2**UNET_DEPTH)
    skips = []
    for i in range(UNET_DEPTH):
        h = _block(h, store, f"{prefix}.enc{i}")
        skips.append(h)
        h = nn.downsample2(h)
    for i in reversed(range(UNET_DEPTH)):
        h = torch.cat([nn.upsample2(h), skips[i]], dim=1)
        h = _block(h, store, f"{prefix}.dec{i}")
    h = nn.conv2d(h, store[f"{prefix}.out.weight"], store[f"{prefix}.out.bias"])
    return nn.activation(h[..., :f, :t].contiguous(), "sigmoid")


def _hidden(store, prefix):
    return store[f"{prefix}.w_hh_fwd"].shape[1]


def _lstm_params(store, prefix):
    return {k.split(".", 1)[1]: store[k] for k in store.names(prefix + ".")}


def transcriber(x, store, return_features: bool = False):
    """Spectrogram ``[B, 1, F, T]`` -> posteriorgram ``[B, 88, T]``."""
    feats = unet_forward(x, store, "unet1")
    seq = feats[:, 0].transpose(1, 2)  # [B, T, F]
    h = nn.bilstm(seq, _lstm_params(store, "lstm1"), _hidden(store, "lstm1"))
    post = nn.activation(nn.linear(h, store["proj1.weight"], store["proj1.bias"]), "sigmoid")
    post = post.transpose(1, 2)
    return (post, feats) if return_features else post


def reconstructer(post, store):
    """Posteriorgram ``[B, 88, T]`` -> spectrogram ``[B, 1, F, T]`` in [0, 1]."""
    if "proj2.weight" not in store:
        raise ValueError("this parameter set has no reconstructer (baseline model)")
    h = nn.bilstm(post.transpose(1, 2), _lstm_params(store, "lstm2"), _hidden(store, "lstm2"))
    spec = nn.linear(h, store["proj2.weight"], store["proj2.bias"])  # [B, T, F]
    return unet_forward(spec.transpose(1, 2).unsqueeze(1), store, "unet2")


@dataclass
class ForwardOutputs:
    post1: torch.Tensor
    x_rec: Optional[torch.Tensor] = None
    post2: Optional[torch.Tensor] = None
    features: Optional[torch.Tensor] = None

    @property
    def final(self) -> torch.Tensor:
        """The posteriorgram used for the final piano roll."""
        return self.post2 if self.post2 is not None else self.post1


def full_forward(x, store, mode: str, with_post2: bool = True) -> ForwardOutputs:
    """Run the network for ``mode``.

    ``proposed`` and ``recon_only`` return post1, the reconstruction and post2
    (the transcriber re-applied to the reconstruction with the same weights);
    ``baseline`` never touches the reconstructer and returns post1 only.
    ``with_post2=False`` skips the second transcription pass.
    """
    mode = normalize_mode(mode)
    post1, feats = transcriber(x, store, return_features=True)
    if mode == "baseline":
        return ForwardOutputs(post1, features=feats)
    x_rec = reconstructer(post1, store)
    post2 = transcriber(x_rec, store) if with_post2 else None
    return ForwardOutputs(post1, x_rec, post2, feats)


def dump_features(x, store):
    """U-net 1 output (the BiLSTM 1 input), same shape as ``x``."""
    return unet_forward(x, store, "unet1")


# --------------------------------------------------------------------------- loss


@dataclass
class LossBreakdown:
    recon_l2: torch.Tensor
    bce_post1: torch.Tensor
    bce_post2: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("recon_l2", "bce_post1", "bce_post2", "total")}


def total_loss(x, outputs: ForwardOutputs, y_roll, mode: str) -> LossBreakdown:
    """L2(x, x_rec) + BCE(post1, roll) + BCE(post2, roll), restricted per mode.

    Inactive terms are reported as zero. ``baseline`` keeps only the post1
    BCE; ``recon_only`` keeps only the reconstruction term.
    """
    mode = normalize_mode(mode)
    y_roll = y_roll.to(outputs.post1.dtype)
    zero = torch.zeros((), dtype=outputs.post1.dtype)
    if mode == "baseline":
        bce1 = nn.bce_loss(outputs.post1, y_roll)
        return LossBreakdown(zero, bce1, zero, bce1)
    recon = nn.mse_loss(outputs.x_rec, x)
    if mode == "recon_only":
        return LossBreakdown(recon, zero, zero, recon)
    bce1 = nn.bce_loss(outputs.post1, y_roll)
    bce2 = nn.bce_loss(outputs.post2, y_roll)
    return LossBreakdown(recon, bce1, bce2, recon + bce1 + bce2)


# --------------------------------------------------------------------------- inference


@torch.no_grad()
def infer(spec_values: np.ndarray, store, mode: str, chunk: int = SEGMENT_FRAMES) -> ForwardOutputs:
    """Run the model over a full-length spectrogram in non-overlapping chunks.

    Returns numpy-backed outputs of shape ``[88, T]`` / ``[F, T]``.
    """
    mode = normalize_mode(mode)
    values = torch.as_tensor(np.asarray(spec_values), dtype=store.dtype)
    n_frames = values.shape[1]
    parts: dict[str, list] = {"post1": [], "x_rec": [], "post2": [], "features": []}
    for start in range(0, n_frames, chunk):
        x = values[:, start : start + chunk][None, None]
        out = full_forward(x, store, mode)
        parts["post1"].append(out.post1[0])
        parts["features"].append(out.features[0, 0])
        if out.x_rec is not None:
            parts["x_rec"].append(out.x_rec[0, 0])
            parts["post2"].append(out.post2[0])
    n_pitch = N_PITCHES
    n_bins = values.shape[0]

    def cat(key, rows):
        if not parts[key]:
            return None if key in ("x_rec", "post2") and mode == "baseline" else np.zeros((rows, 0))
        return torch.cat(parts[key], dim=1).numpy()

    return ForwardOutputs(cat("post1", n_pitch), cat("x_rec", n_bins), cat("post2", n_pitch), cat("features", n_bins))

