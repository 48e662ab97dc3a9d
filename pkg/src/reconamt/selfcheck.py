"""Built-in verification: gradient checks, pure-tone DSP oracles and a
brute-force note-matching oracle."""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import dsp
from . import model as M
from . import nncore as nn
from .dataset import NoteEvent
from .metrics import match_notes

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


# --------------------------------------------------------------------------- gradient checks


def _rand(rng, *shape):
    return torch.tensor(rng.standard_normal(shape), dtype=torch.float64)


def op_gradient_checks(seed: int = 0) -> dict:
    """Max relative finite-difference error of each op's backward (float64)."""
    rng = np.random.default_rng(seed)
    out = {}
    w = rng.standard_normal((5, 7, 7))  # fixed projection so every op reduces to a scalar

    def proj(t):
        flat = t.reshape(-1)
        weights = torch.tensor(np.resize(w, flat.shape[0]), dtype=torch.float64)
        return (flat * weights).sum()

    out["conv2d"] = nn.grad_check(
        lambda x, k, b: proj(nn.conv2d(x, k, b)), [_rand(rng, 2, 3, 6, 6), _rand(rng, 4, 3, 3, 3), _rand(rng, 4)],
        seed=seed,
    )
    out["downsample2"] = nn.grad_check(lambda x: proj(nn.downsample2(x)), [_rand(rng, 2, 3, 6, 8)], n_coords=24, seed=seed)
    out["upsample2"] = nn.grad_check(lambda x: proj(nn.upsample2(x)), [_rand(rng, 2, 3, 3, 4)], seed=seed)
    out["linear"] = nn.grad_check(
        lambda x, a, b: proj(nn.linear(x, a, b)), [_rand(rng, 3, 5, 6), _rand(rng, 4, 6), _rand(rng, 4)], seed=seed
    )
    out["activation"] = max(
        nn.grad_check(lambda x: proj(nn.activation(x, "relu")), [_rand(rng, 4, 9)], seed=seed),
        nn.grad_check(lambda x: proj(nn.activation(x, "sigmoid")), [_rand(rng, 4, 9)], seed=seed),
    )
    hidden, d_in = 3, 4
    names = ("w_ih_fwd", "w_hh_fwd", "b_fwd", "w_ih_bwd", "w_hh_bwd", "b_bwd")
    shapes = ((4 * hidden, d_in), (4 * hidden, hidden), (4 * hidden,)) * 2
    lstm_inputs = [_rand(rng, 2, 8, d_in)] + [0.5 * _rand(rng, *s) for s in shapes]
    out["bilstm"] = nn.grad_check(
        lambda x, *ps: proj(nn.bilstm(x, dict(zip(names, ps)), hidden)), lstm_inputs, seed=seed
    )
    p = torch.tensor(rng.uniform(0.05, 0.95, (3, 7)), dtype=torch.float64)
    y = torch.tensor(rng.integers(0, 2, (3, 7)), dtype=torch.float64)
    out["bce_loss"] = nn.grad_check(lambda q: nn.bce_loss(q, y), [p], seed=seed)
    out["mse_loss"] = nn.grad_check(lambda a, b: nn.mse_loss(a, b), [_rand(rng, 3, 7), _rand(rng, 3, 7)], seed=seed)
    return out


TINY = dict(enc_channels=(2, 4, 8, 16), lstm_hidden=8, n_bins=32)


def model_gradient_check(seed: int, mode: str = "proposed", n_bins: int = 32, n_frames: int = 32, coords: int = 2):
    """Finite-difference check of the full training loss w.r.t. every parameter tensor."""
    cfg = M.ModelConfig(mode=mode, seed=seed, **{**TINY, "n_bins": n_bins})
    store = M.init_params(cfg, torch.float64)
    rng = np.random.default_rng(seed)
    x = torch.tensor(rng.random((2, 1, n_bins, n_frames)))
    y = torch.tensor((rng.random((2, 88, n_frames)) < 0.2).astype(np.float64))
    names = list(store)

    def loss(*values):
        view = nn.ParameterStore(torch.float64)
        for n, v in zip(names, values):
            view.entries[n] = nn.Param(v, None, None)
        out = M.full_forward(x, view, mode)
        return M.total_loss(x, out, y, mode).total

    return nn.grad_check(loss, store.values(), n_coords=coords, seed=seed)


# --------------------------------------------------------------------------- DSP oracles


def _tone(freq, n=4 * dsp.SAMPLE_RATE, sr=dsp.SAMPLE_RATE):
    return dsp.AudioClip(np.sin(2 * np.pi * freq * np.arange(n) / sr), sr)


def interior_frames(n_samples: int, window: int, hop: int = dsp.HOP):
    """Frames whose analysis window lies entirely inside the clip."""
    half = window // 2 + 1
    return [t for t in range(n_samples // hop) if t * hop - half >= 0 and t * hop + half <= n_samples]


def stft_argmax_bins(freq: float = 1000.0):
    clip = _tone(freq)
    values = dsp.stft_magnitude(clip).values
    return set(values[:, interior_frames(len(clip), dsp.WINDOW_LEN)].argmax(axis=0).tolist())


def cqt_argmax_bins(k: int):
    return cqt_tone_argmax(dsp.CQT_FMIN * 2.0 ** (k / dsp.CQT_BINS_PER_OCTAVE))


def cqt_tone_argmax(freq: float):
    clip = _tone(freq)
    q = 1.0 / (2.0 ** (1.0 / dsp.CQT_BINS_PER_OCTAVE) - 1.0)
    window = int(math.ceil(q * dsp.SAMPLE_RATE / dsp.CQT_FMIN))
    values = dsp.cqt(clip).values
    return set(values[:, interior_frames(len(clip), window)].argmax(axis=0).tolist())


def mel_band_for(freq: float):
    """Rows of the default Mel bank whose triangle covers ``freq`` (closed-form oracle)."""
    edges = dsp.mel_to_hz(np.linspace(dsp.hz_to_mel(dsp.MEL_FMIN), dsp.hz_to_mel(dsp.MEL_FMAX), dsp.N_MELS + 2))
    return {i for i in range(dsp.N_MELS) if edges[i] < freq < edges[i + 2]}


def mel_argmax_rows(freq: float = 440.0):
    clip = _tone(freq)
    values = dsp.mel_spectrogram(clip).values
    return set(values[:, interior_frames(len(clip), dsp.WINDOW_LEN)].argmax(axis=0).tolist())


# --------------------------------------------------------------------------- matching oracle


def brute_force_match_size(ref, est, with_offset: bool, onset_tol: float = 0.05) -> int:
    """Largest matching found by trying every assignment (exponential; tiny inputs only)."""

    def ok(r, e):
        if r.pitch != e.pitch or abs(r.onset - e.onset) > onset_tol + 1e-9:
            return False
        return not with_offset or abs(r.offset - e.offset) <= max(0.05, 0.2 * (r.offset - r.onset)) + 1e-9

    def best(i, used):
        if i == len(ref):
            return 0
        top = best(i + 1, used)
        for j, e in enumerate(est):
            if j not in used and ok(ref[i], e):
                top = max(top, 1 + best(i + 1, used | {j}))
        return top

    return best(0, frozenset())


def random_note_set(rng, max_notes: int = 6, pitches=(60, 61, 62)):
    notes = []
    for _ in range(int(rng.integers(0, max_notes + 1))):
        onset = round(float(rng.uniform(0, 0.4)), 3)
        notes.append(NoteEvent(int(rng.choice(pitches)), onset, round(onset + float(rng.uniform(0.02, 0.5)), 3)))
    return notes


def matching_oracle_mismatches(n_instances: int, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_instances):
        ref, est = random_note_set(rng), random_note_set(rng)
        for rule in ("none", "standard"):
            fast = len(match_notes(ref, est, offset_rule=rule).pairs)
            if fast != brute_force_match_size(ref, est, rule == "standard"):
                bad += 1
    return bad


# --------------------------------------------------------------------------- runner


def _timed(name, fn):
    start = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failed check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, ok, detail, time.perf_counter() - start)


def run_checks(mutate=(), model_seeds: int = 3, matching_instances: int = 300):
    """Run every check; ``mutate`` names ops whose backward is deliberately broken."""
    results = []
    ctx = nn.corrupt_backward(*mutate) if mutate else contextlib.nullcontext()
    with ctx:
        errors = {}

        def ops():
            errors.update(op_gradient_checks())
            return True, ""

        results.append(_timed("grad:ops", ops))
        for op, err in errors.items():
            results.append(CheckResult(f"grad:{op}", err <= GRAD_TOL, f"max rel err {err:.2e}", 0.0))
        for seed in range(model_seeds):
            results.append(
                _timed(
                    f"grad:model[seed={seed}]",
                    lambda s=seed: ((e := model_gradient_check(s)) <= GRAD_TOL, f"max rel err {e:.2e}"),
                )
            )
    results = [r for r in results if r.name != "grad:ops" or not r.ok]
    results.append(_timed("dsp:stft-1kHz", lambda: ((b := stft_argmax_bins(1000.0)) == {128}, f"argmax bins {sorted(b)}")))
    for k in (0, 24, 96, 168):
        results.append(_timed(f"dsp:cqt-bin{k}", lambda k=k: ((b := cqt_argmax_bins(k)) == {k}, f"argmax bins {sorted(b)}")))
    results.append(
        _timed(
            "dsp:mel-440Hz",
            lambda: ((rows := mel_argmax_rows(440.0)) <= mel_band_for(440.0), f"argmax rows {sorted(rows)}"),
        )
    )
    results.append(
        _timed(
            "metrics:matching-oracle",
            lambda: ((bad := matching_oracle_mismatches(matching_instances)) == 0, f"{bad} mismatch(es)"),
        )
    )
    return results
