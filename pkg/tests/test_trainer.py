import numpy as np
import pytest
import torch

from reconamt import dataset as ds
from reconamt import model as M
from reconamt import nncore as nn
from reconamt import trainer as tr
from reconamt.dsp import AudioClip
from reconamt.selfcheck import TINY
from reconamt.synth import random_notes, render_notes

SMALL = dict(enc_channels=(2, 4, 8, 16), lstm_hidden=8)


def recordings(count, n_samples=ds.SEGMENT_SAMPLES, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        notes = random_notes(rng, n_samples / 16000)
        out.append(ds.Recording(f"r{i}", render_notes(notes, n_samples), notes))
    return out


@pytest.fixture(scope="module")
def two_recs():
    return recordings(2)


def test_lr_schedule_examples():
    cfg = tr.TrainConfig()
    assert tr.lr_at(0, cfg) == 6e-4
    assert tr.lr_at(10_000, cfg) == pytest.approx(5.88e-4, rel=1e-12)
    assert tr.lr_at(20_000, cfg) == pytest.approx(5.7624e-4, rel=1e-12)
    with pytest.raises(ValueError):
        tr.lr_at(-1, cfg)


def test_lr_staircase():
    cfg = tr.TrainConfig()
    steps = np.arange(0, 50_001, 250)
    lrs = [tr.lr_at(int(s), cfg) for s in steps]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    changes = [int(s) for s, a, b in zip(steps[1:], lrs, lrs[1:]) if a != b]
    assert changes == [10_000, 20_000, 30_000, 40_000, 50_000]
    assert tr.lr_at(9_999, cfg) == tr.lr_at(0, cfg)


def test_config_validation():
    for bad in ({"batch_size": 0}, {"lr0": 0.0}, {"mode": "x"}, {"epochs": -1}):
        with pytest.raises(ValueError):
            tr.TrainConfig(**bad)


def test_step_count_two_recordings_three_epochs(two_recs, tmp_path):
    cfg = tr.TrainConfig(epochs=3, seed=0, **SMALL)
    _, log = tr.train(two_recs, cfg, out_dir=tmp_path)
    assert [r["step"] for r in log.steps] == [0, 1, 2]
    assert [e["steps"] for e in log.epochs] == [1, 1, 1]
    rows = tr.TrainLog.read_csv(tmp_path / "train_log.csv")
    assert list(rows[0]) == list(tr.LOG_COLUMNS) and len(rows) == 3
    assert (tmp_path / "checkpoint.bin").exists()


def test_partial_batches_kept(two_recs):
    recs = two_recs + recordings(1, seed=5)
    _, log = tr.train(recs, tr.TrainConfig(epochs=2, batch_size=2, **SMALL))
    assert len(log.steps) == 4


def test_empty_train_set():
    with pytest.raises(ValueError, match="empty"):
        tr.train([], tr.TrainConfig(epochs=1, **SMALL))


def test_deterministic_runs(two_recs, tmp_path):
    cfg = tr.TrainConfig(epochs=2, seed=3, **SMALL)
    tr.train(two_recs, cfg, out_dir=tmp_path / "a")
    tr.train(two_recs, cfg, out_dir=tmp_path / "b")
    for name in ("checkpoint.bin", "train_log.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_segments_follow_seed_schedule():
    rec = recordings(1, n_samples=ds.SEGMENT_SAMPLES + 50_000)[0]
    starts = {ds.sample_segment(rec, (0, e, 0)).start_sample for e in range(5)}
    assert len(starts) > 1


def test_periodic_checkpoints(two_recs, tmp_path):
    tr.train(two_recs, tr.TrainConfig(epochs=4, checkpoint_every=2, **SMALL), out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("checkpoint*.bin")) == [
        "checkpoint.bin", "checkpoint_epoch2.bin", "checkpoint_epoch4.bin"]


def test_callback_and_max_steps(two_recs):
    seen = []
    _, log = tr.train(two_recs, tr.TrainConfig(epochs=10, batch_size=1, **SMALL),
                      callback=lambda step, store, losses: seen.append(step) or step >= 3)
    assert seen == [1, 2, 3] and len(log.steps) == 3
    _, log = tr.train(two_recs, tr.TrainConfig(epochs=10, batch_size=1, max_steps=5, **SMALL))
    assert len(log.steps) == 5


def test_no_stale_gradients(two_recs, monkeypatch):
    checks = []
    real = nn.adam_step

    def spy(store, lr, **kw):
        real(store, lr, **kw)
        checks.append(store.grads_are_zero())

    monkeypatch.setattr(tr.nn, "adam_step", spy)
    tr.train(two_recs, tr.TrainConfig(epochs=3, **SMALL))
    assert checks == [True, True, True]


def test_nan_loss_aborts_with_dump(two_recs, tmp_path, monkeypatch):
    real = M.total_loss

    def poisoned(*a, **k):
        out = real(*a, **k)
        out.total = out.total * float("nan")
        return out

    monkeypatch.setattr(tr, "total_loss", poisoned)
    with pytest.raises(tr.TrainingDiverged, match="non-finite"):
        tr.train(two_recs, tr.TrainConfig(epochs=1, **SMALL), out_dir=tmp_path)
    assert list(tmp_path.glob("diverged_step0.json"))


def test_checkpoint_round_trip_bitwise(tmp_path):
    cfg = M.ModelConfig(**{**TINY, "n_bins": 229})
    store = M.init_params(cfg)
    for p in store.entries.values():
        p.adam_m += 0.25
    tr.save_checkpoint(store, tmp_path / "c.bin", cfg)
    back, back_cfg = tr.load_checkpoint(tmp_path / "c.bin")
    assert back_cfg == cfg
    for name in store:
        assert back[name].detach().numpy().tobytes() == store[name].detach().numpy().tobytes()
        assert torch.equal(back.entries[name].adam_m, store.entries[name].adam_m)


def test_checkpoint_truncated(tmp_path):
    cfg = M.ModelConfig(**{**TINY, "n_bins": 32})
    tr.save_checkpoint(M.init_params(cfg), tmp_path / "c.bin", cfg)
    blob = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(nn.CorruptCheckpoint, match="corrupt checkpoint"):
        tr.load_checkpoint(tmp_path / "t.bin")


def test_checkpoint_mel_into_cqt_names_tensor(tmp_path):
    mel = M.ModelConfig(frontend="mel", enc_channels=TINY["enc_channels"], lstm_hidden=8)
    tr.save_checkpoint(M.init_params(mel), tmp_path / "c.bin", mel)
    cqt = M.ModelConfig(frontend="cqt", enc_channels=TINY["enc_channels"], lstm_hidden=8)
    with pytest.raises(ValueError, match=r"shape mismatch for tensor 'lstm1\.w_ih_fwd'"):
        tr.load_checkpoint(tmp_path / "c.bin", cqt)


def test_checkpoint_mode_mismatch(tmp_path):
    base = M.ModelConfig(mode="baseline", **{**TINY, "n_bins": 32})
    tr.save_checkpoint(M.init_params(base), tmp_path / "c.bin", base)
    with pytest.raises(ValueError, match="lacks tensor"):
        tr.load_checkpoint(tmp_path / "c.bin", M.ModelConfig(mode="proposed", **{**TINY, "n_bins": 32}))


def fixed_batch(seed):
    rng = np.random.default_rng(seed)
    rec = recordings(1, n_samples=16 * 512 * 4, seed=seed)[0]
    from reconamt.dsp import mel_spectrogram

    spec = mel_spectrogram(rec.audio).values[:32, :64]
    roll = ds.notes_to_pianoroll(rec.notes, 64).values
    x = torch.tensor(spec, dtype=torch.float32)[None, None]
    return x, torch.tensor(roll, dtype=torch.float32)[None]


@pytest.mark.parametrize("mode", M.MODES)
@pytest.mark.parametrize("seed", range(3))
def test_fixed_batch_loss_halves(mode, seed):
    x, y = fixed_batch(seed)
    store = M.init_params(M.ModelConfig(mode=mode, seed=seed, **{**TINY, "n_bins": 32}))
    first = None
    for _ in range(200):
        loss = M.total_loss(x, M.full_forward(x, store, mode), y, mode).total
        first = loss.item() if first is None else first
        loss.backward()
        nn.adam_step(store, tr.lr_at(0, tr.TrainConfig()))
    final = M.total_loss(x, M.full_forward(x, store, mode), y, mode).total.item()
    assert final <= 0.5 * first
