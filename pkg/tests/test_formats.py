import numpy as np
import pytest
from scipy.io import wavfile

from reconamt import formats
from reconamt.dsp import AudioClip, Spectrogram


def test_wav_pcm16_round_trip(tmp_path):
    clip = AudioClip(np.sin(np.linspace(0, 20, 1000)) * 0.5, 16000)
    formats.write_wav(tmp_path / "a.wav", clip)
    back = formats.read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 16000
    np.testing.assert_allclose(back.samples, clip.samples, atol=1 / 32767)


def test_wav_float_and_stereo(tmp_path):
    data = np.stack([np.full(10, 0.25, np.float32), np.full(10, -0.5, np.float32)], axis=1)
    wavfile.write(tmp_path / "s.wav", 8000, data)
    back = formats.read_wav(tmp_path / "s.wav")
    assert back.sample_rate == 8000 and np.all(back.samples == 0.25)


@pytest.mark.parametrize("dtype,value,expected", [(np.int32, 2**30, 0.5), (np.uint8, 192, 0.5)])
def test_wav_integer_types(tmp_path, dtype, value, expected):
    wavfile.write(tmp_path / "i.wav", 16000, np.full(4, value, dtype))
    assert formats.read_wav(tmp_path / "i.wav").samples == pytest.approx([expected] * 4)


def test_matrix_round_trip(tmp_path):
    m = np.random.default_rng(0).random((3, 5)).astype(np.float32)
    formats.write_matrix(tmp_path / "m.f32", m, kind="test")
    back, meta = formats.read_matrix(tmp_path / "m.f32")
    assert back.tobytes() == m.tobytes() and meta["shape"] == [3, 5] and meta["kind"] == "test"


def test_matrix_size_mismatch(tmp_path):
    formats.write_matrix(tmp_path / "m.f32", np.zeros((2, 2)))
    (tmp_path / "m.f32").write_bytes(b"\0" * 4)
    with pytest.raises(ValueError, match="sidecar shape"):
        formats.read_matrix(tmp_path / "m.f32")


def test_spectrogram_round_trip(tmp_path):
    s = Spectrogram(np.eye(3), np.array([1.0, 2.0, 3.0]), 0.032, "mel")
    formats.save_spectrogram(tmp_path / "s.f32", s)
    back = formats.load_spectrogram(tmp_path / "s.f32")
    assert back.kind == "mel" and back.hop_seconds == 0.032
    np.testing.assert_array_equal(back.values, np.eye(3))


def test_atomic_write_leaves_no_temp(tmp_path):
    formats.atomic_write_bytes(tmp_path / "x.bin", b"abc")
    formats.atomic_write_bytes(tmp_path / "x.bin", b"def")
    assert (tmp_path / "x.bin").read_bytes() == b"def"
    assert [p.name for p in tmp_path.iterdir()] == ["x.bin"]
