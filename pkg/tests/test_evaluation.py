import numpy as np
import pytest

from ilpcnet import evaluation as E
from ilpcnet.dsp import AudioBuffer


def test_lsd_identity_and_gain(rng):
    x = rng.standard_normal(4800)
    assert E.log_spectral_distance(x, x) == 0.0
    # a uniform gain is a constant dB offset in every bin
    assert E.log_spectral_distance(x, 2 * x) == pytest.approx(20 * np.log10(2), rel=1e-9)


def test_lsd_tolerates_one_frame_of_slack(rng):
    x = rng.standard_normal(4800)
    assert E.log_spectral_distance(x, x[:-100]) < 1e-9
    with pytest.raises(ValueError, match="length mismatch"):
        E.log_spectral_distance(x, x[:-500])


def test_compare_audio_on_identical_signal(small_corpus):
    a = small_corpus[0].audio
    c = E.compare_audio(a, a)
    assert c.lsd_db == 0.0 and c.f0_rmse_hz == 0.0 and c.voicing_agreement_pct == 100.0
    assert c.frames == 100 and c.voiced_frames > 0
    assert "lsd_db 0.0000" in c.report()


def test_compare_audio_detects_pitch_shift():
    sr = 24000
    t = np.arange(sr) / sr
    a = AudioBuffer(0.3 * np.sin(2 * np.pi * 150 * t))
    b = AudioBuffer(0.3 * np.sin(2 * np.pi * 160 * t))
    c = E.compare_audio(a, b)
    assert 8 < c.f0_rmse_hz < 12


def test_compare_audio_sample_rate_mismatch():
    with pytest.raises(ValueError, match="sample rate"):
        E.compare_audio(AudioBuffer(np.zeros(2400), 24000), AudioBuffer(np.zeros(2400), 16000))


def test_relative_error_floor():
    assert E.relative_error(0.0, 1e-9)[()] == pytest.approx(1e-3)
    assert E.relative_error(2.0, 1.0)[()] == 0.5


@pytest.mark.parametrize("name", [c for c in E.COMPONENTS if c != "vocoder"])
def test_gradcheck_components_pass(name):
    row = E.check_component(name, trials=3, seed=1)
    assert row.passed, row


@pytest.mark.parametrize("name", ["fc", "mog_nll"])
def test_corrupted_gradient_is_caught(name):
    row = E.check_component(name, trials=1, seed=0, corrupt=True)
    assert not row.passed and row.max_rel_error > 5e-3


def test_format_table():
    rows = [E.GradcheckRow("fc", 2, 1e-8, True), E.GradcheckRow("tconv", 2, 0.5, False)]
    text = E.format_table(rows)
    assert "PASS" in text.splitlines()[1] and "FAIL" in text.splitlines()[2]
