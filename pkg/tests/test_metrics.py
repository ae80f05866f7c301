"""Metric oracles: exact identities, worked examples, and report assembly."""

import json
import sys

import numpy as np
import pytest
from scipy.fft import dct, idct

from hyperadapt.corpus import Utterance
from hyperadapt.errors import InputError
from hyperadapt.metrics import (
    EvalReport,
    align_to_reference,
    cos_metric,
    evaluate,
    ffe_metric,
    mcd_metric,
    wer_external,
    word_error_rate,
)

MCD_UNIT = 10.0 / np.log(10.0) * np.sqrt(2.0)


# -----------------------------------------------------------------------------
# cosine similarity
# -----------------------------------------------------------------------------


def test_cos_identical_pairs_score_100():
    rng = np.random.default_rng(0)
    embs = [rng.normal(size=8) for _ in range(5)]
    stat = cos_metric(embs, [e.copy() for e in embs])
    assert stat.mean == pytest.approx(100.0, abs=1e-9)
    assert stat.stderr == pytest.approx(0.0, abs=1e-9)
    assert stat.n_used == 5 and stat.n_excluded == 0


def test_cos_orthogonal_and_antiparallel():
    a = np.array([1.0, 0.0])
    b = np.array([0.0, 1.0])
    assert cos_metric([a], [b]).mean == pytest.approx(0.0, abs=1e-12)
    assert cos_metric([a], [-a]).mean == pytest.approx(-100.0, abs=1e-9)


def test_cos_mean_and_stderr_closed_form():
    a = np.array([1.0, 0.0])
    stat = cos_metric([a, a], [a, np.array([0.0, 1.0])])  # 100 and 0
    assert stat.mean == pytest.approx(50.0)
    assert stat.stderr == pytest.approx(50.0)  # std([100,0], ddof=1)/sqrt(2)


def test_cos_excludes_zero_norm_with_warning():
    a = np.array([1.0, 0.0])
    z = np.zeros(2)
    with pytest.warns(UserWarning, match="zero-norm"):
        stat = cos_metric([a, z], [a, a])
    assert stat.mean == pytest.approx(100.0, abs=1e-9)
    assert stat.n_used == 1 and stat.n_excluded == 1

    with pytest.warns(UserWarning):
        with pytest.raises(InputError):
            cos_metric([z], [a])


def test_cos_input_validation():
    a = np.array([1.0, 0.0])
    with pytest.raises(InputError):
        cos_metric([a, a], [a])
    with pytest.raises(InputError):
        cos_metric([a], [np.ones(3)])
    with pytest.raises(InputError):
        cos_metric([], [])


# -----------------------------------------------------------------------------
# F0 frame error
# -----------------------------------------------------------------------------


def test_ffe_identity_is_zero():
    f0 = np.array([0.0, 120.0, 130.0, 0.0, 150.0])
    assert ffe_metric(f0, f0) == 0.0


def test_ffe_total_voicing_mismatch_is_100():
    ref = np.full(6, 200.0)
    assert ffe_metric(np.zeros(6), ref) == 100.0


def test_ffe_worked_example_is_exactly_25():
    ref = np.array([100.0, 100.0, 100.0, 0.0])
    pred = np.array([100.0, 125.0, 115.0, 0.0])
    assert ffe_metric(pred, ref) == 25.0


def test_ffe_threshold_is_strict():
    ref = np.array([100.0])
    assert ffe_metric(np.array([120.0]), ref) == 0.0   # exactly 20%: not an error
    assert ffe_metric(np.array([120.01]), ref) == 100.0


def test_ffe_frame_order_is_irrelevant():
    rng = np.random.default_rng(3)
    ref = np.where(rng.random(40) < 0.3, 0.0, rng.uniform(80, 300, 40))
    pred = np.where(rng.random(40) < 0.3, 0.0, rng.uniform(80, 300, 40))
    perm = rng.permutation(40)
    assert ffe_metric(pred, ref) == ffe_metric(pred[perm], ref[perm])


def test_ffe_input_validation():
    with pytest.raises(InputError):
        ffe_metric(np.zeros(3), np.zeros(4))
    with pytest.raises(InputError):
        ffe_metric(np.zeros(0), np.zeros(0))


def test_align_to_reference_keeps_exact_values():
    pred = np.array([10.0, 20.0, 30.0, 40.0])
    out = align_to_reference(pred, 8)
    np.testing.assert_array_equal(out, [10.0, 10.0, 20.0, 20.0, 30.0, 30.0, 40.0, 40.0])
    np.testing.assert_array_equal(align_to_reference(pred, 4), pred)
    with pytest.raises(InputError):
        align_to_reference(np.zeros(0), 5)


# -----------------------------------------------------------------------------
# mel cepstral distortion
# -----------------------------------------------------------------------------


def test_mcd_identity_is_zero():
    rng = np.random.default_rng(1)
    mel = rng.normal(size=(30, 16))
    assert mcd_metric(mel, mel) == pytest.approx(0.0, abs=1e-9)


def test_mcd_ignores_uniform_offset():
    rng = np.random.default_rng(2)
    mel = rng.normal(size=(25, 16))
    assert mcd_metric(mel + 3.7, mel) == pytest.approx(0.0, abs=1e-8)


def test_mcd_single_coefficient_closed_form():
    rng = np.random.default_rng(4)
    base = rng.normal(size=(1, 16))
    coeffs = dct(base, type=2, norm="ortho", axis=1)
    bumped = coeffs.copy()
    bumped[0, 1] += 0.1
    pred = idct(bumped, type=2, norm="ortho", axis=1)
    assert mcd_metric(pred, base) == pytest.approx(MCD_UNIT * 0.1, rel=1e-9)


def test_mcd_monotone_in_perturbation():
    rng = np.random.default_rng(5)
    mel = rng.normal(size=(20, 12))
    noise = rng.normal(size=(20, 12))
    small = mcd_metric(mel + 0.1 * noise, mel)
    large = mcd_metric(mel + 0.3 * noise, mel)
    assert 0.0 < small < large


def test_mcd_dtw_absorbs_frame_doubling():
    rng = np.random.default_rng(6)
    mel = rng.normal(size=(12, 10))
    doubled = np.repeat(mel, 2, axis=0)
    assert mcd_metric(doubled, mel) == pytest.approx(0.0, abs=1e-9)


def test_mcd_caps_coefficients_at_bin_count():
    rng = np.random.default_rng(7)
    mel = rng.normal(size=(10, 8))  # only 7 non-loudness coefficients exist
    assert mcd_metric(mel + 0.5, mel) == pytest.approx(0.0, abs=1e-8)


def test_mcd_input_validation():
    mel = np.zeros((4, 8))
    with pytest.raises(InputError):
        mcd_metric(np.zeros((0, 8)), mel)
    with pytest.raises(InputError):
        mcd_metric(np.zeros((4, 6)), mel)
    with pytest.raises(InputError):
        mcd_metric(np.zeros(8), mel)
    with pytest.raises(InputError):
        mcd_metric(np.zeros((4, 1)), np.zeros((4, 1)))


# -----------------------------------------------------------------------------
# word error rate
# -----------------------------------------------------------------------------


def test_word_error_rate_basics():
    assert word_error_rate("a b c", "a b c") == 0.0
    assert word_error_rate("a x c", "a b c") == pytest.approx(100.0 / 3)
    assert word_error_rate("a b c d", "a b c") == pytest.approx(100.0 / 3)
    assert word_error_rate("", "a b") == 100.0
    with pytest.raises(InputError):
        word_error_rate("something", "")


def test_wer_external_runs_command(tmp_path):
    wav = tmp_path / "x.wav"
    wav.write_bytes(b"")
    cmd = [sys.executable, "-c", "print('hello world')"]
    stat = wer_external(cmd, [(str(wav), "hello world"), (str(wav), "hello there")])
    assert stat.mean == pytest.approx(25.0)  # 0% and 50%
    assert stat.n_used == 2

    failing = [sys.executable, "-c", "import sys; sys.exit(3)"]
    with pytest.raises(InputError, match="exit 3"):
        wer_external(failing, [(str(wav), "hello")])
    with pytest.raises(InputError):
        wer_external(cmd, [])


# -----------------------------------------------------------------------------
# evaluate and report assembly
# -----------------------------------------------------------------------------


def _toy_utterances(n=4, frames=20, mels=12):
    rng = np.random.default_rng(8)
    utts = []
    for i in range(n):
        f0 = np.where(rng.random(frames) < 0.25, 0.0, rng.uniform(90, 280, frames))
        utts.append(Utterance(
            utt_id=f"u{i}", speaker=f"s{i % 2}", split="val",
            phonemes=np.arange(3),
            mel=rng.normal(size=(frames, mels)).astype(np.float32),
            f0=f0.astype(np.float32),
            energy=rng.uniform(0.2, 1.0, frames).astype(np.float32),
        ))
    return utts


def _embedder(mel):
    return np.asarray(mel, dtype=np.float64).mean(axis=0) + 1.0


def test_evaluate_reference_against_itself():
    utts = _toy_utterances()
    report = evaluate(
        lambda u: (u.mel, {"f0": u.f0}), utts, _embedder,
        trainable_params=500, backbone_params=10_000,
    )
    assert len(report.rows) == len(utts)
    assert report.n_failed == 0
    assert report.cos.mean == pytest.approx(100.0, abs=1e-6)
    assert report.ffe.mean == 0.0
    assert report.mcd.mean == pytest.approx(0.0, abs=1e-6)
    assert report.trainable_params == 500
    assert report.trainable_pct == pytest.approx(5.0)


def test_evaluate_records_and_excludes_failures():
    utts = _toy_utterances()

    def synth(u):
        if u.utt_id == "u2":
            raise ValueError("synthetic blowup")
        return u.mel, {"f0": u.f0}

    report = evaluate(synth, utts, _embedder)
    assert len(report.rows) == len(utts)
    assert report.n_failed == 1
    failed = [r for r in report.rows if r.error][0]
    assert failed.utt_id == "u2" and "synthetic blowup" in failed.error
    assert report.cos.n_used == len(utts) - 1

    with pytest.raises(InputError):
        evaluate(lambda u: (_ for _ in ()).throw(ValueError("no")), utts, _embedder)
    with pytest.raises(InputError):
        evaluate(synth, [], _embedder)


def test_report_text_and_json(tmp_path):
    utts = _toy_utterances()
    report = evaluate(lambda u: (u.mel, {"f0": u.f0}), utts, _embedder,
                      trainable_params=42, backbone_params=1000)
    text = report.to_text()
    assert text.splitlines()[0] == "utt_id\tspeaker\tcos\tffe\tmcd\terror"
    assert "standard error" in text
    assert "trainable_params\t42" in text

    report.write(str(tmp_path))
    with open(tmp_path / "report.json") as f:
        data = json.load(f)
    assert data["aggregate"]["cos"]["mean"] == pytest.approx(100.0, abs=1e-6)
    assert data["params"]["trainable"] == 42
    assert data["dispersion"] == "standard error"
    assert len(data["rows"]) == len(utts)
    assert (tmp_path / "report.tsv").exists()
