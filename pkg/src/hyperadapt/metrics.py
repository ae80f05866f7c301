"""Objective evaluation: speaker cosine similarity, F0 frame error, and
mel-cepstral distortion, plus report assembly for system comparisons.

The desk-scale speaker embedder is synthetic, so COS numbers mean nothing in
absolute terms; they exist to order systems against each other. Word error
rate has no built-in recognizer: `wer_external` shells out to a caller-provided
transcriber command instead.
"""

import json
import os
import subprocess
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.fft import dct

from . import kernels
from .errors import InputError

F0_REL_THRESHOLD = 0.2  # both-voiced frames count as errors past 20% deviation
MCD_COEFFS = 13         # cepstral coefficients 1..13; the 0th (loudness) is excluded
_MCD_SCALE = 10.0 / np.log(10.0)


@dataclass
class PairedStat:
    """Mean and standard error over a set of per-pair metric values."""

    mean: float
    stderr: float
    n_used: int
    n_excluded: int = 0


def _stat(values, n_excluded=0):
    arr = np.asarray(values, dtype=np.float64)
    stderr = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
    return PairedStat(float(arr.mean()), stderr, int(arr.size), n_excluded)


# -----------------------------------------------------------------------------
# speaker cosine similarity
# -----------------------------------------------------------------------------


def cos_metric(synth_embeddings, ref_embeddings):
    """Mean pairwise cosine similarity x100 with its standard error.

    Zero-norm embeddings have no direction; those pairs are excluded with a
    warning rather than poisoning the mean.
    """
    if len(synth_embeddings) != len(ref_embeddings):
        raise InputError(
            f"cos_metric: {len(synth_embeddings)} synth vs {len(ref_embeddings)} reference embeddings"
        )
    if not synth_embeddings:
        raise InputError("cos_metric: empty embedding lists")
    values = []
    excluded = 0
    for i, (a, b) in enumerate(zip(synth_embeddings, ref_embeddings)):
        a = np.asarray(a, dtype=np.float64).ravel()
        b = np.asarray(b, dtype=np.float64).ravel()
        if a.shape != b.shape:
            raise InputError(f"cos_metric: pair {i} dims {a.shape} vs {b.shape}")
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            warnings.warn(f"cos_metric: zero-norm embedding in pair {i}, excluded")
            excluded += 1
            continue
        values.append(100.0 * float(a @ b / (na * nb)))
    if not values:
        raise InputError("cos_metric: every pair had a zero-norm embedding")
    return _stat(values, excluded)


# -----------------------------------------------------------------------------
# F0 frame error
# -----------------------------------------------------------------------------


def ffe_metric(pred_f0, ref_f0):
    """Percentage of frames with a voicing mismatch or gross pitch error.

    Contours use 0 for unvoiced frames. Lengths must already agree; aligning
    a predicted contour onto the reference timeline is the caller's job.
    """
    pred = np.asarray(pred_f0, dtype=np.float64).ravel()
    ref = np.asarray(ref_f0, dtype=np.float64).ravel()
    if pred.shape != ref.shape:
        raise InputError(f"ffe_metric: contour lengths {pred.size} vs {ref.size}")
    if pred.size == 0:
        raise InputError("ffe_metric: empty contours")
    pred_voiced = pred > 0
    ref_voiced = ref > 0
    error = pred_voiced != ref_voiced
    both = pred_voiced & ref_voiced
    error[both] |= np.abs(pred[both] - ref[both]) > F0_REL_THRESHOLD * ref[both]
    return 100.0 * float(np.count_nonzero(error)) / error.size


def align_to_reference(pred, ref_len):
    """Nearest-frame resample of a per-frame track onto `ref_len` frames.

    Nearest-neighbor indexing keeps voicing decisions and exact values intact
    where linear interpolation would smear voiced/unvoiced boundaries.
    """
    pred = np.asarray(pred)
    if pred.shape[0] == 0 or ref_len < 1:
        raise InputError("align_to_reference: empty track")
    idx = np.rint(np.linspace(0.0, pred.shape[0] - 1, ref_len)).astype(np.int64)
    return pred[idx]


# -----------------------------------------------------------------------------
# mel cepstral distortion
# -----------------------------------------------------------------------------


def mcd_metric(pred_mel, ref_mel, n_coeffs=MCD_COEFFS):
    """Mean cepstral distance in dB over DTW-paired frames.

    Cepstra are the orthonormal DCT of each log-mel frame; coefficient 0 is
    dropped so a uniform gain offset contributes nothing. DTW pairing absorbs
    the frame-count mismatch between predicted and reference durations.
    """
    pred = np.asarray(pred_mel, dtype=np.float64)
    ref = np.asarray(ref_mel, dtype=np.float64)
    if pred.ndim != 2 or ref.ndim != 2:
        raise InputError(f"mcd_metric: expected 2-D mels, got {pred.ndim}-D and {ref.ndim}-D")
    if pred.shape[0] == 0 or ref.shape[0] == 0:
        raise InputError("mcd_metric: empty mel")
    if pred.shape[1] != ref.shape[1]:
        raise InputError(f"mcd_metric: mel widths {pred.shape[1]} vs {ref.shape[1]}")
    if pred.shape[1] < 2:
        raise InputError("mcd_metric: need at least 2 mel bins for cepstra")
    k = min(n_coeffs, pred.shape[1] - 1)
    cp = dct(pred, type=2, norm="ortho", axis=1)[:, 1 : k + 1]
    cr = dct(ref, type=2, norm="ortho", axis=1)[:, 1 : k + 1]

    sq = ((cp[:, None, :] - cr[None, :, :]) ** 2).sum(axis=2)
    dist = _MCD_SCALE * np.sqrt(2.0 * sq)
    path = kernels.dtw_path(dist)
    return float(dist[path[:, 0], path[:, 1]].mean())


# -----------------------------------------------------------------------------
# word error rate (external transcriber only)
# -----------------------------------------------------------------------------


def word_error_rate(hypothesis, reference):
    """Word-level edit distance as a percentage of the reference length."""
    ref = reference.split()
    hyp = hypothesis.split()
    if not ref:
        raise InputError("word_error_rate: empty reference transcript")
    prev = list(range(len(hyp) + 1))
    for i, rw in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, hw in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (rw != hw))
        prev = cur
    return 100.0 * prev[-1] / len(ref)


def wer_external(command, items):
    """Score waveforms with a caller-provided transcriber.

    `command` is an argv prefix; each audio path is appended as the final
    argument and the transcript is read from stdout. `items` pairs audio paths
    with reference transcripts.
    """
    if not items:
        raise InputError("wer_external: nothing to score")
    values = []
    for path, ref_text in items:
        proc = subprocess.run(
            list(command) + [str(path)], capture_output=True, text=True
        )
        if proc.returncode != 0:
            raise InputError(
                f"wer_external: transcriber failed on {path} "
                f"(exit {proc.returncode}): {proc.stderr.strip()}"
            )
        values.append(word_error_rate(proc.stdout.strip(), ref_text))
    return _stat(values)


# -----------------------------------------------------------------------------
# report assembly
# -----------------------------------------------------------------------------


@dataclass
class EvalRow:
    utt_id: str
    speaker: str
    cos: float = None
    ffe: float = None
    mcd: float = None
    error: str = None


@dataclass
class EvalReport:
    """Per-utterance metric rows plus aggregates and parameter accounting."""

    rows: list
    cos: PairedStat
    ffe: PairedStat
    mcd: PairedStat
    trainable_params: int = 0
    trainable_pct: float = 0.0

    @property
    def n_failed(self):
        return sum(1 for r in self.rows if r.error is not None)

    def to_dict(self):
        return {
            "rows": [asdict(r) for r in self.rows],
            "aggregate": {
                "cos": asdict(self.cos),
                "ffe": asdict(self.ffe),
                "mcd": asdict(self.mcd),
            },
            "params": {
                "trainable": self.trainable_params,
                "trainable_pct": self.trainable_pct,
            },
            "failures": self.n_failed,
            "dispersion": "standard error",
        }

    def to_text(self):
        lines = ["utt_id\tspeaker\tcos\tffe\tmcd\terror"]
        for r in self.rows:
            if r.error is not None:
                lines.append(f"{r.utt_id}\t{r.speaker}\t-\t-\t-\t{r.error}")
            else:
                lines.append(
                    f"{r.utt_id}\t{r.speaker}\t{r.cos:.3f}\t{r.ffe:.3f}\t{r.mcd:.3f}\t"
                )
        lines.append("")
        lines.append("metric\tmean\tstderr\tn  (dispersion is standard error)")
        for name, stat in (("cos", self.cos), ("ffe", self.ffe), ("mcd", self.mcd)):
            lines.append(f"{name}\t{stat.mean:.3f}\t(±{stat.stderr:.3f})\t{stat.n_used}")
        lines.append(
            f"trainable_params\t{self.trainable_params}\t({self.trainable_pct:.3f}%)"
        )
        if self.n_failed:
            lines.append(f"synthesis_failures\t{self.n_failed}\tof {len(self.rows)}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        tsv = os.path.join(out_dir, "report.tsv")
        with open(tsv, "w") as f:
            f.write(self.to_text())
        with open(os.path.join(out_dir, "report.json"), "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return tsv


def evaluate(synthesize_fn, utterances, embedder, *, trainable_params=0,
             backbone_params=0, n_coeffs=MCD_COEFFS):
    """Synthesize every utterance and score it against its reference features.

    `synthesize_fn(utt) -> (mel, info)` must provide info["f0"]; `embedder`
    maps a mel to a fixed-size vector. A synthesis failure is recorded on its
    row and excluded from the aggregates.
    """
    if not utterances:
        raise InputError("evaluate: empty utterance list")
    rows = []
    cos_vals, ffe_vals, mcd_vals = [], [], []
    for utt in utterances:
        try:
            mel, info = synthesize_fn(utt)
            cos = cos_metric([embedder(mel)], [embedder(utt.mel)]).mean
            pred_f0 = align_to_reference(np.asarray(info["f0"]), utt.f0.shape[0])
            ffe = ffe_metric(pred_f0, utt.f0)
            mcd = mcd_metric(mel, utt.mel, n_coeffs=n_coeffs)
        except Exception as e:  # recorded per row, excluded from aggregates
            rows.append(EvalRow(utt.utt_id, utt.speaker,
                                error=f"{type(e).__name__}: {e}"))
            continue
        rows.append(EvalRow(utt.utt_id, utt.speaker, cos=cos, ffe=ffe, mcd=mcd))
        cos_vals.append(cos)
        ffe_vals.append(ffe)
        mcd_vals.append(mcd)
    if not cos_vals:
        raise InputError("evaluate: synthesis failed on every utterance")
    pct = 100.0 * trainable_params / backbone_params if backbone_params else 0.0
    return EvalReport(
        rows=rows,
        cos=_stat(cos_vals),
        ffe=_stat(ffe_vals),
        mcd=_stat(mcd_vals),
        trainable_params=trainable_params,
        trainable_pct=pct,
    )
