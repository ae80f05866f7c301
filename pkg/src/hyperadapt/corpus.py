"""Deterministic synthetic multi-speaker corpus, generated directly in
feature space so ground-truth durations are exact and no vocoder enters the
loop.

Each speaker is a latent tuple (base log-F0, speaking rate, gain, spectral
tilt) plus a per-speaker "quirk" vector added to every mel frame. Pretrain
speakers sit on an even grid of the latent ranges; adaptation speakers sit at
grid midpoints, and their quirk vectors are orthogonalized against the span of
the pretrain quirks, so nothing seen during pretraining can explain them.
That construction is what makes zero-shot conditioning measurably worse than
adapted strategies on the held-out set.

Embeddings come from a fixed random projection of per-utterance mel
statistics through tanh, unit-normalized. The projection seed is a module
constant, independent of the corpus seed, so synthesized mel can be embedded
at evaluation time without knowing how the corpus was built.
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import featio
from .errors import ConfigError, InputError
from .layers import rng_for

EMBEDDER_SEED = 1877  # fixed: the embedder is a stand-in for an external model

F0_FLOOR = 50.0
F0_CEIL = 600.0


@dataclass
class CorpusSpec:
    speakers_pretrain: int = 8
    speakers_adapt: int = 4
    utts_per_speaker: int = 50
    vocab_size: int = 32
    n_mels: int = 20
    d_spk: int = 24
    val_fraction: float = 0.2
    min_phonemes: int = 8
    max_phonemes: int = 14
    texture: float = 0.05   # per-utterance mel noise floor
    jitter: float = 0.02    # embedding jitter magnitude
    quirk_scale: float = 2.4

    def __post_init__(self):
        if self.speakers_pretrain < 2 or self.speakers_adapt < 2:
            raise ConfigError("corpus needs at least 2 speakers in each split")
        if self.vocab_size < 4:
            raise ConfigError("phoneme vocabulary must have at least 4 entries")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.min_phonemes < 1 or self.max_phonemes < self.min_phonemes:
            raise ConfigError("bad phoneme length range")

    def to_dict(self):
        return asdict(self)


@dataclass
class SpeakerLatent:
    log_f0: float
    rate: float
    gain: float
    tilt: float
    quirk: np.ndarray


@dataclass
class Utterance:
    utt_id: str
    speaker: str
    split: str
    phonemes: np.ndarray
    mel: np.ndarray
    f0: np.ndarray
    energy: np.ndarray
    durations: np.ndarray = None
    embedding: np.ndarray = None


# -----------------------------------------------------------------------------
# phoneme inventory and speaker latents
# -----------------------------------------------------------------------------


def phoneme_tables(spec, seed):
    """Per-phoneme prototype spectrum, base duration, voicing, pitch offset,
    and energy amplitude. Deterministic in (spec, seed)."""
    rng = rng_for(seed, "phonemes")
    v = spec.vocab_size
    proto = (rng.normal(size=(v, spec.n_mels)) * 0.3).astype(np.float64)
    base_dur = 2 + (np.arange(v) * 7) % 5            # integers in [2, 6]
    voiced = (np.arange(v) % 4) != 0                 # three voiced in four
    pitch_off = rng.uniform(-0.18, 0.28, size=v)     # log-Hz offsets
    energy_amp = rng.uniform(0.35, 1.0, size=v)
    return {
        "proto": proto,
        "base_dur": base_dur.astype(np.int64),
        "voiced": voiced,
        "pitch_off": pitch_off,
        "energy_amp": energy_amp,
    }


def _grid(lo, hi, k, phase=0.0):
    # phase 0.5 puts values at midpoints of the k-point grid
    return [lo + (hi - lo) * (i + phase) / max(k - 1 + phase * 2, 1) for i in range(k)]


def _orthogonal_quirks(spec, seed, names):
    """One unit quirk per speaker, Gram-Schmidt orthogonalized in listed order
    while n_mels has room. Orthogonality keeps speakers maximally distinct and
    guarantees adaptation quirks lie outside everything pretraining saw."""
    done = []
    for name in names:
        group, idx = name.split("_")
        q = rng_for(seed, "quirk", group, int(idx)).normal(size=spec.n_mels)
        for prev in done:
            if len(done) >= spec.n_mels:
                break
            q = q - (q @ prev) * prev
        q /= np.linalg.norm(q)
        done.append(q)
    return {name: q * spec.quirk_scale for name, q in zip(names, done)}


def _permuted_grid(lo, hi, k, seed, group, name, phase=0.0):
    # shuffled assignment decorrelates the latent dimensions across speakers
    vals = _grid(lo, hi, k, phase)
    perm = rng_for(seed, "latperm", group, name).permutation(k)
    return [vals[perm[i]] for i in range(k)]


def speaker_latents(spec, seed):
    """speaker id -> SpeakerLatent. Pretrain speakers cover even grids of the
    latent ranges; adaptation speakers sit at midpoints. Quirk vectors are
    mutually orthogonal across the whole corpus."""
    names = [f"pre_{i:02d}" for i in range(spec.speakers_pretrain)]
    names += [f"adp_{i:02d}" for i in range(spec.speakers_adapt)]
    quirks = _orthogonal_quirks(spec, seed, names)
    out = {}
    for group, k, phase in (("pre", spec.speakers_pretrain, 0.0), ("adp", spec.speakers_adapt, 0.5)):
        f0s = _grid(np.log(120.0), np.log(260.0), k, phase)
        rates = _permuted_grid(0.8, 1.4, k, seed, group, "rate", phase)
        gains = _permuted_grid(0.6, 1.3, k, seed, group, "gain", phase)
        tilts = _permuted_grid(-0.3, 0.3, k, seed, group, "tilt", phase)
        for i in range(k):
            name = f"{group}_{i:02d}"
            out[name] = SpeakerLatent(
                log_f0=f0s[i], rate=rates[i], gain=gains[i], tilt=tilts[i],
                quirk=quirks[name],
            )
    return out


# -----------------------------------------------------------------------------
# utterance synthesis rule
# -----------------------------------------------------------------------------


def synth_utterance(spec, tables, latent, phonemes, texture_rng):
    """(mel, f0, energy, durations) for one phoneme sequence and speaker.

    Durations: max(1, round(base_dur * rate)) per phoneme, so doubling the
    rate latent exactly doubles the total (base durations are integers).
    """
    phonemes = np.asarray(phonemes, dtype=np.int64)
    durs = np.maximum(1, np.rint(tables["base_dur"][phonemes] * latent.rate)).astype(np.int64)
    m = int(durs.sum())
    frame_phone = np.repeat(phonemes, durs)
    t = np.arange(m, dtype=np.float64)
    decl = t / max(m - 1, 1)

    log_f0 = latent.log_f0 + tables["pitch_off"][frame_phone] - 0.12 * decl
    f0 = np.where(
        tables["voiced"][frame_phone],
        np.clip(np.exp(log_f0), F0_FLOOR, F0_CEIL),
        0.0,
    )

    energy = latent.gain * tables["energy_amp"][frame_phone] * (1.0 - 0.25 * decl)
    energy = energy * (1.0 + 0.05 * np.sin(0.7 * t))

    mel = tables["proto"][frame_phone].copy()
    mel += latent.tilt * np.linspace(-1.0, 1.0, spec.n_mels)
    mel += np.log(latent.gain)
    mel += latent.quirk
    mel += np.log(np.maximum(energy, 1e-3))[:, None] * 0.3
    # one-frame crossfade at phoneme boundaries keeps the sequence non-blocky
    starts = np.cumsum(durs)[:-1]
    for s in starts:
        mel[s] = 0.5 * (mel[s] + mel[s - 1])
    mel += texture_rng.normal(size=mel.shape) * spec.texture
    return (
        mel.astype(np.float32),
        f0.astype(np.float32),
        energy.astype(np.float32),
        durs,
    )


# -----------------------------------------------------------------------------
# speaker embeddings
# -----------------------------------------------------------------------------


def _embed_projection(n_mels, d_spk):
    rng = rng_for(EMBEDDER_SEED, "projection", n_mels, d_spk)
    return (rng.normal(size=(d_spk, n_mels)) / np.sqrt(n_mels)).astype(np.float64)


def synthetic_embedding(mel, d_spk, jitter=0.0, stream=()):
    """Unit-norm embedding from the utterance's mean spectrum; same mel ->
    same embedding.

    The mean is centered across mel bins first, making the embedding
    invariant to overall loudness, the way a speaker-verification model
    would be. jitter > 0 adds a deterministic per-stream perturbation
    before renormalizing, modelling embedder noise between utterances.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[0] < 1:
        raise InputError(f"embedding needs a (frames, n_mels) mel, got {mel.shape}")
    stats = mel.mean(axis=0)
    stats = stats - stats.mean()
    v = np.tanh(_embed_projection(mel.shape[1], d_spk) @ stats)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise InputError("degenerate mel produced a zero embedding")
    v = v / norm
    if jitter:
        noise = rng_for(EMBEDDER_SEED, "jitter", *stream).normal(size=d_spk)
        v = v + jitter * noise / np.linalg.norm(noise)
        v = v / np.linalg.norm(v)
    return v.astype(np.float32)


def speaker_embed(features, mode, d_spk=None, path=None, jitter=0.0, stream=()):
    """Embedding provisioning: 'file' loads a stored vector, 'synthetic'
    derives one from the utterance's mel."""
    if mode == "file":
        vec = featio.read_array(path)
        if vec.ndim != 1 or (d_spk is not None and vec.shape[0] != d_spk):
            raise InputError(f"stored embedding {vec.shape} does not match d_spk={d_spk}")
        return vec.astype(np.float32)
    if mode == "synthetic":
        if d_spk is None:
            raise InputError("synthetic embedding needs d_spk")
        return synthetic_embedding(features, d_spk, jitter=jitter, stream=stream)
    raise InputError(f"unknown embedding mode {mode!r}")


# -----------------------------------------------------------------------------
# corpus generation and loading
# -----------------------------------------------------------------------------


def generate_corpus(spec, seed, out_dir):
    """Write the full corpus under out_dir; returns the manifest path.

    Deterministic: same (spec, seed) produces byte-identical trees.
    """
    os.makedirs(out_dir, exist_ok=True)
    tables = phoneme_tables(spec, seed)
    latents = speaker_latents(spec, seed)
    n_val = max(1, int(round(spec.utts_per_speaker * spec.val_fraction)))
    entries = []
    for sid in sorted(latents):
        latent = latents[sid]
        spk_dir = os.path.join(out_dir, sid)
        os.makedirs(spk_dir, exist_ok=True)
        for u in range(spec.utts_per_speaker):
            utt_id = f"{sid}_u{u:03d}"
            rng_text = rng_for(seed, "text", sid, u)
            n = int(rng_text.integers(spec.min_phonemes, spec.max_phonemes + 1))
            phonemes = rng_text.integers(0, spec.vocab_size, size=n).astype(np.int64)
            mel, f0, energy, durs = synth_utterance(
                spec, tables, latent, phonemes, rng_for(seed, "texture", utt_id)
            )
            emb = synthetic_embedding(mel, spec.d_spk, spec.jitter, stream=(utt_id,))
            rel = {
                "phonemes": f"{sid}/{utt_id}.phon",
                "mel": f"{sid}/{utt_id}.mel.bin",
                "f0": f"{sid}/{utt_id}.f0.bin",
                "energy": f"{sid}/{utt_id}.energy.bin",
                "durations": f"{sid}/{utt_id}.dur.bin",
                "embedding": f"{sid}/{utt_id}.emb.bin",
            }
            featio.write_phonemes(os.path.join(out_dir, rel["phonemes"]), phonemes)
            featio.write_array(os.path.join(out_dir, rel["mel"]), mel)
            featio.write_array(os.path.join(out_dir, rel["f0"]), f0)
            featio.write_array(os.path.join(out_dir, rel["energy"]), energy)
            featio.write_array(os.path.join(out_dir, rel["durations"]), durs)
            featio.write_array(os.path.join(out_dir, rel["embedding"]), emb)
            entries.append(featio.ManifestEntry(
                utt_id=utt_id,
                speaker=sid,
                split="val" if u < n_val else "train",
                **rel,
            ))
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    featio.write_manifest(manifest_path, entries)
    spec_path = os.path.join(out_dir, "corpus.json")
    tmp = spec_path + ".tmp"
    with open(tmp, "w") as f:
        json.dump({"seed": seed, "spec": spec.to_dict()}, f, sort_keys=True, indent=2)
        f.write("\n")
    os.replace(tmp, spec_path)
    return manifest_path


def is_adaptation_speaker(speaker):
    return speaker.startswith("adp_")


def filter_entries(entries, *, adaptation=None, split=None):
    out = entries
    if adaptation is not None:
        out = [e for e in out if is_adaptation_speaker(e.speaker) == adaptation]
    if split is not None:
        out = [e for e in out if e.split == split]
    return out


def load_utterance(entry, base_dir):
    """Read every feature file an entry references."""
    def path(rel):
        return os.path.join(base_dir, rel)

    return Utterance(
        utt_id=entry.utt_id,
        speaker=entry.speaker,
        split=entry.split,
        phonemes=np.asarray(featio.read_phonemes(path(entry.phonemes)), dtype=np.int64),
        mel=featio.read_array(path(entry.mel)),
        f0=featio.read_array(path(entry.f0)),
        energy=featio.read_array(path(entry.energy)),
        durations=featio.read_array(path(entry.durations)) if entry.durations else None,
        embedding=featio.read_array(path(entry.embedding)) if entry.embedding else None,
    )


def load_corpus(manifest_path, *, adaptation=None, split=None):
    """Manifest -> list of fully loaded utterances, order as listed."""
    entries = featio.read_manifest(manifest_path)
    base = featio.manifest_dir(manifest_path)
    picked = filter_entries(entries, adaptation=adaptation, split=split)
    return [load_utterance(e, base) for e in picked]
