"""Schedule, loss assembly, optimizer, and the two training loops."""

import dataclasses
import os

import numpy as np
import pytest

import hyperadapt.autodiff as ad
import hyperadapt.training as tr
from hyperadapt import featio
from hyperadapt import variance as var_mod
from hyperadapt.adaptation import AdapterDims, StrategyConfig, count_trainable_params
from hyperadapt.alignment import AlignmentMap
from hyperadapt.autodiff import Tensor
from hyperadapt.corpus import CorpusSpec, Utterance, generate_corpus, load_corpus
from hyperadapt.errors import (
    ConfigError,
    InputError,
    InternalInvariantError,
    NumericsError,
    StateError,
)
from hyperadapt.layers import RunCtx, rng_for
from hyperadapt.model import ModelConfig, TTSModel
from hyperadapt.training import (
    LOSS_NAMES,
    Adam,
    LossBreakdown,
    ScheduleConfig,
    adaptation_schedule,
    compute_losses,
    loss_weights,
    lr_at,
)

TRAIN_CFG = ModelConfig(
    vocab_size=32, n_mels=20, d_h=24, heads=2, enc_layers=1, dec_layers=1,
    d_spk=24, d_attn=12, postnet_channels=16, postnet_layers=3,
)

DIMS = AdapterDims(d_h=24, d_r=3, d_1=24, d_2=8, d_l=4, d_s=3)

SCHED = ScheduleConfig(
    peak_lr=1e-3, warmup_steps=2, milestones=(6,), duration_start_step=3,
    total_steps=8, batch_size=2, binarization_ramp_steps=2,
)


@pytest.fixture(scope="module")
def corpus_manifest(tmp_path_factory):
    spec = CorpusSpec(speakers_pretrain=2, speakers_adapt=2, utts_per_speaker=4)
    out = tmp_path_factory.mktemp("corpus")
    return generate_corpus(spec, seed=11, out_dir=str(out))


@pytest.fixture(scope="module")
def pretrained(corpus_manifest, tmp_path_factory):
    run = tmp_path_factory.mktemp("pretrain_run")
    ck = tr.pretrain(corpus_manifest, TRAIN_CFG, SCHED, str(run), seed=3, ckpt_every=4)
    return ck, str(run)


@pytest.fixture(scope="module")
def adapted(pretrained, corpus_manifest, tmp_path_factory):
    ck, _ = pretrained
    run = tmp_path_factory.mktemp("adapt_run")
    sched = adaptation_schedule(steps=3, batch_size=2)
    out = tr.adapt(ck, corpus_manifest, "hyper_ev", sched, str(run), seed=5,
                   dims=DIMS, log_every=1)
    return out, str(run)


# -----------------------------------------------------------------------------
# schedule
# -----------------------------------------------------------------------------


@pytest.mark.parametrize("kwargs", [
    {"peak_lr": 0.0},
    {"warmup_steps": 10, "milestones": (5,)},
    {"milestones": (30, 20)},
    {"anneal_factor": 0.0},
    {"anneal_factor": 1.5},
    {"total_steps": 0},
    {"batch_size": 0},
])
def test_schedule_validation(kwargs):
    with pytest.raises(ConfigError):
        ScheduleConfig(**kwargs)


def test_lr_at_contract():
    sched = ScheduleConfig(peak_lr=1e-3, warmup_steps=5, milestones=(10, 20, 30),
                           total_steps=40)
    assert lr_at(sched, 0) == 0.0
    assert lr_at(sched, 2) == pytest.approx(0.4e-3)
    assert lr_at(sched, 5) == pytest.approx(1e-3)
    assert lr_at(sched, 9) == pytest.approx(1e-3)
    assert lr_at(sched, 10) == pytest.approx(0.3e-3)
    # just past the second milestone: peak * factor^2
    assert lr_at(sched, 21) == pytest.approx(1e-3 * 0.09)
    assert lr_at(sched, 30) == pytest.approx(1e-3 * 0.027)
    with pytest.raises(InputError):
        lr_at(sched, -1)


def test_adaptation_schedule_is_constant():
    sched = adaptation_schedule(steps=50, lr=2e-4)
    assert [lr_at(sched, s) for s in (0, 1, 25, 50)] == [2e-4] * 4


def test_loss_weights_gate_and_ramp():
    sched = ScheduleConfig(warmup_steps=2, milestones=(20,), duration_start_step=10,
                           total_steps=30, binarization_ramp_steps=4)
    gated = ("duration", "pitch_spec", "pitch_mean", "pitch_var", "energy")
    before = loss_weights(sched, 9)
    assert all(before[k] == 0.0 for k in gated)
    assert before["binarization"] == 0.0
    assert before["mel_pre"] == before["mel_post"] == before["forward_sum"] == 1.0

    at_start = loss_weights(sched, 10)
    assert all(at_start[k] == 1.0 for k in gated)
    assert at_start["binarization"] == 0.0
    assert loss_weights(sched, 12)["binarization"] == pytest.approx(0.5)
    assert loss_weights(sched, 14)["binarization"] == 1.0
    assert loss_weights(sched, 25)["binarization"] == 1.0


# -----------------------------------------------------------------------------
# loss assembly
# -----------------------------------------------------------------------------


class _EchoModel:
    """Returns the training targets themselves; every component must be 0."""

    def forward_train(self, phonemes, mel, f0, energy, spk, ctx, hooks=None,
                      prior_strength=0.0):
        frames = mel.shape[0]
        durations = np.array([frames], dtype=np.int64)  # one phoneme, every frame
        spec, mean, var = var_mod.pitch_targets(f0.astype(np.float64))
        amap = AlignmentMap(Tensor(np.zeros((1, frames), dtype=np.float32)),
                            hard_path=np.zeros(frames, dtype=np.int64))
        return {
            "mel_pre": Tensor(np.asarray(mel, dtype=np.float32)),
            "mel_post": Tensor(np.asarray(mel, dtype=np.float32)),
            "log_dur": Tensor(np.log(durations).astype(np.float32)),
            "pitch_spec": Tensor(spec.astype(np.float32)),
            "pitch_mean": Tensor(np.array([mean], dtype=np.float32)),
            "pitch_var": Tensor(np.array([var], dtype=np.float32)),
            "energy": Tensor(energy.astype(np.float32)),
            "amap": amap,
            "durations": durations,
        }


def _toy_utterance(frames=24):
    rng = np.random.default_rng(4)
    return Utterance(
        utt_id="toy", speaker="spk", split="train",
        phonemes=np.array([1]),
        mel=rng.normal(size=(frames, 6)).astype(np.float32),
        f0=rng.uniform(100.0, 200.0, frames).astype(np.float32),
        energy=rng.uniform(0.5, 1.0, frames).astype(np.float32),
    )


def test_exact_predictions_zero_every_component():
    sched = adaptation_schedule(steps=10)
    total, bd = compute_losses(_EchoModel(), _toy_utterance(), 1, sched,
                               RunCtx(training=False))
    assert all(bd.components[k] == 0.0 for k in LOSS_NAMES)
    assert bd.total == 0.0
    assert float(total.data) == 0.0


def test_total_matches_manual_weighted_sum(pretrained, corpus_manifest):
    ck, _ = pretrained
    model = tr.load_checkpoint(ck).model
    utt = load_corpus(corpus_manifest, adaptation=False, split="train")[0]
    sched = adaptation_schedule(steps=10)
    total, bd = compute_losses(model, utt, 5, sched, RunCtx(training=False))
    manual = sum(bd.weights[k] * bd.components[k] for k in LOSS_NAMES)
    assert bd.total == pytest.approx(manual, abs=1e-9)
    # the graph scalar is the same quantity accumulated in float32
    assert float(total.data) == pytest.approx(manual, rel=1e-5)
    bd.check_consistent()


def test_gated_components_stay_out_of_graph(pretrained, corpus_manifest):
    ck, _ = pretrained
    model = tr.load_checkpoint(ck).model
    utt = load_corpus(corpus_manifest, adaptation=False, split="train")[0]
    sched = ScheduleConfig(warmup_steps=2, milestones=(20,), duration_start_step=10,
                           total_steps=30)
    total, bd = compute_losses(model, utt, 0, sched, RunCtx(training=False))
    # gated components are still reported for the log
    assert bd.components["duration"] > 0.0
    assert bd.weights["duration"] == 0.0
    expected = bd.components["mel_pre"] + bd.components["mel_post"] + bd.components["forward_sum"]
    assert float(total.data) == pytest.approx(expected, rel=1e-5)


def test_total_gradient_matches_fd(monkeypatch, pretrained, corpus_manifest):
    # run the whole pass in float64 so the FD oracle is meaningful
    monkeypatch.setattr(ad, "DEFAULT_DTYPE", np.float64)
    ck, _ = pretrained
    meta, arrays = featio.read_checkpoint(ck)
    model = TTSModel(ModelConfig.from_dict(meta["model_config"]), seed=0)
    model.load_state_arrays({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    model.set_ranges(meta["pitch_range"], meta["energy_range"])
    for _, p in model.named_parameters():
        p.data = p.data.astype(np.float64)

    utt = load_corpus(corpus_manifest, adaptation=False, split="train")[0]
    sched = adaptation_schedule(steps=10)

    def loss():
        total, _ = compute_losses(model, utt, 5, sched, RunCtx(training=False))
        return total

    picks = []
    for probe in ("embed.table", "duration", "postnet"):
        picks.append(next((n, p) for n, p in model.named_parameters() if probe in n))
    grads = ad.grads_for(loss(), picks)

    eps = 1e-6
    for name, p in picks:
        g = grads[name]
        idx = np.unravel_index(np.argmax(np.abs(g)), g.shape)
        keep = p.data[idx]
        p.data[idx] = keep + eps
        up = float(loss().data)
        p.data[idx] = keep - eps
        down = float(loss().data)
        p.data[idx] = keep
        fd = (up - down) / (2.0 * eps)
        assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), abs(g[idx]), 1e-3), name


def test_nonfinite_component_is_named(pretrained, corpus_manifest):
    ck, _ = pretrained
    model = tr.load_checkpoint(ck).model  # fresh instance, safe to poison
    model.encoder.embed.table.data[:] = np.nan
    utt = load_corpus(corpus_manifest, adaptation=False, split="train")[0]
    with pytest.raises(NumericsError, match="mel_pre"):
        compute_losses(model, utt, 5, adaptation_schedule(steps=10),
                       RunCtx(training=False))


def test_breakdown_consistency_guard():
    comps = {k: 1.0 for k in LOSS_NAMES}
    weights = {k: 1.0 for k in LOSS_NAMES}
    LossBreakdown(comps, weights, float(len(LOSS_NAMES))).check_consistent()
    with pytest.raises(InternalInvariantError):
        LossBreakdown(comps, weights, len(LOSS_NAMES) + 0.1).check_consistent()


def test_breakdown_average_and_row():
    w = {k: 1.0 for k in LOSS_NAMES}
    a = LossBreakdown({k: 1.0 for k in LOSS_NAMES}, w, float(len(LOSS_NAMES)))
    b = LossBreakdown({k: 3.0 for k in LOSS_NAMES}, w, 3.0 * len(LOSS_NAMES))
    avg = LossBreakdown.average([a, b])
    assert all(avg.components[k] == 2.0 for k in LOSS_NAMES)
    assert avg.total == pytest.approx(2.0 * len(LOSS_NAMES))
    row = a.row()
    assert len(row) == len(LOSS_NAMES) + 1 and row[-1] == a.total


# -----------------------------------------------------------------------------
# optimizer and batching
# -----------------------------------------------------------------------------


def _named_tensor_set(seed):
    rng = rng_for(seed, "adamtest")
    return [("a", Tensor(rng.normal(size=(4, 3)).astype(np.float32))),
            ("b", Tensor(rng.normal(size=(5,)).astype(np.float32)))]


def _grads_at(t, params):
    rng = rng_for(1, "grad", t)
    return {name: rng.normal(size=p.data.shape).astype(np.float32) for name, p in params}


def test_adam_state_roundtrip_continues_identically():
    full = _named_tensor_set(0)
    opt_full = Adam(full)
    for t in range(6):
        opt_full.step(_grads_at(t, full), lr=1e-2)

    half = _named_tensor_set(0)
    opt_half = Adam(half)
    for t in range(3):
        opt_half.step(_grads_at(t, half), lr=1e-2)
    saved = opt_half.state_arrays()

    resumed = [(n, Tensor(p.data.copy())) for n, p in half]
    opt_res = Adam(resumed)
    opt_res.load_state_arrays(saved, t=opt_half.t)
    for t in range(3, 6):
        opt_res.step(_grads_at(t, resumed), lr=1e-2)

    for (_, p), (_, q) in zip(full, resumed):
        assert p.data.tobytes() == q.data.tobytes()


def test_adam_descends_a_quadratic():
    x = Tensor(np.array([3.0], dtype=np.float32))
    opt = Adam([("x", x)])
    for _ in range(200):
        opt.step({"x": x.data.copy()}, lr=0.1)  # grad of 0.5 x^2 is x
    assert abs(float(x.data[0])) < 0.5


def test_batcher_is_pure_and_covers_each_epoch():
    a = tr._Batcher(seed=9, n=7, batch_size=3)
    b = tr._Batcher(seed=9, n=7, batch_size=3)
    assert a.batch(5) == b.batch(5)  # b computed step 5 cold

    seq = [i for step in range(7) for i in a.batch(step)]  # 21 positions, 3 epochs
    assert sorted(seq[:7]) == list(range(7))
    assert sorted(seq[7:14]) == list(range(7))
    assert sorted(seq[14:]) == list(range(7))

    a.batch(100)  # push the permutation cache far ahead
    assert a.batch(0) == b.batch(0)


def test_compute_feature_ranges():
    def utt(f0_lo, f0_hi, e_lo, e_hi):
        frames = 10
        return Utterance(
            utt_id="u", speaker="s", split="train", phonemes=np.array([1]),
            mel=np.zeros((frames, 4), dtype=np.float32),
            f0=np.linspace(f0_lo, f0_hi, frames).astype(np.float32),
            energy=np.linspace(e_lo, e_hi, frames).astype(np.float32),
        )

    pitch, energy = tr.compute_feature_ranges(
        [utt(100.0, 200.0, 0.5, 1.0), utt(150.0, 300.0, 0.2, 0.8)]
    )
    assert pitch == (pytest.approx(np.log(100.0)), pytest.approx(np.log(300.0)))
    assert energy == (pytest.approx(0.2), pytest.approx(1.0))
    with pytest.raises(InputError):
        tr.compute_feature_ranges([])


# -----------------------------------------------------------------------------
# pretraining loop
# -----------------------------------------------------------------------------


def test_pretrain_writes_logs_and_latest(pretrained):
    ck, run = pretrained
    assert os.path.basename(ck) == "ckpt-000008.bin"
    assert open(os.path.join(run, "LATEST")).read().strip() == "ckpt-000008.bin"
    train_log = open(os.path.join(run, "train_log.tsv")).read().splitlines()
    assert train_log[0].split("\t") == ["step"] + list(LOSS_NAMES) + ["total", "lr"]
    assert os.path.exists(os.path.join(run, "val_log.tsv"))


def test_pretrain_same_seed_is_bit_identical(pretrained, corpus_manifest, tmp_path):
    ck, run = pretrained
    ck2 = tr.pretrain(corpus_manifest, TRAIN_CFG, SCHED, str(tmp_path), seed=3,
                      ckpt_every=4)
    assert open(ck, "rb").read() == open(ck2, "rb").read()
    logs = [open(os.path.join(d, "train_log.tsv")).read() for d in (run, str(tmp_path))]
    assert logs[0] == logs[1]


def test_pretrain_resume_is_bit_identical(pretrained, corpus_manifest, tmp_path):
    ck, _ = pretrained
    short = dataclasses.replace(SCHED, total_steps=4)
    tr.pretrain(corpus_manifest, TRAIN_CFG, short, str(tmp_path), seed=3, ckpt_every=4)
    resumed = tr.pretrain(corpus_manifest, TRAIN_CFG, SCHED, str(tmp_path), seed=3,
                          ckpt_every=4)
    assert open(ck, "rb").read() == open(resumed, "rb").read()


def test_pretrain_rejects_config_change_on_resume(pretrained, corpus_manifest):
    _, run = pretrained
    other = dataclasses.replace(TRAIN_CFG, d_attn=16)
    with pytest.raises(ConfigError):
        tr.pretrain(corpus_manifest, other, SCHED, run, seed=3)


def test_pretrain_rejects_foreign_checkpoint_kind(adapted, corpus_manifest, tmp_path):
    adapted_ck, _ = adapted
    import shutil

    shutil.copyfile(adapted_ck, tmp_path / "ckpt-000001.bin")
    (tmp_path / "LATEST").write_text("ckpt-000001.bin\n")
    with pytest.raises(StateError):
        tr.pretrain(corpus_manifest, TRAIN_CFG, SCHED, str(tmp_path), seed=3)


def test_pretrain_requires_embeddings(corpus_manifest, tmp_path):
    entries = featio.read_manifest(corpus_manifest)
    stripped = [dataclasses.replace(e, embedding="") for e in entries]
    noemb = os.path.join(os.path.dirname(corpus_manifest), "manifest_noemb.jsonl")
    featio.write_manifest(noemb, stripped)
    with pytest.raises(InputError):
        tr.pretrain(noemb, TRAIN_CFG, SCHED, str(tmp_path), seed=3)


def test_checkpoint_roundtrip_is_bitstable(pretrained, tmp_path):
    ck, _ = pretrained
    loaded = tr.load_checkpoint(ck)
    again = tmp_path / "again.bin"
    tr.save_checkpoint(str(again), loaded.model, loaded.meta["step"])
    meta1, arrays1 = featio.read_checkpoint(ck)
    meta2, arrays2 = featio.read_checkpoint(str(again))
    model_keys = {k for k in arrays1 if not k.startswith("opt.")}
    assert set(arrays2) == model_keys
    for k in model_keys:
        assert arrays1[k].tobytes() == arrays2[k].tobytes(), k
    for key in ("kind", "step", "model_config", "pitch_range", "energy_range"):
        assert meta1[key] == meta2[key]


def test_single_full_batch_step_does_not_increase_loss(pretrained, corpus_manifest):
    ck, _ = pretrained
    model = tr.load_checkpoint(ck).model
    batch = load_corpus(corpus_manifest, adaptation=False, split="train")[:2]
    sched = adaptation_schedule(steps=10, lr=1e-6)
    trainable = list(model.named_parameters())

    def batch_loss():
        return float(np.mean([
            compute_losses(model, u, 5, sched, RunCtx(training=False))[1].total
            for u in batch
        ]))

    before = batch_loss()
    grads = {name: np.zeros_like(p.data) for name, p in trainable}
    for u in batch:
        total, _ = compute_losses(model, u, 5, sched, RunCtx(training=False))
        for name, g in ad.grads_for(total, trainable).items():
            grads[name] += g / len(batch)
    Adam(trainable).step(grads, lr=1e-6)
    assert batch_loss() <= before


# -----------------------------------------------------------------------------
# adaptation loop
# -----------------------------------------------------------------------------


def test_adapt_tts0_is_byte_copy(pretrained, corpus_manifest, tmp_path):
    ck, _ = pretrained
    out = tr.adapt(ck, corpus_manifest, "tts0", adaptation_schedule(steps=3),
                   str(tmp_path), seed=5)
    assert open(ck, "rb").read() == open(out, "rb").read()
    log = open(tmp_path / "adapt_log.tsv").read().splitlines()
    assert "# trainable_params\t0" in log


def test_adapt_logs_trainable_count(adapted):
    _, run = adapted
    lines = open(os.path.join(run, "adapt_log.tsv")).read().splitlines()
    tagged = [l for l in lines if l.startswith("# trainable_params\t")]
    assert len(tagged) == 1
    logged = int(tagged[0].split("\t")[1])
    strategy = StrategyConfig.parse("hyper_ev", DIMS)
    expected = count_trainable_params(
        strategy, site_counts={"e": TRAIN_CFG.enc_layers, "v": 2, "d": TRAIN_CFG.dec_layers}
    )
    assert logged == expected
    assert any(l.startswith("# strategy\thyper_ev") for l in lines)
    data_rows = [l for l in lines if l and not l.startswith(("#", "step"))]
    assert len(data_rows) == 3  # log_every=1, three steps


def test_adapt_leaves_backbone_bit_identical(pretrained, adapted):
    ck, _ = pretrained
    out, _ = adapted
    _, before = featio.read_checkpoint(ck)
    _, after = featio.read_checkpoint(out)
    model_keys = {k for k in before if not k.startswith("opt.")}
    for k in model_keys:
        assert before[k].tobytes() == after[k].tobytes(), k
    assert any(k.startswith("extras.") for k in after)


def test_adapted_checkpoint_reloads_with_hooks(adapted):
    out, _ = adapted
    loaded = tr.load_checkpoint(out)
    assert loaded.meta["kind"] == "adapt"
    assert loaded.meta["strategy"] == "hyper_ev"
    assert loaded.adapted is not None
    emb = np.zeros(TRAIN_CFG.d_spk, dtype=np.float32)
    emb[0] = 1.0
    hooks = loaded.hooks_for(emb)
    assert set(hooks) == {"e", "v"}
    assert len(hooks["e"]) == TRAIN_CFG.enc_layers and len(hooks["v"]) == 2


def test_adapt_detects_frozen_tensor_drift(monkeypatch, pretrained, corpus_manifest,
                                            tmp_path):
    ck, _ = pretrained
    grabbed = {}
    real_load = tr.load_checkpoint

    def load_and_remember(path):
        loaded = real_load(path)
        grabbed["model"] = loaded.model
        return loaded

    real_step = Adam.step

    def step_and_corrupt(self, grads, lr):
        real_step(self, grads, lr)
        grabbed["model"].encoder.embed.table.data[0, 0] += 1.0

    monkeypatch.setattr(tr, "load_checkpoint", load_and_remember)
    monkeypatch.setattr(Adam, "step", step_and_corrupt)
    with pytest.raises(InternalInvariantError, match="frozen"):
        tr.adapt(ck, corpus_manifest, "hyper_e", adaptation_schedule(steps=1, batch_size=2),
                 str(tmp_path), seed=5, dims=DIMS)
