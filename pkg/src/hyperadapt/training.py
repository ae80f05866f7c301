"""Optimization: loss assembly, LR schedule, Adam, the pretraining loop, and
the adaptation loop.

Batching note: losses are computed per utterance and gradients averaged over
the batch, which is mathematically the batch-mean loss. Sequences never get
padded together; the backbone's masking support exists for callers that do.

Checkpoints carry the model tensors under their bare names, adapter-surface
tensors under "extras.", and Adam moments under "opt.m." / "opt.v." so a
resumed run continues exactly where it stopped.
"""

import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import corpus as corpus_mod
from . import featio
from . import variance as var_mod
from .adaptation import AdaptedModel, AdapterDims, StrategyConfig
from .alignment import binarization_loss, forward_sum_loss
from .autodiff import Tensor
from .errors import ConfigError, InputError, InternalInvariantError, NumericsError, StateError
from .layers import RunCtx, rng_for
from .model import ModelConfig, TTSModel

LOSS_NAMES = (
    "mel_pre", "mel_post", "duration", "pitch_spec", "pitch_mean",
    "pitch_var", "energy", "forward_sum", "binarization",
)


@dataclass
class ScheduleConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 40
    milestones: tuple = (3000, 4000, 5000)
    anneal_factor: float = 0.3
    duration_start_step: int = 500
    total_steps: int = 6000
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    binarization_ramp_steps: int = 500

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be at least 1")
        if any(m <= self.warmup_steps for m in self.milestones):
            raise ConfigError("milestones must come after warmup")
        if list(self.milestones) != sorted(self.milestones):
            raise ConfigError(f"milestones must be ascending, got {self.milestones}")
        if not 0 < self.anneal_factor <= 1:
            raise ConfigError(f"anneal_factor must be in (0, 1], got {self.anneal_factor}")


def adaptation_schedule(steps, lr=1e-4, batch_size=8):
    """Constant-rate schedule used for every adaptation strategy."""
    return ScheduleConfig(
        peak_lr=lr, warmup_steps=0, milestones=(), duration_start_step=0,
        total_steps=steps, batch_size=batch_size, binarization_ramp_steps=1,
    )


def lr_at(sched, step):
    """Linear warmup to peak, then step decay at each milestone."""
    if step < 0:
        raise InputError(f"negative step {step}")
    if sched.warmup_steps > 0 and step < sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    passed = sum(1 for m in sched.milestones if step >= m)
    return sched.peak_lr * sched.anneal_factor ** passed


@dataclass
class LossBreakdown:
    """Per-component values, the weights in force, and the weighted total."""

    components: dict
    weights: dict
    total: float

    def check_consistent(self, tol=1e-6):
        s = sum(self.weights[k] * self.components[k] for k in LOSS_NAMES)
        if abs(s - self.total) > tol:
            raise InternalInvariantError(
                f"loss total {self.total} != weighted component sum {s}"
            )

    def row(self):
        return [self.components[k] for k in LOSS_NAMES] + [self.total]

    @staticmethod
    def average(breakdowns):
        comps = {k: float(np.mean([b.components[k] for b in breakdowns])) for k in LOSS_NAMES}
        return LossBreakdown(
            components=comps,
            weights=dict(breakdowns[0].weights),
            total=float(np.mean([b.total for b in breakdowns])),
        )


def loss_weights(sched, step):
    """Variance losses switch on at duration_start_step; the binarization
    term ramps in linearly after that so the soft alignment settles first."""
    w = {k: 1.0 for k in LOSS_NAMES}
    if step < sched.duration_start_step:
        w["duration"] = w["pitch_spec"] = w["pitch_mean"] = w["pitch_var"] = w["energy"] = 0.0
        w["binarization"] = 0.0
    else:
        ramp = max(sched.binarization_ramp_steps, 1)
        w["binarization"] = min(1.0, (step - sched.duration_start_step) / ramp)
    return w


def compute_losses(model, utt, step, sched, ctx, hooks=None, pitch_cache=None):
    """(total loss Tensor, LossBreakdown) for one utterance.

    Gated components (weight 0) are still evaluated as plain numbers for the
    log, but stay out of the graph so they cost no backward work.
    """
    weights = loss_weights(sched, step)
    out = model.forward_train(
        utt.phonemes, utt.mel, utt.f0, utt.energy, utt.embedding, ctx, hooks=hooks
    )
    mel = utt.mel.astype(ad.DEFAULT_DTYPE, copy=False)
    if pitch_cache is not None and utt.utt_id in pitch_cache:
        spec_t, mean_t, var_t = pitch_cache[utt.utt_id]
    else:
        spec_t, mean_t, var_t = var_mod.pitch_targets(utt.f0.astype(np.float64))
        spec_t = spec_t.astype(ad.DEFAULT_DTYPE)
        if pitch_cache is not None:
            pitch_cache[utt.utt_id] = (spec_t, mean_t, var_t)
    log_dur_t = np.log(out["durations"]).astype(ad.DEFAULT_DTYPE)
    mean_t = np.array([mean_t], dtype=ad.DEFAULT_DTYPE)
    var_t = np.array([var_t], dtype=ad.DEFAULT_DTYPE)
    energy_t = utt.energy.astype(ad.DEFAULT_DTYPE, copy=False)

    terms = {}
    comps = {}

    def term(name, make_node, fallback):
        if weights[name] > 0.0:
            node = make_node()
            terms[name] = node
            comps[name] = float(node.data)
        else:
            comps[name] = float(fallback())

    term("mel_pre", lambda: ad.l1_loss(out["mel_pre"], mel),
         lambda: np.abs(out["mel_pre"].data - mel).mean())
    term("mel_post", lambda: ad.l1_loss(out["mel_post"], mel),
         lambda: np.abs(out["mel_post"].data - mel).mean())
    term("forward_sum", lambda: forward_sum_loss(out["amap"]), lambda: 0.0)
    term("binarization", lambda: binarization_loss(out["amap"]), lambda: 0.0)
    term("duration", lambda: ad.mse_loss(out["log_dur"], log_dur_t),
         lambda: ((out["log_dur"].data - log_dur_t) ** 2).mean())
    term("pitch_spec", lambda: ad.mse_loss(out["pitch_spec"], spec_t),
         lambda: ((out["pitch_spec"].data - spec_t) ** 2).mean())
    term("pitch_mean", lambda: ad.mse_loss(out["pitch_mean"], mean_t),
         lambda: ((out["pitch_mean"].data - mean_t) ** 2).mean())
    term("pitch_var", lambda: ad.mse_loss(out["pitch_var"], var_t),
         lambda: ((out["pitch_var"].data - var_t) ** 2).mean())
    term("energy", lambda: ad.mse_loss(out["energy"], energy_t),
         lambda: ((out["energy"].data - energy_t) ** 2).mean())

    for name, value in comps.items():
        if not np.isfinite(value):
            raise NumericsError(f"loss component {name} is non-finite at step {step}")

    total = None
    for name, node in terms.items():
        node = node if weights[name] == 1.0 else ad.scale(node, weights[name])
        total = node if total is None else ad.add(total, node)
    # Reported total is the f64 weighted sum of the reported components; the
    # graph tensor is the same quantity in f32 and drives the gradients.
    breakdown = LossBreakdown(
        components=comps, weights=weights,
        total=float(sum(weights[k] * comps[k] for k in LOSS_NAMES)),
    )
    breakdown.check_consistent()
    return total, breakdown


# -----------------------------------------------------------------------------
# optimizer
# -----------------------------------------------------------------------------


class Adam:
    def __init__(self, named_params, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        out = {f"opt.m.{k}": a.copy() for k, a in self.m.items()}
        out.update({f"opt.v.{k}": a.copy() for k, a in self.v.items()})
        return out

    def load_state_arrays(self, arrays, t):
        for name, _ in self.params:
            mk, vk = f"opt.m.{name}", f"opt.v.{name}"
            if mk not in arrays or vk not in arrays:
                raise InputError(f"optimizer state missing moments for {name}")
            self.m[name] = arrays[mk].copy()
            self.v[name] = arrays[vk].copy()
        self.t = int(t)


# -----------------------------------------------------------------------------
# checkpoints
# -----------------------------------------------------------------------------


def _range_meta(model):
    va = model.variance
    return {
        "pitch_range": list(va.pitch_range) if va.pitch_range else None,
        "energy_range": list(va.energy_range) if va.energy_range else None,
    }


def save_checkpoint(path, model, step, *, adapted=None, opt=None, extra_meta=None):
    arrays = adapted.state_arrays() if adapted is not None else model.state_arrays()
    meta = {
        "kind": "adapt" if adapted is not None else "pretrain",
        "step": int(step),
        "model_config": model.config.to_dict(),
        "adam_t": opt.t if opt is not None else 0,
    }
    meta.update(_range_meta(model))
    if adapted is not None:
        meta["strategy"] = adapted.strategy.label()
        meta["adapter_dims"] = vars(adapted.strategy.dims).copy()
    if opt is not None:
        arrays = dict(arrays)
        arrays.update(opt.state_arrays())
    if extra_meta:
        meta.update(extra_meta)
    featio.write_checkpoint(path, meta, arrays)
    return path


@dataclass
class LoadedCheckpoint:
    model: TTSModel
    adapted: AdaptedModel = None
    meta: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)

    def hooks_for(self, embedding):
        if self.adapted is None:
            return None
        return self.adapted.hooks_for(Tensor(np.asarray(embedding, dtype=ad.DEFAULT_DTYPE).reshape(1, -1)))


def load_checkpoint(path):
    """Rebuild the model (and adapter surface, for adapted checkpoints)."""
    meta, arrays = featio.read_checkpoint(path)
    config = ModelConfig.from_dict(meta["model_config"])
    model = TTSModel(config, seed=0)
    model_arrays = {
        k: v for k, v in arrays.items()
        if not k.startswith("extras.") and not k.startswith("opt.")
    }
    model.load_state_arrays(model_arrays)
    if meta.get("pitch_range") and meta.get("energy_range"):
        model.set_ranges(meta["pitch_range"], meta["energy_range"])
    adapted = None
    if meta.get("strategy") and meta["strategy"] not in ("tts0", "ft"):
        strategy = StrategyConfig.parse(meta["strategy"], AdapterDims(**meta["adapter_dims"]))
        adapted = AdaptedModel(model, strategy)
        adapted.load_state_arrays(
            {k: v for k, v in arrays.items() if not k.startswith("opt.")}
        )
    return LoadedCheckpoint(model=model, adapted=adapted, meta=meta, arrays=arrays)


# -----------------------------------------------------------------------------
# data plumbing shared by both loops
# -----------------------------------------------------------------------------


def compute_feature_ranges(utterances):
    """(pitch_range, energy_range) over a training split; pitch is the
    interpolated log-F0 so unvoiced frames never collapse the low end."""
    p_lo = p_hi = e_lo = e_hi = None
    for u in utterances:
        logf = var_mod.interpolated_log_f0(u.f0.astype(np.float64))
        p_lo = float(logf.min()) if p_lo is None else min(p_lo, float(logf.min()))
        p_hi = float(logf.max()) if p_hi is None else max(p_hi, float(logf.max()))
        e_lo = float(u.energy.min()) if e_lo is None else min(e_lo, float(u.energy.min()))
        e_hi = float(u.energy.max()) if e_hi is None else max(e_hi, float(u.energy.max()))
    if p_lo is None:
        raise InputError("cannot compute feature ranges from an empty split")
    return (p_lo, p_hi), (e_lo, e_hi)


class _Batcher:
    """Deterministic, resumable batch order: position j in the global stream
    maps to permutation(epoch)[j % n], a pure function of (seed, j)."""

    def __init__(self, seed, n, batch_size):
        if n < 1:
            raise InputError("empty training split")
        self.seed, self.n, self.batch_size = seed, n, batch_size
        self._perms = {}

    def _perm(self, epoch):
        if epoch not in self._perms:
            self._perms[epoch] = rng_for(self.seed, "order", epoch).permutation(self.n)
            if len(self._perms) > 4:  # keep the window small
                oldest = min(self._perms)
                if oldest != epoch:
                    del self._perms[oldest]
        return self._perms[epoch]

    def batch(self, step):
        base = step * self.batch_size
        return [int(self._perm(j // self.n)[j % self.n]) for j in range(base, base + self.batch_size)]


class _LossLog:
    def __init__(self, path, header_extra=()):
        self.path = path
        if not os.path.exists(path):
            with open(path, "w") as f:
                for line in header_extra:
                    f.write(line + "\n")
                f.write("step\t" + "\t".join(LOSS_NAMES) + "\ttotal\tlr\n")

    def append(self, step, breakdown, lr):
        with open(self.path, "a") as f:
            row = "\t".join(f"{v:.6f}" for v in breakdown.row())
            f.write(f"{step}\t{row}\t{lr:.8f}\n")


def _train_steps(model, trainable, utterances, sched, seed, *, start_step, opt,
                 hooks_fn, log, val_utterances, val_log, ckpt_every,
                 save_fn, log_every=10, val_every=200):
    batcher = _Batcher(seed, len(utterances), sched.batch_size)
    pitch_cache = {}
    inv_bs = 1.0 / sched.batch_size
    for step in range(start_step, sched.total_steps):
        grads = {name: np.zeros_like(p.data) for name, p in trainable}
        breakdowns = []
        for pos, idx in enumerate(batcher.batch(step)):
            utt = utterances[idx]
            ctx = RunCtx(rng_for(seed, "dropout", step, pos), training=True)
            total, bd = compute_losses(
                model, utt, step, sched, ctx,
                hooks=hooks_fn(utt) if hooks_fn else None,
                pitch_cache=pitch_cache,
            )
            breakdowns.append(bd)
            if total is not None:
                for name, g in ad.grads_for(total, trainable).items():
                    grads[name] += g * inv_bs
        lr = lr_at(sched, step + 1)
        opt.step(grads, lr)
        done = step + 1
        if done % log_every == 0 or done == sched.total_steps:
            log.append(done, LossBreakdown.average(breakdowns), lr)
        if val_utterances and (done % val_every == 0 or done == sched.total_steps):
            val_log.append(done, validate(model, val_utterances, done, sched, hooks_fn), lr)
        if done % ckpt_every == 0 or done == sched.total_steps:
            save_fn(done)
    return sched.total_steps


def validate(model, utterances, step, sched, hooks_fn=None):
    """Teacher-forced loss over a split, dropout off. Returns the average
    breakdown; weights are evaluated at `step` so logs stay comparable."""
    outs = []
    for utt in utterances:
        ctx = RunCtx(training=False)
        _, bd = compute_losses(
            model, utt, step, sched, ctx,
            hooks=hooks_fn(utt) if hooks_fn else None,
        )
        outs.append(bd)
    return LossBreakdown.average(outs)


# -----------------------------------------------------------------------------
# pretraining
# -----------------------------------------------------------------------------


def _latest_path(run_dir):
    return os.path.join(run_dir, "LATEST")


def _read_latest(run_dir):
    p = _latest_path(run_dir)
    if not os.path.exists(p):
        return None
    with open(p) as f:
        name = f.read().strip()
    return os.path.join(run_dir, name) if name else None


def _write_latest(run_dir, filename):
    tmp = _latest_path(run_dir) + ".tmp"
    with open(tmp, "w") as f:
        f.write(filename + "\n")
    os.replace(tmp, _latest_path(run_dir))


def pretrain(manifest_path, model_config, sched, run_dir, seed, *,
             log_every=10, val_every=200, ckpt_every=500, resume=True):
    """Train the backbone on the pretrain speakers. Returns the final
    checkpoint path. Interrupted runs resume from the newest checkpoint."""
    os.makedirs(run_dir, exist_ok=True)
    train = corpus_mod.load_corpus(manifest_path, adaptation=False, split="train")
    val = corpus_mod.load_corpus(manifest_path, adaptation=False, split="val")
    for u in train + val:
        if u.embedding is None:
            raise InputError(f"utterance {u.utt_id} has no stored speaker embedding")

    model = TTSModel(model_config, seed=seed)
    pitch_range, energy_range = compute_feature_ranges(train)
    model.set_ranges(pitch_range, energy_range)
    trainable = list(model.named_parameters())
    opt = Adam(trainable, sched.beta1, sched.beta2, sched.eps)

    start_step = 0
    latest = _read_latest(run_dir) if resume else None
    if latest is not None:
        loaded = load_checkpoint(latest)
        if loaded.meta.get("kind") != "pretrain":
            raise StateError(f"{latest} is not a pretraining checkpoint")
        if loaded.meta["model_config"] != model_config.to_dict():
            raise ConfigError("run directory holds a checkpoint with a different model config")
        model.load_state_arrays({
            k: v for k, v in loaded.arrays.items() if not k.startswith("opt.")
        })
        model.set_ranges(loaded.meta["pitch_range"], loaded.meta["energy_range"])
        opt.load_state_arrays(loaded.arrays, loaded.meta.get("adam_t", 0))
        start_step = int(loaded.meta["step"])

    log = _LossLog(os.path.join(run_dir, "train_log.tsv"))
    val_log = _LossLog(os.path.join(run_dir, "val_log.tsv"))

    def save_fn(done):
        name = f"ckpt-{done:06d}.bin"
        save_checkpoint(os.path.join(run_dir, name), model, done, opt=opt)
        _write_latest(run_dir, name)

    if start_step >= sched.total_steps:
        return _read_latest(run_dir)
    _train_steps(
        model, trainable, train, sched, seed, start_step=start_step, opt=opt,
        hooks_fn=None, log=log, val_utterances=val, val_log=val_log,
        ckpt_every=ckpt_every, save_fn=save_fn,
        log_every=log_every, val_every=val_every,
    )
    return _read_latest(run_dir)


# -----------------------------------------------------------------------------
# adaptation
# -----------------------------------------------------------------------------


def adapt(checkpoint_path, manifest_path, strategy, sched, run_dir, seed, *,
          dims=None, log_every=10, val_every=200):
    """Adapt a pretrained checkpoint to the adaptation speakers with one
    strategy. Returns the adapted checkpoint path.

    tts0 trains nothing: the output file is a byte-for-byte copy of the
    input. For every other strategy the frozen tensors are snapshotted before
    and compared bitwise after training; any drift is an internal error.
    """
    os.makedirs(run_dir, exist_ok=True)
    if isinstance(strategy, str):
        strategy = StrategyConfig.parse(strategy, dims) if dims else StrategyConfig.parse(strategy)
    out_path = os.path.join(run_dir, "adapted.bin")
    log_path = os.path.join(run_dir, "adapt_log.tsv")
    # adaptation never resumes: a rerun rewrites the logs instead of appending
    for stale in (log_path, os.path.join(run_dir, "adapt_val_log.tsv")):
        if os.path.exists(stale):
            os.remove(stale)

    if strategy.name == "tts0":
        _LossLog(log_path, header_extra=(
            f"# strategy\t{strategy.label()}", "# trainable_params\t0"))
        shutil.copyfile(checkpoint_path, out_path)
        return out_path

    loaded = load_checkpoint(checkpoint_path)
    model = loaded.model
    adapted = AdaptedModel(model, strategy, seed=seed)
    trainable = adapted.named_trainable()
    log = _LossLog(log_path, header_extra=(
        f"# strategy\t{strategy.label()}",
        f"# trainable_params\t{adapted.trainable_count()}",
    ))

    frozen = {
        name: p.data.copy()
        for name, p in model.named_parameters("model.")
        if not p.requires_grad
    }

    train = corpus_mod.load_corpus(manifest_path, adaptation=True, split="train")
    val = corpus_mod.load_corpus(manifest_path, adaptation=True, split="val")
    opt = Adam(trainable, sched.beta1, sched.beta2, sched.eps)
    val_log = _LossLog(os.path.join(run_dir, "adapt_val_log.tsv"))

    def hooks_fn(utt):
        return adapted.hooks_for(Tensor(utt.embedding.reshape(1, -1)))

    def save_fn(done):
        save_checkpoint(out_path, model, done, adapted=adapted, opt=opt)

    _train_steps(
        model, trainable, train, sched, seed, start_step=0, opt=opt,
        hooks_fn=hooks_fn, log=log, val_utterances=val, val_log=val_log,
        ckpt_every=sched.total_steps, save_fn=save_fn,
        log_every=log_every, val_every=val_every,
    )

    for name, p in model.named_parameters("model."):
        if name in frozen and p.data.tobytes() != frozen[name].tobytes():
            raise InternalInvariantError(
                f"frozen tensor {name} changed during {strategy.label()} adaptation"
            )
    return out_path
