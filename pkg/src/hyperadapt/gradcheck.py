"""Finite-difference verification of every trainable sub-network.

Each builder constructs a small float64 instance with a fresh seed, wires a
scalar loss through it, and hands back the loss closure plus the tensor list
(input and parameters) to perturb. `run_suite` drives the whole registry and
is shared by the grad-check command and the acceptance tests.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import alignment, backbone, variance
from .adaptation import AdapterDims, HyperNetwork, StaticAdapter, adapter_forward
from .autodiff import Tensor
from .errors import InputError
from .layers import RunCtx, rng_for

_CTX = RunCtx(training=False)
_D = 8


def _f64_params(module):
    params = [p for _, p in module.named_parameters()]
    for p in params:
        p.data = p.data.astype(np.float64)
        p.requires_grad = True
    return params


def _probe(seed, shape):
    return Tensor(np.random.default_rng(seed).standard_normal(shape), requires_grad=True)


def _target(seed, shape):
    return ad.constant(np.random.default_rng(seed ^ 0xA5A5).standard_normal(shape),
                       dtype=np.float64)


def _fft_block(seed):
    block = backbone.FFTBlock(rng_for(seed, "gc", "fft"), _D, heads=2, p_dropout=0.0)
    params = _f64_params(block)
    h = _probe(seed, (5, _D))
    target = _target(seed, (5, _D))
    mask = np.ones(5, dtype=bool)

    def fn(x, *ps):
        return ad.mse_loss(block(x, mask, _CTX), target)

    return fn, [h, *params]


def _duration_head(seed):
    head = variance.DurationPredictor(rng_for(seed, "gc", "dur"), _D, p_dropout=0.0)
    params = _f64_params(head)
    h = _probe(seed, (6, _D))
    target = _target(seed, (6,))

    def fn(x, *ps):
        return ad.mse_loss(head(x, _CTX), target)

    return fn, [h, *params]


def _pitch_head(seed):
    head = variance.PitchPredictor(rng_for(seed, "gc", "pitch"), _D, p_dropout=0.0)
    params = _f64_params(head)
    h = _probe(seed, (6, _D))
    target = _target(seed, (variance.N_SCALES, 6))

    def fn(x, *ps):
        spec, mean, var = head(x, _CTX)
        return ad.add(ad.mse_loss(spec, target), ad.add(ad.sum_all(mean), ad.sum_all(var)))

    return fn, [h, *params]


def _energy_head(seed):
    head = variance.EnergyPredictor(rng_for(seed, "gc", "energy"), _D, p_dropout=0.0)
    params = _f64_params(head)
    h = _probe(seed, (5, _D))
    target = _target(seed, (5,))

    def fn(x, *ps):
        return ad.mse_loss(head(x, _CTX), target)

    return fn, [h, *params]


def _postnet(seed):
    net = backbone.Postnet(rng_for(seed, "gc", "post"), n_mels=6, channels=10,
                           kernel=5, n_layers=3, p_dropout=0.0)
    params = _f64_params(net)
    mel = _probe(seed, (7, 6))
    target = _target(seed, (7, 6))

    def fn(x, *ps):
        return ad.mse_loss(net(x, _CTX), target)

    return fn, [mel, *params]


def _adapter(seed):
    ada = StaticAdapter(rng_for(seed, "gc", "ada"), d_h=_D, d_r=3)
    # identity init zeroes half the gradients; randomize so every path carries
    rng = np.random.default_rng(seed + 17)
    for p in ada.parameters():
        p.data = rng.standard_normal(p.shape) * 0.3
        p.requires_grad = True
    h = _probe(seed, (5, _D))
    target = _target(seed, (5, _D))

    def fn(x, *ps):
        return ad.mse_loss(ada(x), target)

    return fn, [h, *ada.parameters()]


def _hypernetwork(seed):
    dims = AdapterDims(d_h=5, d_r=2, d_1=4, d_2=3, d_l=3, d_s=2)
    hyper = HyperNetwork(rng_for(seed, "gc", "hyper"), n_sites=2, dims=dims)
    hyper.sampler_up.w.data = rng_for(seed, "gc", "up").normal(
        size=hyper.sampler_up.w.shape).astype(np.float32) * 0.1
    params = _f64_params(hyper)
    h_data = np.random.default_rng(seed + 29).standard_normal((3, 5))
    spk = _probe(seed, (1, 4))
    target = _target(seed, (3, 5))

    def fn(v, *ps):
        out = adapter_forward(ad.constant(h_data, dtype=np.float64),
                              hyper.generate(v, seed % 2))
        return ad.mse_loss(out, target)

    return fn, [spk, *params]


def _alignment_projections(seed):
    enc = alignment.AlignmentEncoder(rng_for(seed, "gc", "align"), d_text=4,
                                     d_mel=3, d_attn=5)
    params = _f64_params(enc)
    text = _probe(seed, (3, 4))
    mel = ad.constant(np.random.default_rng(seed + 41).standard_normal((7, 3)),
                      dtype=np.float64)

    def fn(t, *ps):
        amap = alignment.soft_align(enc.project_text(t), enc.project_mel(mel))
        return alignment.forward_sum_loss(amap)

    return fn, [text, *params]


BUILDERS = {
    "fft_block": _fft_block,
    "duration_head": _duration_head,
    "pitch_head": _pitch_head,
    "energy_head": _energy_head,
    "postnet": _postnet,
    "adapter": _adapter,
    "hypernetwork": _hypernetwork,
    "alignment_projections": _alignment_projections,
}


@dataclass
class CheckResult:
    name: str
    instance: int
    max_rel: float
    passed: bool


def run_suite(instances=5, threshold=1e-4, names=None):
    """FD-check `instances` fresh instances of each named sub-network."""
    if instances < 1:
        raise InputError(f"run_suite: need at least 1 instance, got {instances}")
    if names is None:
        picked = dict(BUILDERS)
    else:
        unknown = [n for n in names if n not in BUILDERS]
        if unknown:
            raise InputError(f"run_suite: unknown sub-networks {unknown}; "
                             f"choose from {sorted(BUILDERS)}")
        picked = {n: BUILDERS[n] for n in names}
    results = []
    for name, build in picked.items():
        for k in range(instances):
            fn, inputs = build(k)
            report = ad.grad_check(fn, inputs, threshold=threshold)
            results.append(CheckResult(name, k, report.max_rel, report.passed))
    return results
