"""Speaker adaptation strategies over a frozen backbone.

Four strategies: zero-shot (train nothing), full fine-tuning (train
everything), static bottleneck adapters, and hypernetwork-generated adapters
whose weights are produced fresh from the speaker embedding on every forward
pass. Adapters insert at fixed sites: one per encoder block (4), one per
decoder block (6), and one after each of the pitch and energy conv stacks (2).

Bottleneck adapters compute h + ReLU(h W_d + b_d) W_u + b_u. Up-projections
start at zero, so a freshly attached adapter is the identity and training
starts from the frozen model's behavior exactly.

The hypernetwork (one per module, never shared across modules) maps the
speaker embedding through a projector, concatenates a per-site layer
embedding, compresses to a small source vector, and linearly samples the
flattened adapter tensors from it. Every stage is affine; the samplers carry
no bias so the generated weights are strictly input-conditioned.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, InputError, ShapeError
from .layers import Dense, Module, xavier_uniform

SITE_COUNTS = {"e": 4, "v": 2, "d": 6}
MODULE_ORDER = ("e", "v", "d")
STRATEGY_NAMES = ("tts0", "ft", "adapter", "hyper")


@dataclass
class AdapterDims:
    d_h: int = 256
    d_r: int = 32
    d_1: int = 256
    d_2: int = 64
    d_l: int = 64
    d_s: int = 8


@dataclass
class AdapterWeights:
    w_down: Tensor  # (d_h, d_r)
    b_down: Tensor  # (d_r,)
    w_up: Tensor    # (d_r, d_h)
    b_up: Tensor    # (d_h,)


def adapter_forward(h, weights):
    """h + ReLU(h W_d + b_d) W_u + b_u over a (T, d_h) sequence."""
    d_h = h.shape[-1]
    if weights.w_down.shape[0] != d_h or weights.w_up.shape[1] != d_h:
        raise ShapeError(
            "adapter_forward",
            f"hidden dim {d_h} vs adapter ({weights.w_down.shape}, {weights.w_up.shape})",
        )
    z = ad.relu(ad.add(ad.matmul(h, weights.w_down), weights.b_down))
    return ad.add(h, ad.add(ad.matmul(z, weights.w_up), weights.b_up))


class StaticAdapter(Module):
    """Directly trained adapter for one site; identity at initialization."""

    def __init__(self, rng, d_h, d_r, dtype=ad.DEFAULT_DTYPE):
        self.w_down = Tensor(xavier_uniform(rng, (d_h, d_r), d_h, d_r, dtype), requires_grad=True)
        self.b_down = Tensor(np.zeros(d_r, dtype=dtype), requires_grad=True)
        self.w_up = Tensor(np.zeros((d_r, d_h), dtype=dtype), requires_grad=True)
        self.b_up = Tensor(np.zeros(d_h, dtype=dtype), requires_grad=True)

    def weights(self):
        return AdapterWeights(self.w_down, self.b_down, self.w_up, self.b_up)

    def __call__(self, h):
        return adapter_forward(h, self.weights())


class HyperNetwork(Module):
    """Generates adapter weights for every site of one backbone module."""

    def __init__(self, rng, n_sites, dims, gain=1.0, dtype=ad.DEFAULT_DTYPE):
        d = dims
        self.speaker_proj = Dense(rng, d.d_1, d.d_2, dtype=dtype)
        table = (rng.standard_normal((n_sites, d.d_l)) * d.d_l ** -0.5).astype(dtype)
        self.layer_embed = Tensor(table, requires_grad=True)
        self.source_proj = Dense(rng, d.d_2 + d.d_l, d.d_s, dtype=dtype)
        n_down = d.d_h * d.d_r + d.d_r
        n_up = d.d_r * d.d_h + d.d_h
        self.sampler_down = Dense(rng, d.d_s, n_down, bias=False, dtype=dtype)
        # zero start: generated up-projections vanish, adapters begin as identity
        self.sampler_up = Dense(rng, d.d_s, n_up, bias=False, dtype=dtype, zero_init=True)
        self.dims = d
        self.n_sites = n_sites
        self.gain = gain

    def generate(self, spk_vec, site):
        """AdapterWeights for one site; differentiable in spk_vec and all
        hypernetwork parameters, deterministic given both."""
        if not 0 <= site < self.n_sites:
            raise InputError(f"hypernetwork has {self.n_sites} sites, got index {site}")
        if spk_vec.data.ndim != 2 or spk_vec.shape != (1, self.dims.d_1):
            raise ShapeError("generate", f"speaker vector must be (1, {self.dims.d_1}), got {spk_vec.shape}")
        d = self.dims
        sv = self.speaker_proj(spk_vec)                       # (1, d_2)
        le = ad.narrow(self.layer_embed, 0, site, 1)          # (1, d_l)
        z = self.source_proj(ad.concat([sv, le], axis=-1))    # (1, d_s)
        flat_down = self.sampler_down(z)
        flat_up = self.sampler_up(z)
        if self.gain != 1.0:
            flat_down = ad.scale(flat_down, self.gain)
            flat_up = ad.scale(flat_up, self.gain)
        n_w_down = d.d_h * d.d_r
        n_w_up = d.d_r * d.d_h
        return AdapterWeights(
            w_down=ad.reshape(ad.narrow(flat_down, 1, 0, n_w_down), (d.d_h, d.d_r)),
            b_down=ad.reshape(ad.narrow(flat_down, 1, n_w_down, d.d_r), (d.d_r,)),
            w_up=ad.reshape(ad.narrow(flat_up, 1, 0, n_w_up), (d.d_r, d.d_h)),
            b_up=ad.reshape(ad.narrow(flat_up, 1, n_w_up, d.d_h), (d.d_h,)),
        )


def flattened_weights(weights):
    """1-D float64 view of generated weights, for export and clustering."""
    parts = [weights.w_down, weights.b_down, weights.w_up, weights.b_up]
    return np.concatenate([p.data.reshape(-1).astype(np.float64) for p in parts])


# -----------------------------------------------------------------------------
# strategies
# -----------------------------------------------------------------------------


@dataclass
class StrategyConfig:
    name: str
    sites: tuple = ()
    dims: AdapterDims = field(default_factory=AdapterDims)

    def __post_init__(self):
        if self.name not in STRATEGY_NAMES:
            raise ConfigError(f"unknown strategy {self.name!r} (choose from {STRATEGY_NAMES})")
        sites = tuple(self.sites)
        if self.name in ("tts0", "ft"):
            if sites:
                raise ConfigError(f"strategy {self.name} takes no sites, got {sites}")
        else:
            if not sites:
                raise ConfigError(f"strategy {self.name} needs at least one site of e/v/d")
            bad = [s for s in sites if s not in SITE_COUNTS]
            if bad:
                raise ConfigError(f"unknown adapter sites {bad}")
            if len(set(sites)) != len(sites):
                raise ConfigError(f"duplicate sites in {sites}")
            sites = tuple(s for s in MODULE_ORDER if s in sites)
        self.sites = sites

    @classmethod
    def parse(cls, label, dims=None):
        """'tts0', 'ft', 'adapter_e', 'hyper_evd', ... -> StrategyConfig."""
        dims = dims if dims is not None else AdapterDims()
        if label in ("tts0", "ft"):
            return cls(label, (), dims)
        if "_" not in label:
            raise ConfigError(f"strategy label {label!r} needs a site suffix, e.g. hyper_evd")
        name, suffix = label.split("_", 1)
        return cls(name, tuple(suffix), dims)

    def label(self):
        return self.name if not self.sites else f"{self.name}_{''.join(self.sites)}"


def adapter_param_count(dims):
    """Trainable parameters of one static adapter site."""
    return dims.d_h * dims.d_r + dims.d_r + dims.d_r * dims.d_h + dims.d_h


def hyper_param_count(dims, n_sites):
    """Trainable parameters of one module's hypernetwork."""
    d = dims
    speaker_proj = d.d_1 * d.d_2 + d.d_2
    layer_embed = n_sites * d.d_l
    source_proj = (d.d_2 + d.d_l) * d.d_s + d.d_s
    sampler_down = d.d_s * (d.d_h * d.d_r + d.d_r)
    sampler_up = d.d_s * (d.d_r * d.d_h + d.d_h)
    return speaker_proj + layer_embed + source_proj + sampler_down + sampler_up


def count_trainable_params(config, backbone_param_count=None, site_counts=None):
    """Exact trainable-parameter total for a strategy."""
    counts = site_counts if site_counts is not None else SITE_COUNTS
    if config.name == "tts0":
        return 0
    if config.name == "ft":
        if backbone_param_count is None:
            raise ConfigError("full fine-tuning count requires the backbone parameter count")
        return int(backbone_param_count)
    if config.name == "adapter":
        return sum(counts[s] * adapter_param_count(config.dims) for s in config.sites)
    return sum(hyper_param_count(config.dims, counts[s]) for s in config.sites)


class _Bank(Module):
    """Attribute bag so adapter/hypernetwork tensors get stable names."""


class AdaptedModel:
    """A backbone plus one strategy's trainable surface.

    Freezing is enforced at build time via requires_grad; the training loop
    additionally verifies frozen tensors never change. `detached` bypasses
    every adapter hook, which must reproduce the plain backbone exactly.
    """

    def __init__(self, model, strategy, seed=0):
        dims = strategy.dims
        if strategy.sites:  # tts0/ft attach nothing, so adapter dims are moot
            if dims.d_h != model.config.d_h:
                raise ConfigError(f"strategy d_h={dims.d_h} but checkpoint model has d_h={model.config.d_h}")
            if dims.d_1 != model.config.d_spk:
                raise ConfigError(f"strategy d_1={dims.d_1} but checkpoint model has d_spk={model.config.d_spk}")
        self.model = model
        self.strategy = strategy
        self.site_counts = model.site_counts()
        self.extras = _Bank()
        self.detached = False
        model.set_trainable(strategy.name == "ft")
        from .layers import rng_for  # local import keeps module load order simple

        for tag in strategy.sites:
            n = self.site_counts[tag]
            if strategy.name == "adapter":
                bank = [StaticAdapter(rng_for(seed, "adapter", tag, i), dims.d_h, dims.d_r) for i in range(n)]
                setattr(self.extras, f"adapter_{tag}", bank)
            else:
                setattr(self.extras, f"hyper_{tag}", HyperNetwork(rng_for(seed, "hyper", tag), n, dims))

    def hooks_for(self, spk_vec):
        """Per-site adapter callables for one utterance, or None when the
        strategy adds nothing (tts0/ft) or adapters are detached."""
        if self.detached or self.strategy.name in ("tts0", "ft"):
            return None
        hooks = {}
        for tag in self.strategy.sites:
            if self.strategy.name == "adapter":
                bank = getattr(self.extras, f"adapter_{tag}")
                hooks[tag] = [adapter for adapter in bank]
            else:
                hyper = getattr(self.extras, f"hyper_{tag}")
                hooks[tag] = [
                    (lambda t, h=hyper, s=site: adapter_forward(t, h.generate(spk_vec, s)))
                    for site in range(self.site_counts[tag])
                ]
        return hooks

    def named_trainable(self):
        seen = []
        for name, p in self.model.named_parameters("model."):
            if p.requires_grad:
                seen.append((name, p))
        for name, p in self.extras.named_parameters("extras."):
            if p.requires_grad:
                seen.append((name, p))
        return seen

    def trainable_count(self):
        return sum(p.size for _, p in self.named_trainable())

    def state_arrays(self):
        out = self.model.state_arrays()
        out.update(self.extras.state_arrays("extras."))
        return out

    def load_state_arrays(self, arrays):
        model_arrays = {k: v for k, v in arrays.items() if not k.startswith("extras.")}
        self.model.load_state_arrays(model_arrays)
        self.extras.load_state_arrays(arrays, "extras.")
