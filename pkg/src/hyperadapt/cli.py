"""Command-line entry point binding corpus generation, training, adaptation,
synthesis, and evaluation into reproducible runs.

Config-first: every knob lives in one JSON config; flags and key=value
overrides only replace config keys. Each command writes under a run directory
named by the hash of its effective config plus the seed, and echoes that
config into the directory, so a run can always be reproduced from its folder.

Exit codes: 0 success, 2 usage (bad flags, bad config, bad inputs),
3 internal failure (broken invariant or numerical blowup).
"""

import argparse
import copy
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import corpus as corpus_mod
from . import featio, gradcheck, metrics
from . import training as tr
from .adaptation import AdapterDims, StrategyConfig, count_trainable_params, flattened_weights
from .autodiff import Tensor
from .corpus import CorpusSpec, synthetic_embedding
from .errors import ConfigError, HyperadaptError, InputError, StateError
from .features import FeatureConfig, mel_to_waveform, write_wav
from .model import ModelConfig
from .training import ScheduleConfig, adaptation_schedule

CONFIG_DIR_ENV = "HYPERADAPT_CONFIG_DIR"

_SPEAKER_GROUPS = {"adapt": True, "pretrain": False, "all": None}


def default_config():
    return {
        "seed": 0,
        "out_dir": "runs",
        "corpus": dataclasses.asdict(CorpusSpec()),
        "model": ModelConfig().to_dict(),
        "schedule": {**dataclasses.asdict(ScheduleConfig()),
                     "milestones": list(ScheduleConfig().milestones)},
        "adapt": {"strategy": "hyper_evd", "steps": 3000, "lr": 1e-4, "batch_size": 8},
        "dims": dataclasses.asdict(AdapterDims()),
        "paths": {"manifest": "", "checkpoint": ""},
        "synthesize": {"utt": "", "speaker": "", "phonemes": "", "wav": False,
                       "wav_iters": 30},
        "evaluate": {"split": "val", "speakers": "adapt", "coeffs": 13},
        "dump": {"jitters": 0, "jitter_scale": 0.02},
        "gradcheck": {"instances": 5, "threshold": 1e-4, "networks": ""},
    }


# -----------------------------------------------------------------------------
# config plumbing
# -----------------------------------------------------------------------------


def _resolve_config_path(path):
    if os.path.exists(path):
        return path
    base = os.environ.get(CONFIG_DIR_ENV, "")
    if base and not os.path.isabs(path):
        candidate = os.path.join(base, path)
        if os.path.exists(candidate):
            return candidate
    raise InputError(f"config file not found: {path}")


def _merge_into(node, data, prefix):
    for key, value in data.items():
        if key not in node:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
        if isinstance(node[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{prefix}{key}' expects a section")
            _merge_into(node[key], value, f"{prefix}{key}.")
        else:
            node[key] = value


def _parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _set_dotted(cfg, dotted, value):
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key '{dotted}'")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node:
        raise ConfigError(f"unknown config key '{dotted}'")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"config key '{dotted}' is a section, not a value")
    node[leaf] = value


def load_config(config_path=None, overrides=(), seed=None):
    """Defaults, then the config file, then key=value overrides, then --seed."""
    cfg = default_config()
    if config_path:
        with open(_resolve_config_path(config_path)) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{config_path}: not valid JSON ({e})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{config_path}: top level must be an object")
        _merge_into(cfg, data, "")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise InputError(f"override '{item}' is not key=value")
        _set_dotted(cfg, key, _parse_value(raw))
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def config_hash(cfg):
    hashed = {k: v for k, v in cfg.items() if k != "seed"}
    blob = json.dumps(hashed, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:10]


def prepare_run_dir(cfg, verb):
    """Create (or reuse) the run directory and echo the effective config."""
    name = f"{verb}-{config_hash(cfg)}-s{cfg['seed']}"
    run_dir = os.path.join(cfg["out_dir"], name)
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
    return run_dir


def _model_config(cfg):
    return ModelConfig.from_dict(cfg["model"])


def _dims(cfg):
    return AdapterDims(**cfg["dims"])


def _schedule(cfg):
    data = dict(cfg["schedule"])
    data["milestones"] = tuple(data["milestones"])
    return ScheduleConfig(**data)


def _site_counts(model_config):
    return {"e": model_config.enc_layers, "v": 2, "d": model_config.dec_layers}


def _require_path(cfg, key, flag):
    value = cfg["paths"][key]
    if not value:
        raise InputError(f"missing {key}: pass {flag} or set paths.{key} in the config")
    if not os.path.exists(value):
        raise InputError(f"{key} does not exist: {value}")
    return value


def _backbone_param_count(model_config):
    from .model import TTSModel

    model = TTSModel(model_config, seed=0)
    return sum(p.data.size for _, p in model.named_parameters())


def _speaker_centroid(utterances):
    vecs = np.stack([u.embedding for u in utterances])
    mean = vecs.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise InputError("speaker embeddings average to the zero vector")
    return (mean / norm).astype(np.float32)


# -----------------------------------------------------------------------------
# verbs
# -----------------------------------------------------------------------------


def _cmd_gen_corpus(cfg):
    run_dir = prepare_run_dir(cfg, "gen-corpus")
    spec = CorpusSpec(**cfg["corpus"])
    manifest = corpus_mod.generate_corpus(spec, cfg["seed"],
                                          os.path.join(run_dir, "corpus"))
    print(manifest)
    return 0


def _cmd_pretrain(cfg):
    manifest = _require_path(cfg, "manifest", "--manifest")
    run_dir = prepare_run_dir(cfg, "pretrain")
    ckpt = tr.pretrain(manifest, _model_config(cfg), _schedule(cfg), run_dir,
                       cfg["seed"])
    print(ckpt)
    return 0


def _cmd_adapt(cfg):
    manifest = _require_path(cfg, "manifest", "--manifest")
    checkpoint = _require_path(cfg, "checkpoint", "--checkpoint")
    run_dir = prepare_run_dir(cfg, "adapt")
    section = cfg["adapt"]
    sched = adaptation_schedule(section["steps"], lr=section["lr"],
                                batch_size=section["batch_size"])
    out = tr.adapt(checkpoint, manifest, section["strategy"], sched, run_dir,
                   cfg["seed"], dims=_dims(cfg))
    print(out)
    return 0


def _resolve_synthesis_inputs(cfg, manifest):
    section = cfg["synthesize"]
    entries = featio.read_manifest(manifest)
    base = featio.manifest_dir(manifest)
    if section["utt"]:
        matches = [e for e in entries if e.utt_id == section["utt"]]
        if not matches:
            raise InputError(f"utterance '{section['utt']}' not in manifest")
        utt = corpus_mod.load_utterance(matches[0], base)
        if utt.embedding is None:
            raise InputError(f"utterance '{utt.utt_id}' has no stored embedding")
        return utt.phonemes, utt.embedding, utt.utt_id
    if section["phonemes"] and section["speaker"]:
        try:
            phonemes = np.array([int(t) for t in section["phonemes"].split(",")],
                                dtype=np.int64)
        except ValueError:
            raise InputError(f"phonemes must be comma-separated ids, got "
                             f"'{section['phonemes']}'") from None
        picked = corpus_mod.filter_entries(
            [e for e in entries if e.speaker == section["speaker"]], split="train")
        if not picked:
            raise InputError(f"speaker '{section['speaker']}' has no train utterances")
        utts = [corpus_mod.load_utterance(e, base) for e in picked]
        return phonemes, _speaker_centroid(utts), f"{section['speaker']}-custom"
    raise InputError("synthesize needs --utt, or both --phonemes and --speaker")


def _cmd_synthesize(cfg):
    manifest = _require_path(cfg, "manifest", "--manifest")
    checkpoint = _require_path(cfg, "checkpoint", "--checkpoint")
    run_dir = prepare_run_dir(cfg, "synthesize")
    phonemes, embedding, tag = _resolve_synthesis_inputs(cfg, manifest)
    loaded = tr.load_checkpoint(checkpoint)
    hooks = loaded.hooks_for(embedding)
    mel, info = loaded.model.synthesize(phonemes, embedding, hooks=hooks)

    featio.write_array(os.path.join(run_dir, f"{tag}.mel.bin"), mel)
    featio.write_array(os.path.join(run_dir, f"{tag}.f0.bin"), info["f0"])
    featio.write_array(os.path.join(run_dir, f"{tag}.energy.bin"), info["energy"])
    featio.write_array(os.path.join(run_dir, f"{tag}.dur.bin"),
                       info["durations"].astype(np.int64))
    print(os.path.join(run_dir, f"{tag}.mel.bin"))

    if cfg["synthesize"]["wav"]:
        fc = FeatureConfig(n_mels=loaded.model.config.n_mels)
        wave = mel_to_waveform(mel.astype(np.float64), fc,
                               n_iter=cfg["synthesize"]["wav_iters"])
        wav_path = os.path.join(run_dir, f"{tag}.griffinlim.wav")
        write_wav(wav_path, wave, fc.sample_rate)
        print(f"{wav_path}  (iterative phase reconstruction, not a vocoder)")
    return 0


def _trainable_for_checkpoint(loaded, model_config):
    strategy_label = loaded.meta.get("strategy", "")
    if not strategy_label or strategy_label == "tts0":
        return 0
    dims = AdapterDims(**loaded.meta["adapter_dims"])
    strategy = StrategyConfig.parse(strategy_label, dims)
    backbone = _backbone_param_count(model_config) if strategy_label == "ft" else None
    return count_trainable_params(strategy, backbone_param_count=backbone,
                                  site_counts=_site_counts(model_config))


def _cmd_evaluate(cfg):
    manifest = _require_path(cfg, "manifest", "--manifest")
    checkpoint = _require_path(cfg, "checkpoint", "--checkpoint")
    section = cfg["evaluate"]
    if section["speakers"] not in _SPEAKER_GROUPS:
        raise InputError(f"evaluate.speakers must be one of {sorted(_SPEAKER_GROUPS)}")
    if section["split"] not in ("train", "val", "all"):
        raise InputError("evaluate.split must be train, val, or all")
    run_dir = prepare_run_dir(cfg, "evaluate")

    split = None if section["split"] == "all" else section["split"]
    utts = corpus_mod.load_corpus(manifest,
                                  adaptation=_SPEAKER_GROUPS[section["speakers"]],
                                  split=split)
    if not utts:
        raise InputError("no utterances matched the evaluate filters")
    for u in utts:
        if u.embedding is None:
            raise InputError(f"utterance {u.utt_id} has no stored embedding")

    loaded = tr.load_checkpoint(checkpoint)
    model = loaded.model
    d_spk = model.config.d_spk

    def synth(utt):
        return model.synthesize(utt.phonemes, utt.embedding,
                                hooks=loaded.hooks_for(utt.embedding))

    report = metrics.evaluate(
        synth, utts, lambda mel: synthetic_embedding(mel, d_spk),
        trainable_params=_trainable_for_checkpoint(loaded, model.config),
        backbone_params=_backbone_param_count(model.config),
        n_coeffs=section["coeffs"],
    )
    path = report.write(run_dir)
    print(path)
    for line in report.to_text().splitlines():
        if line.startswith(("cos\t", "ffe\t", "mcd\t", "trainable_params\t",
                            "synthesis_failures\t")):
            print(line)
    return 0


def _cmd_params(cfg, strategy_name):
    strategy = StrategyConfig.parse(strategy_name, _dims(cfg))
    model_config = _model_config(cfg)
    backbone = _backbone_param_count(model_config) if strategy.name == "ft" else None
    count = count_trainable_params(strategy, backbone_param_count=backbone,
                                   site_counts=_site_counts(model_config))
    print(count)
    return 0


def _cmd_dump_hyper_params(cfg):
    manifest = _require_path(cfg, "manifest", "--manifest")
    checkpoint = _require_path(cfg, "checkpoint", "--checkpoint")
    run_dir = prepare_run_dir(cfg, "dump-hyper-params")
    loaded = tr.load_checkpoint(checkpoint)
    if loaded.adapted is None or loaded.adapted.strategy.name != "hyper":
        raise InputError(
            f"checkpoint strategy '{loaded.meta.get('strategy', 'pretrain')}' "
            "generates no parameters; dump-hyper-params needs a hyper checkpoint"
        )
    adapted = loaded.adapted
    d_spk = loaded.model.config.d_spk
    section = cfg["dump"]

    speakers = sorted({
        e.speaker for e in featio.read_manifest(manifest)
        if corpus_mod.is_adaptation_speaker(e.speaker)
    })
    if not speakers:
        raise InputError("manifest has no adaptation speakers to dump")
    base = featio.manifest_dir(manifest)
    entries = featio.read_manifest(manifest)

    arrays = {}
    for speaker in speakers:
        picked = corpus_mod.filter_entries(
            [e for e in entries if e.speaker == speaker], split="train")
        utts = [corpus_mod.load_utterance(e, base) for e in picked]
        variants = [("centroid", _speaker_centroid(utts))]
        for k in range(section["jitters"]):
            emb = synthetic_embedding(utts[0].mel, d_spk,
                                      jitter=section["jitter_scale"],
                                      stream=("dump", speaker, k))
            variants.append((f"jitter{k}", emb.astype(np.float32)))
        for variant, emb in variants:
            spk_t = Tensor(np.asarray(emb, dtype=np.float32).reshape(1, -1))
            for tag in adapted.strategy.sites:
                bank = getattr(adapted.extras, f"hyper_{tag}")
                for site in range(bank.n_sites):
                    flat = flattened_weights(bank.generate(spk_t, site))
                    arrays[f"{speaker}/{variant}/{tag}{site}"] = flat

    meta = {
        "strategy": adapted.strategy.label(),
        "adapter_dims": dataclasses.asdict(adapted.strategy.dims),
        "speakers": speakers,
        "variants_per_speaker": 1 + section["jitters"],
    }
    out = os.path.join(run_dir, "generated_params.bin")
    featio.write_checkpoint(out, meta, arrays)
    print(out)
    print(f"{len(arrays)} generated weight vectors "
          f"({len(speakers)} speakers x {meta['variants_per_speaker']} embeddings)")
    return 0


def _cmd_grad_check(cfg):
    section = cfg["gradcheck"]
    names = [n for n in section["networks"].split(",") if n] or None
    results = gradcheck.run_suite(instances=section["instances"],
                                  threshold=section["threshold"], names=names)
    failed = [r for r in results if not r.passed]
    by_name = {}
    for r in results:
        by_name.setdefault(r.name, []).append(r)
    for name, rs in by_name.items():
        worst = max(r.max_rel for r in rs)
        status = "PASS" if all(r.passed for r in rs) else "FAIL"
        print(f"{status}  {name}  instances={len(rs)}  worst_rel={worst:.3e}")
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed", file=sys.stderr)
        return 3
    print(f"all {len(results)} checks passed")
    return 0


# -----------------------------------------------------------------------------
# argument parsing
# -----------------------------------------------------------------------------


def _add_common(parser):
    parser.add_argument("--config", default=None,
                        help=f"JSON config file (searched in ${CONFIG_DIR_ENV} "
                             "when not found directly)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted path, JSON value)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--out-dir", default=None,
                        help="override out_dir (run directories live here)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hyperadapt",
        description="Speaker-adaptive TTS experiments: corpus, training, "
                    "adaptation, synthesis, evaluation.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    _add_common(p)

    p = sub.add_parser("pretrain", help="train the multi-speaker backbone")
    _add_common(p)
    p.add_argument("--manifest", default=None, help="corpus manifest (paths.manifest)")

    p = sub.add_parser("adapt", help="adapt a pretrained checkpoint to new speakers")
    _add_common(p)
    p.add_argument("--manifest", default=None, help="corpus manifest (paths.manifest)")
    p.add_argument("--checkpoint", default=None,
                   help="pretrained checkpoint (paths.checkpoint)")
    p.add_argument("--strategy", default=None,
                   help="tts0 | ft | adapter_<sites> | hyper_<sites> (adapt.strategy)")
    p.add_argument("--steps", type=int, default=None, help="adaptation steps (adapt.steps)")

    p = sub.add_parser("synthesize", help="synthesize mel features (optional wav preview)")
    _add_common(p)
    p.add_argument("--manifest", default=None, help="corpus manifest (paths.manifest)")
    p.add_argument("--checkpoint", default=None, help="model checkpoint (paths.checkpoint)")
    p.add_argument("--utt", default=None, help="synthesize this manifest utterance")
    p.add_argument("--speaker", default=None, help="speaker for --phonemes mode")
    p.add_argument("--phonemes", default=None, help="comma-separated phoneme ids")
    p.add_argument("--wav", action="store_true", default=None,
                   help="also write a crude phase-reconstruction wav (not a vocoder)")

    p = sub.add_parser("evaluate", help="score a checkpoint against reference features")
    _add_common(p)
    p.add_argument("--manifest", default=None, help="corpus manifest (paths.manifest)")
    p.add_argument("--checkpoint", default=None, help="model checkpoint (paths.checkpoint)")
    p.add_argument("--split", default=None, choices=("train", "val", "all"),
                   help="which split to score (evaluate.split)")
    p.add_argument("--speakers", default=None, choices=sorted(_SPEAKER_GROUPS),
                   help="speaker group to score (evaluate.speakers)")

    p = sub.add_parser("params", help="print the trainable parameter count of a strategy")
    _add_common(p)
    p.add_argument("--strategy", required=True,
                   help="tts0 | ft | adapter_<sites> | hyper_<sites>")

    p = sub.add_parser("dump-hyper-params",
                       help="export generated adapter weights per adaptation speaker")
    _add_common(p)
    p.add_argument("--manifest", default=None, help="corpus manifest (paths.manifest)")
    p.add_argument("--checkpoint", default=None,
                   help="hyper-strategy checkpoint (paths.checkpoint)")
    p.add_argument("--jitters", type=int, default=None,
                   help="extra jittered embeddings per speaker (dump.jitters)")

    p = sub.add_parser("grad-check", help="finite-difference checks on every sub-network")
    _add_common(p)
    p.add_argument("--instances", type=int, default=None,
                   help="random instances per sub-network (gradcheck.instances)")
    p.add_argument("--threshold", type=float, default=None,
                   help="max relative error (gradcheck.threshold)")
    p.add_argument("--networks", default=None,
                   help="comma-separated subset (gradcheck.networks)")

    return parser


_FLAG_KEYS = {
    "manifest": "paths.manifest",
    "checkpoint": "paths.checkpoint",
    "strategy": "adapt.strategy",
    "steps": "adapt.steps",
    "utt": "synthesize.utt",
    "speaker": "synthesize.speaker",
    "phonemes": "synthesize.phonemes",
    "wav": "synthesize.wav",
    "split": "evaluate.split",
    "speakers": "evaluate.speakers",
    "jitters": "dump.jitters",
    "instances": "gradcheck.instances",
    "threshold": "gradcheck.threshold",
    "networks": "gradcheck.networks",
    "out_dir": "out_dir",
}


def _apply_flags(cfg, args):
    for attr, dotted in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            _set_dotted(cfg, dotted, value)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2

    try:
        if args.verb == "params":
            cfg = load_config(args.config, args.set, args.seed)
            _apply_flags(cfg, args)
            return _cmd_params(cfg, args.strategy)
        cfg = load_config(args.config, args.set, args.seed)
        _apply_flags(cfg, args)
        handler = {
            "gen-corpus": _cmd_gen_corpus,
            "pretrain": _cmd_pretrain,
            "adapt": _cmd_adapt,
            "synthesize": _cmd_synthesize,
            "evaluate": _cmd_evaluate,
            "dump-hyper-params": _cmd_dump_hyper_params,
            "grad-check": _cmd_grad_check,
        }[args.verb]
        return handler(cfg)
    except (InputError, ConfigError, StateError) as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except HyperadaptError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
