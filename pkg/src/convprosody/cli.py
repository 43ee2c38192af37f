"""Command-line interface for reproducible corpus/train/eval/infer runs.

Commands:

    gen-data   generate a synthetic dialogue corpus
    train      train a model on a corpus, writing checkpoints + metrics
    eval       score a checkpoint on a corpus split
    infer      predict prosody for one dialogue history
    gradcheck  compare analytic gradients against finite differences

Every command writes a RunManifest JSON (atomically) recording the
resolved configuration, seed, input/output paths, timestamps, and sha256
hashes of written artifacts, so any run can be reproduced exactly.

Exit codes: 0 success; 1 runtime failure (IO, bad data files, numeric
aborts, failed checks); 2 usage or configuration errors. The environment
variable I3_PRECISION (f32 or f64) overrides the configured precision.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import sys

from .checkpoint import build_model, load_checkpoint, save_checkpoint
from .corpus import GeneratorConfig, generate_corpus, read_corpus, record_from_dict, write_corpus
from .errors import CheckpointError, ConfigError, ContractError, CorpusError, NumericError, ShapeError
from .gradcheck import MODULE_NAMES, TOLERANCE, run_suites
from .interaction import KINDS
from .model import ModelConfig, ModuleFlags
from .pipeline import evaluate, infer, split_corpus, train, validate_corpus_dims

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _utc_now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _atomic_write_json(obj, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


class Manifest:
    def __init__(self, command, args, config, seed, corpus_paths=(), checkpoint_paths=()):
        self.path = None
        self.data = {
            "command": command,
            "argv": args,
            "config": config,
            "seed": seed,
            "corpus_paths": list(map(str, corpus_paths)),
            "checkpoint_paths": list(map(str, checkpoint_paths)),
            "started": _utc_now(),
            "finished": None,
            "artifacts": {},
        }

    def add_artifact(self, path):
        self.data["artifacts"][str(path)] = _sha256(path)

    def write(self, path):
        self.data["finished"] = _utc_now()
        _atomic_write_json(self.data, path)
        self.path = str(path)


def _load_json_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return obj


def _apply_precision_env(config: ModelConfig):
    override = os.environ.get("I3_PRECISION")
    if not override:
        return config
    if override not in ("f32", "f64"):
        raise ConfigError(f"I3_PRECISION must be 'f32' or 'f64', got {override!r}")
    return config.with_flags(config.module_flags, precision=override)


def _parse_ablation(value):
    names = [n.strip().replace("-", "_") for n in value.split(",") if n.strip()]
    return ModuleFlags.from_kept(names)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, argv):
    config_dict = _load_json_config(args.config) if args.config else {}
    if args.seed is not None:
        config_dict["seed"] = args.seed
    config = GeneratorConfig.from_dict(config_dict)
    records = generate_corpus(config)
    try:
        write_corpus(records, args.out)
    except OSError as exc:
        raise RuntimeError(f"cannot write corpus to {args.out}: {exc}") from exc
    manifest = Manifest("gen-data", argv, config.to_dict(), config.seed, corpus_paths=[args.out])
    manifest.add_artifact(args.out)
    manifest.write(f"{args.out}.manifest.json")
    print(f"wrote {len(records)} dialogues to {args.out} "
          f"(d_t={config.d_t}, d_s={config.d_s}, vocab={config.vocab})")
    return 0


def cmd_train(args, argv):
    config_dict = _load_json_config(args.config) if args.config else {}
    config = ModelConfig.from_dict(config_dict)
    if args.ablation is not None:
        config = config.with_flags(_parse_ablation(args.ablation))
    if args.no_ie:
        config = config.with_flags(config.module_flags, ie_enabled=False)
    config = _apply_precision_env(config)
    records = read_corpus(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    result = train(config, records)
    final_path = os.path.join(args.out, "checkpoint.ckpt")
    best_path = os.path.join(args.out, "best.ckpt")
    metrics_path = os.path.join(args.out, "metrics.jsonl")
    save_checkpoint(result.final, final_path)
    save_checkpoint(result.best, best_path)
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for entry in result.metrics:
            fh.write(json.dumps(entry) + "\n")
    manifest = Manifest("train", argv, config.to_dict(), config.seed,
                        corpus_paths=[args.corpus], checkpoint_paths=[final_path, best_path])
    for path in (final_path, best_path, metrics_path):
        manifest.add_artifact(path)
    manifest.write(os.path.join(args.out, "manifest.json"))
    last = result.metrics[-1]
    print(f"trained {config.steps} steps; final val_total={last['val_total']:.4f} "
          f"mae_p={last['mae_p']:.4f} mae_e={last['mae_e']:.4f} mae_d={last['mae_d']:.4f}")
    print(f"checkpoints: {final_path} (final), {best_path} (best val)")
    return 0


def _eval_table(report):
    lines = [
        ("mae_p", report.mae_p),
        ("mae_e", report.mae_e),
        ("mae_d", report.mae_d),
        ("retrieval_chance", report.retrieval_chance),
    ]
    lines += [(f"retrieval {kind}", acc) for kind, acc in sorted(report.retrieval_acc.items())]
    lines += [(f"loss {name}", value) for name, value in sorted(report.loss_components.items())]
    width = max(len(name) for name, _ in lines)
    return "\n".join(f"{name:<{width}}  {value:.6f}" for name, value in lines)


def cmd_eval(args, argv):
    ckpt = load_checkpoint(args.checkpoint)
    config = _apply_precision_env(ckpt.config)
    ckpt.config = config
    model = build_model(ckpt)
    records = read_corpus(args.corpus)
    validate_corpus_dims(records, config)
    _, val, test = split_corpus(records, config.seed)
    split = val if args.split == "val" else test
    if not split:
        raise ConfigError(f"corpus too small: the {args.split} split is empty")
    report = evaluate(model, split)
    payload = report.to_dict()
    payload["split"] = args.split
    payload["checkpoint_step"] = ckpt.step
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(_eval_table(report))
    manifest = Manifest("eval", argv, config.to_dict(), config.seed,
                        corpus_paths=[args.corpus], checkpoint_paths=[args.checkpoint])
    if args.out:
        _atomic_write_json(payload, args.out)
        manifest.add_artifact(args.out)
        manifest.write(f"{args.out}.manifest.json")
    else:
        manifest.write(args.manifest or "eval.manifest.json")
    return 0


def _read_dialogue_file(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [line for line in fh if line.strip()]
    except OSError as exc:
        raise RuntimeError(f"cannot read dialogue file {path}: {exc}") from exc
    if not lines:
        raise CorpusError("dialogue file is empty")
    try:
        obj = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusError(f"invalid JSON: {exc.msg}", line=1) from exc
    return record_from_dict(obj, line=1, require_targets=False)


def cmd_infer(args, argv):
    ckpt = load_checkpoint(args.checkpoint)
    ckpt.config = _apply_precision_env(ckpt.config)
    model = build_model(ckpt)
    record = _read_dialogue_file(args.dialogue)
    if record.target_phonemes.size == 0:
        raise ContractError("dialogue file has no target phonemes")
    prediction = infer(record.utterances, record.target_phonemes, model)
    payload = prediction.to_dict()
    print(json.dumps(payload, indent=2, sort_keys=True))
    manifest = Manifest("infer", argv, ckpt.config.to_dict(), ckpt.config.seed,
                        corpus_paths=[args.dialogue], checkpoint_paths=[args.checkpoint])
    if args.out:
        _atomic_write_json(payload, args.out)
        manifest.add_artifact(args.out)
        manifest.write(f"{args.out}.manifest.json")
    else:
        manifest.write(args.manifest or "infer.manifest.json")
    return 0


def cmd_gradcheck(args, argv):
    reports = run_suites(args.module, args.dims)
    width = max(len(f"{r.module}/{r.op}") for r in reports)
    failures = []
    for r in reports:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.module + '/' + r.op:<{width}}  max_rel_err={r.max_rel_error:.3e}  {status}")
        if not r.passed:
            failures.append(r)
    manifest = Manifest("gradcheck", argv,
                        {"module": args.module, "dims": args.dims, "tolerance": TOLERANCE}, 0)
    manifest.write(args.manifest or "gradcheck.manifest.json")
    if failures:
        worst = max(failures, key=lambda r: r.max_rel_error)
        print(f"FAILED: {worst.module}/{worst.op} coordinate {worst.worst_coord} "
              f"exceeds {TOLERANCE:g} with {worst.max_rel_error:.3e}", file=sys.stderr)
        return RUNTIME_ERROR
    print(f"all {len(reports)} checks within {TOLERANCE:g}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="convprosody",
        description="Conversational prosody prediction from multimodal dialogue history.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dialogue corpus")
    p.add_argument("--config", help="generator config JSON (defaults apply when omitted)")
    p.add_argument("--out", required=True, help="output corpus path (.jsonl or .jsonl.gz)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--config", help="model config JSON (defaults apply when omitted)")
    p.add_argument("--corpus", required=True, help="training corpus path")
    p.add_argument("--out", required=True, help="output directory for checkpoints and metrics")
    p.add_argument("--ablation", help=(
        "comma list of interaction modules to KEEP, from: "
        + ", ".join(k.replace("_", "-") for k in KINDS)
        + "; empty string keeps none; omitted keeps all"))
    p.add_argument("--no-ie", action="store_true", help="replace interaction enhancement by prefix means")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.add_argument("--out", help="also write the report JSON here")
    p.add_argument("--manifest", help="manifest path (default eval.manifest.json)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="predict prosody for one dialogue history")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dialogue", required=True,
                   help="JSON Lines file: history utterances plus target phonemes")
    p.add_argument("--out", help="also write the prediction JSON here")
    p.add_argument("--manifest", help="manifest path (default infer.manifest.json)")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--module", choices=("all",) + MODULE_NAMES, default="all")
    p.add_argument("--dims", choices=("small", "default"), default="small")
    p.add_argument("--manifest", help="manifest path (default gradcheck.manifest.json)")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args, argv)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (CorpusError, CheckpointError, NumericError, ShapeError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
