"""``reco`` command line: gen-world, build-index, train, eval, ablate, grad-check.

Configuration comes from an optional JSON file with flat namespaced keys
(``train.lr``, ``fusion.heads``, ``retrieval.k``, ``world.image_noise``...)
overridden by flags. The global seed falls back to ``RECO_SEED``. Every
command prints a JSON summary that embeds the resolved configuration.

Exit codes: 0 success, 2 configuration or input error, 3 verification
failure, 4 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from reco.exceptions import ConfigError, DivergenceError, FormatError

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("reco")

# short aliases accepted under train.*
TRAIN_KEYS = {"lr": "base_lr", "wd": "weight_decay"}


class VerificationError(Exception):
    pass


def _dataclass_keys(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _known_keys() -> dict[str, set[str]]:
    from reco.fusion import FusionConfig
    from reco.synthworld import WorldSpec
    from reco.training import TrainConfig

    return {
        "world": _dataclass_keys(WorldSpec),
        "train": _dataclass_keys(TrainConfig) | set(TRAIN_KEYS),
        "fusion": _dataclass_keys(FusionConfig),
        "retrieval": {"k", "k_prime", "search_mode", "fetch_modality", "n_probe"},
        "eval": {"mode", "k_prime", "fusion"},
        "index": {"partitions", "modality", "n_probe"},
        "ablate": {"seeds", "k_values", "k_prime_values", "fractions"},
    }


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return raw


def resolve_config(file_cfg: dict, overrides: dict, env=None) -> dict:
    """Merge file values and non-None flag overrides; validate the key names."""
    env = os.environ if env is None else env
    known = _known_keys()
    cfg = {}
    for key, value in {**file_cfg, **{k: v for k, v in overrides.items() if v is not None}}.items():
        if key == "seed":
            cfg[key] = value
            continue
        section, _, name = key.partition(".")
        if section not in known or name not in known[section]:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = value
    if "seed" not in cfg:
        env_seed = env.get("RECO_SEED")
        try:
            cfg["seed"] = int(env_seed) if env_seed not in (None, "") else 0
        except ValueError as err:
            raise ConfigError(f"RECO_SEED must be an integer, got {env_seed!r}") from err
    return dict(sorted(cfg.items()))


def _section(cfg: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def world_spec(cfg: dict):
    from reco.synthworld import WorldSpec

    values = _section(cfg, "world")
    values.setdefault("seed", cfg["seed"])
    try:
        spec = WorldSpec(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from err
    spec.validate()
    return spec


def train_config(cfg: dict):
    from reco.training import TrainConfig

    values = {TRAIN_KEYS.get(k, k): v for k, v in _section(cfg, "train").items()}
    retrieval = _section(cfg, "retrieval")
    for key in ("k", "search_mode", "fetch_modality", "n_probe"):
        if key in retrieval:
            values.setdefault(key, retrieval[key])
    values.setdefault("seed", cfg["seed"])
    tc = TrainConfig(**values)
    tc.validate()
    return tc


def fusion_config(cfg: dict, dim: int):
    from reco.fusion import FusionConfig

    values = _section(cfg, "fusion")
    values.setdefault("dim", dim)
    try:
        return FusionConfig(**values)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def _emit(summary: dict, path=None) -> None:
    text = json.dumps(summary, indent=2, sort_keys=True, default=_jsonable)
    if path is not None:
        Path(path).write_text(text + "\n")
    print(text)


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _load_world(path):
    from reco.synthworld import load_world

    root = _require(path, "world directory")
    return load_world(root)


# ---------------------------------------------------------------- commands


def cmd_gen_world(args, cfg) -> int:
    from reco.synthworld import generate_world, save_world, world_report

    spec = world_spec(cfg)
    world = generate_world(spec)
    out = save_world(world, args.out)
    report = world_report(world)
    _emit({"command": "gen-world", "config": cfg, "out": out,
           "memory_checksum": world.memory.checksum(), "report": report})
    return EXIT_OK


def _recall(index, store, modality, n_probe, n_queries, k, seed) -> float:
    from reco.retrieval import search_matrix

    rng = np.random.default_rng(seed)
    mat = store.matrix(modality)
    rows = rng.choice(len(store), size=min(n_queries, len(store)), replace=False)
    queries = mat[rows]
    exact, _ = search_matrix(queries, mat, k)
    approx, _ = index.search(queries, k, n_probe)
    return float(np.mean([len(set(a) & set(e)) / k for a, e in zip(approx, exact)]))


def cmd_build_index(args, cfg) -> int:
    from reco.memory import load_bank
    from reco.retrieval import build_index, save_index

    store = load_bank(_require(args.bank, "bank"))
    settings = _section(cfg, "index")
    modality = settings.get("modality", "image")
    partitions = int(settings.get("partitions", 64))
    n_probe = int(settings.get("n_probe", 8))
    if not 1 <= partitions <= len(store):
        raise ConfigError(f"partitions must lie in [1, {len(store)}]")
    index = build_index(store, modality, partitions, seed=cfg["seed"])
    save_index(index, args.out)
    summary = {"command": "build-index", "config": cfg, "out": Path(args.out), "entries": len(store)}
    if args.recall_queries:
        k = min(10, len(store))
        summary["recall_at_10"] = _recall(index, store, modality, min(n_probe, partitions),
                                          args.recall_queries, k, cfg["seed"])
        summary["n_probe"] = min(n_probe, partitions)
    _emit(summary)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    from reco.fusion import save_checkpoint
    from reco.training import train_fusion

    world = _load_world(args.world)
    tc = train_config(cfg)
    fc = fusion_config(cfg, world.memory.dim)
    source = world.memory
    if tc.retrieval_path == "approx":
        from reco.retrieval import build_index

        partitions = int(_section(cfg, "index").get("partitions", 64))
        source = {m: build_index(world.memory, m, partitions, seed=tc.seed) for m in ("image", "text")}
    result = train_fusion(world.train, source, tc, fc, same_provenance=world.same_provenance)
    extra = {"config": cfg, "metrics_steps": len(result.metrics)}
    save_checkpoint(result.params, args.out, float(result.temperature.log_inv_tau.data), extra)
    metrics_path = Path(args.metrics) if args.metrics else Path(str(args.out) + ".metrics.jsonl")
    result.write_metrics(metrics_path)
    losses = [m["loss"] for m in result.metrics]
    _emit({"command": "train", "config": cfg, "out": Path(args.out), "metrics": metrics_path,
           "steps": len(losses), "initial_loss": losses[0] if losses else None,
           "final_loss": losses[-1] if losses else None, "inv_tau": result.temperature.value})
    return EXIT_OK


MODES = ("none", "image", "text", "both")


def _eval_modes(world, params, cfg, modes, k_prime, fusion="transformer"):
    from reco.evaluation import zero_shot_classify
    from reco.retrieval import RetrievalConfig

    r = _section(cfg, "retrieval")
    rcfg = RetrievalConfig(k=max(k_prime, 1), search_mode=r.get("search_mode", "uni"),
                           fetch_modality=r.get("fetch_modality", "opposite"))
    return {m: zero_shot_classify(world.task, params, world.memory, m, k_prime, rcfg, fusion=fusion) for m in modes}


def cmd_eval(args, cfg) -> int:
    from reco.evaluation import best_mode_report

    world = _load_world(args.world)
    ev = _section(cfg, "eval")
    mode = ev.get("mode", "both")
    k_prime = int(ev.get("k_prime", _section(cfg, "retrieval").get("k", 10)))
    fusion = ev.get("fusion", "transformer")
    modes = MODES if mode == "all" else (mode,)
    if mode != "all" and mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES + ('all',)}")
    params = None
    if any(m != "none" for m in modes) and fusion == "transformer":
        if args.ckpt is None:
            raise ConfigError("refining modes need --ckpt")
        params = _load_ckpt(args.ckpt, world.memory.dim)
    scores = _eval_modes(world, params, cfg, modes, k_prime, fusion)
    lines = ["mode,k_prime,accuracy"] + [f"{m},{k_prime},{a:.6f}" for m, a in scores.items()]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    summary = {"command": "eval", "config": cfg, "scores": scores, "out": args.out}
    if len(modes) > 1:
        summary["best_mode"] = best_mode_report({"classification": scores})
    _emit(summary)
    return EXIT_OK


def _load_ckpt(path, dim):
    from reco.fusion import load_checkpoint

    params, _, _ = load_checkpoint(_require(path, "checkpoint"))
    if params.config.dim != dim:
        raise ConfigError(f"checkpoint dimension {params.config.dim} does not match the world's {dim}")
    return params


def _seeds(cfg, default=(0, 1, 2)):
    seeds = _section(cfg, "ablate").get("seeds", list(default))
    return [int(s) for s in (seeds.split(",") if isinstance(seeds, str) else seeds)]


def _int_list(value):
    return [int(v) for v in (value.split(",") if isinstance(value, str) else value)]


def cmd_ablate(args, cfg) -> int:
    from reco import evaluation as ev
    from reco.training import train_fusion

    world = _load_world(args.world)
    base_tc = train_config(cfg)
    fc = fusion_config(cfg, world.memory.dim)
    seeds = _seeds(cfg)
    ab = _section(cfg, "ablate")
    summary = {"command": "ablate", "which": args.which, "config": cfg, "seeds": seeds}
    if args.which == "table3":
        per_seed = [ev.run_table3(world, replace(base_tc, seed=s), fc) for s in seeds]
        baseline = per_seed[0][0]
        cells = [ev.AblationCell.make(c.search_mode, c.fusion_mode, c.fusion_fn,
                                      float(np.mean([run[1][i].value for run in per_seed])), baseline)
                 for i, c in enumerate(per_seed[0][1])]
        text = ev.cells_csv(baseline, cells)
        summary.update(ev.cells_summary(baseline, cells, seeds, cfg))
    elif args.which == "ksweep":
        ks = _int_list(ab.get("k_values", [1, 2, 5, 10]))
        kps = _int_list(ab.get("k_prime_values", [1, 2, 5, 10, 20]))
        trained = {k: train_fusion(world.train, world.memory, replace(base_tc, k=k), fc,
                                   same_provenance=world.same_provenance).params for k in ks}
        matrix = ev.run_k_sweep(world, trained, kps)
        text = ev.matrix_csv(matrix)
        summary["accuracy"] = matrix
        summary["baseline"] = ev.zero_shot_classify(world.task, None, world.memory, "none")
    else:
        fractions = [float(f) for f in ab.get("fractions", [0.01, 0.1, 1.0])]
        rows = []
        for s in seeds:
            for row in ev.run_memory_update(world, fractions, replace(base_tc, seed=s), fc):
                rows.append({"seed": s, **row})
        text = ev.rows_csv(rows)
        summary["rows"] = rows
        summary["baseline"] = ev.zero_shot_classify(world.task, None, world.memory, "none")
    Path(args.out).write_text(text)
    summary["out"] = Path(args.out)
    _emit(summary, Path(str(args.out) + ".json"))
    return EXIT_OK


def cmd_grad_check(args, cfg) -> int:
    from reco.training import gradient_check

    errors = [gradient_check(s, n=args.n, dim=args.dim, k=args.k, heads=args.heads)
              for s in range(cfg["seed"], cfg["seed"] + args.seeds)]
    worst = max(errors)
    _emit({"command": "grad-check", "config": cfg, "max_relative_error": worst,
           "tolerance": args.tol, "seeds": args.seeds})
    if not worst < args.tol:
        raise VerificationError(f"max relative gradient error {worst:.3e} exceeds {args.tol:g}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reco", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON file with flat namespaced keys")
        p.add_argument("--seed", type=int, dest="seed")

    p = sub.add_parser("gen-world", help="generate a synthetic world archive")
    common(p)
    p.add_argument("--spec", help="JSON file of WorldSpec fields (alias for world.* keys)")
    p.add_argument("--out", required=True)
    for name in ("n_coarse", "n_fine", "dim", "memory_size", "train_size", "eval_size", "n_distractor_fine"):
        p.add_argument("--" + name.replace("_", "-"), type=int, dest="world." + name)
    for name in ("coarse_signal", "fine_signal", "text_fine_signal", "memory_text_fine_signal",
                 "fine_alignment", "image_noise", "text_noise", "class_noise", "memory_mismatch",
                 "memory_on_task", "train_on_task"):
        p.add_argument("--" + name.replace("_", "-"), type=float, dest="world." + name)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("build-index", help="build an IVF index over a bank")
    common(p)
    p.add_argument("--bank", required=True)
    p.add_argument("--modality", choices=("image", "text"), dest="index.modality")
    p.add_argument("--partitions", type=int, dest="index.partitions")
    p.add_argument("--n-probe", type=int, dest="index.n_probe")
    p.add_argument("--recall-queries", type=int, default=0,
                   help="report recall@10 against exact search on this many bank rows")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_index)

    def training_flags(p):
        p.add_argument("--epochs", type=int, dest="train.epochs")
        p.add_argument("--batch-size", type=int, dest="train.batch_size")
        p.add_argument("--lr", type=float, dest="train.base_lr")
        p.add_argument("--weight-decay", type=float, dest="train.weight_decay")
        p.add_argument("--warmup-frac", type=float, dest="train.warmup_frac")
        p.add_argument("--k", type=int, dest="train.k")
        p.add_argument("--branch-mode", choices=("both", "image_only", "text_only"), dest="train.branch_mode")
        p.add_argument("--retrieval-path", choices=("exact", "approx"), dest="train.retrieval_path")
        p.add_argument("--search-mode", choices=("uni", "cross"), dest="retrieval.search_mode")
        p.add_argument("--fetch-modality", choices=("same", "opposite"), dest="retrieval.fetch_modality")
        p.add_argument("--heads", type=int, dest="fusion.heads")
        p.add_argument("--layers", type=int, dest="fusion.layers")
        p.add_argument("--mlp-ratio", type=float, dest="fusion.mlp_ratio")

    p = sub.add_parser("train", help="train the fusion branches on a world")
    common(p)
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="metrics JSONL path (default: <out>.metrics.jsonl)")
    training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="zero-shot accuracy under an inference mode")
    common(p)
    p.add_argument("--world", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--mode", choices=MODES + ("all",), dest="eval.mode")
    p.add_argument("--k-prime", type=int, dest="eval.k_prime")
    p.add_argument("--fusion", choices=("transformer", "mean"), dest="eval.fusion")
    p.add_argument("--search-mode", choices=("uni", "cross"), dest="retrieval.search_mode")
    p.add_argument("--fetch-modality", choices=("same", "opposite"), dest="retrieval.fetch_modality")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="table3 grid, k sweep or memory-update study")
    common(p)
    p.add_argument("--which", choices=("table3", "ksweep", "memupdate"), required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True, help="CSV path; the JSON summary goes to <out>.json")
    p.add_argument("--seeds", dest="ablate.seeds", help="comma-separated training seeds")
    training_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of the training gradients")
    common(p, config=False)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if "." in k or k == "seed"}
    try:
        file_cfg = load_config(getattr(args, "config", None))
        if getattr(args, "spec", None):
            file_cfg = {**file_cfg, **{f"world.{k}": v for k, v in load_config(args.spec).items()}}
        cfg = resolve_config(file_cfg, overrides)
        return args.func(args, cfg)
    except (ConfigError, FormatError, FileNotFoundError) as err:
        print(f"reco {args.command}: error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationError as err:
        print(f"reco {args.command}: verification failed: {err}", file=sys.stderr)
        return EXIT_VERIFY
    except DivergenceError as err:
        print(f"reco {args.command}: training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
