"""Command-line runner: gen | train | eval | intervene | theory | ablate | print-defaults."""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import platform
import subprocess
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .estimator import ContentStyleVAE, ModelConfig, TrainConfig, load_checkpoint, train
from .intervene import flip_comparison, select_donors
from .metrics import DegenerateTargetError, identifiability_report, write_report_csv
from .supportlab import (
    AssumptionError,
    BudgetExceededError,
    DimensionError,
    brute_force_theorem_check,
    check_assumption_partial,
    load_support_json,
)
from .synthgen import (
    ChecksumError,
    ConfigError,
    ConstructionError,
    ProcessConfig,
    build_process,
    load_batch,
    sample_all_domains,
    save_batch,
)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2
SPLITS = {"train": 1, "val": 2, "test": 3}
MANIFEST = "manifest.json"

ABLATIONS = [
    # name, style flow context, which regularizers stay on
    ("Indep", "domain", ()),
    ("CausalDep", "content", ()),
    ("+sparsity", "content", ("lam_sparsity",)),
    ("+partial", "content", ("lam_sparsity", "lam_partial")),
    ("Full", "content", ("lam_sparsity", "lam_partial", "lam_cmask")),
]


class ManifestError(ValueError):
    pass


def default_config() -> dict:
    proc = ProcessConfig().to_json_dict()
    proc.pop("support_mask")  # drawn from the seed unless given explicitly
    proc.update(n_train_per_domain=2500, n_val_per_domain=500, n_test_per_domain=500)
    tr = asdict(TrainConfig())
    tr["model"] = asdict(ModelConfig())
    ev = {"n_eval": 2000, "folds": 5, "seed": 0, "n_donors": 100, "n_flip": 1000, "donors_same_domain": False}
    return {"process": proc, "train": tr, "eval": ev}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    cfg = default_config()
    if path:
        user = json.loads(Path(path).read_text())
        unknown = set(user) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        cfg = _merge(cfg, user)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def process_config(cfg: dict) -> ProcessConfig:
    pc = ProcessConfig.from_json_dict(cfg["process"])
    pc.validate()
    return pc


def model_config(cfg: dict, proc_cfg: ProcessConfig, **overrides) -> ModelConfig:
    p = proc_cfg.partition
    m = dict(cfg["train"].get("model", {}))
    m.update(d_c=p.d_c, d_s=p.d_s, d_x=p.d_x, n_domains=proc_cfg.n_domains, **overrides)
    return ModelConfig.from_dict(m)


def _git_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(out_dir: Path, cfg: dict, seeds: dict, inputs: dict, outputs: list[str], t0: float):
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
    manifest = {
        "config_hash": config_hash(cfg),
        "seeds": seeds,
        "versions": {
            "csident": __version__,
            "numpy": np.__version__,
            "torch": torch.__version__,
            "python": platform.python_version(),
        },
        "inputs": inputs,
        "outputs": sorted(outputs),
        "wall_clock_seconds": round(time.perf_counter() - t0, 3),
        "revision": _git_revision(),
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_manifest(art_dir) -> tuple[dict, dict]:
    """Load an artifact directory's manifest and config; refuse if the stored hash does not match."""
    art_dir = Path(art_dir)
    mpath, cpath = art_dir / MANIFEST, art_dir / "config.json"
    if not mpath.exists() or not cpath.exists():
        raise ManifestError(f"{art_dir} has no manifest/config pair")
    manifest = json.loads(mpath.read_text())
    cfg = json.loads(cpath.read_text())
    if config_hash(cfg) != manifest.get("config_hash"):
        raise ManifestError(f"config hash mismatch in {art_dir}; refusing to run")
    return manifest, cfg


def _log(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr)


def cmd_gen(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["process"]["seed"] = args.seed
    pc = process_config(cfg)
    proc = build_process(pc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = pc.seed
    for name, k in SPLITS.items():
        n = int(cfg["process"][f"n_{name}_per_domain"])
        batch = sample_all_domains(proc, n, seed=10 * seed + k)
        save_batch(out / name, batch, pc, extra={"split": name})
        _log(args, f"{name}: {len(batch)} samples")
    # persist the resolved mask so downstream steps never redraw it
    cfg["process"]["support_mask"] = pc.support_mask.to_json_dict(d_c=pc.partition.d_c)
    write_manifest(out, cfg, {"process": seed}, {}, list(SPLITS), t0)
    return EXIT_OK


def _load_data(data_dir):
    manifest, dcfg = read_manifest(data_dir)
    splits = {name: load_batch(Path(data_dir) / name)[0] for name in SPLITS}
    return dcfg, splits


def _train_one(cfg, pc, splits, out: Path, quiet: bool, style_context=None, lam_keep=None):
    tc_dict = {k: v for k, v in cfg["train"].items() if k != "model"}
    if lam_keep is not None:
        for lam in ("lam_sparsity", "lam_partial", "lam_cmask"):
            if lam not in lam_keep:
                tc_dict[lam] = 0.0
    tc = TrainConfig.from_dict(tc_dict)
    overrides = {} if style_context is None else {"style_context": style_context}
    mc = model_config(cfg, pc, **overrides)
    model = ContentStyleVAE(mc, seed=tc.seed)
    out.mkdir(parents=True, exist_ok=True)
    model, log = train(
        model, splits["train"], tc, val=splits["val"],
        log_path=out / "losses.jsonl", timing_path=out / "timing.jsonl",
        quiet=quiet, checkpoint_dir=out,
    )
    return model, log, tc


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    dcfg, splits = _load_data(args.data)
    cfg = load_config(args.config)
    cfg["process"] = dcfg["process"]
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    pc = process_config(cfg)
    out = Path(args.out)
    _, log, tc = _train_one(cfg, pc, splits, out, args.quiet)
    outputs = ["params.json", "params.bin", "model.json", "train_state.json", "losses.jsonl", "timing.jsonl"]
    if (out / "optim.json").exists():
        outputs += ["optim.json", "optim.bin"]
    write_manifest(out, cfg, {"train": tc.seed}, {"data": str(Path(args.data))}, outputs, t0)
    _log(args, f"trained {len(log)} epochs")
    return EXIT_OK


def _eval_setup(args):
    dcfg, splits = _load_data(args.data)
    ckpt_manifest, ccfg = read_manifest(args.checkpoint)
    cfg = load_config(args.config) if args.config else ccfg
    cfg["process"] = dcfg["process"]
    if args.seed is not None:
        cfg["eval"]["seed"] = args.seed
    model, _ = load_checkpoint(args.checkpoint)
    return cfg, splits, model


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    cfg, splits, model = _eval_setup(args)
    ev = cfg["eval"]
    proc = build_process(process_config(cfg))
    rep = identifiability_report(model, proc, int(ev["n_eval"]), seed=int(ev["seed"]), folds=int(ev["folds"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_json(out / "report.json")
    write_report_csv(out / "report.csv", [rep.csv_row()])
    write_manifest(
        out, cfg, {"eval": ev["seed"]},
        {"data": str(Path(args.data)), "checkpoint": str(Path(args.checkpoint))},
        ["report.json", "report.csv"], t0,
    )
    _log(args, json.dumps(rep.to_json_dict()))
    return EXIT_OK


def run_flip(model, splits, ev: dict):
    test = splits["test"]
    n = min(int(ev["n_flip"]), len(test))
    # seeded subset so every domain is represented, kept in file order
    rows = np.sort(np.random.default_rng(int(ev["seed"])).permutation(len(test))[:n])
    test = test.subset(rows)
    donors = select_donors(splits["train"], int(ev["n_donors"]), per_domain=bool(ev["donors_same_domain"]))
    target = np.where(test.s_tilde[:, 0] >= 0, -1, 1)
    return flip_comparison(model, test.x, test.domain, target, donors)


def cmd_intervene(args) -> int:
    t0 = time.perf_counter()
    cfg, splits, model = _eval_setup(args)
    stats = run_flip(model, splits, cfg["eval"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats.write_csv(out / "nll.csv")
    (out / "summary.json").write_text(json.dumps(stats.summary(), indent=1, sort_keys=True))
    write_manifest(
        out, cfg, {"eval": cfg["eval"]["seed"]},
        {"data": str(Path(args.data)), "checkpoint": str(Path(args.checkpoint))},
        ["nll.csv", "summary.json"], t0,
    )
    _log(args, json.dumps(stats.summary()))
    return EXIT_OK


def cmd_theory(args) -> int:
    t0 = time.perf_counter()
    g, p = load_support_json(args.support)
    eq4 = {"auto": check_assumption_partial(g, p), "on": True, "off": False}[args.enforce_eq4]
    report = brute_force_theorem_check(g, p, eq4)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "theorem_report.json").write_text(json.dumps(report.to_json_dict(), indent=1, sort_keys=True))
    cfg = {"support": g.to_json_dict(d_c=p.d_c), "enforce_eq4": eq4}
    write_manifest(out, cfg, {}, {"support": str(Path(args.support))}, ["theorem_report.json"], t0)
    _log(args, json.dumps(report.to_json_dict()))
    return EXIT_OK


def cmd_ablate(args) -> int:
    t0 = time.perf_counter()
    dcfg, splits = _load_data(args.data)
    cfg = load_config(args.config)
    cfg["process"] = dcfg["process"]
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    pc = process_config(cfg)
    proc = build_process(pc)
    ev = cfg["eval"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, outputs = [], ["ablation.csv"]
    for name, ctx, keep in ABLATIONS:
        sub = name.lstrip("+")
        model, log, _ = _train_one(cfg, pc, splits, out / "runs" / sub, True, style_context=ctx, lam_keep=keep)
        rep = identifiability_report(model, proc, int(ev["n_eval"]), seed=int(ev["seed"]), folds=int(ev["folds"]))
        last = log[-1] if log else {}
        rows.append(rep.csv_row(
            config=name, epochs_run=len(log),
            val_recon=last.get("val_recon"), val_kl=last.get("val_kl"),
        ))
        _log(args, f"{name}: {json.dumps(rows[-1])}")
    write_report_csv(out / "ablation.csv", rows)
    write_manifest(out, cfg, {"train": cfg["train"]["seed"], "eval": ev["seed"]},
                   {"data": str(Path(args.data))}, outputs, t0)
    return EXIT_OK


def cmd_print_defaults(args) -> int:
    print(json.dumps(default_config(), indent=1, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with process/train/eval sections")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the seed of the section this command uses")
    common.add_argument("--quiet", action="store_true")

    ap = argparse.ArgumentParser(prog="csident", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)
    sub.add_parser("gen", parents=[common], help="generate train/val/test splits")
    p = sub.add_parser("train", parents=[common], help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    for name in ("eval", "intervene"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("theory", parents=[common], help="exhaustive support-level theorem check")
    p.add_argument("--support", required=True, help="support-matrix JSON")
    p.add_argument("--enforce-eq4", choices=("auto", "on", "off"), default="auto",
                   help="also minimize content/style overlap (auto: when partial overlap holds)")
    p = sub.add_parser("ablate", parents=[common], help="train and score the five ablation variants")
    p.add_argument("--data", required=True)
    sub.add_parser("print-defaults", parents=[common])
    return ap


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "intervene": cmd_intervene,
    "theory": cmd_theory,
    "ablate": cmd_ablate,
    "print-defaults": cmd_print_defaults,
}

VALIDATION_ERRORS = (
    ConfigError, AssumptionError, DimensionError, BudgetExceededError, ManifestError, ChecksumError,
    DegenerateTargetError, FileNotFoundError, json.JSONDecodeError, KeyError, ValueError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.cmd not in ("print-defaults",) and args.out is None:
        print("error: --out is required", file=sys.stderr)
        return EXIT_VALIDATION
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.cmd](args)
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConstructionError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except VALIDATION_ERRORS as e:
        print(f"validation failure: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
