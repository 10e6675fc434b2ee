"""Command-line driver: gen, preprocess, pretrain, finetune, eval, bound, report.

Every subcommand reads the same YAML experiment file and works inside one
output directory, so a run is ``gen -> preprocess -> pretrain -> finetune ->
eval`` plus ``bound`` and ``report`` at any point after ``gen``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
import yaml

from .agents import InterpConfig
from .envs import FAMILIES, generate_demos
from .experiments import POLICIES, EvalRow, contexts_for, evaluate_policy, finetune_on, pretrain_corpus
from .formats import load_ctxset, load_demoset, save_ctxset, save_demoset
from .seqmodel import SeqModel, TrainConfig, write_loss_log
from .theory import bound_experiment, expert_builder, rnp_builder, write_reports

log = logging.getLogger("regent")


class ConfigInvalid(ValueError):
    """Bad experiment file or flags; exit code 2."""


class MissingArtifact(RuntimeError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing artifact {path} (run `{producer}` first)")
        self.path = path


@dataclass
class ModelSection:
    n_layers: int = 2
    n_heads: int = 2
    hidden: int = 64


@dataclass
class TrainSection:
    batch_size: int = 8
    lr_start: float = 1e-3
    epochs: int = 3
    stop_after_epochs: int = 1
    weight_decay: float = 0.0
    through_interp: bool = True


@dataclass
class InterpSection:
    lam: float = 10.0
    l_scale: float = 10.0


@dataclass
class EvalSection:
    episodes: int = 50
    seeds: int = 3
    sticky_p: float = 0.1
    policies: List[str] = field(default_factory=lambda: list(POLICIES))


@dataclass
class BoundSection:
    family: str = "gridworld"
    level: int = 0
    demo_counts: List[int] = field(default_factory=lambda: [1, 2, 5, 10, 20])
    episodes: int = 500
    sticky_p: float = 0.0
    policy: str = "rnp"


@dataclass
class ExperimentConfig:
    pretrain_levels: Dict[str, List[int]] = field(default_factory=lambda: {"gridworld": list(range(8))})
    heldout_levels: Dict[str, List[int]] = field(default_factory=lambda: {"gridworld": [1000, 1001]})
    heldout_variant: str = "base"
    demos_per_level: int = 20
    retrieval_count: int = 5
    demo_counts: List[int] = field(default_factory=lambda: [1, 2, 5, 10, 20])
    n: int = 9
    seed: int = 0
    out: str = "runs/default"
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    interp: InterpSection = field(default_factory=InterpSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bound: BoundSection = field(default_factory=BoundSection)

    def as_dict(self) -> dict:
        def conv(obj):
            if hasattr(obj, "__dataclass_fields__"):
                return {f.name: conv(getattr(obj, f.name)) for f in fields(obj)}
            if isinstance(obj, dict):
                return {k: conv(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [conv(v) for v in obj]
            return obj

        return conv(self)

    @property
    def config_hash(self) -> str:
        """Hash of everything that affects outputs (the output directory does not)."""
        d = self.as_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def train_seeds(self) -> List[int]:
        return [self.seed + i for i in range(self.eval.seeds)]

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            batch_size=t.batch_size,
            lr_start=t.lr_start,
            epochs=t.epochs,
            stop_after_epochs=t.stop_after_epochs,
            weight_decay=t.weight_decay,
            through_interp=t.through_interp,
        )

    def interp_config(self) -> InterpConfig:
        return InterpConfig(self.interp.lam, self.interp.l_scale)


_SECTIONS = {"model": ModelSection, "train": TrainSection, "interp": InterpSection, "eval": EvalSection, "bound": BoundSection}


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigInvalid(f"{where}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigInvalid(f"{where}: unknown key(s) {unknown}")
    kw = {}
    for k, v in raw.items():
        if k in _SECTIONS and cls is ExperimentConfig:
            v = _build(_SECTIONS[k], v, f"{where}.{k}")
        kw[k] = v
    return cls(**kw)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def need(cond, msg):
        if not cond:
            raise ConfigInvalid(msg)

    for name in ("pretrain_levels", "heldout_levels"):
        levels = getattr(cfg, name)
        need(isinstance(levels, dict) and levels, f"{name} must be a non-empty mapping family -> level seeds")
        for fam, seeds in levels.items():
            need(fam in FAMILIES, f"{name}: unknown family {fam!r}")
            need(isinstance(seeds, list) and seeds and all(isinstance(s, int) for s in seeds), f"{name}.{fam}: need a list of ints")
            need(len(set(seeds)) == len(seeds), f"{name}.{fam}: duplicate level seeds")
    for fam, seeds in cfg.heldout_levels.items():
        overlap = set(seeds) & set(cfg.pretrain_levels.get(fam, []))
        need(not overlap, f"pretraining and held-out levels overlap for {fam}: {sorted(overlap)}")
    need(cfg.heldout_variant in ("base", "heldout"), "heldout_variant must be 'base' or 'heldout'")
    need(cfg.demos_per_level >= 2, "demos_per_level must be >= 2")
    need(1 <= cfg.retrieval_count <= cfg.demos_per_level, "retrieval_count must lie in [1, demos_per_level]")
    counts = cfg.demo_counts
    need(counts and all(isinstance(c, int) for c in counts), "demo_counts must be a list of ints")
    need(counts[0] >= 1, "demo_counts must be positive (R&P is undefined without a retrieval set)")
    need(all(b > a for a, b in zip(counts, counts[1:])), "demo_counts must be strictly increasing")
    need(cfg.n >= 1, "n must be >= 1")
    need(cfg.eval.seeds >= 1 and cfg.eval.episodes >= 1, "eval.seeds and eval.episodes must be >= 1")
    need(0.0 <= cfg.eval.sticky_p <= 1.0, "eval.sticky_p must lie in [0, 1]")
    bad = set(cfg.eval.policies) - set(POLICIES)
    need(not bad, f"eval.policies: unknown {sorted(bad)}")
    need(cfg.bound.family in FAMILIES, f"bound.family: unknown {cfg.bound.family!r}")
    need(cfg.bound.policy in ("rnp", "expert"), "bound.policy must be 'rnp' or 'expert'")
    try:
        cfg.train_config()
        cfg.interp_config()
    except ValueError as e:
        raise ConfigInvalid(str(e)) from e
    return cfg


def load_config(path: Optional[str], seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            with open(path) as f:
                raw = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigInvalid(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigInvalid(f"malformed YAML in {path}: {e}") from e
    try:
        cfg = _build(ExperimentConfig, raw, "config")
    except TypeError as e:
        raise ConfigInvalid(str(e)) from e
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    return validate(cfg)


# ------------------------------------------------------------------ paths


class Layout:
    def __init__(self, cfg: ExperimentConfig):
        self.root = Path(cfg.out)

    def demos(self, family, tier, level) -> Path:
        return self.root / "demos" / f"{family}-{tier}-{level}.demoset"

    def ctx(self, family, level) -> Path:
        return self.root / "ctx" / f"{family}-train-{level}.ctxset"

    def pretrained(self, seed) -> Path:
        return self.root / "models" / f"pretrained-s{seed}.ckpt"

    def finetuned(self, family, level, count, seed) -> Path:
        return self.root / "models" / f"finetuned-{family}-{level}-d{count}-s{seed}.ckpt"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    def report(self, name) -> Path:
        return self.root / "reports" / name


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, producer)
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _mkdirs(path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {path.parent}: {e}") from e


def _write_csv(path: Path, header: List[str], rows) -> None:
    _mkdirs(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


# --------------------------------------------------------------- commands


def cmd_gen(cfg: ExperimentConfig) -> Path:
    lay = Layout(cfg)
    files = {}
    jobs = [(fam, "train", lvl, cfg.demos_per_level) for fam, lvls in cfg.pretrain_levels.items() for lvl in lvls]
    jobs += [(fam, "heldout", lvl, max(cfg.demo_counts)) for fam, lvls in cfg.heldout_levels.items() for lvl in lvls]
    for fam, tier, lvl, count in jobs:
        overrides = {"variant": cfg.heldout_variant} if tier == "heldout" else {}
        ds = generate_demos(fam, [lvl], count, **overrides)
        path = lay.demos(fam, tier, lvl)
        _mkdirs(path)
        save_demoset(ds, path)
        files[str(path.relative_to(lay.root))] = _sha256(path)
        log.info("wrote %s (%d demos, %d steps)", path, len(ds.demos), ds.n_steps)
    _mkdirs(lay.manifest)
    lay.manifest.write_text(json.dumps({"config_hash": cfg.config_hash, "files": files}, indent=2, sort_keys=True) + "\n")
    return lay.manifest


def cmd_preprocess(cfg: ExperimentConfig) -> List[Path]:
    lay = Layout(cfg)
    out = []
    for fam, lvls in cfg.pretrain_levels.items():
        for lvl in lvls:
            ds = load_demoset(_require(lay.demos(fam, "train", lvl), "gen"))
            # retrieval designation is drawn from the master seed and the level
            cs = contexts_for(ds, fam, cfg.n, cfg.retrieval_count, cfg.seed * 100_003 + lvl)
            path = lay.ctx(fam, lvl)
            _mkdirs(path)
            save_ctxset(cs, path)
            out.append(path)
            log.info("wrote %s (%d datapoints, scale %.4g)", path, len(cs), cs.normalizer.scale)
    return out


def _corpus(cfg, lay):
    corpus = {}
    for fam, lvls in cfg.pretrain_levels.items():
        for lvl in lvls:
            cs = load_ctxset(_require(lay.ctx(fam, lvl), "preprocess"))
            corpus[cs.spec.env_id] = cs
    return corpus


def cmd_pretrain(cfg: ExperimentConfig) -> List[Path]:
    lay = Layout(cfg)
    corpus = _corpus(cfg, lay)
    out = []
    for seed in cfg.train_seeds:
        model, rows = pretrain_corpus(
            corpus, cfg.n, seed, cfg.model.hidden, cfg.train_config(), cfg.interp_config(),
            n_layers=cfg.model.n_layers, n_heads=cfg.model.n_heads,
        )
        path = lay.pretrained(seed)
        _mkdirs(path)
        model.save(path)
        log_path = lay.report(f"loss-s{seed}.csv")
        _mkdirs(log_path)
        write_loss_log(rows, log_path)
        out.append(path)
    return out


def _heldout(cfg, lay):
    for fam, lvls in cfg.heldout_levels.items():
        for lvl in lvls:
            yield fam, lvl, load_demoset(_require(lay.demos(fam, "heldout", lvl), "gen"))


def cmd_finetune(cfg: ExperimentConfig) -> List[Path]:
    lay = Layout(cfg)
    out = []
    for seed in cfg.train_seeds:
        base = SeqModel.load(_require(lay.pretrained(seed), "pretrain"))
        for fam, lvl, full in _heldout(cfg, lay):
            for count in cfg.demo_counts:
                tuned = finetune_on(base, full.subset(range(count)), fam, cfg.n, seed, cfg.train_config(), cfg.interp_config())
                path = lay.finetuned(fam, lvl, count, seed)
                _mkdirs(path)
                tuned.save(path)
                out.append(path)
    return out


EVAL_HEADER = ["config_hash", "policy", "env_id", "n_demos", "mean", "std", "n_seeds"]
RUN_HEADER = ["config_hash", "policy", "env_id", "n_demos", "seed", "normalized_return"]


def cmd_eval(cfg: ExperimentConfig) -> Path:
    lay = Layout(cfg)
    interp = cfg.interp_config()
    runs: List[EvalRow] = []
    for seed in cfg.train_seeds:
        model = None
        if "regent" in cfg.eval.policies:
            model = SeqModel.load(_require(lay.pretrained(seed), "pretrain"))
        for fam, lvl, full in _heldout(cfg, lay):
            for count in cfg.demo_counts:
                demos = full.subset(range(count))
                for name in cfg.eval.policies:
                    m = model
                    if name == "regent_finetuned":
                        m = SeqModel.load(_require(lay.finetuned(fam, lvl, count, seed), "finetune"))
                    runs.append(
                        evaluate_policy(
                            name, m, demos, fam, lvl, cfg.eval.sticky_p, cfg.eval.episodes, seed, cfg.n, interp,
                            variant=cfg.heldout_variant,
                        )
                    )
    h = cfg.config_hash
    _write_csv(lay.report("eval_runs.csv"), RUN_HEADER, [[h, r.policy, r.env_id, r.n_demos, r.seed, repr(r.normalized)] for r in runs])
    groups: Dict[tuple, list] = {}
    for r in runs:
        groups.setdefault((r.policy, r.env_id, r.n_demos), []).append(r.normalized)
    rows = [[h, p, e, c, repr(float(np.mean(v))), repr(float(np.std(v))), len(v)] for (p, e, c), v in groups.items()]
    path = lay.report("eval.csv")
    _write_csv(path, EVAL_HEADER, rows)
    return path


def cmd_bound(cfg: ExperimentConfig) -> Path:
    lay = Layout(cfg)
    b = cfg.bound
    builder = rnp_builder if b.policy == "rnp" else expert_builder
    reports = bound_experiment(
        b.family, b.demo_counts, builder, cfg.seed, level=b.level, n_episodes=b.episodes,
        lam=cfg.interp.lam, sticky_p=b.sticky_p, check=False,
    )
    path = lay.report("bound.csv")
    _mkdirs(path)
    write_reports(reports, path, {"config_hash": cfg.config_hash})
    return path


SUMMARY_HEADER = ["config_hash", "policy", "n_demos", "mean", "std_over_envs", "n_envs"]


def cmd_report(cfg: ExperimentConfig) -> Path:
    """Average eval.csv over environments per (policy, demo count)."""
    lay = Layout(cfg)
    src = _require(lay.report("eval.csv"), "eval")
    groups: Dict[tuple, list] = {}
    with open(src) as f:
        for row in csv.DictReader(f):
            groups.setdefault((row["policy"], int(row["n_demos"])), []).append(float(row["mean"]))
    rows = [
        [cfg.config_hash, p, c, repr(float(np.mean(v))), repr(float(np.std(v))), len(v)]
        for (p, c), v in sorted(groups.items())
    ]
    path = lay.report("summary.csv")
    _write_csv(path, SUMMARY_HEADER, rows)
    return path


COMMANDS = {
    "gen": cmd_gen,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "bound": cmd_bound,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regent", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML experiment file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    torch.set_num_threads(args.threads)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        result = COMMANDS[args.command](cfg)
    except ConfigInvalid as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the CLI reports and exits nonzero
        print(f"error: {e}", file=sys.stderr)
        return 1
    for path in result if isinstance(result, list) else [result]:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
