"""Config files, experiment launching and result files.

Configs are INI files with sections ``data``, ``partition``, ``training``,
``network`` and ``output``. Command-line flags override file values::

    python -m fedec run --config exp.ini --rounds 50 --strategy fedec --alpha 1
    python -m fedec compare --config exp.ini --strategies fedec,fedec_wo,fedavg --seeds 0,1,2

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .datagen import LabeledDataset, PartitionSpec, load_csv, shard_partition, synth_mixture
from .nncore import NetworkSpec, save_params
from .orchestrator import RoundConfig, run_experiment, write_metrics_csv
from .strategies import CONSTRAINED, STRATEGIES, StrategyKind


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> Tuple[int, ...]:
    text = text.strip()
    return tuple(int(p) for p in text.split(",")) if text else ()


def _optional_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none") else float(text)


# (section, key) -> (parser, default); default None marks a required key
SCHEMA: Dict[Tuple[str, str], tuple] = {
    ("data", "source"): (str, "synthetic"),
    ("data", "csv_path"): (str, ""),
    ("data", "csv_max_value"): (_optional_float, "none"),
    ("data", "classes"): (int, "5"),
    ("data", "dim"): (int, "16"),
    ("data", "per_class"): (int, "400"),
    ("data", "separation"): (float, "2.0"),
    ("partition", "clients"): (int, None),
    ("partition", "classes_per_client"): (int, "2"),
    ("partition", "train_fraction"): (float, "0.8"),
    ("training", "sample_rate"): (float, "0.1"),
    ("training", "rounds"): (int, None),
    ("training", "inner_epochs"): (int, "2"),
    ("training", "inner_lr"): (float, "0.05"),
    ("training", "outer_lr"): (float, "1.0"),
    ("training", "alpha"): (float, "0"),
    ("training", "batch_size"): (int, "20"),
    ("training", "strategy"): (str, None),
    ("training", "seed"): (int, "0"),
    ("training", "support_fraction"): (float, "0.5"),
    ("training", "workers"): (int, "1"),
    ("network", "hidden"): (_ints, "32"),
    ("output", "dir"): (str, None),
    ("output", "checkpoint_interval"): (int, "0"),
    ("output", "evaluate_all"): (_bool, "false"),
    ("output", "dump_embeddings"): (_bool, "false"),
    ("output", "embedding_layer"): (int, "0"),
    ("output", "timing"): (_bool, "false"),
}

# flag name -> (section, key)
FLAGS = {
    "clients": ("partition", "clients"),
    "classes-per-client": ("partition", "classes_per_client"),
    "sample-rate": ("training", "sample_rate"),
    "rounds": ("training", "rounds"),
    "inner-epochs": ("training", "inner_epochs"),
    "inner-lr": ("training", "inner_lr"),
    "outer-lr": ("training", "outer_lr"),
    "alpha": ("training", "alpha"),
    "strategy": ("training", "strategy"),
    "batch-size": ("training", "batch_size"),
    "seed": ("training", "seed"),
    "workers": ("training", "workers"),
    "output-dir": ("output", "dir"),
}


@dataclass(frozen=True)
class DataSource:
    source: str = "synthetic"
    csv_path: str = ""
    csv_max_value: Optional[float] = None
    classes: int = 5
    dim: int = 16
    per_class: int = 400
    separation: float = 2.0

    def load(self, seed: int) -> LabeledDataset:
        if self.source == "csv":
            return load_csv(self.csv_path, self.classes, self.csv_max_value)
        return synth_mixture(self.classes, self.dim, self.per_class, self.separation, seed)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSource
    partition: PartitionSpec
    round: RoundConfig
    hidden: Tuple[int, ...]
    output_dir: Path
    checkpoint_interval: int = 0
    dump_embeddings: bool = False
    embedding_layer: int = 0
    timing: bool = False
    workers: int = 1
    raw: Dict[str, Dict[str, str]] = field(default=None, compare=False, repr=False)

    @property
    def evaluate_all(self) -> bool:
        return self.round.evaluate_all

    def network(self, n_inputs: int) -> NetworkSpec:
        return NetworkSpec((n_inputs, *self.hidden, self.data.classes))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return _rebuild(self, {("training", "seed"): str(seed)})

    def with_strategy(self, name: str, alpha: float) -> "ExperimentConfig":
        return _rebuild(self, {("training", "strategy"): name, ("training", "alpha"): repr(alpha)})

    def to_ini(self) -> str:
        lines = []
        for section in ("data", "partition", "training", "network", "output"):
            lines.append(f"[{section}]")
            for (sec, key) in SCHEMA:
                if sec == section:
                    lines.append(f"{key} = {self.raw[section][key]}")
            lines.append("")
        return "\n".join(lines)


def _read_file(path: Union[str, Path]) -> Dict[Tuple[str, str], str]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from None
    values = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if (section, key) not in SCHEMA:
                raise ConfigError(f"{section}.{key}", "unknown key")
            values[(section, key)] = value
    return values


def _build(values: Dict[Tuple[str, str], str]) -> ExperimentConfig:
    merged, parsed = {}, {}
    for (section, key), (conv, default) in SCHEMA.items():
        text = values.get((section, key), default)
        name = f"{section}.{key}"
        if text is None:
            raise ConfigError(name, "required but not set")
        text = str(text).strip()
        try:
            parsed[name] = conv(text)
        except ValueError as exc:
            raise ConfigError(name, f"bad value {text!r} ({exc})") from None
        merged.setdefault(section, {})[key] = text
    p = parsed

    if p["data.source"] not in ("synthetic", "csv"):
        raise ConfigError("data.source", "must be 'synthetic' or 'csv'")
    if p["data.source"] == "csv" and not p["data.csv_path"]:
        raise ConfigError("data.csv_path", "required when data.source = csv")
    if p["training.strategy"] not in STRATEGIES:
        raise ConfigError("training.strategy",
                          f"unknown strategy {p['training.strategy']!r}; choose from {', '.join(STRATEGIES)}")
    if p["training.alpha"] != 0 and p["training.strategy"] not in CONSTRAINED:
        raise ConfigError("training.alpha",
                          f"alpha={p['training.alpha']:g} conflicts with strategy "
                          f"{p['training.strategy']!r}, which has no constraint")
    if any(h <= 0 for h in p["network.hidden"]):
        raise ConfigError("network.hidden", "hidden widths must be positive")
    if p["training.workers"] < 1:
        raise ConfigError("training.workers", "must be >= 1")
    if p["output.checkpoint_interval"] < 0:
        raise ConfigError("output.checkpoint_interval", "must be >= 0")
    if p["output.dump_embeddings"] and not 0 <= p["output.embedding_layer"] < len(p["network.hidden"]):
        raise ConfigError("output.embedding_layer", "must index a hidden layer")

    def guarded(key, build):
        try:
            return build()
        except ValueError as exc:
            raise ConfigError(key, str(exc)) from None

    data = guarded("data", lambda: DataSource(
        p["data.source"], p["data.csv_path"], p["data.csv_max_value"], p["data.classes"],
        p["data.dim"], p["data.per_class"], p["data.separation"]))
    partition = PartitionSpec(p["partition.clients"], p["partition.classes_per_client"],
                              p["training.seed"], p["partition.train_fraction"])
    guarded("partition", lambda: partition.validate(data.classes))
    kind = guarded("training.alpha", lambda: StrategyKind(p["training.strategy"], p["training.alpha"]))
    round_config = guarded("training", lambda: RoundConfig(
        clients=p["partition.clients"], sample_rate=p["training.sample_rate"],
        rounds=p["training.rounds"], inner_epochs=p["training.inner_epochs"],
        inner_lr=p["training.inner_lr"], outer_lr=p["training.outer_lr"], strategy=kind,
        batch_size=p["training.batch_size"], seed=p["training.seed"],
        support_fraction=p["training.support_fraction"],
        evaluate_all=p["output.evaluate_all"]))
    return ExperimentConfig(
        data=data, partition=partition, round=round_config, hidden=p["network.hidden"],
        output_dir=Path(p["output.dir"]), checkpoint_interval=p["output.checkpoint_interval"],
        dump_embeddings=p["output.dump_embeddings"], embedding_layer=p["output.embedding_layer"],
        timing=p["output.timing"], workers=p["training.workers"], raw=merged)


def _rebuild(config: ExperimentConfig, overrides) -> ExperimentConfig:
    values = {(s, k): v for s, keys in config.raw.items() for k, v in keys.items()}
    values.update(overrides)
    return _build(values)


def parse_config(path: Optional[Union[str, Path]] = None,
                 overrides: Optional[Dict[str, object]] = None,
                 echo: bool = True) -> ExperimentConfig:
    """Resolve a config from an optional file plus ``section.key`` or flag-name overrides.

    The resolved config is written to ``<output dir>/config.ini`` unless ``echo`` is off.
    """
    values = _read_file(path) if path is not None else {}
    for name, value in (overrides or {}).items():
        if value is None:
            continue
        if name in FLAGS:
            target = FLAGS[name]
        elif "." in name and tuple(name.split(".", 1)) in SCHEMA:
            target = tuple(name.split(".", 1))
        else:
            raise ConfigError(name, "unknown key")
        if isinstance(value, (list, tuple)):
            value = ",".join(map(str, value))
        values[target] = str(value)
    config = _build(values)
    if echo:
        _prepare_dir(config.output_dir)
        (config.output_dir / "config.ini").write_text(config.to_ini())
    return config


def _prepare_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError("output.dir", f"cannot create {path}: {exc}") from None


@dataclass
class RunOutcome:
    strategy: str
    alpha: float
    seed: int
    final10_acc: float
    personalized_acc: float
    client_accuracies: List[float]
    partition_hash: str


def _execute(config: ExperimentConfig, out_dir: Path, write_files: bool = True) -> RunOutcome:
    dataset = config.data.load(config.round.seed)
    shards, summary = shard_partition(dataset, config.partition, return_summary=True)
    spec = config.network(dataset.dim)
    ckpt_dir = None
    if write_files and config.checkpoint_interval > 0:
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    embeddings = None
    if write_files and config.dump_embeddings:
        embeddings = out_dir / "embeddings.csv"
        embeddings.unlink(missing_ok=True)
    result = run_experiment(config.round, spec, shards, workers=config.workers,
                            checkpoint_dir=ckpt_dir,
                            checkpoint_interval=config.checkpoint_interval,
                            embeddings=embeddings, embedding_layer=config.embedding_layer)
    kind = config.round.strategy
    outcome = RunOutcome(kind.name, kind.alpha, config.round.seed,
                         result.final_window_accuracy(10), result.final.mean_acc,
                         result.final.accuracies, summary.digest)
    if write_files:
        write_metrics_csv(result.records + [result.final], out_dir / "metrics.csv",
                          timing=config.timing)
        save_params(result.phi, out_dir / "phi_final.txt")
        (out_dir / "summary.json").write_text(json.dumps({
            "config": config.raw,
            "per_strategy": {_label(kind.name, kind.alpha): {
                "mean_final10_acc": outcome.final10_acc,
                "std": 0.0,
                "final_personalized_acc": outcome.personalized_acc,
            }},
            "final_client_accuracies": outcome.client_accuracies,
            "partition": json.loads(summary.to_json()),
        }, indent=2, sort_keys=True))
    return outcome


def _label(name: str, alpha: float) -> str:
    return f"{name}:{alpha:g}" if name in CONSTRAINED else name


def run(config: ExperimentConfig) -> int:
    """Build data, partition, train, and write ``metrics.csv``, ``summary.json``, ``phi_final.txt``."""
    _prepare_dir(config.output_dir)
    _execute(config, config.output_dir)
    return 0


def parse_strategy(entry: str, default_alpha: float) -> Tuple[str, float]:
    """``"fedec"`` or ``"fedec:2"``; unconstrained strategies always get alpha 0."""
    name, _, alpha = entry.strip().partition(":")
    if name not in STRATEGIES:
        raise ConfigError("strategies", f"unknown strategy {name!r}")
    if name not in CONSTRAINED:
        if alpha and float(alpha) != 0:
            raise ConfigError("strategies", f"alpha given for strategy {name!r}")
        return name, 0.0
    return name, float(alpha) if alpha else default_alpha


COMPARE_COLUMNS = ("strategy", "alpha", "n_seeds", "mean_final10_acc", "std_final10_acc",
                   "mean_final_personalized_acc", "std_final_personalized_acc")


def compare(config: ExperimentConfig, strategies: Sequence[str],
            seeds: Sequence[int]) -> List[dict]:
    """Run every (strategy, seed) pair; write ``compare.csv`` and ``compare.json``.

    Runs for the same seed share the dataset and partition, which the
    ``partition_hashes`` entry of the JSON output makes checkable.
    """
    if not strategies:
        raise ConfigError("strategies", "need at least one strategy")
    if not seeds:
        raise ConfigError("seeds", "need at least one seed")
    _prepare_dir(config.output_dir)
    entries = [parse_strategy(s, config.round.strategy.alpha) for s in strategies]
    rows, hashes = [], {}
    for name, alpha in entries:
        outcomes = []
        for seed in seeds:
            cfg = config.with_strategy(name, alpha).with_seed(seed)
            outcome = _execute(cfg, config.output_dir, write_files=False)
            hashes.setdefault(_label(name, alpha), {})[str(seed)] = outcome.partition_hash
            outcomes.append(outcome)
        f10 = np.array([o.final10_acc for o in outcomes])
        pers = np.array([o.personalized_acc for o in outcomes])
        rows.append({
            "strategy": name, "alpha": alpha, "n_seeds": len(seeds),
            "mean_final10_acc": float(f10.mean()), "std_final10_acc": float(f10.std()),
            "mean_final_personalized_acc": float(pers.mean()),
            "std_final_personalized_acc": float(pers.std()),
            "per_seed_personalized_acc": pers.tolist(),
        })

    with open(config.output_dir / "compare.csv", "w") as fh:
        fh.write(",".join(COMPARE_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in COMPARE_COLUMNS) + "\n")
    (config.output_dir / "compare.json").write_text(json.dumps({
        "config": config.raw,
        "seeds": list(seeds),
        "per_strategy": {_label(r["strategy"], r["alpha"]): {
            "mean_final10_acc": r["mean_final10_acc"],
            "std": r["std_final10_acc"],
            "final_personalized_acc": r["mean_final_personalized_acc"],
            "std_final_personalized_acc": r["std_final_personalized_acc"],
            "per_seed_personalized_acc": r["per_seed_personalized_acc"],
        } for r in rows},
        "partition_hashes": hashes,
    }, indent=2, sort_keys=True))
    return rows


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="INI config file")
    for flag, (section, key) in FLAGS.items():
        parser.add_argument(f"--{flag}", dest=flag, metavar=key.upper())
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config key; repeatable")
    parser.add_argument("--evaluate-all", action="store_const", const="true", default=None)
    parser.add_argument("--dump-embeddings", action="store_const", const="true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("run", help="run one experiment"))
    cmp_parser = sub.add_parser("compare", help="run a strategy x seed grid")
    _add_common(cmp_parser)
    cmp_parser.add_argument("--strategies", required=True,
                            help="comma list, e.g. fedec:1,fedec_wo,fedavg")
    cmp_parser.add_argument("--seeds", required=True, help="comma list of integers")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    out: Dict[str, object] = {flag: getattr(args, flag) for flag in FLAGS}
    if args.evaluate_all:
        out["output.evaluate_all"] = "true"
    if args.dump_embeddings:
        out["output.dump_embeddings"] = "true"
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "expected SECTION.KEY=VALUE")
        out[key.strip()] = value.strip()
    return out


def _report(kind: str, exc: BaseException, key: Optional[str] = None) -> None:
    report = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    if key is not None:
        report["key"] = key
    print(json.dumps(report), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = parse_config(args.config, _overrides(args))
        if args.command == "compare":
            try:
                seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            except ValueError:
                raise ConfigError("seeds", f"not a list of integers: {args.seeds!r}") from None
            strategies = [s for s in args.strategies.split(",") if s.strip()]
            compare(config, strategies, seeds)
            return 0
        return run(config)
    except ConfigError as exc:
        _report("config", exc, exc.key)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        _report("runtime", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
