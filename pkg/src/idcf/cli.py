"""Command-line entry point.

Subcommands: ``gen``, ``train``, ``eval``, ``identify``, ``sweep``, ``rank``.

Configuration is a flat ``key = value`` file (``#`` starts a comment); list
values are comma separated. ``--set key=value`` overrides the file. Exit
codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .confounder import ConfounderConfig, UserConfounders
from .data import Dataset, fmt_float, load_checkpoint, load_dataset, save_checkpoint, write_dataset, write_tsv
from .errors import ConfigError, DataError, DomainError, IdcfError, IdentificationError, NumericError
from .evaluation import evaluate_model, mcc, welch_t_test
from .feedback import FeedbackConfig, FeedbackModel, predict
from .identify import DiscreteScenario, adjusted_outcome, check_uniqueness, feasible_interval_no_proxy, solve_with_proxy
from .pipeline import CONFOUNDER_KIND, LR_GRID, METHODS, WD_GRID, train_method
from .synthgen import SynthConfig, generate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

RUN_CONFIG_FILE = "run.cfg"
GEN_CONFIG_FILE = "generator.cfg"
GEN_KEYS = ("num_users", "num_items", "alpha", "beta", "gamma", "gen_embed_dim", "data_seed")

# the interval often quoted for the example scenario, which does not satisfy
# its own marginal constraints
QUOTED_EXAMPLE = ((0.5, 0.2, 0.6), (0.33, 0.78))


@dataclass
class RunConfig:
    # synthetic data
    num_users: int = 2000
    num_items: int = 300
    alpha: float = 0.1
    beta: float = 2.0
    gamma: float = 0.0
    gen_embed_dim: int = 4
    data_seed: int = 0
    # runs
    seeds: tuple = (0, 1, 2, 3, 4)
    methods: tuple = METHODS
    # stage 1
    latent_dim: int = 2
    hidden: tuple = (128, 128)
    conf_epochs: int = 300
    conf_patience: int = 10
    conf_val_fraction: float = 0.1
    conf_batch_size: int = 256
    conf_lr_grid: tuple = LR_GRID
    conf_wd_grid: tuple = WD_GRID
    # stage 2
    embed_dim: int = 8
    fb_epochs: int = 100
    fb_patience: int = 10
    fb_batch_size: int = 256
    lr_grid: tuple = LR_GRID
    wd_grid: tuple = WD_GRID
    # evaluation
    ks: tuple = (5,)
    positive_threshold: float = 4.0
    mc_samples: int = 0
    compare: tuple = ()  # "a:b" method pairs; empty means idcf against every other method

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            num_users=self.num_users,
            num_items=self.num_items,
            alpha=self.alpha,
            beta=self.beta,
            gamma=self.gamma,
            embed_dim=self.gen_embed_dim,
            seed=self.data_seed,
        )

    def confounder_config(self) -> ConfounderConfig:
        return ConfounderConfig(
            latent_dim=self.latent_dim,
            hidden=tuple(self.hidden),
            epochs=self.conf_epochs,
            patience=self.conf_patience,
            val_fraction=self.conf_val_fraction,
            batch_size=self.conf_batch_size,
        )

    def feedback_config(self) -> FeedbackConfig:
        return FeedbackConfig(
            embed_dim=self.embed_dim,
            epochs=self.fb_epochs,
            patience=self.fb_patience,
            batch_size=self.fb_batch_size,
            positive_threshold=self.positive_threshold,
            select_k=min(self.ks),
            mc_samples=self.mc_samples,
        )

    def pairs(self) -> list[tuple[str, str]]:
        if self.compare:
            return [tuple(p.split(":")) for p in self.compare]
        if "idcf" not in self.methods:
            return []
        return [("idcf", m) for m in self.methods if m != "idcf"]

    def validate(self) -> "RunConfig":
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if not self.methods:
            raise ConfigError("methods must not be empty")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must not repeat")
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("ks must be a non-empty list of positive integers")
        if not self.lr_grid or not self.wd_grid or not self.conf_lr_grid or not self.conf_wd_grid:
            raise ConfigError("learning-rate and weight-decay grids must not be empty")
        if min(self.lr_grid + self.conf_lr_grid) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.latent_dim < 1 or self.embed_dim < 1:
            raise ConfigError("latent_dim and embed_dim must be positive")
        if not 0.0 <= self.conf_val_fraction < 1.0:
            raise ConfigError("conf_val_fraction must lie in [0, 1)")
        for pair in self.compare:
            parts = pair.split(":")
            if len(parts) != 2 or any(p not in self.methods for p in parts):
                raise ConfigError(f"compare entry {pair!r} must be method_a:method_b over configured methods")
        self.synth_config()
        return self


_LIST_TYPES = {
    "seeds": int,
    "methods": str,
    "hidden": int,
    "conf_lr_grid": float,
    "conf_wd_grid": float,
    "lr_grid": float,
    "wd_grid": float,
    "ks": int,
    "compare": str,
}


def _convert(key: str, text: str, default):
    text = text.strip()
    try:
        if key in _LIST_TYPES:
            elem = _LIST_TYPES[key]
            return tuple(elem(v.strip()) for v in text.split(",") if v.strip())
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        return type(default)(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def build_config(base: RunConfig | None = None, files=(), overrides=()) -> RunConfig:
    cfg = base or RunConfig()
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for path in files:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_config_text(text, str(path)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value
    changes = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _convert(key, value, getattr(cfg, key))
    return replace(cfg, **changes).validate()


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return fmt_float(v)
    return str(v)


def dump_config(cfg: RunConfig, keys=None) -> str:
    items = asdict(cfg)
    keys = keys or list(items)
    return "".join(f"{k} = {_format_value(items[k])}\n" for k in keys)


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# gen / train / eval
# ---------------------------------------------------------------------------


def cmd_gen(cfg: RunConfig, out: Path) -> Path:
    bundle = generate(cfg.synth_config())
    write_dataset(bundle, out)
    _write_text(out / GEN_CONFIG_FILE, dump_config(cfg, GEN_KEYS))
    n_unbiased = len(bundle.valid[0]) + len(bundle.test[0])
    print(f"wrote {out}: {bundle.num_users} users, {bundle.num_items} items, {len(bundle.train[0])} biased and {n_unbiased} unbiased rows")
    return out


def _seed_dir(run: Path, method: str, seed: int) -> Path:
    return run / method / f"seed{seed}"


def cmd_train(cfg: RunConfig, data: Path, run: Path) -> None:
    dataset = load_dataset(data)
    run.mkdir(parents=True, exist_ok=True)
    _write_text(run / RUN_CONFIG_FILE, dump_config(cfg))
    grid_rows = []
    for method in cfg.methods:
        for seed in cfg.seeds:
            trained = train_method(
                method,
                dataset,
                seed,
                cfg.confounder_config(),
                cfg.feedback_config(),
                lrs=cfg.lr_grid,
                wds=cfg.wd_grid,
                conf_lrs=cfg.conf_lr_grid,
                conf_wds=cfg.conf_wd_grid,
            )
            d = _seed_dir(run, method, seed)
            d.mkdir(parents=True, exist_ok=True)
            save_checkpoint(trained.feedback, d / "feedback.ckpt")
            if trained.confounder is not None:
                save_checkpoint(trained.confounder, d / "confounder.ckpt")
                write_tsv(
                    d / "confounder_log.tsv",
                    ["epoch", "elbo", "kl", "recon"],
                    ((e, fmt_float(a), fmt_float(b), fmt_float(c)) for e, a, b, c in trained.confounder_log.rows()),
                )
            for row in trained.grid:
                grid_rows.append((method, seed, row.stage, fmt_float(row.lr), fmt_float(row.weight_decay), fmt_float(row.score), int(row.selected)))
            print(f"trained {method} seed {seed}")
    write_tsv(run / "grid_report.tsv", ["method", "seed", "stage", "lr", "weight_decay", "score", "selected"], grid_rows)


def load_trained(run: Path, method: str, seed: int, dataset: Dataset):
    """Feedback model and (for the iDCF variants) the user posterior table."""
    d = _seed_dir(run, method, seed)
    path = d / "feedback.ckpt"
    if not path.exists():
        raise DataError(f"missing checkpoint {path}")
    model = load_checkpoint(path)
    confounders = None
    if method in CONFOUNDER_KIND:
        cpath = d / "confounder.ckpt"
        if not cpath.exists():
            raise DataError(f"missing checkpoint {cpath}")
        confounders = UserConfounders.from_model(load_checkpoint(cpath), dataset)
    return model, confounders


def _read_gen_config(data: Path) -> dict[str, str]:
    path = data / GEN_CONFIG_FILE
    if not path.exists():
        return {}
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def cmd_eval(cfg: RunConfig, data: Path, run: Path, out: Path, threads=None) -> dict:
    dataset = load_dataset(data)
    out.mkdir(parents=True, exist_ok=True)
    means: dict[tuple[str, str, int], list[float]] = {}
    metric_rows, mcc_rows = [], []
    gamma = _read_gen_config(data).get("gamma", "NA")
    for method in cfg.methods:
        for seed in cfg.seeds:
            model, confounders = load_trained(run, method, seed, dataset)
            report = evaluate_model(model, confounders, dataset, cfg.ks, cfg.positive_threshold, threads)
            for metric in ("ndcg", "recall"):
                for k in cfg.ks:
                    value = report.mean(metric, k)
                    means.setdefault((method, metric, k), []).append(value)
                    metric_rows.append((method, seed, metric, k, fmt_float(value)))
            if confounders is not None and dataset.truth is not None:
                mcc_rows.append((method, gamma, seed, fmt_float(mcc(confounders.mean, dataset.truth).mcc)))
    write_tsv(out / "metrics.tsv", ["method", "seed", "metric", "K", "value"], metric_rows)
    p_rows = []
    if len(cfg.seeds) >= 2:
        for a, b in cfg.pairs():
            for metric in ("ndcg", "recall"):
                for k in cfg.ks:
                    xa, xb = means[(a, metric, k)], means[(b, metric, k)]
                    p = welch_t_test(xa, xb)
                    p_rows.append((a, b, metric, k, fmt_float(float(np.mean(xa))), fmt_float(float(np.mean(xb))), fmt_float(p)))
    write_tsv(out / "pvalues.tsv", ["method_a", "method_b", "metric", "K", "mean_a", "mean_b", "p_value"], p_rows)
    if dataset.truth is not None:
        write_tsv(out / "mcc.tsv", ["method", "gamma", "seed", "mcc"], mcc_rows)
    for (method, metric, k), vals in means.items():
        sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        print(f"{method}\t{metric}@{k}\t{np.mean(vals):.4f} +/- {sd:.4f}")
    return means


# ---------------------------------------------------------------------------
# identify
# ---------------------------------------------------------------------------


def cmd_identify(args) -> None:
    proxy = [args.pz1_aw0, args.pz1_aw1, args.pr1_aw0, args.pr1_aw1]
    if any(v is not None for v in proxy) and any(v is None for v in proxy):
        raise ConfigError("proxy flags --pz1-aw0 --pz1-aw1 --pr1-aw0 --pr1-aw1 go together")
    has_proxy = proxy[0] is not None
    scenario = DiscreteScenario(
        args.pz1,
        args.pz1_a,
        args.pr1_a,
        (args.pz1_aw0, args.pz1_aw1) if has_proxy else None,
        (args.pr1_aw0, args.pr1_aw1) if has_proxy else None,
    )
    interval = feasible_interval_no_proxy(scenario)
    print(f"no-proxy feasible p11 interval: [{interval.p11[0]:.6g}, {interval.p11[1]:.6g}]")
    print(f"no-proxy feasible p(r^a=1) interval: [{interval.outcome[0]:.6g}, {interval.outcome[1]:.6g}]")
    inputs, quoted = QUOTED_EXAMPLE
    if np.allclose((args.pz1, args.pz1_a, args.pr1_a), inputs, atol=1e-12):
        print(
            f"NOTE: the commonly quoted interval [{quoted[0]}, {quoted[1]}] for this scenario is not reproduced; "
            "the marginal constraints give the interval above"
        )
    if not has_proxy:
        return
    check = check_uniqueness(scenario)
    print(f"uniqueness margin |p(z=1|a,w=1) - p(z=1|a,w=0)|: {check.margin:.6g}")
    joint = solve_with_proxy(scenario)
    print(f"unique joint p(z,r|a): p00={joint.p00:.10g} p01={joint.p01:.10g} p10={joint.p10:.10g} p11={joint.p11:.10g}")
    print(f"adjusted p(r^a=1): {adjusted_outcome(scenario):.10g}")


# ---------------------------------------------------------------------------
# sweep / rank
# ---------------------------------------------------------------------------

SWEEP_KEYS = ("alpha", "beta", "gamma")


def _parse_sweep(spec: str) -> tuple[str, list[str]]:
    if "=" not in spec:
        raise ConfigError("--sweep expects key=v1,v2,...")
    key, values = spec.split("=", 1)
    key = key.strip()
    if key not in SWEEP_KEYS:
        raise ConfigError(f"sweep key must be one of {', '.join(SWEEP_KEYS)}")
    vals = [v.strip() for v in values.split(",") if v.strip()]
    if not vals:
        raise ConfigError("--sweep needs at least one value")
    for v in vals:
        _convert(key, v, 0.0)
    return key, vals


def _read_tsv_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    lines = path.read_text(encoding="utf-8").splitlines()
    return lines[0].split("\t"), [line.split("\t") for line in lines[1:]]


def cmd_sweep(cfg: RunConfig, spec: str, out: Path, threads=None) -> None:
    key, values = _parse_sweep(spec)
    out.mkdir(parents=True, exist_ok=True)
    merged: dict[str, tuple[list[str], list]] = {}
    for value in values:
        point = build_config(cfg, overrides=[f"{key}={value}"])
        base = out / f"{key}={value}"
        cmd_gen(point, base / "data")
        cmd_train(point, base / "data", base / "run")
        cmd_eval(point, base / "data", base / "run", base / "run", threads)
        for name in ("metrics.tsv", "pvalues.tsv", "mcc.tsv"):
            path = base / "run" / name
            if not path.exists():
                continue
            header, rows = _read_tsv_rows(path)
            if key in header:
                # mcc.tsv already carries gamma
                merged.setdefault(name, (header, []))[1].extend(rows)
            else:
                merged.setdefault(name, ([key] + header, []))[1].extend([value] + r for r in rows)
    for name, (header, rows) in merged.items():
        write_tsv(out / name, header, rows)


def cmd_rank(cfg: RunConfig, data: Path, run: Path, method: str, seed: int, users, k, out) -> None:
    dataset = load_dataset(data)
    model, confounders = load_trained(run, method, seed, dataset)
    umap, imap = dataset.log.user_map, dataset.log.item_map
    if users:
        unknown = [u for u in users if u not in umap.index]
        if unknown:
            raise DataError(f"unknown users: {', '.join(unknown)}")
        dense = [umap.index[u] for u in users]
    else:
        dense = list(range(dataset.num_users))
    items = np.arange(dataset.num_items)
    kw = {"mc_samples": cfg.mc_samples} if isinstance(model, FeedbackModel) else {}
    rows = []
    for u in dense:
        scores = predict(model, confounders, np.full(items.size, u), items, **kw)
        order = np.lexsort((items, -scores))
        if k:
            order = order[:k]
        for rank, j in enumerate(order, 1):
            rows.append((umap.raw[u], imap.raw[j], fmt_float(float(scores[j])), rank))
    header = ["user_id", "item_id", "score", "rank"]
    if out:
        write_tsv(out, header, rows)
    else:
        sys.stdout.write("\t".join(header) + "\n")
        for r in rows:
            sys.stdout.write("\t".join(map(str, r)) + "\n")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", action="append", default=[], help="flat key = value config file (repeatable)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idcf", description="Deconfounded recommendation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("train", help="train every configured method and seed")
    _add_config_args(p)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="run directory")

    p = sub.add_parser("eval", help="evaluate trained checkpoints")
    _add_config_args(p)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--out", type=Path, help="output directory (default: the run directory)")
    p.add_argument("--threads", type=int, help="evaluation threads (default: $IDCF_THREADS or 1)")

    p = sub.add_parser("identify", help="binary identification demo")
    p.add_argument("--pz1", type=float, required=True, help="p(z=1)")
    p.add_argument("--pz1-a", type=float, required=True, help="p(z=1|a)")
    p.add_argument("--pr1-a", type=float, required=True, help="p(r=1|a)")
    p.add_argument("--pz1-aw0", type=float, help="p(z=1|a,w=0)")
    p.add_argument("--pz1-aw1", type=float, help="p(z=1|a,w=1)")
    p.add_argument("--pr1-aw0", type=float, help="p(r=1|a,w=0)")
    p.add_argument("--pr1-aw1", type=float, help="p(r=1|a,w=1)")

    p = sub.add_parser("sweep", help="gen + train + eval over one generator parameter")
    _add_config_args(p)
    p.add_argument("--sweep", required=True, help="alpha=..., beta=... or gamma=... (comma-separated values)")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("rank", help="rank all items for users with a trained model")
    _add_config_args(p)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--users", help="comma-separated raw user ids (default: all)")
    p.add_argument("--k", type=int, default=0, help="keep the top k items per user (0 = all)")
    p.add_argument("--out", type=Path, help="output TSV (default: stdout)")
    return parser


def _run_config_for(args) -> RunConfig:
    base = None
    run = getattr(args, "run", None)
    if run is not None and (run / RUN_CONFIG_FILE).exists():
        base = build_config(files=[run / RUN_CONFIG_FILE])
    return build_config(base, args.config, args.set)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "identify":
        cmd_identify(args)
        return EXIT_OK
    cfg = _run_config_for(args)
    if args.command == "gen":
        cmd_gen(cfg, args.out)
    elif args.command == "train":
        cmd_train(cfg, args.data, args.out)
    elif args.command == "eval":
        cmd_eval(cfg, args.data, args.run, args.out or args.run, args.threads)
    elif args.command == "sweep":
        cmd_sweep(cfg, args.sweep, args.out, args.threads)
    elif args.command == "rank":
        users = [u.strip() for u in args.users.split(",")] if args.users else None
        cmd_rank(cfg, args.data, args.run, args.method, args.seed, users, args.k, args.out)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IdentificationError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DATA
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IdcfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
