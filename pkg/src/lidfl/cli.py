"""Batch experiment runner.

Experiments are described in a plain key=value text file (``#`` starts a
comment; lists use ``[a, b, c]``). The sweepable keys ``method``, ``gamma``,
``q``, ``attack.kind`` and ``seed`` may hold lists, which expand into the
full Cartesian grid of runs. Every key can be overridden by an environment
variable ``LIDFL_<KEY>`` with dots replaced by underscores
(e.g. ``LIDFL_ATTACK_KIND=sf``).

Outputs per run: ``rounds_<runid>.csv`` (the versioned per-round schema) and
``run_<runid>.json`` (resolved config + final metrics). A grid-level
``summary.json`` aggregates them. Completed run ids are skipped on rerun.

Subcommands: ``run``, ``report``, ``check-theory``, ``plots``.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .aggregators import DEFAULT_NORM_TAU, AggregatorKind
from .analysis import (
    EnvelopeParams,
    FailureTrialConfig,
    check_envelope,
    contraction_factor,
    estimate_f_star,
    hoeffding_failure_bound,
    simulate_failure_rate,
)
from .attacks import ATTACK_KINDS, AttackKind
from .core import derive_stream
from .data import DatasetConfig
from .engine import (
    CSV_SCHEMA,
    RunConfig,
    initial_model,
    records_to_csv,
    run_baseline,
    run_lidfl,
    run_lidfl_agg,
    setup_clients,
)
from .models import ModelSpec, estimate_loss_profile, loss
from .trainer import LocalTrainConfig
from .voting import ValidationOracle

METHODS = ("lidfl", "lidfl-rknn", "lidfl-meb", "fedavg", "cwm", "gm", "norm")


@dataclass(frozen=True)
class _Key:
    type: type
    default: Any
    sweep: bool = False
    choices: tuple | None = None


KNOWN_KEYS: dict[str, _Key] = {
    "method": _Key(str, "lidfl", sweep=True, choices=METHODS),
    "m": _Key(int, 35),
    "gamma": _Key(float, 0.4, sweep=True),
    "q": _Key(int, None, sweep=True),  # None -> floor(1/gamma)
    "T": _Key(int, 1500),
    "seed": _Key(int, 0, sweep=True),
    "repeats": _Key(int, 1),
    "eval.every": _Key(int, 10),
    "init.scale": _Key(float, 0.0),
    "model.kind": _Key(str, "softmax-regression", choices=("softmax-regression", "mlp")),
    "model.p": _Key(int, 16),
    "model.classes": _Key(int, 10),
    "model.hidden": _Key(int, 16),
    "model.l2": _Key(float, 0.01),
    "data.generator": _Key(str, "gaussian-mixture", choices=("gaussian-mixture", "file")),
    "data.n": _Key(int, 2100),
    "data.separation": _Key(float, 6.0),
    "data.sigma": _Key(float, 1.0),
    "data.path": _Key(str, ""),
    "split.ratios": _Key(list, [4.0, 1.0, 1.0]),
    "split.balance": _Key(str, "balanced", choices=("balanced", "imbalanced")),
    "local.tau": _Key(int, 25),
    "local.batch": _Key(int, 32),
    "local.lr": _Key(float, 0.01),
    "local.momentum": _Key(float, 0.9),
    "local.persist": _Key(bool, False),
    "attack.kind": _Key(str, "none", sweep=True, choices=ATTACK_KINDS),
    "attack.z": _Key(float, 1.5),
    "attack.omn_scale": _Key(float, 1.0),
    "vote.byz_strategy": _Key(str, "worst", choices=("worst", "random")),
    "oracle.mode": _Key(str, "local-split", choices=("local-split", "synthetic-noisy")),
    "oracle.eta": _Key(float, 0.0),
    "oracle.p": _Key(float, 1.0),
    "oracle.H": _Key(float, 10.0),
    "agg.gm_iters": _Key(int, 1),
    "agg.norm_tau": _Key(float, DEFAULT_NORM_TAU),
    "agg.k": _Key(int, None),  # None -> honest count
}


class ConfigError(ValueError):
    pass


def _parse_scalar(text: str):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip("'\"")


def _parse_value(text: str):
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ConfigError("unterminated list")
        inner = text[1:-1].strip()
        return [_parse_scalar(tok) for tok in inner.split(",")] if inner else []
    return _parse_scalar(text)


def _coerce(key: str, value):
    ks = KNOWN_KEYS[key]
    def one(v):
        if ks.type is bool:
            if not isinstance(v, bool):
                raise ConfigError(f"{key}: expected true/false, got {v!r}")
            return v
        if ks.type is float and isinstance(v, (int, float)) and not isinstance(v, bool):
            return float(v)
        if ks.type is int:
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{key}: expected integer, got {v!r}")
            return v
        if ks.type is str:
            if not isinstance(v, str):
                raise ConfigError(f"{key}: expected string, got {v!r}")
            if ks.choices and v not in ks.choices:
                raise ConfigError(f"{key}: {v!r} not in {ks.choices}")
            return v
        return v
    if ks.type is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list")
        return [float(v) for v in value]
    if isinstance(value, list):
        if not ks.sweep:
            raise ConfigError(f"{key}: lists are only allowed on sweep axes")
        if not value:
            raise ConfigError(f"{key}: empty sweep list")
        return [one(v) for v in value]
    return one(value)


def parse_config_text(text: str) -> dict:
    """Parse the key=value format; unknown keys and bad values are rejected."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, _parse_value(val))
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    return out


def apply_env_overrides(cfg_map: dict, environ=os.environ) -> dict:
    out = dict(cfg_map)
    for key in KNOWN_KEYS:
        env_name = "LIDFL_" + key.replace(".", "_").upper()
        if env_name in environ:
            out[key] = _coerce(key, _parse_value(environ[env_name]))
    return out


def emit_config(cfg_map: dict) -> str:
    """Serialize a config map back to the text format (round-trips)."""
    lines = []
    for key in sorted(cfg_map):
        v = cfg_map[key]
        if isinstance(v, list):
            lines.append(f"{key} = [{', '.join(str(x) for x in v)}]")
        elif isinstance(v, bool):
            lines.append(f"{key} = {'true' if v else 'false'}")
        else:
            lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def expand_grid(cfg_map: dict) -> list[dict]:
    """Expand sweep lists (and repeats) into fully-resolved run maps."""
    full = {k: ks.default for k, ks in KNOWN_KEYS.items()}
    full.update(cfg_map)
    seeds = full["seed"]
    if full["repeats"] > 1:
        if isinstance(seeds, list):
            raise ConfigError("use either a seed list or repeats, not both")
        seeds = [seeds + i for i in range(full["repeats"])]
    full["seed"] = seeds
    cells = [full]
    for key in ("method", "gamma", "q", "attack.kind", "seed"):
        nxt = []
        for cell in cells:
            vals = cell[key]
            for v in vals if isinstance(vals, list) else [vals]:
                c = dict(cell)
                c[key] = v
                nxt.append(c)
        cells = nxt
    for cell in cells:
        if cell["q"] is None:
            cell["q"] = math.floor(1.0 / cell["gamma"])
        cell["repeats"] = 1
    return cells


def to_run_config(cell: dict) -> RunConfig:
    """Build the engine config for one fully-resolved grid cell."""
    method = cell["method"]
    spec = ModelSpec(
        cell["model.kind"], cell["model.p"], cell["model.classes"],
        hidden=cell["model.hidden"], l2=cell["model.l2"],
    )
    dataset = DatasetConfig(
        generator=cell["data.generator"], n=cell["data.n"], input_dim=cell["model.p"],
        n_classes=cell["model.classes"], separation=cell["data.separation"],
        noise_sigma=cell["data.sigma"], path=cell["data.path"] or None,
    )
    local = LocalTrainConfig(cell["local.tau"], cell["local.batch"], cell["local.lr"], cell["local.momentum"])
    oracle = ValidationOracle(cell["oracle.mode"], cell["oracle.eta"], cell["oracle.p"], cell["oracle.H"])
    attack = AttackKind(cell["attack.kind"], cell["attack.z"], cell["attack.omn_scale"])
    aggregator = None
    update_source = "single-client"
    if method in ("lidfl-rknn", "lidfl-meb"):
        aggregator = AggregatorKind(method.split("-")[1], cell["agg.gm_iters"], cell["agg.norm_tau"], cell["agg.k"])
        update_source = "aggregated"
    elif method != "lidfl":
        aggregator = AggregatorKind(method, cell["agg.gm_iters"], cell["agg.norm_tau"], None)
    return RunConfig(
        model=spec, dataset=dataset, local=local,
        n_clients=cell["m"], honest_fraction=cell["gamma"], list_size=cell["q"],
        rounds=cell["T"], attack=attack, vote_attack=cell["vote.byz_strategy"],
        oracle=oracle, aggregator=aggregator, update_source=update_source,
        split_ratios=tuple(cell["split.ratios"]), balance=cell["split.balance"],
        master_seed=cell["seed"], eval_every=cell["eval.every"],
        momentum_persist=cell["local.persist"], init_scale=cell["init.scale"],
    )


def run_id(cell: dict) -> str:
    blob = json.dumps(cell, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def parse_config(path: str | Path, environ=os.environ) -> list[dict]:
    """Read, override, expand and validate a config file into grid cells."""
    cfg_map = apply_env_overrides(parse_config_text(Path(path).read_text()), environ)
    cells = expand_grid(cfg_map)
    for cell in cells:
        to_run_config(cell)  # validates every cell eagerly
    return cells


def execute_run(cell: dict, out_dir: str) -> dict:
    """Run one grid cell and write its rounds CSV and sidecar JSON."""
    out = Path(out_dir)
    rid = run_id(cell)
    cfg = to_run_config(cell)
    meta = {
        "run_id": rid,
        "config": cell,
        "method": cell["method"],
        "attack": cell["attack.kind"],
        "q": cell["q"],
        "gamma": cell["gamma"],
        "seed": cell["seed"],
        "schema": CSV_SCHEMA,
    }
    try:
        if cfg.update_source == "aggregated":
            result = run_lidfl_agg(cfg)
        elif cfg.aggregator is not None:
            result = run_baseline(cfg)
        else:
            result = run_lidfl(cfg)
        last = result.records[-1] if result.records else None
        meta.update(
            status="ok",
            regime_warning=result.regime_warning,
            final_acc=last.best_test_acc if last else None,
            final_loss=last.best_global_loss if last else None,
            rounds=len(result.records),
        )
        (out / f"rounds_{rid}.csv").write_text(records_to_csv(result.records))
    except Exception as exc:  # keep the rest of the grid running
        meta.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    (out / f"run_{rid}.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return meta


def run_experiments(cells: list[dict], parallelism: int, out_dir: str | Path) -> int:
    """Execute a grid, skipping already-completed run ids. Returns exit status."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    todo = []
    for cell in cells:
        rid = run_id(cell)
        if (out / f"run_{rid}.json").exists() and (out / f"rounds_{rid}.csv").exists():
            continue
        todo.append(cell)
    print(f"{len(cells)} runs in grid, {len(cells) - len(todo)} already complete, {len(todo)} to run")
    if todo:
        if parallelism > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=parallelism) as pool:
                futures = [pool.submit(execute_run, cell, str(out)) for cell in todo]
                for fut in concurrent.futures.as_completed(futures):
                    meta = fut.result()
                    print(f"  [{meta['status']}] {meta['run_id']} {meta['method']} attack={meta['attack']} seed={meta['seed']}")
        else:
            for cell in todo:
                meta = execute_run(cell, str(out))
                print(f"  [{meta['status']}] {meta['run_id']} {meta['method']} attack={meta['attack']} seed={meta['seed']}")
    metas = [json.loads(p.read_text()) for p in sorted(out.glob("run_*.json"))]
    summary = {"schema": "lidfl-summary-v1", "runs": metas}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    failed = [m for m in metas if m.get("status") != "ok"]
    if failed:
        print(f"{len(failed)} runs failed")
        return 1
    return 0


def _load_metas(out_dir: Path) -> list[dict]:
    metas = [json.loads(p.read_text()) for p in sorted(out_dir.glob("run_*.json"))]
    if not metas:
        raise SystemExit(f"no run_*.json files in {out_dir}")
    return metas


def cmd_report(out_dir: str) -> int:
    from .analysis import summarize_sweep

    metas = [m for m in _load_metas(Path(out_dir)) if m.get("status") == "ok"]
    table = summarize_sweep(
        {
            "method": m["method"], "attack": m["attack"], "q": m["q"],
            "gamma": m["gamma"], "final_acc": m["final_acc"],
        }
        for m in metas
    )
    lines = ["method,attack,q,gamma,n,mean_acc,std_acc"]
    for c in table["cells"]:
        lines.append(
            f"{c['method']},{c['attack']},{c['q']},{c['gamma']},{c['n']},"
            f"{c['mean_acc']:.4f},{c['std_acc']:.4f}"
        )
    csv_text = "\n".join(lines) + "\n"
    (Path(out_dir) / "summary_table.csv").write_text(csv_text)
    print(csv_text, end="")
    print("\nworst across attacks:")
    for wrow in table["worst"]:
        print(
            f"  {wrow['method']} (q={wrow['q']}, gamma={wrow['gamma']}): "
            f"{wrow['worst_mean_acc']:.4f} under {wrow['worst_attack']}"
        )
    return 0


def export_plots(out_dir: str | Path, svg: bool = False) -> list[Path]:
    """Per-attack figure CSVs (round, method, attack, mean_acc, std_acc)."""
    out = Path(out_dir)
    metas = [m for m in _load_metas(out) if m.get("status") == "ok"]
    series: dict[tuple, list[np.ndarray]] = {}
    for m in metas:
        csv_path = out / f"rounds_{m['run_id']}.csv"
        if not csv_path.exists():
            continue
        accs = []
        with csv_path.open() as fh:
            for line in fh:
                if line.startswith("#") or line.startswith("round"):
                    continue
                accs.append(float(line.rstrip("\n").split(",")[6]))
        series.setdefault((m["attack"], m["method"]), []).append(np.asarray(accs))
    written = []
    attacks = sorted({a for a, _ in series})
    for attack in attacks:
        lines = ["round,method,attack,mean_acc,std_acc"]
        methods = sorted(meth for a, meth in series if a == attack)
        curves = {}
        for meth in methods:
            runs = series[(attack, meth)]
            n = min(len(r) for r in runs)
            stack = np.stack([r[:n] for r in runs])
            mean = stack.mean(axis=0)
            std = stack.std(axis=0, ddof=1) if len(runs) > 1 else np.zeros(n)
            curves[meth] = (mean, std)
            for t in range(n):
                lines.append(f"{t},{meth},{attack},{mean[t]:.6f},{std[t]:.6f}")
        path = out / f"figure_{attack}.csv"
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
        if svg:
            try:
                import matplotlib

                matplotlib.use("Agg")
                import matplotlib.pyplot as plt
            except ImportError:
                print("matplotlib not installed; skipping SVG output")
                svg = False
                continue
            fig, ax = plt.subplots(figsize=(7, 4))
            for meth, (mean, std) in curves.items():
                t = np.arange(len(mean))
                ax.plot(t, mean, label=meth)
                ax.fill_between(t, mean - std, mean + std, alpha=0.2)
            ax.set_xlabel("round")
            ax.set_ylabel("test accuracy")
            ax.set_title(f"attack: {attack}")
            ax.legend()
            svg_path = out / f"figure_{attack}.svg"
            fig.savefig(svg_path, format="svg", bbox_inches="tight")
            plt.close(fig)
            written.append(svg_path)
    return written


def cmd_check_theory(config_path: str, out_path: str | None, trials: int) -> int:
    """Run the Lemma-style failure Monte Carlo and the envelope check."""
    cells = parse_config(config_path)
    base = dict(cells[0])
    cfg0 = to_run_config(base)
    m, k, q = cfg0.n_clients, cfg0.honest_count, cfg0.list_size
    gamma = cfg0.honest_fraction
    report: dict[str, Any] = {"m": m, "k": k, "q": q, "gamma": gamma}

    # voting-failure Monte Carlo against the closed-form bound
    p, eta = cfg0.oracle.p, cfg0.oracle.eta
    bound, margin = hoeffding_failure_bound(m, k, q, p)
    report["failure_bound"] = bound
    report["failure_margin"] = margin
    if k == 0 or margin > 0:
        mc = simulate_failure_rate(
            FailureTrialConfig(m, k, q, p, eta, loss_gap=max(2 * eta, 0.1), trials=trials),
            derive_stream(cfg0.master_seed, "check-theory"),
        )
        report["failure_rate"] = mc.empirical_rate
        ok_mc = mc.empirical_rate <= mc.hoeffding_bound
        report["failure_rate_below_bound"] = ok_mc
        print(f"voting failure: empirical {mc.empirical_rate:.6f} <= bound {bound:.6f}: {ok_mc}")
    else:
        print(f"voting failure bound not applicable (margin {margin:.4f} <= 0)")
        report["failure_rate"] = None

    if cfg0.model.kind != "softmax-regression" or cfg0.model.l2 <= 0:
        print("envelope check requires the strongly convex model (softmax-regression, l2 > 0)")
        report["envelope"] = None
    elif cfg0.update_source != "single-client" or cfg0.aggregator is not None:
        print("envelope check only runs the plain list protocol; adjust method")
        report["envelope"] = None
    else:
        seeds = sorted({c["seed"] for c in cells})
        runs, f_stars, initials = [], [], []
        profile = None
        for seed in seeds:
            cell = dict(base)
            cell["seed"] = seed
            cfg = to_run_config(cell)
            res = run_lidfl(cfg)
            clients = setup_clients(cfg)
            honest_train = [c.train for c in clients if c.honest]
            f_star, _ = estimate_f_star(cfg.model, honest_train)
            if profile is None:
                pooled = np.concatenate([b.x for b in honest_train]), np.concatenate([b.y for b in honest_train])
                profile = estimate_loss_profile(cfg.model, pooled, trials=100)
            w0 = initial_model(cfg)
            runs.append(res.records)
            f_stars.append(f_star)
            initials.append(float(np.mean([loss(cfg.model, w0, b) for b in honest_train])))
        delta = min(bound, 1.0) if margin > 0 or k == 0 else 0.0
        params = EnvelopeParams(profile.alpha, profile.beta, gamma, q, delta=delta, eta=eta)
        env = check_envelope(runs, params, f_stars, initials)
        print(env)
        report["envelope"] = {
            "rho": env.rho, "floor": env.floor, "fraction_above": env.fraction_above,
            "passes": env.passes, "regime_violation": env.regime_violation,
            "alpha": profile.alpha, "beta": profile.beta, "delta": delta,
        }
        report["contraction_factor"] = None if env.regime_violation else contraction_factor(params)
    if out_path:
        Path(out_path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lidfl", description="list-decodable federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the experiment grid in a config file")
    p_run.add_argument("config")
    p_run.add_argument("--parallelism", type=int, default=1)
    p_run.add_argument("--out", default="results")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--eval-every", type=int, default=None, help="override eval.every")

    p_rep = sub.add_parser("report", help="aggregate run outputs into a summary table")
    p_rep.add_argument("out_dir")

    p_chk = sub.add_parser("check-theory", help="Monte Carlo failure bound + contraction envelope")
    p_chk.add_argument("config")
    p_chk.add_argument("--out", default=None)
    p_chk.add_argument("--trials", type=int, default=100_000)
    p_chk.add_argument("--seed", type=int, default=None)
    p_chk.add_argument("--eval-every", type=int, default=None)

    p_plt = sub.add_parser("plots", help="export per-attack accuracy curves")
    p_plt.add_argument("out_dir")
    p_plt.add_argument("--svg", action="store_true")

    args = parser.parse_args(argv)
    if args.command == "run":
        overrides = {}
        if args.seed is not None:
            overrides["LIDFL_SEED"] = str(args.seed)
        if args.eval_every is not None:
            overrides["LIDFL_EVAL_EVERY"] = str(args.eval_every)
        env = dict(os.environ, **overrides)
        cells = parse_config(args.config, environ=env)
        return run_experiments(cells, args.parallelism, args.out)
    if args.command == "report":
        return cmd_report(args.out_dir)
    if args.command == "check-theory":
        if args.seed is not None:
            os.environ["LIDFL_SEED"] = str(args.seed)
        if args.eval_every is not None:
            os.environ["LIDFL_EVAL_EVERY"] = str(args.eval_every)
        return cmd_check_theory(args.config, args.out, args.trials)
    if args.command == "plots":
        written = export_plots(args.out_dir, svg=args.svg)
        for p in written:
            print(p)
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
