"""Experiment orchestration: config parsing, runs, and CSV/plot-data emission.

Configs are JSON documents with one section per subsystem; unknown keys
fail fast. Every run is a pure function of (config, seed): re-running
with the same config and seeds rewrites byte-identical artifacts. Each
output file carries the config hash in a header comment and the resolved
config itself is written next to the artifacts, so any output can be
traced back to, and reproduced from, its generating configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import bounds as bounds_mod
from . import fedcore, netqueue, nnet
from .datagen import SynthConfig, generate

TRAINING_MODES = ("vhfl", "hfl", "cloud", "cloud_local")
MODES = TRAINING_MODES + (
    "queue_analyze",
    "queue_simulate",
    "delay_plan",
    "bounds_sweep",
    "compare",
    "k_el_sweep",
)

_REQUIRED_SECTIONS: dict[str, tuple[str, ...]] = {
    "vhfl": ("federation", "synth"),
    "hfl": ("federation", "synth"),
    "cloud": ("federation", "synth"),
    "cloud_local": ("federation", "synth"),
    "compare": ("federation", "synth"),
    "queue_analyze": ("queue",),
    "queue_simulate": ("queue",),
    "delay_plan": ("queue", "delay_plan"),
    "bounds_sweep": ("bounds", "bounds_sweep"),
    "k_el_sweep": ("federation", "synth", "k_el_sweep"),
}


class ConfigError(Exception):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class QueueSpec:
    params: netqueue.He2Params
    t_p_grid: tuple[float, ...]
    n_jobs: int
    seed: int


@dataclass(frozen=True)
class DelayPlanSpec:
    gamma_targets: tuple[float, ...]
    tol: float


@dataclass(frozen=True)
class BoundsSweepSpec:
    param: str
    values: tuple[float, ...]


@dataclass(frozen=True)
class KElSweepSpec:
    k_values: tuple[int, ...]
    el_values: tuple[int, ...]
    loss_threshold: float


@dataclass(frozen=True)
class ChannelSpec:
    params: netqueue.He2Params
    t_p: float
    seed: int


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    seeds: tuple[int, ...]
    out_dir: Path
    raw: dict[str, Any]
    federation: fedcore.FederationConfig | None = None
    synth: SynthConfig | None = None
    channel: ChannelSpec | None = None
    queue: QueueSpec | None = None
    delay_plan: DelayPlanSpec | None = None
    bounds: bounds_mod.BoundParams | None = None
    bounds_sweep: BoundsSweepSpec | None = None
    k_el_sweep: KElSweepSpec | None = None
    workers: int = 1

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict[str, Any]) -> str:
    # out_dir and workers do not influence results, so they stay out of the hash
    semantic = {k: v for k, v in raw.items() if k not in ("out_dir", "workers")}
    canonical = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _section(obj: dict[str, Any], allowed: Iterable[str], where: str) -> None:
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _need(obj: dict[str, Any], key: str, where: str) -> Any:
    if key not in obj:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return obj[key]


def _parse_schedule(obj: Any, where: str) -> fedcore.Schedule:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: schedule must be an object")
    _section(obj, ("kind", "c", "t0"), where)
    try:
        return fedcore.Schedule(
            kind=str(_need(obj, "kind", where)),
            c=float(_need(obj, "c", where)),
            t0=float(obj.get("t0", 1.0)),
        )
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from None


def _parse_federation(obj: dict[str, Any], where: str) -> fedcore.FederationConfig:
    allowed = (
        "n_clients", "k", "local_epochs", "batch_size", "global_epochs",
        "eta", "eta0", "selection", "combine", "aggregator",
        "w0_hidden", "u0_dim", "local_hidden", "activation", "l_est",
        "center_frozen",
    )
    _section(obj, allowed, where)
    try:
        return fedcore.FederationConfig(
            n_clients=int(_need(obj, "n_clients", where)),
            k=int(_need(obj, "k", where)),
            local_epochs=int(_need(obj, "local_epochs", where)),
            batch_size=int(_need(obj, "batch_size", where)),
            global_epochs=int(_need(obj, "global_epochs", where)),
            eta=_parse_schedule(_need(obj, "eta", where), f"{where}.eta"),
            eta0=_parse_schedule(_need(obj, "eta0", where), f"{where}.eta0"),
            seed=0,
            selection=str(obj.get("selection", "uniform_without_replacement")),
            combine=str(obj.get("combine", "concat")),
            aggregator=str(obj.get("aggregator", "renormalized")),
            w0_hidden=tuple(int(h) for h in obj.get("w0_hidden", [16])),
            u0_dim=int(obj.get("u0_dim", 4)),
            local_hidden=tuple(int(h) for h in obj.get("local_hidden", [16])),
            activation=str(obj.get("activation", "tanh")),
            l_est=float(obj.get("l_est", 1.0)),
            center_frozen=bool(obj.get("center_frozen", False)),
        )
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from None


def _parse_synth(obj: dict[str, Any], where: str) -> SynthConfig:
    allowed = (
        "n_clients", "samples_per_client", "d_local", "d_global", "d_label",
        "noise_std", "global_strength", "noniid_shift", "seed",
        "public_fraction", "q_mode",
    )
    _section(obj, allowed, where)
    try:
        return SynthConfig(
            n_clients=int(_need(obj, "n_clients", where)),
            samples_per_client=int(_need(obj, "samples_per_client", where)),
            d_local=int(_need(obj, "d_local", where)),
            d_global=int(_need(obj, "d_global", where)),
            d_label=int(_need(obj, "d_label", where)),
            noise_std=float(obj.get("noise_std", 0.1)),
            global_strength=float(obj.get("global_strength", 0.8)),
            noniid_shift=float(obj.get("noniid_shift", 0.0)),
            seed=int(obj.get("seed", 0)),
            public_fraction=float(obj.get("public_fraction", 0.0)),
            q_mode=str(obj.get("q_mode", "proportional")),
        )
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from None


def _parse_he2(obj: dict[str, Any], where: str) -> netqueue.He2Params:
    try:
        return netqueue.He2Params(
            lambda_n=float(_need(obj, "lambda_n", where)),
            alpha1=float(_need(obj, "alpha1", where)),
            alpha2=float(_need(obj, "alpha2", where)),
            mu1=float(_need(obj, "mu1", where)),
            mu2=float(_need(obj, "mu2", where)),
        )
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from None


def _parse_grid(obj: Any, where: str) -> tuple[float, ...]:
    if isinstance(obj, list):
        grid = tuple(float(v) for v in obj)
    elif isinstance(obj, dict):
        _section(obj, ("start", "stop", "count"), where)
        grid = tuple(
            float(v)
            for v in np.linspace(
                float(_need(obj, "start", where)),
                float(_need(obj, "stop", where)),
                int(_need(obj, "count", where)),
            )
        )
    else:
        raise ConfigError(f"{where}: grid must be a list or start/stop/count object")
    if not grid:
        raise ConfigError(f"{where}: grid is empty")
    return grid


def _parse_queue(obj: dict[str, Any], where: str) -> QueueSpec:
    allowed = ("lambda_n", "alpha1", "alpha2", "mu1", "mu2", "t_p_grid", "n_jobs", "seed")
    _section(obj, allowed, where)
    return QueueSpec(
        params=_parse_he2(obj, where),
        t_p_grid=_parse_grid(obj.get("t_p_grid", {"start": 0.1, "stop": 4.0, "count": 20}), f"{where}.t_p_grid"),
        n_jobs=int(obj.get("n_jobs", 100_000)),
        seed=int(obj.get("seed", 0)),
    )


def _parse_delay_plan(obj: dict[str, Any], where: str) -> DelayPlanSpec:
    _section(obj, ("gamma_targets", "tol"), where)
    targets = tuple(float(v) for v in _need(obj, "gamma_targets", where))
    if not targets:
        raise ConfigError(f"{where}: gamma_targets is empty")
    for g in targets:
        if not 0.0 < g < 1.0:
            raise ConfigError(f"{where}: gamma target {g} outside (0, 1)")
    return DelayPlanSpec(gamma_targets=targets, tol=float(obj.get("tol", 1e-6)))


def _parse_bounds(obj: dict[str, Any], where: str) -> bounds_mod.BoundParams:
    allowed = (
        "l_smooth", "mu_pl", "sigma2", "sigma0_2", "g2", "lambda_niid",
        "f_init", "f_star", "f0", "local_epochs", "k", "global_epochs", "gamma",
    )
    _section(obj, allowed, where)
    try:
        return bounds_mod.BoundParams(
            l_smooth=float(_need(obj, "l_smooth", where)),
            mu_pl=float(_need(obj, "mu_pl", where)),
            sigma2=float(_need(obj, "sigma2", where)),
            sigma0_2=float(_need(obj, "sigma0_2", where)),
            g2=float(_need(obj, "g2", where)),
            lambda_niid=float(_need(obj, "lambda_niid", where)),
            f_init=float(_need(obj, "f_init", where)),
            f_star=float(_need(obj, "f_star", where)),
            f0=float(_need(obj, "f0", where)),
            local_epochs=int(_need(obj, "local_epochs", where)),
            k=int(_need(obj, "k", where)),
            global_epochs=int(_need(obj, "global_epochs", where)),
            gamma=float(obj.get("gamma", 1.0)),
        )
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from None


def _parse_channel(obj: dict[str, Any], where: str) -> ChannelSpec:
    allowed = ("lambda_n", "alpha1", "alpha2", "mu1", "mu2", "t_p", "seed")
    _section(obj, allowed, where)
    t_p = float(_need(obj, "t_p", where))
    if t_p < 0.0:
        raise ConfigError(f"{where}: t_p must be non-negative")
    return ChannelSpec(params=_parse_he2(obj, where), t_p=t_p, seed=int(obj.get("seed", 0)))


def _parse_k_el_sweep(obj: dict[str, Any], where: str) -> KElSweepSpec:
    _section(obj, ("k_values", "el_values", "loss_threshold"), where)
    spec = KElSweepSpec(
        k_values=tuple(int(v) for v in obj.get("k_values", [])),
        el_values=tuple(int(v) for v in obj.get("el_values", [])),
        loss_threshold=float(_need(obj, "loss_threshold", where)),
    )
    if not spec.k_values and not spec.el_values:
        raise ConfigError(f"{where}: provide k_values and/or el_values")
    if spec.loss_threshold <= 0.0:
        raise ConfigError(f"{where}: loss_threshold must be positive")
    return spec


def parse_config(
    raw: dict[str, Any],
    mode_override: str | None = None,
    seed_override: int | None = None,
    out_override: str | None = None,
) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    allowed = (
        "mode", "seeds", "out_dir", "workers",
        "federation", "synth", "channel", "queue", "delay_plan",
        "bounds", "bounds_sweep", "k_el_sweep",
    )
    _section(raw, allowed, "config")

    raw = dict(raw)
    if mode_override is not None:
        if "mode" in raw and raw["mode"] != mode_override:
            raise ConfigError(
                f"config: mode {raw['mode']!r} conflicts with requested mode {mode_override!r}"
            )
        raw["mode"] = mode_override
    if seed_override is not None:
        raw["seeds"] = [int(seed_override)]
    if out_override is not None:
        raw["out_dir"] = str(out_override)

    mode = str(_need(raw, "mode", "config"))
    if mode not in MODES:
        raise ConfigError(f"config: unknown mode {mode!r}, expected one of {sorted(MODES)}")
    seeds = tuple(int(s) for s in _need(raw, "seeds", "config"))
    if not seeds:
        raise ConfigError("config: seeds must be non-empty")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("config: seeds must be distinct")
    out_dir = Path(str(_need(raw, "out_dir", "config")))
    workers = int(raw.get("workers", 1))
    if workers < 1:
        raise ConfigError("config: workers must be >= 1")

    for needed in _REQUIRED_SECTIONS[mode]:
        if needed not in raw:
            raise ConfigError(f"config: mode {mode!r} requires section {needed!r}")

    federation = _parse_federation(raw["federation"], "federation") if "federation" in raw else None
    synth = _parse_synth(raw["synth"], "synth") if "synth" in raw else None
    channel = _parse_channel(raw["channel"], "channel") if "channel" in raw else None
    queue = _parse_queue(raw["queue"], "queue") if "queue" in raw else None
    delay_plan = _parse_delay_plan(raw["delay_plan"], "delay_plan") if "delay_plan" in raw else None
    bounds = _parse_bounds(raw["bounds"], "bounds") if "bounds" in raw else None
    bounds_sweep = None
    if "bounds_sweep" in raw:
        obj = raw["bounds_sweep"]
        _section(obj, ("param", "values"), "bounds_sweep")
        bounds_sweep = BoundsSweepSpec(
            param=str(_need(obj, "param", "bounds_sweep")),
            values=tuple(float(v) for v in _need(obj, "values", "bounds_sweep")),
        )
        if not bounds_sweep.values:
            raise ConfigError("bounds_sweep: values is empty")
        if bounds_sweep.param not in {f.name for f in dataclasses.fields(bounds_mod.BoundParams)}:
            raise ConfigError(f"bounds_sweep: unknown bound parameter {bounds_sweep.param!r}")
    k_el = _parse_k_el_sweep(raw["k_el_sweep"], "k_el_sweep") if "k_el_sweep" in raw else None

    if federation is not None and synth is not None:
        if federation.n_clients != synth.n_clients:
            raise ConfigError(
                f"federation.n_clients {federation.n_clients} != synth.n_clients {synth.n_clients}"
            )
    if k_el is not None and federation is not None:
        for k in k_el.k_values:
            if not 1 <= k <= federation.n_clients:
                raise ConfigError(f"k_el_sweep: k={k} outside 1..{federation.n_clients}")
        for el in k_el.el_values:
            if el < 1:
                raise ConfigError(f"k_el_sweep: local_epochs={el} must be >= 1")

    return ExperimentConfig(
        mode=mode,
        seeds=seeds,
        out_dir=out_dir,
        raw=raw,
        federation=federation,
        synth=synth,
        channel=channel,
        queue=queue,
        delay_plan=delay_plan,
        bounds=bounds,
        bounds_sweep=bounds_sweep,
        k_el_sweep=k_el,
        workers=workers,
    )


def load_config(
    path: str | Path,
    mode_override: str | None = None,
    seed_override: int | None = None,
    out_override: str | None = None,
) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"{path}: {err}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}:{err.lineno}:{err.colno}: {err.msg}") from None
    try:
        return parse_config(raw, mode_override, seed_override, out_override)
    except ConfigError as err:
        raise ConfigError(f"{path}: {err}") from None


class _Artifacts:
    """Tracks files written by one invocation so failures can be cleaned up."""

    def __init__(self, out_dir: Path, header: str) -> None:
        self.out_dir = out_dir
        self.header = header
        self.created: list[Path] = []

    def open_path(self, name: str) -> Path:
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        self.created.append(path)
        return path

    def write_csv(self, name: str, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        path = self.open_path(name)
        lines = [self.header, ",".join(columns)]
        for row in rows:
            lines.append(",".join(_cell(v) for v in row))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def write_text(self, name: str, body: str) -> Path:
        path = self.open_path(name)
        path.write_text(self.header + "\n" + body, encoding="utf-8")
        return path

    def cleanup(self) -> None:
        for path in self.created:
            try:
                path.unlink()
            except OSError:
                pass


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _channel_for(config: ExperimentConfig, seed: int) -> netqueue.ChannelModel | None:
    if config.channel is None:
        return None
    return netqueue.ChannelModel(
        params=config.channel.params,
        t_p=config.channel.t_p,
        seed=config.channel.seed + seed,
    )


def run_single(
    config: ExperimentConfig,
    mode: str,
    seed: int,
    federation: fedcore.FederationConfig | None = None,
) -> tuple[fedcore.CenterState, fedcore.TrainingTrace]:
    """Run one training mode for one seed; datasets and nets derive from the seed."""
    assert config.federation is not None and config.synth is not None
    fed = federation if federation is not None else config.federation
    fed = dataclasses.replace(
        fed,
        seed=seed,
        deadline_channel=_channel_for(config, seed) if mode in ("vhfl", "hfl") else None,
    )
    dataset = generate(dataclasses.replace(config.synth, seed=config.synth.seed + seed))
    if mode == "vhfl":
        return fedcore.run_vhfl(fed, dataset)
    if mode == "hfl":
        return fedcore.run_hfl(fed, dataset)
    if mode == "cloud":
        return fedcore.run_cloud(fed, dataset, use_global=True)
    if mode == "cloud_local":
        return fedcore.run_cloud(fed, dataset, use_global=False)
    raise ValueError(f"not a training mode: {mode!r}")


def _map_jobs(
    worker: Callable[[Any], Any],
    jobs: Sequence[Any],
    workers: int,
) -> list[Any]:
    if workers <= 1 or len(jobs) <= 1:
        return [worker(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, jobs))


def _run_training(config: ExperimentConfig, artifacts: _Artifacts, modes: Sequence[str]) -> None:
    jobs = [(mode, seed) for mode in modes for seed in config.seeds]

    def worker(job: tuple[str, int]) -> tuple[str, int, fedcore.CenterState, fedcore.TrainingTrace]:
        mode, seed = job
        center, trace = run_single(config, mode, seed)
        return mode, seed, center, trace

    results = _map_jobs(worker, jobs, config.workers)
    results.sort(key=lambda r: (r[0], r[1]))

    hash_line = artifacts.header
    for mode, seed, center, trace in results:
        trace_path = artifacts.open_path(f"trace_{mode}_seed{seed}.csv")
        trace.to_csv(trace_path, config_hash=config.config_hash)
        wbar_path = artifacts.open_path(f"wbar_{mode}_seed{seed}.txt")
        wbar_path.write_text(hash_line + "\n" + nnet.dumps_net(center.wbar), encoding="utf-8")
        if center.w0 is not None:
            w0_path = artifacts.open_path(f"w0_{mode}_seed{seed}.txt")
            w0_path.write_text(hash_line + "\n" + nnet.dumps_net(center.w0), encoding="utf-8")

    summary_rows = [
        (mode, seed, trace.final.train_mse, trace.final.test_mse, trace.final.test_error_ratio)
        for mode, seed, _, trace in results
    ]
    artifacts.write_csv(
        "summary.csv",
        ["mode", "seed", "final_train_mse", "final_test_mse", "final_test_error_ratio"],
        summary_rows,
    )

    stats_rows = []
    for mode in sorted(set(modes)):
        for metric, idx in (("final_train_mse", 2), ("final_test_mse", 3), ("final_test_error_ratio", 4)):
            values = np.array([row[idx] for row in summary_rows if row[0] == mode])
            stats_rows.append((mode, metric, float(values.mean()), float(values.std())))
    artifacts.write_csv("summary_stats.csv", ["mode", "metric", "mean", "sd"], stats_rows)


def _queue_report(config: ExperimentConfig, analysis: netqueue.QueueAnalysis) -> str:
    spec = config.queue
    assert spec is not None
    targets = config.delay_plan.gamma_targets if config.delay_plan else (0.5, 0.9, 0.99)
    tol = config.delay_plan.tol if config.delay_plan else 1e-6
    lines = [
        "queue analysis",
        f"rho {analysis.rho!r}",
        f"mu12 {analysis.mu12!r}",
        f"s1 {analysis.s1!r}",
        f"s2 {analysis.s2!r}",
        "",
        "t_p gamma",
    ]
    for t_p in spec.t_p_grid:
        lines.append(f"{t_p!r} {netqueue.success_rate(analysis, t_p)!r}")
    lines.append("")
    lines.append("gamma_target required_t_p")
    for g in targets:
        lines.append(f"{g!r} {netqueue.required_deadline(analysis, g, tol)!r}")
    return "\n".join(lines) + "\n"


def _run_queue_analyze(config: ExperimentConfig, artifacts: _Artifacts) -> None:
    spec = config.queue
    assert spec is not None
    analysis = netqueue.analyze(spec.params)
    artifacts.write_text("queue_report.txt", _queue_report(config, analysis))
    rows = [(t_p, netqueue.success_rate(analysis, t_p)) for t_p in spec.t_p_grid]
    artifacts.write_csv("gamma_table.csv", ["t_p", "gamma_formula"], rows)


def _run_queue_simulate(config: ExperimentConfig, artifacts: _Artifacts) -> None:
    spec = config.queue
    assert spec is not None
    analysis = netqueue.analyze(spec.params)
    samples = netqueue.simulate_mg1(spec.params, spec.n_jobs, spec.seed)
    rows = [
        (t_p, netqueue.success_rate(analysis, t_p), netqueue.empirical_gamma(samples, t_p))
        for t_p in spec.t_p_grid
    ]
    artifacts.write_csv("gamma_vs_tp.csv", ["t_p", "gamma_formula", "gamma_mc"], rows)
    body = _queue_report(config, analysis) + f"\nmean_sojourn_mc {float(np.mean(samples))!r}\n"
    artifacts.write_text("queue_report.txt", body)


def _run_delay_plan(config: ExperimentConfig, artifacts: _Artifacts) -> None:
    spec, plan = config.queue, config.delay_plan
    assert spec is not None and plan is not None
    analysis = netqueue.analyze(spec.params)
    rows = [
        (g, netqueue.required_deadline(analysis, g, plan.tol))
        for g in plan.gamma_targets
    ]
    artifacts.write_csv("deadline_plan.csv", ["gamma_target", "t_p"], rows)
    artifacts.write_text("queue_report.txt", _queue_report(config, analysis))


def _run_bounds_sweep(config: ExperimentConfig, artifacts: _Artifacts) -> None:
    base, sweep_spec = config.bounds, config.bounds_sweep
    assert base is not None and sweep_spec is not None
    try:
        rows = bounds_mod.sweep(base, sweep_spec.param, sweep_spec.values)
    except ValueError as err:
        raise ConfigError(f"bounds_sweep: {err}") from None
    table = [(sweep_spec.param, value, nc, cv) for value, nc, cv in rows]
    artifacts.write_csv(
        "bounds_sweep.csv",
        ["swept_param", "value", "nonconvex_bound", "convex_bound"],
        table,
    )


def epochs_to_threshold(trace: fedcore.TrainingTrace, threshold: float) -> int:
    """Global epochs until train loss first reaches the threshold; -1 if never."""
    for row in trace.rows:
        if row.train_mse <= threshold:
            return row.epoch + 1
    return -1


def _run_k_el_sweep(config: ExperimentConfig, artifacts: _Artifacts) -> None:
    spec = config.k_el_sweep
    assert spec is not None and config.federation is not None
    jobs: list[tuple[str, int, int]] = []
    jobs += [("k", value, seed) for value in spec.k_values for seed in config.seeds]
    jobs += [("local_epochs", value, seed) for value in spec.el_values for seed in config.seeds]

    def worker(job: tuple[str, int, int]) -> tuple[str, int, int, int, float, float]:
        param, value, seed = job
        fed = dataclasses.replace(config.federation, **{param: value})
        _, trace = run_single(config, "vhfl", seed, federation=fed)
        reached = epochs_to_threshold(trace, spec.loss_threshold)
        return param, value, seed, reached, trace.final.train_mse, trace.final.test_mse

    results = _map_jobs(worker, jobs, config.workers)
    results.sort(key=lambda r: (r[0], r[1], r[2]))
    rows = [
        (param, value, seed, reached, int(reached > 0), train, test)
        for param, value, seed, reached, train, test in results
    ]
    artifacts.write_csv(
        "k_el_sweep.csv",
        ["sweep", "value", "seed", "epochs_to_threshold", "reached", "final_train_mse", "final_test_mse"],
        rows,
    )


def run(config: ExperimentConfig) -> list[Path]:
    """Execute the configured experiment; returns the created artifact paths.

    Partial outputs are removed if the run fails.
    """
    out_dir = config.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = _Artifacts(out_dir, f"# config_hash={config.config_hash}")
    try:
        resolved = artifacts.open_path("resolved_config.json")
        resolved.write_text(
            json.dumps(config.raw, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        if config.mode in TRAINING_MODES:
            _run_training(config, artifacts, [config.mode])
        elif config.mode == "compare":
            _run_training(config, artifacts, list(TRAINING_MODES))
        elif config.mode == "queue_analyze":
            _run_queue_analyze(config, artifacts)
        elif config.mode == "queue_simulate":
            _run_queue_simulate(config, artifacts)
        elif config.mode == "delay_plan":
            _run_delay_plan(config, artifacts)
        elif config.mode == "bounds_sweep":
            _run_bounds_sweep(config, artifacts)
        elif config.mode == "k_el_sweep":
            _run_k_el_sweep(config, artifacts)
        else:  # pragma: no cover - parse_config forbids this
            raise ConfigError(f"unknown mode {config.mode!r}")
    except BaseException:
        artifacts.cleanup()
        raise
    return artifacts.created
