"""Desk-scale experiment harness.

A run manifest names the data source, the partition scheme, the mix of local
model architectures across clients, the translator, and the federation plan.
`run_experiment` executes the deterministic simulation and writes the report
bundle (comparison table CSV, round log CSV, class histogram CSV, optional
training-cost traces). Multiple per-seed runs are averaged by
`aggregate_reports`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    Partition,
    PartitionSpec,
    bank_schema,
    histogram_csv,
    largest_remainder,
    load_csv,
    partition_dataset,
    partition_manifest,
    synthetic_bank_dataset,
    read_schema,
)
from .errors import ConfigError
from .federation import (
    ClientUpdate,
    FederationPlan,
    MODE_BAGGING,
    MODE_STACKING,
    RoundLogRow,
    fedavg_from_scratch,
    round_log_csv,
    run_round_loop,
)
from .metrics import MetricsReport, report_csv
from .models import KIND_LR, KIND_MLP3, Model, ModelSpec, TrainHp, derive_seed, forward_batch
from .runtime import SimulationResult, simulate
from .wrapper import (
    FeatureMode,
    build_stacking_inputs,
    decide_labels,
    init_stacking_state,
    stacking_train_round,
    stacking_translator_spec,
)


@dataclass(frozen=True)
class ArchMix:
    kind: str
    fraction: float
    hidden_dim: int | None = None


@dataclass
class RunManifest:
    name: str
    n_clients: int
    partition_mode: str
    alpha: float
    test_fraction: float
    model_mix: list[ArchMix]
    translator_kind: str
    translator_hidden: int | None
    wrapper_mode: str
    rounds: int
    train: TrainHp
    local_train: TrainHp
    seed: int
    csv_path: str | None = None
    schema_path: str | None = None
    synthetic_rows: int = 20_000
    synthetic_positive_rate: float = 0.11
    synthetic_seed: int = 20_260_101
    feature_mode: str = "probs"
    fusion_weight: float = 0.5
    threshold: float = 0.5
    timing_rounds: int | None = None
    timing_train: TrainHp | None = None

    def __post_init__(self):
        total = sum(m.fraction for m in self.model_mix)
        if abs(total - 1.0) > 1e-6:
            raise ConfigError(f"model_mix fractions sum to {total}, expected 1")
        if self.wrapper_mode not in (MODE_STACKING, MODE_BAGGING):
            raise ConfigError(f"unknown wrapper_mode {self.wrapper_mode!r}")


def _hp_from_dict(d: dict, default_seed: int) -> TrainHp:
    return TrainHp(
        learning_rate=float(d.get("learning_rate", 0.1)),
        batch_size=int(d.get("batch_size", 32)),
        local_epochs=int(d.get("local_epochs", 5)),
        l2=float(d.get("l2", 0.0)),
        seed=int(d.get("seed", default_seed)),
    )


def manifest_from_dict(d: dict) -> RunManifest:
    try:
        part = d["partition"]
        mix = [
            ArchMix(
                kind=m["kind"],
                fraction=float(m["fraction"]),
                hidden_dim=m.get("hidden_dim"),
            )
            for m in d["model_mix"]
        ]
        translator = d["translator"]
        seed = int(d.get("seed", 0))
        data = d.get("data", {})
        synth = data.get("synthetic_bank", {})
        return RunManifest(
            name=d["name"],
            n_clients=int(part["n_clients"]),
            partition_mode=part["mode"],
            alpha=float(part.get("alpha", 0.5)),
            test_fraction=float(part.get("test_fraction", 0.1)),
            model_mix=mix,
            translator_kind=translator["kind"],
            translator_hidden=translator.get("hidden_dim"),
            wrapper_mode=d.get("wrapper_mode", MODE_STACKING),
            rounds=int(d.get("rounds", 10)),
            train=_hp_from_dict(d.get("train", {}), seed),
            local_train=_hp_from_dict(d.get("local_train", {}), seed),
            seed=seed,
            csv_path=data.get("csv"),
            schema_path=data.get("schema"),
            synthetic_rows=int(synth.get("n_rows", 20_000)),
            synthetic_positive_rate=float(synth.get("positive_rate", 0.11)),
            synthetic_seed=int(synth.get("seed", 20_260_101)),
            feature_mode=d.get("feature_mode", "probs"),
            fusion_weight=float(d.get("fusion_weight", 0.5)),
            threshold=float(d.get("threshold", 0.5)),
            timing_rounds=d.get("timing_rounds"),
            timing_train=_hp_from_dict(d["timing_train"], seed) if "timing_train" in d else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad run manifest: {exc}") from exc


def load_manifest(path: str | Path) -> RunManifest:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    try:
        return manifest_from_dict(json.loads(raw))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from exc


def client_ids(n_clients: int) -> list[str]:
    width = len(str(n_clients - 1))
    return [f"{i:0{width}d}" for i in range(n_clients)]


def assign_architectures(mix: list[ArchMix], n_clients: int, in_dim: int, n_classes: int) -> dict[str, ModelSpec]:
    """Deterministic largest-remainder assignment: every client gets exactly
    one architecture, fractions realized as closely as integers allow."""
    counts = largest_remainder(np.array([m.fraction for m in mix]), n_clients)
    ids = client_ids(n_clients)
    specs: dict[str, ModelSpec] = {}
    pos = 0
    for m, count in zip(mix, counts):
        for _ in range(int(count)):
            specs[ids[pos]] = ModelSpec(
                kind=m.kind,
                in_dim=in_dim,
                n_classes=n_classes,
                hidden_dim=m.hidden_dim if m.kind == KIND_MLP3 else None,
            )
            pos += 1
    return specs


def build_dataset(manifest: RunManifest) -> Dataset:
    if manifest.csv_path:
        if not manifest.schema_path:
            raise ConfigError("manifest names a csv but no schema")
        return load_csv(manifest.csv_path, read_schema(manifest.schema_path))
    return synthetic_bank_dataset(
        manifest.synthetic_rows, manifest.synthetic_seed, manifest.synthetic_positive_rate
    )


@dataclass
class TimingResult:
    """Training-cost comparison between the wrapper pipeline and federated
    averaging from scratch on the same partition and plan."""

    baseline_accuracy: float
    wrapper_trace: list[tuple[float, float]]  # (cumulative train ms, accuracy)
    scratch_trace: list[tuple[float, float]]
    wrapper_ms_to_level: float
    scratch_ms_to_level: float
    wrapper_final_accuracy: float
    scratch_final_accuracy: float

    @property
    def wrapper_faster(self) -> bool:
        return self.wrapper_ms_to_level < self.scratch_ms_to_level


def _time_to_level(trace: list[tuple[float, float]], level: float) -> float:
    for ms, acc in trace:
        if acc >= level:
            return ms
    return float("inf")


def _converged_accuracy(trace: list[tuple[float, float]]) -> float:
    """Plateau estimate: mean accuracy over the final quarter of rounds."""
    tail = max(1, len(trace) // 4)
    return float(np.mean([acc for _, acc in trace[-tail:]]))


def _cumulative_trace(log: list[RoundLogRow]) -> list[tuple[float, float]]:
    out, total = [], 0.0
    for row in log:
        total += row.elapsed_ms
        out.append((total, row.test_accuracy if row.test_accuracy is not None else 0.0))
    return out


def timing_comparison(
    partition: Partition,
    sim: SimulationResult,
    plan: FederationPlan,
    timing_rounds: int,
    timing_hp: TrainHp | None = None,
) -> TimingResult:
    """Re-run both pipelines round by round, clocking training time only.

    The wrapper side reuses the already-trained local models (they are the
    pre-existing asset); its per-round accuracy is the mean across clients of
    the federated-model decision on the shared test set. The baseline level
    both pipelines race to is the mean local-model accuracy. Both pipelines
    run the identical schedule (timing_hp if given, else the plan's), so the
    trace differences come from what each can learn per round, not from an
    uneven budget.
    """
    test = partition.test_set
    hp = timing_hp or plan.hp
    configs = {
        cid: replace(cfg, hp=hp, _stacked_cache=None) for cid, cfg in sim.configs.items()
    }

    def mean_acc(predict_per_client) -> float:
        accs = []
        for cid in sorted(configs):
            pred = predict_per_client(cid)
            accs.append(float(np.mean(pred == test.labels)))
        return float(np.mean(accs))

    baseline = mean_acc(
        lambda cid: decide_labels(
            configs[cid].local_model.predict_proba(test.features), test.n_classes, 0.5
        )
    )

    wrapper_plan = FederationPlan(
        rounds=timing_rounds,
        expected_clients=plan.expected_clients,
        translator_spec=plan.translator_spec,
        hp=hp,
        timeout_ms=plan.timeout_ms,
        mode=MODE_STACKING,
    )
    states = {cid: init_stacking_state(cfg) for cid, cfg in configs.items()}

    def driver(cid: str, round_idx: int, global_params: list[np.ndarray]) -> ClientUpdate:
        params, n_samples, loss = stacking_train_round(states[cid], configs[cid], global_params)
        return ClientUpdate(
            client_id=cid, round=round_idx, params=params, n_samples=n_samples, loss=loss
        )

    def evaluate_wrapper(params: list[np.ndarray]) -> float:
        model = Model(spec=plan.translator_spec, params=params, rng_seed=hp.seed)

        def predict(cid):
            probs = forward_batch(model, build_stacking_inputs(configs[cid], test.features)).probs
            return decide_labels(probs, test.n_classes, 0.5)

        return mean_acc(predict)

    _, wrapper_log = run_round_loop(wrapper_plan, driver, evaluate=evaluate_wrapper)
    wrapper_trace = _cumulative_trace(wrapper_log)

    raw_spec = ModelSpec(
        kind=plan.translator_spec.kind,
        in_dim=test.in_dim,
        n_classes=test.n_classes,
        hidden_dim=plan.translator_spec.hidden_dim,
    )
    scratch_plan = FederationPlan(
        rounds=timing_rounds,
        expected_clients=plan.expected_clients,
        translator_spec=raw_spec,
        hp=hp,
        timeout_ms=plan.timeout_ms,
        mode=MODE_STACKING,
    )
    scratch = fedavg_from_scratch(partition, raw_spec, scratch_plan)
    scratch_trace = scratch.trace

    return TimingResult(
        baseline_accuracy=baseline,
        wrapper_trace=wrapper_trace,
        scratch_trace=scratch_trace,
        wrapper_ms_to_level=_time_to_level(wrapper_trace, baseline),
        scratch_ms_to_level=_time_to_level(scratch_trace, baseline),
        wrapper_final_accuracy=_converged_accuracy(wrapper_trace),
        scratch_final_accuracy=_converged_accuracy(scratch_trace),
    )


def _trace_csv(trace: list[tuple[float, float]]) -> str:
    lines = ["round,cumulative_ms,test_accuracy"]
    for i, (ms, acc) in enumerate(trace, start=1):
        lines.append(f"{i},{ms:.3f},{acc:.6f}")
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentResult:
    manifest: RunManifest
    seed: int
    partition: Partition
    plan: FederationPlan
    simulation: SimulationResult
    timing: TimingResult | None = None
    files: dict[str, Path] = field(default_factory=dict)


def run_experiment(
    manifest: RunManifest, seed: int | None = None, out_dir: str | Path | None = None
) -> ExperimentResult:
    """Execute one manifest at one seed; optionally write the report bundle."""
    seed = manifest.seed if seed is None else seed
    data = build_dataset(manifest)
    spec = PartitionSpec(
        n_clients=manifest.n_clients,
        alpha=manifest.alpha,
        mode=manifest.partition_mode,
        seed=derive_seed(seed, "partition"),
        test_fraction=manifest.test_fraction,
    )
    partition = partition_dataset(data, spec)
    client_specs = assign_architectures(
        manifest.model_mix, manifest.n_clients, data.in_dim, data.n_classes
    )
    feature_mode = FeatureMode.parse(manifest.feature_mode)
    hp = TrainHp(
        learning_rate=manifest.train.learning_rate,
        batch_size=manifest.train.batch_size,
        local_epochs=manifest.train.local_epochs,
        l2=manifest.train.l2,
        seed=derive_seed(seed, "train"),
    )
    local_hp = TrainHp(
        learning_rate=manifest.local_train.learning_rate,
        batch_size=manifest.local_train.batch_size,
        local_epochs=manifest.local_train.local_epochs,
        l2=manifest.local_train.l2,
        seed=derive_seed(seed, "pretrain"),
    )
    if manifest.wrapper_mode == MODE_STACKING:
        translator = stacking_translator_spec(
            kind=manifest.translator_kind,
            raw_in_dim=data.in_dim,
            n_classes=data.n_classes,
            feature_mode=feature_mode,
            hidden_dim=manifest.translator_hidden,
        )
    else:
        # bagging needs no shared translator; keep a placeholder spec for the plan
        translator = ModelSpec(kind=KIND_LR, in_dim=data.in_dim, n_classes=data.n_classes)
    plan = FederationPlan(
        rounds=manifest.rounds,
        expected_clients=tuple(client_ids(manifest.n_clients)),
        translator_spec=translator,
        hp=hp,
        mode=manifest.wrapper_mode,
    )
    sim = simulate(
        partition,
        client_specs,
        plan,
        manifest.wrapper_mode,
        local_hp=local_hp,
        feature_mode=feature_mode,
        threshold=manifest.threshold,
        fusion_weight=manifest.fusion_weight,
    )
    timing = None
    if manifest.timing_rounds:
        timing_hp = None
        if manifest.timing_train is not None:
            timing_hp = TrainHp(
                learning_rate=manifest.timing_train.learning_rate,
                batch_size=manifest.timing_train.batch_size,
                local_epochs=manifest.timing_train.local_epochs,
                l2=manifest.timing_train.l2,
                seed=derive_seed(seed, "timing"),
            )
        timing = timing_comparison(
            partition, sim, plan, manifest.timing_rounds, timing_hp=timing_hp
        )

    result = ExperimentResult(
        manifest=manifest, seed=seed, partition=partition, plan=plan, simulation=sim, timing=timing
    )
    if out_dir is not None:
        result.files = write_bundle(result, Path(out_dir))
    return result


def report_full_json(report: MetricsReport) -> str:
    payload = {
        "per_client": report.per_client,
        "aggregate": {
            kind: {metric: list(ms) for metric, ms in metrics.items()}
            for kind, metrics in report.aggregate.items()
        },
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def write_bundle(result: ExperimentResult, out_dir: Path) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    setting = f"{result.manifest.partition_mode}-alpha{result.manifest.alpha}"
    files = {
        "report": out_dir / "report.csv",
        "report_full": out_dir / "report_full.json",
        "round_log": out_dir / "round_log.csv",
        "histogram": out_dir / "histogram.csv",
        "partition_manifest": out_dir / "partition_manifest.json",
    }
    files["report"].write_text(
        report_csv(result.simulation.report, result.manifest.n_clients, setting),
        encoding="utf-8",
    )
    files["report_full"].write_text(report_full_json(result.simulation.report), encoding="utf-8")
    files["round_log"].write_text(round_log_csv(result.simulation.federation.log), encoding="utf-8")
    files["histogram"].write_text(histogram_csv(result.partition), encoding="utf-8")
    files["partition_manifest"].write_text(
        json.dumps(partition_manifest(result.partition), sort_keys=True) + "\n", encoding="utf-8"
    )
    if result.timing is not None:
        t = result.timing
        files["timing_wrapper"] = out_dir / "timing_wrapper.csv"
        files["timing_scratch"] = out_dir / "timing_scratch.csv"
        files["timing_summary"] = out_dir / "timing_summary.json"
        files["timing_wrapper"].write_text(_trace_csv(t.wrapper_trace), encoding="utf-8")
        files["timing_scratch"].write_text(_trace_csv(t.scratch_trace), encoding="utf-8")
        files["timing_summary"].write_text(
            json.dumps(
                {
                    "baseline_accuracy": t.baseline_accuracy,
                    "wrapper_ms_to_level": t.wrapper_ms_to_level,
                    "scratch_ms_to_level": t.scratch_ms_to_level,
                    "wrapper_final_accuracy": t.wrapper_final_accuracy,
                    "scratch_final_accuracy": t.scratch_final_accuracy,
                    "wrapper_faster": t.wrapper_faster,
                },
                sort_keys=True,
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )
    return files


def aggregate_reports(report_paths: list[str | Path]) -> str:
    """Average several per-seed report.csv files into one table.

    Means are averaged across seeds; the std column becomes the across-seed
    standard deviation of the per-seed means.
    """
    rows: dict[tuple[str, str, str], dict[str, list[float]]] = {}
    header = "n_clients,setting,metric,local_mean,local_std,wrapper_mean,wrapper_std"
    for path in report_paths:
        lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
        if not lines or lines[0] != header:
            raise ConfigError(f"{path} is not a report csv")
        for line in lines[1:]:
            n_clients, setting, metric, lm, _, wm, _ = line.split(",")
            key = (n_clients, setting, metric)
            acc = rows.setdefault(key, {"local": [], "wrapper": []})
            acc["local"].append(float(lm))
            acc["wrapper"].append(float(wm))
    out = [header]
    for (n_clients, setting, metric), acc in rows.items():
        lm = np.array(acc["local"])
        wm = np.array(acc["wrapper"])
        out.append(
            f"{n_clients},{setting},{metric},{lm.mean():.6f},{lm.std():.6f},"
            f"{wm.mean():.6f},{wm.std():.6f}"
        )
    return "\n".join(out) + "\n"
