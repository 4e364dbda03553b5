"""Command-line surface.

Subcommands: partition (split a CSV into per-client shards), serve (run the
coordinator), join (attach one client to a live federation), infer (predict
with a saved wrapper state), simulate (deterministic end-to-end experiment),
report (average per-seed report tables).

Exit codes: 0 success, 1 experiment-level failure (timeouts, federation
errors), 2 usage or configuration errors. Config files are JSON; the server
address and shared token may also come from FEDWRAP_ADDR / FEDWRAP_TOKEN,
with the config file taking precedence.
"""

from __future__ import annotations

import argparse
import base64
import json
import os
import signal
import sys
import threading
from pathlib import Path

import numpy as np

from . import data as datamod
from .errors import (
    ConfigError,
    DecodeError,
    FedwrapError,
    IngestionError,
    InputError,
    ProtocolError,
    TransportError,
)
from .experiment import aggregate_reports, load_manifest, run_experiment
from .federation import MODE_BAGGING, MODE_STACKING, FederationPlan, round_log_csv
from .metrics import report_csv
from .models import ModelSpec, TrainHp, deserialize_model, serialize_model
from .runtime import join as runtime_join
from .runtime import serve as runtime_serve
from .wrapper import (
    BaggingState,
    FeatureMode,
    StackingState,
    WrapperConfig,
    handle_from_model,
    wrapper_infer_batch,
)

ENV_ADDR = "FEDWRAP_ADDR"
ENV_TOKEN = "FEDWRAP_TOKEN"


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def _addr_from(cfg: dict, key: str) -> tuple[str, int] | None:
    if key in cfg:
        entry = cfg[key]
        try:
            return str(entry["ip"]), int(entry["port"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad {key} entry {entry!r}") from exc
    env = os.environ.get(ENV_ADDR)
    if env and ":" in env:
        host, port = env.rsplit(":", 1)
        return host, int(port)
    return None


def _token_from(cfg: dict) -> str:
    if "token" in cfg:
        return str(cfg["token"])
    return os.environ.get(ENV_TOKEN, "")


def _hp_from(cfg: dict) -> TrainHp:
    d = cfg.get("train", {})
    return TrainHp(
        learning_rate=float(d.get("learning_rate", 0.1)),
        batch_size=int(d.get("batch_size", 32)),
        local_epochs=int(d.get("local_epochs", 5)),
        l2=float(d.get("l2", 0.0)),
        seed=int(d.get("seed", 0)),
    )


# ---------------------------------------------------------------------------
# partition


def cmd_partition(args) -> int:
    schema = datamod.read_schema(args.schema)
    dataset = datamod.load_csv(args.csv, schema)
    spec = datamod.PartitionSpec(
        n_clients=args.clients,
        alpha=args.alpha,
        mode=args.mode,
        seed=args.seed,
        test_fraction=args.test_fraction,
    )
    partition = datamod.partition_dataset(dataset, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    width = len(str(args.clients - 1))
    client_files = {}
    for i, ds in enumerate(partition.client_datasets):
        name = f"client_{i:0{width}d}.csv"
        datamod.write_matrix_csv(ds, out / name)
        client_files[f"{i:0{width}d}"] = name
    datamod.write_matrix_csv(partition.test_set, out / "test.csv")
    manifest = datamod.partition_manifest(partition)
    manifest["client_files"] = client_files
    manifest["test_file"] = "test.csv"
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out / "histogram.csv").write_text(datamod.histogram_csv(partition), encoding="utf-8")
    print(f"wrote {args.clients} client shards, test set, manifest, histogram to {out}")
    return 0


# ---------------------------------------------------------------------------
# serve


def _server_plan(cfg: dict, args) -> tuple[tuple[str, int], FederationPlan, str]:
    addr = _addr_from(cfg, "server_addr")
    if addr is None:
        raise ConfigError(f"no server_addr in config and no {ENV_ADDR} set")
    clients = cfg.get("clients")
    if not clients:
        raise ConfigError("server config needs the full client roster in 'clients'")
    mode = args.mode or cfg.get("mode", MODE_STACKING)
    translator = cfg.get("translator", {})
    n_classes = int(cfg["n_classes"])
    if mode == MODE_STACKING:
        in_dim = int(cfg["in_dim"])
        feature_mode = FeatureMode.parse(cfg.get("feature_mode", "probs"))
        spec = ModelSpec(
            kind=translator.get("kind", "mlp3"),
            in_dim=in_dim + feature_mode.width(n_classes),
            n_classes=n_classes,
            hidden_dim=translator.get("hidden_dim"),
        )
    else:
        spec = ModelSpec(kind="lr", in_dim=int(cfg.get("in_dim", 1)), n_classes=n_classes)
    plan = FederationPlan(
        rounds=args.rounds or int(cfg.get("rounds", 10)),
        expected_clients=tuple(str(c) for c in clients),
        translator_spec=spec,
        hp=_hp_from(cfg),
        timeout_ms=int(cfg.get("timeout_ms", 30_000)),
        mode=mode,
    )
    return addr, plan, _token_from(cfg)


def cmd_serve(args) -> int:
    cfg = _read_json(Path(args.config))
    addr, plan, token = _server_plan(cfg, args)
    stop = threading.Event()
    on_main = threading.current_thread() is threading.main_thread()
    previous = signal.signal(signal.SIGINT, lambda *_: stop.set()) if on_main else None
    try:
        result = runtime_serve(addr, plan, token=token, stop_event=stop)
    finally:
        if on_main:
            signal.signal(signal.SIGINT, previous)
    out = Path(args.out) if args.out else Path.cwd()
    out.mkdir(parents=True, exist_ok=True)
    (out / "round_log.csv").write_text(round_log_csv(result.log), encoding="utf-8")
    print(f"federation finished after {len(result.log)} rounds; log in {out / 'round_log.csv'}")
    return 0


# ---------------------------------------------------------------------------
# join / infer


def _client_config(cfg: dict, base: Path) -> tuple[WrapperConfig, str]:
    def respath(key: str) -> Path:
        p = Path(str(cfg[key]))
        return p if p.is_absolute() else base / p

    try:
        local_model = deserialize_model(respath("local_model").read_bytes())
    except OSError as exc:
        raise ConfigError(f"cannot read local model: {exc}") from exc
    n_classes = int(cfg["n_classes"])
    dataset = datamod.read_matrix_csv(respath("train_dataset"), n_classes=n_classes)
    mode = cfg.get("mode", MODE_STACKING)
    feature_mode = FeatureMode.parse(cfg.get("feature_mode", "probs"))
    translator = cfg.get("translator", {})
    if mode == MODE_STACKING:
        spec = ModelSpec(
            kind=translator.get("kind", "mlp3"),
            in_dim=dataset.in_dim + feature_mode.width(n_classes),
            n_classes=n_classes,
            hidden_dim=translator.get("hidden_dim"),
        )
    else:
        spec = ModelSpec(kind="lr", in_dim=dataset.in_dim, n_classes=n_classes)
    server_addr = _addr_from(cfg, "server_addr")
    if server_addr is None:
        raise ConfigError(f"no server_addr in config and no {ENV_ADDR} set")
    client_addr = _addr_from(cfg, "client_addr") or ("127.0.0.1", 0)
    wrapper_cfg = WrapperConfig(
        local_model=handle_from_model(local_model),
        train_dataset=dataset,
        translator=spec,
        client_id=str(cfg["client_id"]),
        clients=[str(c) for c in cfg.get("clients", [])],
        hp=_hp_from(cfg),
        client_addr=client_addr,
        server_addr=server_addr,
        feature_mode=feature_mode,
        threshold=float(cfg.get("threshold", 0.5)),
        fusion_weight=float(cfg.get("fusion_weight", 0.5)),
        token=_token_from(cfg),
    )
    return wrapper_cfg, mode


def save_state(path: Path, cfg: WrapperConfig, state, mode: str) -> None:
    blob = {
        "mode": mode,
        "client_id": cfg.client_id,
        "n_classes": cfg.train_dataset.n_classes,
        "feature_mode": str(cfg.feature_mode),
        "threshold": cfg.threshold,
        "fusion_weight": cfg.fusion_weight,
        "local_model": base64.b64encode(serialize_model(cfg.local_model.core)).decode("ascii"),
    }
    if mode == MODE_STACKING:
        blob["rounds_completed"] = state.rounds_completed
        blob["translator"] = base64.b64encode(serialize_model(state.translator)).decode("ascii")
    else:
        blob["member_ids"] = state.member_ids
        blob["members"] = {
            mid: base64.b64encode(serialize_model(m)).decode("ascii")
            for mid, m in state.peer_models.items()
        }
        blob["fusion"] = base64.b64encode(serialize_model(state.fusion)).decode("ascii")
    path.write_text(json.dumps(blob, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_state(path: Path):
    blob = _read_json(path)

    def model_of(key_or_raw):
        raw = blob[key_or_raw] if isinstance(key_or_raw, str) and key_or_raw in blob else key_or_raw
        return deserialize_model(base64.b64decode(raw))

    local_model = model_of("local_model")
    mode = blob["mode"]
    if mode == MODE_STACKING:
        state = StackingState(
            translator=model_of("translator"),
            rounds_completed=int(blob.get("rounds_completed", 0)),
            finished=True,
        )
    elif mode == MODE_BAGGING:
        state = BaggingState(
            member_ids=list(blob["member_ids"]),
            peer_models={mid: model_of(raw) for mid, raw in blob["members"].items()},
            fusion=model_of("fusion"),
            trained=True,
        )
    else:
        raise ConfigError(f"state file has unknown mode {mode!r}")
    return blob, local_model, state


def cmd_join(args) -> int:
    path = Path(args.config)
    cfg_dict = _read_json(path)
    cfg, mode = _client_config(cfg_dict, path.parent)
    if args.mode:
        mode = args.mode
    state = runtime_join(cfg, mode)
    out = Path(args.out) if args.out else Path.cwd()
    out.mkdir(parents=True, exist_ok=True)
    state_path = out / f"state_{cfg.client_id}.json"
    save_state(state_path, cfg, state, mode)
    print(f"client {cfg.client_id} trained ({mode}); state saved to {state_path}")
    return 0


def cmd_infer(args) -> int:
    blob, local_model, state = load_state(Path(args.state))
    n_classes = int(blob["n_classes"])
    dataset = datamod.read_matrix_csv(args.data, n_classes=n_classes)
    cfg = WrapperConfig(
        local_model=handle_from_model(local_model),
        train_dataset=dataset,
        translator=state.translator.spec
        if isinstance(state, StackingState)
        else ModelSpec(kind="lr", in_dim=dataset.in_dim, n_classes=n_classes),
        client_id=str(blob.get("client_id", "client")),
        clients=[],
        hp=TrainHp(learning_rate=0.0, batch_size=1, local_epochs=1),
        feature_mode=FeatureMode.parse(blob["feature_mode"]),
        threshold=float(blob["threshold"]),
        fusion_weight=float(blob["fusion_weight"]),
    )
    probs, labels = wrapper_infer_batch(cfg, state, dataset.features)
    lines = ["index,label," + ",".join(f"p{c}" for c in range(n_classes))]
    for i, (lab, p) in enumerate(zip(labels, probs)):
        lines.append(f"{i},{int(lab)}," + ",".join(repr(float(v)) for v in p))
    out_text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(out_text, encoding="utf-8")
        print(f"wrote {len(labels)} predictions to {args.out}")
    else:
        sys.stdout.write(out_text)
    return 0


# ---------------------------------------------------------------------------
# simulate / report


def cmd_simulate(args) -> int:
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out) if args.out else Path.cwd() / f"run_{manifest.name}"
    result = run_experiment(manifest, seed=args.seed, out_dir=out_dir)
    agg = result.simulation.report.aggregate
    print(f"experiment {manifest.name!r} seed {result.seed}: report bundle in {out_dir}")
    for kind in ("local", "wrapper"):
        if kind in agg:
            f1 = agg[kind]["f1"]
            acc = agg[kind]["accuracy"]
            print(
                f"  {kind:10s} accuracy {acc[0]:.4f}±{acc[1]:.2f}  f1 {f1[0]:.4f}±{f1[1]:.2f}"
            )
    if result.timing is not None:
        t = result.timing
        print(
            f"  time to local baseline {t.baseline_accuracy:.3f}: wrapper "
            f"{t.wrapper_ms_to_level:.0f} ms vs from-scratch {t.scratch_ms_to_level:.0f} ms"
        )
    return 0


def cmd_report(args) -> int:
    paths = []
    for entry in args.runs:
        p = Path(entry)
        paths.append(p / "report.csv" if p.is_dir() else p)
    table = aggregate_reports(paths)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
        print(f"wrote aggregated table to {args.out}")
    else:
        sys.stdout.write(table)
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedwrap",
        description="Federate existing classifiers via stacking/bagging ensemble wrappers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="split a CSV into per-client shards")
    p.add_argument("csv", help="input CSV with a header row")
    p.add_argument("schema", help="JSON schema mapping column -> numeric|categorical|label")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--clients", type=int, default=10)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--mode", choices=datamod.PARTITION_MODES, default=datamod.MODE_NONIID)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("serve", help="run the coordinator for one federation")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="directory for round_log.csv")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--mode", choices=(MODE_STACKING, MODE_BAGGING), default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("join", help="join a live federation as one client")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="directory for the saved wrapper state")
    p.add_argument("--mode", choices=(MODE_STACKING, MODE_BAGGING), default=None)
    p.set_defaults(func=cmd_join)

    p = sub.add_parser("infer", help="predict with a saved wrapper state")
    p.add_argument("--state", required=True)
    p.add_argument("--data", required=True, help="encoded matrix CSV (as written by partition)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("simulate", help="run a full deterministic experiment from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="aggregate per-seed report tables")
    p.add_argument("runs", nargs="+", help="run directories or report.csv paths")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InterruptedError:
        print("interrupted", file=sys.stderr)
        return 130
    except (ConfigError, IngestionError, InputError, DecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TransportError as exc:
        # Failures to establish the endpoint are usage errors; losses after a
        # federation is underway are experiment failures.
        text = str(exc)
        print(f"error: {text}", file=sys.stderr)
        return 2 if "cannot bind" in text or "cannot reach" in text else 1
    except (FedwrapError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
