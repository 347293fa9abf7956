"""Command line entry point: simulate, featurize, train, recommend, group, replay."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .classifier import (DEFAULT_EPOCHS, DEFAULT_LAMBDA_GRID, BaselineModel, ModelFileError,
                         load_model, save_model, select_lambda)
from .eval import (class_separation_histogram, feature_level_importance, roc_frame,
                   split_dataset, weighted_roc_auc)
from .features import FeatureTable, extract_features, write_feature_order
from .flow_model import FlowParseError, index_configs, label_pairs, read_configs, read_flow_frame
from .grouping import GroupingConstraints, InfeasibleCover, find_min_cover, min_noise_cover, parse_address
from .simgen import SimConfig, generate

log = logging.getLogger("fwreco")

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_INTERNAL = 0, 1, 2, 3


class InputError(Exception):
    """Bad user input; maps to exit code 1."""


@dataclass
class RunManifest:
    command: str
    argv: list
    params: dict
    seeds: dict
    inputs: dict
    outputs: dict
    version: str = __version__
    wall_time_s: float = 0.0
    cwd: str = ""
    extra: dict = field(default_factory=dict)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {path}")
    return p


def _params(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}


def _read_flows(path: str, fmt: str):
    frame, errors = read_flow_frame(_need_file(path, "flow file"), format=fmt, strict=True)
    return frame


def _read_config_file(path: str):
    with open(_need_file(path, "config file"), "rb") as fh:
        return read_configs(fh)


def _parse_endpoint(token: str) -> tuple[str, int]:
    vm, sep, port = token.rpartition(":")
    if not sep or not vm:
        raise InputError(f"endpoint must look like vm_id:port, got {token!r}")
    try:
        return vm, int(port)
    except ValueError:
        raise InputError(f"endpoint port is not an integer in {token!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# --- commands --------------------------------------------------------------------

def cmd_simulate(args) -> RunManifest:
    path = _need_file(args.config, "config file")
    try:
        cfg = SimConfig.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, TypeError) as exc:
        raise InputError(f"{path}: invalid simulation config ({exc})") from exc
    out = generate(cfg)
    paths = out.write(args.out)
    return RunManifest("simulate", [], _params(args), {"seed": cfg.seed},
                       {"config": str(path)}, paths, extra={"config": cfg.to_dict()})


def cmd_featurize(args) -> RunManifest:
    frame = _read_flows(args.flows, args.format)
    configs = _read_config_file(args.configs)
    pairs = label_pairs(frame, configs)
    if args.include_unlabeled:
        endpoints = None
    else:
        endpoints = sorted({p.endpoint for p in pairs})
        if not endpoints:
            raise InputError("no labeled endpoints: every config is default or unmatched")
    table = extract_features(frame, (args.window_start, args.window_end), endpoints=endpoints)
    table = table.attach_labels(pairs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "features.csv", "w", encoding="utf-8", newline="") as fh:
        table.to_csv(fh)
    with open(out / "feature_order.csv", "w", encoding="utf-8", newline="") as fh:
        write_feature_order(fh)
    return RunManifest("featurize", [], _params(args), {}, {"flows": args.flows, "configs": args.configs},
                       {"features": str(out / "features.csv"),
                        "feature_order": str(out / "feature_order.csv")},
                       extra={"rows": len(table), "labeled_rows": int(pd.notna(table.label).sum())})


def cmd_train(args) -> RunManifest:
    table = FeatureTable.from_csv(_need_file(args.features, "feature matrix")).labeled()
    if len(table) == 0:
        raise InputError("feature matrix has no labeled rows")
    train_set, val_set, hold = split_dataset(table, args.split, seed=args.seed)
    for name, part in (("train", train_set), ("validation", val_set), ("holdout", hold)):
        if len(set(part.label)) < 2:
            raise InputError(f"{name} split lacks one of the classes; use more labeled endpoints")
    lam, model, aucs = select_lambda(train_set, val_set, args.lambda_grid, seed=args.seed,
                                     epochs=args.epochs)
    model_path = Path(args.model_out)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, model_path)

    scores = model.decision(hold.X)
    auc_svm, curve = weighted_roc_auc(scores, hold.label, hold.sample_weight)
    # every row of a feature matrix was observed, so the seen-IP baseline is fit on all of them
    baseline = BaselineModel.from_pairs(zip(table.endpoints, table.keys["remote_ip"]))
    base_scores = baseline.score_many(hold.endpoints, hold.keys["remote_ip"])
    auc_base, base_curve = weighted_roc_auc(base_scores, hold.label, hold.sample_weight)

    rep = Path(args.report_out)
    rep.mkdir(parents=True, exist_ok=True)
    outputs = {"model": str(model_path)}
    files = {
        "roc": rep / "roc.csv",
        "roc_baseline": rep / "roc_baseline.csv",
        "histogram": rep / "histogram.csv",
        "level_importance": rep / "level_importance.csv",
        "summary": rep / "summary.json",
    }
    roc_frame(curve).to_csv(files["roc"], index=False, lineterminator="\n", float_format="%.17g")
    roc_frame(base_curve).to_csv(files["roc_baseline"], index=False, lineterminator="\n",
                                 float_format="%.17g")
    class_separation_histogram(scores, hold.label, hold.sample_weight, bins=args.bins).to_csv(
        files["histogram"], index=False, lineterminator="\n", float_format="%.17g")
    try:
        importance = feature_level_importance(model)
        importance.frame().to_csv(files["level_importance"], index=False, lineterminator="\n",
                                  float_format="%.17g")
        attribution = importance.attribution
    except ValueError:
        log.warning("selected model has all-zero feature weights; level importance left empty")
        pd.DataFrame(columns=["level", "side", "percentage"]).to_csv(files["level_importance"], index=False)
        attribution = None
    summary = {
        "auc_svm": auc_svm,
        "auc_baseline": auc_base,
        "auc": auc_svm,
        "lambda": lam,
        "validation_auc": {repr(k): v for k, v in aucs.items()},
        "n_allow": int((hold.label == "allow").sum()),
        "n_deny": int((hold.label == "deny").sum()),
        "n_train": len(train_set),
        "n_validation": len(val_set),
        "n_holdout": len(hold),
        "importance_attribution": attribution,
    }
    with open(files["summary"], "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    outputs.update({k: str(v) for k, v in files.items()})
    return RunManifest("train", [], _params(args), {"seed": args.seed}, {"features": args.features},
                       outputs, extra={"auc_svm": auc_svm, "auc_baseline": auc_base, "lambda": lam})


def _best_cover(ips, cons: GroupingConstraints, width: int):
    """Smallest budget reaching the minimal noise over budgets 1..L."""
    if len(ips) == 0:
        return [], 0, 0
    cover = min_noise_cover(ips, cons.L, cons.S, width)
    return cover.rules(), int(cover.noise), len(cover)


def cmd_recommend(args) -> RunManifest:
    cons = GroupingConstraints(args.L, args.S)
    model = load_model(_need_file(args.model, "model file"))
    frame = _read_flows(args.flows, args.format)
    if frame.empty:
        raise InputError("flow file is empty")
    if (frame["remote_ip"] >= (1 << args.width)).any():
        raise InputError(f"flow file has remote IPs outside the {args.width}-bit space")
    seen = sorted(set(zip(frame["vm_id"], frame["endpoint_port"].astype(int))))
    if args.endpoint:
        targets = sorted(set(_parse_endpoint(e) for e in args.endpoint))
        missing = [e for e in targets if e not in set(seen)]
        if missing:
            raise InputError(f"endpoint(s) not seen in flows: {missing}")
    else:
        table = index_configs(_read_config_file(args.configs)) if args.configs else {}
        targets = [e for e in seen if e not in table or table[e].is_default]
    start = int(frame["timestamp"].min())
    end = max(int(frame["timestamp"].max()) + 1, start + 3600)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    if targets:
        feats = extract_features(frame, (start, end), endpoints=targets)
        allow = model.predict_allow(feats.X)
        ips_all = feats.keys["remote_ip"].to_numpy(dtype=np.int64)
        rows_of: dict = {}
        for i, ep in enumerate(feats.endpoints):
            rows_of.setdefault(ep, []).append(i)
        for ep in targets:
            rows = np.asarray(rows_of.get(ep, []), dtype=int)
            ips = ips_all[rows][allow[rows]] if rows.size else np.array([], dtype=np.int64)
            try:
                rules, noise, used = _best_cover(ips.tolist(), cons, args.width)
            except InfeasibleCover as exc:
                raise InfeasibleCover(f"impossible constraints for endpoint {ep[0]}:{ep[1]} "
                                      f"(L={cons.L}, S={cons.S})") from exc
            lines.append({"vm_id": ep[0], "endpoint_port": ep[1], "rules": rules,
                          "noise": noise, "L_used": used})
    with open(out, "w", encoding="utf-8") as fh:
        for obj in lines:
            fh.write(json.dumps(obj) + "\n")
    return RunManifest("recommend", [], _params(args), {}, {"model": args.model, "flows": args.flows,
                                                             "configs": args.configs},
                       {"rules": str(out)}, extra={"endpoints": len(lines)})


def cmd_group(args) -> RunManifest:
    cons = GroupingConstraints(args.L, args.S)
    path = _need_file(args.ips, "IP list")
    ips = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            ips.append(parse_address(line, args.width))
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from None
    if not ips:
        raise InputError(f"{path}: no addresses")
    cover = find_min_cover(ips, cons.L, cons.S, args.width)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"rules": cover.rules(), "noise": int(cover.noise), "L_used": len(cover)}) + "\n")
    return RunManifest("group", [], _params(args), {}, {"ips": args.ips}, {"rules": str(out)})


def cmd_replay(args) -> RunManifest:
    path = _need_file(args.manifest, "manifest")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        argv = list(doc["argv"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: not a run manifest ({exc})") from None
    if not argv or argv[0] == "replay":
        raise InputError(f"{path}: manifest does not describe a replayable command")
    prev = Path.cwd()
    try:
        if doc.get("cwd"):
            os.chdir(doc["cwd"])
        code = main(argv)
    finally:
        os.chdir(prev)
    if code != EXIT_OK:
        raise SystemExit(code)
    return None


# --- wiring ----------------------------------------------------------------------

def manifest_path(command: str, args) -> Path:
    if command in ("simulate", "featurize"):
        return Path(args.out) / "manifest.json"
    if command == "train":
        return Path(args.report_out) / "manifest.json"
    return Path(str(args.out) + ".manifest.json")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="fwreco", description="Firewall white-list recommender.",
                                formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset", formatter_class=fmt)
    s.add_argument("--config", required=True, help="JSON file of SimConfig fields; missing keys use defaults")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("featurize", help="build the labeled feature matrix", formatter_class=fmt)
    s.add_argument("--flows", required=True, help="flow file")
    s.add_argument("--format", choices=("csv", "jsonl"), default="csv", help="flow file format")
    s.add_argument("--configs", required=True, help="firewall config jsonl")
    s.add_argument("--window-start", type=int, required=True, help="window start, unix seconds (inclusive)")
    s.add_argument("--window-end", type=int, required=True, help="window end, unix seconds (exclusive)")
    s.add_argument("--include-unlabeled", action="store_true",
                   help="also emit rows for endpoints without a non-default config")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("train", help="fit the SVM and write an evaluation report", formatter_class=fmt)
    s.add_argument("--features", required=True, help="feature matrix csv from featurize")
    s.add_argument("--split", type=_float_list, default=[0.6, 0.2, 0.2], help="train,validation,holdout ratios")
    s.add_argument("--seed", type=int, default=0, help="seed for the split and the optimizer")
    s.add_argument("--lambda-grid", type=_float_list, default=list(DEFAULT_LAMBDA_GRID),
                   help="comma-separated regularization candidates")
    s.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS, help="passes over the training set")
    s.add_argument("--bins", type=int, default=20, help="histogram bins")
    s.add_argument("--model-out", required=True, help="model file to write")
    s.add_argument("--report-out", required=True, help="report directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("recommend", help="recommend white-list rules per endpoint", formatter_class=fmt)
    s.add_argument("--model", required=True, help="model file from train")
    s.add_argument("--flows", required=True, help="flow file for the observation window")
    s.add_argument("--format", choices=("csv", "jsonl"), default="csv", help="flow file format")
    s.add_argument("--configs", help="config jsonl; endpoints with a non-default config are skipped "
                                      "by --all-default-endpoints")
    target = s.add_mutually_exclusive_group(required=True)
    target.add_argument("--endpoint", action="append", help="vm_id:port (repeatable)")
    target.add_argument("--all-default-endpoints", action="store_true",
                        help="every endpoint in the flows lacking a non-default config")
    s.add_argument("--L", type=int, default=200, help="maximum number of rules")
    s.add_argument("--S", type=int, default=4096, help="maximum addresses per rule")
    s.add_argument("--width", type=int, default=32, help="address width in bits")
    s.add_argument("--out", required=True, help="rules jsonl to write")
    s.set_defaults(func=cmd_recommend)

    s = sub.add_parser("group", help="minimal-noise cover of an IP list", formatter_class=fmt)
    s.add_argument("--ips", required=True, help="file with one address per line")
    s.add_argument("--L", type=int, default=200, help="maximum number of rules")
    s.add_argument("--S", type=int, default=4096, help="maximum addresses per rule")
    s.add_argument("--width", type=int, default=32, help="address width in bits")
    s.add_argument("--out", required=True, help="rules jsonl to write")
    s.set_defaults(func=cmd_group)

    s = sub.add_parser("replay", help="re-run the command recorded in a manifest", formatter_class=fmt)
    s.add_argument("--manifest", required=True, help="manifest.json from an earlier run")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "width", 32) not in range(1, 33):
        print("error: --width must lie in 1..32", file=sys.stderr)
        return EXIT_INPUT
    t0 = time.perf_counter()
    try:
        manifest = args.func(args)
    except InfeasibleCover as exc:
        msg = str(exc) if "impossible constraints" in str(exc) else f"impossible constraints: {exc}"
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (InputError, FlowParseError, ModelFileError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    if manifest is not None:
        manifest.argv = [a for a in argv if a not in ("-v", "--verbose")]
        manifest.wall_time_s = round(time.perf_counter() - t0, 3)
        manifest.cwd = str(Path.cwd())
        manifest.write(manifest_path(args.command, args))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
