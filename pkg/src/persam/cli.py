"""``persam`` command line: gen, train, eval, attend, gradcheck.

Exit codes: 0 ok, 2 usage or input error, 3 non-finite loss, 4 gradient check failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON at byte {e.pos}: {e.msg}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _write_manifest(out: Path, command: str, args: argparse.Namespace, files, **extra) -> Path:
    entry = {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "files": sorted(str(Path(f).relative_to(out)) for f in files),
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(entry, indent=1, sort_keys=True, default=str) + "\n")
    return path


# -- run configuration -------------------------------------------------------

class RunConfig:
    """Model, optimizer and CV settings for train/eval, desk presets plus JSON overrides."""

    def __init__(self, data: dict | None = None):
        from .model import ModelConfig
        from .training import CVConfig, OptimConfig

        data = data or {}
        unknown = set(data) - {"model", "optim", "clinical_optim", "cv", "kinds"}
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        try:
            self.model = ModelConfig.from_dict(_merge(ModelConfig.desk().to_dict(), data.get("model", {})))
            self.optim = OptimConfig.from_dict(_merge(OptimConfig.desk().to_dict(), data.get("optim", {})))
            self.clinical_optim = OptimConfig.from_dict(
                _merge(OptimConfig.clinical_mlp().to_dict(), data.get("clinical_optim", {})))
            self.cv = CVConfig(**_merge(asdict(CVConfig()), data.get("cv", {})))
        except (TypeError, ValueError) as e:
            raise UsageError(f"invalid config: {e}") from None
        self.kinds = list(data.get("kinds", ["persam"]))

    def optim_for(self, kind: str):
        return self.clinical_optim if kind == "clinical_mlp" else self.optim

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "optim": self.optim.to_dict(),
                "clinical_optim": self.clinical_optim.to_dict(), "cv": asdict(self.cv),
                "kinds": self.kinds}


def _load_data(path):
    from .data.io import DatasetFormatError, load_dataset

    if path is None:
        raise UsageError("--data is required")
    try:
        return load_dataset(path)
    except (FileNotFoundError, DatasetFormatError) as e:
        raise UsageError(f"cannot read dataset {path}: {e}") from None


# -- commands ------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .data.io import save_dataset
    from .data.synth import SynthSpec, generate_dataset

    raw = _read_json(args.spec)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid spec: {e}") from None
    ds = generate_dataset(spec)
    save_dataset(ds, args.out)
    labels = ds.labels()
    counts = {int(c): int((labels == c).sum()) for c in np.unique(labels)}
    atypical = sum(c.typicality == "atypical" for c in ds.cases)
    print(f"wrote {len(ds.cases)} cases to {args.out} (seed {spec.seed})")
    print("class counts: " + ", ".join(f"{c}={n}" for c, n in counts.items()))
    print(f"atypical: {atypical}  typical: {len(ds.cases) - atypical}")
    return EXIT_OK


def _run_cv(args, command: str) -> int:
    from .baselines import MODEL_KINDS
    from .checkpoint import from_model, save_checkpoint
    from .training import (NumericalError, cross_validate, format_report, jsonl_writer,
                           model_seed)

    ds = _load_data(args.data)
    cfg = RunConfig(_read_json(args.config))
    if args.seed is not None:
        cfg.cv.seed = args.seed
    kinds = list(MODEL_KINDS) if args.all_models else cfg.kinds
    bad = [k for k in kinds if k not in MODEL_KINDS]
    if bad:
        raise UsageError(f"unknown model kinds {bad}; expected some of {list(MODEL_KINDS)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    log_path = out / "log.jsonl"
    files.append(log_path)

    def on_fold(kind, fi, model, rec, ev):
        ck = from_model(model, epoch=rec.epoch, val_loss=rec.val_loss, rng_state=rec.rng_state,
                        fold=fi, cv=asdict(cfg.cv), model_seed=model_seed(cfg.cv, fi),
                        data=str(Path(args.data).resolve()), test_accuracy=ev.accuracy)
        path = save_checkpoint(ck, out / "checkpoints" / kind / f"fold{fi}")
        files.extend([path / "manifest.json", path / "params.bin"])
        print(f"{kind} fold {fi}: epoch {rec.epoch} val loss {rec.val_loss:.6f} "
              f"test accuracy {ev.accuracy:.4f}", flush=True)

    with open(log_path, "w") as fh:
        log = jsonl_writer(fh)
        log({"command": command, "seed": cfg.cv.seed, "config": cfg.to_dict(), "kinds": kinds})
        try:
            rows, _ = cross_validate(ds, kinds, cfg.model, cfg.optim_for, cfg.cv, log=log, on_fold=on_fold)
        except NumericalError as e:
            log({"error": "non-finite loss", "epoch": e.epoch, "batch": e.batch,
                 "component": e.component})
            print(f"error: {e}", file=sys.stderr)
            _write_manifest(out, command, args, files, status="numeric failure")
            return EXIT_NUMERIC
    report = format_report(rows)
    (out / "report.txt").write_text(report + "\n")
    (out / "results.json").write_text(json.dumps(
        [{"kind": r.kind, "accuracies": r.accuracies, "mean": r.mean, "stderr": r.stderr,
          "stderr_defined": r.stderr_defined} for r in rows], indent=1) + "\n")
    files += [out / "report.txt", out / "results.json"]
    _write_manifest(out, command, args, files, status="ok")
    print(report)
    return EXIT_OK


def cmd_train(args) -> int:
    return _run_cv(args, "train")


def cmd_eval(args) -> int:
    if args.checkpoint is None:
        return _run_cv(args, "eval")
    from .checkpoint import CheckpointError, load_checkpoint
    from .training import CVConfig, cv_folds, evaluate, kind_bagsets

    try:
        ck = load_checkpoint(args.checkpoint)
    except CheckpointError as e:
        raise UsageError(str(e)) from None
    ds = _load_data(args.data)
    cv = CVConfig(**ck.meta["cv"])
    fi = int(ck.meta["fold"])
    _, va, te = kind_bagsets(ck.kind, ds, cv_folds(ds, cv)[fi], cv, fi)
    model = ck.build()
    val, test = evaluate(model, va), evaluate(model, te)
    result = {"kind": ck.kind, "fold": fi, "epoch": ck.epoch, "recorded_val_loss": ck.val_loss,
              "val_loss": val.loss, "val_accuracy": val.accuracy, "test_loss": test.loss,
              "test_accuracy": test.accuracy}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval.json"
    path.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    _write_manifest(out, "eval", args, [path], status="ok")
    print(f"{ck.kind} fold {fi}: val loss {val.loss:.12f} (recorded {ck.val_loss:.12f}) "
          f"test accuracy {test.accuracy:.4f}")
    return EXIT_OK


def cmd_attend(args) -> int:
    from .checkpoint import CheckpointError, load_checkpoint
    from .viz import attention_report, swap_records, write_report

    try:
        ck = load_checkpoint(args.checkpoint)
    except CheckpointError as e:
        raise UsageError(str(e)) from None
    if ck.kind != "persam":
        raise UsageError(f"attention reports need a persam checkpoint, got {ck.kind}")
    ds = _load_data(args.data)
    try:
        case = ds.by_id(args.case)
    except KeyError:
        raise UsageError(f"unknown case {args.case}") from None
    model = ck.build()
    out = Path(args.out)
    files, reports = [], []
    if args.swap_record is None:
        jobs = [("real", None)]
    else:
        rng = np.random.default_rng(args.seed)
        try:
            jobs = swap_records(ds, case, args.swap_record, rng)
        except KeyError as e:
            raise UsageError(str(e.args[0])) from None
    for source, records in jobs:
        rep = attention_report(model, case, records, source)
        prefix = f"case{case.case_id}_" + source.replace(":", "")
        files += write_report(rep, out, prefix)
        reports.append({"prefix": prefix, "record": source, "prediction": rep.prediction,
                        "y_hat": rep.y_hat.tolist()})
        print(f"{prefix}: record {source} -> predicted class {rep.prediction}")
    _write_manifest(out, "attend", args, files, status="ok", reports=reports,
                    grid=list(rep.grid_shape))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_gradcheck, tiny_config
    from .model import ModelConfig

    raw = _read_json(args.config)
    try:
        cfg = ModelConfig.from_dict(_merge(tiny_config().to_dict(), raw.get("model", raw)))
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from None
    report = run_gradcheck(cfg, seed=args.seed, corrupt=args.corrupt_backward)
    print(report.format())
    return EXIT_OK if report.ok else EXIT_GRADCHECK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="persam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--spec", help="JSON file of generator settings (defaults if omitted)")
    g.add_argument("--seed", type=int, help="overrides the seed in --spec")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.set_defaults(func=cmd_gen)

    for name, func in (("train", cmd_train), ("eval", cmd_eval)):
        t = sub.add_parser(name, help=f"{name} with k-fold cross-validation")
        t.add_argument("--data", required=True, help="dataset directory from `persam gen`")
        t.add_argument("--config", help="JSON overrides: model, optim, clinical_optim, cv, kinds")
        t.add_argument("--out", required=True, help="output directory")
        t.add_argument("--seed", type=int, help="overrides cv.seed")
        t.add_argument("--all-models", action="store_true", help="run all six model kinds")
        if name == "eval":
            t.add_argument("--checkpoint", help="re-evaluate a saved checkpoint on its fold")
        t.set_defaults(func=func)

    a = sub.add_parser("attend", help="export attention reports for one case")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--case", type=int, required=True)
    a.add_argument("--swap-record", help="donor case id, or 'class' for one donor per class")
    a.add_argument("--seed", type=int, default=0, help="donor choice for --swap-record class")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attend)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    c.add_argument("--config", help="JSON model overrides (tiny model by default)")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--corrupt-backward", action="store_true",
                   help="negative control: perturb the sigmoid backward rule")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"persam {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
