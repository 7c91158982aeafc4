"""Command-line front end: one subcommand per pipeline stage.

    mimbd gen-data  --config lab.cfg --out runs/lab
    mimbd pretrain  --config lab.cfg --out runs/lab --seed 0 --seed 1
    mimbd attack    --config lab.cfg --out runs/lab
    mimbd probe     --config lab.cfg --out runs/lab
    mimbd evaluate  --config lab.cfg --out runs/lab
    mimbd defend    --config lab.cfg --out runs/lab
    mimbd masksim   --config lab.cfg --out runs/lab
    mimbd report    runs/lab/record.json ... --out runs/tables

Exit codes: 0 success, 2 configuration/input error, 3 numerical abort.
Stages share a content-addressed cache (MIMBD_CACHE overrides its location),
so re-running a stage, or a later stage after an earlier one, reuses work.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .checkpoint import save_checkpoint
from .data import save_dataset
from .errors import MimbdError, NumericsError
from .harness import RunConfig, StageCache, cache_root
from .train_eval import LinearProbe  # noqa: F401  (re-export for probe users)
from .trigger import export_trigger

log = logging.getLogger("mimbd")


def _add_common(p):
    p.add_argument("--config", type=Path, default=None,
                   help="flat key=value config file")
    p.add_argument("--seed", type=int, action="append", default=None,
                   help="run seed; repeat for several")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--force", action="store_true",
                   help="rebuild even when cached results exist")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mimbd", description="desk-scale backdoor lab for masked-image "
                                  "pre-training pipelines")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (
            ("gen-data", "generate or import the train/test datasets"),
            ("pretrain", "pre-train the clean encoder(s)"),
            ("attack", "produce the attack artifact for the configured type"),
            ("probe", "train linear probes on the frozen encoder(s)"),
            ("evaluate", "compute TA/CA/ASR/ASR-B metrics"),
            ("defend", "run the configured detection defenses"),
            ("masksim", "exact trigger-survival numbers under masking"),
    ):
        _add_common(sub.add_parser(name, help=help_))
    rp = sub.add_parser("report", help="aggregate run records into tables")
    rp.add_argument("records", nargs="+", type=Path,
                    help="record.json files produced by evaluate/defend")
    rp.add_argument("--out", type=Path, required=True)
    return ap


def _load_config(args) -> RunConfig:
    mapping = harness.parse_config_file(args.config) if args.config else {}
    return RunConfig.from_mapping(mapping, out=args.out, seeds=args.seed)


def _cmd_gen_data(cfg: RunConfig, force: bool) -> int:
    cache = StageCache(cache_root(cfg))
    train, test, _ = harness._load_data(cfg, cache, force)
    out = cfg.out / "data"
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    print(f"wrote {len(train)} train / {len(test)} test images to {out}")
    return 0


def _cmd_pretrain(cfg: RunConfig, force: bool) -> int:
    cache = StageCache(cache_root(cfg))
    for seed in cfg.seeds:
        ctx = harness._run_seed(cfg, seed, cache, force, stage="pretrain")
        run_dir = cfg.out / "runs" / cfg.run_id(seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ctx["encoder"], run_dir / "encoder.ckpt")
        print(f"seed {seed}: encoder at {run_dir / 'encoder.ckpt'} "
              f"(final loss {ctx['loss_curve'][-1]:.5f})")
    return 0


def _cmd_attack(cfg: RunConfig, force: bool) -> int:
    if cfg.attack == "none":
        print("attack=none: nothing to do")
        return 0
    cache = StageCache(cache_root(cfg))
    for seed in cfg.seeds:
        ctx = harness._run_seed(cfg, seed, cache, force, stage="attack")
        run_dir = cfg.out / "runs" / cfg.run_id(seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        export_trigger(ctx["trigger"], run_dir / "trigger")
        if cfg.attack == "type1":
            poisoned, _ = _poison_downstream(cfg, ctx)
            save_dataset(poisoned, run_dir / "poisoned_downstream")
            print(f"seed {seed}: poisoned downstream set at "
                  f"{run_dir / 'poisoned_downstream'}")
        else:
            save_checkpoint(ctx["bd_model"], run_dir / "backdoored.ckpt")
            print(f"seed {seed}: backdoored encoder at "
                  f"{run_dir / 'backdoored.ckpt'}")
    return 0


def _poison_downstream(cfg, ctx):
    """Type I artifact: the poisoned downstream set (stamp + relabel)."""
    from .trigger import PoisonPlan, poison_labeled
    plan = PoisonPlan(rate=cfg.get_float("poison.downstream.rate"),
                      target_class=cfg.get_int("poison.downstream.target"),
                      trigger=ctx["trigger"], placement=ctx["placement"],
                      flip_label=True)
    return poison_labeled(ctx["train"], plan, ctx["seed"])


def _cmd_probe(cfg: RunConfig, force: bool) -> int:
    cache = StageCache(cache_root(cfg))
    for seed in cfg.seeds:
        ctx = harness._run_seed(cfg, seed, cache, force, stage="probe")
        run_dir = cfg.out / "runs" / cfg.run_id(seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        ctx["probe"].save(run_dir / "probe.npz")
        ctx["clean_probe"].save(run_dir / "probe_clean.npz")
        print(f"seed {seed}: probes at {run_dir}")
    return 0


def _cmd_run(cfg: RunConfig, force: bool, stage: str) -> int:
    record = harness.run(cfg, force=force, stage=stage)
    for entry in record["runs"]:
        if "metrics" in entry:
            m = entry["metrics"]
            parts = [f"{k}={m[k]:.2f}" for k in ("TA", "CA", "ASR", "ASR_B")
                     if m[k] is not None]
            print(f"{entry['run_id']}: " + "  ".join(parts))
        for name, rep in entry.get("detections", {}).items():
            bits = [f"flagged={rep['flagged']}"]
            if rep.get("anomaly_index") is not None:
                bits.append(f"anomaly_index={rep['anomaly_index']:.2f}")
            if rep.get("far") is not None:
                bits.append(f"FAR={rep['far']:.2f} FRR={rep['frr']:.2f}")
            if rep.get("b_score") is not None:
                bits.append(f"B={rep['b_score']:.3f} C={rep['c_score']:.3f}")
            print(f"{entry['run_id']} {name}: " + "  ".join(bits))
    print(f"record: {cfg.out / 'record.json'}")
    return 0


def _cmd_masksim(cfg: RunConfig) -> int:
    rows = harness.masksim(cfg)
    for r in rows:
        print(f"count={r['count']:>2}  covered={r['patches_covered']:>3}  "
              f"survival={r['survival']:.6f}  "
              f"E[visible]={r['expected_visible']:.3f}")
    print(f"wrote {cfg.out / 'masksim.csv'}")
    return 0


def _cmd_report(args) -> int:
    records = []
    for path in args.records:
        records.append(json.loads(Path(path).read_text()))
    text = harness.report(records, args.out)
    print(text, end="")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return _cmd_report(args)
        cfg = _load_config(args)
        if args.command == "gen-data":
            return _cmd_gen_data(cfg, args.force)
        if args.command == "pretrain":
            return _cmd_pretrain(cfg, args.force)
        if args.command == "attack":
            return _cmd_attack(cfg, args.force)
        if args.command == "probe":
            return _cmd_probe(cfg, args.force)
        if args.command == "evaluate":
            return _cmd_run(cfg, args.force, stage="evaluate")
        if args.command == "defend":
            if not cfg.get("defense.list").strip():
                raise MimbdError("defend needs a nonempty defense.list "
                                 "(neural_cleanse, strip, spectral)")
            return _cmd_run(cfg, args.force, stage="defend")
        if args.command == "masksim":
            return _cmd_masksim(cfg)
        raise MimbdError(f"unhandled command {args.command!r}")
    except NumericsError as e:
        log.error("numerical abort: %s", e)
        return 3
    except MimbdError as e:
        log.error("%s", e)
        return 2
    except OSError as e:
        log.error("i/o error: %s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
