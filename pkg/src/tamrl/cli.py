"""Command-line entry point: ``tamrl VERB [--manifest PATH] [flags] [key=value ...]``.

Exit status is 0 on success, 1 for configuration or data errors and 2 when a
numeric failure (non-finite loss) aborts a run.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import experiment as ex
from .adaptation import VARIANTS, adapt, embeddings, infer_modulated
from .config import ExperimentConfig, parse_override, read_manifest
from .errors import ConfigError, DataError, NumericError, TamrlError
from .gradcheck import COMPONENTS, THRESHOLD, run_suite
from .modulation import export_embeddings
from .synthetic import write_episodes, write_task_manifest
from .training import ModelState, joint_train, load_checkpoint, member_seeds, new_model, pretrain, save_checkpoint
from .numcore import SeededRng
from .windowing import read_results, write_results

log = logging.getLogger("tamrl")

VERBS = ("gradcheck", "synth-gen", "pretrain", "train", "adapt", "eval", "ablate", "export-embeddings", "report")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tamrl", description="Task-aware modulation for few-shot regression.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
    p.add_argument("--manifest", type=Path, help="experiment manifest (YAML)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory (default: runs)")
    p.add_argument("--set", choices=("1", "2", "3"), help="synthetic mode set")
    p.add_argument("--variant", choices=VARIANTS, help="model variant for train/eval")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--corrupt", choices=COMPONENTS, help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> ExperimentConfig:
    overrides = dict(parse_override(o) for o in args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.set is not None:
        overrides["synth.set"] = f"SET{args.set}"
    cfg = read_manifest(args.manifest) if args.manifest else ExperimentConfig()
    return cfg.with_overrides(overrides) if overrides else cfg


class Outputs:
    """Artifact writer that refuses to clobber files unless forced."""

    def __init__(self, root: Path, cfg: ExperimentConfig, force: bool):
        self.root = root
        self.cfg = cfg
        self.force = force
        root.mkdir(parents=True, exist_ok=True)

    @property
    def header(self) -> str:
        return f"# tamrl config={self.cfg.hash()} seed={self.cfg['seed']}\n"

    def path(self, name: str) -> Path:
        p = self.root / name
        if p.exists() and not self.force:
            raise ConfigError(f"refusing to overwrite {p} (pass --force)")
        return p

    def write_rows(self, name: str, columns, rows) -> Path:
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            fh.write(self.header)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            w.writerows(rows)
        log.info("wrote %s", p)
        return p


def _fmt(v: float) -> str:
    return repr(float(v))


# --------------------------------------------------------------------------
# checkpoints on disk


def ckpt_name(prefix: str, seed: int) -> str:
    return f"{prefix}-seed{seed}.npz"


def _members_prefix(variant: str) -> str:
    if variant == "fomaml":
        return "fomaml"
    return "model-nopretrain" if "no-pretrain" in variant else "model"


def load_members(out: Outputs, cfg: ExperimentConfig, variant: str, data: ex.Dataset | None = None,
                 train_missing: bool = False):
    """Trained ensemble for ``variant``, read from ``out``; optionally train the missing members."""
    prefix = _members_prefix(variant)
    members = []
    for s in member_seeds(cfg["seed"], cfg["ensemble.size"]):
        path = out.root / ckpt_name(prefix, s)
        if path.exists():
            members.append(ex.load_fomaml(path, cfg.model_hash()) if prefix == "fomaml"
                           else load_checkpoint(path, cfg.model_hash()))
            continue
        if not train_missing:
            raise DataError(f"missing checkpoint {path}; run `tamrl train` first")
        members.append(_train_one(out, cfg, data, variant, s))
    return members


def _train_one(out: Outputs, cfg, data, variant: str, seed: int):
    prefix = _members_prefix(variant)
    if prefix == "fomaml":
        m = ex.train_fomaml_ensemble(cfg, data, [seed])[0]
        ex.save_fomaml(out.path(ckpt_name(prefix, seed)), m, cfg.model_hash(), data.arch)
        return m
    pre = out.root / ckpt_name("pretrain", seed)
    if prefix == "model" and pre.exists():
        state = load_checkpoint(pre, cfg.model_hash())
        state = joint_train(state, data.source, cfg["train.joint_epochs"], cfg["train.batch_size"], cfg["train.lr"],
                            SeededRng(seed).child(3))
    else:
        state = ex.train_tamrl(cfg, data, pretrain=(prefix == "model"), seeds=[seed])[0]
    save_checkpoint(out.path(ckpt_name(prefix, seed)), state)
    return state


# --------------------------------------------------------------------------
# verbs


def cmd_gradcheck(args, cfg, out):
    results = run_suite(corrupt=args.corrupt)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:14s} max_rel_err={r.max_error:.3e} instances={r.instances} {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise ConfigError(f"gradient check failed (threshold {THRESHOLD:g}) for: {', '.join(failed)}")


def cmd_synth_gen(args, cfg, out):
    if cfg["dataset.kind"] != "synthetic":
        raise ConfigError("synth-gen needs dataset.kind=synthetic")
    for split in ("train", "eval"):
        pairs = ex.synthetic_split(cfg, split)
        write_task_manifest(out.path(f"tasks-{split}.csv"), pairs, out.header)
        write_episodes(out.path(f"episodes-{split}.csv"), [e for _, e in pairs], out.header)
        log.info("wrote %d %s tasks", len(pairs), split)


def cmd_pretrain(args, cfg, out):
    data = ex.build_dataset(cfg)
    rows = []
    for s in member_seeds(cfg["seed"], cfg["ensemble.size"]):
        state = new_model(data.arch, data.scaler, s)
        state.config_hash = cfg.model_hash()
        base, curve = pretrain(state.params.base, data.scaler, *data.pooled, cfg["train.pretrain_epochs"],
                               cfg["train.pretrain_batch_size"], cfg["train.lr"], SeededRng(s).child(2))
        state.params.base = base
        state.pretrain_curve = curve
        state.pretrain_epochs_done = cfg["train.pretrain_epochs"]
        save_checkpoint(out.path(ckpt_name("pretrain", s)), state)
        rows.extend((s, e + 1, _fmt(l)) for e, l in enumerate(curve))
    out.write_rows("pretrain-curve.csv", ("seed", "epoch", "loss"), rows)


def cmd_train(args, cfg, out):
    variant = args.variant or "tamrl"
    data = ex.build_dataset(cfg)
    rows = []
    prefix = _members_prefix(variant)
    for s in member_seeds(cfg["seed"], cfg["ensemble.size"]):
        out.path(ckpt_name(prefix, s))
        m = _train_one(out, cfg, data, variant, s)
        curve = m.curve if prefix == "fomaml" else m.joint_curve
        rows.extend((s, e + 1, _fmt(l)) for e, l in enumerate(curve))
    out.write_rows(f"{prefix}-curve.csv", ("seed", "epoch", "loss"), rows)


def cmd_adapt(args, cfg, out):
    """Fine-tune on each evaluation support set; writes results and support-loss traces."""
    data = ex.build_dataset(cfg)
    variant = args.variant or "tamrl"
    if variant not in ("tamrl", "tamrl-no-pretrain"):
        raise ConfigError("adapt runs the fine-tuning variants (tamrl, tamrl-no-pretrain)")
    members = load_members(out, cfg, variant)
    traces = []
    for budget, batches in data.evals:
        for batch in batches:
            for m in members:
                model = infer_modulated(m, batch.support_x, batch.support_y)
                trace = adapt(model, batch.support_x, batch.support_y, cfg["adapt.steps"], cfg["adapt.lr"])[1]
                for e, eid in enumerate(batch.ids):
                    traces.extend((eid, budget, m.seed, k, _fmt(v)) for k, v in enumerate(trace[:, e]))
    rows, mse = ex.evaluate(cfg, data, variant, members)
    write_results(out.path(f"results-{variant}-adapt.csv"), rows, out.header)
    out.write_rows("adapt-trace.csv", ("entity_id", "budget", "seed", "step", "support_loss"), traces)
    for b, v in mse.items():
        print(f"{b}\t{variant}\tmean_ensemble_mse={v:.6f}")


def cmd_eval(args, cfg, out):
    data = ex.build_dataset(cfg)
    variant = args.variant or "tamrl"
    members = load_members(out, cfg, variant)
    rows, mse = ex.evaluate(cfg, data, variant, members)
    write_results(out.path(f"results-{variant}.csv"), rows, out.header)
    for b, v in mse.items():
        print(f"{b}\t{variant}\tmean_ensemble_mse={v:.6f}")


def cmd_ablate(args, cfg, out):
    """Pretrain x finetune matrix, the unmodulated base and FOMAML. Reuses any
    checkpoints already in the output directory."""
    data = ex.build_dataset(cfg)
    target = out.path("results-ablate.csv")
    rows = []
    for variant in ("tamrl", "tamrl-no-finetune", "tamrl-no-pretrain", "tamrl-no-finetune-no-pretrain", "base", "fomaml"):
        members = load_members(out, cfg, variant, data, train_missing=True)
        r, mse = ex.evaluate(cfg, data, variant, members)
        rows.extend(r)
        for b, v in mse.items():
            print(f"{b}\t{variant}\tmean_ensemble_mse={v:.6f}")
    write_results(target, rows, out.header)


def cmd_export_embeddings(args, cfg, out):
    data = ex.build_dataset(cfg)
    members = load_members(out, cfg, args.variant or "tamrl")
    for m in members:
        ids, zs, budgets = [], [], []
        for budget, batches in data.evals:
            for batch in batches:
                ids.extend(batch.ids)
                budgets.extend([budget] * len(batch))
                zs.append(embeddings(m, batch.support_x, batch.support_y))
        extra = {"budget": budgets}
        if data.kind == "synthetic":
            families = [e.family for _, e in ex.synthetic_split(cfg, "eval")]
            extra["family"] = families
        export_embeddings(out.path(f"embeddings-seed{m.seed}.csv"), ids, np.concatenate(zs), extra, out.header)
        log.info("wrote embeddings for seed %d", m.seed)


def cmd_report(args, cfg, out):
    """Mean ensemble RMSE and MSE per (budget, model) over every results file in --out."""
    files = sorted(p for p in out.root.glob("results-*.csv"))
    if not files:
        raise DataError(f"no results-*.csv files in {out.root}")
    groups = defaultdict(dict)
    for f in files:
        for r in read_results(f):
            if r.seed == "ensemble":
                groups[(r.budget, r.model)][r.entity_id] = r.rmse
    rows = []
    for (budget, model), per in sorted(groups.items()):
        v = np.array(list(per.values()))
        rows.append((budget, model, len(v), _fmt(v.mean()), _fmt(np.mean(v ** 2))))
        print(f"{budget}\t{model}\tn={len(v)}\tmean_ensemble_rmse={v.mean():.6f}\tmean_ensemble_mse={np.mean(v ** 2):.6f}")
    out.write_rows("report.csv", ("budget", "model", "n_entities", "mean_ensemble_rmse", "mean_ensemble_mse"), rows)


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "synth-gen": cmd_synth_gen,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export-embeddings": cmd_export_embeddings,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        log.info("config %s seed=%d: %s", cfg.hash(), cfg["seed"], json.dumps(cfg.as_dict(), sort_keys=True))
        out = Outputs(args.out, cfg, args.force) if args.verb != "gradcheck" else None
        # overflow surfaces as a non-finite loss, which is checked explicitly
        with np.errstate(over="ignore", invalid="ignore"):
            COMMANDS[args.verb](args, cfg, out)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return exc.exit_code
    except TamrlError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except FloatingPointError as exc:
        log.error("numeric failure: %s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
