"""Command-line surface: train, eval, predict, label-reports, split, gradcheck.

Configuration precedence: flags > TOML config file > built-in defaults.  The
fully resolved configuration is echoed into the run directory so any run can
be reproduced from its artifacts."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import re
import sys
import time
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import data as D
from . import labels as L
from . import metrics as M
from .network import NetworkConfig, desk_profile, full_profile, build
from .training import (Checkpoint, TrainConfig, TrainingAborted,
                       ensemble_predict, train)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as f:
        return tomllib.load(f)


def _dataclass_from(cls, section: dict, **flag_overrides):
    known = {f.name for f in dataclasses.fields(cls)}
    merged = {k: v for k, v in section.items() if k in known}
    merged.update({k: v for k, v in flag_overrides.items()
                   if v is not None and k in known})
    return cls(**merged)


def _run_dir(tag: str | None) -> Path:
    root = Path(os.environ.get("SACN_RUN_DIR", "runs"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    name = f"{stamp}-{tag}" if tag else stamp
    path = root / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path, what: str):
    if path is None or not Path(path).exists():
        click.echo(f"error: {what} not found: {path}", err=True)
        sys.exit(2)
    return Path(path)


def _policy(name: str) -> L.Policy:
    return L.Policy(name)


def _load_dataset(rows, policy: L.Policy, input_size, views: str,
                  allow_jpeg: bool, augment_cfg=None, seed=0, epoch=0):
    """Decode manifest rows into (images, targets); U-Ignore drops rows."""
    images, targets = [], []
    for i, row in enumerate(rows):
        if views == "frontal" and row.view is D.View.LATERAL:
            continue
        target = L.apply_policy(row.labels, policy)
        if target is None:
            continue
        if augment_cfg is not None:
            rng = D.sample_rng(seed, epoch, i)
            img = D.train_transform(row.image_path, input_size, augment_cfg,
                                    rng, allow_jpeg=allow_jpeg)
        else:
            img = D.eval_transform(row.image_path, input_size,
                                   allow_jpeg=allow_jpeg)
        images.append(img)
        targets.append(target)
    if not images:
        raise click.ClickException("dataset is empty after filtering")
    return np.stack(images), np.stack(targets)


@click.group()
def main():
    """Self-attention augmented convolutional network toolkit."""


@main.command("train")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--train-manifest", type=click.Path(), default=None)
@click.option("--val-manifest", type=click.Path(), default=None)
@click.option("--manifest", type=click.Path(), default=None,
              help="single manifest, requires --auto-split")
@click.option("--auto-split", is_flag=True)
@click.option("--seed", type=int, default=None)
@click.option("--tag", default=None)
@click.option("--policy", type=click.Choice([p.value for p in L.Policy]),
              default=None)
@click.option("--views", type=click.Choice(["all", "frontal"]), default=None)
@click.option("--profile", type=click.Choice(["desk", "full"]), default=None)
@click.option("--threads", type=int, default=1,
              help="worker cap (current implementation is single-threaded)")
def cmd_train(config_path, train_manifest, val_manifest, manifest, auto_split,
              seed, tag, policy, views, profile, threads):
    """Train a network and keep the best checkpoints in a run directory."""
    cfg = _load_config_file(config_path)
    seed = seed if seed is not None else cfg.get("seed", 0)
    tag = tag or cfg.get("tag")
    policy = _policy(policy or cfg.get("policy", "u-ones"))
    views = views or cfg.get("views", "all")
    profile = profile or cfg.get("profile", "desk")

    factory = full_profile if profile == "full" else desk_profile
    if profile == "full":
        click.echo("warning: the full profile is expensive and is intended "
                   "for structural checks, not desk-scale training", err=True)
    net_cfg = _dataclass_from(NetworkConfig, cfg.get("network", {})) \
        if profile == "desk" else factory(**{
            k: v for k, v in cfg.get("network", {}).items()
            if k in {f.name for f in dataclasses.fields(NetworkConfig)}})
    train_cfg = _dataclass_from(TrainConfig, cfg.get("train", {}), seed=seed)
    aug_cfg = _dataclass_from(D.AugmentConfig, cfg.get("augment", {}))
    allow_jpeg = bool(cfg.get("data", {}).get("allow_jpeg", False))

    data_cfg = cfg.get("data", {})
    train_manifest = train_manifest or data_cfg.get("train_manifest")
    val_manifest = val_manifest or data_cfg.get("val_manifest")
    manifest = manifest or data_cfg.get("manifest")

    if manifest and auto_split:
        rows = D.load_manifest(_require(manifest, "manifest"))
        train_rows, val_rows, _ = D.patient_split(rows, (0.7, 0.1, 0.2), seed)
    else:
        train_rows = D.load_manifest(_require(train_manifest, "train manifest"))
        val_rows = D.load_manifest(_require(val_manifest, "val manifest"))

    run = _run_dir(tag)
    resolved = {
        "seed": seed, "policy": policy.value, "views": views,
        "profile": profile,
        "network": net_cfg.to_dict(),
        "train": dataclasses.asdict(train_cfg),
        "augment": dataclasses.asdict(aug_cfg),
    }
    (run / "config").write_text(json.dumps(resolved, indent=2, sort_keys=True))

    val_set = _load_dataset(val_rows, policy, net_cfg.input_size, views,
                            allow_jpeg)

    def train_loader(epoch: int):
        return _load_dataset(train_rows, policy, net_cfg.input_size, views,
                             allow_jpeg, augment_cfg=aug_cfg, seed=seed,
                             epoch=epoch)

    net = build(net_cfg, seed)
    try:
        kept, _ = train(net, train_loader, val_set, train_cfg,
                        log_path=run / "log.jsonl",
                        checkpoint_dir=run / "checkpoints")
    except TrainingAborted as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(f"run directory: {run}")
    click.echo(f"kept {len(kept)} checkpoints; "
               f"best val mean AUC {kept[0].val_mean_auc:.4f}")


def _load_checkpoints(paths) -> list[Checkpoint]:
    cks = [Checkpoint.load(_require(p, "checkpoint")) for p in paths]
    ref = cks[0].config.to_dict()
    for c in cks[1:]:
        if c.config.to_dict() != ref:
            raise click.ClickException("checkpoint network configs differ")
    return cks


@main.command("eval")
@click.argument("checkpoints", nargs=-1, required=True,
                type=click.Path(exists=True))
@click.option("--manifest", type=click.Path(), required=True)
@click.option("--policy", type=click.Choice([p.value for p in L.Policy]),
              default="u-ones")
@click.option("--views", type=click.Choice(["all", "frontal"]), default="all")
@click.option("--out", type=click.Path(), default=None,
              help="write metrics JSON here")
@click.option("--roc-csv", type=click.Path(), default=None,
              help="write per-class ROC points here")
def cmd_eval(checkpoints, manifest, policy, views, out, roc_csv):
    """Evaluate one checkpoint or a mean-score ensemble on a manifest."""
    cks = _load_checkpoints(checkpoints)
    rows = D.load_manifest(_require(manifest, "manifest"))
    images, targets = _load_dataset(rows, _policy(policy),
                                    cks[0].config.input_size, views, False)
    scores = ensemble_predict(cks, images)
    result = M.evaluate(scores, targets, L.CHEXPERT_LABELS)
    click.echo(result.format_table())
    if out:
        Path(out).write_text(result.to_json())
    if roc_csv:
        with open(roc_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["class", "fpr", "tpr"])
            for name, curve in zip(result.class_names, result.curves):
                for fpr, tpr in (curve or []):
                    w.writerow([name, fpr, tpr])


@main.command("predict")
@click.argument("checkpoints", nargs=-1, required=True,
                type=click.Path(exists=True))
@click.option("--manifest", type=click.Path(), required=True)
@click.option("--views", type=click.Choice(["all", "frontal"]), default="all")
@click.option("--out", type=click.Path(), required=True)
def cmd_predict(checkpoints, manifest, views, out):
    """Write per-image predicted probabilities as CSV."""
    cks = _load_checkpoints(checkpoints)
    rows = D.load_manifest(_require(manifest, "manifest"))
    if views == "frontal":
        rows = [r for r in rows if r.view is not D.View.LATERAL]
    images = np.stack([D.eval_transform(r.image_path, cks[0].config.input_size)
                       for r in rows])
    scores = ensemble_predict(cks, images)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["path"] + L.CHEXPERT_LABELS)
        for row, s in zip(rows, scores):
            w.writerow([row.image_path] + [f"{v:.6f}" for v in s])
    click.echo(f"wrote {len(rows)} predictions to {out}")


_SECTION_RE = re.compile(r"^\s*(findings|impression)\s*:\s*", re.IGNORECASE)


def select_sections(text: str, sections: str) -> str:
    """Keep only the requested report sections; reports without section
    headers pass through unchanged."""
    if sections == "all":
        return text
    wanted = {"impression"} if sections == "impression" else \
        {"findings", "impression"}
    current = None
    kept: list[str] = []
    saw_header = False
    for line in text.splitlines():
        m = _SECTION_RE.match(line)
        if m:
            saw_header = True
            current = m.group(1).lower()
            line = _SECTION_RE.sub("", line)
        if current in wanted and line.strip():
            kept.append(line)
    if not saw_header:
        return text
    return "\n".join(kept)


@main.command("label-reports")
@click.option("--input", "input_path", type=click.Path(exists=True),
              required=True, help="directory of .txt reports or a CSV (id,text)")
@click.option("--rules-file", type=click.Path(exists=True), default=None)
@click.option("--sections",
              type=click.Choice(["impression", "findings+impression", "all"]),
              default="findings+impression")
@click.option("--out", type=click.Path(), required=True)
def cmd_label_reports(input_path, rules_file, sections, out):
    """Run the rule-based labeler and emit a manifest-compatible CSV."""
    lex = L.load_lexicon(rules_file)
    input_path = Path(input_path)
    reports: list[tuple[str, str]] = []
    if input_path.is_dir():
        for p in sorted(input_path.glob("*.txt")):
            reports.append((p.stem, p.read_text(encoding="utf-8")))
    else:
        with open(input_path, newline="", encoding="utf-8") as f:
            for rec in csv.DictReader(f):
                reports.append((rec["id"], rec["text"]))
    with open(out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["id"] + L.CHEXPERT_LABELS)
        for rid, text in reports:
            labels = L.label_report(select_sections(text, sections), lex)
            w.writerow([rid] + [s.to_cell() for s in labels])
    click.echo(f"labeled {len(reports)} reports -> {out}")


@main.command("split")
@click.option("--manifest", type=click.Path(), required=True)
@click.option("--fractions", default="0.7,0.1,0.2",
              help="train,val,test fractions summing to 1")
@click.option("--seed", type=int, default=0)
@click.option("--out-prefix", default="split")
def cmd_split(manifest, fractions, seed, out_prefix):
    """Patient-wise split of a manifest into three CSVs."""
    fracs = tuple(float(x) for x in fractions.split(","))
    rows = D.load_manifest(_require(manifest, "manifest"))
    parts = D.patient_split(rows, fracs, seed)
    for name, part in zip(("train", "val", "test"), parts):
        path = f"{out_prefix}_{name}.csv"
        D.save_manifest(path, part)
        click.echo(f"{path}: {len(part)} rows")


@main.command("gradcheck")
@click.option("--seed", type=int, default=0)
@click.option("--scope", type=click.Choice(["ops", "network", "all"]),
              default="all")
def cmd_gradcheck(seed, scope):
    """Finite-difference check of every op kind and a small network."""
    from .gradcheck import run_suite
    results = run_suite(seed)
    if scope == "ops":
        results = [r for r in results if r.name != "end_to_end_network"]
    elif scope == "network":
        results = [r for r in results if r.name == "end_to_end_network"]
    failed = False
    for r in results:
        status = "ok" if r.ok else "FAIL"
        click.echo(f"{r.name:<28} max rel err {r.max_rel_err:.3e} "
                   f"(tol {r.tolerance:.0e})  {status}")
        failed |= not r.ok
    sys.exit(1 if failed else 0)


if __name__ == "__main__":
    main()
