"""Command-line entry point: ``dogo {pretrain,eval,sweep,trajectories,report}``.

Exit codes: 0 success, 2 usage error, 3 invalid config, 4 runtime failure,
5 no reports found, 6 run directory already complete (pass ``--force``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from . import config as cfgmod
from .augment import resize_images
from .checkpoint import load_checkpoint
from .data import DatasetSplits, NoiseSpec, class_balanced_subsample, load_dataset
from .errors import (
    CheckpointMissing,
    ConfigInvalid,
    DogoError,
    NoReports,
    RunExists,
    TooFewCheckpoints,
)
from .eval import (
    RESULTS_LEDGER,
    EvalReport,
    ProbeOptions,
    append_to_ledger,
    finetune_eval,
    knn_eval,
    linear_eval,
    ood_eval,
)
from .trainer import PEER_TAGS, checkpoint_path, list_checkpoints, pretrain, set_determinism

log = logging.getLogger("dogo")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_NO_REPORTS, EXIT_EXISTS = 0, 2, 3, 4, 5, 6
RESOLVED = "config.yaml"
STATUS = "status.json"
SWEEP_AXES = {"lambda": "lam", "tau_c": "tau_c", "tau_kd": "tau_kd"}

# paper-scale numbers kept alongside reports as documentation; never asserted
REFERENCES = {
    "linear": "Tiny-ImageNet ResNet-18 linear probe: CL baseline 47.58, DoGo (with ResNet-50) 49.73",
    "finetune": "Tiny-ImageNet ResNet-18, 10% labels: CL 34.23, DoGo 36.07",
    "ood": "Tiny-ImageNet ResNet-18 -> CIFAR-10 probe: CL 72.50, DoGo 75.19",
    "knn": None,
}


# ---------------------------------------------------------------- helpers

def _read_raw(path, overrides: Sequence[str] = ()) -> dict:
    import yaml

    p = Path(path)
    if not p.is_file():
        raise ConfigInvalid("<path>", f"config file {p} not found")
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigInvalid("<root>", f"not valid YAML: {e}") from None
    for ov in overrides:
        if "=" not in ov:
            raise ConfigInvalid(ov, "override must look like section.key=value")
        k, v = ov.split("=", 1)
        raw = cfgmod.set_override(raw, k.strip(), v)
    return raw


def load_splits(cfg: cfgmod.RunConfig, name: Optional[str] = None) -> DatasetSplits:
    """Load the configured dataset (or ``name``) with the configured subsetting applied."""
    d = cfg.data
    splits = load_dataset(name or d.name, d.root)
    train, test = splits.train, splits.test
    if d.train_subset and d.train_subset < len(train):
        train = class_balanced_subsample(train, d.train_subset / len(train), d.subset_seed)
    if d.test_subset and d.test_subset < len(test):
        test = class_balanced_subsample(test, d.test_subset / len(test), d.subset_seed)
    return DatasetSplits(train, test, splits.val)


def run_config(run_dir) -> cfgmod.RunConfig:
    p = Path(run_dir) / RESOLVED
    if not p.is_file():
        raise CheckpointMissing(f"{run_dir} is not a run directory (no {RESOLVED})")
    return cfgmod.load(p, check_data=False)


def _is_complete(run_dir: Path) -> bool:
    s = run_dir / STATUS
    return s.is_file() and json.loads(s.read_text()).get("status") == "complete"


def _write_status(run_dir: Path, status: str, **info) -> None:
    (run_dir / STATUS).write_text(json.dumps({"status": status, **info}, indent=2) + "\n")


def _probe_opts(cfg: cfgmod.RunConfig, epochs: Optional[int] = None) -> ProbeOptions:
    e = cfg.eval
    return ProbeOptions(epochs=e.probe_epochs if epochs is None else epochs, lr=e.lr,
                        weight_decay=e.weight_decay, batch_size=e.probe_batch_size, seed=e.seed)


def _provenance(cfg: cfgmod.RunConfig, run_dir: Path, peer: str, meta: dict) -> dict:
    t = cfg.train
    idx = PEER_TAGS.index(peer)
    partner = None
    if t.mode == "joint":
        partner = t.peer_specs[1 - idx].encoder
    return {"model": t.peer_specs[idx].encoder, "partner": partner, "mode": t.mode, "lam": t.lam,
            "run": str(run_dir), "checkpoint_id": f"{run_dir.name}/{peer}@epoch{meta['epoch']}"}


def load_peer(run_dir, peer: str = "peer1", epoch: Optional[int] = None):
    run_dir = Path(run_dir)
    cfg = run_config(run_dir)
    if epoch is None:
        ckpts = list_checkpoints(run_dir, peer)
        if not ckpts:
            raise CheckpointMissing(f"no {peer} checkpoints under {run_dir}")
        path = ckpts[-1]
    else:
        path = checkpoint_path(run_dir, peer, epoch)
    model, meta, _ = load_checkpoint(path, cfg.train.config_hash())
    return cfg, model, meta


# ---------------------------------------------------------------- commands

def cmd_pretrain(config_path=None, resume=None, out=None, force: bool = False,
                 overrides: Sequence[str] = ()) -> Path:
    """Pre-train per config (or resume ``resume``); returns the run directory."""
    if resume is not None:
        run_dir = Path(resume)
        cfg = run_config(run_dir)
        if config_path is not None:
            given = cfgmod.resolve(_read_raw(config_path, overrides), check_data=False)
            if given.train.config_hash() != cfg.train.config_hash():
                raise ConfigInvalid("train", "config differs from the run being resumed")
        do_resume = bool(list_checkpoints(run_dir))
    else:
        if config_path is None:
            raise ConfigInvalid("<path>", "--config is required")
        cfg = cfgmod.resolve(_read_raw(config_path, overrides))
        run_dir = Path(out or cfg.output.dir)
        if run_dir.exists() and any(run_dir.iterdir()):
            if _is_complete(run_dir) and not force:
                raise RunExists(f"{run_dir} holds a completed run; use --force to overwrite")
            if force or not _is_complete(run_dir):
                shutil.rmtree(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / RESOLVED).write_text(cfgmod.dump(cfg))
        do_resume = False
    if _is_complete(run_dir) and resume is not None:
        raise RunExists(f"{run_dir} is already complete")
    splits = load_splits(cfg)
    _write_status(run_dir, "running")
    try:
        result = pretrain(cfg.train, splits.train, run_dir, resume=do_resume)
    except Exception as e:
        _write_status(run_dir, "failed", error=str(e))
        raise
    _write_status(run_dir, "complete", epochs=cfg.train.epochs, steps=result.state.step,
                  checkpoints=[str(p.name) for p in result.checkpoints])
    log.info("pretrain complete: %s", run_dir)
    return run_dir


def cmd_eval(run_dir, protocol: str, fraction: Optional[float] = None, noise: Optional[float] = None,
             dataset: Optional[str] = None, peer: str = "peer1", epoch: Optional[int] = None,
             force: bool = False, probe_epochs: Optional[int] = None) -> Path:
    """Evaluate one peer checkpoint of a run; writes a report file and appends to the run's ledger."""
    run_dir = Path(run_dir)
    cfg, model, meta = load_peer(run_dir, peer, epoch)
    set_determinism(cfg.train.deterministic)
    tag = protocol
    if fraction is not None:
        tag += f"_frac{fraction:g}"
    if noise is not None:
        tag += f"_noise{noise:g}"
    if dataset is not None:
        tag += f"_{dataset}"
    report_path = run_dir / "reports" / f"{tag}_{peer}_epoch{meta['epoch']:04d}.json"
    if report_path.exists() and not force:
        raise RunExists(f"{report_path} exists; use --force to recompute")
    prov = _provenance(cfg, run_dir, peer, meta)
    prov["reference"] = REFERENCES.get(protocol)
    if protocol == "ood":
        if not dataset:
            raise ConfigInvalid("--dataset", "ood evaluation needs --dataset")
        ood = load_dataset(dataset, cfg.data.root)
        train, test = ood.train, ood.test
        if cfg.data.train_subset and cfg.data.train_subset < len(train):
            train = class_balanced_subsample(train, cfg.data.train_subset / len(train), cfg.data.subset_seed)
        if cfg.data.test_subset and cfg.data.test_subset < len(test):
            test = class_balanced_subsample(test, cfg.data.test_subset / len(test), cfg.data.subset_seed)
        opts = _probe_opts(cfg, cfg.eval.ood_probe_epochs if probe_epochs is None else probe_epochs)
        report = ood_eval(model, train, test, opts, dataset=dataset, **prov)
    else:
        splits = load_splits(cfg, dataset)
        ds_name = dataset or cfg.data.name
        if protocol == "linear":
            spec = NoiseSpec(noise, cfg.eval.seed) if noise is not None else None
            report = linear_eval(model, splits.train, splits.test, _probe_opts(cfg, probe_epochs),
                                 noise=spec, dataset=ds_name, **prov)
        elif protocol == "knn":
            report = knn_eval(model, splits.train, splits.test, cfg.eval.knn_ks, seed=cfg.eval.seed,
                              dataset=ds_name, **prov)
        elif protocol == "finetune":
            opts = _probe_opts(cfg, cfg.eval.finetune_epochs if probe_epochs is None else probe_epochs)
            report = finetune_eval(model, splits.train, 1.0 if fraction is None else fraction, splits.test, opts,
                                   dataset=ds_name, **prov)
        else:
            raise ConfigInvalid("--protocol", f"unknown protocol {protocol!r}")
    report.write(report_path)
    append_to_ledger(report, run_dir)
    log.info("%s top-1 %.2f -> %s", protocol, report.top1, report_path)
    return report_path


def _format_value(v: float) -> str:
    return f"{v:g}"


def _sweep_child(args):
    raw, axis_key, value, child_dir, force = args
    raw = cfgmod.set_override(raw, f"train.{axis_key}", json.dumps(value))
    raw = cfgmod.set_override(raw, "output.dir", json.dumps(str(child_dir)))
    cfg = cfgmod.resolve(raw)
    child_dir = Path(child_dir)
    if not (_is_complete(child_dir) and not force):
        if child_dir.exists():
            shutil.rmtree(child_dir)
        child_dir.mkdir(parents=True)
        (child_dir / RESOLVED).write_text(cfgmod.dump(cfg))
        splits = load_splits(cfg)
        _write_status(child_dir, "running")
        pretrain(cfg.train, splits.train, child_dir)
        _write_status(child_dir, "complete", epochs=cfg.train.epochs)
    splits = load_splits(cfg)
    curves = []
    set_determinism(cfg.train.deterministic)
    for peer in PEER_TAGS[: len(cfg.train.peer_specs)]:
        ckpts = list_checkpoints(child_dir, peer)
        for i, path in enumerate(ckpts):
            model, meta, _ = load_checkpoint(path, cfg.train.config_hash())
            prov = _provenance(cfg, child_dir, peer, meta)
            rep = linear_eval(model, splits.train, splits.test, _probe_opts(cfg), dataset=cfg.data.name, **prov)
            curves.append({"value": value, "peer": peer, "encoder": prov["model"], "epoch": meta["epoch"],
                           "top1": rep.top1})
            if i == len(ckpts) - 1:
                rep.write(child_dir / "reports" / f"linear_{peer}_epoch{meta['epoch']:04d}.json")
                append_to_ledger(rep, child_dir)
    return curves


def cmd_sweep(config_path, axis: str, values: Sequence[float], out=None, force: bool = False,
              overrides: Sequence[str] = ()) -> Path:
    """One child run per value, linear-probe curves per checkpoint, plot and argmax summary."""
    if axis not in SWEEP_AXES:
        raise ConfigInvalid("--axis", f"must be one of {sorted(SWEEP_AXES)}")
    if not values:
        raise ConfigInvalid("--values", "need at least one value")
    raw = _read_raw(config_path, overrides)
    base = cfgmod.resolve(raw)
    sweep_dir = Path(out or (str(base.output.dir) + f"-sweep-{axis}"))
    sweep_dir.mkdir(parents=True, exist_ok=True)
    key = SWEEP_AXES[axis]
    jobs = [(raw, key, float(v), sweep_dir / f"{axis}={_format_value(float(v))}", force) for v in values]
    statuses, curves = {}, []
    if base.output.sweep_parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(base.output.sweep_parallelism) as ex:
            futures = [ex.submit(_sweep_child, j) for j in jobs]
            outcomes = []
            for j, f in zip(jobs, futures):
                try:
                    outcomes.append((j, f.result(), None))
                except Exception as e:  # noqa: BLE001 - reported per child
                    outcomes.append((j, None, e))
    else:
        outcomes = []
        for j in jobs:
            try:
                outcomes.append((j, _sweep_child(j), None))
            except DogoError as e:
                outcomes.append((j, None, e))
    for j, res, err in outcomes:
        statuses[_format_value(j[2])] = "ok" if err is None else f"failed: {err}"
        if res:
            curves.extend(res)

    with open(sweep_dir / "curves.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["value", "peer", "encoder", "epoch", "top1"])
        w.writeheader()
        w.writerows(curves)
    _plot_sweep(curves, axis, sweep_dir / "curves.png")
    summary = _sweep_summary(curves, axis, statuses)
    (sweep_dir / "summary.txt").write_text(summary["text"])
    (sweep_dir / "summary.json").write_text(json.dumps({k: v for k, v in summary.items() if k != "text"}, indent=2))
    print(summary["text"])
    failed = [v for v, s in statuses.items() if s != "ok"]
    if failed:
        raise RuntimeError(f"sweep children failed: {', '.join(failed)} (see {sweep_dir / 'summary.txt'})")
    return sweep_dir


def _final_by_value(curves, peer):
    final = {}
    for c in curves:
        if c["peer"] != peer:
            continue
        if c["value"] not in final or c["epoch"] > final[c["value"]][0]:
            final[c["value"]] = (c["epoch"], c["top1"])
    return {v: t for v, (_, t) in final.items()}


def _sweep_summary(curves, axis, statuses) -> dict:
    lines = [f"sweep over {axis}", f"{axis:>10} | " + " | ".join(f"{p} final top-1" for p in PEER_TAGS) + " | status"]
    per_peer = {p: _final_by_value(curves, p) for p in PEER_TAGS}
    best = {}
    for p, d in per_peer.items():
        if d:
            best[p] = max(d, key=lambda v: (d[v], -v))
    for v, status in statuses.items():
        fv = float(v)
        cells = []
        for p in PEER_TAGS:
            t = per_peer[p].get(fv)
            mark = " *" if best.get(p) == fv else ""
            cells.append("       -      " if t is None else f"{t:12.2f}{mark:2}")
        lines.append(f"{v:>10} | " + " | ".join(cells) + f" | {status}")
    for p, v in best.items():
        lines.append(f"argmax {p}: {axis}={_format_value(v)}")
    return {"axis": axis, "argmax": {p: v for p, v in best.items()}, "status": statuses,
            "final_top1": {p: {_format_value(v): t for v, t in d.items()} for p, d in per_peer.items()},
            "text": "\n".join(lines) + "\n"}


def _plot_sweep(curves, axis, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    peers = sorted({c["peer"] for c in curves}) or ["peer1"]
    fig, axes = plt.subplots(1, len(peers), figsize=(5 * len(peers), 4), squeeze=False)
    for ax, peer in zip(axes[0], peers):
        by_val = defaultdict(list)
        for c in curves:
            if c["peer"] == peer:
                by_val[c["value"]].append((c["epoch"], c["top1"]))
        for v in sorted(by_val):
            pts = sorted(by_val[v])
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{axis}={_format_value(v)}")
        enc = next((c["encoder"] for c in curves if c["peer"] == peer), peer)
        ax.set_title(f"{peer} ({enc})")
        ax.set_xlabel("pre-training epoch")
        ax.set_ylabel("linear probe top-1 (%)")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@torch.no_grad()
def trajectory_points(run_dirs: Sequence, peer: str = "peer1", probe_size: int = 64,
                      seed: int = 0, perplexity: float = 5.0):
    """2-D embedding of every checkpoint's projections of a fixed probe batch.

    Returns ``(points, labels)``: an ``(M, 2)`` array and a list of
    ``(run_index, epoch)`` pairs, one per checkpoint.
    """
    from sklearn.manifold import TSNE

    vectors, labels = [], []
    probe = None
    for r, run_dir in enumerate(run_dirs):
        ckpts = list_checkpoints(run_dir, peer)
        if len(ckpts) < 2:
            raise TooFewCheckpoints(f"{run_dir} has {len(ckpts)} {peer} checkpoint(s); need at least 2")
        cfg = run_config(run_dir)
        if probe is None:
            test = load_splits(cfg).test
            probe = test.images[:probe_size]
        for path in ckpts:
            model, meta, _ = load_checkpoint(path, cfg.train.config_hash())
            model.eval()
            z = model.project(resize_images(probe, model.enc_cfg.image_size))
            vectors.append(z.flatten().double().numpy())
            labels.append((r, int(meta["epoch"])))
    # embed each distinct projection set once so repeated checkpoints coincide exactly
    x, inverse = np.unique(np.stack(vectors), axis=0, return_inverse=True)
    perp = _perplexity(perplexity, len(x))
    emb = TSNE(n_components=2, perplexity=perp, init="pca", random_state=seed, method="exact").fit_transform(x)
    return emb[inverse.reshape(-1)], labels


def _perplexity(requested: float, n: int) -> float:
    return min(requested, max(1.0, (n - 1) / 3.0))


def cmd_trajectories(run_dirs: Sequence, out, peer: str = "peer1", probe_size: int = 64, seed: int = 0,
                     perplexity: float = 5.0) -> Path:
    """Plot one polyline per run through the 2-D embedding of its checkpoints."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    emb, labels = trajectory_points(run_dirs, peer, probe_size, seed, perplexity)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out.with_suffix(".csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run_index", "run_dir", "epoch", "x", "y"])
        for (r, ep), (px, py) in zip(labels, emb):
            w.writerow([r, str(run_dirs[r]), ep, f"{px:.6f}", f"{py:.6f}"])
    meta = {"method": "t-SNE", "seed": seed, "perplexity": _perplexity(perplexity, len(np.unique(emb, axis=0))),
            "probe_size": probe_size, "peer": peer, "runs": [str(r) for r in run_dirs]}
    out.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    fig, ax = plt.subplots(figsize=(6, 5))
    colors = plt.cm.tab10.colors
    for r, run_dir in enumerate(run_dirs):
        pts = np.array([p for p, (ri, _) in zip(emb, labels) if ri == r])
        ax.plot(pts[:, 0], pts[:, 1], "-o", color=colors[r % 10], label=f"trajectory_{r + 1}", markersize=4)
    ax.set_title(f"checkpoint trajectories (t-SNE, seed {seed})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def collect_reports(results_dir) -> List[EvalReport]:
    root = Path(results_dir)
    reports = []
    for ledger in sorted(root.rglob(RESULTS_LEDGER)):
        for line in ledger.read_text().splitlines():
            if line.strip():
                reports.append(EvalReport.from_dict(json.loads(line)))
    return reports


def pct_delta(dogo: float, baseline: float) -> float:
    return (dogo - baseline) / baseline * 100.0


def _is_baseline(r: EvalReport) -> bool:
    # a lambda=0 joint run trains each peer exactly like its single-model baseline
    return r.mode == "single" or (r.lam is not None and r.lam == 0)


def build_report(reports: List[EvalReport]) -> dict:
    """Table-1 style grids of DoGo results with percentage deltas against baselines."""
    if not reports:
        raise NoReports("no evaluation reports found")
    groups = defaultdict(list)
    for r in reports:
        groups[(r.protocol, r.dataset, r.label_fraction, r.noise_rate)].append(r)
    tables = []
    for (protocol, dataset, frac, noise), reps in sorted(groups.items(), key=lambda kv: str(kv[0])):
        base = defaultdict(list)
        for r in reps:
            if _is_baseline(r):
                base[r.model].append(r.top1)
        baseline = {m: float(np.mean(v)) for m, v in base.items()}
        cells = defaultdict(list)
        for r in reps:
            if not _is_baseline(r) and r.partner:
                cells[(r.model, r.partner, r.lam)].append(r.top1)
        entries = []
        for (model, partner, lam), vals in sorted(cells.items(), key=lambda kv: str(kv[0])):
            v = float(np.mean(vals))
            b = baseline.get(model)
            entries.append({"model": model, "partner": partner, "lam": lam, "top1": v, "n": len(vals),
                            "baseline": b, "delta_pct": None if b is None else pct_delta(v, b)})
        tables.append({"protocol": protocol, "dataset": dataset, "label_fraction": frac, "noise_rate": noise,
                       "baseline": baseline, "entries": entries})
    return {"tables": tables, "text": render_report(tables)}


def _fmt_delta(d: Optional[float]) -> str:
    return "  n/a " if d is None else f"{d:+.1f}%"


def render_report(tables: List[dict]) -> str:
    lines = []
    for t in tables:
        head = f"== {t['protocol']} | {t['dataset']}"
        if t["label_fraction"] is not None:
            head += f" | labels {t['label_fraction']:g}"
        if t["noise_rate"] is not None:
            head += f" | noise {t['noise_rate']:g}"
        lines.append(head)
        if t["baseline"]:
            lines.append("baselines: " + ", ".join(f"{m} ({v:.2f})" for m, v in sorted(t["baseline"].items())))
        by_lam = defaultdict(dict)
        for e in t["entries"]:
            by_lam[e["lam"]][(e["model"], e["partner"])] = e
        for lam, cell in sorted(by_lam.items(), key=lambda kv: (kv[0] is None, kv[0])):
            models = sorted({m for pair in cell for m in pair})
            lines.append(f"-- DoGo lambda={lam:g}" if lam is not None else "-- DoGo")

            def label(m):
                b = t["baseline"].get(m)
                return f"{m} ({b:.2f})" if b is not None else f"{m} (-)"

            width = max(24, max(len(label(m)) for m in models) + 2)
            lines.append("Baseline".ljust(width) + "".join(label(m).ljust(width) for m in models))
            for row in models:
                vals, deltas = [], []
                for col in models:
                    a = cell.get((row, col))
                    b = cell.get((col, row))
                    if a is None and b is None:
                        vals.append("".ljust(width))
                        deltas.append("".ljust(width))
                        continue
                    av = f"{a['top1']:.2f}" if a else "-"
                    bv = f"{b['top1']:.2f}" if b else "-"
                    vals.append(f"{av} \\ {bv}".ljust(width))
                    deltas.append(f"{_fmt_delta(a and a['delta_pct'])}  {_fmt_delta(b and b['delta_pct'])}".ljust(width))
                lines.append(label(row).ljust(width) + "".join(vals))
                lines.append("".ljust(width) + "".join(deltas))
        if not t["entries"]:
            lines.append("(no DoGo entries)")
        lines.append("")
    return "\n".join(lines)


def cmd_report(results_dir, out=None) -> dict:
    reports = collect_reports(results_dir)
    rep = build_report(reports)
    out_dir = Path(out) if out else Path(results_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(rep["text"])
    (out_dir / "report.json").write_text(json.dumps({"tables": rep["tables"]}, indent=2))
    print(rep["text"])
    return rep


# ---------------------------------------------------------------- argparse

def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dogo", description="Two-peer online distillation for self-supervised pre-training")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="pre-train from a config (or resume a run)")
    s.add_argument("--config")
    s.add_argument("--resume", metavar="DIR")
    s.add_argument("--out", metavar="DIR", help="run directory (default: output.dir)")
    s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--force", action="store_true")

    s = sub.add_parser("eval", help="evaluate a run's checkpoint")
    s.add_argument("run_dir")
    s.add_argument("--protocol", required=True, choices=["linear", "knn", "finetune", "ood"])
    s.add_argument("--fraction", type=float)
    s.add_argument("--noise", type=float)
    s.add_argument("--dataset")
    s.add_argument("--peer", default="peer1", choices=list(PEER_TAGS))
    s.add_argument("--epoch", type=int)
    s.add_argument("--probe-epochs", type=int)
    s.add_argument("--force", action="store_true")

    s = sub.add_parser("sweep", help="sweep one hyperparameter")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    s.add_argument("--values", required=True, type=_floats)
    s.add_argument("--out", metavar="DIR")
    s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--force", action="store_true")

    s = sub.add_parser("trajectories", help="t-SNE of checkpoint projection trajectories")
    s.add_argument("run_dirs", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--peer", default="peer1", choices=list(PEER_TAGS))
    s.add_argument("--probe-size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--perplexity", type=float, default=5.0)

    s = sub.add_parser("report", help="aggregate evaluation reports")
    s.add_argument("results_dir")
    s.add_argument("--out")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "pretrain":
            if args.config is None and args.resume is None:
                raise ConfigInvalid("--config", "pass --config PATH or --resume DIR")
            print(cmd_pretrain(args.config, args.resume, args.out, args.force, args.overrides))
        elif args.command == "eval":
            print(cmd_eval(args.run_dir, args.protocol, args.fraction, args.noise, args.dataset,
                           args.peer, args.epoch, args.force, args.probe_epochs))
        elif args.command == "sweep":
            print(cmd_sweep(args.config, args.axis, args.values, args.out, args.force, args.overrides))
        elif args.command == "trajectories":
            print(cmd_trajectories(args.run_dirs, args.out, args.peer, args.probe_size, args.seed, args.perplexity))
        elif args.command == "report":
            cmd_report(args.results_dir, args.out)
    except ConfigInvalid as e:
        print(f"config invalid: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NoReports as e:
        print(f"no reports: {e}", file=sys.stderr)
        return EXIT_NO_REPORTS
    except RunExists as e:
        print(f"refusing to overwrite: {e}", file=sys.stderr)
        return EXIT_EXISTS
    except (DogoError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
