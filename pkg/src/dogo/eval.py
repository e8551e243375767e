"""Evaluation protocols: linear probe, k-NN, label-fraction fine-tuning, OOD probe.

Every protocol returns an :class:`EvalReport`. Features always come from the
encoder ``f`` (never the projector).
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .augment import resize_images
from .data import LabeledDataset, NoiseSpec, changed_fraction, class_balanced_subsample, corrupt_labels, stratified_split
from .errors import KTooLarge
from .models import PeerModel, parameter_checksum

PROTOCOLS = ("linear", "knn", "finetune", "ood")
DEFAULT_KS = (1, 2, 4, 8)


@dataclass
class EvalReport:
    protocol: str
    checkpoint_id: str
    dataset: str
    top1: float
    seed: int
    epochs: int
    wall_time: float
    label_fraction: Optional[float] = None
    noise_rate: Optional[float] = None
    measured_noise: Optional[float] = None
    train_top1: Optional[float] = None
    per_k: Optional[Dict[str, float]] = None
    model: str = ""
    partner: Optional[str] = None
    mode: str = ""
    lam: Optional[float] = None
    run: str = ""
    reference: Optional[str] = None
    extra: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if not 0.0 <= self.top1 <= 100.0:
            raise ValueError(f"top1 must be a percentage, got {self.top1}")
        if not self.checkpoint_id or not self.dataset:
            raise ValueError("checkpoint_id and dataset are required provenance")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


RESULTS_LEDGER = "results.jsonl"


def append_to_ledger(report: EvalReport, results_dir) -> Path:
    path = Path(results_dir) / RESULTS_LEDGER
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    return path


@dataclass(frozen=True)
class ProbeOptions:
    epochs: int = 100
    lr: float = 3e-4
    weight_decay: float = 1e-6
    batch_size: int = 64
    seed: int = 0
    feature_batch: int = 256


@torch.no_grad()
def extract_features(model: PeerModel, ds: LabeledDataset, batch: int = 256) -> torch.Tensor:
    """Encoder features in evaluation mode; images resized to the encoder input size."""
    was_training = model.training
    model.eval()
    size = model.enc_cfg.image_size
    out = []
    for i in range(0, len(ds), batch):
        x = resize_images(ds.images[i:i + batch], size)
        out.append(model.embed(x))
    model.train(was_training)
    return torch.cat(out) if out else torch.zeros(0, model.feature_dim)


def _accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    if len(labels) == 0:
        return 0.0
    return float((logits.argmax(dim=1) == labels).double().mean()) * 100.0


def train_linear_head(feats: torch.Tensor, labels: torch.Tensor, class_count: int,
                      opts: ProbeOptions) -> nn.Linear:
    gen = torch.Generator().manual_seed(opts.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(opts.seed)
        head = nn.Linear(feats.shape[1], class_count)
    opt = torch.optim.Adam(head.parameters(), lr=opts.lr, weight_decay=opts.weight_decay)
    loss_fn = nn.CrossEntropyLoss()
    n = len(labels)
    for _ in range(opts.epochs):
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, opts.batch_size):
            idx = perm[i:i + opts.batch_size]
            opt.zero_grad(set_to_none=True)
            loss_fn(head(feats[idx]), labels[idx]).backward()
            opt.step()
    return head


def linear_eval(net: PeerModel, train: LabeledDataset, test: LabeledDataset,
                opts: ProbeOptions = ProbeOptions(), *, checkpoint_id: str = "in-memory",
                noise: Optional[NoiseSpec] = None, protocol: str = "linear", **provenance) -> EvalReport:
    """Train an affine classifier on frozen encoder features and report test top-1.

    With ``noise`` the probe's training labels are corrupted; test labels stay
    clean. ``train_top1`` is measured against the (possibly corrupted) labels
    the probe was trained on.
    """
    t0 = time.perf_counter()
    before = parameter_checksum(net)
    measured = None
    if noise is not None:
        noisy = corrupt_labels(train, noise)
        measured = changed_fraction(train, noisy)
        train = noisy
    ftr = extract_features(net, train, opts.feature_batch)
    fte = extract_features(net, test, opts.feature_batch)
    ytr = torch.as_tensor(train.labels)
    yte = torch.as_tensor(test.labels)
    head = train_linear_head(ftr, ytr, train.class_count, opts)
    with torch.no_grad():
        top1 = _accuracy(head(fte), yte)
        train_top1 = _accuracy(head(ftr), ytr)
    if parameter_checksum(net) != before:
        raise RuntimeError("linear evaluation modified encoder parameters")
    return EvalReport(protocol=protocol, checkpoint_id=checkpoint_id, dataset=provenance.pop("dataset", test.name or "unknown"),
                      top1=top1, seed=opts.seed, epochs=opts.epochs, wall_time=time.perf_counter() - t0,
                      noise_rate=None if noise is None else noise.noise_rate, measured_noise=measured,
                      train_top1=train_top1, **provenance)


def knn_predict(train_feats: torch.Tensor, train_labels: torch.Tensor, test_feats: torch.Tensor,
                k: int, class_count: int) -> torch.Tensor:
    """Exact cosine-similarity k-NN.

    Neighbours are ranked by similarity (ties: lower train index first). The
    predicted class has the most votes; vote ties go to the larger summed
    similarity, then to the lower class index.
    """
    n = len(train_labels)
    if k < 1 or k > n:
        raise KTooLarge(f"k={k} must lie in [1, {n}]")
    a = train_feats.double()
    b = test_feats.double()
    a = a / a.norm(dim=1, keepdim=True).clamp_min(1e-12)
    b = b / b.norm(dim=1, keepdim=True).clamp_min(1e-12)
    sims = b @ a.T
    # stable sort on -sim keeps lower indices first among equal similarities
    order = torch.sort(-sims, dim=1, stable=True).indices[:, :k]
    nn_sims = torch.gather(sims, 1, order)
    nn_labels = train_labels[order]
    votes = torch.zeros(len(b), class_count, dtype=torch.float64)
    votes.scatter_add_(1, nn_labels, torch.ones_like(nn_sims))
    sim_sum = torch.zeros(len(b), class_count, dtype=torch.float64)
    sim_sum.scatter_add_(1, nn_labels, nn_sims)
    best = votes.max(dim=1, keepdim=True).values
    sim_sum = torch.where(votes == best, sim_sum, torch.full_like(sim_sum, -float("inf")))
    best_sim = sim_sum.max(dim=1, keepdim=True).values
    # first class attaining both maxima
    winners = (sim_sum == best_sim).to(torch.int64)
    return winners.argmax(dim=1)


def knn_accuracy(train_feats, train_labels, test_feats, test_labels, ks: Sequence[int],
                 class_count: int) -> Dict[int, float]:
    train_labels = torch.as_tensor(np.asarray(train_labels), dtype=torch.int64)
    test_labels = torch.as_tensor(np.asarray(test_labels), dtype=torch.int64)
    out = {}
    for k in ks:
        pred = knn_predict(torch.as_tensor(train_feats), train_labels, torch.as_tensor(test_feats), k, class_count)
        out[int(k)] = float((pred == test_labels).double().mean()) * 100.0
    return out


def knn_eval(net: PeerModel, train: LabeledDataset, test: LabeledDataset, ks: Sequence[int] = DEFAULT_KS,
             *, checkpoint_id: str = "in-memory", seed: int = 0, **provenance) -> EvalReport:
    """Average top-1 of exact k-NN classification over ``ks`` on frozen encoder features."""
    if not ks:
        raise ValueError("ks must be non-empty")
    for k in ks:
        if k < 1 or k > len(train):
            raise KTooLarge(f"k={k} must lie in [1, {len(train)}]")
    t0 = time.perf_counter()
    ftr = extract_features(net, train)
    fte = extract_features(net, test)
    per_k = knn_accuracy(ftr, train.labels, fte, test.labels, ks, train.class_count)
    top1 = float(np.mean(list(per_k.values())))
    return EvalReport(protocol="knn", checkpoint_id=checkpoint_id, dataset=provenance.pop("dataset", test.name or "unknown"),
                      top1=top1, seed=seed, epochs=0, wall_time=time.perf_counter() - t0,
                      per_k={str(k): v for k, v in per_k.items()}, **provenance)


class _Classifier(nn.Module):
    def __init__(self, encoder: nn.Module, feat_dim: int, classes: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(feat_dim, classes)

    def forward(self, x):
        return self.head(self.encoder(x))


@torch.no_grad()
def _classifier_accuracy(clf: _Classifier, ds: LabeledDataset, size: int, batch: int = 256) -> float:
    clf.eval()
    correct = 0
    for i in range(0, len(ds), batch):
        x = resize_images(ds.images[i:i + batch], size)
        correct += int((clf(x).argmax(dim=1) == torch.as_tensor(ds.labels[i:i + batch])).sum())
    return 100.0 * correct / max(1, len(ds))


def finetune_eval(net: PeerModel, train: LabeledDataset, fraction: float, test: LabeledDataset,
                  opts: ProbeOptions = ProbeOptions(epochs=30), *, checkpoint_id: str = "in-memory",
                  val_fraction: float = 0.15, **provenance) -> EvalReport:
    """Fine-tune encoder + linear head on a class-balanced label fraction.

    A stratified ``val_fraction`` of ``train`` is carved out first; the label
    budget is drawn from the remainder. The epoch with the best validation
    top-1 is the one reported on ``test``. The caller's model is not modified.
    """
    t0 = time.perf_counter()
    pool, val = stratified_split(train, val_fraction, opts.seed)
    labeled = class_balanced_subsample(pool, fraction, opts.seed)
    size = net.enc_cfg.image_size
    encoder = copy.deepcopy(net.encoder)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(opts.seed)
        clf = _Classifier(encoder, net.feature_dim, train.class_count)
    opt = torch.optim.Adam(clf.parameters(), lr=opts.lr, weight_decay=opts.weight_decay)
    loss_fn = nn.CrossEntropyLoss()
    gen = torch.Generator().manual_seed(opts.seed)
    n = len(labeled)
    xs = resize_images(labeled.images, size)
    ys = torch.as_tensor(labeled.labels)
    best_val, best_state, best_epoch = -1.0, None, 0
    for epoch in range(1, opts.epochs + 1):
        clf.train()
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, opts.batch_size):
            idx = perm[i:i + opts.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            opt.zero_grad(set_to_none=True)
            loss_fn(clf(xs[idx]), ys[idx]).backward()
            opt.step()
        acc = _classifier_accuracy(clf, val, size)
        if acc > best_val:
            best_val, best_epoch = acc, epoch
            best_state = copy.deepcopy(clf.state_dict())
    clf.load_state_dict(best_state)
    top1 = _classifier_accuracy(clf, test, size)
    extra = {"val_top1": best_val, "best_epoch": best_epoch, "labeled_samples": n,
             "encoder_checksum": parameter_checksum(clf.encoder)}
    return EvalReport(protocol="finetune", checkpoint_id=checkpoint_id, dataset=provenance.pop("dataset", test.name or "unknown"),
                      top1=top1, seed=opts.seed, epochs=opts.epochs, wall_time=time.perf_counter() - t0,
                      label_fraction=fraction, extra=extra, **provenance)


def ood_eval(net: PeerModel, ood_train: LabeledDataset, ood_test: LabeledDataset,
             opts: ProbeOptions = ProbeOptions(epochs=50), **kw) -> EvalReport:
    """Linear probe of a frozen source encoder on another dataset's own train/test split."""
    return linear_eval(net, ood_train, ood_test, opts, protocol="ood", **kw)


def mean_top1(reports: List[EvalReport]) -> float:
    return float(np.mean([r.top1 for r in reports]))
