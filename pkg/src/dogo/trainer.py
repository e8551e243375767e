"""Joint two-peer training loop (and the single-model baseline).

Each step, every peer encodes its own independently augmented view pair of
the shared image batch, computes its task loss (NT-Xent or SimSiam) and a KD
loss against the other peer's similarity distribution, which is computed
from that peer's pre-step outputs and treated as a constant. Both optimizers
then step (simultaneous update).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .augment import AugmentPolicy, make_view_pairs
from .checkpoint import SUFFIX, load_checkpoint, read_metadata, save_checkpoint
from .data import LabeledDataset
from .errors import CheckpointMissing, NonFiniteLoss
from .losses import KD_REDUCTIONS, combined_objective, kd_loss, nt_xent_loss, similarity_distribution, simsiam_loss
from .models import (
    PeerModel,
    PredictorConfig,
    ProjectorConfig,
    build_peer,
    encoder_preset,
)

log = logging.getLogger(__name__)

PEER_TAGS = ("peer1", "peer2")


@dataclass(frozen=True)
class PeerSpec:
    encoder: str = "conv4"
    objective: str = "contrastive"
    projection_dim: int = 128
    projector_hidden: Optional[int] = None  # defaults to the encoder feature width
    predictor_hidden: Optional[int] = None  # defaults to projection_dim // 4
    small_image_stem: bool = True

    def build(self, image_size: int, seed: int) -> PeerModel:
        enc = encoder_preset(self.encoder, image_size=image_size, small_image_stem=self.small_image_stem)
        proj = ProjectorConfig(self.projector_hidden or enc.feature_dim, self.projection_dim)
        pred = None
        if self.objective == "simsiam":
            pred = PredictorConfig(self.predictor_hidden or max(1, self.projection_dim // 4), self.projection_dim)
        return build_peer(enc, proj, pred, self.objective, seed)


@dataclass(frozen=True)
class TrainConfig:
    peer1: PeerSpec = PeerSpec()
    peer2: Optional[PeerSpec] = PeerSpec("conv8")
    mode: str = "joint"
    lam: float = 100.0
    tau_c: float = 0.5
    tau_kd: float = 0.1
    optimizer: str = "adam"
    lr: float = 3e-4
    weight_decay: float = 1e-6
    batch_size: int = 128
    epochs: int = 50
    seed: int = 0
    checkpoint_every: int = 10
    image_size: int = 32
    augment: AugmentPolicy = AugmentPolicy()
    # both peers draw the same view pairs (used for the P == Q sanity check)
    shared_augmentation: bool = False
    # backpropagate KD through the peer's distribution too (off: detached targets)
    joint_backprop: bool = False
    # linear ramp of lambda over this many epochs; 0 keeps lambda constant
    kd_warmup_epochs: int = 0
    # "pairmean" divides the KL by N^2, "batchmean" by N (see losses.kd_loss)
    kd_reduction: str = "pairmean"
    deterministic: bool = True

    def __post_init__(self):
        if self.mode not in ("joint", "single"):
            raise ValueError(f"mode must be 'joint' or 'single', got {self.mode!r}")
        if self.mode == "joint" and self.peer2 is None:
            raise ValueError("joint mode needs peer2")
        if self.mode == "single" and self.peer2 is not None:
            raise ValueError("single mode takes no peer2")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.tau_c <= 0 or self.tau_kd <= 0:
            raise ValueError("temperatures must be positive")
        if self.kd_reduction not in KD_REDUCTIONS:
            raise ValueError(f"kd_reduction must be one of {KD_REDUCTIONS}")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")
        if self.batch_size < 1 or self.epochs < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size, epochs and checkpoint_every must be positive")

    @property
    def peer_specs(self) -> List[PeerSpec]:
        return [self.peer1] if self.mode == "single" else [self.peer1, self.peer2]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["peer1"] = PeerSpec(**d["peer1"])
        d["peer2"] = PeerSpec(**d["peer2"]) if d.get("peer2") else None
        if "augment" in d:
            d["augment"] = AugmentPolicy.from_dict(d["augment"])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class StepRecord:
    step: int
    epoch: int
    losses: Dict[str, Dict[str, float]]  # peer tag -> {task, kd, total}
    wall_time: float = 0.0

    def log_lines(self) -> List[dict]:
        return [{"step": self.step, "epoch": self.epoch, "peer": tag, "task_loss": v["task"],
                 "kd_loss": v["kd"], "total_loss": v["total"], "wall_time": self.wall_time}
                for tag, v in self.losses.items()]


@dataclass
class TrainState:
    peers: List[PeerModel]
    optimizers: List[torch.optim.Optimizer]
    step: int = 0
    epoch: int = 0


def peer_seed(seed: int, peer_index: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(100, peer_index)).generate_state(1)[0])


def make_optimizer(model: PeerModel, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)


def init_state(config: TrainConfig) -> TrainState:
    peers = [spec.build(config.image_size, peer_seed(config.seed, k)) for k, spec in enumerate(config.peer_specs)]
    return TrainState(peers, [make_optimizer(p, config) for p in peers])


def set_determinism(enabled: bool) -> None:
    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _forward_peer(model: PeerModel, v1: torch.Tensor, v2: torch.Tensor, config: TrainConfig):
    n = v1.shape[0]
    z = model.project(torch.cat([v1, v2]))
    z1, z2 = z[:n], z[n:]
    if model.objective == "simsiam":
        p = model.predictor(z)
        p1, p2 = p[:n], p[n:]
        task = simsiam_loss(p1, z2, p2, z1)
        kd_pair = (p1, p2)  # predictions carry the peer's similarity structure
    else:
        task = nt_xent_loss(z1, z2, config.tau_c)
        kd_pair = (z1, z2)
    return task, kd_pair


def effective_lambda(config: TrainConfig, epoch: int) -> float:
    if config.kd_warmup_epochs > 0:
        return config.lam * min(1.0, epoch / config.kd_warmup_epochs)
    return config.lam


def train_step(state: TrainState, images, indices: Sequence[int], config: TrainConfig,
               epoch: int) -> StepRecord:
    """One simultaneous optimizer step for every peer.

    ``(config.seed, epoch, indices)`` fixes the augmentation draws; peer ``k``
    uses stream ``k`` unless ``shared_augmentation`` is set.
    """
    t0 = time.perf_counter()
    tasks, dists = [], []
    for k, model in enumerate(state.peers):
        model.train()
        stream = 0 if config.shared_augmentation else k
        v1, v2 = make_view_pairs(images, indices, config.augment, config.seed, epoch, stream)
        task, (a, b) = _forward_peer(model, v1, v2, config)
        tasks.append(task)
        if len(state.peers) > 1:
            dists.append(similarity_distribution(a, b, config.tau_kd))

    lam = effective_lambda(config, epoch)
    tags = PEER_TAGS[: len(state.peers)]
    totals, losses = [], {}
    for k, tag in enumerate(tags):
        if len(state.peers) > 1:
            kd = kd_loss(dists[k], dists[1 - k], detach_target=not config.joint_backprop,
                         reduction=config.kd_reduction)
        else:
            kd = torch.zeros((), dtype=tasks[k].dtype)
        try:
            lv = combined_objective(tasks[k], kd, lam)
        except NonFiniteLoss as e:
            diag = {"step": state.step + 1, "epoch": epoch, "peer": tag, **e.diagnostics}
            raise NonFiniteLoss(f"non-finite loss at step {state.step + 1} ({tag}): {diag}", diag) from None
        totals.append(lv.value)
        losses[tag] = lv.components

    for opt in state.optimizers:
        opt.zero_grad(set_to_none=True)
    if config.joint_backprop:
        sum(totals).backward()
    else:
        for total in totals:
            total.backward()
    for opt in state.optimizers:
        opt.step()
    state.step += 1
    return StepRecord(state.step, epoch, losses, time.perf_counter() - t0)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Seeded shuffle of ``range(n)`` cut into full batches (the ragged tail is dropped)."""
    order = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(200, epoch))).permutation(n)
    if n < batch_size:
        return [order]
    return [order[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def checkpoint_path(out_dir, tag: str, epoch: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"{tag}_epoch{epoch:04d}{SUFFIX}"


def list_checkpoints(run_dir, tag: str = "peer1") -> List[Path]:
    return sorted((Path(run_dir) / "checkpoints").glob(f"{tag}_epoch*{SUFFIX}"))


def latest_epoch(run_dir) -> int:
    ckpts = list_checkpoints(run_dir)
    if not ckpts:
        raise CheckpointMissing(f"no checkpoints under {run_dir}")
    return int(read_metadata(ckpts[-1])["epoch"])


@dataclass
class PretrainResult:
    checkpoints: List[Path] = field(default_factory=list)
    log_path: Optional[Path] = None
    records: List[StepRecord] = field(default_factory=list)
    state: Optional[TrainState] = None


def _restore(config: TrainConfig, run_dir: Path, epoch: int) -> TrainState:
    peers, opts = [], []
    step = None
    for k, tag in enumerate(PEER_TAGS[: len(config.peer_specs)]):
        model, meta, opt = load_checkpoint(checkpoint_path(run_dir, tag, epoch), config.config_hash(),
                                           optimizer_factory=lambda m: make_optimizer(m, config))
        peers.append(model)
        opts.append(opt)
        step = meta["step"]
    return TrainState(peers, opts, step=step, epoch=epoch)


def pretrain(config: TrainConfig, dataset: LabeledDataset, out_dir, resume: bool = False,
             on_epoch_end=None) -> PretrainResult:
    """Run (or resume) pre-training, writing checkpoints and a JSON-lines step log to ``out_dir``."""
    set_determinism(config.deterministic)
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "steps.jsonl"
    result = PretrainResult(log_path=log_path)

    if resume:
        start = latest_epoch(out_dir)
        state = _restore(config, out_dir, start)
        # drop log lines written after the checkpoint we resume from
        kept = []
        if log_path.exists():
            kept = [ln for ln in log_path.read_text().splitlines() if ln and json.loads(ln)["step"] <= state.step]
        log_path.write_text("".join(ln + "\n" for ln in kept))
        log.info("resuming from epoch %d (step %d)", start, state.step)
    else:
        state = init_state(config)
        log_path.write_text("")

    images = dataset.images
    tags = PEER_TAGS[: len(state.peers)]
    with open(log_path, "a") as logf:
        for epoch in range(state.epoch + 1, config.epochs + 1):
            for idx in epoch_batches(len(dataset), config.batch_size, config.seed, epoch):
                rec = train_step(state, images[idx], idx, config, epoch)
                result.records.append(rec)
                for line in rec.log_lines():
                    logf.write(json.dumps(line) + "\n")
            logf.flush()
            state.epoch = epoch
            last = result.records[-1].losses if result.records else {}
            log.info("epoch %d/%d %s", epoch, config.epochs,
                     " ".join(f"{t}: task={v['task']:.4f} kd={v['kd']:.4f}" for t, v in last.items()))
            if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
                for tag, model, opt in zip(tags, state.peers, state.optimizers):
                    result.checkpoints.append(save_checkpoint(
                        checkpoint_path(out_dir, tag, epoch), model, config_hash=config.config_hash(),
                        epoch=epoch, step=state.step, seed=config.seed, peer_tag=tag, optimizer=opt,
                        extra={"encoder_name": config.peer_specs[tags.index(tag)].encoder,
                               "mode": config.mode}))
            if on_epoch_end is not None:
                on_epoch_end(epoch, state)
    result.state = state
    return result


def read_step_log(path) -> List[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]


def kd_trend(log_rows: List[dict], peer: str = "peer1", frac: float = 0.1):
    """Median KD loss over the first and last ``frac`` of steps for one peer."""
    kd = [r["kd_loss"] for r in log_rows if r["peer"] == peer]
    k = max(1, int(math.ceil(frac * len(kd))))
    return float(np.median(kd[:k])), float(np.median(kd[-k:]))


def single_config(config: TrainConfig) -> TrainConfig:
    """The baseline counterpart of a joint config: same peer1 and seed, no partner."""
    return replace(config, mode="single", peer2=None)
