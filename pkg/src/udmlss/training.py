"""Outer loop: cluster, sample, optimise the joint objective with Adam."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .clustering import PseudoLabelTable, initial_features, kmeans, recluster_embeddings
from .config import ExperimentConfig, from_dict
from .data import (
    STREAM_AUGMENT, STREAM_CLUSTER, STREAM_INIT, STREAM_ROTATION, STREAM_SAMPLE,
    RasterDataset, augment_batch, build_rotation_batch, load_idx, make_rng,
    sample_pk_batch, sample_rotation_indices, synth_dataset,
)
from .errors import FormatError, NumericError
from .losses import combined_loss, metric_loss, rotation_loss, similarity_matrix
from .model import ModelParams, backbone_forward, embed, infer, init_params, rotation_logits
from .tensor import Tensor, take_rows

log = logging.getLogger(__name__)

LOG_KEYS = ("epoch", "loss_ms", "loss_rot", "loss_total", "rot_acc", "pairs_pos", "pairs_neg", "inertia")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam, updating ``params`` (name -> Tensor) in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        dt = p.dtype.type
        m = state.m[name] = dt(beta1) * state.m[name] + dt(1 - beta1) * g
        v = state.v[name] = dt(beta2) * state.v[name] + dt(1 - beta2) * (g * g)
        step = dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))
        p.data = p.data - step
    return state


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int
    history: list[dict] = field(default_factory=list)

    def model(self) -> ModelParams:
        cfg = from_dict(self.config)
        mp = init_params(cfg.backbone_spec, cfg.d_embed, 0, np.dtype(cfg.dtype))
        mp.load_arrays(self.params)
        return mp


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    arrays.update({f"adam_m/{k}": v for k, v in ckpt.adam.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in ckpt.adam.v.items()})
    meta = {"kind": "checkpoint", "config": ckpt.config, "epoch": ckpt.epoch,
            "history": ckpt.history, "adam_t": ckpt.adam.t}
    container.save(path, arrays, meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = container.load(path)
    if not meta or meta.get("kind") != "checkpoint":
        raise FormatError(f"{path}: container does not hold a checkpoint")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    return Checkpoint(meta["config"], group("param/"),
                      AdamState(group("adam_m/"), group("adam_v/"), meta["adam_t"]),
                      meta["epoch"], [{k: row[k] for k in LOG_KEYS} for row in meta["history"]])


def load_data(config: ExperimentConfig) -> tuple[RasterDataset, RasterDataset | None]:
    """Training set and optional held-out set described by the config."""
    if config.dataset == "synth":
        s = config.effective_data_seed
        kw = {"noise": config.synth_noise, "brightness": tuple(config.synth_brightness),
              "contrast": tuple(config.synth_contrast)}
        train = synth_dataset(config.synth_classes, config.synth_per_class, config.image_size, s, split=0, **kw)
        held = None
        if config.synth_heldout_per_class > 0:
            held = synth_dataset(config.synth_classes, config.synth_heldout_per_class, config.image_size, s,
                                 split=1, **kw)
        return train, held
    if not config.idx_images:
        raise FileNotFoundError("idx dataset selected but idx_images is not set")
    train = load_idx(config.idx_images, config.idx_labels)
    held = None
    if config.idx_heldout_images:
        held = load_idx(config.idx_heldout_images, config.idx_heldout_labels)
    return train, held


def _derived_seed(seed: int, stream: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), stream, *keys]).generate_state(1, np.uint64)[0])


def cluster_for_epoch(params: ModelParams, images: np.ndarray, config: ExperimentConfig,
                      epoch: int) -> PseudoLabelTable:
    """Features of the untrained backbone before epoch 0, embeddings afterwards."""
    seed = _derived_seed(config.seed, STREAM_CLUSTER, epoch)
    if epoch == 0:
        table = kmeans(initial_features(params, images), config.k, seed,
                       config.kmeans_max_iter, config.kmeans_tol, workers=config.workers)
        table.epoch_stamp = 0
        return table
    return recluster_embeddings(params, images, config.k, seed, epoch,
                                config.kmeans_max_iter, config.kmeans_tol, config.workers)


def _rotation_images(images, idx, config, epoch, step):
    if config.rot_augment == "none":
        return images[idx]
    return augment_batch(images[idx], config.seed, epoch, step, idx,
                         flip=config.rot_augment == "full", stream=STREAM_ROTATION)


def train_epoch(params: ModelParams, state: AdamState, pseudo: PseudoLabelTable, images: np.ndarray,
                config: ExperimentConfig, epoch: int) -> dict:
    """One pass of P x M metric batches plus rotation batches; returns epoch means."""
    n = images.shape[0]
    n_clusters = int((np.bincount(pseudo.labels, minlength=pseudo.k) > 0).sum())
    P = min(config.P, n_clusters)
    steps = n // (P * config.M)
    if steps < 1:
        raise ValueError(f"{n} samples cannot fill one {P}x{config.M} batch")
    dtype = np.dtype(config.dtype)
    named = params.named()
    hyper = config.hyper
    acc = {"loss_ms": 0.0, "loss_rot": 0.0, "loss_total": 0.0, "rot_acc": 0.0, "pairs_pos": 0.0, "pairs_neg": 0.0}
    for step in range(steps):
        idx = sample_pk_batch(pseudo, P, config.M, make_rng(config.seed, STREAM_SAMPLE, epoch, step))
        x = augment_batch(images[idx], config.seed, epoch, step, idx, stream=STREAM_AUGMENT)
        ridx = sample_rotation_indices(n, config.rot_unique, make_rng(config.seed, STREAM_ROTATION, epoch, step))
        rx, z = build_rotation_batch(_rotation_images(images, ridx, config, epoch, step), range(len(ridx)))

        feats = backbone_forward(params, Tensor(np.concatenate([x, rx]), dtype=dtype))
        f_metric = take_rows(feats, 0, len(idx))
        f_rot = take_rows(feats, len(idx), feats.shape[0])
        S = similarity_matrix(embed(params, f_metric))
        l_ms, pairs = metric_loss(config.loss, S, pseudo.labels[idx], hyper, config.ms_reduction)
        logits = rotation_logits(params, f_rot)
        l_rot = rotation_loss(logits, z)
        total = combined_loss(l_ms, l_rot, config.eta)
        if not np.isfinite(total.item()):
            raise NumericError(f"non-finite loss at epoch {epoch} step {step}")

        params.zero_grad()
        total.backward()
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in named.items()}
        adam_step(named, grads, state, config.lr)

        acc["loss_ms"] += l_ms.item()
        acc["loss_rot"] += l_rot.item()
        acc["loss_total"] += total.item()
        acc["rot_acc"] += float(np.mean(np.argmax(logits.data, axis=1) == z))
        acc["pairs_pos"] += pairs.n_pos
        acc["pairs_neg"] += pairs.n_neg
    return {k: v / steps for k, v in acc.items()}


def _check_writable(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    probe = out_dir / ".write_probe"
    try:
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out_dir} is not writable: {exc}") from exc


def new_model(config: ExperimentConfig) -> ModelParams:
    return init_params(config.backbone_spec, config.d_embed,
                       _derived_seed(config.seed, STREAM_INIT), np.dtype(config.dtype))


def run_training(config: ExperimentConfig, out_dir=None, resume: Checkpoint | None = None,
                 train: RasterDataset | None = None, stop_after: int | None = None):
    """Train for ``config.epochs`` epochs (or until ``stop_after``); returns ``(checkpoint, history)``.

    With ``out_dir`` set, the resolved config, a JSON-lines metric log and
    checkpoints (every ``checkpoint_every`` epochs and at the end) are written there.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        _check_writable(out)
        config.dump(out / "config.json")
    if train is None:
        train, _ = load_data(config)
    images = train.images
    if resume is not None:
        params = resume.model()
        state = AdamState({k: v.copy() for k, v in resume.adam.m.items()},
                          {k: v.copy() for k, v in resume.adam.v.items()}, resume.adam.t)
        history = [dict(h) for h in resume.history]
        start = resume.epoch
    else:
        params = new_model(config)
        state = AdamState.zeros_like(params.named())
        history, start = [], 0
    end = config.epochs if stop_after is None else min(config.epochs, stop_after)
    if out is not None:
        (out / "metrics.jsonl").write_text("".join(json.dumps(h) + "\n" for h in history), encoding="utf-8")

    def snapshot(epoch):
        arrays = {k: t.data.copy() for k, t in params.named().items()}
        adam = AdamState({k: v.copy() for k, v in state.m.items()},
                         {k: v.copy() for k, v in state.v.items()}, state.t)
        return Checkpoint(config.to_dict(), arrays, adam, epoch, [dict(h) for h in history])

    for epoch in range(start, end):
        pseudo = cluster_for_epoch(params, images, config, epoch)
        metrics = train_epoch(params, state, pseudo, images, config, epoch)
        row = {"epoch": epoch + 1, **metrics, "inertia": pseudo.inertia}
        row = {k: row[k] for k in LOG_KEYS}
        history.append(row)
        log.info("epoch %d: %s", epoch + 1, row)
        if out is not None:
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")
            if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == end:
                save_checkpoint(snapshot(epoch + 1), out / "checkpoint.udml")
    return snapshot(max(end, start)), history


def rotation_accuracy(params: ModelParams, images: np.ndarray, batch_size: int = 64) -> float:
    """Fraction of the four quarter turns of every image that the rotation head labels correctly."""
    correct = 0
    total = 0
    for startpos in range(0, images.shape[0], batch_size):
        chunk = images[startpos:startpos + batch_size]
        rx, z = build_rotation_batch(chunk, range(len(chunk)))
        pred = np.argmax(infer(params, rx, batch_size=len(rx), what="rot"), axis=1)
        correct += int((pred == z).sum())
        total += len(z)
    return correct / total


def checkpoint_path(out_dir) -> Path:
    return Path(out_dir) / "checkpoint.udml"


def env_out_dir(default) -> Path:
    return Path(os.environ.get("UDML_OUT") or default)
