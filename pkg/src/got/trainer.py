"""End-to-end multi-task training: momentum SGD with weight decay, the
per-iteration RoI sampling schedule, checkpointing, and reproducibility.

One image per iteration; the RoI sample is the effective batch. The update is

    v <- momentum * v - lr * (grad + weight_decay * theta)
    theta <- theta + v

applied to every parameter after one backward pass over the summed task loss.
"""

from __future__ import annotations

import io
import json
import hashlib
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from . import captionhead, detectnet, retrievalhead
from .config import BackboneConfig, ModelWidths, TrainConfig, backbone_preset, widths_for_preset
from .datasets import AnnotatedImage, Dataset, Vocabulary, encode_caption, tokenize
from .errors import (
    CheckpointCorruptionError,
    CheckpointTaskMismatchError,
    CheckpointVersionError,
    TrainingDivergedError,
    ValidationError,
)
from .geometry import AnchorGrid, nms, roi_align_batch

CHECKPOINT_FORMAT_VERSION = 1
LOSS_HISTORY_TAIL = 100


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

@dataclass
class ModelParams:
    """Every learnable tensor plus the structural facts needed to rebuild the
    forward passes (task, widths, vocabulary, superclass names)."""

    task: str
    mode: str
    widths: ModelWidths
    backbone: BackboneConfig
    superclass_names: tuple[str, ...]
    vocab: Vocabulary
    n_steps: int
    tensors: dict[str, ad.Tensor]

    @property
    def n_superclasses(self) -> int:
        return len(self.superclass_names)

    def astype(self, dtype) -> "ModelParams":
        """Same parameters at a different precision (for gradient checks)."""
        tensors = {k: ad.Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.tensors.items()}
        return ModelParams(self.task, self.mode, self.widths, self.backbone,
                           self.superclass_names, self.vocab, self.n_steps, tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def init_model(config: TrainConfig, vocab: Vocabulary, superclass_names: tuple[str, ...],
               dtype=np.float32) -> ModelParams:
    """Seeded parameter init for the configured task."""
    rng = np.random.default_rng(config.seed)
    widths = config.widths
    backbone = config.backbone
    tensors: dict[str, ad.Tensor] = {}
    tensors.update(detectnet.init_backbone(backbone, rng, dtype))
    grid = anchor_grid_for(config)
    tensors.update(detectnet.init_rpn(backbone.out_channels, grid.anchors_per_cell, rng, dtype))
    tensors.update(detectnet.init_detection_head(widths, backbone.out_channels, len(superclass_names), rng, dtype))
    if config.task == "caption":
        tensors.update(captionhead.init_caption_head(widths, backbone.out_channels, len(vocab), rng,
                                                     mode=config.mode, dtype=dtype))
    else:
        tensors.update(retrievalhead.init_retrieval_head(widths, backbone.out_channels, len(vocab), rng, dtype))
    return ModelParams(config.task, config.mode, widths, backbone, tuple(superclass_names),
                       vocab, config.n_steps, tensors)


def anchor_grid_for(config: TrainConfig) -> AnchorGrid:
    stride = config.backbone.total_stride
    return AnchorGrid(stride=float(stride),
                      scales=tuple(s * stride for s in config.anchor_scales),
                      ratios=tuple(config.anchor_ratios))


def preprocess_image(pixels: np.ndarray, config: TrainConfig) -> tuple[np.ndarray, float]:
    """Resize so the short side hits `image_short_side` (long side capped at
    `image_max_side`); 0 disables resizing. Returns (image, scale)."""
    h, w = pixels.shape[:2]
    if config.image_short_side <= 0:
        return np.asarray(pixels, dtype=np.float32), 1.0
    scale = config.image_short_side / min(h, w)
    if config.image_max_side > 0 and scale * max(h, w) > config.image_max_side:
        scale = config.image_max_side / max(h, w)
    new_w, new_h = int(round(w * scale)), int(round(h * scale))
    img = Image.fromarray((np.clip(pixels, 0, 1) * 255).round().astype(np.uint8))
    resized = np.asarray(img.resize((new_w, new_h), Image.BILINEAR), dtype=np.float32) / 255.0
    return resized, scale


# ---------------------------------------------------------------------------
# training forward pass
# ---------------------------------------------------------------------------

@dataclass
class ForwardResult:
    losses: dict[str, ad.Tensor]
    total: ad.Tensor
    n_positive: int
    diagnostics: dict


def proposal_candidates(rpn_out: detectnet.RpnOutput, config: TrainConfig) -> np.ndarray:
    """NMS the score-sorted proposals and keep the post-NMS budget."""
    keep = nms(rpn_out.proposal_boxes, rpn_out.proposal_scores, config.rpn_nms_threshold,
               max_keep=config.rpn_post_nms)
    return rpn_out.proposal_boxes[keep]


def training_forward(image: AnnotatedImage, params: ModelParams, config: TrainConfig,
                     rng: np.random.Generator) -> ForwardResult:
    """One image through both branches; returns itemized loss tensors."""
    pixels, scale = preprocess_image(image.pixels, config)
    image_size = (pixels.shape[1], pixels.shape[0])
    gt_boxes = np.asarray([o.box for o in image.objects], dtype=np.float64) * scale
    gt_labels = np.asarray([o.superclass_id for o in image.objects], dtype=np.int64)

    fm = detectnet.backbone_forward(pixels, params.tensors, params.backbone)
    grid = anchor_grid_for(config)
    rpn_out = detectnet.rpn_forward(fm, params.tensors, grid, image_size, pre_nms_top_n=config.rpn_pre_nms)
    rpn_obj, rpn_box = detectnet.loss_rpn(
        rpn_out, gt_boxes, image_size, rng,
        n_samples=config.n_anchor_samples, pos_iou=config.rpn_pos_iou, neg_iou=config.rpn_neg_iou)

    candidates = proposal_candidates(rpn_out, config)
    if config.append_gt_rois:
        candidates = np.concatenate([candidates, gt_boxes], axis=0) if len(candidates) else gt_boxes
    rois = detectnet.sample_rois(candidates, gt_boxes, gt_labels, config.n_sample_rois,
                                 config.pos_iou, rng, config.positive_fraction)
    spatial_scale = 1.0 / params.backbone.total_stride
    pooled = roi_align_batch(fm, rois.boxes, spatial_scale, params.widths.pooled_size)
    det_out = detectnet.detection_head(pooled, params.tensors, params.n_superclasses)
    l_loc, l_superclass = detectnet.loss_detection(det_out, rois)

    losses = {"rpn_objectness": rpn_obj, "rpn_box": rpn_box, "loc": l_loc, "superclass": l_superclass}
    pos_idx = np.flatnonzero(rois.positive_mask)
    diagnostics = {"n_rois": len(rois), "n_positive": int(len(pos_idx)), "image_id": image.image_id}

    if len(pos_idx) == 0:
        diagnostics["no_positive_rois"] = True
        zero = ad.Tensor(np.zeros((), dtype=fm.dtype))
        losses["caption" if params.task == "caption" else "retrieval"] = zero
    elif params.task == "caption":
        pooled_pos = ad.take(pooled, pos_idx)
        visual = captionhead.reduce_roi_feature(pooled_pos, params.tensors)
        targets = np.stack([
            encode_caption(
                tokenize(_choose(rng, image.objects[g].captions)), params.vocab, params.n_steps
            ).as_array()
            for g in rois.matched_gt[pos_idx]
        ])
        step_probs = captionhead.caption_forward(visual, targets, params.tensors,
                                                 params.vocab.eoc_index, mode=params.mode)
        losses["caption"] = captionhead.loss_caption(step_probs, targets)
    else:
        obj_index = int(rng.integers(len(image.objects)))
        query_words = tokenize(_choose(rng, image.objects[obj_index].captions))
        query_tokens = encode_caption(query_words, params.vocab, params.n_steps)
        query = retrievalhead.encode_query(query_tokens.as_array(), params.tensors, dtype=fm.dtype)
        pooled_pos = ad.take(pooled, pos_idx)
        roi_feats = retrievalhead.reduce_roi_feature(pooled_pos, params.tensors)
        scores = retrievalhead.retrieval_score(roi_feats, query, params.tensors)
        labels = retrievalhead.build_retrieval_labels(rois, obj_index, len(image.objects))
        losses["retrieval"] = retrievalhead.loss_retrieval(scores, labels.signs[pos_idx])
        diagnostics["query"] = " ".join(query_words)

    total = None
    for term in losses.values():
        total = term if total is None else total + term
    return ForwardResult(losses, total, int(len(pos_idx)), diagnostics)


def _choose(rng: np.random.Generator, items: list):
    return items[int(rng.integers(len(items)))]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def init_velocity(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t.data) for name, t in params.tensors.items()}


def global_gradient_norm(params: ModelParams) -> float:
    total = 0.0
    for t in params.tensors.values():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def sgd_update(params: ModelParams, velocity: dict[str, np.ndarray], learning_rate: float,
               momentum: float, weight_decay: float, grad_clip: float = 0.0) -> None:
    """In-place momentum-SGD step over every tensor with a gradient slot."""
    clip_scale = 1.0
    if grad_clip > 0:
        norm = global_gradient_norm(params)
        if norm > grad_clip:
            clip_scale = grad_clip / norm
    for name, t in params.tensors.items():
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        grad = grad * clip_scale + weight_decay * t.data
        v = momentum * velocity[name] - learning_rate * grad
        velocity[name] = v.astype(t.data.dtype)
        t.data = t.data + velocity[name]


def train_step(image: AnnotatedImage, params: ModelParams, velocity: dict[str, np.ndarray],
               config: TrainConfig, rng: np.random.Generator,
               learning_rate: float | None = None, iteration: int = 0) -> dict[str, float]:
    """Forward both branches, backpropagate the multi-task total, update.

    Returns the itemized loss breakdown (floats); raises
    :class:`TrainingDivergedError` on a non-finite loss.
    """
    params.zero_grad()
    result = training_forward(image, params, config, rng)
    breakdown = {name: float(t.data) for name, t in result.losses.items()}
    breakdown["total"] = float(result.total.data)
    if not np.isfinite(breakdown["total"]):
        raise TrainingDivergedError(
            f"non-finite loss at iteration {iteration}",
            diagnostics={"iteration": iteration, "losses": breakdown,
                         "grad_norm": None, **result.diagnostics})
    result.total.backward()
    grad_norm = global_gradient_norm(params)
    if not np.isfinite(grad_norm):
        raise TrainingDivergedError(
            f"non-finite gradients at iteration {iteration}",
            diagnostics={"iteration": iteration, "losses": breakdown, "grad_norm": grad_norm,
                         **result.diagnostics})
    lr = config.learning_rate if learning_rate is None else learning_rate
    sgd_update(params, velocity, lr, config.momentum, config.weight_decay, config.grad_clip)
    return breakdown


def train(dataset: Dataset, config: TrainConfig, out_dir=None,
          params: ModelParams | None = None, vocab: Vocabulary | None = None,
          log_every: int = 0) -> list["Checkpoint"]:
    """Iterate `train_step` over a seeded image shuffle; checkpoint every
    `config.checkpoint_every` iterations and at the end."""
    if len(dataset) == 0:
        raise ValidationError("training needs a non-empty dataset")
    if vocab is None:
        vocab = dataset.build_vocabulary(config.min_count)
    if params is None:
        params = init_model(config, vocab, dataset.superclass_names)
    _check_model_matches(params, config, vocab, dataset)
    velocity = init_velocity(params)
    rng = np.random.default_rng(config.seed)
    order: list[int] = []
    history: list[float] = []
    checkpoints: list[Checkpoint] = []
    lr = config.learning_rate
    for iteration in range(1, config.iterations + 1):
        if not order:
            order = list(rng.permutation(len(dataset)))
        image = dataset[order.pop(0)]
        if config.lr_step_every > 0 and iteration > 1 and (iteration - 1) % config.lr_step_every == 0:
            lr *= config.lr_step_factor
        breakdown = train_step(image, params, velocity, config, rng,
                               learning_rate=lr, iteration=iteration)
        history.append(breakdown["total"])
        if log_every and iteration % log_every == 0:
            items = " ".join(f"{k}={v:.4f}" for k, v in breakdown.items())
            print(f"iter {iteration}/{config.iterations} {items}")
        if iteration % config.checkpoint_every == 0 or iteration == config.iterations:
            ckpt = Checkpoint.capture(params, config, iteration, history, velocity)
            checkpoints.append(ckpt)
            if out_dir is not None:
                ckpt.save(Path(out_dir) / f"checkpoint-{iteration:06d}.zip")
    return checkpoints


def _check_model_matches(params: ModelParams, config: TrainConfig, vocab: Vocabulary,
                         dataset: Dataset) -> None:
    if params.task != config.task:
        raise ValidationError(f"model task {params.task!r} does not match config task {config.task!r}")
    if tuple(params.vocab.index_to_word) != tuple(vocab.index_to_word):
        raise ValidationError("model vocabulary does not match the dataset vocabulary")
    if params.n_superclasses != dataset.n_superclasses:
        raise ValidationError(
            f"model has {params.n_superclasses} superclasses, dataset declares {dataset.n_superclasses}")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Manifest plus named float32 little-endian tensor blobs."""

    manifest: dict
    tensors: dict[str, np.ndarray] = field(repr=False)

    @staticmethod
    def capture(params: ModelParams, config: TrainConfig, iteration: int,
                history: list[float], velocity: dict[str, np.ndarray] | None = None) -> "Checkpoint":
        tensors = {name: t.data.astype("<f4") for name, t in params.tensors.items()}
        if velocity is not None:
            tensors.update({f"momentum/{name}": v.astype("<f4") for name, v in velocity.items()})
        manifest = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "task": params.task,
            "mode": params.mode,
            "width_preset": params.widths.preset,
            "backbone": params.backbone.name,
            "superclass_names": list(params.superclass_names),
            "vocabulary": list(params.vocab.index_to_word),
            "n_steps": params.n_steps,
            "iteration": iteration,
            "loss_history_tail": [float(v) for v in history[-LOSS_HISTORY_TAIL:]],
            "config": config.to_dict(),
            "tensors": [
                {"name": name, "shape": list(arr.shape), "dtype": "float32-le"}
                for name, arr in sorted(tensors.items())
            ],
        }
        manifest["digest"] = _digest(manifest, tensors)
        return Checkpoint(manifest, tensors)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("manifest.json", json.dumps(self.manifest, sort_keys=True, indent=1))
            for name, arr in sorted(self.tensors.items()):
                zf.writestr(_blob_name(name), arr.astype("<f4").tobytes())
        return path

    @property
    def digest(self) -> str:
        return self.manifest["digest"]

    def to_model(self, dtype=np.float32) -> ModelParams:
        m = self.manifest
        vocab = Vocabulary.from_words(list(m["vocabulary"]))
        tensors = {
            name: ad.Tensor(arr.astype(dtype), requires_grad=True)
            for name, arr in self.tensors.items()
            if not name.startswith("momentum/")
        }
        return ModelParams(
            task=m["task"], mode=m["mode"], widths=widths_for_preset(m["width_preset"]),
            backbone=backbone_preset(m["backbone"]), superclass_names=tuple(m["superclass_names"]),
            vocab=vocab, n_steps=int(m["n_steps"]), tensors=tensors,
        )

    def velocity(self) -> dict[str, np.ndarray] | None:
        vel = {name[len("momentum/"):]: arr for name, arr in self.tensors.items()
               if name.startswith("momentum/")}
        return vel or None


def _blob_name(name: str) -> str:
    return "tensors/" + name.replace("/", "__") + ".bin"


def _digest(manifest: dict, tensors: dict[str, np.ndarray]) -> str:
    """64-bit content hash over the manifest core and all tensor bytes."""
    h = hashlib.blake2b(digest_size=8)
    core = {k: manifest[k] for k in ("format_version", "task", "mode", "iteration", "vocabulary")}
    h.update(json.dumps(core, sort_keys=True).encode())
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].astype("<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(params: ModelParams, config: TrainConfig, path, iteration: int = 0,
                    history: list[float] | None = None,
                    velocity: dict[str, np.ndarray] | None = None) -> Path:
    return Checkpoint.capture(params, config, iteration, history or [], velocity).save(path)


def load_checkpoint(path, expected_task: str | None = None) -> Checkpoint:
    """Read and verify a checkpoint archive.

    Raises :class:`CheckpointVersionError` for unknown format versions,
    :class:`CheckpointCorruptionError` for truncated archives or digest
    mismatches, and :class:`CheckpointTaskMismatchError` when `expected_task`
    does not match.
    """
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            version = manifest.get("format_version")
            if version != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointVersionError(
                    f"{path}: format version {version!r} unsupported (want {CHECKPOINT_FORMAT_VERSION})")
            tensors = {}
            for entry in manifest["tensors"]:
                name, shape = entry["name"], tuple(entry["shape"])
                raw = zf.read(_blob_name(name))
                arr = np.frombuffer(raw, dtype="<f4")
                if arr.size != int(np.prod(shape)):
                    raise CheckpointCorruptionError(f"{path}: tensor {name} has {arr.size} values, expected shape {shape}")
                tensors[name] = arr.reshape(shape).copy()
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, EOFError) as e:
        raise CheckpointCorruptionError(f"{path}: unreadable checkpoint archive: {e}") from e
    if _digest(manifest, tensors) != manifest.get("digest"):
        raise CheckpointCorruptionError(f"{path}: content digest mismatch")
    if expected_task is not None and manifest["task"] != expected_task:
        raise CheckpointTaskMismatchError(
            f"{path}: checkpoint is for task {manifest['task']!r}, expected {expected_task!r}")
    return Checkpoint(manifest, tensors)
