"""Inference pipelines (detect+caption, retrieve) and the metric suite:
corpus BLEU-1..4, ROUGE-L, CIDEr, and R@1.

Detection inference: top proposals -> detection head -> per-class NMS -> keep
classification score above the threshold, falling back to the single best box
when nothing clears it. Retrieval inference: top proposals -> NMS -> score
every candidate against the encoded query -> argmax (ties: lower candidate
index). Boxes are reported in original image pixels.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import captionhead, detectnet, retrievalhead
from .config import TrainConfig
from .datasets import AnnotatedImage, Dataset, encode_caption, tokenize
from .errors import ValidationError
from .geometry import decode_deltas, iou, nms, roi_align_batch
from .trainer import ModelParams, anchor_grid_for, preprocess_image


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _as_pixels(image) -> np.ndarray:
    if isinstance(image, AnnotatedImage):
        return image.pixels
    pixels = np.asarray(image, dtype=np.float32)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValidationError(f"expected an HxWx3 image, got shape {pixels.shape}")
    return pixels


def _forward_candidates(pixels: np.ndarray, params: ModelParams, config: TrainConfig):
    """Backbone + proposal head; returns (feature_map, candidate boxes in
    network pixels, scale back to original pixels).

    Candidates are the top proposals by objectness, optionally gated by the
    configured objectness floor (with the single best proposal kept when
    nothing clears it, so downstream fallbacks always have a candidate)."""
    resized, scale = preprocess_image(pixels, config)
    image_size = (resized.shape[1], resized.shape[0])
    fm = detectnet.backbone_forward(resized, params.tensors, params.backbone)
    grid = anchor_grid_for(config)
    rpn_out = detectnet.rpn_forward(fm, params.tensors, grid, image_size,
                                    pre_nms_top_n=config.inference_top_n)
    boxes = rpn_out.proposal_boxes
    scores = rpn_out.proposal_scores
    if config.objectness_floor > 0 and len(boxes):
        mask = scores >= config.objectness_floor
        if mask.any():
            boxes, scores = boxes[mask], scores[mask]
        else:
            boxes, scores = boxes[:1], scores[:1]
    return fm, boxes, scores, image_size, scale


def _pool(fm, boxes, params: ModelParams):
    return roi_align_batch(fm, boxes, 1.0 / params.backbone.total_stride, params.widths.pooled_size)


# ---------------------------------------------------------------------------
# detect + caption
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectedObject:
    box: tuple[float, float, float, float]
    superclass_id: int
    superclass: str
    score: float
    caption_token_ids: tuple[int, ...]
    caption: str


@dataclass(frozen=True)
class DetectionResult:
    objects: tuple[DetectedObject, ...]
    fallback_used: bool

    def __post_init__(self):
        if not self.objects:
            raise ValidationError("DetectionResult must contain at least one object")


def detect_and_caption(image, params: ModelParams, config: TrainConfig) -> DetectionResult:
    """Detect, classify, and caption; always returns at least one object."""
    if params.task != "caption":
        raise ValidationError(f"detect_and_caption needs a caption-task model, got {params.task!r}")
    pixels = _as_pixels(image)
    fm, proposals, _, image_size, scale = _forward_candidates(pixels, params, config)
    if len(proposals) == 0:
        raise ValidationError("no proposals survived decoding")
    pooled = _pool(fm, proposals, params)
    det = detectnet.detection_head(pooled, params.tensors, params.n_superclasses)
    scores_all = det.class_scores()  # (n, K+1)
    k = params.n_superclasses
    cls = scores_all[:, :k].argmax(axis=1)
    cls_score = scores_all[np.arange(len(proposals)), cls]
    deltas = det.box_deltas.data.reshape(len(proposals), k + 1, 4)
    picked = deltas[np.arange(len(proposals)), cls].astype(np.float64)
    refined = decode_deltas(proposals, picked, image_size=image_size)
    valid = (refined[:, 2] - refined[:, 0] > 1e-3) & (refined[:, 3] - refined[:, 1] > 1e-3)
    idx = np.flatnonzero(valid)
    if len(idx) == 0:
        idx = np.array([int(np.argmax(cls_score))])
        refined[idx[0]] = proposals[idx[0]]

    # class-wise suppression over the refined, scored boxes
    kept: list[int] = []
    for c in range(k):
        members = idx[cls[idx] == c]
        if len(members) == 0:
            continue
        keep = nms(refined[members], cls_score[members], config.nms_threshold)
        kept.extend(int(members[i]) for i in keep)
    kept.sort(key=lambda i: (-cls_score[i], i))
    chosen = [i for i in kept if cls_score[i] > config.score_threshold]
    fallback = len(chosen) == 0
    if fallback:
        chosen = [kept[0]]

    pooled_kept = _pool(fm, refined[chosen], params)
    visual = captionhead.reduce_roi_feature(pooled_kept, params.tensors)
    objects = []
    for row, i in enumerate(chosen):
        decoded = captionhead.greedy_decode(
            ad.Tensor(visual.data[row]), params.tensors, params.vocab,
            max_steps=params.n_steps, mode=params.mode)
        words = decoded.words(params.vocab)
        objects.append(DetectedObject(
            box=tuple(float(v) for v in refined[i] / scale),
            superclass_id=int(cls[i]),
            superclass=params.superclass_names[int(cls[i])],
            score=float(cls_score[i]),
            caption_token_ids=decoded.token_ids,
            caption=" ".join(words),
        ))
    return DetectionResult(tuple(objects), fallback)


# ---------------------------------------------------------------------------
# retrieve
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalCandidate:
    box: tuple[float, float, float, float]
    retrieval_score: float
    superclass_id: int
    superclass: str


@dataclass(frozen=True)
class RetrievalResult:
    chosen: RetrievalCandidate
    candidates: tuple[RetrievalCandidate, ...]
    query_tokens: tuple[int, ...]
    all_unknown: bool


def retrieve(image, query_words: list[str], params: ModelParams, config: TrainConfig) -> RetrievalResult:
    """Localize the object a natural-language query refers to."""
    if params.task != "retrieval":
        raise ValidationError(f"retrieve needs a retrieval-task model, got {params.task!r}")
    if not query_words:
        raise ValidationError("query must not be empty")
    pixels = _as_pixels(image)
    fm, proposals, proposal_scores, image_size, scale = _forward_candidates(pixels, params, config)
    if len(proposals) == 0:
        raise ValidationError("no proposals survived decoding")
    keep = nms(proposals, proposal_scores, config.nms_threshold)
    boxes = proposals[keep]

    tokens = encode_caption(query_words, params.vocab, params.n_steps)
    content = tokens.as_array()[: max(1, tokens.content_length())]
    all_unknown = bool(np.all(content == params.vocab.unk_index))
    query = retrievalhead.encode_query(tokens.as_array(), params.tensors, dtype=fm.dtype)

    pooled = _pool(fm, boxes, params)
    feats = retrievalhead.reduce_roi_feature(pooled, params.tensors)
    raw = retrievalhead.retrieval_score(feats, query, params.tensors).data.astype(np.float64)
    prob = 1.0 / (1.0 + np.exp(-raw))

    det = detectnet.detection_head(pooled, params.tensors, params.n_superclasses)
    scores_all = det.class_scores()
    k = params.n_superclasses
    cls = scores_all[:, :k].argmax(axis=1)
    deltas = det.box_deltas.data.reshape(len(boxes), k + 1, 4)
    picked = deltas[np.arange(len(boxes)), cls].astype(np.float64)
    refined = decode_deltas(boxes, picked, image_size=image_size)
    bad = (refined[:, 2] - refined[:, 0] <= 1e-3) | (refined[:, 3] - refined[:, 1] <= 1e-3)
    refined[bad] = boxes[bad]

    candidates = tuple(
        RetrievalCandidate(
            box=tuple(float(v) for v in refined[i] / scale),
            retrieval_score=float(prob[i]),
            superclass_id=int(cls[i]),
            superclass=params.superclass_names[int(cls[i])],
        )
        for i in range(len(boxes))
    )
    chosen_index = int(np.argmax(raw))  # ties resolve to the lower index
    return RetrievalResult(candidates[chosen_index], candidates, tuple(int(t) for t in tokens.token_ids),
                           all_unknown)


# ---------------------------------------------------------------------------
# caption metrics
# ---------------------------------------------------------------------------

def _ngrams(words: list[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def _check_corpus(candidates, references):
    if len(candidates) == 0:
        raise ValidationError("metric needs a non-empty corpus")
    if len(candidates) != len(references):
        raise ValidationError(f"{len(candidates)} candidates vs {len(references)} reference sets")


def bleu_n(candidates: list[list[str]], references: list[list[list[str]]], n: int) -> float:
    """Corpus-level BLEU with modified n-gram precision and brevity penalty
    (geometric mean of orders 1..n, closest-reference length, shorter on ties)."""
    if not 1 <= n <= 4:
        raise ValidationError("bleu order must lie in 1..4")
    _check_corpus(candidates, references)
    matched = np.zeros(n)
    total = np.zeros(n)
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_len += len(cand)
        if refs:
            lengths = sorted(len(r) for r in refs)
            ref_len += min(lengths, key=lambda L: (abs(L - len(cand)), L))
        for order in range(1, n + 1):
            counts = _ngrams(cand, order)
            max_ref = Counter()
            for ref in refs:
                for gram, c in _ngrams(ref, order).items():
                    max_ref[gram] = max(max_ref[gram], c)
            matched[order - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[order - 1] += sum(counts.values())
    if cand_len == 0 or np.any(matched == 0):
        return 0.0
    log_precision = np.mean(np.log(matched / total))
    brevity = 1.0 if cand_len > ref_len else float(np.exp(1.0 - ref_len / cand_len))
    return float(brevity * np.exp(log_precision))


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            cur[j] = prev[j - 1] + 1 if a[i - 1] == b[j - 1] else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidates: list[list[str]], references: list[list[list[str]]], beta: float = 1.2) -> float:
    """Mean LCS F-measure; precision/recall each take their best reference."""
    _check_corpus(candidates, references)
    scores = []
    for cand, refs in zip(candidates, references):
        best_p, best_r = 0.0, 0.0
        for ref in refs:
            lcs = _lcs_length(cand, ref)
            if cand:
                best_p = max(best_p, lcs / len(cand))
            if ref:
                best_r = max(best_r, lcs / len(ref))
        denom = best_r + beta * beta * best_p
        scores.append((1 + beta * beta) * best_p * best_r / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


def cider(candidates: list[list[str]], references: list[list[list[str]]], max_n: int = 4) -> float:
    """TF-IDF n-gram cosine similarity, orders 1..4 averaged, scaled by 10.

    Document frequencies count reference sets containing each n-gram; the
    IDF statistics come from the evaluation reference corpus itself.
    """
    _check_corpus(candidates, references)
    n_docs = len(references)
    df = [Counter() for _ in range(max_n)]
    for refs in references:
        for order in range(1, max_n + 1):
            grams = set()
            for ref in refs:
                grams.update(_ngrams(ref, order).keys())
            for g in grams:
                df[order - 1][g] += 1

    def tfidf(words: list[str], order: int) -> dict:
        counts = _ngrams(words, order)
        return {g: c * np.log(n_docs / max(df[order - 1][g], 1)) for g, c in counts.items()}

    def cosine(u: dict, v: dict) -> float:
        nu = np.sqrt(sum(x * x for x in u.values()))
        nv = np.sqrt(sum(x * x for x in v.values()))
        if nu == 0 or nv == 0:
            return 0.0
        dot = sum(u[g] * v[g] for g in u.keys() & v.keys())
        return dot / (nu * nv)

    scores = []
    for cand, refs in zip(candidates, references):
        if not refs:
            scores.append(0.0)
            continue
        per_ref = []
        for ref in refs:
            sims = [cosine(tfidf(cand, order), tfidf(ref, order)) for order in range(1, max_n + 1)]
            per_ref.append(float(np.mean(sims)))
        scores.append(10.0 * float(np.mean(per_ref)))
    return float(np.mean(scores))


def r_at_1(results: list[tuple]) -> float:
    """Fraction of (chosen box, ground-truth box) pairs with IoU >= 0.5."""
    if not results:
        raise ValidationError("r_at_1 needs a non-empty result list")
    hits = sum(1 for chosen, gt in results if iou(chosen, gt) >= 0.5)
    return hits / len(results)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("Bleu_1", "Bleu_2", "Bleu_3", "Bleu_4", "METEOR", "ROUGE_L", "CIDEr", "R@1")


@dataclass
class MetricReport:
    """Caption metrics in [0, 1] (CIDEr in [0, 10]), retrieval R@1, corpus
    bookkeeping. METEOR is declared absent, never approximated."""

    bleu: dict = field(default_factory=dict)       # {1: .., 2: .., 3: .., 4: ..}
    rouge_l: float | None = None
    cider: float | None = None
    r_at_1: float | None = None
    corpus: dict = field(default_factory=dict)
    match_rate: float | None = None

    def to_json_dict(self) -> dict:
        out = {
            "Bleu_1": self.bleu.get(1), "Bleu_2": self.bleu.get(2),
            "Bleu_3": self.bleu.get(3), "Bleu_4": self.bleu.get(4),
            "METEOR": None,
            "ROUGE_L": self.rouge_l, "CIDEr": self.cider, "R@1": self.r_at_1,
            "corpus": dict(self.corpus),
        }
        if self.match_rate is not None:
            out["match_rate"] = self.match_rate
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        header = []
        row = []
        values = self.to_json_dict()
        for col in METRIC_COLUMNS:
            v = values[col]
            if v is None:
                cell = "-"
            elif col == "R@1":
                cell = f"{100 * v:.2f}%"
            else:
                cell = f"{v:.3f}"
            width = max(len(col), len(cell))
            header.append(col.rjust(width))
            row.append(cell.rjust(width))
        return "  ".join(header) + "\n" + "  ".join(row)

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        values = json.loads(text)
        bleu = {i: values.get(f"Bleu_{i}") for i in (1, 2, 3, 4) if values.get(f"Bleu_{i}") is not None}
        return MetricReport(
            bleu=bleu, rouge_l=values.get("ROUGE_L"), cider=values.get("CIDEr"),
            r_at_1=values.get("R@1"), corpus=values.get("corpus", {}),
            match_rate=values.get("match_rate"),
        )


def evaluate_captioning(dataset: Dataset, params: ModelParams, config: TrainConfig,
                        match_iou: float = 0.5) -> MetricReport:
    """Detect+caption every image; each kept box is scored against its
    best-IoU ground-truth object's captions (unmatched boxes count with an
    empty reference set)."""
    if len(dataset) == 0:
        raise ValidationError("evaluation needs a non-empty split")
    candidates: list[list[str]] = []
    references: list[list[list[str]]] = []
    matched = 0
    for image in dataset:
        result = detect_and_caption(image, params, config)
        gt_boxes = np.asarray([o.box for o in image.objects], dtype=np.float64)
        for obj in result.objects:
            overlaps = [iou(obj.box, gt) for gt in gt_boxes]
            best = int(np.argmax(overlaps))
            candidates.append(tokenize(obj.caption))
            if overlaps[best] >= match_iou:
                matched += 1
                references.append([tokenize(c) for c in image.objects[best].captions])
            else:
                references.append([])
    report = MetricReport(
        bleu={i: bleu_n(candidates, references, i) for i in (1, 2, 3, 4)},
        rouge_l=rouge_l(candidates, references),
        cider=cider(candidates, references),
        corpus={
            "images": len(dataset),
            "candidates": len(candidates),
            "matched": matched,
            "references": sum(len(r) for r in references),
        },
        match_rate=matched / len(candidates) if candidates else 0.0,
    )
    return report


def evaluate_retrieval(dataset: Dataset, params: ModelParams, config: TrainConfig) -> MetricReport:
    """Every ground-truth caption of every object is one query; R@1 counts the
    chosen box overlapping its object at IoU >= 0.5."""
    if len(dataset) == 0:
        raise ValidationError("evaluation needs a non-empty split")
    pairs = []
    for image in dataset:
        for obj in image.objects:
            for caption in obj.captions:
                result = retrieve(image, tokenize(caption), params, config)
                pairs.append((result.chosen.box, obj.box))
    return MetricReport(
        r_at_1=r_at_1(pairs),
        corpus={"images": len(dataset), "queries": len(pairs)},
    )
