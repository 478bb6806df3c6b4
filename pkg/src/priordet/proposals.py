"""Unsupervised region proposals: segmentation, hierarchical grouping,
selection policies, cross-image shuffling, and the proposal cache format.

The proposer follows the classic grouping recipe: oversegment the image
with graph-based greedy segmentation, then repeatedly merge the most
similar adjacent pair of regions (color + texture + size + fill
similarity) until one region remains. Every region ever created
contributes its bounding box as a proposal. Ranking orders regions by
creation level (initial segments first, later merges after) with a
seeded sub-integer jitter breaking ties among the initial segments.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from skimage.color import rgb2hsv
from skimage.segmentation import felzenszwalb

from .errors import ConfigError, ImageSizeError, ShuffleError
from .geometry import BoxXYXY, box_iou_matrix

COLOR_BINS = 25           # per HSV channel
TEXTURE_ORIENTATIONS = 8
TEXTURE_BINS = 10         # gradient-magnitude bins per orientation


@dataclass(frozen=True)
class SegmentMap:
    """Dense segment labels over an image; labels are exactly 0..num_segments-1."""

    labels: np.ndarray
    num_segments: int

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise ValueError("labels must be a 2-D grid")


@dataclass(frozen=True)
class Proposal:
    box: BoxXYXY
    rank: int
    score: float


@dataclass(frozen=True)
class ProposalSet:
    image_id: str
    proposals: tuple[Proposal, ...]

    def __init__(self, image_id: str, proposals: Sequence[Proposal]):
        object.__setattr__(self, "image_id", image_id)
        object.__setattr__(self, "proposals", tuple(proposals))

    @property
    def n(self) -> int:
        return len(self.proposals)

    def __len__(self) -> int:
        return len(self.proposals)

    def boxes_array(self) -> np.ndarray:
        if not self.proposals:
            return np.zeros((0, 4), dtype=np.float64)
        return np.array([p.box.as_tuple() for p in self.proposals], dtype=np.float64)


@dataclass(frozen=True)
class SelectionPolicy:
    kind: str = "top_k"
    k: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("top_k", "random_k", "importance"):
            raise ConfigError(f"unknown selection policy kind: {self.kind!r}")
        if self.k < 1:
            raise ConfigError(f"selection K must be >= 1, got {self.k}")


@dataclass(frozen=True)
class SegmentParams:
    scale: float = 100.0
    sigma: float = 0.8
    min_size: int = 100


def fast_preset(height: int, width: int) -> SegmentParams:
    """Single color space, single scale; min_size of 100 pixels at the
    256x256 reference resolution, scaled proportionally to image area."""
    min_size = max(4, round(100 * (height * width) / (256 * 256)))
    return SegmentParams(scale=100.0, sigma=0.8, min_size=min_size)


def segment(image: np.ndarray, scale: float, min_size: int, sigma: float = 0.8) -> SegmentMap:
    """Graph-based greedy oversegmentation of an RGB image in [0, 1].

    Deterministic for fixed inputs; components smaller than min_size are
    merged into their closest neighbor in color space.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageSizeError(f"expected HxWx3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < 8 or w < 8:
        raise ImageSizeError(f"image too small for segmentation: {h}x{w} (need >= 8x8)")
    if image.min() < -1e-9 or image.max() > 1 + 1e-9:
        raise ValueError("pixel values must lie in [0, 1]")
    labels = felzenszwalb(image, scale=scale, sigma=sigma, min_size=min_size)
    uniq, dense = np.unique(labels, return_inverse=True)
    dense = dense.reshape(labels.shape).astype(np.int32)
    return SegmentMap(labels=dense, num_segments=len(uniq))


# ---------------------------------------------------------------------------
# Region features and similarities
# ---------------------------------------------------------------------------


def _color_histograms(image: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    """(n, 75) L1-normalized HSV histograms, 25 bins per channel."""
    hsv = rgb2hsv(image)
    flat_labels = labels.ravel()
    out = np.zeros((n, 3 * COLOR_BINS), dtype=np.float64)
    for c in range(3):
        chan = np.clip(hsv[..., c].ravel(), 0.0, 1.0)
        bins = np.minimum((chan * COLOR_BINS).astype(np.int64), COLOR_BINS - 1)
        idx = flat_labels * (3 * COLOR_BINS) + c * COLOR_BINS + bins
        out += np.bincount(idx, minlength=n * 3 * COLOR_BINS).reshape(out.shape)
    sums = out.sum(axis=1, keepdims=True)
    np.divide(out, sums, out=out, where=sums > 0)
    return out


def _texture_histograms(image: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    """(n, 240) gradient-orientation histograms: per channel, 8 orientation
    bins x 10 magnitude bins, L1-normalized over the full vector."""
    flat_labels = labels.ravel()
    dim = 3 * TEXTURE_ORIENTATIONS * TEXTURE_BINS
    out = np.zeros((n, dim), dtype=np.float64)
    for c in range(3):
        dy, dx = np.gradient(image[..., c])
        mag = np.hypot(dx, dy).ravel()
        ori = np.arctan2(dy, dx).ravel()  # [-pi, pi]
        obin = np.minimum(
            ((ori + math.pi) / (2 * math.pi) * TEXTURE_ORIENTATIONS).astype(np.int64),
            TEXTURE_ORIENTATIONS - 1,
        )
        mbin = np.minimum((np.clip(mag, 0.0, 1.0) * TEXTURE_BINS).astype(np.int64), TEXTURE_BINS - 1)
        idx = (
            flat_labels * dim
            + c * TEXTURE_ORIENTATIONS * TEXTURE_BINS
            + obin * TEXTURE_BINS
            + mbin
        )
        out += np.bincount(idx, minlength=n * dim).reshape(out.shape)
    sums = out.sum(axis=1, keepdims=True)
    np.divide(out, sums, out=out, where=sums > 0)
    return out


@dataclass
class _Region:
    size: int
    bbox: tuple[int, int, int, int]  # pixel (r0, c0, r1, c1), inclusive
    color: np.ndarray
    texture: np.ndarray
    level: int
    members: frozenset[int]


def _hist_intersection(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.minimum(a, b).sum())


def _similarity(a: _Region, b: _Region, image_size: int) -> float:
    s_color = _hist_intersection(a.color, b.color)
    s_texture = _hist_intersection(a.texture, b.texture)
    s_size = max(0.0, 1.0 - (a.size + b.size) / image_size)
    r0 = min(a.bbox[0], b.bbox[0])
    c0 = min(a.bbox[1], b.bbox[1])
    r1 = max(a.bbox[2], b.bbox[2])
    c1 = max(a.bbox[3], b.bbox[3])
    hull = (r1 - r0 + 1) * (c1 - c0 + 1)
    s_fill = max(0.0, 1.0 - (hull - a.size - b.size) / image_size)
    return s_color + s_texture + s_size + s_fill


def _adjacency_pairs(labels: np.ndarray) -> set[tuple[int, int]]:
    pairs = set()
    for a, b in (
        (labels[:, :-1], labels[:, 1:]),
        (labels[:-1, :], labels[1:, :]),
    ):
        diff = a != b
        lo = np.minimum(a[diff], b[diff])
        hi = np.maximum(a[diff], b[diff])
        pairs.update(zip(lo.tolist(), hi.tolist()))
    return pairs


def _bbox_to_fraction(bbox: tuple[int, int, int, int], h: int, w: int) -> BoxXYXY:
    r0, c0, r1, c1 = bbox
    return BoxXYXY(c0 / w, r0 / h, (c1 + 1) / w, (r1 + 1) / h)


def hierarchical_group(
    seg: SegmentMap,
    image: np.ndarray,
    seed: int = 0,
    return_tree: bool = False,
):
    """Greedily merge the most-similar adjacent regions until one remains;
    emit the (deduplicated, ranked) bounding boxes of every region created.

    Output size is at most 2*num_segments - 1. With return_tree=True the
    second return value lists, per emitted proposal, the frozenset of
    initial segment ids whose union produced its region.
    """
    image = np.asarray(image, dtype=np.float64)
    labels = seg.labels
    n0 = seg.num_segments
    h, w = labels.shape
    image_size = h * w

    color = _color_histograms(image, labels, n0)
    texture = _texture_histograms(image, labels, n0)
    sizes = np.bincount(labels.ravel(), minlength=n0)

    rows = np.arange(h)[:, None] * np.ones(w, dtype=np.int64)[None, :]
    cols = np.ones(h, dtype=np.int64)[:, None] * np.arange(w)[None, :]
    flat = labels.ravel()
    r_min = np.full(n0, h, dtype=np.int64)
    c_min = np.full(n0, w, dtype=np.int64)
    r_max = np.zeros(n0, dtype=np.int64)
    c_max = np.zeros(n0, dtype=np.int64)
    np.minimum.at(r_min, flat, rows.ravel())
    np.minimum.at(c_min, flat, cols.ravel())
    np.maximum.at(r_max, flat, rows.ravel())
    np.maximum.at(c_max, flat, cols.ravel())

    regions: dict[int, _Region] = {
        i: _Region(
            size=int(sizes[i]),
            bbox=(int(r_min[i]), int(c_min[i]), int(r_max[i]), int(c_max[i])),
            color=color[i],
            texture=texture[i],
            level=1,
            members=frozenset([i]),
        )
        for i in range(n0)
    }
    created: list[tuple[int, _Region]] = [(i, regions[i]) for i in range(n0)]

    neighbors: dict[int, set[int]] = {i: set() for i in range(n0)}
    heap: list[tuple[float, int, int]] = []
    for i, j in sorted(_adjacency_pairs(labels)):
        neighbors[i].add(j)
        neighbors[j].add(i)
        heapq.heappush(heap, (-_similarity(regions[i], regions[j], image_size), i, j))

    next_id = n0
    merge_step = 0
    alive = set(range(n0))
    while len(alive) > 1 and heap:
        neg_sim, i, j = heapq.heappop(heap)
        if i not in alive or j not in alive or j not in neighbors[i]:
            continue
        a, b = regions[i], regions[j]
        total = a.size + b.size
        merged = _Region(
            size=total,
            bbox=(
                min(a.bbox[0], b.bbox[0]),
                min(a.bbox[1], b.bbox[1]),
                max(a.bbox[2], b.bbox[2]),
                max(a.bbox[3], b.bbox[3]),
            ),
            color=(a.color * a.size + b.color * b.size) / total,
            texture=(a.texture * a.size + b.texture * b.size) / total,
            level=1 + (merge_step := merge_step + 1),
            members=a.members | b.members,
        )
        new_id = next_id
        next_id += 1
        regions[new_id] = merged
        created.append((new_id, merged))
        alive.discard(i)
        alive.discard(j)
        alive.add(new_id)
        merged_neighbors = (neighbors[i] | neighbors[j]) - {i, j}
        neighbors[new_id] = set()
        for k in sorted(merged_neighbors):
            if k not in alive:
                continue
            neighbors[k].discard(i)
            neighbors[k].discard(j)
            neighbors[k].add(new_id)
            neighbors[new_id].add(k)
            lo, hi = min(k, new_id), max(k, new_id)
            heapq.heappush(
                heap, (-_similarity(regions[lo], regions[hi], image_size), lo, hi)
            )
        del neighbors[i], neighbors[j]

    rng = np.random.default_rng(seed)
    keys = [(reg.level + rng.random(), rid) for rid, reg in created]
    order = sorted(range(len(created)), key=lambda t: keys[t])

    seen_boxes: dict[tuple, int] = {}
    chosen: list[tuple[BoxXYXY, frozenset[int]]] = []
    for idx in order:
        _, reg = created[idx]
        box = _bbox_to_fraction(reg.bbox, h, w)
        key = box.as_tuple()
        if key in seen_boxes:
            continue
        seen_boxes[key] = len(chosen)
        chosen.append((box, reg.members))

    proposals = [
        Proposal(box=box, rank=r + 1, score=1.0 / (r + 1))
        for r, (box, _) in enumerate(chosen)
    ]
    image_id = ""
    ps = ProposalSet(image_id=image_id, proposals=proposals)
    if return_tree:
        return ps, [members for _, members in chosen]
    return ps


@dataclass(frozen=True)
class SelectiveSearchProposer:
    """image -> ProposalSet, using the built-in segmentation + grouping.

    Any callable with the same signature can stand in (external proposal
    algorithms plug in here, or precomputed boxes via the cache format).
    """

    params: SegmentParams | None = None  # None = per-image fast preset
    seed: int = 0

    def __call__(self, image: np.ndarray, image_id: str = "") -> ProposalSet:
        h, w = image.shape[:2]
        params = self.params or fast_preset(h, w)
        seg = segment(image, scale=params.scale, min_size=params.min_size, sigma=params.sigma)
        ps = hierarchical_group(seg, image, seed=self.seed)
        return ProposalSet(image_id=image_id, proposals=ps.proposals)


Proposer = Callable[[np.ndarray, str], ProposalSet]


# ---------------------------------------------------------------------------
# Selection policies
# ---------------------------------------------------------------------------


def _rerank(image_id: str, chosen: list[Proposal]) -> ProposalSet:
    return ProposalSet(
        image_id,
        [Proposal(box=p.box, rank=r + 1, score=p.score) for r, p in enumerate(chosen)],
    )


def importance_probabilities(n: int, k: int) -> np.ndarray:
    """Per-rank keep probabilities p_i = min(1, alpha * -ln(i/n)), with alpha
    calibrated by bisection so the expected kept count equals min(k, n-1).

    Rank n has weight -ln(n/n) = 0 and is never kept.
    """
    ranks = np.arange(1, n + 1, dtype=np.float64)
    weights = -np.log(ranks / n)
    positive = int(np.count_nonzero(weights > 0))
    target = float(min(k, positive))
    if target == 0:
        return np.zeros(n)

    def kept(alpha: float) -> float:
        return float(np.minimum(1.0, alpha * weights).sum())

    lo, hi = 0.0, 1.0
    while kept(hi) < target and hi < 1e12:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if kept(mid) < target:
            lo = mid
        else:
            hi = mid
    return np.minimum(1.0, hi * weights)


def select(ps: ProposalSet, policy: SelectionPolicy) -> ProposalSet:
    """Apply a box-selection policy; output preserves rank order and is
    re-ranked contiguously from 1."""
    if policy.k < 1:
        raise ConfigError(f"selection K must be >= 1, got {policy.k}")
    if ps.n == 0:
        return ps
    ranked = sorted(ps.proposals, key=lambda p: p.rank)
    if policy.kind == "top_k":
        return _rerank(ps.image_id, ranked[: min(policy.k, ps.n)])
    rng = np.random.default_rng(policy.seed)
    if policy.kind == "random_k":
        m = min(policy.k, ps.n)
        idx = np.sort(rng.choice(ps.n, size=m, replace=False))
        return _rerank(ps.image_id, [ranked[i] for i in idx])
    # importance sampling
    probs = importance_probabilities(ps.n, policy.k)
    keep = rng.random(ps.n) < probs
    return _rerank(ps.image_id, [p for p, kept in zip(ranked, keep) if kept])


def shuffle_across_images(
    sets: Sequence[ProposalSet], seed: int
) -> list[ProposalSet]:
    """Permute whole proposal lists across image ids (seeded). The global
    multiset of boxes is preserved exactly."""
    if len(sets) < 2:
        raise ShuffleError("cross-image shuffle needs at least 2 images")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(sets))
    return [
        ProposalSet(image_id=sets[i].image_id, proposals=sets[perm[i]].proposals)
        for i in range(len(sets))
    ]


# ---------------------------------------------------------------------------
# Proposal quality sweep
# ---------------------------------------------------------------------------


def _greedy_match_count(proposal_boxes: np.ndarray, gt_boxes: np.ndarray, thresh: float) -> int:
    """Match proposals (in given order) to ground truth at an IoU threshold;
    each GT matches at most once. Returns the number of matches."""
    if len(proposal_boxes) == 0 or len(gt_boxes) == 0:
        return 0
    ious = box_iou_matrix(proposal_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    matched = 0
    for i in range(len(proposal_boxes)):
        row = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(row))
        if row[j] >= thresh:
            taken[j] = True
            matched += 1
    return matched


def sweep_topk_quality(
    proposals_by_image: Mapping[str, ProposalSet],
    gt_by_image: Mapping[str, np.ndarray],
    k_values: Iterable[int],
    iou_thresh: float = 0.5,
) -> list[dict]:
    """Class-agnostic precision/recall of the top-K proposals per image.

    Returns one row per K: {"k", "precision", "recall"}; recall is None
    when there is no ground truth at all.
    """
    rows = []
    total_gt = sum(len(gt_by_image[i]) for i in gt_by_image)
    for k in k_values:
        tp = 0
        n_dets = 0
        for image_id, ps in proposals_by_image.items():
            gt = np.asarray(gt_by_image.get(image_id, np.zeros((0, 4))))
            boxes = ps.boxes_array()[: min(k, ps.n)]
            n_dets += len(boxes)
            tp += _greedy_match_count(boxes, gt, iou_thresh)
        rows.append(
            {
                "k": int(k),
                "precision": tp / n_dets if n_dets else 0.0,
                "recall": tp / total_gt if total_gt else None,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# Cache format: newline-delimited JSON, boxes in pixel units, rank order
# ---------------------------------------------------------------------------


def write_cache(path, proposal_sets: Sequence[ProposalSet], sizes: Mapping[str, tuple[int, int]]):
    """Write proposal sets as JSONL. `sizes` maps image_id -> (width, height)
    in pixels; boxes are stored as [x1, y1, x2, y2, score] in pixel units."""
    with open(path, "w") as f:
        for ps in proposal_sets:
            w, h = sizes[ps.image_id]
            record = {
                "image_id": ps.image_id,
                "width": int(w),
                "height": int(h),
                "boxes": [
                    [p.box.x1 * w, p.box.y1 * h, p.box.x2 * w, p.box.y2 * h, p.score]
                    for p in sorted(ps.proposals, key=lambda p: p.rank)
                ],
            }
            f.write(json.dumps(record) + "\n")


def read_cache(path) -> tuple[dict[str, ProposalSet], dict[str, tuple[int, int]]]:
    """Read a proposal cache; returns ({image_id: ProposalSet with normalized
    boxes}, {image_id: (width, height)})."""
    sets: dict[str, ProposalSet] = {}
    sizes: dict[str, tuple[int, int]] = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            image_id = rec["image_id"]
            w, h = int(rec["width"]), int(rec["height"])
            proposals = [
                Proposal(
                    box=BoxXYXY(
                        min(max(x1 / w, 0.0), 1.0),
                        min(max(y1 / h, 0.0), 1.0),
                        min(max(x2 / w, 0.0), 1.0),
                        min(max(y2 / h, 0.0), 1.0),
                    ),
                    rank=r + 1,
                    score=float(score),
                )
                for r, (x1, y1, x2, y2, score) in enumerate(rec["boxes"])
            ]
            sets[image_id] = ProposalSet(image_id=image_id, proposals=proposals)
            sizes[image_id] = (w, h)
    return sets, sizes
