"""Target padding, bipartite matching, and the combined detection loss.

Targets are padded to the query count N with background slots. Matching
runs on the rectangular real-target x prediction cost matrix (class +
L1 + GIoU terms); unmatched predictions are assigned to background,
which is equivalent to the square padded form for the loss. The
assignment is recomputed every forward pass and treated as a constant
of the backward pass.

Class indexing convention: background is the LAST logit index. During
pretraining (2 logits) the object class is index 0; after the head swap
the dataset classes occupy 0..L-1 and background is L.

Normalization: the class term is averaged over all N slots (padded
slots down-weighted in cross-entropy mode), box terms over the M real
targets, and the embedding term over M x emb_dim.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .errors import CapacityError, MatchingError

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0

CLASS_MODES = ("cross_entropy", "sigmoid_focal")


@dataclass(frozen=True)
class LossWeights:
    lambda_f: float = 1.0
    lambda_b_l1: float = 5.0
    lambda_b_giou: float = 2.0
    lambda_e: float = 1.0

    def __post_init__(self):
        for name in ("lambda_f", "lambda_b_l1", "lambda_b_giou", "lambda_e"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    @classmethod
    def defaults(cls, mode: str) -> "LossWeights":
        # focal runs use a doubled class weight, per the reference family
        return cls(lambda_f=2.0 if mode == "sigmoid_focal" else 1.0)


@dataclass
class TargetSet:
    """M real targets padded (implicitly) to N slots.

    boxes: (M, 4) cxcywh tensor. embeddings: (M, E) or None (finetuning).
    class_labels: (M,) long tensor of dataset classes, or None
    (pretraining, where every real target is 'object'). c marks real
    slots with 1 and padded slots with 0; real targets occupy the first
    M positions. Padded slots carry no box/embedding payload.
    """

    boxes: torch.Tensor
    c: torch.Tensor
    m: int
    n: int
    embeddings: torch.Tensor | None = None
    class_labels: torch.Tensor | None = None


@dataclass
class MatchResult:
    """Bijection sigma: target slot i -> prediction sigma[i], plus the
    summed matching cost over the real pairs."""

    sigma: np.ndarray
    total_cost: float


@dataclass
class LossBreakdown:
    class_loss: torch.Tensor
    box_l1: torch.Tensor
    box_giou: torch.Tensor
    emb_loss: torch.Tensor
    total: torch.Tensor

    def detach_floats(self) -> dict[str, float]:
        return {
            "class_loss": float(self.class_loss.detach()),
            "box_l1": float(self.box_l1.detach()),
            "box_giou": float(self.box_giou.detach()),
            "emb_loss": float(self.emb_loss.detach()),
            "total": float(self.total.detach()),
        }


def pad_targets(
    boxes: torch.Tensor,
    n: int,
    embeddings: torch.Tensor | None = None,
    class_labels: torch.Tensor | None = None,
) -> TargetSet:
    """Pad M real targets to N slots; the first M carry c=1."""
    m = int(boxes.shape[0])
    if n <= m:
        raise CapacityError(
            f"{m} targets do not fit into {n} query slots; "
            "increase N_queries or lower the selection K"
        )
    c = torch.zeros(n, dtype=torch.long)
    c[:m] = 1
    return TargetSet(
        boxes=boxes, c=c, m=m, n=n, embeddings=embeddings, class_labels=class_labels
    )


# ---------------------------------------------------------------------------
# Differentiable box terms (cxcywh inputs)
# ---------------------------------------------------------------------------


def box_cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack(
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1
    )


def pairwise_giou(a_xyxy: torch.Tensor, b_xyxy: torch.Tensor) -> torch.Tensor:
    """(N, M) generalized IoU; epsilon-guarded for differentiability."""
    eps = 1e-9
    area_a = (a_xyxy[:, 2] - a_xyxy[:, 0]) * (a_xyxy[:, 3] - a_xyxy[:, 1])
    area_b = (b_xyxy[:, 2] - b_xyxy[:, 0]) * (b_xyxy[:, 3] - b_xyxy[:, 1])
    lt = torch.max(a_xyxy[:, None, :2], b_xyxy[None, :, :2])
    rb = torch.min(a_xyxy[:, None, 2:], b_xyxy[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou = inter / (union + eps)
    hull_lt = torch.min(a_xyxy[:, None, :2], b_xyxy[None, :, :2])
    hull_rb = torch.max(a_xyxy[:, None, 2:], b_xyxy[None, :, 2:])
    hull_wh = (hull_rb - hull_lt).clamp(min=0)
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return iou - (hull - union) / (hull + eps)


def _object_probs(logits: torch.Tensor, mode: str) -> torch.Tensor:
    """(N, C) probability table: softmax rows (CE) or per-class sigmoid."""
    if mode == "cross_entropy":
        return logits.softmax(dim=-1)
    if mode == "sigmoid_focal":
        return logits.sigmoid()
    raise ValueError(f"unknown class-loss mode {mode!r}")


def match_cost(
    target_box: torch.Tensor,
    pred_box: torch.Tensor,
    pred_logits: torch.Tensor,
    weights: LossWeights,
    mode: str = "cross_entropy",
    target_class: int = 0,
) -> float:
    """Pairwise matching cost for one (real target, prediction) pair."""
    probs = _object_probs(pred_logits[None], mode)[0]
    cost = -float(probs[target_class]) * weights.lambda_f
    cost += weights.lambda_b_l1 * float((target_box - pred_box).abs().sum())
    giou = pairwise_giou(
        box_cxcywh_to_xyxy(target_box[None]), box_cxcywh_to_xyxy(pred_box[None])
    )[0, 0]
    cost += weights.lambda_b_giou * (1.0 - float(giou))
    return cost


def cost_matrix(
    targets: TargetSet,
    pred_boxes: torch.Tensor,
    pred_logits: torch.Tensor,
    weights: LossWeights,
    mode: str,
) -> np.ndarray:
    """(M, N) matching cost between real targets and all predictions."""
    with torch.no_grad():
        probs = _object_probs(pred_logits, mode)  # (N, C)
        if targets.class_labels is not None:
            class_cost = -probs[:, targets.class_labels].t()  # (M, N)
        else:
            class_cost = -probs[:, 0][None].expand(targets.m, -1)
        l1 = torch.cdist(targets.boxes, pred_boxes, p=1)
        giou = pairwise_giou(
            box_cxcywh_to_xyxy(targets.boxes), box_cxcywh_to_xyxy(pred_boxes)
        )
        total = (
            weights.lambda_f * class_cost
            + weights.lambda_b_l1 * l1
            + weights.lambda_b_giou * (1.0 - giou)
        )
        if not torch.isfinite(total).all():
            raise MatchingError("non-finite entries in matching cost")
        return total.cpu().numpy().astype(np.float64)


def hungarian(cost: np.ndarray) -> MatchResult:
    """Exact minimum-cost assignment on a square matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise MatchingError(f"cost matrix must be square, got {cost.shape}")
    if not np.isfinite(cost).all():
        raise MatchingError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    sigma = np.empty(cost.shape[0], dtype=np.int64)
    sigma[rows] = cols
    return MatchResult(sigma=sigma, total_cost=float(cost[rows, cols].sum()))


def assign(
    targets: TargetSet,
    pred_boxes: torch.Tensor,
    pred_logits: torch.Tensor,
    weights: LossWeights,
    mode: str,
) -> MatchResult:
    """Rectangular matching of real targets to predictions, completed to a
    full bijection by assigning leftover predictions to padded slots in
    index order."""
    n = targets.n
    sigma = np.empty(n, dtype=np.int64)
    if targets.m > 0:
        cost = cost_matrix(targets, pred_boxes, pred_logits, weights, mode)
        rows, cols = linear_sum_assignment(cost)
        total = float(cost[rows, cols].sum())
        sigma[rows] = cols
        used = set(cols.tolist())
    else:
        total = 0.0
        used = set()
    leftovers = [j for j in range(n) if j not in used]
    sigma[targets.m :] = leftovers
    return MatchResult(sigma=sigma, total_cost=total)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def class_loss(
    target_classes: torch.Tensor,
    logits: torch.Tensor,
    mode: str = "cross_entropy",
    background_weight: float = 0.1,
    n_classes: int | None = None,
) -> torch.Tensor:
    """Classification term over all N slots.

    target_classes: (N,) long labels with background = last class index.
    CE: per-slot negative log softmax probability, background slots
    scaled by background_weight, averaged over N. Focal: per-class
    sigmoid focal loss (alpha .25, gamma 2) averaged over N x classes.
    """
    if mode not in CLASS_MODES:
        raise ValueError(f"unknown class-loss mode {mode!r}; use one of {CLASS_MODES}")
    n, c = logits.shape
    background = c - 1
    if mode == "cross_entropy":
        log_probs = torch.log_softmax(logits, dim=-1)
        ce = -log_probs[torch.arange(n), target_classes]
        slot_weights = torch.where(
            target_classes == background,
            torch.as_tensor(background_weight, dtype=logits.dtype),
            torch.as_tensor(1.0, dtype=logits.dtype),
        )
        return (ce * slot_weights).sum() / n
    one_hot = torch.zeros_like(logits)
    one_hot[torch.arange(n), target_classes] = 1.0
    p = logits.sigmoid()
    p_t = p * one_hot + (1 - p) * (1 - one_hot)
    alpha_t = FOCAL_ALPHA * one_hot + (1 - FOCAL_ALPHA) * (1 - one_hot)
    log_p_t = torch.nn.functional.logsigmoid(logits) * one_hot + (
        torch.nn.functional.logsigmoid(-logits)
    ) * (1 - one_hot)
    focal = alpha_t * (1 - p_t).pow(FOCAL_GAMMA) * (-log_p_t)
    return focal.mean()


def box_loss(
    target_boxes: torch.Tensor, matched_pred_boxes: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(L1, 1-GIoU) over the real-target pairs, each normalized by M."""
    m = target_boxes.shape[0]
    if m == 0:
        zero = torch.zeros((), dtype=matched_pred_boxes.dtype)
        return zero, zero.clone()
    l1 = (target_boxes - matched_pred_boxes).abs().sum() / m
    giou = pairwise_giou(
        box_cxcywh_to_xyxy(target_boxes), box_cxcywh_to_xyxy(matched_pred_boxes)
    ).diagonal()
    return l1, (1.0 - giou).sum() / m


def emb_loss(target_emb: torch.Tensor, matched_pred_emb: torch.Tensor) -> torch.Tensor:
    """Mean absolute embedding error per dimension per real target."""
    if target_emb.shape != matched_pred_emb.shape:
        raise ValueError(
            f"embedding shape mismatch: {tuple(target_emb.shape)} vs "
            f"{tuple(matched_pred_emb.shape)}"
        )
    if target_emb.shape[0] == 0:
        return torch.zeros((), dtype=matched_pred_emb.dtype)
    return (target_emb - matched_pred_emb).abs().mean()


def total_loss(
    targets: TargetSet,
    output,
    weights: LossWeights,
    mode: str = "cross_entropy",
    background_weight: float = 0.1,
    fixed_match: MatchResult | None = None,
) -> tuple[LossBreakdown, MatchResult]:
    """Match, then combine class, box, and embedding terms under sigma.

    `output` is a DetectorOutput (boxes, class_logits, embeddings).
    Differentiable w.r.t. the outputs with sigma held constant; pass
    fixed_match to reuse a previously computed assignment (finite
    difference checks)."""
    pred_boxes, logits = output.boxes, output.class_logits
    n, c = logits.shape
    if targets.n != n:
        raise CapacityError(f"targets padded to {targets.n} but model has {n} queries")
    match = fixed_match or assign(targets, pred_boxes, logits, weights, mode)

    background = c - 1
    target_classes = torch.full((n,), background, dtype=torch.long)
    if targets.m > 0:
        matched_cols = torch.from_numpy(match.sigma[: targets.m])
        if targets.class_labels is not None:
            target_classes[matched_cols] = targets.class_labels
        else:
            target_classes[matched_cols] = 0  # object class
    cls = class_loss(target_classes, logits, mode, background_weight)

    if targets.m > 0:
        matched_boxes = pred_boxes[matched_cols]
        l1, giou_term = box_loss(targets.boxes, matched_boxes)
    else:
        l1 = torch.zeros((), dtype=pred_boxes.dtype)
        giou_term = torch.zeros((), dtype=pred_boxes.dtype)

    if targets.embeddings is not None and targets.m > 0:
        emb = emb_loss(targets.embeddings, output.embeddings[matched_cols])
    else:
        emb = torch.zeros((), dtype=pred_boxes.dtype)

    total = (
        weights.lambda_f * cls
        + weights.lambda_b_l1 * l1
        + weights.lambda_b_giou * giou_term
        + weights.lambda_e * emb
    )
    return (
        LossBreakdown(
            class_loss=cls, box_l1=l1, box_giou=giou_term, emb_loss=emb, total=total
        ),
        match,
    )
