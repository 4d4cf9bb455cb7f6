"""Proposal refinement and training.

Stacked decoder layers refine each proposal query against the enriched
feature maps: a BEV window of the LiDAR map around the proposal cell,
image windows of both camera maps around the projected proposal center,
and a feed-forward update.  Heads then read out class scores and box
geometry.  Hungarian assignment pairs predictions with labels for a
weighted composite loss, and a small deterministic optimizer drives the
whole parameter stack.

The layer internals are a deliberate simplification: one additive
single-head attention step per feature map, in a fixed order, rather
than a full transformer block.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .bevfusion import ProposalSet, heat_loss
from .encoders import FeatureMap
from .evalkit import bev_iou, bev_overlap_area
from .geometry import Box3D, CameraModel, box_bev_corners, project_points

# regression layout: dx, dz, y, log w, log l, log h, sin yaw, cos yaw
N_REG = 8

# probabilities are floored before the log so saturated targets cost 0
# exactly and mispredicted ones stay finite
PROB_FLOOR = 1e-12

ATTEND_ORDER = ("bev", "rgb", "gated")


def wrap_yaw(yaw: float) -> float:
    """Map an angle into (-pi, pi]."""
    w = (yaw + np.pi) % (2.0 * np.pi) - np.pi
    return np.pi if w == -np.pi else float(w)


# ---------------------------------------------------------------------------
# configuration and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecoderConfig:
    d: int = 32
    n_classes: int = 2
    n_layers: int = 4
    k_bev: int = 3
    k_camera: int = 5
    # nominal object mid-height (y points down) used to project proposal
    # centers into the images before their vertical position is known
    center_height: float = -0.75

    def __post_init__(self):
        if self.d < 1 or self.n_classes < 1:
            raise ValueError("d and n_classes must be positive")
        if self.n_layers < 1:
            raise ValueError("decoder needs at least one layer")
        for k in (self.k_bev, self.k_camera):
            if k < 1 or k % 2 == 0:
                raise ValueError("window sizes must be odd and >= 1")


@dataclass
class DecoderParams:
    config: DecoderConfig
    store: ParamStore

    @classmethod
    def init(cls, config: DecoderConfig | None = None,
             seed: int = 0) -> "DecoderParams":
        config = config or DecoderConfig()
        rng = np.random.default_rng(seed)
        store = ParamStore()
        d = config.d
        scale = 1.0 / np.sqrt(d)
        for i in range(config.n_layers):
            for target in ATTEND_ORDER:
                for p in ("q", "k", "v"):
                    store.add(f"dec{i}.{target}.{p}",
                              rng.normal(0.0, scale, size=(d, d)))
            store.add(f"dec{i}.ffn.w1", rng.normal(0.0, scale, size=(d, d)))
            store.add(f"dec{i}.ffn.b1", np.zeros(d))
            store.add(f"dec{i}.ffn.w2", rng.normal(0.0, scale, size=(d, d)))
            store.add(f"dec{i}.ffn.b2", np.zeros(d))
        store.add("head.cls.w",
                  rng.normal(0.0, scale, size=(config.n_classes + 1, d)))
        store.add("head.cls.b", np.zeros(config.n_classes + 1))
        # zero regression start: boxes sit at their proposal cells with unit
        # sizes.  The lone cos-yaw bias of 1 decodes to yaw 0 while keeping
        # the atan2 gradient finite at the origin.
        store.add("head.reg.w", np.zeros((N_REG, d)))
        reg_bias = np.zeros(N_REG)
        reg_bias[7] = 1.0
        store.add("head.reg.b", reg_bias)
        return cls(config, store)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

@dataclass
class DecodeResult:
    """Scored boxes plus the differentiable quantities behind them.

    `boxes` is the plain-float readout; `logits`, `centers`, `sizes`, and
    `yaw_embed` stay on the graph so losses can flow back through the
    decoder and everything upstream of it.
    """

    boxes: list[Box3D]
    logits: Tensor      # (n, n_classes + 1)
    centers: Tensor     # (n, 3) x, y, z
    sizes: Tensor       # (n, 3) w, l, h
    yaw_embed: Tensor   # (n, 2) raw sin, cos

    def __len__(self) -> int:
        return len(self.boxes)

    def probs(self) -> np.ndarray:
        """Detached class probabilities, one row per box."""
        z = self.logits.data
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    @classmethod
    def empty(cls, n_classes: int) -> "DecodeResult":
        return cls(boxes=[],
                   logits=ad.tensor(np.zeros((0, n_classes + 1))),
                   centers=ad.tensor(np.zeros((0, 3))),
                   sizes=ad.tensor(np.zeros((0, 3))),
                   yaw_embed=ad.tensor(np.zeros((0, 2))))


def _attend_window(query: Tensor, fmap: FeatureMap, row: int, col: int,
                   wq: Tensor, wk: Tensor, wv: Tensor, k: int):
    """One query vector against a k x k patch of a feature map.

    Returns the attended value vector, or None when every cell in the
    window is masked out (callers skip the update in that case).
    """
    half = k // 2
    d, h, w = fmap.data.shape
    r0, r1 = max(0, row - half), min(h, row + half + 1)
    c0, c1 = max(0, col - half), min(w, col + half + 1)
    valid = fmap.valid()[r0:r1, c0:c1]
    if not valid.any():
        return None
    rr, cc = np.nonzero(valid)
    cells = ad.getitem(fmap.data, (slice(None), rr + r0, cc + c0))
    keys = wk @ cells
    values = wv @ cells
    logits = ((wq @ query) @ keys) / np.sqrt(d)
    return values @ ad.softmax(logits)


def _pixel_of(uv_row: np.ndarray, fmap: FeatureMap) -> tuple[int, int]:
    col = min(max(int(np.rint(uv_row[0])), 0), fmap.width - 1)
    row = min(max(int(np.rint(uv_row[1])), 0), fmap.height - 1)
    return row, col


def decode(pset: ProposalSet, star_c: FeatureMap, star_g: FeatureMap,
           star_l: FeatureMap, params: DecoderParams,
           cam_rgb: CameraModel, cam_gated: CameraModel) -> DecodeResult:
    """Refine proposal queries into scored 3D boxes.

    `cam_rgb` and `cam_gated` are the feature-scale camera models matching
    `star_c` and `star_g`.  A proposal whose center projects outside an
    image, or whose window holds no unmasked cells, simply skips that
    attention step.  An empty proposal set decodes to an empty result.

    Box readout: centers offset from the proposal cell (y regressed
    absolutely), sizes through exp so they stay positive, yaw through
    atan2 of a (sin, cos) pair so the wrap seam never meets the loss,
    class and score as the best non-background probability.
    """
    cfg = params.config
    store = params.store
    if len(pset) == 0:
        return DecodeResult.empty(cfg.n_classes)
    if star_l.plane != "bev":
        raise ValueError("star_l must be a BEV map")
    for fmap in (star_c, star_g):
        if fmap.plane != "camera":
            raise ValueError("camera features must live on the image plane")
    if {star_c.channels, star_g.channels, star_l.channels} != {cfg.d}:
        raise ValueError("feature channel counts must match the decoder")

    maps = {"bev": star_l, "rgb": star_c, "gated": star_g}
    queries = []
    for prop in pset.proposals:
        center = np.array([[prop.x, cfg.center_height, prop.z]])
        anchors = {"bev": (prop.iz, prop.ix)}
        for tag, cam in (("rgb", cam_rgb), ("gated", cam_gated)):
            uv, _, ok = project_points(cam, center)
            anchors[tag] = _pixel_of(uv[0], maps[tag]) if ok[0] else None
        q = prop.feature
        for i in range(cfg.n_layers):
            for tag in ATTEND_ORDER:
                if anchors[tag] is None:
                    continue
                row, col = anchors[tag]
                upd = _attend_window(
                    q, maps[tag], row, col,
                    store[f"dec{i}.{tag}.q"], store[f"dec{i}.{tag}.k"],
                    store[f"dec{i}.{tag}.v"],
                    cfg.k_bev if tag == "bev" else cfg.k_camera)
                if upd is not None:
                    q = q + upd
            hidden = ad.tanh(store[f"dec{i}.ffn.w1"] @ q
                             + store[f"dec{i}.ffn.b1"])
            q = q + store[f"dec{i}.ffn.w2"] @ hidden + store[f"dec{i}.ffn.b2"]
        queries.append(q)

    logits = ad.stack([store["head.cls.w"] @ q + store["head.cls.b"]
                       for q in queries])
    reg = ad.stack([store["head.reg.w"] @ q + store["head.reg.b"]
                    for q in queries])

    px = np.array([p.x for p in pset.proposals])
    pz = np.array([p.z for p in pset.proposals])
    centers = ad.stack([ad.getitem(reg, (slice(None), 0)) + px,
                        ad.getitem(reg, (slice(None), 2)),
                        ad.getitem(reg, (slice(None), 1)) + pz], axis=1)
    sizes = ad.exp(ad.getitem(reg, (slice(None), slice(3, 6))))
    yaw_embed = ad.getitem(reg, (slice(None), slice(6, 8)))

    result = DecodeResult(boxes=[], logits=logits, centers=centers,
                          sizes=sizes, yaw_embed=yaw_embed)
    probs = result.probs()
    for i in range(len(queries)):
        cx, cy, cz = centers.data[i]
        w, l, h = sizes.data[i]
        yaw = wrap_yaw(float(np.arctan2(yaw_embed.data[i, 0],
                                        yaw_embed.data[i, 1])))
        best = int(np.argmax(probs[i, :cfg.n_classes]))
        result.boxes.append(Box3D(x=float(cx), y=float(cy), z=float(cz),
                                  w=float(w), l=float(l), h=float(h),
                                  yaw=yaw, cls=best,
                                  score=float(probs[i, best])))
    return result


# ---------------------------------------------------------------------------
# label assignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    w_cls: float = 1.0
    w_reg: float = 0.25
    w_iou: float = 0.25
    w_heat: float = 1.0
    # unmatched predictions are pushed toward no-object at this strength
    no_object: float = 0.1

    def __post_init__(self):
        vals = (self.w_cls, self.w_reg, self.w_iou, self.w_heat,
                self.no_object)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if self.w_cls == 0 and self.w_reg == 0 and self.w_iou == 0:
            raise ValueError("at least one box loss weight must be positive")


def _box_embed(box: Box3D) -> np.ndarray:
    """(x, y, z, w, l, h, sin yaw, cos yaw) as a flat vector."""
    return np.array([box.x, box.y, box.z, box.w, box.l, box.h,
                     np.sin(box.yaw), np.cos(box.yaw)])


def match_cost(boxes: list[Box3D], probs, labels: list[Box3D],
               weights: LossWeights) -> np.ndarray:
    """Assignment cost between scored boxes and labels.

    Entry (i, j) charges the probability shortfall on label j's class, the
    L1 gap on the embedded box parameters, and the BEV IoU shortfall, each
    scaled by its loss weight.  `probs` is (n_boxes, n_classes + 1).
    """
    probs = np.asarray(probs, dtype=np.float64)
    cost = np.zeros((len(boxes), len(labels)))
    for i, box in enumerate(boxes):
        emb = _box_embed(box)
        for j, lab in enumerate(labels):
            cost[i, j] = (weights.w_cls * (1.0 - probs[i, lab.cls])
                          + weights.w_reg
                          * np.abs(emb - _box_embed(lab)).sum()
                          + weights.w_iou * (1.0 - bev_iou(box, lab)))
    return cost


def solve_assignment(cost) -> list[tuple[int, int]]:
    """Minimum-total-cost one-to-one assignment of rows to columns.

    Potentials with shortest augmenting paths, cubic in the larger side.
    Matches min(n_rows, n_cols) pairs; returns them sorted by row index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    n, m = cost.shape
    if n > m:
        return sorted((i, j) for j, i in solve_assignment(cost.T))
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.intp)  # column -> row, 1-based
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta, j1 = inf, 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    return sorted((int(match[j]) - 1, j - 1)
                  for j in range(1, m + 1) if match[j])


def hungarian_match(boxes: list[Box3D], probs, labels: list[Box3D],
                    weights: LossWeights) -> list[tuple[int, int]]:
    """Optimal prediction-to-label pairing under the matching cost.

    Either side empty means no pairs; predictions left out of the result
    are treated as no-object by the loss.
    """
    if not boxes or not labels:
        return []
    return solve_assignment(match_cost(boxes, probs, labels, weights))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _check_assignment(assignment, n_preds: int, n_labels: int) -> None:
    seen_p: set[int] = set()
    seen_l: set[int] = set()
    for pi, li in assignment:
        if not (0 <= pi < n_preds and 0 <= li < n_labels):
            raise ValueError("assignment index out of range")
        if pi in seen_p or li in seen_l:
            raise ValueError("assignment is not one-to-one")
        seen_p.add(pi)
        seen_l.add(li)


def _mean_scalars(parts: list) -> Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total / len(parts)


def _pair_bev_iou(result: DecodeResult, pi: int, lab: Box3D) -> Tensor:
    """Differentiable BEV IoU between decoded box `pi` and a label."""
    x = ad.getitem(result.centers, (pi, 0))
    z = ad.getitem(result.centers, (pi, 2))
    w = ad.getitem(result.sizes, (pi, 0))
    l = ad.getitem(result.sizes, (pi, 1))
    yaw = ad.atan2(ad.getitem(result.yaw_embed, (pi, 0)),
                   ad.getitem(result.yaw_embed, (pi, 1)))
    inter = bev_overlap_area(box_bev_corners(x, z, w, l, yaw),
                             [tuple(p) for p in lab.bev_corners()])
    union = w * l + lab.w * lab.l - inter
    return inter / union


def compute_loss(result: DecodeResult, labels: list[Box3D], assignment,
                 weights: LossWeights, heats=None, heat_targets=None):
    """Weighted composite loss with a per-term breakdown.

    Cross-entropy runs over every box: matched ones toward their label's
    class, unmatched ones toward no-object at `weights.no_object`
    strength.  L1 and BEV IoU terms average over matched pairs only.
    Heatmap supervision joins when `heats` and `heat_targets` are both
    given.  Breakdown values are the raw terms; only the returned scalar
    applies the weights, so reweighting rescales it with the breakdown
    fixed.
    """
    n = len(result.boxes)
    assignment = list(assignment)
    _check_assignment(assignment, n, len(labels))
    if (heats is None) != (heat_targets is None):
        raise ValueError("heats and heat_targets must be given together")
    label_of = dict(assignment)
    no_object = result.logits.shape[1] - 1

    if n:
        probs = ad.softmax(result.logits, axis=1)
        rows = []
        for i in range(n):
            matched = i in label_of
            tgt = labels[label_of[i]].cls if matched else no_object
            p = ad.clip(ad.getitem(probs, (i, tgt)), PROB_FLOOR, None)
            nll = -ad.log(p)
            rows.append(nll if matched else nll * weights.no_object)
        cls_term = _mean_scalars(rows)
    else:
        cls_term = ad.tensor(0.0)

    if assignment:
        reg_parts, iou_parts = [], []
        for pi, li in assignment:
            lab = labels[li]
            pred = ad.concatenate([ad.getitem(result.centers, pi),
                                   ad.getitem(result.sizes, pi),
                                   ad.getitem(result.yaw_embed, pi)])
            reg_parts.append(ad.tsum(ad.absval(pred - _box_embed(lab))))
            iou_parts.append(1.0 - _pair_bev_iou(result, pi, lab))
        reg_term = _mean_scalars(reg_parts)
        iou_term = _mean_scalars(iou_parts)
    else:
        reg_term = ad.tensor(0.0)
        iou_term = ad.tensor(0.0)

    total = (weights.w_cls * cls_term + weights.w_reg * reg_term
             + weights.w_iou * iou_term)
    breakdown = {"cls": float(cls_term.data), "reg": float(reg_term.data),
                 "iou": float(iou_term.data), "heat": 0.0}
    if heats is not None:
        heat_term = heat_loss(heats, heat_targets)
        total = total + weights.w_heat * heat_term
        breakdown["heat"] = float(heat_term.data)
    breakdown["total"] = float(total.data)
    return total, breakdown


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    n_steps: int
    lr: float = 1e-2
    optimizer: str = "adam"  # "adam" or "momentum"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("adam", "momentum"):
            raise ValueError("optimizer must be 'adam' or 'momentum'")


def train(loss_fn, stores, config: TrainConfig) -> list[dict]:
    """Drive every parameter in `stores` by gradient descent.

    `loss_fn(step)` rebuilds the graph and returns (scalar loss, per-term
    dict); batching order is the caller's business, so determinism reduces
    to calling this with the same stores, config, and loss_fn.  The loss
    is recorded before each update: record 0 is the untouched initial
    loss.  Parameters update in sorted name order within each store.
    A non-finite loss aborts with the offending step in the message.
    """
    if isinstance(stores, ParamStore):
        stores = [stores]
    slots = [(s, name) for s in stores for name in s.names()]
    m = [np.zeros(s[name].shape) for s, name in slots]
    v = [np.zeros(s[name].shape) for s, name in slots]
    records = []
    for step in range(config.n_steps):
        for s in stores:
            s.zero_grad()
        loss, terms = loss_fn(step)
        if not np.isfinite(loss.data):
            raise RuntimeError(
                f"training diverged: loss {loss.data!r} at step {step}")
        records.append({"step": step, **terms, "total": float(loss.data)})
        loss.backward()
        t = step + 1
        for slot, (s, name) in enumerate(slots):
            p = s[name]
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            g = np.asarray(g, dtype=np.float64).reshape(p.data.shape)
            if config.optimizer == "adam":
                m[slot] = config.beta1 * m[slot] + (1 - config.beta1) * g
                v[slot] = config.beta2 * v[slot] + (1 - config.beta2) * g * g
                m_hat = m[slot] / (1 - config.beta1 ** t)
                v_hat = v[slot] / (1 - config.beta2 ** t)
                p.data -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
            else:
                m[slot] = config.momentum * m[slot] + g
                p.data -= config.lr * m[slot]
    return records


def loss_log_csv(records: list[dict]) -> str:
    """CSV loss log: step, total, then the remaining terms sorted."""
    out = io.StringIO()
    writer = csv.writer(out)
    if not records:
        writer.writerow(["step", "total"])
        return out.getvalue()
    extras = sorted(k for k in records[0] if k not in ("step", "total"))
    writer.writerow(["step", "total", *extras])
    for rec in records:
        writer.writerow([rec["step"], repr(rec["total"]),
                         *(repr(rec[k]) for k in extras)])
    return out.getvalue()
