"""Losses, the answer head, staged training and checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import mmf, scoring, tge
from .numerics import relu, softmax_rows, softmax_rows_vjp

EPS_LOG = 1e-12
EPS_DICE = 1e-7
N_CELLS = 9
CHECKPOINT_VERSION = 1

COMPONENTS = {"tge": "tge.", "decoder": "decoder.", "mmf": "mmf.", "head": "head."}

_STAGE_RULES = {
    1: (frozenset({"tge", "head"}), (1.0, 0.0, 0.0)),
    2: (frozenset({"decoder", "mmf", "head"}), (1.0, 1.0, 1.0)),
    3: (frozenset({"tge", "mmf", "head"}), (1.0, 0.0, 0.0)),
}


class DivergenceError(RuntimeError):
    def __init__(self, stage: int, step: int, value: float):
        super().__init__(f"non-finite loss {value} at stage {stage}, step {step}")
        self.stage = stage
        self.step = step


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"focal alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"focal gamma must be >= 0, got {self.gamma}")


def _check_one_hot(targets: np.ndarray):
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim != 2 or not np.all((t == 0) | (t == 1)) or not np.all(t.sum(axis=1) == 1):
        raise ValueError("targets must be one-hot rows")
    return t


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean over rows of ``-sum_i y_i log p_i`` with ``p`` clamped to [1e-12, 1]."""
    t = _check_one_hot(targets)
    p = np.clip(probs, EPS_LOG, 1.0)
    return float(-(t * np.log(p)).sum() / t.shape[0])


def cross_entropy_vjp(probs: np.ndarray, targets: np.ndarray, g: float = 1.0) -> np.ndarray:
    t = np.asarray(targets, dtype=np.float64)
    inside = (probs >= EPS_LOG) & (probs <= 1.0)
    return np.where(inside, -g * t / np.clip(probs, EPS_LOG, 1.0) / t.shape[0], 0.0)


def _p_true(m: np.ndarray, gt: np.ndarray):
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0.0) or np.any(m > 1.0) or not np.all(np.isfinite(m)):
        raise ValueError("focal_loss: predictions must lie in [0, 1]")
    pos = np.asarray(gt) > 0.5
    pt = np.where(pos, m, 1.0 - m)
    return pos, pt


def focal_loss(m_pred: np.ndarray, gt: np.ndarray, cfg: FocalConfig = FocalConfig()) -> float:
    """``-(1/n) sum alpha (1 - p_t)^gamma log p_t`` with ``p_t`` the probability of the true class."""
    _, pt = _p_true(m_pred, gt)
    ptc = np.clip(pt, EPS_LOG, 1.0)
    return float(-(cfg.alpha * (1.0 - ptc) ** cfg.gamma * np.log(ptc)).mean())


def focal_loss_vjp(m_pred, gt, cfg: FocalConfig = FocalConfig(), g: float = 1.0) -> np.ndarray:
    pos, pt = _p_true(m_pred, gt)
    ptc = np.clip(pt, EPS_LOG, 1.0)
    one_m = 1.0 - ptc
    if cfg.gamma == 0.0:
        d_pt = -cfg.alpha / ptc
    else:
        d_pt = -cfg.alpha * (
            -cfg.gamma * one_m ** (cfg.gamma - 1.0) * np.log(ptc) + one_m**cfg.gamma / ptc
        )
    d_pt = np.where(pt >= EPS_LOG, d_pt, 0.0) * (g / pt.size)
    return np.where(pos, d_pt, -d_pt)


def dice_loss(m_pred: np.ndarray, gt: np.ndarray) -> float:
    """Soft Dice: ``1 - (2 sum p g + eps) / (sum p^2 + sum g^2 + eps)``."""
    p = np.asarray(m_pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"dice_loss: shape {p.shape} != {g.shape}")
    num = 2.0 * (p * g).sum() + EPS_DICE
    den = (p * p).sum() + (g * g).sum() + EPS_DICE
    return float(1.0 - num / den)


def dice_loss_vjp(m_pred, gt, g_out: float = 1.0) -> np.ndarray:
    p = np.asarray(m_pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    num = 2.0 * (p * g).sum() + EPS_DICE
    den = (p * p).sum() + (g * g).sum() + EPS_DICE
    return -g_out * (2.0 * g * den - num * 2.0 * p) / (den * den)


# ---------------------------------------------------------------------------
# Stage plans and schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StagePlan:
    stage: int
    epochs: int = 20
    base_lr: float = 0.5
    warmup_frac: float = 0.05
    batch_size: int = 16
    trainable: frozenset = field(default=None)  # type: ignore[assignment]
    lambdas: tuple[float, float, float] = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.stage not in _STAGE_RULES:
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        trainable, lambdas = _STAGE_RULES[self.stage]
        if self.trainable is None:
            object.__setattr__(self, "trainable", trainable)
        if self.lambdas is None:
            object.__setattr__(self, "lambdas", lambdas)
        if frozenset(self.trainable) != trainable:
            raise ValueError(f"stage {self.stage} must train exactly {sorted(trainable)}")
        if tuple(self.lambdas) != lambdas:
            raise ValueError(f"stage {self.stage} must use lambdas {lambdas}")
        if self.epochs < 0 or self.batch_size < 1 or self.base_lr < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and base_lr >= 0 required")

    @property
    def uses_masks(self) -> bool:
        # the first stage sees image-level features only
        return self.stage != 1

    def prefixes(self) -> tuple[str, ...]:
        return tuple(COMPONENTS[c] for c in sorted(self.trainable))


def default_plans(epochs: int = 20, base_lr: float = 0.5, batch_size: int = 16) -> list[StagePlan]:
    return [StagePlan(s, epochs=epochs, base_lr=base_lr, batch_size=batch_size) for s in (1, 2, 3)]


def total_loss(l_c: float, l_f: float, l_d: float, plan: StagePlan) -> float:
    lc, lf, ld = plan.lambdas
    return lc * l_c + lf * l_f + ld * l_d


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warm-up to ``base_lr`` followed by a half-cosine decay to zero."""
    if not 0 <= warmup_steps < total_steps:
        raise ValueError(f"need 0 <= warmup_steps ({warmup_steps}) < total_steps ({total_steps})")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def warmup_steps_for(total_steps: int, frac: float) -> int:
    return min(total_steps - 1, max(0, int(round(frac * total_steps))))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelDims:
    c1: int = 32
    c2: int = 32
    c3: int = 16
    l3: int = 4
    c_mid: int = 8
    head_hidden: int = 64
    n_experts: int = 2

    @property
    def c_emb(self) -> int:
        return 4 * self.c3


def init_head(rng, c_emb: int, hidden: int) -> dict[str, np.ndarray]:
    return {
        "head.w1": rng.standard_normal((2 * c_emb, hidden)) * np.sqrt(2.0 / (2 * c_emb)),
        "head.b1": np.zeros(hidden),
        "head.w2": rng.standard_normal((hidden, 1 + N_CELLS)) / np.sqrt(hidden),
        "head.b2": np.zeros(1 + N_CELLS),
    }


def init_model(seed: int, dims: ModelDims = ModelDims()) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 0x1AD6])
    params = {}
    params.update(scoring.init_decoder(rng, dims.c3, dims.c2, scale=4.0))
    params.update(tge.init_tge(rng, dims.c1, dims.c2, dims.c_emb, dims.n_experts))
    params.update(mmf.init_mmf(rng, dims.c3, dims.l3, dims.c_mid))
    params.update(init_head(rng, dims.c_emb, dims.head_hidden))
    return params


@dataclass(frozen=True)
class TextContext:
    """Prompt-side constants shared by every sample of a class."""

    embeddings: np.ndarray  # L2_total x C2
    abnormal_mask: np.ndarray  # bool
    f_win_cat: np.ndarray  # n_categories x C2
    out_size: tuple[int, int]

    @classmethod
    def from_prompts(cls, pm, out_size) -> "TextContext":
        return cls(pm.embeddings, np.asarray(pm.abnormal_mask, dtype=bool), pm.category_means(), tuple(out_size))


@dataclass
class Batch:
    f_img: np.ndarray  # B x C1
    levels: list[np.ndarray]  # 4 x (B, h, w, C3)
    gt: np.ndarray  # B x H x W
    label: np.ndarray  # B, 1 = abnormal
    cell: np.ndarray  # B, primary cell id or -1

    def __len__(self):
        return self.f_img.shape[0]


@dataclass
class Outputs:
    fused: np.ndarray
    level_maps: list[np.ndarray]
    logits: np.ndarray  # B x 10
    e_img: np.ndarray
    expert: np.ndarray


def forward(params, batch: Batch, ctx: TextContext, uses_masks: bool = True):
    fused, level_maps, dcache = scoring.decoder_forward(
        batch.levels, ctx.embeddings, ctx.abnormal_mask, params, ctx.out_size
    )
    if uses_masks:
        expert, mcaches = mmf.mmf_forward(params, level_maps)
    else:
        expert = np.broadcast_to(params["mmf.e_base"], (len(batch),) + params["mmf.e_base"].shape)
        mcaches = None
    pooled = expert.mean(axis=-2)
    e_img, tcache = tge.tge_forward(params, batch.f_img[:, None, :], ctx.f_win_cat)
    e_img = e_img[:, 0, :]
    x = np.concatenate([e_img, pooled], axis=-1)
    z = x @ params["head.w1"] + params["head.b1"]
    h = relu(z)
    logits = h @ params["head.w2"] + params["head.b2"]
    out = Outputs(fused, level_maps, logits, e_img, expert)
    cache = (dcache, mcaches, tcache, x, z, h, uses_masks)
    return out, cache


def answer_probs(logits: np.ndarray):
    """Presence probabilities ``softmax([0, z])`` and cell probabilities."""
    two = np.stack([np.zeros(logits.shape[0]), logits[:, 0]], axis=-1)
    return softmax_rows(two), softmax_rows(logits[:, 1:])


def losses(out: Outputs, batch: Batch, focal: FocalConfig = FocalConfig()):
    """Returns ``(l_c, l_f, l_d, cotangent builders)``."""
    p_presence, p_cells = answer_probs(out.logits)
    y_presence = np.eye(2)[batch.label.astype(int)]
    abn = batch.cell >= 0
    n_tok = len(batch) + int(abn.sum())
    l_c = cross_entropy(p_presence, y_presence) * len(batch)
    if abn.any():
        y_cells = np.eye(N_CELLS)[batch.cell[abn]]
        l_c += cross_entropy(p_cells[abn], y_cells) * int(abn.sum())
    l_c /= n_tok
    l_f = focal_loss(out.fused, batch.gt, focal)
    l_d = float(np.mean([dice_loss(out.fused[i], batch.gt[i]) for i in range(len(batch))]))
    return l_c, l_f, l_d, (p_presence, y_presence, p_cells, abn, n_tok)


def backward(params, out: Outputs, cache, batch: Batch, ctx, plan: StagePlan, aux, focal=FocalConfig()):
    dcache, mcaches, tcache, x, z, h, uses_masks = cache
    p_presence, y_presence, p_cells, abn, n_tok = aux
    lam_c, lam_f, lam_d = plan.lambdas
    train = plan.trainable
    grads: dict[str, np.ndarray] = {}

    # answer cross-entropy -> logits
    g_logits = np.zeros_like(out.logits)
    g_pp = cross_entropy_vjp(p_presence, y_presence, lam_c * len(batch) / n_tok)
    g_logits[:, 0] = softmax_rows_vjp(p_presence, g_pp)[:, 1]
    if abn.any():
        y_cells = np.eye(N_CELLS)[batch.cell[abn]]
        g_pc = cross_entropy_vjp(p_cells[abn], y_cells, lam_c * int(abn.sum()) / n_tok)
        g_logits[abn, 1:] = softmax_rows_vjp(p_cells[abn], g_pc)

    grads["head.w2"] = h.T @ g_logits
    grads["head.b2"] = g_logits.sum(axis=0)
    gz = (g_logits @ params["head.w2"].T) * (z > 0)
    grads["head.w1"] = x.T @ gz
    grads["head.b1"] = gz.sum(axis=0)
    gx = gz @ params["head.w1"].T
    c_emb = out.e_img.shape[-1]
    g_eimg, g_pooled = gx[:, :c_emb], gx[:, c_emb:]

    if "tge" in train:
        grads.update(tge.tge_backward(params, tcache, g_eimg[:, None, :]))

    g_level_maps = None
    n_rows = out.expert.shape[-2]
    g_expert = np.broadcast_to(g_pooled[:, None, :] / n_rows, out.expert.shape)
    if uses_masks and ("mmf" in train or "decoder" in train):
        mgrads, g_level_maps = mmf.mmf_backward(params, mcaches, g_expert, need_map_grads="decoder" in train)
        if "mmf" in train:
            grads.update(mgrads)
    elif "mmf" in train:
        grads["mmf.e_base"] = g_expert.sum(axis=0)

    if "decoder" in train:
        g_fused = np.zeros_like(out.fused)
        if lam_f:
            g_fused += focal_loss_vjp(out.fused, batch.gt, focal, lam_f)
        if lam_d:
            for i in range(len(batch)):
                g_fused[i] += dice_loss_vjp(out.fused[i], batch.gt[i], lam_d / len(batch))
        grads.update(scoring.decoder_backward(params, dcache, g_fused, g_level_maps))

    prefixes = plan.prefixes()
    return {k: v for k, v in grads.items() if k.startswith(prefixes)}


def loss_and_grads(params, batch, ctx, plan: StagePlan, focal=FocalConfig()):
    out, cache = forward(params, batch, ctx, plan.uses_masks)
    l_c, l_f, l_d, aux = losses(out, batch, focal)
    grads = backward(params, out, cache, batch, ctx, plan, aux, focal)
    return (l_c, l_f, l_d), grads


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    seed: int
    stage: int  # last completed stage, 0 for an untrained initialisation

    def manifest(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "stage": self.stage,
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in self.params.items()],
        }

    def blob(self) -> bytes:
        return b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in self.params.values())

    def save(self, path: str | Path) -> Path:
        """Write ``path`` (JSON manifest) and ``path`` with suffix ``.f64`` (tensor blob)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.with_suffix(".f64").write_bytes(self.blob())
        path.write_text(json.dumps(self.manifest(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        manifest = json.loads(path.read_text(encoding="utf-8"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: incompatible checkpoint version {manifest.get('version')!r}")
        raw = path.with_suffix(".f64").read_bytes()
        params, offset = {}, 0
        for t in manifest["tensors"]:
            shape = tuple(t["shape"])
            n = int(np.prod(shape)) if shape else 1
            chunk = raw[offset : offset + 8 * n]
            if len(chunk) != 8 * n:
                raise ValueError(f"{path}: tensor blob too short for {t['name']}")
            params[t["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
            offset += 8 * n
        if offset != len(raw):
            raise ValueError(f"{path}: {len(raw) - offset} trailing bytes in tensor blob")
        return cls(params, int(manifest["seed"]), int(manifest["stage"]))

    def copy(self) -> "Checkpoint":
        return Checkpoint({k: v.copy() for k, v in self.params.items()}, self.seed, self.stage)


def dims_from_params(params) -> ModelDims:
    c3, c2 = params["decoder.w0"].shape
    return ModelDims(
        c1=params["tge.attn.wq"].shape[0],
        c2=c2,
        c3=c3,
        l3=params["mmf.e_base"].shape[0],
        c_mid=params["mmf.l0.c1.k"].shape[-1],
        head_hidden=params["head.w1"].shape[1],
        n_experts=tge.n_experts(params),
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainingSet:
    """Encoded samples; features are computed once since the encoder is frozen."""

    f_img: np.ndarray
    levels: list[np.ndarray]
    gt: np.ndarray
    label: np.ndarray
    cell: np.ndarray

    def __len__(self):
        return self.f_img.shape[0]

    def batch(self, idx) -> Batch:
        return Batch(self.f_img[idx], [l[idx] for l in self.levels], self.gt[idx], self.label[idx], self.cell[idx])


@dataclass
class LogRow:
    step: int
    stage: int
    lr: float
    l_c: float
    l_f: float
    l_d: float


LOG_COLUMNS = ("step", "stage", "lr", "L_c", "L_f", "L_d")


def run_stage(
    ckpt: Checkpoint,
    data: TrainingSet,
    ctx: TextContext,
    plan: StagePlan,
    seed: int,
    focal: FocalConfig = FocalConfig(),
    log: Callable[[LogRow], None] | None = None,
) -> Checkpoint:
    """Plain gradient descent over one stage; parameters outside the stage stay untouched."""
    if ckpt.stage != plan.stage - 1:
        raise ValueError(f"stage {plan.stage} must follow stage {plan.stage - 1}, checkpoint is at {ckpt.stage}")
    params = {k: v.copy() for k, v in ckpt.params.items()}
    n = len(data)
    n_batches = math.ceil(n / plan.batch_size) if n else 0
    total = plan.epochs * n_batches
    warm = warmup_steps_for(total, plan.warmup_frac) if total else 0
    step = 0
    for epoch in range(plan.epochs):
        order = np.random.default_rng([seed, plan.stage, epoch]).permutation(n)
        for b in range(n_batches):
            idx = order[b * plan.batch_size : (b + 1) * plan.batch_size]
            (l_c, l_f, l_d), grads = loss_and_grads(params, data.batch(idx), ctx, plan, focal)
            value = total_loss(l_c, l_f, l_d, plan)
            if not math.isfinite(value):
                raise DivergenceError(plan.stage, step, value)
            lr = lr_at(step, total, warm, plan.base_lr)
            for k, g in grads.items():
                params[k] -= lr * g
            if log is not None:
                log(LogRow(step, plan.stage, lr, l_c, l_f, l_d))
            step += 1
    return Checkpoint(params, ckpt.seed, plan.stage)


def train(
    data: TrainingSet,
    ctx: TextContext,
    plans: Sequence[StagePlan],
    seed: int,
    dims: ModelDims = ModelDims(),
    init: Checkpoint | None = None,
    focal: FocalConfig = FocalConfig(),
    log: Callable[[LogRow], None] | None = None,
) -> list[Checkpoint]:
    """Run the stages in ``plans`` in order; returns one checkpoint per stage."""
    ckpt = init or Checkpoint(init_model(seed, dims), seed, 0)
    out = []
    for plan in plans:
        ckpt = run_stage(ckpt, data, ctx, plan, seed, focal, log)
        out.append(ckpt)
    return out
