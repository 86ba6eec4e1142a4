"""Training objectives: multi-crop views, patch masking, caption sampling,
contrastive / global / patch-level losses, and teacher-center maintenance."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import NumericError, ValidationError

LOG_EPS = 1e-8  # floor inside cross-entropy logs, below all test tolerances


@dataclass
class ViewSet:
    global_view: torch.Tensor           # (3, Hg, Wg)
    local_views: list[torch.Tensor]     # M x (3, Hl, Wl)
    crop_params: list[dict]             # per view: {box: (x0, y0, x1, y1), flip: bool}


@dataclass
class MaskVector:
    m: torch.Tensor   # (N,) binary
    ratio: float

    def __post_init__(self):
        n_ones = int(self.m.sum().item())
        expected = round(self.ratio * self.m.numel())
        if n_ones != expected:
            raise ValidationError(
                f"mask popcount {n_ones} != round(ratio*N) = {expected}")


@dataclass
class LossWeights:
    alpha: float = 1.0   # global self-distillation weight
    beta: float = 2.0    # patch-level weight
    # contrastive weight is fixed at 1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("loss weights must be nonnegative")


@dataclass
class CaptionStrategy:
    mode: str = "two_cls_sampled"   # one_cls_pool | two_cls_fixed | two_cls_sampled
    pool_cls1: tuple[str, ...] = ("short",)
    pool_cls2: tuple[str, ...] = ("medium", "long")

    def __post_init__(self):
        if self.mode not in ("one_cls_pool", "two_cls_fixed", "two_cls_sampled"):
            raise ValidationError(f"unknown caption strategy mode {self.mode!r}")
        if not self.pool_cls1:
            raise ValidationError("cls1 caption pool is empty")
        if self.mode != "one_cls_pool" and not self.pool_cls2:
            raise ValidationError("cls2 caption pool is empty")
        for pool in (self.pool_cls1, self.pool_cls2):
            for g in pool:
                if g not in ("short", "medium", "long"):
                    raise ValidationError(f"unknown granularity {g!r} in caption pool")


def _rand(rng: torch.Generator, *shape) -> torch.Tensor:
    return torch.rand(*shape, generator=rng)


def _crop_box(h: int, w: int, area_lo: float, area_hi: float,
              rng: torch.Generator) -> tuple[int, int, int, int]:
    for _ in range(20):
        area_frac = area_lo + (area_hi - area_lo) * _rand(rng, 1).item()
        aspect = 0.75 + 0.58 * _rand(rng, 1).item()  # ~[3/4, 4/3]
        ch = int(round((h * w * area_frac * aspect) ** 0.5))
        cw = int(round((h * w * area_frac / aspect) ** 0.5))
        ch, cw = min(max(ch, 1), h), min(max(cw, 1), w)
        if ch <= h and cw <= w:
            y0 = int(_rand(rng, 1).item() * (h - ch + 1))
            x0 = int(_rand(rng, 1).item() * (w - cw + 1))
            return (x0, y0, x0 + cw, y0 + ch)
    return (0, 0, w, h)


def _crop_resize(image: torch.Tensor, box, out_size: int, flip: bool) -> torch.Tensor:
    x0, y0, x1, y1 = box
    view = image[:, y0:y1, x0:x1]
    view = F.interpolate(view.unsqueeze(0), size=(out_size, out_size),
                         mode="bilinear", align_corners=False).squeeze(0)
    if flip:
        view = torch.flip(view, dims=[2])
    return view


def sample_views(image: torch.Tensor, m: int, rng: torch.Generator,
                 global_res: int, local_res: int) -> ViewSet:
    """One global crop (>= 40% area) plus M local crops (5-40% area),
    each with probability-1/2 horizontal flip."""
    if m < 0:
        raise ValidationError("local view count must be >= 0")
    if local_res >= global_res:
        raise ValidationError("local resolution must be below global resolution")
    _, h, w = image.shape
    if h < local_res or w < local_res:
        raise ValidationError(f"image {h}x{w} smaller than local resolution {local_res}")

    views: list[torch.Tensor] = []
    params: list[dict] = []
    box = _crop_box(h, w, 0.4, 1.0, rng)
    flip = bool(_rand(rng, 1).item() < 0.5)
    global_view = _crop_resize(image, box, global_res, flip)
    params.append({"box": box, "flip": flip, "kind": "global"})
    for _ in range(m):
        box = _crop_box(h, w, 0.05, 0.4, rng)
        flip = bool(_rand(rng, 1).item() < 0.5)
        views.append(_crop_resize(image, box, local_res, flip))
        params.append({"box": box, "flip": flip, "kind": "local"})
    return ViewSet(global_view=global_view, local_views=views, crop_params=params)


def sample_mask(n: int, ratio: float, rng: torch.Generator) -> MaskVector:
    """Exactly round(ratio*N) masked positions, uniformly placed."""
    if not 0.0 <= ratio <= 1.0:
        raise ValidationError(f"mask ratio must be in [0,1], got {ratio}")
    k = round(ratio * n)
    m = torch.zeros(n)
    if k > 0:
        idx = torch.randperm(n, generator=rng)[:k]
        m[idx] = 1.0
    return MaskVector(m=m, ratio=ratio)


def sample_caption_pair(captions, strategy: CaptionStrategy,
                        rng: torch.Generator) -> tuple[str, str | None]:
    """Pick caption text(s) per strategy. Returns (cls1 text, cls2 text | None)."""
    def pick(pool: tuple[str, ...]) -> str:
        i = int(_rand(rng, 1).item() * len(pool)) % len(pool)
        return getattr(captions, pool[i])

    if strategy.mode == "one_cls_pool":
        return pick(strategy.pool_cls1), None
    if strategy.mode == "two_cls_fixed":
        return getattr(captions, strategy.pool_cls1[0]), getattr(captions, strategy.pool_cls2[0])
    return pick(strategy.pool_cls1), pick(strategy.pool_cls2)


def clip_loss(img: torch.Tensor, txt: torch.Tensor, logit_scale: torch.Tensor | float) -> torch.Tensor:
    """Symmetric InfoNCE over the batch similarity matrix; diagonal = positives."""
    if img.shape[0] == 0:
        raise ValidationError("empty batch")
    if img.shape[0] != txt.shape[0]:
        raise ValidationError("image/text batch sizes differ")
    logits = logit_scale * img @ txt.t()
    targets = torch.arange(img.shape[0], device=img.device)
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.t(), targets))


def _xent(teacher: torch.Tensor, student: torch.Tensor) -> torch.Tensor:
    # teacher/student are probability distributions over prototypes (last dim)
    return -(teacher * torch.log(student.clamp_min(LOG_EPS))).sum(dim=-1)


def dino_loss(teacher_dist: torch.Tensor, student_dists: list[torch.Tensor]) -> torch.Tensor:
    """Sum over local crops of teacher-student cross-entropy on global prototypes,
    batch-averaged. Teacher must already be detached."""
    total = None
    for s in student_dists:
        if s.shape[-1] != teacher_dist.shape[-1]:
            raise ValidationError("prototype dimension mismatch")
        term = _xent(teacher_dist, s)
        total = term if total is None else total + term
    if total is None:
        return teacher_dist.new_zeros(())
    return total.mean()


def ibot_loss(teacher_patch_dists: torch.Tensor, student_patch_dists: torch.Tensor,
              mask: torch.Tensor) -> torch.Tensor:
    """Masked-token cross-entropy: - sum_i m_i t_i . log s_i, batch-averaged."""
    if teacher_patch_dists.shape != student_patch_dists.shape:
        raise ValidationError("teacher/student patch distribution shapes differ")
    m = mask.m if isinstance(mask, MaskVector) else mask
    if m.shape[-1] != teacher_patch_dists.shape[-2]:
        raise ValidationError("mask length does not match patch count")
    per_token = _xent(teacher_patch_dists, student_patch_dists)  # (..., N)
    return (per_token * m).sum(dim=-1).mean()


def ibot_pp_loss(teacher_patch_dists: torch.Tensor,
                 student_patch_dists: torch.Tensor) -> torch.Tensor:
    """All-token cross-entropy, masked and visible alike."""
    if teacher_patch_dists.shape != student_patch_dists.shape:
        raise ValidationError("teacher/student patch distribution shapes differ")
    return _xent(teacher_patch_dists, student_patch_dists).sum(dim=-1).mean()


def combined_loss(clip: torch.Tensor, dino: torch.Tensor, patch: torch.Tensor,
                  w: LossWeights) -> torch.Tensor:
    for name, v in (("clip", clip), ("dino", dino), ("patch", patch)):
        if not torch.isfinite(torch.as_tensor(v)).all():
            raise NumericError(f"non-finite {name} loss component")
    return clip + w.alpha * dino + w.beta * patch


def update_center(center: torch.Tensor, teacher_logits_batch: torch.Tensor,
                  momentum: float) -> torch.Tensor:
    """EMA of teacher logits used for centering."""
    if not 0.0 <= momentum < 1.0:
        raise ValidationError(f"center momentum must be in [0,1), got {momentum}")
    if teacher_logits_batch.numel() == 0:
        raise ValidationError("empty teacher logits batch")
    batch_mean = teacher_logits_batch.reshape(-1, teacher_logits_batch.shape[-1]).mean(dim=0)
    return momentum * center + (1.0 - momentum) * batch_mean
