"""Teacher construction and EMA updates.

Three scopes:
  full      - teacher is a deep copy of encoder + head, both EMA-averaged
  head_only - teacher encoder IS the student encoder (same object); only the
              head keeps an EMA shadow copy
  frozen    - teacher loaded from a checkpoint and never updated (distillation)
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ValidationError
from .model import ImageEncoder, ProjectionHead

SCOPES = ("full", "head_only", "frozen")


@dataclass
class EmaConfig:
    scope: str = "full"
    momentum: float = 0.996
    schedule: str = "constant"   # constant | cosine (ramp to 1)

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ValidationError(f"ema scope must be one of {SCOPES}, got {self.scope!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"ema momentum must be in [0,1), got {self.momentum}")
        if self.schedule not in ("constant", "cosine"):
            raise ValidationError(f"unknown momentum schedule {self.schedule!r}")

    def momentum_at(self, step: int, total_steps: int) -> float:
        if self.schedule == "constant" or total_steps <= 0:
            return self.momentum
        t = min(step / total_steps, 1.0)
        return 1.0 - (1.0 - self.momentum) * 0.5 * (math.cos(math.pi * t) + 1.0)


class TeacherView:
    def __init__(self, encoder: ImageEncoder, head: ProjectionHead, scope: str,
                 student_encoder: ImageEncoder | None = None,
                 student_head: ProjectionHead | None = None):
        self.encoder = encoder
        self.head = head
        self.scope = scope
        self._student_encoder = student_encoder
        self._student_head = student_head


def _frozen_copy(module: nn.Module) -> nn.Module:
    out = copy.deepcopy(module)
    for p in out.parameters():
        p.requires_grad_(False)
    return out


def make_teacher(student_encoder: ImageEncoder, student_head: ProjectionHead,
                 config: EmaConfig,
                 frozen_modules: tuple[ImageEncoder, ProjectionHead] | None = None) -> TeacherView:
    """Build a teacher view per scope. For frozen scope, pass the modules loaded
    from the teacher checkpoint (see trainer.load_teacher_modules)."""
    if config.scope == "frozen":
        if frozen_modules is None:
            raise ValidationError("frozen scope requires a teacher checkpoint")
        enc, head = frozen_modules
        for p in list(enc.parameters()) + list(head.parameters()):
            p.requires_grad_(False)
        return TeacherView(enc, head, "frozen")
    if frozen_modules is not None:
        raise ValidationError(f"scope {config.scope!r} does not take a frozen checkpoint")
    if config.scope == "full":
        return TeacherView(_frozen_copy(student_encoder), _frozen_copy(student_head),
                           "full", student_encoder, student_head)
    # head_only: encoder aliased by reference, the whole point of the scope
    return TeacherView(student_encoder, _frozen_copy(student_head),
                       "head_only", student_encoder, student_head)


@torch.no_grad()
def _ema_tensors(teacher: nn.Module, student: nn.Module, lam: float) -> None:
    for t, s in zip(teacher.parameters(), student.parameters()):
        t.mul_(lam).add_(s, alpha=1.0 - lam)
    for t, s in zip(teacher.buffers(), student.buffers()):
        t.copy_(s)


def ema_update(teacher: TeacherView, lam: float) -> TeacherView:
    if teacher.scope == "frozen":
        raise ValidationError("ema_update called on a frozen teacher")
    if not 0.0 <= lam < 1.0:
        raise ValidationError(f"momentum must be in [0,1), got {lam}")
    _ema_tensors(teacher.head, teacher._student_head, lam)
    if teacher.scope == "full":
        _ema_tensors(teacher.encoder, teacher._student_encoder, lam)
    return teacher


def param_checksum(*modules: nn.Module) -> str:
    h = hashlib.sha256()
    for module in modules:
        for name, p in sorted(module.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _n_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def count_trainable_params(student, ema_config: EmaConfig) -> dict:
    """Parameter accounting for a student bundle (encoder/text/head/logit_scale).

    reduction_fraction = shadow parameters head_only avoids, relative to the
    full-EMA total of trainable + shadow. Counts parameters only, not
    optimizer state.
    """
    enc = _n_params(student.encoder)
    txt = _n_params(student.text)
    head = _n_params(student.head)
    scale = student.logit_scale.numel()
    trainable = enc + txt + head + scale

    full_shadow = enc + head
    if ema_config.scope == "full":
        shadow = full_shadow
    elif ema_config.scope == "head_only":
        shadow = head
    else:
        shadow = 0
    reduction = (full_shadow - head) / (trainable + full_shadow)
    return {
        "trainable": trainable,
        "ema_shadow": shadow,
        "total": trainable + shadow,
        "reduction_fraction": reduction,
        "breakdown": {
            "image_encoder": enc,
            "text_encoder": txt,
            "projection_head": head,
            "logit_scale": scale,
        },
    }


def param_table(student, ema_config: EmaConfig) -> list[dict]:
    """Per-tensor rows for the `params` CLI subcommand."""
    shadowed_prefixes = {
        "full": ("encoder.", "head."),
        "head_only": ("head.",),
        "frozen": (),
    }[ema_config.scope]
    rows = []
    for name, p in student.named_parameters():
        rows.append({
            "name": name,
            "shape": tuple(p.shape),
            "trainable": bool(p.requires_grad),
            "shadowed": name.startswith(shadowed_prefixes),
        })
    return rows
