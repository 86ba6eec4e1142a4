"""Training orchestration: pretraining and distillation loops, optimizer and
schedule construction, checkpointing, and deterministic per-step RNG streams.

Every random decision derives from (seed, step, sample index), so a resumed
run continues bit-identically and batch parallelism cannot change results.
"""

from __future__ import annotations

import dataclasses
import difflib
import json
import math
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch

from . import losses
from .data import ShapesDataset
from .ema import EmaConfig, TeacherView, ema_update, make_teacher
from .errors import NumericError, ValidationError
from .losses import (CaptionStrategy, LossWeights, clip_loss, combined_loss,
                     dino_loss, ibot_loss, ibot_pp_loss, sample_caption_pair,
                     sample_mask, sample_views, update_center)
from .model import (ImageEncoder, ImageEncoderConfig, StudentModel,
                    TextEncoderConfig, Tokenizer, project_prototypes)

CHECKPOINT_VERSION = 1

METRIC_KEYS = ("loss/clip", "loss/dino", "loss/patch",
               "loss/patch_visible", "loss/patch_masked", "loss/total")


@dataclass
class OptimizerConfig:
    name: str = "adamw"          # adamw | adafactor
    lr: float = 1e-3
    weight_decay: float = 0.04
    warmup_frac: float = 0.05
    lr_floor: float = 1e-6

    def __post_init__(self):
        if self.name not in ("adamw", "adafactor"):
            raise ValidationError(f"unknown optimizer {self.name!r}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValidationError("warmup_frac must be in [0,1)")


@dataclass
class ResolutionSchedule:
    stage1_global: int = 64
    stage1_local: int = 24
    stage2_global: int = 96
    stage2_local: int = 32
    switch_step: int | None = None   # defaults to 90% of steps

    def at(self, step: int, total_steps: int) -> tuple[int, int]:
        switch = self.switch_step if self.switch_step is not None else int(0.9 * total_steps)
        if step >= switch:
            return self.stage2_global, self.stage2_local
        return self.stage1_global, self.stage1_local

    def switch_at(self, total_steps: int) -> int:
        return self.switch_step if self.switch_step is not None else int(0.9 * total_steps)


@dataclass
class InitConfig:
    student_encoder: str = "random"   # random | checkpoint
    text: str = "random"              # random | checkpoint
    text_frozen: bool = False

    def __post_init__(self):
        if self.student_encoder not in ("random", "checkpoint"):
            raise ValidationError("init.student_encoder must be random or checkpoint")
        if self.text not in ("random", "checkpoint"):
            raise ValidationError("init.text must be random or checkpoint")


@dataclass
class RunConfig:
    mode: str = "pretrain"               # pretrain | distill
    patch_objective: str = "ibot_pp"     # ibot | ibot_pp (pretrain only; distill is all-token)
    mask_ratio: float = 0.75
    steps: int = 10000
    batch_size: int = 64
    seed: int = 0
    local_views: int = 2
    dataset: str = "data"
    teacher_checkpoint: str | None = None

    # model
    canvas: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    text_depth: int = 2
    max_len: int = 32
    prototype_dim: int = 256

    # temperatures / centering
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9

    ema: EmaConfig = field(default_factory=EmaConfig)
    caption_strategy: CaptionStrategy = field(default_factory=CaptionStrategy)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    resolutions: ResolutionSchedule = field(default_factory=ResolutionSchedule)
    init: InitConfig = field(default_factory=InitConfig)

    def __post_init__(self):
        if self.mode not in ("pretrain", "distill"):
            raise ValidationError(f"mode must be pretrain or distill, got {self.mode!r}")
        if self.patch_objective not in ("ibot", "ibot_pp"):
            raise ValidationError(f"unknown patch objective {self.patch_objective!r}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValidationError(f"mask_ratio must be in [0,1], got {self.mask_ratio}")
        if self.mode == "distill" and self.ema.scope != "frozen":
            raise ValidationError("distill mode requires ema.scope = frozen")
        if self.mode == "pretrain" and self.ema.scope == "frozen":
            raise ValidationError("pretrain mode requires ema.scope full or head_only")
        if self.mode == "distill" and not self.teacher_checkpoint:
            raise ValidationError("distill mode requires teacher_checkpoint")

    def image_config(self) -> ImageEncoderConfig:
        return ImageEncoderConfig(canvas=self.canvas, patch_size=self.patch_size,
                                  embed_dim=self.embed_dim, depth=self.depth, heads=self.heads)

    def text_config(self) -> TextEncoderConfig:
        return TextEncoderConfig(embed_dim=self.embed_dim, depth=self.text_depth,
                                 heads=self.heads, max_len=self.max_len)


_NESTED = {
    "ema": EmaConfig,
    "caption_strategy": CaptionStrategy,
    "loss_weights": LossWeights,
    "optimizer": OptimizerConfig,
    "resolutions": ResolutionSchedule,
    "init": InitConfig,
}


def _from_dict(cls, d: dict):
    valid = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in d.items():
        if key not in valid:
            hint = difflib.get_close_matches(key, valid, n=1)
            suffix = f"; did you mean {hint[0]!r}?" if hint else ""
            raise ValidationError(f"unknown config key {key!r} in {cls.__name__}{suffix}")
        sub = _NESTED.get(key)
        if sub is not None and isinstance(value, dict):
            value = _from_dict(sub, value)
        if key == "pool_cls1" or key == "pool_cls2":
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(d: dict) -> RunConfig:
    return _from_dict(RunConfig, d)


def config_to_dict(config: RunConfig) -> dict:
    d = asdict(config)
    d["caption_strategy"]["pool_cls1"] = list(d["caption_strategy"]["pool_cls1"])
    d["caption_strategy"]["pool_cls2"] = list(d["caption_strategy"]["pool_cls2"])
    return d


# ---------------------------------------------------------------------------
# state, checkpoints


@dataclass
class TrainState:
    student: StudentModel
    teacher: TeacherView
    # separate running centers: CLS-level and patch-level teacher logits have
    # very different statistics, and a shared center biases both softmaxes
    center_cls: torch.Tensor
    center_patch: torch.Tensor
    optimizer: torch.optim.Optimizer
    step: int = 0


def build_student(config: RunConfig, tokenizer: Tokenizer) -> StudentModel:
    torch.manual_seed(config.seed)
    return StudentModel(config.image_config(), config.text_config(),
                        tokenizer.vocab_size, config.prototype_dim)


def build_optimizer(config: RunConfig, params) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    oc = config.optimizer
    if oc.name == "adamw":
        return torch.optim.AdamW(params, lr=oc.lr, weight_decay=oc.weight_decay)
    return torch.optim.Adafactor(params, lr=oc.lr, weight_decay=oc.weight_decay)


def lr_at(config: RunConfig, step: int) -> float:
    """Linear warmup to peak, cosine decay to the floor."""
    oc = config.optimizer
    warmup = int(oc.warmup_frac * config.steps)
    if warmup > 0 and step < warmup:
        return oc.lr * (step + 1) / warmup
    span = max(config.steps - warmup, 1)
    progress = min((step - warmup) / span, 1.0)
    return oc.lr_floor + (oc.lr - oc.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def _canonical(obj):
    """Normalize a payload so serialized bytes depend only on values: clone
    tensors to standalone contiguous storage and intern strings, neither of
    which is guaranteed after a load/resume round trip (pickle memoizes by
    object identity)."""
    if isinstance(obj, torch.Tensor):
        return obj.detach().clone().contiguous()
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        seq = [_canonical(v) for v in obj]
        return type(obj)(seq) if isinstance(obj, tuple) else seq
    return obj


def save_checkpoint(path: str | Path, state: TrainState, config: RunConfig) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(config),
        "step": state.step,
        "pos_grid": tuple(state.student.encoder.pos_embed.shape[:2]),
        "student": state.student.state_dict(),
        "teacher_head": state.teacher.head.state_dict(),
        "teacher_encoder": (state.teacher.encoder.state_dict()
                            if state.teacher.scope == "full" else None),
        "center_cls": state.center_cls,
        "center_patch": state.center_patch,
        "optimizer": state.optimizer.state_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(_canonical(payload), path)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise IOError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def _resize_pos_grid(student: StudentModel, grid: tuple[int, int]) -> None:
    if tuple(student.encoder.pos_embed.shape[:2]) != tuple(grid):
        student.encoder.set_pos_grid(tuple(grid))


def load_teacher_modules(path: str | Path, tokenizer: Tokenizer):
    """Rebuild frozen (encoder, head, text, config) from a checkpoint.

    Uses the checkpoint's EMA teacher (encoder shadow when the run kept one,
    otherwise the shared student encoder) and the EMA head."""
    payload = load_checkpoint(path)
    config = config_from_dict(payload["config"])
    student = StudentModel(config.image_config(), config.text_config(),
                           tokenizer.vocab_size, config.prototype_dim)
    _resize_pos_grid(student, payload["pos_grid"])
    student.load_state_dict(payload["student"])
    encoder = student.encoder
    if payload.get("teacher_encoder") is not None:
        encoder = ImageEncoder(config.image_config())
        if tuple(encoder.pos_embed.shape[:2]) != tuple(payload["pos_grid"]):
            encoder.set_pos_grid(tuple(payload["pos_grid"]))
        encoder.load_state_dict(payload["teacher_encoder"])
    head = student.head
    head.load_state_dict(payload["teacher_head"])
    return encoder, head, student.text, config


# ---------------------------------------------------------------------------
# deterministic rng streams


def _gen(seed: int, step: int, index: int, stream: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(((seed * 1_000_003 + step) * 1_000_003 + index) * 8 + stream)
    return g


# ---------------------------------------------------------------------------
# the training step


def _image_tensor(arr) -> torch.Tensor:
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def _assemble_batch(dataset: ShapesDataset, config: RunConfig, step: int,
                    global_res: int, local_res: int):
    """Sample indices, views, masks, and caption texts for one step."""
    g_idx = _gen(config.seed, step, 0, 0)
    idx = torch.randint(len(dataset), (config.batch_size,), generator=g_idx)
    n_patches = (global_res // config.patch_size) ** 2

    globals_, locals_, masks, texts1, texts2 = [], [[] for _ in range(config.local_views)], [], [], []
    for j, i in enumerate(idx.tolist()):
        g = _gen(config.seed, step, j, 1)
        views = sample_views(_image_tensor(dataset.images[i]), config.local_views,
                             g, global_res, local_res)
        globals_.append(views.global_view)
        for k, lv in enumerate(views.local_views):
            locals_[k].append(lv)
        masks.append(sample_mask(n_patches, config.mask_ratio, g).m)
        t1, t2 = sample_caption_pair(dataset.captions[i], config.caption_strategy, g)
        texts1.append(t1)
        texts2.append(t2)
    batch = {
        "global": torch.stack(globals_),
        "locals": [torch.stack(v) for v in locals_],
        "mask": torch.stack(masks),
        "texts1": texts1,
        "texts2": texts2 if texts2[0] is not None else None,
    }
    return batch


def train_step(batch, state: TrainState, config: RunConfig,
               tokenizer: Tokenizer) -> dict:
    """One optimization step shared by pretrain and distill modes."""
    student, teacher = state.student, state.teacher
    ts, tt = config.student_temp, config.teacher_temp

    # student forwards the unmasked global view; its CLS embeddings feed the
    # contrastive loss (alignment is defined on the full image, not the
    # masked view)
    s_full = student.encoder(batch["global"])

    # teacher targets from the unmasked view under stop-gradient; with an
    # encoder shared by reference the student's detached features are already
    # the teacher-encoder features, so the forward is reused
    with torch.no_grad():
        if teacher.encoder is student.encoder:
            t_cls_raw = s_full.cls1_raw.detach()
            t_patches = s_full.patches.detach()
        else:
            t_out = teacher.encoder(batch["global"])
            t_cls_raw = t_out.cls1_raw
            t_patches = t_out.patches
        t_cls_logits = teacher.head(t_cls_raw)
        t_patch_logits = teacher.head(t_patches)
        t_cls_dist = torch.softmax((t_cls_logits - state.center_cls) / tt, dim=-1)
        t_patch_dist = torch.softmax((t_patch_logits - state.center_patch) / tt, dim=-1)

    # student forwards masked global and unmasked locals (with nothing masked
    # the unmasked forward is reused)
    if config.mask_ratio == 0.0:
        s_out = s_full
    else:
        s_out = student.encoder(batch["global"], mask=batch["mask"])
    s_patch_dist = project_prototypes(s_out.patches, student.head, ts)
    s_local_dists = []
    for lv in batch["locals"]:
        lo = student.encoder(lv)
        s_local_dists.append(project_prototypes(lo.cls1_raw, student.head, ts))

    # contrastive losses, averaged over the active CLS tokens
    scale = student.clamped_logit_scale()
    txt1 = student.text(tokenizer.encode_batch(batch["texts1"]))
    l_clip = clip_loss(s_full.cls1, txt1, scale)
    if batch["texts2"] is not None:
        txt2 = student.text(tokenizer.encode_batch(batch["texts2"]))
        l_clip = 0.5 * (l_clip + clip_loss(s_full.cls2, txt2, scale))

    l_dino = dino_loss(t_cls_dist, s_local_dists)

    # distillation always supervises all tokens; pretraining picks the objective
    all_token = config.mode == "distill" or config.patch_objective == "ibot_pp"
    if all_token:
        l_patch = ibot_pp_loss(t_patch_dist, s_patch_dist)
    else:
        l_patch = ibot_loss(t_patch_dist, s_patch_dist, batch["mask"])

    with torch.no_grad():
        l_visible = ibot_loss(t_patch_dist, s_patch_dist.detach(), 1.0 - batch["mask"])
        l_masked = ibot_loss(t_patch_dist, s_patch_dist.detach(), batch["mask"])

    total = combined_loss(l_clip, l_dino, l_patch, config.loss_weights)
    if not torch.isfinite(total):
        raise NumericError(
            "non-finite loss at step %d: clip=%r dino=%r patch=%r"
            % (state.step, l_clip.item(), l_dino.item(), l_patch.item()))

    lr = lr_at(config, state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()

    if teacher.scope != "frozen":
        lam = config.ema.momentum_at(state.step, config.steps)
        ema_update(teacher, lam)
    with torch.no_grad():
        state.center_cls = update_center(
            state.center_cls, t_cls_logits, config.center_momentum)
        state.center_patch = update_center(
            state.center_patch,
            t_patch_logits.reshape(-1, t_patch_logits.shape[-1]),
            config.center_momentum)

    state.step += 1
    return {
        "step": state.step - 1,
        "lr": lr,
        "loss/clip": l_clip.item(),
        "loss/dino": l_dino.item(),
        "loss/patch": l_patch.item(),
        "loss/patch_visible": l_visible.item(),
        "loss/patch_masked": l_masked.item(),
        "loss/total": total.item(),
    }


# ---------------------------------------------------------------------------
# full runs


def _init_state(config: RunConfig, tokenizer: Tokenizer) -> TrainState:
    student = build_student(config, tokenizer)

    if config.mode == "distill":
        t_enc, t_head, t_text, _ = load_teacher_modules(config.teacher_checkpoint, tokenizer)
        if config.init.student_encoder == "checkpoint":
            student.encoder.load_state_dict(t_enc.state_dict())
        if config.init.text == "checkpoint":
            student.text.load_state_dict(t_text.state_dict())
        if config.init.text_frozen:
            if config.init.text == "random":
                import warnings
                warnings.warn("freezing a randomly initialized text encoder")
            for p in student.text.parameters():
                p.requires_grad_(False)
        teacher = make_teacher(student.encoder, student.head, config.ema,
                               frozen_modules=(t_enc, t_head))
    else:
        if config.init.student_encoder == "checkpoint":
            raise ValidationError("checkpoint student init requires distill mode")
        teacher = make_teacher(student.encoder, student.head, config.ema)

    optimizer = build_optimizer(config, student.parameters())
    return TrainState(student=student, teacher=teacher,
                      center_cls=torch.zeros(config.prototype_dim),
                      center_patch=torch.zeros(config.prototype_dim),
                      optimizer=optimizer)


def _restore_state(config: RunConfig, tokenizer: Tokenizer, payload: dict) -> TrainState:
    state = _init_state(config, tokenizer)
    _resize_pos_grid(state.student, payload["pos_grid"])
    state.student.load_state_dict(payload["student"])
    state.teacher.head.load_state_dict(payload["teacher_head"])
    if state.teacher.scope == "full":
        state.teacher.encoder.load_state_dict(payload["teacher_encoder"])
    state.center_cls = payload["center_cls"]
    state.center_patch = payload["center_patch"]
    # optimizer was built before pos_grid resize; rebuild to match parameters
    state.optimizer = build_optimizer(config, state.student.parameters())
    state.optimizer.load_state_dict(payload["optimizer"])
    state.step = payload["step"]
    return state


def run_training(config: RunConfig, out_dir: str | Path,
                 resume_from: str | Path | None = None,
                 checkpoint_every: int | None = None) -> Path:
    """Execute a full pretraining or distillation run. Returns the run dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as f:
        json.dump(config_to_dict(config), f, sort_keys=True, indent=2)
        f.write("\n")

    dataset = ShapesDataset(config.dataset)
    tokenizer = Tokenizer(max_len=config.max_len)

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        state = _restore_state(config, tokenizer, payload)
        metrics_mode = "a"
    else:
        state = _init_state(config, tokenizer)
        metrics_mode = "w"

    switch = config.resolutions.switch_at(config.steps)
    with open(out / "metrics.jsonl", metrics_mode) as metrics_file:
        while state.step < config.steps:
            step = state.step
            if step == switch and switch < config.steps:
                g = config.resolutions.stage2_global // config.patch_size
                _resize_pos_grid(state.student, (g, g))
                if state.teacher.scope == "full":
                    state.teacher.encoder.set_pos_grid((g, g))
                # optimizer state for the old pos_embed no longer applies
                state.optimizer = build_optimizer(config, state.student.parameters())
            global_res, local_res = config.resolutions.at(step, config.steps)
            batch = _assemble_batch(dataset, config, step, global_res, local_res)
            metrics = train_step(batch, state, config, tokenizer)
            metrics_file.write(json.dumps(metrics, sort_keys=True) + "\n")
            if checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(out / "checkpoints" / f"step_{state.step:06d}.pt",
                                state, config)

    save_checkpoint(out / "checkpoint_final.pt", state, config)
    return out


def run_pretraining(config: RunConfig, out_dir: str | Path, **kwargs) -> Path:
    if config.mode != "pretrain":
        raise ValidationError("run_pretraining requires mode=pretrain")
    return run_training(config, out_dir, **kwargs)


def run_distillation(config: RunConfig, out_dir: str | Path, **kwargs) -> Path:
    if config.mode != "distill":
        raise ValidationError("run_distillation requires mode=distill")
    return run_training(config, out_dir, **kwargs)
