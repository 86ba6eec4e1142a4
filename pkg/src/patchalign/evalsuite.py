"""Frozen-encoder evaluation protocols: zero-shot segmentation from patch-text
cosine similarity, mIoU, KNN classification, retrieval recall@1, a linear
patch probe, PCA feature maps, and patch-loss telemetry reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import ShapesDataset
from .errors import ValidationError
from .model import ImageEncoder, TextEncoder, Tokenizer


@dataclass
class ClassPromptSet:
    class_names: list[str]       # index-aligned with class_indices
    class_indices: list[int]     # label value each prompt stands for
    embeddings: torch.Tensor     # (C, D) unit-norm
    includes_background: bool


@dataclass
class SegPrediction:
    pixel_labels: np.ndarray     # (H, W) class indices
    patch_labels: np.ndarray     # (rows, cols)
    similarities: np.ndarray     # (rows, cols, C)


def encode_class_prompts(class_names: list[str], text_encoder: TextEncoder,
                         tokenizer: Tokenizer, include_background: bool = True,
                         template: str = "{}") -> ClassPromptSet:
    """Embed one prompt per class name. Index 0 is assumed to be background."""
    if not class_names:
        raise ValidationError("empty class list")
    names, indices = [], []
    for i, name in enumerate(class_names):
        if i == 0 and not include_background:
            continue
        names.append(name)
        indices.append(i)
    with torch.no_grad():
        emb = text_encoder(tokenizer.encode_batch([template.format(n) for n in names]))
    return ClassPromptSet(class_names=names, class_indices=indices,
                          embeddings=emb, includes_background=include_background)


def zero_shot_segment(image: torch.Tensor, prompts: ClassPromptSet,
                      encoder: ImageEncoder) -> SegPrediction:
    """Label each patch by the class text with maximal cosine similarity to the
    patch's final-layer value embedding mapped into the shared image-text
    space; nearest-upsample to pixels."""
    if len(prompts.class_indices) == 0:
        raise ValidationError("prompt set has no classes")
    if image.dim() == 3:
        image = image.unsqueeze(0)
    _, _, h, w = image.shape
    p = encoder.config.patch_size
    rows, cols = h // p, w // p
    with torch.no_grad():
        values = encoder.joint_patch_embeddings(image)[0]      # (N, D)
        sims = values @ prompts.embeddings.t()                 # (N, C)
    arg = sims.argmax(dim=-1).numpy()
    labels = np.array(prompts.class_indices)[arg].reshape(rows, cols)
    pixel = np.repeat(np.repeat(labels, h // rows, axis=0), w // cols, axis=1)
    return SegPrediction(pixel_labels=pixel, patch_labels=labels,
                         similarities=sims.numpy().reshape(rows, cols, -1))


def iou_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int):
    """Per-class (intersection, union) integer counts."""
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {gt.shape}")
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        p = pred == c
        g = gt == c
        inter[c] = np.logical_and(p, g).sum()
        union[c] = np.logical_or(p, g).sum()
    return inter, union


def miou_from_counts(inter: np.ndarray, union: np.ndarray,
                     ignore_background: bool) -> float:
    start = 1 if ignore_background else 0
    present = union[start:] > 0
    if not present.any():
        return 0.0
    iou = inter[start:][present] / union[start:][present]
    return float(iou.mean())


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int,
         ignore_background: bool = False) -> float:
    """Mean IoU over classes present in gt or pred."""
    inter, union = iou_counts(pred, gt, num_classes)
    return miou_from_counts(inter, union, ignore_background)


def knn_classify(queries: torch.Tensor, gallery: torch.Tensor,
                 gallery_labels: torch.Tensor, k: int) -> torch.Tensor:
    """Cosine k-NN with majority vote; ties go to the nearest neighbor's label."""
    if gallery.shape[0] == 0:
        raise ValidationError("empty gallery")
    if k > gallery.shape[0]:
        raise ValidationError(f"k={k} exceeds gallery size {gallery.shape[0]}")
    sims = F.normalize(queries, dim=-1) @ F.normalize(gallery, dim=-1).t()
    topk = sims.topk(k, dim=-1).indices                        # (Q, k)
    labels = gallery_labels[topk]                              # (Q, k)
    preds = []
    for row in labels:
        vals, counts = torch.unique(row, return_counts=True)
        best = counts.max()
        tied = vals[counts == best]
        if len(tied) == 1:
            preds.append(tied[0])
        else:
            # nearest neighbor whose label is among the tied labels
            nearest = next(l for l in row.tolist() if l in set(tied.tolist()))
            preds.append(torch.tensor(nearest))
    return torch.stack(preds)


def retrieval_recall_at_1(image_embs: torch.Tensor,
                          text_embs: torch.Tensor) -> tuple[float, float]:
    if image_embs.shape[0] != text_embs.shape[0]:
        raise ValidationError("image/text counts differ")
    sims = image_embs @ text_embs.t()
    n = sims.shape[0]
    target = torch.arange(n)
    i2t = (sims.argmax(dim=1) == target).float().mean().item()
    t2i = (sims.argmax(dim=0) == target).float().mean().item()
    return i2t, t2i


def patch_majority_labels(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Downsample a pixel mask to per-patch majority class labels."""
    h, w = mask.shape
    rows, cols = h // patch_size, w // patch_size
    blocks = mask[: rows * patch_size, : cols * patch_size]
    blocks = blocks.reshape(rows, patch_size, cols, patch_size).transpose(0, 2, 1, 3)
    out = np.empty((rows, cols), dtype=np.int64)
    for r in range(rows):
        for c in range(cols):
            out[r, c] = np.bincount(blocks[r, c].ravel()).argmax()
    return out


def linear_patch_probe(train_features: np.ndarray, train_labels: np.ndarray,
                       test_features: np.ndarray, test_labels: np.ndarray,
                       num_classes: int, seed: int = 0) -> float:
    """Multinomial logistic regression on frozen patch features; patch-level mIoU."""
    from sklearn.linear_model import LogisticRegression

    import warnings
    present = np.unique(train_labels)
    missing = set(range(num_classes)) - set(present.tolist())
    if missing:
        warnings.warn(f"classes absent from probe training labels: {sorted(missing)}")
    if len(present) < 2:
        pred = np.full(len(test_labels), present[0])
    else:
        clf = LogisticRegression(max_iter=2000, tol=1e-6, random_state=seed)
        clf.fit(train_features, train_labels)
        pred = clf.predict(test_features)
    return miou(pred, test_labels, num_classes)


def pca_map(patch_embeddings: np.ndarray) -> np.ndarray:
    """(rows, cols, D) patch features -> (rows, cols, 3) RGB in [0,1] from the
    first three PCA components; degenerate components render as flat 0.5."""
    rows, cols, d = patch_embeddings.shape
    if rows * cols < 3:
        raise ValidationError("need at least 3 patches for a PCA map")
    flat = patch_embeddings.reshape(-1, d).astype(np.float64)
    centered = flat - flat.mean(axis=0)
    u, s, _ = np.linalg.svd(centered, full_matrices=False)
    out = np.full((rows * cols, 3), 0.5)
    for c in range(3):
        if c < len(s) and s[c] > 1e-10:
            comp = u[:, c] * s[c]
            lo, hi = comp.min(), comp.max()
            if hi - lo > 1e-12:
                out[:, c] = (comp - lo) / (hi - lo)
    return out.reshape(rows, cols, 3)


def save_pca_png(rgb: np.ndarray, path: str | Path, upsample: int = 1) -> None:
    from PIL import Image
    img = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    if upsample > 1:
        img = np.repeat(np.repeat(img, upsample, axis=0), upsample, axis=1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="RGB").save(path)


def patch_loss_report(metrics_path: str | Path, out_csv: str | Path,
                      out_plot: str | Path | None = None) -> Path:
    """Extract visible/masked patch-loss curves from a run's metrics stream."""
    metrics_path = Path(metrics_path)
    if not metrics_path.exists():
        raise IOError(f"metrics file not found: {metrics_path}")
    rows = []
    with open(metrics_path) as f:
        for line in f:
            rec = json.loads(line)
            if "loss/patch_visible" not in rec or "loss/patch_masked" not in rec:
                raise ValidationError("metrics stream missing patch-loss telemetry keys")
            rows.append((rec["step"], rec["loss/patch_visible"], rec["loss/patch_masked"]))
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss_patch_visible", "loss_patch_masked"])
        writer.writerows(rows)
    if out_plot is not None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        steps = [r[0] for r in rows]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(steps, [r[1] for r in rows], label="visible")
        ax.plot(steps, [r[2] for r in rows], label="masked")
        ax.set_xlabel("step")
        ax.set_ylabel("patch loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_plot)
        plt.close(fig)
    return out_csv


# ---------------------------------------------------------------------------
# whole-run evaluation


def image_class_label(mask: np.ndarray) -> int:
    """Majority foreground class of a mask (the image-level toy label)."""
    fg = mask[mask > 0]
    if fg.size == 0:
        return 0
    return int(np.bincount(fg).argmax())


def _clip_image_embedding(out, mode: str) -> torch.Tensor:
    if mode == "cls1":
        return out.cls1
    if mode == "cls2":
        return out.cls2
    return F.normalize(out.cls1 + out.cls2, dim=-1)


def evaluate_run(run_dir: str | Path, eval_data: str | Path,
                 knn_k: int = 5, emit_pca: int = 4,
                 prompt_template: str = "a {}") -> dict:
    """Full evaluation of a finished run against a held-out dataset. Writes
    eval/report.json, PCA maps, and the patch-loss CSV under the run dir."""
    from .trainer import Tokenizer as _Tok  # noqa: F401  (kept local to avoid cycle)
    from .trainer import config_from_dict, load_checkpoint, load_teacher_modules

    run_dir = Path(run_dir)
    payload = load_checkpoint(run_dir / "checkpoint_final.pt")
    config = config_from_dict(payload["config"])
    tokenizer = Tokenizer(max_len=config.max_len)
    encoder, _head, text_encoder, _ = load_teacher_modules(
        run_dir / "checkpoint_final.pt", tokenizer)
    encoder.eval()
    text_encoder.eval()

    dataset = ShapesDataset(eval_data)
    num_classes = len(dataset.class_names)

    # retrieval/knn embedding mode follows how the run supervised its CLS tokens
    clip_mode = "cls1" if config.caption_strategy.mode == "one_cls_pool" else "both"

    images = torch.stack([
        torch.from_numpy(img).permute(2, 0, 1) for img in dataset.images])
    with torch.no_grad():
        outs = encoder(images)
    img_embs = _clip_image_embedding(outs, clip_mode)

    # zero-shot segmentation, with and without the background class
    report = {}
    for tag, include_bg in (("zero_shot_miou_bg", True), ("zero_shot_miou_nobg", False)):
        prompts = encode_class_prompts(dataset.class_names, text_encoder, tokenizer,
                                       include_background=include_bg,
                                       template=prompt_template)
        inter = np.zeros(num_classes, dtype=np.int64)
        union = np.zeros(num_classes, dtype=np.int64)
        for i in range(len(dataset)):
            pred = zero_shot_segment(images[i], prompts, encoder)
            ii, uu = iou_counts(pred.pixel_labels, dataset.masks[i], num_classes)
            inter += ii
            union += uu
        report[tag] = miou_from_counts(inter, union, ignore_background=not include_bg)

    # image-level KNN over a half/half gallery-query split
    labels = torch.tensor([image_class_label(m) for m in dataset.masks])
    half = len(dataset) // 2
    if half >= max(knn_k, 1):
        preds = knn_classify(img_embs[half:], img_embs[:half], labels[:half], knn_k)
        report["knn_top1"] = float((preds == labels[half:]).float().mean().item())
    else:
        report["knn_top1"] = None

    # cross-modal retrieval against the medium captions
    with torch.no_grad():
        txt = text_encoder(tokenizer.encode_batch([c.medium for c in dataset.captions]))
    i2t, t2i = retrieval_recall_at_1(img_embs, txt)
    report["i2t_r1"] = i2t
    report["t2i_r1"] = t2i

    # linear patch probe over a half/half split
    p = encoder.config.patch_size
    feats = outs.patches.numpy()
    patch_labels = np.stack([patch_majority_labels(m, p) for m in dataset.masks])
    flat_feats = feats.reshape(-1, feats.shape[-1])
    flat_labels = patch_labels.reshape(-1)
    split = len(dataset) // 2 * feats.shape[1]
    report["probe_miou"] = linear_patch_probe(
        flat_feats[:split], flat_labels[:split],
        flat_feats[split:], flat_labels[split:], num_classes, seed=config.seed)

    eval_dir = run_dir / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    grid = encoder.config.canvas // p
    rows_cols = int(feats.shape[1] ** 0.5)
    for i in range(min(emit_pca, len(dataset))):
        rgb = pca_map(feats[i].reshape(rows_cols, rows_cols, -1))
        save_pca_png(rgb, eval_dir / f"pca_{i:03d}.png", upsample=p)
    if (run_dir / "metrics.jsonl").exists():
        patch_loss_report(run_dir / "metrics.jsonl", eval_dir / "patch_loss.csv")

    with open(eval_dir / "report.json", "w") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    return report
