"""Training losses for the dual-stream segmentation model.

Four terms are combined without weights: focal loss (camera stream), a
variant focal loss whose class weights and focusing exponent anneal over
training (LiDAR stream), Lovasz-softmax on both streams, and a pixel-level
interaction loss that distills camera confidences into the LiDAR stream
over the void areas of the projected point cloud.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag

EPS = 1e-8


def _as_batched(x, extra_dims):
    """Lift a single map to a batch of one; returns (array/tensor, was_batched)."""
    if isinstance(x, ag.Tensor):
        if x.ndim == extra_dims:
            return ag.reshape(x, (1,) + x.shape), False
        return x, True
    x = np.asarray(x)
    if x.ndim == extra_dims:
        return x[None], False
    return x, True


def _check_mask(mask: np.ndarray):
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary")


def _true_class_probs(probs: ag.Tensor, labels: np.ndarray) -> ag.Tensor:
    """Per-pixel probability of the labelled class: (B,C,H,W) -> (B,H,W)."""
    c = probs.shape[1]
    onehot = (labels[:, None, :, :] == np.arange(c)[None, :, None, None]).astype(probs.values.dtype)
    return ag.tsum(ag.mul(probs, ag.Tensor(onehot)), axis=1)


def focal_loss(probs, labels, gamma: float = 2.0) -> ag.Tensor:
    """Mean over pixels of -(1 - p_t)^gamma * log(p_t)."""
    probs, _ = _as_batched(probs, 3)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    pt = ag.clamp_min(_true_class_probs(probs, labels), EPS)
    per_px = ag.mul(ag.power(ag.sub(ag.Tensor(np.asarray(1.0, dtype=probs.values.dtype)), pt), gamma), -ag.log(pt))
    return ag.tmean(per_px)


@dataclass
class VariantFocalSchedule:
    """Annealing schedule for the variant focal loss.

    Class weights start at a0_c = N_total / N_c and decay linearly to 1
    between epoch_total/10 and epoch_total*lam/10; the focusing exponent is 2
    for the first tenth of training and 0 afterwards.
    """

    a0_per_class: np.ndarray
    epoch_total: int
    lam: float = 2.0
    epsilon: float = EPS

    def __post_init__(self):
        self.a0_per_class = np.asarray(self.a0_per_class, dtype=np.float64)
        if (self.a0_per_class < 1.0).any():
            raise ValueError("class weights a0 must be >= 1")
        if self.epoch_total < 1:
            raise ValueError("epoch_total must be positive")

    @classmethod
    def from_label_counts(cls, counts, epoch_total: int, lam: float = 2.0) -> "VariantFocalSchedule":
        counts = np.asarray(counts, dtype=np.float64)
        total = counts.sum()
        a0 = np.where(counts > 0, total / np.maximum(counts, 1.0), 1.0)
        return cls(a0_per_class=a0, epoch_total=epoch_total, lam=lam)

    def a_hat(self, ep: float) -> np.ndarray:
        a0 = self.a0_per_class
        if ep <= self.epoch_total / 10.0:
            return a0.copy()
        if ep <= self.epoch_total * self.lam / 10.0:
            ramp = (10.0 * ep - self.epoch_total) / (self.epoch_total * (self.lam - 1.0) + self.epsilon)
            return a0 - (a0 - 1.0) * ramp
        return np.ones_like(a0)

    def delta_hat(self, ep: float) -> float:
        return 2.0 if ep <= self.epoch_total / 10.0 else 0.0


def variant_focal_loss(probs, labels, f_mask, schedule: VariantFocalSchedule, ep: float) -> ag.Tensor:
    """Masked, class-weighted, annealed focal sum normalized by C*H*W."""
    probs, _ = _as_batched(probs, 3)
    labels = np.asarray(labels)
    f_mask = np.asarray(f_mask)
    if labels.ndim == 2:
        labels, f_mask = labels[None], f_mask[None]
    _check_mask(f_mask)
    if not 0 <= ep <= schedule.epoch_total:
        raise ValueError(f"epoch {ep} outside [0, {schedule.epoch_total}]")
    a_hat = schedule.a_hat(ep)
    delta = schedule.delta_hat(ep)
    weight = (f_mask * a_hat[labels]).astype(probs.values.dtype)
    pt = ag.clamp_min(_true_class_probs(probs, labels), EPS)
    term = ag.mul(
        ag.Tensor(weight),
        ag.mul(ag.power(ag.sub(ag.Tensor(np.asarray(1.0, dtype=probs.values.dtype)), pt), delta), -ag.log(pt)),
    )
    b, c = probs.shape[0], probs.shape[1]
    h, w = labels.shape[1], labels.shape[2]
    return ag.tsum(term) * ag.Tensor(np.asarray(1.0 / (b * c * h * w), dtype=probs.values.dtype))


def _lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss (errors desc-sorted)."""
    gts = gt_sorted.sum()
    intersection = gts - gt_sorted.cumsum()
    union = gts + (1.0 - gt_sorted).cumsum()
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def _class_list(labels: np.ndarray, n_classes: int, classes) -> list[int]:
    if classes == "all":
        return list(range(n_classes))
    if classes == "present":
        return [c for c in range(n_classes) if (labels == c).any()]
    return list(classes)


def lovasz_value(probs: np.ndarray, labels: np.ndarray, classes="present") -> float:
    """Numpy evaluation of the Lovasz-softmax loss on one (C, ...) map."""
    c = probs.shape[0]
    p = probs.reshape(c, -1)
    y = np.asarray(labels).reshape(-1)
    losses = []
    for cls in _class_list(y, c, classes):
        fg = (y == cls).astype(np.float64)
        errors = np.abs(fg - p[cls])
        perm = np.argsort(-errors, kind="stable")
        losses.append(float(errors[perm] @ _lovasz_grad(fg[perm])))
    return float(np.mean(losses)) if losses else 0.0


def lovasz_loss(logits, labels, classes="present") -> ag.Tensor:
    """Lovasz-softmax: mean over classes of the Lovasz extension of the
    Jaccard loss applied to descending-sorted margin errors."""
    logits, _ = _as_batched(logits, 3)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    b, c = logits.shape[0], logits.shape[1]
    npix = int(np.prod(logits.shape[2:]))
    probs_flat = ag.reshape(ag.softmax(logits, axis=1), (b * c * npix,))
    sample_losses = []
    for i in range(b):
        y = labels[i].reshape(-1)
        class_losses = []
        for cls in _class_list(y, c, classes):
            fg = (y == cls).astype(logits.values.dtype)
            p_c = ag.take_flat(probs_flat, (i * c + cls) * npix + np.arange(npix))
            errors = ag.absolute(ag.sub(ag.Tensor(fg), p_c))
            perm = np.argsort(-errors.values, kind="stable")
            coef = _lovasz_grad(fg[perm]).astype(logits.values.dtype)
            class_losses.append(ag.tsum(ag.mul(ag.take_flat(errors, perm), ag.Tensor(coef))))
        if class_losses:
            acc = class_losses[0]
            for extra in class_losses[1:]:
                acc = ag.add(acc, extra)
            sample_losses.append(acc * ag.Tensor(np.asarray(1.0 / len(class_losses), dtype=logits.values.dtype)))
    if not sample_losses:
        return ag.Tensor(np.asarray(0.0, dtype=logits.values.dtype))
    total = sample_losses[0]
    for extra in sample_losses[1:]:
        total = ag.add(total, extra)
    return total * ag.Tensor(np.asarray(1.0 / b, dtype=logits.values.dtype))


def pixel_interaction_loss(probs_pcd, probs_img, f_mask) -> ag.Tensor:
    """Complement-mask-weighted KL(F_pcd || F_img), averaged over H*W.

    The camera confidences act as detached soft labels: no gradient flows
    into probs_img. The complement of the void mask selects exactly the
    pixels where the point cloud carries no data.
    """
    probs_pcd, _ = _as_batched(probs_pcd, 3)
    if isinstance(probs_img, ag.Tensor):
        probs_img = probs_img.values
    probs_img = np.asarray(probs_img)
    if probs_img.ndim == 3:
        probs_img = probs_img[None]
    f_mask = np.asarray(f_mask)
    if f_mask.ndim == 2:
        f_mask = f_mask[None]
    _check_mask(f_mask)
    comp = (1.0 - f_mask).astype(probs_pcd.values.dtype)
    img = np.clip(probs_img, EPS, None).astype(probs_pcd.values.dtype)
    p = ag.clamp_min(probs_pcd, EPS)
    kl_terms = ag.mul(p, ag.sub(ag.log(p), ag.Tensor(np.log(img))))
    kl_px = ag.tsum(kl_terms, axis=1)
    b, h, w = comp.shape
    return ag.tsum(ag.mul(ag.Tensor(comp), kl_px)) * ag.Tensor(
        np.asarray(1.0 / (b * h * w), dtype=probs_pcd.values.dtype)
    )


def total_loss(*terms: ag.Tensor) -> ag.Tensor:
    """Unweighted sum of the loss terms."""
    if not terms:
        raise ValueError("no loss terms given")
    acc = terms[0]
    for t in terms[1:]:
        acc = ag.add(acc, t)
    return acc
