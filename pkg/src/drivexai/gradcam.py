"""Grad-CAM heatmaps driven by decided action and reason logits, plus sanity checks."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.stats import spearmanr
from torch import nn

from .labels import ACTION_TEXT, ACTIONS, REASON_TEXT, REASONS, decide

DEFAULT_WEIGHTS = (0.5, 0.5)


class ExplanationUndefined(ValueError):
    pass


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W) in [0, 1]
    target_layer: str
    score: dict
    raw: np.ndarray | None = field(default=None, repr=False)
    activations: torch.Tensor | None = field(default=None, repr=False)
    gradients: torch.Tensor | None = field(default=None, repr=False)


def normalize_map(cam: np.ndarray) -> np.ndarray:
    cam = np.asarray(cam, dtype=np.float64)
    lo, hi = cam.min(), cam.max()
    if hi > lo:
        return (cam - lo) / (hi - lo)
    # flat map: all ones if positive, else all zeros
    return np.ones_like(cam) if hi > 0 else np.zeros_like(cam)


def _layer_name(model: nn.Module, layer: nn.Module) -> str:
    for name, mod in model.named_modules():
        if mod is layer:
            return name
    return type(layer).__name__


def _mask(bits, n):
    if bits is None:
        return None
    m = np.asarray(bits).astype(bool).reshape(-1)
    if m.shape != (n,):
        raise ValueError(f"decision mask must have {n} entries")
    return m


def gradcam(
    model: nn.Module,
    image: torch.Tensor,
    action_mask=None,
    reason_mask=None,
    target_layer: nn.Module | None = None,
    weights=DEFAULT_WEIGHTS,
    threshold: float = 0.5,
    forward_kwargs: dict | None = None,
) -> Heatmap:
    """Grad-CAM of ``s = w_a * sum(decided action logits) + w_r * sum(decided reason logits)``.

    ``image`` is a normalized (3, H, W) or (1, 3, H, W) tensor.  When the
    masks are None they come from the model's own decisions at ``threshold``.
    """
    x = image.unsqueeze(0) if image.ndim == 3 else image
    if x.shape[0] != 1:
        raise ValueError("gradcam explains one image at a time")
    layer = target_layer if target_layer is not None else model.gradcam_layer
    captured = {}

    def hook(_mod, _inp, out):
        captured["a"] = out

    handle = layer.register_forward_hook(hook)
    try:
        was_training = model.training
        model.eval()
        with torch.enable_grad():
            out = model(x, **(forward_kwargs or {}))
            acts = captured["a"]
            a_logits, r_logits = out.action_logits[0], out.reason_logits[0]
            am = _mask(action_mask, a_logits.numel())
            rm = _mask(reason_mask, r_logits.numel())
            if am is None:
                am = decide(torch.sigmoid(a_logits).detach().numpy(), threshold).astype(bool)
            if rm is None:
                rm = decide(torch.sigmoid(r_logits).detach().numpy(), threshold).astype(bool)
            if not (am.any() or rm.any()):
                raise ExplanationUndefined("explanation undefined for this sample")
            wa, wr = weights
            score = wa * a_logits[torch.from_numpy(am)].sum() + wr * r_logits[torch.from_numpy(rm)].sum()
            (grads,) = torch.autograd.grad(score, acts)
        model.train(was_training)
    finally:
        handle.remove()

    channel_w = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((channel_w * acts).sum(dim=1, keepdim=True))
    if cam.shape[-2:] != x.shape[-2:]:
        cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)
    raw = cam[0, 0].detach().numpy().astype(np.float64)
    return Heatmap(
        normalize_map(raw),
        _layer_name(model, layer),
        {
            "actions": [i for i in np.nonzero(am)[0].tolist()],
            "reasons": [i for i in np.nonzero(rm)[0].tolist()],
            "weights": list(weights),
            "value": float(score.detach()),
        },
        raw,
        acts.detach(),
        grads.detach(),
    )


def per_logit_maps(model, image, action_mask=None, reason_mask=None, **kw) -> dict[str, Heatmap]:
    """One heatmap per decided logit (debugging aid)."""
    base = gradcam(model, image, action_mask, reason_mask, **kw)
    maps = {}
    for i in base.score["actions"]:
        m = np.zeros(len(ACTIONS), bool)
        m[i] = True
        maps[ACTIONS[i]] = gradcam(model, image, m, np.zeros(len(REASONS), bool), weights=(1.0, 1.0), **kw)
    for j in base.score["reasons"]:
        m = np.zeros(len(REASONS), bool)
        m[j] = True
        maps[REASONS[j]] = gradcam(model, image, np.zeros(len(ACTIONS), bool), m, weights=(1.0, 1.0), **kw)
    return maps


# sanity check -----------------------------------------------------------------

def randomization_stages(model) -> list[tuple[str, list[nn.Module]]]:
    """Cascading stages from the heads down to the stem."""
    return [
        ("heads", [model.reason_head, model.action_head]),
        ("trunk", [model.trunk]),
        ("attention", [model.attention]),
        ("maspp", [model.neck, model.maspp]),
        ("layer4", [model.backbone.layer4]),
        ("layer3", [model.backbone.layer3]),
        ("layer2", [model.backbone.layer2]),
        ("stem", [model.backbone.stem]),
    ]


def _randomize(module: nn.Module):
    for m in module.modules():
        if hasattr(m, "reset_parameters"):
            m.reset_parameters()
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.reset_running_stats()
    for p in module.parameters(recurse=True):
        if p.ndim == 0:
            with torch.no_grad():
                p.normal_()


def rank_correlation(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    # identical maps are exactly 1; spearmanr can land a few ulps short
    if np.array_equal(a, b):
        return 1.0
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    return float(np.clip(spearmanr(a, b).statistic, -1.0, 1.0))


@dataclass
class SanityResult:
    applicable: bool
    stages: list[str] = field(default_factory=list)
    correlations: list[float] = field(default_factory=list)

    def passed(self, final_below: float) -> bool:
        if not self.applicable:
            return False
        c = self.correlations
        return c[0] == 1.0 and c[-1] < c[0] and c[-1] < final_below


def sanity_randomization(model, image, seed: int = 0, **kw) -> SanityResult:
    """Cascading weight randomization; rank correlation of each stage's map with the original.

    Decided sets are fixed from the intact model so every stage explains the
    same logits.  Models with no training epochs are reported as not applicable.
    """
    if int(getattr(model, "trained_epochs", torch.tensor(0))) == 0:
        return SanityResult(False)
    import copy

    x = image.unsqueeze(0) if image.ndim == 3 else image
    with torch.no_grad():
        model.eval()
        out = model(x, **kw.get("forward_kwargs", {}))
    am = decide(out.action_probs[0].numpy(), model.cfg.threshold)
    rm = decide(out.reason_probs[0].numpy(), model.cfg.threshold)
    original = gradcam(model, x, am, rm, **kw).values
    result = SanityResult(True, ["none"], [rank_correlation(original, original)])
    work = copy.deepcopy(model)
    torch.manual_seed(seed)
    for name, mods in randomization_stages(work):
        for mod in mods:
            _randomize(mod)
        hm = gradcam(work, x, am, rm, target_layer=work.gradcam_layer, **kw).values
        result.stages.append(name)
        result.correlations.append(rank_correlation(original, hm))
    return result


# rendering --------------------------------------------------------------------

def jet(values: np.ndarray) -> np.ndarray:
    v = np.clip(values, 0.0, 1.0)[..., None]
    centers = np.array([3.0, 2.0, 1.0])
    return np.clip(1.5 - np.abs(4.0 * v - centers), 0.0, 1.0)


def blend(image_u8: np.ndarray, heatmap: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Per-pixel blend with weight ``alpha * heatmap``; (3, H, W) uint8 in and out."""
    if image_u8.shape[-2:] != heatmap.shape:
        raise ValueError(f"heatmap {heatmap.shape} does not match image {image_u8.shape[-2:]}")
    img = image_u8.transpose(1, 2, 0).astype(np.float64)
    w = alpha * np.clip(heatmap, 0, 1)[..., None]
    out = img * (1 - w) + 255.0 * jet(heatmap) * w
    return np.clip(np.rint(out), 0, 255).astype(np.uint8).transpose(2, 0, 1)


def render_overlay(
    image_u8: np.ndarray,
    heatmap: Heatmap,
    action_probs,
    reason_probs,
    out_png,
    threshold: float = 0.5,
    alpha: float = 0.5,
    extra: dict | None = None,
):
    """Write the overlay PNG and a JSON sidecar listing decided labels with probabilities."""
    overlay = blend(image_u8, heatmap.values, alpha)
    out_png = Path(out_png)
    Image.fromarray(np.ascontiguousarray(overlay.transpose(1, 2, 0))).save(out_png, format="PNG")
    a_dec = decide(action_probs, threshold)
    r_dec = decide(reason_probs, threshold)
    sidecar = {
        "actions": [
            {"name": ACTIONS[i], "text": ACTION_TEXT[ACTIONS[i]], "probability": round(float(action_probs[i]), 3)}
            for i in np.nonzero(a_dec)[0]
        ],
        "reasons": [
            {"name": REASONS[j], "text": REASON_TEXT[REASONS[j]], "probability": round(float(reason_probs[j]), 3)}
            for j in np.nonzero(r_dec)[0]
        ],
        "threshold": threshold,
        "target_layer": heatmap.target_layer,
        "score": heatmap.score,
        **(extra or {}),
    }
    side = out_png.with_suffix(".json")
    side.write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return overlay, sidecar
