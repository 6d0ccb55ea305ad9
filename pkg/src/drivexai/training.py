"""Multi-task loss, SGD training loop, checkpoints, evaluation and ablation sweeps."""
from __future__ import annotations

import copy
import io
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attention import AttentionBlockConfig, count_parameters
from .dataset import DatasetError, DatasetManifest, vocab_fingerprint
from .labels import N_ACTIONS, PairMatrix, decide, default_pair_matrix
from .metrics import MetricsReport, report
from .model import REASON_INPUT_MODES, DecisionAwareNet, ModelConfig, ModelOutput
from .synth import load_png

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "drivexai-checkpoint"
CHECKPOINT_VERSION = 1
PIXEL_MEAN = (0.5, 0.5, 0.5)
PIXEL_STD = (0.25, 0.25, 0.25)
INF = "inf"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float | str = 1.0
    action_weights: tuple[float, ...] = (1.0, 1.0, 2.0, 2.0)
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 50
    batch_size: int = 16
    theta: float = 0.5
    reduction: int = 16
    n_attention_blocks: int = 2
    seed: int = 0
    profile: str = "desk"
    reason_mode: str = "predicted"
    # {"type": "step", "step": 30, "gamma": 0.1} or {"type": "none"}
    schedule: dict = field(default_factory=lambda: {"type": "step", "step": 30, "gamma": 0.1})
    input_size: tuple[int, int] = (128, 256)
    # frozen action-only checkpoint feeding the reason head (lam=inf, detached)
    action_source: str | None = None
    exclusion: bool = True
    empty_policy: str = "one"

    def __post_init__(self):
        lam = self.lam
        if isinstance(lam, str):
            if lam != INF:
                raise ConfigError(f"lambda must be a number or 'inf', got {lam!r}")
        elif not (lam >= 0 and math.isfinite(lam)):
            raise ConfigError(f"lambda must be >= 0, got {lam}")
        if len(self.action_weights) != N_ACTIONS or any(w <= 0 for w in self.action_weights):
            raise ConfigError("action weights must be 4 positive numbers")
        if self.reason_mode not in REASON_INPUT_MODES:
            raise ConfigError(f"unknown reason input mode {self.reason_mode!r}")
        if lam == INF and self.reason_mode == "predicted":
            raise ConfigError("lambda='inf' trains the reason head alone; use reason_mode 'oracle' or 'detached'")
        if lam == INF and self.reason_mode == "detached" and not self.action_source:
            raise ConfigError("lambda='inf' with detached mode needs action_source (an action-only checkpoint)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0 < self.theta < 1:
            raise ConfigError("theta must lie in (0, 1)")
        object.__setattr__(self, "action_weights", tuple(float(w) for w in self.action_weights))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))

    @property
    def reason_only(self) -> bool:
        return self.lam == INF

    @property
    def action_only(self) -> bool:
        return self.lam == 0

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_profile(
            self.profile, reduction=self.reduction, n_attention_blocks=self.n_attention_blocks, threshold=self.theta
        )

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("action_weights", "input_size"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


# loss -------------------------------------------------------------------------

def multitask_loss(output: ModelOutput, action_gt, reason_gt, cfg: TrainConfig = TrainConfig()):
    """Weighted BCE: mean over the batch, summed over classes.

    Returns ``(total, {"action": ..., "reason": ...})``.  ``lam=0`` leaves the
    reason term out of the graph; ``lam='inf'`` keeps only the reason term.
    """
    action_gt = torch.as_tensor(action_gt, dtype=output.action_logits.dtype)
    reason_gt = torch.as_tensor(reason_gt, dtype=output.reason_logits.dtype)
    if action_gt.shape != output.action_logits.shape or reason_gt.shape != output.reason_logits.shape:
        raise ValueError("label shapes do not match model outputs")
    w = torch.tensor(cfg.action_weights, dtype=output.action_logits.dtype)
    a_bce = F.binary_cross_entropy_with_logits(output.action_logits, action_gt, reduction="none")
    action_term = (a_bce * w).sum(1).mean()
    r_bce = F.binary_cross_entropy_with_logits(output.reason_logits, reason_gt, reduction="none")
    reason_term = r_bce.sum(1).mean()
    if cfg.reason_only:
        total = reason_term
    elif cfg.action_only:
        total = action_term
        reason_term = reason_term.detach()
    else:
        total = action_term + cfg.lam * reason_term
    return total, {"action": action_term, "reason": reason_term}


# data -------------------------------------------------------------------------

def load_images(manifest: DatasetManifest, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Stack a manifest's images into a uint8 (N, 3, H, W) tensor."""
    arrays = []
    for rec in manifest.records:
        path = manifest.resolve(rec)
        try:
            arr = load_png(path)
        except (OSError, ValueError) as exc:
            raise DatasetError(f"record {rec.id}: cannot load image {path}: {exc}") from exc
        arrays.append(arr)
    if not arrays:
        return torch.zeros((0, 3) + tuple(size or (1, 1)), dtype=torch.uint8)
    x = torch.from_numpy(np.stack(arrays))
    if size is not None and tuple(x.shape[-2:]) != tuple(size):
        x = F.interpolate(x.float(), size=size, mode="bilinear", align_corners=False).round().clamp(0, 255).to(torch.uint8)
    return x


def normalize(images_u8: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    x = images_u8.to(dtype) / 255.0
    mean = torch.tensor(PIXEL_MEAN, dtype=dtype).view(1, 3, 1, 1)
    std = torch.tensor(PIXEL_STD, dtype=dtype).view(1, 3, 1, 1)
    return (x - mean) / std


# checkpoints ------------------------------------------------------------------

@dataclass
class Checkpoint:
    state_dict: dict
    config: TrainConfig
    epoch: int
    best: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    fingerprint: str = field(default_factory=vocab_fingerprint)

    def model(self) -> DecisionAwareNet:
        m = DecisionAwareNet(self.config.model_config())
        m.load_state_dict(self.state_dict)
        m.eval()
        return m

    def save(self, path) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config_json": json.dumps(self.config.to_json(), sort_keys=True),
            "state_dict": self.state_dict,
            "epoch": self.epoch,
            "best": self.best,
            "rng_state": self.rng_state,
            "fingerprint": self.fingerprint,
        }
        buf = io.BytesIO()
        torch.save(payload, buf)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
        return cls(
            payload["state_dict"],
            TrainConfig.from_json(json.loads(payload["config_json"])),
            payload["epoch"],
            payload["best"],
            payload["rng_state"],
            payload["fingerprint"],
        )

    @classmethod
    def capture(cls, model, cfg, epoch, best=None) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        rng = {"torch": torch.get_rng_state(), "numpy": np.random.get_state(), "python": random.getstate()}
        return cls(state, cfg, epoch, dict(best or {}), rng)


# training ---------------------------------------------------------------------

def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def param_groups(model: DecisionAwareNet, cfg: TrainConfig):
    """Decay conv/linear weights only; biases, norms and connection scalars are exempt."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if cfg.action_only and name.startswith("reason_head."):
            continue
        if cfg.reason_only and name.startswith("action_head."):
            continue
        (decay if p.ndim > 1 else no_decay).append(p)
    return [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def make_scheduler(optimizer, cfg: TrainConfig):
    kind = cfg.schedule.get("type", "step")
    if kind == "step":
        return torch.optim.lr_scheduler.StepLR(optimizer, int(cfg.schedule.get("step", 30)), float(cfg.schedule.get("gamma", 0.1)))
    if kind == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, max(cfg.epochs, 1))
    if kind == "none":
        return None
    raise ConfigError(f"unknown schedule type {kind!r}")


class _ActionSource:
    """Frozen action-only network feeding its probabilities to the reason head."""

    def __init__(self, path):
        self.model = Checkpoint.load(path).model()

    @torch.no_grad()
    def __call__(self, x):
        return self.model(x).action_probs


def _reason_input(cfg: TrainConfig, source, x, action_gt):
    if cfg.reason_mode == "oracle":
        return action_gt
    if source is not None:
        return source(x)
    return None


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    history: list[dict]


def train(
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest | None,
    cfg: TrainConfig,
    out_dir=None,
    pm: PairMatrix | None = None,
    model: DecisionAwareNet | None = None,
) -> TrainResult:
    if len(train_manifest) == 0:
        raise DatasetError("empty training set")
    pm = pm or default_pair_matrix()
    seed_everything(cfg.seed)
    if model is None:
        model = DecisionAwareNet(cfg.model_config())
    x_train = load_images(train_manifest, cfg.input_size)
    a_train = torch.from_numpy(train_manifest.action_matrix()).float()
    r_train = torch.from_numpy(train_manifest.reason_matrix()).float()
    val_cache = None
    if val_manifest is not None and len(val_manifest):
        val_cache = (load_images(val_manifest, cfg.input_size), val_manifest)
    source = _ActionSource(cfg.action_source) if cfg.reason_mode == "detached" and cfg.action_source else None

    optimizer = torch.optim.SGD(param_groups(model, cfg), lr=cfg.lr, momentum=cfg.momentum)
    scheduler = make_scheduler(optimizer, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True) + "\n")
        (out / "history.jsonl").write_text("")

    history: list[dict] = []
    best_ckpt = Checkpoint.capture(model, cfg, 0)
    best_key = -1.0
    n = len(train_manifest)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = torch.randperm(n, generator=gen)
        totals = {"loss": 0.0, "action": 0.0, "reason": 0.0}
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = normalize(x_train[idx])
            fed = _reason_input(cfg, source, x, a_train[idx])
            output = model(x, cfg.reason_mode, fed)
            loss, parts = multitask_loss(output, a_train[idx], r_train[idx], cfg)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            k = len(idx)
            totals["loss"] += loss.item() * k
            totals["action"] += parts["action"].item() * k
            totals["reason"] += parts["reason"].item() * k
        lr = optimizer.param_groups[0]["lr"]
        if scheduler is not None:
            scheduler.step()
        model.trained_epochs.fill_(epoch)
        row = {"epoch": epoch, "lr": lr, **{f"train_{k}": v / n for k, v in totals.items()}}
        if val_cache is not None:
            rep = evaluate_model(model, val_cache[1], cfg, pm, images=val_cache[0], source=source)
            row.update({f"val_{k}": v for k, v in rep.aggregates().items()})
            key = rep.f1_action_overall if cfg.action_only else rep.f1_reason_overall
        else:
            key = -row["train_loss"]
        history.append(row)
        log.info("epoch %d loss %.4f", epoch, row["train_loss"])
        if key > best_key:
            best_key = key
            best_ckpt = Checkpoint.capture(model, cfg, epoch, row)
        if out is not None:
            with open(out / "history.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    final = Checkpoint.capture(model, cfg, cfg.epochs, history[-1] if history else {})
    if out is not None:
        best_ckpt.save(out / "checkpoints" / "best.pt")
        final.save(out / "checkpoints" / "final.pt")
    return TrainResult(best_ckpt, final, history)


# evaluation -------------------------------------------------------------------

@torch.no_grad()
def predict(model: DecisionAwareNet, images_u8: torch.Tensor, cfg: TrainConfig, action_gt=None, source=None, batch_size: int = 64):
    """Return (action_probs, reason_probs) as numpy arrays."""
    model.eval()
    aps, rps = [], []
    for start in range(0, len(images_u8), batch_size):
        x = normalize(images_u8[start:start + batch_size])
        gt = None if action_gt is None else torch.as_tensor(action_gt[start:start + batch_size]).float()
        if cfg.reason_mode == "oracle" and gt is None:
            raise ValueError("oracle reason mode needs ground-truth actions")
        fed = _reason_input(cfg, source, x, gt)
        out = model(x, cfg.reason_mode, fed)
        aps.append(out.action_probs.numpy())
        rps.append(out.reason_probs.numpy())
    return np.concatenate(aps), np.concatenate(rps)


def evaluate_model(
    model: DecisionAwareNet,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    pm: PairMatrix | None = None,
    images=None,
    source=None,
    empty_policy: str | None = None,
    overall_policy: str = "sample",
) -> MetricsReport:
    if len(manifest) == 0:
        raise DatasetError("empty evaluation set")
    if images is None:
        images = load_images(manifest, cfg.input_size)
    if source is None and cfg.reason_mode == "detached" and cfg.action_source:
        source = _ActionSource(cfg.action_source)
    a_gt, r_gt = manifest.action_matrix(), manifest.reason_matrix()
    was_training = model.training
    ap, rp = predict(model, images, cfg, a_gt, source)
    model.train(was_training)
    return report(
        decide(ap, cfg.theta), decide(rp, cfg.theta), a_gt, r_gt, pm, cfg.exclusion,
        empty_policy or cfg.empty_policy, overall_policy,
    )


def evaluate(manifest: DatasetManifest, checkpoint: Checkpoint, pm: PairMatrix | None = None, theta: float | None = None, **kw) -> MetricsReport:
    if manifest.fingerprint != checkpoint.fingerprint:
        raise DatasetError("vocabulary fingerprint mismatch between manifest and checkpoint")
    cfg = checkpoint.config if theta is None else replace(checkpoint.config, theta=theta)
    return evaluate_model(checkpoint.model(), manifest, cfg, pm, **kw)


# baselines and sweeps ---------------------------------------------------------

def linear_probe(train_manifest, eval_manifest, cfg: TrainConfig, pool: int = 8, steps: int = 300, pm=None) -> MetricsReport:
    """Logistic regression on pooled raw pixels; a floor for the learned model."""
    def feats(m):
        x = normalize(load_images(m, cfg.input_size))
        return F.avg_pool2d(x, pool).flatten(1)

    torch.manual_seed(cfg.seed)
    xt, xe = feats(train_manifest), feats(eval_manifest)
    mu, sd = xt.mean(0), xt.std(0) + 1e-6
    xt, xe = (xt - mu) / sd, (xe - mu) / sd
    yt = torch.cat([torch.from_numpy(train_manifest.action_matrix()), torch.from_numpy(train_manifest.reason_matrix())], 1).float()
    lin = torch.nn.Linear(xt.shape[1], yt.shape[1])
    opt = torch.optim.Adam(lin.parameters(), lr=0.01, weight_decay=1e-4)
    for _ in range(steps):
        opt.zero_grad()
        F.binary_cross_entropy_with_logits(lin(xt), yt).backward()
        opt.step()
    with torch.no_grad():
        p = torch.sigmoid(lin(xe)).numpy()
    return report(
        decide(p[:, :N_ACTIONS], cfg.theta), decide(p[:, N_ACTIONS:], cfg.theta),
        eval_manifest.action_matrix(), eval_manifest.reason_matrix(), pm, cfg.exclusion, cfg.empty_policy,
    )


@dataclass(frozen=True)
class SweepGrid:
    lambdas: tuple = (0, 0.5, 1, 2, INF)
    modes: tuple = ("predicted",)
    ratios: tuple = (16,)
    base: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, d: dict) -> "SweepGrid":
        return cls(
            tuple(d.get("lambdas", cls.lambdas)),
            tuple(d.get("modes", cls.modes)),
            tuple(d.get("ratios", cls.ratios)),
            dict(d.get("base", {})),
        )

    def cells(self):
        # lambda=0 first so action-only checkpoints exist for the asynchronous cells
        lams = sorted(self.lambdas, key=lambda v: (v == INF, v if v != INF else 0))
        return [(lam, mode, r) for r in self.ratios for lam in lams for mode in self.modes]


def ablation_sweep(grid: SweepGrid, train_m, val_m, test_m, out_dir, pm=None) -> list[dict]:
    """Train and evaluate one model per grid cell; returns one row per cell."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = TrainConfig.from_json(grid.base) if grid.base else TrainConfig()
    action_only: dict[int, Path] = {}
    rows = []
    for lam, mode, r in grid.cells():
        row = {"lambda": lam, "reason_mode": mode, "reduction": r}
        channels = base.model_config().maspp.projection_out
        row["attention_params"] = count_parameters(AttentionBlockConfig(channels, r), base.n_attention_blocks)
        row["attention_params_c512_single_block"] = count_parameters(AttentionBlockConfig(512, r), 1)
        cell_dir = out / f"lam{lam}_{mode}_r{r}"
        try:
            overrides = {"lam": lam, "reason_mode": mode, "reduction": r}
            if lam == INF and mode == "detached":
                if r not in action_only:
                    action_only[r] = _train_action_only(base, r, train_m, val_m, out / f"lam0_source_r{r}", pm)
                overrides["action_source"] = str(action_only[r])
            cfg = replace(base, **overrides)
        except ConfigError as exc:
            log.warning("skipping cell lambda=%s mode=%s r=%s: %s", lam, mode, r, exc)
            rows.append({**row, "status": "skipped", "reason": str(exc)})
            continue
        result = train(train_m, val_m, cfg, cell_dir, pm)
        rep = evaluate_model(result.best.model(), test_m, cfg, pm)
        if lam == 0 and r not in action_only:
            action_only[r] = cell_dir / "checkpoints" / "best.pt"
        model = result.best.model()
        row["total_params"] = sum(p.numel() for p in model.parameters())
        rows.append({**row, "status": "ok", "best_epoch": result.best.epoch, **rep.aggregates()})
    (out / "sweep.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    _write_sweep_csv(rows, out / "sweep.csv")
    return rows


def _train_action_only(base, r, train_m, val_m, out_dir, pm) -> Path:
    cfg = replace(base, lam=0, reason_mode="predicted", reduction=r)
    train(train_m, val_m, cfg, out_dir, pm)
    return Path(out_dir) / "checkpoints" / "best.pt"


SWEEP_COLUMNS = (
    "lambda", "reason_mode", "reduction", "status", "f1_action_mean", "f1_action_overall",
    "f1_reason_mean", "f1_reason_overall", "f1_joint_mean", "f1_joint_overall",
    "attention_params", "attention_params_c512_single_block", "total_params", "best_epoch", "reason",
)


def _write_sweep_csv(rows, path):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, SWEEP_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def clone_model(model: DecisionAwareNet) -> DecisionAwareNet:
    return copy.deepcopy(model)
