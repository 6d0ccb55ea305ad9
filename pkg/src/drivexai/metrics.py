"""Sample-averaged and class-macro F1 for actions, reasons and valid action-reason pairs."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .labels import ACTIONS, REASONS, PairMatrix, default_pair_matrix, joint_expand

EMPTY_POLICIES = ("one", "zero")
OVERALL_POLICIES = ("sample", "micro")


class MetricsError(ValueError):
    pass


def _as_binary(x, name: str) -> np.ndarray:
    x = np.asarray(x)
    if not np.isin(x, (0, 1)).all():
        raise MetricsError(f"{name} must be binary")
    return x.astype(np.int64)


def f1_sample(pred, gt, empty_policy: str = "one") -> float:
    """F1 between two label sets given as binary vectors."""
    p, g = _as_binary(pred, "pred"), _as_binary(gt, "gt")
    if p.shape != g.shape or p.ndim != 1:
        raise MetricsError("pred and gt must be equal-length vectors")
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0 if empty_policy == "one" else 0.0
    return 2.0 * float((p & g).sum()) / float(denom)


def _check_pair(preds, gts):
    p, g = _as_binary(preds, "preds"), _as_binary(gts, "gts")
    if p.ndim != 2 or p.shape != g.shape:
        raise MetricsError(f"shape mismatch: {p.shape} vs {g.shape}")
    if p.shape[0] == 0:
        raise MetricsError("no samples")
    return p, g


def per_sample_f1(preds, gts, empty_policy: str = "one") -> np.ndarray:
    if empty_policy not in EMPTY_POLICIES:
        raise MetricsError(f"unknown empty policy {empty_policy!r}")
    p, g = _check_pair(preds, gts)
    tp = (p & g).sum(axis=1)
    denom = p.sum(axis=1) + g.sum(axis=1)
    empty_value = 1.0 if empty_policy == "one" else 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(denom > 0, 2.0 * tp / np.maximum(denom, 1), empty_value)
    return f.astype(np.float64)


def f1_overall(preds, gts, empty_policy: str = "one", policy: str = "sample") -> float:
    """Mean of per-sample F1 (``policy='sample'``) or micro F1 over all cells."""
    if policy == "micro":
        p, g = _check_pair(preds, gts)
        denom = p.sum() + g.sum()
        if denom == 0:
            return 1.0 if empty_policy == "one" else 0.0
        return 2.0 * float((p & g).sum()) / float(denom)
    if policy != "sample":
        raise MetricsError(f"unknown overall policy {policy!r}")
    return float(per_sample_f1(preds, gts, empty_policy).mean())


@dataclass
class Confusion:
    """Per-class tp/fp/fn counts; mergeable across shards with ``+``."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def of(cls, preds, gts) -> "Confusion":
        p, g = _check_pair(preds, gts)
        return cls((p & g).sum(0), (p & (1 - g)).sum(0), ((1 - p) & g).sum(0))

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def support(self) -> np.ndarray:
        return self.tp + self.fn

    def f1(self) -> np.ndarray:
        # Zero-support classes score 0 and stay in the macro average.
        denom = 2 * self.tp + self.fp + self.fn
        out = np.zeros(len(self.tp), dtype=np.float64)
        ok = (self.support > 0) & (denom > 0)
        out[ok] = 2.0 * self.tp[ok] / denom[ok]
        return out


def per_class_f1(preds, gts) -> np.ndarray:
    return Confusion.of(preds, gts).f1()


def f1_mean(preds, gts) -> float:
    return float(per_class_f1(preds, gts).mean())


def joint_f1(
    action_preds,
    reason_preds,
    action_gts,
    reason_gts,
    pm: PairMatrix | None = None,
    exclusion: bool = True,
    empty_policy: str = "one",
    overall_policy: str = "sample",
):
    """Return (overall, mean, per-pair F1) over the valid-pair space."""
    pm = pm or default_pair_matrix()
    jp = joint_expand(action_preds, reason_preds, pm, exclusion)
    jg = joint_expand(action_gts, reason_gts, pm, exclusion)
    per_pair = per_class_f1(jp, jg)
    return f1_overall(jp, jg, empty_policy, overall_policy), float(per_pair.mean()), per_pair


@dataclass
class MetricsReport:
    f1_action_overall: float
    f1_action_mean: float
    f1_reason_overall: float
    f1_reason_mean: float
    f1_joint_overall: float
    f1_joint_mean: float
    action_f1: list[float]
    reason_f1: list[float]
    joint_f1: list[float]
    action_support: list[int]
    reason_support: list[int]
    joint_support: list[int]
    pair_names: list[str]
    n_samples: int
    empty_policy: str = "one"
    overall_policy: str = "sample"
    exclusion: bool = True
    extra: dict = field(default_factory=dict)

    AGGREGATES = (
        "f1_action_overall",
        "f1_action_mean",
        "f1_reason_overall",
        "f1_reason_mean",
        "f1_joint_overall",
        "f1_joint_mean",
    )

    def aggregates(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.AGGREGATES}

    def to_json(self) -> dict:
        return asdict(self)

    def rows(self):
        """(section, name, f1, support) rows in fixed vocabulary order."""
        for name, f, s in zip(ACTIONS, self.action_f1, self.action_support):
            yield "action", name, f, s
        for name, f, s in zip(REASONS, self.reason_f1, self.reason_support):
            yield "reason", name, f, s
        for name, f, s in zip(self.pair_names, self.joint_f1, self.joint_support):
            yield "joint", name, f, s
        for k, v in self.aggregates().items():
            yield "aggregate", k, v, self.n_samples

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["section", "name", "f1", "support"])
        for sec, name, f, s in self.rows():
            w.writerow([sec, name, repr(float(f)), int(s)])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [
            f"samples={self.n_samples} empty_policy={self.empty_policy} "
            f"overall_policy={self.overall_policy} turn_exclusion={self.exclusion}",
            f"{'section':<10}{'name':<46}{'F1':>7}{'support':>9}",
        ]
        for sec, name, f, s in self.rows():
            lines.append(f"{sec:<10}{name:<46}{f:>7.3f}{int(s):>9d}")
        return "\n".join(lines) + "\n"


def report(
    action_preds,
    reason_preds,
    action_gts,
    reason_gts,
    pm: PairMatrix | None = None,
    exclusion: bool = True,
    empty_policy: str = "one",
    overall_policy: str = "sample",
) -> MetricsReport:
    pm = pm or default_pair_matrix()
    ap, rp = _as_binary(action_preds, "action_preds"), _as_binary(reason_preds, "reason_preds")
    ag, rg = _as_binary(action_gts, "action_gts"), _as_binary(reason_gts, "reason_gts")
    ca, cr = Confusion.of(ap, ag), Confusion.of(rp, rg)
    jp = joint_expand(ap, rp, pm, exclusion)
    jg = joint_expand(ag, rg, pm, exclusion)
    cj = Confusion.of(jp, jg)
    return MetricsReport(
        f1_action_overall=f1_overall(ap, ag, empty_policy, overall_policy),
        f1_action_mean=float(ca.f1().mean()),
        f1_reason_overall=f1_overall(rp, rg, empty_policy, overall_policy),
        f1_reason_mean=float(cr.f1().mean()),
        f1_joint_overall=f1_overall(jp, jg, empty_policy, overall_policy),
        f1_joint_mean=float(cj.f1().mean()),
        action_f1=ca.f1().tolist(),
        reason_f1=cr.f1().tolist(),
        joint_f1=cj.f1().tolist(),
        action_support=ca.support.tolist(),
        reason_support=cr.support.tolist(),
        joint_support=cj.support.tolist(),
        pair_names=pm.pair_names(),
        n_samples=int(ap.shape[0]),
        empty_policy=empty_policy,
        overall_policy=overall_policy,
        exclusion=exclusion,
    )


def dumps_report(rep: MetricsReport) -> str:
    return json.dumps(rep.to_json(), indent=1, sort_keys=True) + "\n"
