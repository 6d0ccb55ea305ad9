"""Action / reason label spaces, the decision rule and joint-pair expansion."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIONS = ("move_forward", "stop_slow_down", "turn_left", "turn_right")

REASONS = (
    "follow_traffic",
    "road_clear",
    "traffic_light_green",
    "obstacle_car",
    "obstacle_person",
    "obstacle_rider",
    "obstacle_others",
    "traffic_light",
    "traffic_sign",
    "front_car_turning_left",
    "on_left_turn_lane",
    "left_turn_light_allows",
    "front_car_turning_right",
    "on_right_turn_lane",
    "right_turn_light_allows",
    "obstacles_left_lane",
    "no_lane_left",
    "solid_line_left",
    "obstacles_right_lane",
    "no_lane_right",
    "solid_line_right",
)

# Human-readable text used for textual explanations (template lookup only).
REASON_TEXT = {
    "follow_traffic": "Follow traffic",
    "road_clear": "Road is clear",
    "traffic_light_green": "Traffic light is green",
    "obstacle_car": "Obstacle: car",
    "obstacle_person": "Obstacle: person/pedestrian",
    "obstacle_rider": "Obstacle: rider",
    "obstacle_others": "Obstacle: others",
    "traffic_light": "Traffic light",
    "traffic_sign": "Traffic sign",
    "front_car_turning_left": "Front car turning left",
    "on_left_turn_lane": "On the left-turn lane",
    "left_turn_light_allows": "Traffic light allows",
    "front_car_turning_right": "Front car turning right",
    "on_right_turn_lane": "On the right-turn lane",
    "right_turn_light_allows": "Traffic light allows",
    "obstacles_left_lane": "Obstacles on the left lane",
    "no_lane_left": "No lane on the left",
    "solid_line_left": "Solid line on the left",
    "obstacles_right_lane": "Obstacles on the right lane",
    "no_lane_right": "No lane on the right",
    "solid_line_right": "Solid line on the right",
}
ACTION_TEXT = {
    "move_forward": "Move forward",
    "stop_slow_down": "Stop/Slow down",
    "turn_left": "Turn left",
    "turn_right": "Turn right",
}

N_ACTIONS = len(ACTIONS)
N_REASONS = len(REASONS)

MOVE_FORWARD, STOP, TURN_LEFT, TURN_RIGHT = range(N_ACTIONS)
LEFT_BLOCKERS = (15, 16, 17)
RIGHT_BLOCKERS = (18, 19, 20)

# Own reasons per action; lane blockers are added in default_pair_matrix().
_OWN_REASONS = {
    MOVE_FORWARD: (0, 1, 2),
    STOP: (3, 4, 5, 6, 7, 8),
    TURN_LEFT: (9, 10, 11),
    TURN_RIGHT: (12, 13, 14),
}
_BLOCKERS = {
    MOVE_FORWARD: LEFT_BLOCKERS + RIGHT_BLOCKERS,
    STOP: LEFT_BLOCKERS + RIGHT_BLOCKERS,
    TURN_LEFT: RIGHT_BLOCKERS,
    TURN_RIGHT: LEFT_BLOCKERS,
}

DEFAULT_PAIR_COUNT = 33


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class DecisionConfig:
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise LabelError(f"threshold must lie in (0, 1), got {self.threshold}")


@dataclass(frozen=True)
class PairMatrix:
    """4x21 validity grid plus its row-major list of (action, reason) pairs."""

    matrix: np.ndarray
    action_names: tuple[str, ...] = ACTIONS
    reason_names: tuple[str, ...] = REASONS
    pairs: tuple[tuple[int, int], ...] = field(init=False)

    def __post_init__(self):
        m = np.asarray(self.matrix)
        shape = (len(self.action_names), len(self.reason_names))
        if m.shape != shape or not np.isin(m, (0, 1)).all():
            raise LabelError("invalid pair matrix file")
        m = m.astype(np.int8)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        rows, cols = np.nonzero(m)
        object.__setattr__(self, "pairs", tuple(zip(rows.tolist(), cols.tolist())))

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def pair_actions(self) -> np.ndarray:
        return np.array([a for a, _ in self.pairs], dtype=np.intp)

    @property
    def pair_reasons(self) -> np.ndarray:
        return np.array([r for _, r in self.pairs], dtype=np.intp)

    def pair_names(self) -> list[str]:
        return [f"{self.action_names[a]}|{self.reason_names[r]}" for a, r in self.pairs]

    def exclusion_mask(self) -> np.ndarray:
        """Boolean mask over pairs dropped when both turn actions are active."""
        excluded = set()
        for a, blockers in ((TURN_LEFT, RIGHT_BLOCKERS), (TURN_RIGHT, LEFT_BLOCKERS)):
            excluded.update((a, r) for r in blockers)
        return np.array([p in excluded for p in self.pairs], dtype=bool)

    def to_json(self) -> dict:
        return {
            "actions": list(self.action_names),
            "reasons": list(self.reason_names),
            "pairs": [list(p) for p in self.pairs],
        }

    def __eq__(self, other):
        if not isinstance(other, PairMatrix):
            return NotImplemented
        return (
            self.action_names == other.action_names
            and self.reason_names == other.reason_names
            and np.array_equal(self.matrix, other.matrix)
        )

    __hash__ = None


def default_pair_matrix() -> PairMatrix:
    m = np.zeros((N_ACTIONS, N_REASONS), dtype=np.int8)
    for a in range(N_ACTIONS):
        m[a, list(_OWN_REASONS[a] + _BLOCKERS[a])] = 1
    return PairMatrix(m)


def load_pair_matrix(path: str | Path | None = None, expected_pairs: int | None = None) -> PairMatrix:
    """Load a pair-matrix JSON file, or return the built-in default when ``path`` is None.

    The file holds ``actions`` (4 names), ``reasons`` (21 names) and ``pairs``
    (a list of ``[action_index, reason_index]``).  An optional ``count`` key
    declares the number of pairs; ``expected_pairs`` overrides it.
    """
    if path is None:
        return default_pair_matrix()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        actions = tuple(doc["actions"])
        reasons = tuple(doc["reasons"])
        raw_pairs = [tuple(p) for p in doc["pairs"]]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise LabelError(f"invalid pair matrix file: {exc}") from exc
    if actions != ACTIONS or reasons != REASONS:
        raise LabelError("invalid pair matrix file: vocabulary differs from the built-in one")
    m = np.zeros((N_ACTIONS, N_REASONS), dtype=np.int8)
    for p in raw_pairs:
        if len(p) != 2 or not all(isinstance(i, int) and not isinstance(i, bool) for i in p):
            raise LabelError(f"invalid pair matrix file: bad pair {list(p)}")
        a, r = p
        if not (0 <= a < N_ACTIONS and 0 <= r < N_REASONS) or m[a, r]:
            raise LabelError(f"invalid pair matrix file: bad pair {list(p)}")
        m[a, r] = 1
    declared = expected_pairs if expected_pairs is not None else doc.get("count", DEFAULT_PAIR_COUNT)
    if int(m.sum()) != declared:
        raise LabelError(
            f"invalid pair matrix file: {int(m.sum())} pairs, expected {declared}"
        )
    return PairMatrix(m, actions, reasons)


def save_pair_matrix(pm: PairMatrix, path: str | Path) -> None:
    doc = pm.to_json()
    doc["count"] = pm.n_pairs
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def decide(probabilities, config: DecisionConfig | float = DecisionConfig()) -> np.ndarray:
    """Threshold probabilities with a strict ``>``; works on (k,) or (N, k)."""
    theta = config.threshold if isinstance(config, DecisionConfig) else float(config)
    p = np.asarray(probabilities, dtype=np.float64)
    if p.size == 0:
        raise LabelError("empty decision vector")
    if np.isnan(p).any() or (p < 0).any() or (p > 1).any():
        raise LabelError("probability out of range")
    return (p > theta).astype(np.int8)


def _check_bits(v, n: int, what: str) -> np.ndarray:
    v = np.asarray(v)
    if v.shape[-1:] != (n,):
        raise LabelError("pair matrix incompatible with label vectors")
    if not np.isin(v, (0, 1)).all():
        raise LabelError(f"{what} vector must be binary")
    return v.astype(np.int8)


def explanation_defined(action_decision, reason_decision) -> bool:
    a = _check_bits(action_decision, N_ACTIONS, "action")
    r = _check_bits(reason_decision, N_REASONS, "reason")
    return bool(a.any() or r.any())


def joint_expand(action, reason, pm: PairMatrix | None = None, apply_turn_exclusion: bool = True) -> np.ndarray:
    """Map action/reason bits onto the valid-pair space.

    Accepts single vectors or (N, k) batches.  With ``apply_turn_exclusion``,
    rows where turn_left and turn_right are both set lose the
    (turn_left x right-side blocker) and (turn_right x left-side blocker) pairs.
    """
    pm = pm or default_pair_matrix()
    a = np.asarray(action)
    r = np.asarray(reason)
    if a.shape[-1:] != (len(pm.action_names),) or r.shape[-1:] != (len(pm.reason_names),):
        raise LabelError("pair matrix incompatible with label vectors")
    a = _check_bits(a, len(pm.action_names), "action")
    r = _check_bits(r, len(pm.reason_names), "reason")
    if a.shape[:-1] != r.shape[:-1]:
        raise LabelError("action and reason batches differ in length")
    joint = a[..., pm.pair_actions] & r[..., pm.pair_reasons]
    if apply_turn_exclusion:
        both = (a[..., TURN_LEFT] == 1) & (a[..., TURN_RIGHT] == 1)
        joint = np.where(both[..., None] & pm.exclusion_mask(), 0, joint)
    return joint.astype(np.int8)
