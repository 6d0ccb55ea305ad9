"""Procedural driving scenes with exact labels.

A :class:`SceneSpec` is drawn from a fixed scenario mixture, rasterized into
flat-colored primitives, and labeled by a rule table that only emits
action/reason combinations allowed by the default pair matrix.

Scenario mixture used by :func:`sample_scene`:

==========  ====  =====================================================
scenario    p     content
==========  ====  =====================================================
forward     .35   light none .4 / green .6; far lead car .45
stop        .35   red light .3 / stop sign .15 / near ego obstacle .55
turn_left   .15   left arrow .6 (light none/green) or lead car signalling left
turn_right  .15   mirror of turn_left
==========  ====  =====================================================

Lane sides (each): none .2, dashed .35, solid .25, curb (no lane) .2;
a dashed/solid side holds an obstacle with p .3.

Canvas coordinates (fractions of height / width):

* sky band y<.34: random muted tint, 2-6 muted distractor boxes
  (only when ``SceneSpec.distractors`` is set, as :func:`sample_scene` does)
* traffic light housing .06 x .24, left edge in x .45-.88, top in y 0-.06
* stop sign .08 x .16, left edge in x .02-.36, top in y .02-.12
* lane lines at x=.34/.66 from y=.35 down; dashes are drawn twice as wide
* curb bands cover x<.30 or x>.70
* ego obstacle centred near x=.5 (near: y .60-.88, far: y .38-.50)
* side obstacles at x .06-.26 / .74-.94
* turn arrow at y .86-.97

The road is a random gray.  Obstacles and curbs take random colors that
contrast with it, so obstacle type is carried by shape alone.  With
distractors on, each image finally gets a global gain in [.65, 1.25] and
Gaussian pixel noise (std 6).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import AnnotationRecord, DatasetError, DatasetManifest, write_manifest
from .labels import MOVE_FORWARD, N_ACTIONS, N_REASONS, REASONS, STOP, TURN_LEFT, TURN_RIGHT

LIGHTS = ("none", "red", "green")
SIDES = ("none", "dashed", "solid", "curb")
OBSTACLES = ("none", "car", "pedestrian", "rider", "other")
DIRECTIONS = ("none", "left", "right")

MIN_SIZE = (64, 128)
DEFAULT_SIZE = (128, 256)
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)

ROAD_GRAY = (90, 160)
SKY = 0.34  # top band holding lights, signs and distractors
NOISE_STD = 6.0
COLORS = {
    "line": (245, 245, 245),
    "housing": (20, 20, 20),
    "red": (235, 25, 25),
    "green": (25, 225, 70),
    "sign": (190, 0, 0),
    "signal": (0, 230, 230),
    "arrow": (250, 250, 250),
}

_R = {name: i for i, name in enumerate(REASONS)}


@dataclass(frozen=True)
class SceneSpec:
    light: str = "none"
    sign: bool = False
    left: str = "none"
    right: str = "none"
    obstacle_left: str = "none"
    obstacle_right: str = "none"
    obstacle_ego: str = "none"
    ego_near: bool = False
    arrow: str = "none"
    front_signal: str = "none"
    distractors: bool = False  # sky tint, clutter boxes, gain and pixel noise
    seed: int = 0

    def __post_init__(self):
        checks = (
            ("light", LIGHTS), ("left", SIDES), ("right", SIDES),
            ("obstacle_left", OBSTACLES), ("obstacle_right", OBSTACLES), ("obstacle_ego", OBSTACLES),
            ("arrow", DIRECTIONS), ("front_signal", DIRECTIONS),
        )
        for name, allowed in checks:
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name}={getattr(self, name)!r} not in {allowed}")


def _pick(rng, options, p):
    return options[int(rng.choice(len(options), p=p))]


def sample_scene(rng: np.random.Generator) -> SceneSpec:
    scenario = _pick(rng, ("forward", "stop", "turn_left", "turn_right"), [0.35, 0.35, 0.15, 0.15])
    sides = {}
    for side in ("left", "right"):
        kind = _pick(rng, SIDES, [0.2, 0.35, 0.25, 0.2])
        obstacle = "none"
        if kind in ("dashed", "solid") and rng.random() < 0.3:
            obstacle = _pick(rng, OBSTACLES[1:], [0.6, 0.15, 0.15, 0.1])
        sides[side] = kind
        sides[f"obstacle_{side}"] = obstacle

    light, sign, ego, near, arrow, signal = "none", False, "none", False, "none", "none"
    if scenario == "forward":
        light = _pick(rng, ("none", "green"), [0.4, 0.6])
        if rng.random() < 0.45:
            ego = "car"
    elif scenario == "stop":
        cause = _pick(rng, ("red", "sign", "obstacle"), [0.3, 0.15, 0.55])
        if cause == "red":
            light = "red"
            if rng.random() < 0.3:
                ego = "car"
        elif cause == "sign":
            sign = True
        else:
            ego = _pick(rng, OBSTACLES[1:], [0.35, 0.25, 0.2, 0.2])
            near = True
            light = _pick(rng, ("none", "green"), [0.5, 0.5])
    else:
        direction = scenario.split("_")[1]
        light = _pick(rng, ("none", "green"), [0.5, 0.5])
        if rng.random() < 0.6:
            arrow = direction
        else:
            ego, signal = "car", direction

    return SceneSpec(
        light=light, sign=sign, obstacle_ego=ego, ego_near=near, arrow=arrow,
        front_signal=signal, distractors=True, seed=int(rng.integers(0, 2**31 - 1)), **sides,
    )


def oracle_labels(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Rule-table labels for a scene (action bits, reason bits)."""
    a = np.zeros(N_ACTIONS, dtype=np.int8)
    r = np.zeros(N_REASONS, dtype=np.int8)

    blocking = spec.obstacle_ego != "none" and (spec.ego_near or spec.obstacle_ego != "car")
    if spec.light == "red":
        r[_R["traffic_light"]] = 1
    if spec.sign:
        r[_R["traffic_sign"]] = 1
    if blocking:
        key = {"car": "obstacle_car", "pedestrian": "obstacle_person",
               "rider": "obstacle_rider", "other": "obstacle_others"}[spec.obstacle_ego]
        r[_R[key]] = 1

    if r.any():
        a[STOP] = 1
    else:
        lead = spec.obstacle_ego == "car" and not spec.ego_near
        green = spec.light == "green"
        for direction, act, lane, front, allows in (
            ("left", TURN_LEFT, "on_left_turn_lane", "front_car_turning_left", "left_turn_light_allows"),
            ("right", TURN_RIGHT, "on_right_turn_lane", "front_car_turning_right", "right_turn_light_allows"),
        ):
            if spec.arrow == direction:
                a[act] = 1
                r[_R[lane]] = 1
            if lead and spec.front_signal == direction:
                a[act] = 1
                r[_R[front]] = 1
            if a[act] and green:
                r[_R[allows]] = 1
        if not (a[TURN_LEFT] or a[TURN_RIGHT]):
            road_visible = spec.left != "none" or spec.right != "none"
            if green:
                r[_R["traffic_light_green"]] = 1
            if lead:
                r[_R["follow_traffic"]] = 1
            if spec.obstacle_ego == "none" and road_visible:
                r[_R["road_clear"]] = 1
            if r.any():
                a[MOVE_FORWARD] = 1

    straight = a[MOVE_FORWARD] or a[STOP]
    left_ok = straight or (a[TURN_RIGHT] and not a[TURN_LEFT])
    right_ok = straight or (a[TURN_LEFT] and not a[TURN_RIGHT])
    for side, ok in (("left", left_ok), ("right", right_ok)):
        if not ok:
            continue
        kind = getattr(spec, side)
        if getattr(spec, f"obstacle_{side}") != "none":
            r[_R[f"obstacles_{side}_lane"]] = 1
        if kind == "curb":
            r[_R[f"no_lane_{side}"]] = 1
        if kind == "solid":
            r[_R[f"solid_line_{side}"]] = 1
    return a, r


# rendering --------------------------------------------------------------------

def _box(img, y0, y1, x0, x1, color):
    h, w = img.shape[:2]
    ya, yb = int(round(y0 * h)), int(round(y1 * h))
    xa, xb = int(round(x0 * w)), int(round(x1 * w))
    img[max(ya, 0):min(max(yb, ya + 1), h), max(xa, 0):min(max(xb, xa + 1), w)] = color


def _contrasting(rng, base, min_diff=60):
    """Random RGB color differing from ``base`` by at least ``min_diff`` in some channel."""
    while True:
        c = rng.integers(0, 256, size=3)
        if np.abs(c - np.asarray(base)).max() >= min_diff:
            return c


def _muted(rng, spread=25):
    """Low-saturation color: a random gray with small per-channel offsets."""
    return np.clip(int(rng.integers(60, 200)) + rng.integers(-spread, spread + 1, size=3), 0, 255)


def _lane_line(img, x, dashed):
    # dashes are twice as wide so both styles carry the same paint
    h, w = img.shape[:2]
    half = max(1, int(round(0.006 * w))) * (2 if dashed else 1)
    cx = int(round(x * w))
    y0 = int(round(0.35 * h))
    period = max(2, int(round(0.08 * h)))
    for y in range(y0, h):
        if dashed and ((y - y0) // period) % 2:
            continue
        img[y, cx - half:cx + half] = COLORS["line"]


def _obstacle(img, kind, yc, xc, scale, color):
    # (height, width) per type, as fractions of the canvas before scaling
    dims = {"car": (0.12, 0.14), "pedestrian": (0.16, 0.04), "rider": (0.14, 0.07), "other": (0.08, 0.08)}
    dh, dw = (d * scale for d in dims[kind])
    _box(img, yc - dh / 2, yc + dh / 2, xc - dw / 2, xc + dw / 2, color)
    return dh, dw


def render(spec: SceneSpec, size: tuple[int, int] = DEFAULT_SIZE) -> np.ndarray:
    """Rasterize to a (3, H, W) uint8 array."""
    h, w = size
    if h < MIN_SIZE[0] or w < MIN_SIZE[1]:
        raise ValueError(f"canvas {h}x{w} smaller than minimum {MIN_SIZE[0]}x{MIN_SIZE[1]}")
    rng = np.random.default_rng(spec.seed)
    jx = lambda: float(rng.uniform(-0.02, 0.02))  # noqa: E731
    img = np.empty((h, w, 3), dtype=np.uint8)
    road = (int(rng.integers(*ROAD_GRAY)),) * 3
    img[:] = road
    if spec.distractors:
        img[: int(round(SKY * h))] = _muted(rng)
        # drawn under every labeled object
        for _ in range(int(rng.integers(2, 7))):
            y0, x0 = rng.uniform(0.0, SKY - 0.06), rng.uniform(0.0, 0.95)
            bh, bw = rng.uniform(0.04, 0.12), rng.uniform(0.02, 0.08)
            _box(img, y0, min(y0 + bh, SKY), x0, x0 + bw, _muted(rng))

    for side, x_line, band in (("left", 0.34, (0.0, 0.30)), ("right", 0.66, (0.70, 1.0))):
        kind = getattr(spec, side)
        if kind == "curb":
            _box(img, 0.35, 1.0, band[0], band[1], _contrasting(rng, road))
        elif kind in ("dashed", "solid"):
            _lane_line(img, x_line, kind == "dashed")
        obstacle = getattr(spec, f"obstacle_{side}")
        if obstacle != "none":
            xc = (0.16 if side == "left" else 0.84) + jx()
            _obstacle(img, obstacle, float(rng.uniform(0.55, 0.75)), xc, 1.0, _contrasting(rng, road))

    if spec.obstacle_ego != "none":
        xc = 0.5 + jx()
        if spec.ego_near:
            yc, scale = float(rng.uniform(0.68, 0.78)), 1.6
        else:
            yc, scale = float(rng.uniform(0.42, 0.46)), 0.8
        dh, dw = _obstacle(img, spec.obstacle_ego, yc, xc, scale, _contrasting(rng, road))
        if spec.obstacle_ego == "car" and spec.front_signal != "none":
            sx = xc - dw / 2 if spec.front_signal == "left" else xc + dw / 2 - 0.03
            _box(img, yc - dh / 2, yc - dh / 2 + 0.05, sx, sx + 0.03, COLORS["signal"])

    if spec.light != "none":
        x0, y0 = float(rng.uniform(0.45, 0.88)), float(rng.uniform(0.0, 0.06))
        _box(img, y0, y0 + 0.24, x0, x0 + 0.06, COLORS["housing"])
        if spec.light == "red":
            _box(img, y0 + 0.03, y0 + 0.11, x0 + 0.01, x0 + 0.05, COLORS["red"])
        else:
            _box(img, y0 + 0.13, y0 + 0.21, x0 + 0.01, x0 + 0.05, COLORS["green"])

    if spec.sign:
        x0, y0 = float(rng.uniform(0.02, 0.36)), float(rng.uniform(0.02, 0.12))
        _box(img, y0, y0 + 0.16, x0, x0 + 0.08, COLORS["sign"])
        _box(img, y0 + 0.06, y0 + 0.10, x0 + 0.03, x0 + 0.05, COLORS["line"])

    if spec.arrow != "none":
        ya, yb = 0.86, 0.97
        rows = max(1, int(round((yb - ya) * h)))
        for k in range(rows):
            frac = 1 - abs(2 * k / max(rows - 1, 1) - 1)  # 0 -> 1 -> 0 down the rows
            if spec.arrow == "left":
                _box(img, ya + k / h, ya + (k + 1) / h, 0.58 - 0.16 * frac, 0.58, COLORS["arrow"])
            else:
                _box(img, ya + k / h, ya + (k + 1) / h, 0.42, 0.42 + 0.16 * frac, COLORS["arrow"])

    if spec.distractors:
        # global illumination and sensor noise
        out = img.astype(np.float64) * rng.uniform(0.65, 1.25) + rng.normal(0.0, NOISE_STD, img.shape)
        img = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def image_hash(img: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(img).tobytes()).hexdigest()


def save_png(img: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.ascontiguousarray(img.transpose(1, 2, 0))).save(path, format="PNG", optimize=False)


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).transpose(2, 0, 1).copy()


def _split_sizes(n):
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return n_train, n_val, n - n_train - n_val


def generate_dataset(
    n: int,
    seed: int,
    out_dir: str | Path,
    size: tuple[int, int] = DEFAULT_SIZE,
    noise: float = 0.0,
) -> dict[str, DatasetManifest]:
    """Render ``n`` scenes into ``out_dir/images`` and write train/val/test manifests.

    Record ``i`` draws from ``default_rng([seed, i])``; the split assignment
    comes from a permutation under ``default_rng(seed)``.  ``noise`` > 0 flips
    each label bit independently with that probability (noisy-annotation mode).
    """
    if n <= 0:
        raise DatasetError("empty manifest: n must be positive")
    if not 0.0 <= noise < 1.0:
        raise ValueError("noise rate must lie in [0, 1)")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {out / 'images'}: {exc}") from exc

    records, specs = [], []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        spec = sample_scene(rng)
        a, r = oracle_labels(spec)
        if noise > 0:
            flip_a = rng.random(N_ACTIONS) < noise
            flip_r = rng.random(N_REASONS) < noise
            a, r = a ^ flip_a, r ^ flip_r
        rel = f"images/{i:06d}.png"
        try:
            save_png(render(spec, size), out / rel)
        except OSError as exc:
            raise DatasetError(f"cannot write {out / rel}: {exc}") from exc
        records.append(AnnotationRecord(f"syn{i:06d}", rel, a.tolist(), r.tolist()))
        specs.append({"id": f"syn{i:06d}", **asdict(spec)})

    order = np.random.default_rng(seed).permutation(n)
    n_train, n_val, _ = _split_sizes(n)
    bounds = {"train": order[:n_train], "val": order[n_train:n_train + n_val], "test": order[n_train + n_val:]}
    manifests = {}
    for split, idx in bounds.items():
        m = DatasetManifest(tuple(records[i] for i in sorted(idx)), split, root=out)
        write_manifest(m, out / f"{split}.jsonl")
        manifests[split] = m
    with open(out / "scenes.jsonl", "w", encoding="utf-8") as fh:
        for s in specs:
            fh.write(json.dumps(s, sort_keys=True) + "\n")
    (out / "generator.json").write_text(
        json.dumps({"n": n, "seed": seed, "size": list(size), "noise": noise}, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return manifests
