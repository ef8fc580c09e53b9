"""Desk-scale synthetic clips with collision labels from a kinematic oracle.

Agents move with constant velocity in (pixel x, pixel y, depth). A clip is
positive when some pair's normalized 3D separation, measured with the same
geometry the model uses, drops below a threshold.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data_model import (
    NEGATIVE,
    NUM_OBJECT_SLOTS,
    POSITIVE,
    DatasetManifest,
    FeatureBundle,
    VideoSample,
    write_bundle,
)
from .geometry import DEFAULT_DEPTH_SCALE, diag_norm, pairwise_distance3d

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScenarioParams:
    num_agents: int = 3
    num_frames: int = 50
    fps: int = 20
    width: int = 1280
    height: int = 720
    depth_range: tuple[float, float] = (8.0, 40.0)
    max_pixel_speed: float = 12.0  # px / frame
    max_depth_speed: float = 0.15  # m / frame
    collision_threshold: float = 0.04  # normalized 3D units
    feature_dim: int = 32
    noise_std: float = 0.01
    box_size: float = 40.0
    depth_scale: float = DEFAULT_DEPTH_SCALE
    paper_compat: bool = False
    min_toa: int = 10
    # "score": agents fill the leading slots in descending score order, like a top-k detector;
    # "random": agents land in random slots
    slot_layout: str = "score"
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_agents <= NUM_OBJECT_SLOTS:
            raise ValueError(f"num_agents must be in [2, {NUM_OBJECT_SLOTS}]")
        if self.collision_threshold <= 0:
            raise ValueError("collision_threshold must be > 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.slot_layout not in ("score", "random"):
            raise ValueError("slot_layout must be 'score' or 'random'")
        if self.num_frames < 2 or self.fps < 1:
            raise ValueError("need num_frames >= 2 and fps >= 1")

    @property
    def d_norm(self) -> float:
        return diag_norm(self.width, self.height, self.paper_compat)


def make_embedding(feature_dim: int, seed: int) -> np.ndarray:
    """Fixed random linear map from (cx, cy, depth, vx, vy) to feature space."""
    rng = np.random.default_rng([seed, 0xE3B])
    return rng.normal(0.0, 1.0 / np.sqrt(5.0), size=(feature_dim, 5))


def simulate(start: np.ndarray, velocity: np.ndarray, num_frames: int) -> np.ndarray:
    """Constant-velocity trajectories [T, n, 3] from start [n, 3] and velocity [n, 3]."""
    t = np.arange(num_frames, dtype=np.float64)[:, None, None]
    return np.asarray(start, dtype=np.float64)[None] + t * np.asarray(velocity, dtype=np.float64)[None]


def min_pair_distance(trajectories: np.ndarray, params: ScenarioParams) -> np.ndarray:
    """Per-frame minimum pairwise normalized 3D distance; +inf with fewer than two agents."""
    traj = np.asarray(trajectories, dtype=np.float64)
    T, n = traj.shape[:2]
    out = np.full(T, np.inf)
    if n < 2:
        return out
    dist = pairwise_distance3d(traj[..., :2], traj[..., 2], params.d_norm, depth_scale=params.depth_scale)
    for t in range(T):
        for i in range(n):
            for j in range(i + 1, n):
                out[t] = min(out[t], dist[t, i, j])
    return out


def oracle_label(trajectories: np.ndarray, threshold: float, params: ScenarioParams | None = None):
    """Scan every frame and agent pair; earliest frame closer than ``threshold`` wins."""
    params = params or ScenarioParams()
    dmin = min_pair_distance(trajectories, params)
    hits = np.flatnonzero(dmin < threshold)
    if hits.size:
        return POSITIVE, int(hits[0])
    return NEGATIVE, -1


def trajectories_from_bundle(bundle: FeatureBundle) -> np.ndarray:
    present = bundle.scores[0] > 0
    b = bundle.boxes[:, present].astype(np.float64)
    cx = (b[..., 0] + b[..., 2]) / 2.0
    cy = (b[..., 1] + b[..., 3]) / 2.0
    return np.stack([cx, cy, bundle.obj_depth[:, present].astype(np.float64)], axis=-1)


def _random_states(params: ScenarioParams, rng: np.random.Generator, n: int):
    lo, hi = params.depth_range
    start = np.column_stack(
        [
            rng.uniform(0, params.width, n),
            rng.uniform(0, params.height, n),
            rng.uniform(lo, hi, n),
        ]
    )
    ang = rng.uniform(0, 2 * np.pi, n)
    speed = params.max_pixel_speed * np.sqrt(rng.uniform(0, 1, n))
    vel = np.column_stack(
        [
            speed * np.cos(ang),
            speed * np.sin(ang),
            rng.uniform(-params.max_depth_speed, params.max_depth_speed, n),
        ]
    )
    return start, vel


def _steer_pair(params: ScenarioParams, rng: np.random.Generator, start, vel):
    """Put agents 0 and 1 on a course that meets at a random frame."""
    lo, hi = params.depth_range
    T = params.num_frames
    for _ in range(100):
        meet_t = rng.integers(params.min_toa + 2, T - 2)
        meet = np.array(
            [
                rng.uniform(0.15, 0.85) * params.width,
                rng.uniform(0.15, 0.85) * params.height,
                rng.uniform(lo, hi),
            ]
        )
        _, v = _random_states(params, rng, 2)
        s = meet[None] - meet_t * v
        ok = (
            np.all((s[:, 0] >= 0) & (s[:, 0] <= params.width))
            and np.all((s[:, 1] >= 0) & (s[:, 1] <= params.height))
            and np.all((s[:, 2] >= lo) & (s[:, 2] <= hi))
        )
        if ok:
            start[:2], vel[:2] = s, v
            break
    return start, vel


def render_bundle(
    trajectories: np.ndarray,
    params: ScenarioParams,
    embedding: np.ndarray,
    rng: np.random.Generator,
) -> FeatureBundle:
    traj = np.asarray(trajectories, dtype=np.float64)
    T, n, _ = traj.shape
    N, F = NUM_OBJECT_SLOTS, params.feature_dim
    vel = np.zeros_like(traj)
    vel[1:] = traj[1:] - traj[:-1]
    if T > 1:
        vel[0] = vel[1]
    d = params.d_norm
    state = np.stack(
        [
            traj[..., 0] / d,
            traj[..., 1] / d,
            traj[..., 2] / params.depth_scale,
            vel[..., 0] * params.fps / d,
            vel[..., 1] * params.fps / d,
        ],
        axis=-1,
    )
    emb = state @ embedding.T
    if params.noise_std > 0:
        emb = emb + rng.normal(0.0, params.noise_std, emb.shape)

    obj_feat = np.zeros((T, N, F))
    boxes = np.zeros((T, N, 4))
    scores = np.zeros((T, N))
    depth = np.zeros((T, N))
    half = params.box_size / 2.0
    agent_scores = rng.uniform(0.6, 1.0, n)
    if params.slot_layout == "score":
        # the steered pair is agents 0 and 1, so ordering by a random score hides it
        slots = np.empty(n, dtype=int)
        slots[np.argsort(-agent_scores, kind="stable")] = np.arange(n)
    else:
        slots = np.sort(rng.choice(N, size=n, replace=False))
    obj_feat[:, slots] = emb
    boxes[:, slots] = np.stack(
        [traj[..., 0] - half, traj[..., 1] - half, traj[..., 0] + half, traj[..., 1] + half], axis=-1
    )
    scores[:, slots] = agent_scores[None]
    depth[:, slots] = traj[..., 2]
    frame_feat = emb.mean(axis=1)
    if params.noise_std > 0:
        frame_feat = frame_feat + rng.normal(0.0, params.noise_std, frame_feat.shape)
    return FeatureBundle(
        frame_feat=frame_feat,
        obj_feat=obj_feat,
        boxes=boxes,
        scores=scores,
        obj_depth=depth,
        width=params.width,
        height=params.height,
    )


def gen_scenario(
    params: ScenarioParams,
    steer: bool = False,
    embedding: np.ndarray | None = None,
    video_id: str | None = None,
    trajectories: np.ndarray | None = None,
) -> tuple[VideoSample, FeatureBundle]:
    """Simulate one clip and label it with the oracle.

    ``steer`` puts the first two agents on a meeting course; the oracle still has
    the final say on the label. Explicit ``trajectories`` skip the random draw.
    """
    rng = np.random.default_rng(params.seed)
    if embedding is None:
        embedding = make_embedding(params.feature_dim, params.seed)
    if trajectories is None:
        start, vel = _random_states(params, rng, params.num_agents)
        if steer:
            start, vel = _steer_pair(params, rng, start, vel)
        trajectories = simulate(start, vel, params.num_frames)
    bundle = render_bundle(trajectories, params, embedding, rng)
    # label what was stored (float32), so the oracle replays exactly from the bundle
    label, toa = oracle_label(trajectories_from_bundle(bundle), params.collision_threshold, params)
    sample = VideoSample(
        id=video_id or f"synth_{params.seed:06d}",
        label=label,
        toa=toa,
        fps=params.fps,
        num_frames=trajectories.shape[0],
        bundle_path="",
    )
    return sample, bundle


class RejectionCapExceeded(RuntimeError):
    pass


def _plausible(sample: VideoSample, bundle: FeatureBundle, params: ScenarioParams) -> bool:
    present = bundle.scores > 0
    if np.any(bundle.obj_depth[present] < 1.0):
        return False
    if sample.label == POSITIVE:
        return params.min_toa <= sample.toa < params.num_frames
    return True


def gen_dataset(
    n_pos: int,
    n_neg: int,
    params: ScenarioParams,
    out_dir: str | Path,
    test_fraction: float = 0.2,
    name: str = "synthetic",
    max_tries: int | None = None,
) -> DatasetManifest:
    """Rejection-sample clips until the label counts are met and write them to ``out_dir``.

    Clip ``i`` is drawn with seed ``params.seed + i``. The split is stratified by
    label: ``round(count * test_fraction)`` clips of each label go to ``test``.
    """
    if n_pos < 0 or n_neg < 0:
        raise ValueError("counts must be >= 0")
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must be in [0, 1)")
    out_dir = Path(out_dir)
    (out_dir / "bundles").mkdir(parents=True, exist_ok=True)
    embedding = make_embedding(params.feature_dim, params.seed)
    max_tries = max_tries if max_tries is not None else 100 * (n_pos + n_neg) + 100
    pos: list[VideoSample] = []
    neg: list[VideoSample] = []
    i = 0
    while len(pos) < n_pos or len(neg) < n_neg:
        if i >= max_tries:
            raise RejectionCapExceeded(
                f"got {len(pos)}/{n_pos} positives and {len(neg)}/{n_neg} negatives after {i} draws"
            )
        need_pos, need_neg = len(pos) < n_pos, len(neg) < n_neg
        steer = need_pos and (not need_neg or i % 2 == 0)
        vid = f"{name}_{i:06d}"
        sample, bundle = gen_scenario(
            replace(params, seed=params.seed + i), steer=steer, embedding=embedding, video_id=vid
        )
        i += 1
        bucket = pos if sample.label == POSITIVE else neg
        if (sample.label == POSITIVE and not need_pos) or (sample.label == NEGATIVE and not need_neg):
            continue
        if not _plausible(sample, bundle, params):
            continue
        rel = f"bundles/{vid}.accf"
        write_bundle(bundle, out_dir / rel)
        bucket.append(replace(sample, bundle_path=rel))
    log.info("generated %d positives, %d negatives in %d draws", len(pos), len(neg), i)

    rng = np.random.default_rng([params.seed, 0x5EED])
    train, test = [], []
    for group in (pos, neg):
        order = rng.permutation(len(group))
        k = int(round(len(group) * test_fraction))
        test += [group[j].id for j in sorted(order[:k])]
        train += [group[j].id for j in sorted(order[k:])]
    manifest = DatasetManifest(
        name=name,
        samples=tuple(pos + neg),
        splits={"train": tuple(train), "test": tuple(test)},
        root=out_dir,
    )
    manifest.save(out_dir / "manifest.json")
    return manifest
