"""Dataset manifests, the per-video feature container and augmentation bookkeeping."""
from __future__ import annotations

import json
import math
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

NUM_OBJECT_SLOTS = 19

BUNDLE_MAGIC = b"ACCF"
BUNDLE_VERSION = 1
BUNDLE_DTYPE = "f32le"
BUNDLE_ARRAYS = ("frame_feat", "obj_feat", "boxes", "scores", "obj_depth")

POSITIVE = "positive"
NEGATIVE = "negative"


class BundleFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class VideoSample:
    id: str
    label: str
    toa: int
    fps: int
    num_frames: int
    bundle_path: str
    factors: dict[str, str] | None = None

    @property
    def is_positive(self) -> bool:
        return self.label == POSITIVE

    def violations(self) -> list[str]:
        out = []
        if self.label not in (POSITIVE, NEGATIVE):
            out.append(f"unknown label {self.label!r}")
        if self.label == POSITIVE and not 0 < self.toa < self.num_frames:
            out.append("toa out of range")
        if self.label == NEGATIVE and self.toa != -1:
            out.append("negative sample must have toa = -1")
        if self.fps < 1:
            out.append("fps must be >= 1")
        if self.num_frames < 2:
            out.append("num_frames must be >= 2")
        return out

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "label": self.label,
            "toa": self.toa,
            "fps": self.fps,
            "num_frames": self.num_frames,
            "bundle_path": self.bundle_path,
            "factors": dict(self.factors) if self.factors is not None else None,
        }

    @classmethod
    def from_json(cls, d: dict) -> "VideoSample":
        return cls(
            id=str(d["id"]),
            label=str(d["label"]),
            toa=int(d["toa"]),
            fps=int(d["fps"]),
            num_frames=int(d["num_frames"]),
            bundle_path=str(d["bundle_path"]),
            factors=dict(d["factors"]) if d.get("factors") is not None else None,
        )


def _f32(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float32))


@dataclass
class FeatureBundle:
    """Pre-extracted per-video features.

    Absent object slots carry score 0 and zeroed features, boxes and depth.
    """

    frame_feat: np.ndarray  # [T, F]
    obj_feat: np.ndarray  # [T, N_obj, F]
    boxes: np.ndarray  # [T, N_obj, 4] x_min, y_min, x_max, y_max (pixels)
    scores: np.ndarray  # [T, N_obj]
    obj_depth: np.ndarray  # [T, N_obj] meters
    width: float
    height: float

    def __post_init__(self):
        for name in BUNDLE_ARRAYS:
            setattr(self, name, _f32(getattr(self, name)))

    @property
    def num_frames(self) -> int:
        return self.frame_feat.shape[0]

    @property
    def num_objects(self) -> int:
        return self.obj_feat.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.frame_feat.shape[1]

    @property
    def present(self) -> np.ndarray:
        return self.scores > 0

    def prefix(self, t: int) -> "FeatureBundle":
        """First ``t`` frames of the clip."""
        return replace(self, **{name: getattr(self, name)[:t] for name in BUNDLE_ARRAYS})

    def violations(self, num_slots: int | None = NUM_OBJECT_SLOTS) -> list[str]:
        out = []
        if self.frame_feat.ndim != 2:
            return ["frame_feat must be [T, F]"]
        T, F = self.frame_feat.shape
        expected = {
            "obj_feat": (T, self.obj_feat.shape[1] if self.obj_feat.ndim == 3 else -1, F),
            "boxes": (T, self.obj_feat.shape[1] if self.obj_feat.ndim == 3 else -1, 4),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                out.append(f"{name} shape {getattr(self, name).shape} != {shape}")
        if out:
            return out
        N = self.obj_feat.shape[1]
        for name in ("scores", "obj_depth"):
            if getattr(self, name).shape != (T, N):
                out.append(f"{name} shape {getattr(self, name).shape} != {(T, N)}")
        if out:
            return out
        if num_slots is not None and N != num_slots:
            out.append(f"expected {num_slots} object slots, got {N}")
        if not (self.width > 0 and self.height > 0):
            out.append("frame size must be positive")
        for name in BUNDLE_ARRAYS:
            if not np.all(np.isfinite(getattr(self, name))):
                out.append(f"{name} contains non-finite values")
        if np.any((self.scores < 0) | (self.scores > 1)):
            out.append("scores outside [0, 1]")
        present = self.present
        b = self.boxes
        if np.any(present & ((b[..., 0] > b[..., 2]) | (b[..., 1] > b[..., 3]))):
            out.append("box with min > max at a scored slot")
        if np.any(present & (self.obj_depth < 0)):
            out.append("negative depth at a scored slot")
        return out


def _header_number(x: float):
    return int(x) if float(x).is_integer() else float(x)


def write_bundle(bundle: FeatureBundle, path: str | Path) -> None:
    problems = bundle.violations(num_slots=None)
    if problems:
        raise BundleFormatError("; ".join(problems))
    T, N, F = bundle.obj_feat.shape
    header = json.dumps(
        {
            "T": T,
            "N_obj": N,
            "F": F,
            "W": _header_number(bundle.width),
            "H": _header_number(bundle.height),
            "dtype": BUNDLE_DTYPE,
            "arrays": list(BUNDLE_ARRAYS),
        },
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<II", BUNDLE_VERSION, len(header)))
        fh.write(header)
        for name in BUNDLE_ARRAYS:
            fh.write(getattr(bundle, name).astype("<f4").tobytes(order="C"))


def read_bundle(path: str | Path) -> FeatureBundle:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != BUNDLE_MAGIC:
        raise BundleFormatError(f"{path}: bad magic")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != BUNDLE_VERSION:
        raise BundleFormatError(f"{path}: unsupported version {version}")
    if 12 + hlen > len(raw):
        raise BundleFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"{path}: unreadable header") from exc
    if header.get("dtype") != BUNDLE_DTYPE:
        raise BundleFormatError(f"{path}: dtype {header.get('dtype')!r} is not {BUNDLE_DTYPE!r}")
    if list(header.get("arrays", [])) != list(BUNDLE_ARRAYS):
        raise BundleFormatError(f"{path}: unexpected array list {header.get('arrays')}")
    try:
        T, N, F = int(header["T"]), int(header["N_obj"]), int(header["F"])
        W, H = header["W"], header["H"]
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleFormatError(f"{path}: missing dimension in header") from exc
    if min(T, N, F) < 0:
        raise BundleFormatError(f"{path}: negative dimension")
    shapes = {
        "frame_feat": (T, F),
        "obj_feat": (T, N, F),
        "boxes": (T, N, 4),
        "scores": (T, N),
        "obj_depth": (T, N),
    }
    payload = memoryview(raw)[12 + hlen :]
    need = 4 * sum(math.prod(s) for s in shapes.values())
    if len(payload) < need:
        raise BundleFormatError(f"{path}: truncated payload ({len(payload)} < {need} bytes)")
    if len(payload) > need:
        raise BundleFormatError(f"{path}: dimension mismatch, {len(payload) - need} trailing bytes")
    arrays, offset = {}, 0
    for name in BUNDLE_ARRAYS:
        count = math.prod(shapes[name])
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        arrays[name] = arr.reshape(shapes[name]).astype(np.float32)
        offset += 4 * count
    return FeatureBundle(width=W, height=H, **arrays)


def validate_sample(sample: VideoSample, bundle: FeatureBundle) -> list[str]:
    out = sample.violations() + bundle.violations()
    if sample.num_frames != bundle.num_frames:
        out.append(f"num_frames {sample.num_frames} != bundle T {bundle.num_frames}")
    return out


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    samples: tuple[VideoSample, ...]
    splits: dict[str, tuple[str, ...]] = field(default_factory=dict)
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "splits", {k: tuple(v) for k, v in self.splits.items()})
        problems = self.violations()
        if problems:
            raise ManifestError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        counts = Counter(s.id for s in self.samples)
        dup = sorted(k for k, c in counts.items() if c > 1)
        if dup:
            out.append(f"duplicate sample ids: {dup[:5]}")
        for split, ids in self.splits.items():
            missing = [i for i in ids if i not in counts]
            if missing:
                out.append(f"split {split!r} references unknown ids: {missing[:5]}")
            if len(set(ids)) != len(ids):
                out.append(f"split {split!r} lists an id twice")
        if "train" in self.splits and "test" in self.splits:
            if set(self.splits["train"]) & set(self.splits["test"]):
                out.append("train and test splits overlap")
        return out

    def by_id(self) -> dict[str, VideoSample]:
        return {s.id: s for s in self.samples}

    def split(self, name: str) -> list[VideoSample]:
        if name not in self.splits:
            raise ManifestError(f"no split named {name!r}")
        index = self.by_id()
        return [index[i] for i in self.splits[name]]

    def bundle_file(self, sample: VideoSample) -> Path:
        p = Path(sample.bundle_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def load_bundle(self, sample: VideoSample) -> FeatureBundle:
        return read_bundle(self.bundle_file(sample))

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "samples": [s.to_json() for s in self.samples],
            "splits": {k: list(v) for k, v in self.splits.items()},
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, d: dict, root: Path | None = None) -> "DatasetManifest":
        unknown = set(d) - {"name", "samples", "splits"}
        if unknown:
            raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(
            name=str(d.get("name", "")),
            samples=tuple(VideoSample.from_json(s) for s in d["samples"]),
            splits={k: tuple(v) for k, v in d.get("splits", {}).items()},
            root=root,
        )

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: invalid JSON") from exc
        return cls.from_json(data, root=path.parent)


FactorDistribution = dict[str, dict[str, float]]


def factor_distribution(manifest: DatasetManifest, split: str) -> FactorDistribution:
    samples = manifest.split(split)
    if not samples:
        raise ManifestError(f"split {split!r} is empty")
    counts: dict[str, Counter] = defaultdict(Counter)
    for s in samples:
        if not s.factors:
            raise ManifestError(f"sample {s.id!r} has no factor annotations")
        for name, category in s.factors.items():
            counts[name][category] += 1
    dist = {}
    for name in sorted(counts):
        total = sum(counts[name].values())
        dist[name] = {c: n / total for c, n in sorted(counts[name].items())}
    return dist


def sample_factor_prompts(dist: FactorDistribution, n: int, seed: int) -> list[dict[str, str]]:
    if n < 1:
        raise ValueError("n must be >= 1")
    if not dist or any(not cats for cats in dist.values()):
        raise ValueError("empty factor distribution")
    rng = np.random.default_rng(seed)
    draws = {}
    for name in sorted(dist):
        cats = sorted(dist[name])
        p = np.array([dist[name][c] for c in cats], dtype=np.float64)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"proportions for {name!r} do not form a distribution")
        draws[name] = [cats[i] for i in rng.choice(len(cats), size=n, p=p / p.sum())]
    return [{name: draws[name][k] for name in draws} for k in range(n)]


def augment_count(ratio: float, negatives: int) -> int:
    """floor(ratio * negatives), exact for decimal ratios such as 0.1."""
    if ratio < 0:
        raise ValueError("ratio must be >= 0")
    frac = Fraction(ratio).limit_denominator(10**9)
    return math.floor(frac * negatives)


def mix_augment(
    manifest: DatasetManifest,
    generated: list[VideoSample],
    ratio: float,
    seed: int,
    mode: str = "add",
    split: str = "train",
) -> DatasetManifest:
    """Mix generated negatives into the training split.

    ``mode="add"`` appends floor(ratio * negatives) generated clips; ``mode="replace"``
    swaps out the same number of original negatives so the split size is unchanged.
    """
    if mode not in ("add", "replace"):
        raise ValueError(f"unknown mode {mode!r}")
    if any(g.label != NEGATIVE for g in generated):
        raise ValueError("generated samples must all be negative")
    gen_ids = [g.id for g in generated]
    if len(set(gen_ids)) != len(gen_ids):
        raise ValueError("generated pool contains duplicate ids")
    existing = {s.id for s in manifest.samples}
    clash = [i for i in gen_ids if i in existing]
    if clash:
        raise ValueError(f"generated ids already in manifest: {clash[:5]}")

    train = manifest.split(split)
    negatives = [s.id for s in train if s.label == NEGATIVE]
    k = augment_count(ratio, len(negatives))
    if k > len(generated):
        raise ValueError(f"need {k} generated negatives, pool has {len(generated)}")
    if k == 0:
        return manifest

    rng = np.random.default_rng(seed)
    picked = [generated[i] for i in sorted(rng.choice(len(generated), size=k, replace=False))]
    train_ids = list(manifest.splits[split])
    samples = list(manifest.samples)
    if mode == "replace":
        dropped = {negatives[i] for i in rng.choice(len(negatives), size=k, replace=False)}
        train_ids = [i for i in train_ids if i not in dropped]
        still_used = {i for name, ids in manifest.splits.items() if name != split for i in ids}
        samples = [s for s in samples if s.id not in dropped or s.id in still_used]
    samples += picked
    train_ids += [g.id for g in picked]
    splits = dict(manifest.splits)
    splits[split] = tuple(train_ids)
    return DatasetManifest(name=manifest.name, samples=tuple(samples), splits=splits, root=manifest.root)


def start_frame_stats(manifest: DatasetManifest, split: str | None = None) -> dict:
    samples = manifest.split(split) if split else list(manifest.samples)
    positives = [s for s in samples if s.label == POSITIVE]
    if not positives:
        raise ManifestError("no positive samples")
    toas = np.array([s.toa for s in positives])
    values, counts = np.unique(toas, return_counts=True)

    def summary(x: np.ndarray) -> dict:
        q1, med, q3 = np.percentile(x, [25, 50, 75])
        return {
            "n": int(x.size),
            "min": int(x.min()),
            "q1": float(q1),
            "median": float(med),
            "q3": float(q3),
            "max": int(x.max()),
        }

    by_type: dict[str, list[int]] = defaultdict(list)
    for s in positives:
        if s.factors and "accident_type" in s.factors:
            by_type[s.factors["accident_type"]].append(s.toa)
    return {
        "histogram": {int(v): int(c) for v, c in zip(values, counts)},
        "summary": summary(toas),
        "per_type": {k: summary(np.array(v)) for k, v in sorted(by_type.items())},
    }
