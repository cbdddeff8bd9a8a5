"""Feature files, annotations, predictions and the synthetic dataset."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"EGF1"
_HEADER = struct.Struct("<4sII")
_FOOTER = struct.Struct("<d")


class FormatError(ValueError):
    """A malformed binary file; ``offset`` is the byte where reading failed."""

    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (byte offset {offset})")
        self.offset = offset


class AnnotationError(ValueError):
    pass


@dataclass
class FeatureStream:
    clip_id: str
    features: np.ndarray  # T, D float32
    delta: float  # seconds per feature step
    source: str = ""

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or min(self.features.shape) < 1:
            raise ValueError(f"feature matrix must be T x D with T, D >= 1, got {self.features.shape}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")

    @property
    def duration(self) -> float:
        return self.features.shape[0] * self.delta


def encode_features(features: np.ndarray, delta: float) -> bytes:
    arr = np.ascontiguousarray(features, dtype="<f4")
    T, D = arr.shape
    return _HEADER.pack(FEATURE_MAGIC, T, D) + arr.tobytes() + _FOOTER.pack(float(delta))


def decode_features(blob: bytes, path=None) -> tuple[np.ndarray, float]:
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header", len(blob), path)
    magic, T, D = _HEADER.unpack_from(blob, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0, path)
    payload = 4 * T * D
    end = _HEADER.size + payload
    if len(blob) < end:
        raise FormatError(f"truncated payload: need {payload} bytes for {T}x{D}", len(blob), path)
    if len(blob) < end + _FOOTER.size:
        raise FormatError("truncated footer", len(blob), path)
    if len(blob) > end + _FOOTER.size:
        raise FormatError("trailing bytes after footer", end + _FOOTER.size, path)
    data = np.frombuffer(blob, dtype="<f4", count=T * D, offset=_HEADER.size).reshape(T, D)
    bad = np.flatnonzero(~np.isfinite(data.ravel()))
    if bad.size:
        raise FormatError("non-finite feature value", _HEADER.size + 4 * int(bad[0]), path)
    (delta,) = _FOOTER.unpack_from(blob, end)
    if not (np.isfinite(delta) and delta > 0):
        raise FormatError(f"invalid seconds-per-step {delta}", end, path)
    return data.astype(np.float32), float(delta)


def write_features(stream: FeatureStream, path) -> None:
    Path(path).write_bytes(encode_features(stream.features, stream.delta))


def read_features(path, clip_id: str | None = None, source: str = "") -> FeatureStream:
    path = Path(path)
    data, delta = decode_features(path.read_bytes(), path)
    return FeatureStream(clip_id or path.stem, data, delta, source)


def resample(features: np.ndarray, length: int) -> np.ndarray:
    """Linear interpolation along time, aligning step centres over the same duration."""
    T = features.shape[0]
    if T == length:
        return features
    pos = np.clip((np.arange(length) + 0.5) * T / length - 0.5, 0, T - 1)
    grid = np.arange(T)
    return np.stack([np.interp(pos, grid, features[:, c]) for c in range(features.shape[1])],
                    axis=1).astype(features.dtype)


def concat_streams(streams: list[FeatureStream]) -> FeatureStream:
    """Channel-wise concatenation after resampling every stream to the longest one."""
    if not streams:
        raise ValueError("no streams to concatenate")
    ids = {s.clip_id for s in streams}
    if len(ids) != 1:
        raise ValueError(f"streams belong to different clips: {sorted(ids)}")
    if len(streams) == 1:
        return streams[0]
    longest = max(streams, key=lambda s: s.features.shape[0])
    T = longest.features.shape[0]
    feats = np.concatenate([resample(s.features, T) for s in streams], axis=1)
    return FeatureStream(longest.clip_id, feats, longest.duration / T,
                         "+".join(s.source for s in streams))


# ---------------------------------------------------------------- annotations / predictions


@dataclass
class AnnotationRecord:
    clip_id: str
    query_id: str
    query_path: str
    start_sec: float
    end_sec: float
    duration_sec: float


def load_annotations(path, check_files: bool = True) -> list[AnnotationRecord]:
    """Read JSON-lines annotations; ``query_path`` is resolved against the file's directory."""
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            rec = AnnotationRecord(
                clip_id=str(raw["clip_id"]), query_id=str(raw["query_id"]),
                query_path=str(raw["query_path"]), start_sec=float(raw["start_sec"]),
                end_sec=float(raw["end_sec"]), duration_sec=float(raw["duration_sec"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
            raise AnnotationError(f"{path}:{lineno}: malformed record ({err})") from err
        if not 0 <= rec.start_sec < rec.end_sec <= rec.duration_sec:
            raise AnnotationError(
                f"{path}:{lineno}: need 0 <= start < end <= duration, got "
                f"{rec.start_sec}, {rec.end_sec}, {rec.duration_sec}")
        resolved = (path.parent / rec.query_path)
        if check_files and not resolved.exists():
            raise AnnotationError(f"{path}:{lineno}: missing embedding file {resolved}")
        rec.query_path = str(resolved)
        records.append(rec)
    return records


def write_annotations(records: list[AnnotationRecord], path, relative_to=None) -> None:
    base = Path(relative_to) if relative_to else None
    with open(path, "w") as fh:
        for rec in records:
            row = asdict(rec)
            if base is not None:
                row["query_path"] = str(Path(rec.query_path).relative_to(base))
            fh.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class PredictionRecord:
    clip_id: str
    query_id: str
    segments: list[tuple[float, float, float]]

    def __post_init__(self) -> None:
        scores = [s for _, _, s in self.segments]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise ValueError(f"{self.query_id}: prediction scores must be non-increasing")
        for start, end, _ in self.segments:
            if not 0 <= start <= end:
                raise ValueError(f"{self.query_id}: invalid segment [{start}, {end}]")


def write_predictions(records: list[PredictionRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({"clip_id": rec.clip_id, "query_id": rec.query_id,
                                 "segments": [list(s) for s in rec.segments]}) + "\n")


def load_predictions(path) -> list[PredictionRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            records.append(PredictionRecord(str(raw["clip_id"]), str(raw["query_id"]),
                                            [tuple(map(float, s)) for s in raw["segments"]]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
            raise AnnotationError(f"{path}:{lineno}: malformed prediction ({err})") from err
    return records


# ---------------------------------------------------------------- samples


@dataclass
class Sample:
    clip_id: str
    query_id: str
    features: np.ndarray  # T, D
    delta: float
    tokens: np.ndarray  # L, D_t
    start: float
    end: float
    duration: float


def load_dataset(data_dir, annotations: str | Path = "annotations.jsonl") -> list[Sample]:
    """Load every annotated (clip, query) pair; all feature sources of a clip are concatenated."""
    data_dir = Path(data_dir)
    ann_path = annotations if Path(annotations).is_absolute() else data_dir / annotations
    records = load_annotations(ann_path)
    sources = sorted(p for p in (data_dir / "features").iterdir() if p.is_dir())
    if not sources:
        raise FileNotFoundError(f"no feature sources under {data_dir / 'features'}")
    cache: dict[str, FeatureStream] = {}
    samples = []
    for rec in records:
        if rec.clip_id not in cache:
            streams = [read_features(src / f"{rec.clip_id}.egf", rec.clip_id, src.name) for src in sources]
            cache[rec.clip_id] = concat_streams(streams)
        stream = cache[rec.clip_id]
        tokens, _ = decode_features(Path(rec.query_path).read_bytes(), rec.query_path)
        samples.append(Sample(rec.clip_id, rec.query_id, stream.features, stream.delta, tokens,
                              rec.start_sec, rec.end_sec, rec.duration_sec))
    return samples


# ---------------------------------------------------------------- synthetic data


@dataclass
class SyntheticSpec:
    num_clips: int = 32
    min_length: int = 64
    max_length: int = 128
    feature_dim: int = 16
    text_dim: int = 16
    num_prototypes: int = 4
    num_tokens: int = 4
    noise: float = 0.1
    seconds_per_step: float = 1.0
    min_cover: float = 0.05
    max_cover: float = 0.4
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("num_clips", "min_length", "feature_dim", "text_dim", "num_prototypes", "num_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_length < self.min_length:
            raise ValueError("max_length < min_length")
        if self.noise < 0 or self.seconds_per_step <= 0:
            raise ValueError("noise must be >= 0 and seconds_per_step > 0")
        if not 0 < self.min_cover <= self.max_cover <= 1:
            raise ValueError("need 0 < min_cover <= max_cover <= 1")

    @classmethod
    def load(cls, path) -> SyntheticSpec:
        return cls(**json.loads(Path(path).read_text()))


def synthesize(spec: SyntheticSpec, out_dir) -> list[AnnotationRecord]:
    """Write a seeded toy grounding dataset: a prototype vector marks the queried span."""
    out = Path(out_dir)
    feat_dir = out / "features" / "synthetic"
    query_dir = out / "queries"
    feat_dir.mkdir(parents=True, exist_ok=True)
    query_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    protos = rng.standard_normal((spec.num_prototypes, spec.feature_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    to_text = rng.standard_normal((spec.feature_dim, spec.text_dim)) / np.sqrt(spec.feature_dim)
    dt = spec.seconds_per_step
    records = []
    for i in range(spec.num_clips):
        clip_id = f"clip{i:04d}"
        query_id = f"{clip_id}_q0"
        T = int(rng.integers(spec.min_length, spec.max_length + 1))
        duration = T * dt
        length = rng.uniform(spec.min_cover, spec.max_cover) * duration
        start = rng.uniform(0, duration - length)
        end = start + length
        proto = int(rng.integers(spec.num_prototypes))
        feats = spec.noise * rng.standard_normal((T, spec.feature_dim))
        centres = (np.arange(T) + 0.5) * dt
        feats[(centres >= start) & (centres <= end)] += protos[proto]
        tokens = protos[proto] @ to_text + spec.noise * rng.standard_normal((spec.num_tokens, spec.text_dim))
        write_features(FeatureStream(clip_id, feats.astype(np.float32), dt, "synthetic"),
                       feat_dir / f"{clip_id}.egf")
        qpath = query_dir / f"{query_id}.egf"
        qpath.write_bytes(encode_features(tokens.astype(np.float32), 1.0))
        records.append(AnnotationRecord(clip_id, query_id, str(qpath), float(start), float(end), duration))
    write_annotations(records, out / "annotations.jsonl", relative_to=out)
    (out / "synthetic_spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    return records
