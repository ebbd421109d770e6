"""Paired-sequence data model: SEQF file I/O, manifests, synthesis, batching.

Features are stored as little-endian float32 on disk and in memory;
distance kernels promote to float64 at call time. All containers are
immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import linear_interp

SEQF_MAGIC = b"SEQF"
SEQF_VERSION = 1

# Hard cap on declared element count so a corrupt header cannot trigger a
# huge allocation before the payload-size check runs.
_MAX_ELEMENTS = 1 << 28


class SeqfError(ValueError):
    """Malformed SEQF file or manifest."""


@dataclass(frozen=True)
class FeatureSequence:
    """One modality's time-major feature matrix (T x c) with an identifier."""

    id: str
    data: np.ndarray

    def __post_init__(self):
        if not self.id:
            raise ValueError("sequence id must be non-empty")
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"sequence data must be a T x c matrix with T,c >= 1, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite data in sequence")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PairRecord:
    id: str
    video_path: Path
    audio_path: Path


@dataclass(frozen=True)
class PairManifest:
    """Ordered list of (id, video_path, audio_path) records with unique ids."""

    records: tuple[PairRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    def load_pairs(self) -> list[tuple[FeatureSequence, FeatureSequence]]:
        """Resolve every record to its sequence pair.

        Missing or malformed files raise here (resolve time), not at parse
        time. The returned sequences carry the manifest id.
        """
        pairs = []
        for rec in self.records:
            video = load_seqf(rec.video_path)
            audio = load_seqf(rec.audio_path)
            pairs.append((FeatureSequence(rec.id, video.data), FeatureSequence(rec.id, audio.data)))
        return pairs


@dataclass(frozen=True)
class PairedBatch:
    """B aligned (video-like, audio-like) sequence pairs fed to a loss.

    videos[i] is paired with audios[i]. Each modality's sequences share one
    feature dim; the two dims coincide only once both sides are encoded to
    the common latent width.
    """

    videos: tuple[FeatureSequence, ...]
    audios: tuple[FeatureSequence, ...]

    def __post_init__(self):
        if len(self.videos) != len(self.audios):
            raise ValueError("videos and audios must have equal length")
        if len(self.videos) < 2:
            raise ValueError("batch size must be >= 2 (z-score normalization needs >= 2 entries)")
        for seqs, name in ((self.videos, "video"), (self.audios, "audio")):
            dims = {s.dim for s in seqs}
            if len(dims) != 1:
                raise ValueError(f"{name} sequences disagree on feature dim: {sorted(dims)}")

    @property
    def size(self) -> int:
        return len(self.videos)


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic paired-sequence generator settings.

    Each pair shares a smoothed latent trajectory; the two modalities are
    fixed random projections of it (identity when the modality dim equals
    latent_dim) plus noise. distractor_correlation mixes in one
    dataset-wide shared trajectory, making all pairs semantically similar
    but temporally distinct.
    """

    num_pairs: int
    dim_v: int = 32
    dim_a: int = 24
    latent_dim: int = 8
    len_v: int = 48
    len_a: int = 32
    noise_std: float = 0.05
    seed: int = 0
    distractor_correlation: float = 0.0

    def __post_init__(self):
        if self.num_pairs < 1:
            raise ValueError("num_pairs must be >= 1")
        if min(self.dim_v, self.dim_a, self.latent_dim) < 1:
            raise ValueError("dims must be >= 1")
        if min(self.len_v, self.len_a) < 2:
            raise ValueError("lengths must be >= 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0.0 <= self.distractor_correlation < 1.0:
            raise ValueError("distractor_correlation must be in [0, 1)")


def save_seqf(seq: FeatureSequence, path) -> None:
    """Write a sequence in SEQF format; round-trips bit-exactly."""
    data = np.asarray(seq.data, dtype="<f4")
    if not np.all(np.isfinite(data)):
        raise ValueError("non-finite data")
    id_bytes = seq.id.encode("utf-8")
    if len(id_bytes) > 0xFFFF:
        raise ValueError("sequence id too long for SEQF header")
    t, c = data.shape
    header = SEQF_MAGIC + struct.pack("<HH", SEQF_VERSION, len(id_bytes)) + id_bytes
    header += struct.pack("<II", t, c)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes(order="C"))


def load_seqf(path) -> FeatureSequence:
    """Parse a SEQF file back into a FeatureSequence."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SEQF_MAGIC:
        raise SeqfError(f"bad magic in {path}")
    off = 4
    if len(blob) < off + 4:
        raise SeqfError(f"truncated header in {path}")
    version, id_len = struct.unpack_from("<HH", blob, off)
    off += 4
    if version != SEQF_VERSION:
        raise SeqfError(f"unsupported SEQF version {version} in {path}")
    if len(blob) < off + id_len + 8:
        raise SeqfError(f"truncated header in {path}")
    seq_id = blob[off:off + id_len].decode("utf-8")
    off += id_len
    t, c = struct.unpack_from("<II", blob, off)
    off += 8
    if t < 1 or c < 1:
        raise SeqfError(f"invalid dimensions {t} x {c} in {path}")
    if t * c > _MAX_ELEMENTS:
        raise SeqfError(f"dimension overflow: {t} x {c} in {path}")
    payload = blob[off:]
    if len(payload) < 4 * t * c:
        raise SeqfError(f"truncated payload in {path}: declared {t}x{c}, got {len(payload)} bytes")
    data = np.frombuffer(payload[: 4 * t * c], dtype="<f4").reshape(t, c)
    if not np.all(np.isfinite(data)):
        raise SeqfError(f"non-finite entries in {path}")
    return FeatureSequence(seq_id, data)


def load_manifest(path) -> PairManifest:
    """Parse a TSV pair manifest: `id<TAB>video_path<TAB>audio_path`.

    `#`-prefixed lines are ignored. Relative paths resolve against the
    manifest's directory. File existence is checked at resolve time, not
    here.
    """
    path = Path(path)
    base = path.parent
    records = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise SeqfError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            rec_id, video, audio = fields
            if rec_id in seen:
                raise SeqfError(f"{path}:{lineno}: duplicate id {rec_id!r} (first seen on line {seen[rec_id]})")
            seen[rec_id] = lineno
            records.append(PairRecord(rec_id, _resolve(base, video), _resolve(base, audio)))
    return PairManifest(tuple(records))


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _smoothed_walk(rng: np.random.Generator, length: int, dim: int) -> np.ndarray:
    """Cumulative sum of unit Gaussians, row t divided by sqrt(t+1)."""
    steps = rng.standard_normal((length, dim))
    walk = np.cumsum(steps, axis=0)
    walk /= np.sqrt(np.arange(1, length + 1))[:, None]
    return walk


def synth_pairs(cfg: SynthConfig) -> list[tuple[FeatureSequence, FeatureSequence]]:
    """Generate paired sequences in memory; pure function of cfg.

    Draw order is fixed (projections, shared trajectory, then per-pair
    noise) so outputs are deterministic given the seed.
    """
    rng = np.random.default_rng(cfg.seed)
    if cfg.dim_v == cfg.latent_dim:
        proj_v = np.eye(cfg.latent_dim)
    else:
        proj_v = rng.standard_normal((cfg.latent_dim, cfg.dim_v)) / np.sqrt(cfg.latent_dim)
    if cfg.dim_a == cfg.latent_dim:
        proj_a = np.eye(cfg.latent_dim)
    else:
        proj_a = rng.standard_normal((cfg.latent_dim, cfg.dim_a)) / np.sqrt(cfg.latent_dim)
    len_max = max(cfg.len_v, cfg.len_a)
    shared = _smoothed_walk(rng, len_max, cfg.latent_dim)
    rho = cfg.distractor_correlation
    width = len(str(max(cfg.num_pairs - 1, 1)))
    pairs = []
    for i in range(cfg.num_pairs):
        latent = _smoothed_walk(rng, len_max, cfg.latent_dim)
        if rho > 0.0:
            latent = np.sqrt(1.0 - rho * rho) * latent + rho * shared
        video = linear_interp(latent, cfg.len_v) @ proj_v
        audio = linear_interp(latent, cfg.len_a) @ proj_a
        if cfg.noise_std > 0.0:
            video = video + cfg.noise_std * rng.standard_normal(video.shape)
            audio = audio + cfg.noise_std * rng.standard_normal(audio.shape)
        pair_id = f"pair_{i:0{width}d}"
        pairs.append((FeatureSequence(pair_id, video), FeatureSequence(pair_id, audio)))
    return pairs


def gen_synthetic(cfg: SynthConfig, out_dir) -> PairManifest:
    """Write a synthetic dataset (SEQF files + manifest.tsv) to out_dir.

    Deterministic given cfg: the same cfg produces byte-identical files.
    Returns the manifest describing what was written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    lines = []
    for video, audio in synth_pairs(cfg):
        video_name = f"{video.id}_v.seqf"
        audio_name = f"{audio.id}_a.seqf"
        save_seqf(video, out_dir / video_name)
        save_seqf(audio, out_dir / audio_name)
        records.append(PairRecord(video.id, out_dir / video_name, out_dir / audio_name))
        lines.append(f"{video.id}\t{video_name}\t{audio_name}\n")
    with open(out_dir / "manifest.tsv", "w", encoding="utf-8") as fh:
        fh.writelines(lines)
    return PairManifest(tuple(records))


def partition_indices(n: int, batch_size: int, seed: int, shuffle: bool) -> list[np.ndarray]:
    """Disjoint index batches covering floor(n/B)*B examples; remainder dropped."""
    if batch_size < 2:
        raise ValueError("batch size must be >= 2")
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    num_batches = n // batch_size
    return [order[k * batch_size:(k + 1) * batch_size] for k in range(num_batches)]


def make_batches(manifest: PairManifest, batch_size: int, seed: int = 0, shuffle: bool = False) -> list[PairedBatch]:
    """Load a manifest's pairs and partition them into PairedBatches.

    Deterministic under a fixed seed; batches are disjoint and the
    remainder (< batch_size examples) is dropped rather than padded.
    """
    pairs = manifest.load_pairs()
    batches = []
    for idx in partition_indices(len(pairs), batch_size, seed, shuffle):
        videos = tuple(pairs[i][0] for i in idx)
        audios = tuple(pairs[i][1] for i in idx)
        batches.append(PairedBatch(videos, audios))
    return batches
