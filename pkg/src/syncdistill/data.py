"""Deterministic synthetic audio-visual corpus with a shared latent driver.

Each utterance is built from one smooth, bounded latent walk.  Visual
frames are a fixed linear mix of the latent at integer frame times;
audio frames mix the latent at sub-frame times (linear interpolation),
so the two modalities are views of the same underlying trajectory and
alignment is recoverable in principle.  Training pairs are sampled
on the fly: half in-sync (offset 0, label 1), half with a uniform
non-zero offset within +/-15 visual frames (label 0).
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, DataFormatError, UsageError

WINDOW_FRAMES = 5      # visual frames per training window
OFFSET_RANGE = 15      # negatives within +/- this many visual frames
SPLIT_NAMES = ("train", "val", "test")

MAGIC_PREFIX = b"AVSYNC"
FORMAT_VERSION = b"01"

_WALK_MOMENTUM = 0.7
_WALK_REVERSION = 0.85  # pull toward 0 keeps per-frame motion stationary
_WALK_STEP_SIGMA = 0.45
_LATENT_BOUND = 3.0


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 40
    n_val: int = 12
    n_test: int = 16
    frames_per_utterance: int = 64
    latent_dim: int = 8
    d_visual_in: int = 32
    d_audio_in: int = 20
    audio_rate: int = 4
    noise_sigma: float = 0.1
    seed: int = 0
    exclude_near_offsets: bool = False  # drop |offset| <= 1 from negatives

    def validate(self) -> None:
        minimum = 2 * OFFSET_RANGE + WINDOW_FRAMES + 1
        if self.frames_per_utterance < minimum:
            raise ConfigError(
                f"frames_per_utterance must be >= {minimum}, got {self.frames_per_utterance}"
            )
        for name in ("n_train", "n_val", "n_test", "latent_dim",
                     "d_visual_in", "d_audio_in", "audio_rate"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")


@dataclass
class Utterance:
    id: str
    visual: np.ndarray  # (T, d_visual_in) float32
    audio: np.ndarray   # (audio_rate * T, d_audio_in) float32


@dataclass
class Corpus:
    config: CorpusConfig
    splits: dict[str, list[Utterance]]
    vis_mix: np.ndarray  # (latent_dim, d_visual_in)
    aud_mix: np.ndarray  # (latent_dim, d_audio_in)

    def split(self, name: str) -> list[Utterance]:
        if name not in self.splits:
            raise UsageError(f"unknown split {name!r}; expected one of {SPLIT_NAMES}")
        return self.splits[name]

    def digest(self) -> str:
        return hashlib.sha256(serialize_corpus(self)).hexdigest()


@dataclass
class AVPair:
    visual_window: np.ndarray  # (WINDOW_FRAMES, d_visual_in)
    audio_window: np.ndarray   # (WINDOW_FRAMES * audio_rate, d_audio_in)
    offset: int                # visual frames; 0 means in sync
    label: int                 # 1 iff offset == 0


def generate_corpus(config: CorpusConfig) -> Corpus:
    """Build all three splits deterministically from the config seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    scale = 1.0 / np.sqrt(config.latent_dim)
    vis_mix = rng.normal(scale=scale, size=(config.latent_dim, config.d_visual_in))
    aud_mix = rng.normal(scale=scale, size=(config.latent_dim, config.d_audio_in))

    splits: dict[str, list[Utterance]] = {}
    counts = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    for split in SPLIT_NAMES:
        utts = []
        for i in range(counts[split]):
            utts.append(_make_utterance(f"{split}-{i:04d}", config, rng, vis_mix, aud_mix))
        splits[split] = utts
    return Corpus(config=config, splits=splits, vis_mix=vis_mix, aud_mix=aud_mix)


def _make_utterance(uid, config, rng, vis_mix, aud_mix) -> Utterance:
    t_frames = config.frames_per_utterance
    rate = config.audio_rate
    # smooth mean-reverting walk, squashed to stay inside +/- _LATENT_BOUND;
    # reversion keeps per-frame motion stationary for any utterance length
    steps = rng.normal(scale=_WALK_STEP_SIGMA, size=(t_frames + 1, config.latent_dim))
    start = rng.normal(scale=1.0, size=config.latent_dim)
    path = np.empty((t_frames + 1, config.latent_dim))
    pos = start
    vel = np.zeros(config.latent_dim)
    for t in range(t_frames + 1):
        vel = _WALK_MOMENTUM * vel + steps[t]
        pos = _WALK_REVERSION * pos + vel
        path[t] = pos
    z = _LATENT_BOUND * np.tanh(path / _LATENT_BOUND)

    # audio samples the latent at sub-frame times u/rate (one extra latent
    # step exists at index t_frames, so interpolation never runs off the end)
    u = np.arange(rate * t_frames)
    p = u / rate
    t0 = np.floor(p).astype(np.int64)
    frac = (p - t0)[:, None]
    z_audio = z[t0] * (1.0 - frac) + z[t0 + 1] * frac

    visual = z[:t_frames] @ vis_mix
    audio = z_audio @ aud_mix
    if config.noise_sigma > 0:
        visual = visual + rng.normal(scale=config.noise_sigma, size=visual.shape)
        audio = audio + rng.normal(scale=config.noise_sigma, size=audio.shape)
    return Utterance(id=uid, visual=visual.astype(np.float32),
                     audio=audio.astype(np.float32))


# ---------------------------------------------------------------------------
# pair sampling
# ---------------------------------------------------------------------------

def allowed_negative_offsets(config: CorpusConfig) -> np.ndarray:
    offsets = [o for o in range(-OFFSET_RANGE, OFFSET_RANGE + 1) if o != 0]
    if config.exclude_near_offsets:
        offsets = [o for o in offsets if abs(o) > 1]
    return np.array(offsets, dtype=np.int64)


def extract_pair(utt: Utterance, v0: int, offset: int, rate: int) -> AVPair:
    a0 = v0 + offset
    visual = utt.visual[v0:v0 + WINDOW_FRAMES]
    audio = utt.audio[rate * a0: rate * (a0 + WINDOW_FRAMES)]
    return AVPair(visual_window=visual, audio_window=audio,
                  offset=offset, label=1 if offset == 0 else 0)


def sample_batch(
    utterances: list[Utterance],
    batch_size: int,
    rng: np.random.Generator,
    config: CorpusConfig,
) -> list[AVPair]:
    """Equal halves of in-sync and offset pairs, uniformly positioned.

    An utterance too short for the drawn offset is skipped and redrawn
    (cannot happen at the config-enforced minimum length, but kept as a
    guard for hand-built corpora).
    """
    if batch_size % 2 != 0:
        raise UsageError(f"batch_size must be even, got {batch_size}")
    if not utterances:
        raise UsageError("cannot sample from an empty split")
    negatives = allowed_negative_offsets(config)
    half = batch_size // 2
    offsets = [0] * half + [int(rng.choice(negatives)) for _ in range(half)]
    pairs = []
    for offset in offsets:
        for _ in range(100):
            utt = utterances[int(rng.integers(len(utterances)))]
            t_frames = utt.visual.shape[0]
            lo = max(0, -offset)
            hi = t_frames - WINDOW_FRAMES - max(0, offset)
            if hi >= lo:
                v0 = int(rng.integers(lo, hi + 1))
                pairs.append(extract_pair(utt, v0, offset, config.audio_rate))
                break
        else:
            raise UsageError(
                f"no utterance long enough for offset {offset}; "
                f"shortest window requires {WINDOW_FRAMES + abs(offset)} frames"
            )
    return pairs


def batch_arrays(pairs: list[AVPair]):
    """Stack a pair list into (visual, audio, labels) float64 arrays."""
    visual = np.stack([p.visual_window for p in pairs]).astype(np.float64)
    audio = np.stack([p.audio_window for p in pairs]).astype(np.float64)
    labels = np.array([p.label for p in pairs], dtype=np.float64)
    return visual, audio, labels


# ---------------------------------------------------------------------------
# learnability oracle
# ---------------------------------------------------------------------------

def latent_match_oracle(
    corpus: Corpus, split: str = "val", n_trials: int = 200, seed: int = 0
) -> float:
    """Offset-0 identification rate of a nearest-latent matcher.

    Recovers latents from both windows via the known mixing matrices
    (pseudo-inverse), interpolates the visual latents at the audio's
    sub-frame times, and picks the candidate offset whose audio latents
    sit closest.  Establishes that the task is solvable before any
    model training.
    """
    cfg = corpus.config
    rate = cfg.audio_rate
    vis_pinv = np.linalg.pinv(corpus.vis_mix)
    aud_pinv = np.linalg.pinv(corpus.aud_mix)
    rng = np.random.default_rng(seed)
    utts = corpus.split(split)
    u_max = (WINDOW_FRAMES - 1) * rate  # audio positions inside the visual support
    u = np.arange(u_max + 1)
    t0 = np.minimum(u // rate, WINDOW_FRAMES - 2)
    frac = (u / rate - t0)[:, None]
    correct = 0
    for _ in range(n_trials):
        utt = utts[int(rng.integers(len(utts)))]
        t_frames = utt.visual.shape[0]
        v0 = int(rng.integers(OFFSET_RANGE, t_frames - WINDOW_FRAMES - OFFSET_RANGE + 1))
        z_vis = utt.visual[v0:v0 + WINDOW_FRAMES].astype(np.float64) @ vis_pinv
        z_vis_sub = z_vis[t0] * (1.0 - frac) + z_vis[t0 + 1] * frac
        best, best_off = None, None
        for off in range(-OFFSET_RANGE, OFFSET_RANGE + 1):
            a0 = v0 + off
            win = utt.audio[rate * a0: rate * (a0 + WINDOW_FRAMES)].astype(np.float64)
            z_aud = (win @ aud_pinv)[:u_max + 1]
            score = -float(((z_aud - z_vis_sub) ** 2).sum())
            if best is None or score > best:
                best, best_off = score, off
        correct += best_off == 0
    return correct / n_trials


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def _write_u32(buf, value: int) -> None:
    buf.write(struct.pack("<I", value))


def _write_array(buf, arr: np.ndarray, dtype: str = "<f4") -> None:
    _write_u32(buf, arr.ndim)
    for dim in arr.shape:
        _write_u32(buf, dim)
    buf.write(arr.astype(dtype).tobytes())


def serialize_corpus(corpus: Corpus) -> bytes:
    cfg = corpus.config
    buf = io.BytesIO()
    buf.write(MAGIC_PREFIX + FORMAT_VERSION)
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(cfg)]
    lines += [f"count_{s} = {len(corpus.splits[s])}" for s in SPLIT_NAMES]
    header = "\n".join(lines).encode("utf-8")
    _write_u32(buf, len(header))
    buf.write(header)
    _write_array(buf, corpus.vis_mix, "<f8")
    _write_array(buf, corpus.aud_mix, "<f8")
    for split in SPLIT_NAMES:
        for utt in corpus.splits[split]:
            uid = utt.id.encode("utf-8")
            _write_u32(buf, len(uid))
            buf.write(uid)
            _write_array(buf, utt.visual)
            _write_array(buf, utt.audio)
    return buf.getvalue()


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_corpus(corpus))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.at = 0

    def take(self, n: int) -> bytes:
        if self.at + n > len(self.blob):
            raise DataFormatError(
                f"truncated corpus file: needed {n} bytes at byte {self.at}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.at:self.at + n]
        self.at += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def array(self, dtype="<f4") -> np.ndarray:
        ndim = self.u32()
        if ndim > 8:
            raise DataFormatError(f"implausible array rank {ndim} at byte {self.at - 4}")
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        itemsize = np.dtype(dtype).itemsize
        raw = self.take(count * itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape)


def _parse_header(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_corpus(path) -> Corpus:
    with open(path, "rb") as fh:
        blob = fh.read()
    rd = _Reader(blob)
    magic = rd.take(8)
    if magic[:6] != MAGIC_PREFIX:
        raise DataFormatError(f"bad magic {magic!r}; not a corpus file")
    if magic[6:] != FORMAT_VERSION:
        raise DataFormatError(
            f"unsupported corpus format version {magic[6:].decode('ascii', 'replace')!r}; "
            f"this build reads version {FORMAT_VERSION.decode()!r}"
        )
    header = _parse_header(rd.take(rd.u32()).decode("utf-8"))
    kwargs = {}
    for f in fields(CorpusConfig):
        if f.name not in header:
            raise DataFormatError(f"corpus header is missing key {f.name!r}")
        raw = header[f.name]
        default = getattr(CorpusConfig, f.name)
        if isinstance(default, bool):
            kwargs[f.name] = raw == "True"
        elif isinstance(default, float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = int(raw)
    config = CorpusConfig(**kwargs)
    vis_mix = rd.array("<f8")
    aud_mix = rd.array("<f8")
    splits: dict[str, list[Utterance]] = {}
    for split in SPLIT_NAMES:
        count = int(header[f"count_{split}"])
        utts = []
        for _ in range(count):
            uid = rd.take(rd.u32()).decode("utf-8")
            visual = rd.array().astype(np.float32)
            audio = rd.array().astype(np.float32)
            utts.append(Utterance(id=uid, visual=visual, audio=audio))
        splits[split] = utts
    if rd.at != len(blob):
        raise DataFormatError(f"{len(blob) - rd.at} trailing bytes after byte {rd.at}")
    return Corpus(config=config, splits=splits,
                  vis_mix=np.asarray(vis_mix, dtype=np.float64),
                  aud_mix=np.asarray(aud_mix, dtype=np.float64))
