"""Synthetic foreground/background ReID corpus, captions, manifests and PK sampling.

Every person is a two-colour figure (upper and lower garment) whose colours
depend only on the person id.  The background texture depends on the scene,
and the scene is tied to the camera, so background is a camera-level
distractor.  Cameras also apply a colour gain.  Optional grey occluders hide
part of the figure.  Foreground captions name the garment colours;
background captions name the scene and whether an occluder is present.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import DataConfig
from .io import read_ppm, write_ppm

COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.70, 0.20),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.15),
    "white": (0.92, 0.92, 0.92),
    "black": (0.08, 0.08, 0.08),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.55, 0.20, 0.70),
    "pink": (0.95, 0.55, 0.75),
    "brown": (0.50, 0.30, 0.15),
}
SCENES = ("street", "park", "wall", "corridor", "station", "beach", "forest", "office")
# (pattern, colour a, colour b); colours overlap the garment palette on purpose
SCENE_STYLE = (
    ("hstripes", (0.55, 0.55, 0.60), (0.80, 0.25, 0.20)),
    ("vstripes", (0.20, 0.55, 0.25), (0.60, 0.75, 0.30)),
    ("checker", (0.75, 0.70, 0.60), (0.30, 0.30, 0.70)),
    ("gradient", (0.90, 0.80, 0.30), (0.40, 0.25, 0.15)),
    ("hstripes", (0.25, 0.25, 0.30), (0.85, 0.85, 0.85)),
    ("gradient", (0.90, 0.85, 0.60), (0.30, 0.60, 0.90)),
    ("vstripes", (0.10, 0.35, 0.15), (0.45, 0.30, 0.15)),
    ("checker", (0.85, 0.85, 0.80), (0.60, 0.60, 0.65)),
)
OCCLUDER_GRAY = (0.5, 0.5, 0.5)
MAX_CAMERA_GAIN = 0.15

PAD = "<pad>"
VOCAB_WORDS = (
    [PAD, "a", "person", "in", "shirt", "and", "pants", "background", "with", "gray", "pole", "no", "obstacle"]
    + list(COLORS)
    + list(SCENES)
)


class VocabularyError(KeyError):
    pass


@dataclass
class SampleRecord:
    image: str
    pid: int
    camid: int
    fg_tokens: list[int]
    bg_tokens: list[int]

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(", ", ": "))


def default_vocab() -> dict[str, int]:
    return {w: i for i, w in enumerate(VOCAB_WORDS)}


def write_vocab(path, vocab: dict[str, int]) -> None:
    words = sorted(vocab, key=vocab.get)
    if [vocab[w] for w in words] != list(range(len(words))):
        raise ValueError("vocabulary ids must be 0..n-1")
    Path(path).write_text("".join(w + "\n" for w in words), encoding="utf-8")


def read_vocab(path) -> dict[str, int]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return {w: i for i, w in enumerate(lines)}


def tokenize(words: Sequence[str], vocab: dict[str, int], max_len: int = 12) -> list[int]:
    """One id per word, order kept, truncated to ``max_len``."""
    missing = [w for w in words if w not in vocab]
    if missing:
        raise VocabularyError(f"out-of-vocabulary words: {missing}")
    return [vocab[w] for w in words][:max_len]


def identity_colors(pid: int) -> tuple[str, str]:
    """Fixed (upper, lower) colour names for a person id."""
    names = list(COLORS)
    pairs = [p for p in itertools.permutations(names, 2)]
    order = np.random.default_rng(2024).permutation(len(pairs))
    if pid >= len(pairs):
        raise ValueError(f"at most {len(pairs)} identities have distinct colour pairs")
    return pairs[order[pid]]


def camera_gain(camid: int) -> np.ndarray:
    rng = np.random.default_rng([77, camid])
    return 1.0 + rng.uniform(-MAX_CAMERA_GAIN, MAX_CAMERA_GAIN, size=3)


def fg_caption(pid: int) -> list[str]:
    upper, lower = identity_colors(pid)
    return ["a", "person", "in", upper, "shirt", "and", lower, "pants"]


def bg_caption(scene: int, occluded: bool) -> list[str]:
    tail = ["with", "a", "gray", "pole"] if occluded else ["with", "no", "obstacle"]
    return ["a", SCENES[scene], "background"] + tail


def _background(scene: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    pattern, a, b = SCENE_STYLE[scene % len(SCENE_STYLE)]
    a, b = np.array(a), np.array(b)
    yy, xx = np.mgrid[0:h, 0:w]
    phase = int(rng.integers(0, 4))
    if pattern == "hstripes":
        t = ((yy + phase) // 3 % 2).astype(float)
    elif pattern == "vstripes":
        t = ((xx + phase) // 2 % 2).astype(float)
    elif pattern == "checker":
        t = (((yy + phase) // 4 + xx // 4) % 2).astype(float)
    else:
        t = yy / max(h - 1, 1)
    return a * (1 - t[..., None]) + b * t[..., None]


def render_image(pid: int, camid: int, scene: int, occluded: bool, cfg: DataConfig,
                 rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """Float (H, W, 3) image in [0, 1] plus geometry metadata."""
    h, w = cfg.image_height, cfg.image_width
    img = _background(scene, h, w, rng)
    ph = int(rng.integers(int(0.6 * h), int(0.85 * h) + 1))
    pw = int(rng.integers(max(2, int(0.35 * w)), max(3, int(0.6 * w)) + 1))
    top = int(rng.integers(0, h - ph + 1))
    left = int(rng.integers(0, w - pw + 1))
    split = top + ph // 2
    upper, lower = identity_colors(pid)
    img[top:split, left : left + pw] = COLORS[upper]
    img[split : top + ph, left : left + pw] = COLORS[lower]
    fg = np.zeros((h, w), dtype=bool)
    fg[top : top + ph, left : left + pw] = True
    occ = np.zeros((h, w), dtype=bool)
    if occluded:
        if rng.random() < 0.5:
            bh = int(rng.integers(3, max(4, ph // 3) + 1))
            by = int(rng.integers(top, top + ph - bh + 1))
            occ[by : by + bh, :] = True
        else:
            bw = int(rng.integers(2, max(3, pw // 2) + 1))
            bx = int(rng.integers(left, left + pw - bw + 1))
            occ[:, bx : bx + bw] = True
        img[occ] = OCCLUDER_GRAY
    img = img * camera_gain(camid)
    if cfg.noise > 0:
        img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    meta = {"top": top, "left": left, "height": ph, "width": pw, "split": split,
            "fg_mask": fg & ~occ, "upper_mask": fg & ~occ & (np.arange(h)[:, None] < split)}
    return np.clip(img, 0.0, 1.0), meta


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255.0).astype(np.uint8)


def corpus_entries(cfg: DataConfig) -> Iterable[tuple[int, int, int, int, bool, np.random.Generator]]:
    """(pid, k, camid, scene, occluded, rng) for every image, in manifest order.

    Each image gets its own RNG stream derived from (seed, pid, k), so the
    output does not depend on generation order.
    """
    if cfg.num_scenes > len(SCENES):
        raise ValueError(f"at most {len(SCENES)} scene classes")
    for pid in range(cfg.num_ids):
        for k in range(cfg.images_per_id):
            rng = np.random.default_rng([cfg.seed, pid, k])
            camid = k % cfg.num_cams
            scene = camid % cfg.num_scenes
            occluded = bool(rng.random() < cfg.occluder_prob)
            yield pid, k, camid, scene, occluded, rng


def generate_corpus(cfg: DataConfig, out_dir=None, max_len: int = 12) -> list[SampleRecord]:
    """Write PPM images, ``manifest.jsonl`` and ``vocab.txt`` under ``out_dir``."""
    cfg.validate()
    root = Path(out_dir if out_dir is not None else cfg.root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    vocab = default_vocab()
    records = []
    for pid, k, camid, scene, occluded, rng in corpus_entries(cfg):
        img, _ = render_image(pid, camid, scene, occluded, cfg, rng)
        rel = f"images/{pid:04d}_c{camid}_{k:03d}.ppm"
        write_ppm(root / rel, to_uint8(img))
        records.append(SampleRecord(rel, pid, camid,
                                    tokenize(fg_caption(pid), vocab, max_len),
                                    tokenize(bg_caption(scene, occluded), vocab, max_len)))
    write_manifest(root / "manifest.jsonl", records)
    write_vocab(root / "vocab.txt", vocab)
    return records


def write_manifest(path, records: Sequence[SampleRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_manifest(path) -> list[SampleRecord]:
    fields = {"image", "pid", "camid", "fg_tokens", "bg_tokens"}
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            doc = json.loads(line)
            if set(doc) != fields:
                raise ValueError(f"{path}:{lineno}: fields must be exactly {sorted(fields)}")
            records.append(SampleRecord(str(doc["image"]), int(doc["pid"]), int(doc["camid"]),
                                        [int(t) for t in doc["fg_tokens"]], [int(t) for t in doc["bg_tokens"]]))
    return records


def pad_tokens(seqs: Sequence[Sequence[int]], length: int, pad_id: int = 0) -> np.ndarray:
    out = np.full((len(seqs), length), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        if len(s) > length:
            raise ValueError(f"caption {i} has {len(s)} tokens, limit is {length}")
        out[i, : len(s)] = s
    return out


@dataclass
class ReIDData:
    """In-memory corpus: images in [0, 1] as (n, H, W, 3) float32, captions padded."""

    images: np.ndarray
    pids: np.ndarray
    camids: np.ndarray
    fg_tokens: np.ndarray
    bg_tokens: np.ndarray

    def __len__(self) -> int:
        return len(self.pids)

    def subset(self, idx) -> "ReIDData":
        idx = np.asarray(idx)
        return ReIDData(self.images[idx], self.pids[idx], self.camids[idx], self.fg_tokens[idx], self.bg_tokens[idx])


def load_dataset(manifest_path, max_len: int = 12, pad_id: int = 0,
                 records: Sequence[SampleRecord] | None = None) -> ReIDData:
    base = Path(manifest_path).parent
    records = read_manifest(manifest_path) if records is None else records
    images = np.stack([read_ppm(base / r.image) for r in records]).astype(np.float32) / 255.0
    return ReIDData(
        images=images,
        pids=np.array([r.pid for r in records], dtype=np.int64),
        camids=np.array([r.camid for r in records], dtype=np.int64),
        fg_tokens=pad_tokens([r.fg_tokens for r in records], max_len, pad_id),
        bg_tokens=pad_tokens([r.bg_tokens for r in records], max_len, pad_id),
    )


def split_by_identity(data: ReIDData, num_train_ids: int) -> tuple[ReIDData, ReIDData]:
    """Identities are disjoint between splits: the lowest ``num_train_ids`` pids train."""
    ids = np.unique(data.pids)
    train_ids = ids[:num_train_ids]
    is_train = np.isin(data.pids, train_ids)
    return data.subset(np.flatnonzero(is_train)), data.subset(np.flatnonzero(~is_train))


def query_gallery_split(pids: np.ndarray, camids: np.ndarray) -> np.ndarray:
    """Query flag: the first image of every (pid, camid) pair; the rest is gallery."""
    seen = set()
    flags = np.zeros(len(pids), dtype=bool)
    for i, key in enumerate(zip(pids.tolist(), camids.tolist())):
        if key not in seen:
            seen.add(key)
            flags[i] = True
    return flags


@dataclass
class Batch:
    indices: np.ndarray  # (P*K,) rows of the dataset
    labels: np.ndarray  # (P*K,) person ids
    P: int
    K: int


class PKSampler:
    """P identities x K instances per batch.

    A round is a random permutation of the identities cut into groups of P;
    a short final group is topped up with other identities so every id
    appears in each round.  Within an id, K images are drawn without
    replacement when it has at least K, otherwise with replacement.
    """

    def __init__(self, pids: Sequence[int], P: int, K: int, seed: int = 0):
        pids = np.asarray(pids)
        self.ids = np.unique(pids)
        if P > len(self.ids):
            raise ValueError(f"P={P} exceeds the {len(self.ids)} identities available")
        self.P, self.K, self.seed = P, K, seed
        self.by_id = {int(i): np.flatnonzero(pids == i) for i in self.ids}
        self.groups_per_round = math.ceil(len(self.ids) / P)

    def _round(self, r: int) -> list[np.ndarray]:
        rng = np.random.default_rng([self.seed, r])
        perm = rng.permutation(self.ids)
        groups = [perm[i : i + self.P] for i in range(0, len(perm), self.P)]
        short = groups[-1]
        if len(short) < self.P:
            others = np.setdiff1d(self.ids, short)
            fill = rng.choice(others, size=self.P - len(short), replace=False)
            groups[-1] = np.concatenate([short, fill])
        return groups

    def batch(self, epoch_pos: int) -> Batch:
        r, g = divmod(epoch_pos, self.groups_per_round)
        group = self._round(r)[g]
        indices = []
        for pid in group:
            pool = self.by_id[int(pid)]
            rng = np.random.default_rng([self.seed, r, int(pid)])
            indices.append(rng.choice(pool, size=self.K, replace=len(pool) < self.K))
        indices = np.concatenate(indices)
        return Batch(indices, np.repeat(group, self.K), self.P, self.K)


def pk_sample(pids: Sequence[int], P: int, K: int, seed: int, epoch_pos: int) -> Batch:
    return PKSampler(pids, P, K, seed).batch(epoch_pos)
