"""Synthetic vehicle-identity data, manifest ingestion and P×K identity sampling."""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff.tensorio import decode_tensor
from .exceptions import (InsufficientIdentities, MissingImage, NonDenseIdentityIds, ParseError,
                         ShapeMismatch)

SPLITS = ("train", "query", "gallery")
_GOLDEN = 0.6180339887498949


# -- PPM ---------------------------------------------------------------------

def encode_ppm(img: np.ndarray) -> bytes:
    """Encode an H×W×3 uint8 array as binary PPM (P6, maxval 255)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ShapeMismatch(f"expected H×W×3 uint8, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    """Decode binary PPM to an H×W×3 float array in [0, 1]."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PPM header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace before the raster
    if tokens[0] != b"P6":
        raise ParseError(f"unsupported PPM magic {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ParseError("non-integer PPM header field") from exc
    if not 0 < maxval < 65536:
        raise ParseError(f"bad PPM maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * 3
    if len(buf) - pos < count * dtype.itemsize:
        raise ParseError("truncated PPM raster")
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    return raw.reshape(h, w, 3).astype(np.float64) / maxval


# -- synthetic generator ------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    num_identities: int = 30
    images_per_identity: int = 10
    cameras: int = 2
    image_size: int = 32
    seed: int = 7
    held_out_identities: int = 10
    noise_sigma: float = 0.03

    def __post_init__(self):
        if self.num_identities < 2 or self.images_per_identity < 1 or self.cameras < 1:
            raise ValueError("need >= 2 identities, >= 1 image per identity, >= 1 camera")
        if not 0 <= self.held_out_identities < self.num_identities:
            raise ValueError("held_out_identities must leave at least one training identity")
        if self.held_out_identities and self.cameras < 2:
            raise ValueError("held-out identities need >= 2 cameras for query/gallery")


@dataclass(frozen=True)
class IdentityLatent:
    hue: float
    saturation: float
    aspect: float
    glyph: tuple  # 3×3 of 0/1, row-major


def identity_latent(spec: SynthSpec, identity: int) -> IdentityLatent:
    rng = np.random.default_rng([spec.seed, identity, 0])
    base = np.random.default_rng([spec.seed]).uniform()
    hue = (base + identity * _GOLDEN + rng.uniform(-0.03, 0.03)) % 1.0
    glyph = rng.integers(0, 2, size=9)
    if glyph.sum() in (0, 9):
        glyph[rng.integers(0, 9)] ^= 1
    return IdentityLatent(float(hue), float(rng.uniform(0.55, 0.95)), float(rng.uniform(1.5, 2.3)),
                          tuple(int(g) for g in glyph))


@dataclass(frozen=True)
class Nuisance:
    rotation_deg: float
    scale: float
    brightness: float
    shift: tuple


def image_nuisance(spec: SynthSpec, identity: int, index: int) -> Nuisance:
    rng = np.random.default_rng([spec.seed, identity, index + 1])
    return Nuisance(float(rng.uniform(-25.0, 25.0)), float(rng.uniform(0.7, 1.15)),
                    float(rng.uniform(0.85, 1.15)), tuple(float(v) for v in rng.uniform(-1.5, 1.5, size=2)))


def render_sprite(spec: SynthSpec, latent: IdentityLatent, nuisance: Nuisance, camera: int,
                  noise_rng: np.random.Generator) -> np.ndarray:
    """Top-down vehicle sprite on a noisy background, H×W×3 floats in [0, 1]."""
    s = spec.image_size
    body_rgb = np.array(colorsys.hsv_to_rgb(latent.hue, latent.saturation, 0.9))
    half_len = 0.40 * s * nuisance.scale
    half_wid = half_len / latent.aspect
    radius = 0.35 * half_wid

    coords = np.arange(s) + 0.5 - s / 2.0
    yy, xx = np.meshgrid(coords - nuisance.shift[1], coords - nuisance.shift[0], indexing="ij")
    t = np.deg2rad(nuisance.rotation_deg)
    u = np.cos(t) * xx + np.sin(t) * yy        # across the body
    v = -np.sin(t) * xx + np.cos(t) * yy       # along the body, front is negative

    qx = np.abs(u) - (half_wid - radius)
    qy = np.abs(v) - (half_len - radius)
    outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0)) + np.minimum(np.maximum(qx, qy), 0)
    body = outside <= radius

    rng_bg = noise_rng
    img = 0.35 + 0.08 * rng_bg.standard_normal((s, s, 1)) * np.ones((1, 1, 3))
    img = img + 0.05 * rng_bg.standard_normal((s, s, 3))
    img[body] = body_rgb

    rel_v = v / half_len
    rel_u = u / half_wid
    windshield = body & (rel_v > -0.62) & (rel_v < -0.38)
    img[windshield] = (0.12, 0.14, 0.18)

    # 3×3 roof glyph
    gx = np.floor((rel_u + 0.72) / 0.48).astype(int)
    gy = np.floor((rel_v + 0.30) / 0.28).astype(int)
    on_roof = body & (gx >= 0) & (gx < 3) & (gy >= 0) & (gy < 3)
    glyph = np.array(latent.glyph).reshape(3, 3)
    cells = np.zeros_like(body)
    cells[on_roof] = glyph[gy[on_roof], gx[on_roof]] == 1
    img[cells] = (0.97, 0.97, 0.97)
    img[on_roof & ~cells] = body_rgb * 0.45

    tint = np.array([1.0, 1.0, 1.0]) + 0.06 * np.array([np.cos(camera * 2.1), np.sin(camera * 2.1), -np.cos(camera * 2.1)])
    img = img * tint * nuisance.brightness
    img = img + spec.noise_sigma * noise_rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- manifest ----------------------------------------------------------------

@dataclass(frozen=True)
class Entry:
    path: str
    id: int
    cam: int
    split: str


@dataclass
class DatasetManifest:
    image_size: tuple
    num_identities: int
    entries: list
    root: Path = field(default_factory=Path)

    def select(self, split: str) -> list:
        return [i for i, e in enumerate(self.entries) if e.split == split]

    def to_json(self) -> dict:
        return {
            "version": 1,
            "image_size": list(self.image_size),
            "num_identities": self.num_identities,
            "entries": [{"path": e.path, "id": e.id, "cam": e.cam, "split": e.split} for e in self.entries],
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")


def synth_generate(spec: SynthSpec, out_dir) -> DatasetManifest:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    first_held_out = spec.num_identities - spec.held_out_identities
    for ident in range(spec.num_identities):
        latent = identity_latent(spec, ident)
        for j in range(spec.images_per_identity):
            cam = j % spec.cameras
            noise_rng = np.random.default_rng([spec.seed, ident, j + 1, 1])
            img = render_sprite(spec, latent, image_nuisance(spec, ident, j), cam, noise_rng)
            rel = f"images/{ident:04d}_c{cam}_{j:03d}.ppm"
            (out / rel).write_bytes(encode_ppm(to_uint8(img)))
            if ident < first_held_out:
                split = "train"
            else:
                split = "query" if cam == spec.cameras - 1 else "gallery"
            entries.append(Entry(rel, ident, cam, split))
    manifest = DatasetManifest((spec.image_size, spec.image_size), spec.num_identities, entries, out)
    manifest.write(out / "manifest.json")
    return manifest


def _field(obj, key, kind, line=None, where=""):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"missing field{where}", line=line, field=key)
    val = obj[key]
    if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise ParseError(f"expected integer{where}", line=line, field=key)
    if kind is not int and not isinstance(val, kind):
        raise ParseError(f"expected {kind.__name__}{where}", line=line, field=key)
    return val


def parse_manifest(text: str, root=".") -> DatasetManifest:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from exc
    if _field(doc, "version", int) != 1:
        raise ParseError("unsupported manifest version", field="version")
    size = _field(doc, "image_size", list)
    if len(size) != 2 or not all(isinstance(v, int) and v > 0 for v in size):
        raise ParseError("image_size must be [H, W] positive integers", field="image_size")
    n_ids = _field(doc, "num_identities", int)
    raw_entries = _field(doc, "entries", list)
    entries = []
    for i, raw in enumerate(raw_entries):
        where = f" in entries[{i}]"
        split = _field(raw, "split", str, where=where)
        if split not in SPLITS:
            raise ParseError(f"unknown split {split!r}{where}", field="split")
        entries.append(Entry(_field(raw, "path", str, where=where), _field(raw, "id", int, where=where),
                             _field(raw, "cam", int, where=where), split))
    ids = {e.id for e in entries}
    if ids != set(range(n_ids)):
        raise NonDenseIdentityIds(f"identity ids {sorted(ids)} are not dense in [0, {n_ids})")
    gallery_ids = {e.id for e in entries if e.split == "gallery"}
    orphans = sorted({e.id for e in entries if e.split == "query"} - gallery_ids)
    if orphans:
        raise ParseError(f"query identities missing from gallery: {orphans}", field="entries")
    return DatasetManifest(tuple(size), n_ids, entries, Path(root))


class ImageLoader:
    """Lazy decoder from manifest entries to N×3×H×W float arrays in [0, 1]."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict = {}

    def path(self, index: int) -> Path:
        return self.manifest.root / self.manifest.entries[index].path

    def load_one(self, index: int) -> np.ndarray:
        if index in self._cache:
            return self._cache[index]
        p = self.path(index)
        try:
            buf = p.read_bytes()
        except FileNotFoundError as exc:
            raise MissingImage(str(p)) from exc
        if buf[:4] == b"DPAT":
            arr, _ = decode_tensor(buf)
            arr = np.asarray(arr, dtype=np.float64).reshape(arr.shape[-3:])
        else:
            arr = decode_ppm(buf).transpose(2, 0, 1)
        if arr.shape != (3,) + tuple(self.manifest.image_size):
            raise ShapeMismatch(f"{p}: decoded shape {arr.shape}, manifest declares {self.manifest.image_size}")
        self._cache[index] = arr
        return arr

    def load(self, indices) -> np.ndarray:
        return np.stack([self.load_one(int(i)) for i in indices])

    def __len__(self):
        return len(self.manifest.entries)


def load_manifest(path):
    """Parse and validate ``manifest.json``; returns ``(manifest, loader)``."""
    path = Path(path)
    manifest = parse_manifest(path.read_text(encoding="utf-8"), root=path.parent)
    for e in manifest.entries:
        if not (manifest.root / e.path).is_file():
            raise MissingImage(str(manifest.root / e.path))
    return manifest, ImageLoader(manifest)


# -- P×K sampling ------------------------------------------------------------

@dataclass(frozen=True)
class PkBatch:
    indices: np.ndarray  # positions into the caller's item list
    labels: np.ndarray
    P: int
    K: int


class PkSampler:
    """Balanced identity sampler yielding batches of P identities × K items.

    One epoch walks a random permutation of the identities P at a time; a
    short final group is topped up with other identities so every identity
    is seen each epoch. Identities with fewer than K items are sampled with
    replacement, each item at least once.
    """

    def __init__(self, labels, P: int, K: int, seed: int = 0):
        labels = np.asarray(labels)
        self.P, self.K = int(P), int(K)
        self.by_id = {int(k): np.flatnonzero(labels == k) for k in np.unique(labels)}
        self.ids = np.array(sorted(self.by_id))
        if self.P < 1 or self.K < 1:
            raise ValueError("P and K must be positive")
        if len(self.ids) < self.P:
            raise InsufficientIdentities(f"{len(self.ids)} identities available, P={self.P}")
        self.rng = np.random.default_rng(seed)
        self._queue: list = []
        self.epoch = 0

    def _next_group(self) -> list:
        if not self._queue:
            self._queue = [int(i) for i in self.rng.permutation(self.ids)]
            self.epoch += 1
        group = self._queue[: self.P]
        self._queue = self._queue[self.P:]
        if len(group) < self.P:
            rest = np.array([i for i in self.ids if i not in group])
            group += [int(i) for i in self.rng.choice(rest, self.P - len(group), replace=False)]
        return group

    def next(self) -> PkBatch:
        group = self._next_group()
        idx, lab = [], []
        for ident in group:
            pool = self.by_id[ident]
            if len(pool) >= self.K:
                pick = self.rng.choice(pool, self.K, replace=False)
            else:
                extra = self.rng.choice(pool, self.K - len(pool), replace=True)
                pick = self.rng.permutation(np.concatenate([pool, extra]))
            idx.extend(int(i) for i in pick)
            lab.extend([ident] * self.K)
        return PkBatch(np.array(idx), np.array(lab), self.P, self.K)

    def batches_per_epoch(self) -> int:
        return -(-len(self.ids) // self.P)

    __next__ = next

    def __iter__(self):
        return self


def pk_sampler_next(sampler: PkSampler) -> PkBatch:
    return sampler.next()
