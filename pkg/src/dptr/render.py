"""Synthetic text images in a clean regime and a cluttered regime.

Glyphs come from a built-in 5x7 bitmap font. Images are stored as binary
PGM (P5) files and indexed by a JSONL manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import LabelCorpus

DEFAULT_CANVAS = (32, 64)
DEFAULT_PATCH = (4, 8)
DOMAINS = ("clean", "cluttered", "photo")

_FONT_ROWS = {
    "0": ".###. #...# #..## #.#.# ##..# #...# .###.",
    "1": "..#.. .##.. ..#.. ..#.. ..#.. ..#.. .###.",
    "2": ".###. #...# ....# ...#. ..#.. .#... #####",
    "3": "##### ...#. ..#.. ...#. ....# #...# .###.",
    "4": "...#. ..##. .#.#. #..#. ##### ...#. ...#.",
    "5": "##### #.... ####. ....# ....# #...# .###.",
    "6": "..##. .#... #.... ####. #...# #...# .###.",
    "7": "##### ....# ...#. ..#.. .#... .#... .#...",
    "8": ".###. #...# #...# .###. #...# #...# .###.",
    "9": ".###. #...# #...# .#### ....# ...#. .##..",
    "a": "..... ..... .###. ....# .#### #...# .####",
    "b": "#.... #.... #.##. ##..# #...# #...# ####.",
    "c": "..... ..... .###. #.... #.... #...# .###.",
    "d": "....# ....# .##.# #..## #...# #...# .####",
    "e": "..... ..... .###. #...# ##### #.... .###.",
    "f": "..##. .#..# .#... ###.. .#... .#... .#...",
    "g": "..... .#### #...# #...# .#### ....# .###.",
    "h": "#.... #.... #.##. ##..# #...# #...# #...#",
    "i": "..#.. ..... .##.. ..#.. ..#.. ..#.. .###.",
    "j": "...#. ..... ..##. ...#. ...#. #..#. .##..",
    "k": "#.... #.... #..#. #.#.. ##... #.#.. #..#.",
    "l": ".##.. ..#.. ..#.. ..#.. ..#.. ..#.. .###.",
    "m": "..... ..... ##.#. #.#.# #.#.# #...# #...#",
    "n": "..... ..... #.##. ##..# #...# #...# #...#",
    "o": "..... ..... .###. #...# #...# #...# .###.",
    "p": "..... ..... ####. #...# ####. #.... #....",
    "q": "..... ..... .##.# #..## .#### ....# ....#",
    "r": "..... ..... #.##. ##..# #.... #.... #....",
    "s": "..... ..... .###. #.... .###. ....# ####.",
    "t": ".#... .#... ###.. .#... .#... .#..# ..##.",
    "u": "..... ..... #...# #...# #...# #..## .##.#",
    "v": "..... ..... #...# #...# #...# .#.#. ..#..",
    "w": "..... ..... #...# #...# #.#.# #.#.# .#.#.",
    "x": "..... ..... #...# .#.#. ..#.. .#.#. #...#",
    "y": "..... ..... #...# #...# .#### ....# .###.",
    "z": "..... ..... ##### ...#. ..#.. .#... #####",
}
FONT = {
    ch: np.array([[c == "#" for c in row] for row in rows.split()], dtype=bool)
    for ch, rows in _FONT_ROWS.items()
}
GLYPH_H, GLYPH_W = 7, 5
MARGIN = 1


class RenderError(ValueError):
    pass


@dataclass
class TextImage:
    pixels: np.ndarray  # (H, W) float32 in [0, 1]
    label: str
    domain: str

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise RenderError(f"unknown domain {self.domain!r}")
        if self.pixels.ndim != 2:
            raise RenderError("pixels must be a 2-D matrix")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise RenderError("pixels outside [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


def _gap(n: int, width: int) -> int:
    """Inter-glyph gap (1, or 0 when crowded) for ``n`` glyphs at native scale; raises on overflow."""
    avail = width - 2 * MARGIN
    if n * (GLYPH_W + 1) - 1 <= avail:
        return 1
    if n * GLYPH_W <= avail:
        return 0
    raise RenderError("overflow")


def _resize(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Separable bilinear resize with pixel-centre alignment."""
    def weights(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        m = np.zeros((n_out, n_in))
        m[np.arange(n_out), lo] += 1 - (pos - lo)
        m[np.arange(n_out), hi] += pos - lo
        return m

    return weights(x.shape[0], h) @ x @ weights(x.shape[1], w).T


def render_label(label: str, canvas: tuple[int, int] = DEFAULT_CANVAS, rng=None) -> TextImage:
    """Dark glyphs on a light background, cropped tightly and resized to the canvas.

    The word is drawn at native font scale, then stretched into the canvas
    with a few pixels of seeded margin, the way word crops are resized for
    recognition.
    """
    rng = np.random.default_rng(rng)
    h, w = canvas
    for ch in label:
        if ch not in FONT:
            raise RenderError(f"no glyph for {ch!r}")
    gap = _gap(len(label), w)
    native = np.zeros((GLYPH_H, len(label) * (GLYPH_W + gap) - gap))
    for i, ch in enumerate(label):
        x = i * (GLYPH_W + gap)
        native[:, x : x + GLYPH_W] = FONT[ch]
    top, bottom = rng.integers(MARGIN, 6, size=2)
    left, right = rng.integers(MARGIN, 5, size=2)
    background = rng.uniform(0.75, 1.0)
    ink = rng.uniform(0.0, 0.3)

    cover = np.zeros((h, w))
    cover[top : h - bottom, left : w - right] = _resize(native, h - top - bottom, w - left - right)
    pixels = background + (ink - background) * np.clip(cover, 0.0, 1.0)
    return TextImage(pixels.astype(np.float32), label, "clean")


def _smooth_field(shape: tuple[int, int], cell: int, rng: np.random.Generator) -> np.ndarray:
    """Bilinear upsampling of a coarse uniform grid; values in [0, 1]."""
    h, w = shape
    gh, gw = h // cell + 2, w // cell + 2
    coarse = rng.random((gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx)


def _blur3(x: np.ndarray) -> np.ndarray:
    p = np.pad(x, 1, mode="edge")
    h, w = x.shape
    return sum(p[i : i + h, j : j + w] for i in range(3) for j in range(3)) / 9.0


def _shift(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    if dy == 0 and dx == 0:
        return x
    p = np.pad(x, 2, mode="edge")
    h, w = x.shape
    return p[2 - dy : 2 - dy + h, 2 - dx : 2 - dx + w]


NOISE_SIGMA = 0.12
TEXTURE_MIX = 0.6


def corrupt_image(img: TextImage, strength: float, rng=None) -> TextImage:
    """Texture blend, jitter, 3x3 blur and Gaussian noise, each scaled by ``strength``.

    All random draws happen before ``strength`` is applied, so for a fixed
    seed the outputs at different strengths share the same texture and noise.
    """
    if img.domain != "clean":
        raise RenderError("corrupt_image expects a clean image")
    if not 0.0 <= strength <= 1.0:
        raise RenderError("strength must lie in [0, 1]")
    rng = np.random.default_rng(rng)
    h, w = img.shape
    texture = 0.6 * _smooth_field((h, w), 8, rng) + 0.4 * _smooth_field((h, w), 3, rng)
    tex_amp = rng.uniform(0.5, 1.0)
    jitter = rng.uniform(-1.0, 1.0, size=2)
    noise = rng.standard_normal((h, w))

    s = float(strength)
    x = img.pixels.astype(np.float64)
    if s > 0:
        mix = TEXTURE_MIX * tex_amp * s
        x = (1 - mix) * x + mix * texture
        x = _shift(x, int(round(2 * s * jitter[0])), int(round(2 * s * jitter[1])))
        x = (1 - s) * x + s * _blur3(x)
        x = x + NOISE_SIGMA * s * noise
        x = np.clip(x, 0.0, 1.0)
    return TextImage(x.astype(np.float32), img.label, "cluttered")


def make_photo(canvas: tuple[int, int] = DEFAULT_CANVAS, rng=None) -> TextImage:
    """A procedurally generated natural-image stand-in: smooth fields, gradients and blobs."""
    rng = np.random.default_rng(rng)
    h, w = canvas
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    x = 0.5 * _smooth_field((h, w), int(rng.integers(4, 17)), rng)
    angle = rng.uniform(0, 2 * np.pi)
    grad = (np.cos(angle) * xx / w + np.sin(angle) * yy / h)
    x += 0.3 * (grad - grad.min()) / (np.ptp(grad) + 1e-9)
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(2, h / 2), rng.uniform(2, w / 3)
        blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        x = np.where(blob, 0.5 * x + 0.5 * rng.uniform(0, 1), x)
    x = _blur3(x) + 0.03 * rng.standard_normal((h, w))
    x = (x - x.min()) / (np.ptp(x) + 1e-9)
    return TextImage(x.astype(np.float32), "", "photo")


# --- PGM I/O -------------------------------------------------------------------


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    data = to_uint8(pixels)
    h, w = data.shape
    _atomic_write(Path(path), f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise RenderError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return (data.astype(np.float32) / maxval).astype(np.float32)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# --- datasets ------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    domain: str
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def labels(self, split: str | None = None) -> list[str]:
        out: dict[str, None] = {}
        for e in self.entries:
            if split is None or e.split == split:
                out.setdefault(e.label, None)
        return list(out)

    def load_images(self, entries: Sequence[ManifestEntry] | None = None) -> np.ndarray:
        entries = self.entries if entries is None else entries
        return np.stack([read_pgm(self.root / e.path) for e in entries])

    def save(self, path: str | Path) -> None:
        lines = [json.dumps(e.__dict__, sort_keys=True) for e in self.entries]
        _atomic_write(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    entries = [
        ManifestEntry(**json.loads(line))
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    return DatasetManifest(entries, path.parent)


def split_labels(labels: Sequence[str], split_frac: float, seed: int) -> set[str]:
    """Deterministic train-label subset; everything else is test."""
    order = np.random.default_rng([seed, 0x5A17]).permutation(len(labels))
    n_train = int(round(split_frac * len(labels)))
    return {labels[i] for i in order[:n_train]}


def render_entry(label: str, domain: str, seed_key: Sequence[int], canvas, strength: float) -> TextImage:
    seq = np.random.SeedSequence(list(seed_key))
    render_seed, corrupt_seed = seq.spawn(2)
    img = render_label(label, canvas, np.random.default_rng(render_seed))
    if domain == "cluttered":
        img = corrupt_image(img, strength, np.random.default_rng(corrupt_seed))
    return img


def build_dataset(
    corpus: LabelCorpus,
    per_label: int,
    domain: str,
    split_frac: float,
    seed: int,
    out_dir: str | Path,
    canvas: tuple[int, int] = DEFAULT_CANVAS,
    strength: float = 0.3,
    workers: int = 1,
) -> DatasetManifest:
    """Render ``per_label`` images per label and write them plus ``manifest.jsonl``.

    Each image has its own seed derived from (seed, label index, copy index), so
    the output is identical regardless of ``workers``.
    """
    if per_label < 1:
        raise RenderError("per_label must be >= 1")
    if domain not in ("clean", "cluttered"):
        raise RenderError(f"unknown domain {domain!r}")
    out_dir = Path(out_dir)
    train = split_labels(corpus.labels, split_frac, seed)
    jobs = []
    for li, label in enumerate(corpus.labels):
        for k in range(per_label):
            rel = f"{domain}/{li:05d}_{k}.pgm"
            jobs.append((rel, label, (seed, li, k)))

    def run(job):
        rel, label, key = job
        img = render_entry(label, domain, key, canvas, strength)
        write_pgm(out_dir / rel, img.pixels)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, jobs))
    else:
        for job in jobs:
            run(job)

    entries = [
        ManifestEntry(rel, label, domain, "train" if label in train else "test")
        for rel, label, _ in jobs
    ]
    manifest = DatasetManifest(entries, out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
