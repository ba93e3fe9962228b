"""Samples, on-disk formats (JSONL manifests, binary PPM/PGM), augmentation and
the synthetic view-dependent pedestrian generator.

Manifest layout: the first line is a header ``{"K", "attr_names",
"view_names"}``; every following line is ``{"id", "image", "attrs", "view"}``
with ``image`` relative to the manifest's directory and ``view`` in 0..3 or
null.
"""
from __future__ import annotations

import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ImageFormatError, ManifestError
from .model import VIEW_NAMES

NORM_MEAN = 0.5
NORM_STD = 0.25


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W, float64 in [0, 1]
    attrs: np.ndarray  # K, int 0/1
    view: int | None
    id: str


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

def write_ppm(path, rgb: np.ndarray) -> None:
    """``rgb``: H x W x 3 uint8."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ImageFormatError(f"write_ppm needs H x W x 3 uint8, got {rgb.dtype} {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.dtype != np.uint8 or gray.ndim != 2:
        raise ImageFormatError(f"write_pgm needs H x W uint8, got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


_HEADER = re.compile(rb"\A(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"{path}: cannot read image ({exc.strerror})") from None
    m = _HEADER.match(raw)
    if not m or m.group(1) != magic:
        raise ImageFormatError(f"{path}: not a binary {magic.decode()} file")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit (maxval 255) images are supported")
    body = raw[m.end():]
    need = w * h * channels
    if len(body) != need:
        raise ImageFormatError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def read_ppm(path) -> np.ndarray:
    """H x W x 3 uint8."""
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def to_chw(rgb: np.ndarray) -> np.ndarray:
    return rgb.transpose(2, 0, 1).astype(np.float64) / 255.0


def to_hwc_uint8(chw: np.ndarray) -> np.ndarray:
    return np.round(np.clip(chw, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _num_threads() -> int:
    try:
        return max(1, int(os.environ.get("VALA_THREADS", "1")))
    except ValueError:
        return 1


class ManifestDataset:
    """Lazy view over a manifest; images are decoded on access."""

    def __init__(self, path, K: int, attr_names: list[str], view_names: list[str], records: list[dict]):
        self.path = Path(path)
        self.root = self.path.parent
        self.K = K
        self.attr_names = attr_names
        self.view_names = view_names
        self.records = records

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> Sample:
        rec = self.records[i]
        return Sample(to_chw(read_ppm(self.root / rec["image"])), np.array(rec["attrs"], dtype=np.int64), rec["view"], rec["id"])

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def ids(self) -> list[str]:
        return [r["id"] for r in self.records]

    def attr_matrix(self) -> np.ndarray:
        return np.array([r["attrs"] for r in self.records], dtype=np.int64).reshape(len(self.records), self.K)

    def views(self) -> np.ndarray:
        """View labels with -1 for missing."""
        return np.array([-1 if r["view"] is None else r["view"] for r in self.records], dtype=np.int64)

    def has_views(self) -> bool:
        return all(r["view"] is not None for r in self.records)

    def load_images(self, threads: int | None = None) -> np.ndarray:
        """All images as N x 3 x H x W uint8, in manifest order."""
        paths = [self.root / r["image"] for r in self.records]
        if not paths:
            return np.zeros((0, 3, 0, 0), dtype=np.uint8)
        threads = threads or _num_threads()
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                imgs = list(pool.map(read_ppm, paths))
        else:
            imgs = [read_ppm(p) for p in paths]
        return np.stack(imgs).transpose(0, 3, 1, 2).copy()


def write_manifest(path, attr_names: Sequence[str], records: Sequence[dict]) -> None:
    header = {"K": len(attr_names), "attr_names": list(attr_names), "view_names": list(VIEW_NAMES)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps({k: rec[k] for k in ("id", "image", "attrs", "view")}, sort_keys=True) + "\n")


def load_manifest(path, check_images: bool = True) -> ManifestDataset:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ManifestError(f"{path}: cannot read manifest ({exc.strerror})") from None
    if not lines or all(not ln.strip() for ln in lines):
        return ManifestDataset(path, 0, [], list(VIEW_NAMES), [])

    def fail(lineno: int, msg: str):
        raise ManifestError(f"{path}:{lineno}: {msg}")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        fail(1, f"malformed header ({exc.msg})")
    if not isinstance(header, dict) or "K" not in header or "attr_names" not in header:
        fail(1, "header must carry K and attr_names")
    K = header["K"]
    if not isinstance(K, int) or K < 0 or len(header["attr_names"]) != K:
        fail(1, "header K does not match attr_names")
    records = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            fail(lineno, f"malformed JSON ({exc.msg})")
        if not isinstance(rec, dict) or not {"id", "image", "attrs"} <= set(rec):
            fail(lineno, "record needs id, image and attrs")
        attrs = rec["attrs"]
        if not isinstance(attrs, list) or len(attrs) != K:
            fail(lineno, f"attrs has {len(attrs) if isinstance(attrs, list) else '?'} entries, expected K={K}")
        if any(a not in (0, 1) or isinstance(a, bool) for a in attrs):
            fail(lineno, "attrs must be 0/1 integers")
        view = rec.get("view")
        if view is not None and (not isinstance(view, int) or isinstance(view, bool) or not 0 <= view <= 3):
            fail(lineno, f"view must be 0..3 or null, got {view!r}")
        if rec["id"] in seen:
            fail(lineno, f"duplicate id {rec['id']!r}")
        seen.add(rec["id"])
        if check_images and not (path.parent / rec["image"]).is_file():
            fail(lineno, f"missing image file {rec['image']}")
        records.append({"id": str(rec["id"]), "image": rec["image"], "attrs": attrs, "view": view})
    return ManifestDataset(path, K, list(header["attr_names"]), list(header.get("view_names", VIEW_NAMES)), records)


# ---------------------------------------------------------------------------
# augmentation / preprocessing
# ---------------------------------------------------------------------------

def random_crop(image: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad by ``pad`` on every side and cut a window of the original size.

    Always consumes exactly two draws from ``rng``.
    """
    if pad < 0:
        raise ValueError("pad must be >= 0")
    dy = int(rng.integers(0, 2 * pad + 1))
    dx = int(rng.integers(0, 2 * pad + 1))
    if pad == 0:
        return image.copy()
    c, h, w = image.shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=image.dtype)
    padded[:, pad : pad + h, pad : pad + w] = image
    return padded[:, dy : dy + h, dx : dx + w].copy()


def bilinear_resize(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centre bilinear resize of ``... x H x W`` arrays."""
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be positive, got {target}")
    h, w = image.shape[-2:]
    if (h, w) == (th, tw):
        return image.astype(np.float64, copy=True)

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(th, h)
    x0, x1, fx = coords(tw, w)
    img = image.astype(np.float64)
    top = img[..., y0, :] * (1 - fy)[:, None] + img[..., y1, :] * fy[:, None]
    return top[..., x0] * (1 - fx) + top[..., x1] * fx


def normalize_resize(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``target`` then ``(x - 0.5) / 0.25`` per channel."""
    return (bilinear_resize(image, target) - NORM_MEAN) / NORM_STD


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class ViewMod:
    visible: bool = True
    offset: tuple[float, float] = (0.0, 0.0)  # (dy, dx), canvas fractions
    scale: tuple[float, float] = (1.0, 1.0)  # (height, width) multipliers


@dataclass
class AttrSpec:
    name: str
    color: tuple[float, float, float]
    prob: float
    base: tuple[float, float, float, float]  # y, x, h, w as canvas fractions
    views: list[ViewMod]

    def rect(self, view: int, canvas: tuple[int, int]) -> tuple[int, int, int, int] | None:
        """Pixel rectangle ``(y0, x0, y1, x1)`` for ``view`` or None if hidden."""
        mod = self.views[view]
        if not mod.visible:
            return None
        H, W = canvas
        y, x, h, w = self.base
        y0 = round((y + mod.offset[0]) * H)
        x0 = round((x + mod.offset[1]) * W)
        y1 = y0 + max(1, round(h * mod.scale[0] * H))
        x1 = x0 + max(1, round(w * mod.scale[1] * W))
        return y0, x0, y1, x1


def _mods(*items) -> list[ViewMod]:
    out = []
    for it in items:
        if it is None:
            out.append(ViewMod(visible=False))
        else:
            off, sc = it
            out.append(ViewMod(True, off, sc))
    return out


def default_attributes() -> list[AttrSpec]:
    """Eight attributes in four colour pairs.

    Red (hat, backpack) is readable from local appearance.  Green (chest logo,
    back print) is hidden from one of the front/rear views.  Yellow (bags) and
    cyan (socks) are worn on one side of the body, so front and rear views
    mirror them: the same blob means left in one view and right in the other.
    They sit further below the head than a stage-C receptive field reaches, so
    telling front from rear at that point needs a global view signal.
    """
    red, green, yellow, cyan = (0.9, 0.12, 0.1), (0.1, 0.8, 0.25), (0.95, 0.85, 0.1), (0.1, 0.85, 0.9)
    same = ((0.0, 0.0), (1.0, 1.0))
    return [
        AttrSpec("hat", red, 0.4, (0.03, 0.375, 0.08, 0.25), _mods(same, same, ((0, 0.02), (1, 0.85)), ((0, 0.02), (1, 0.85)))),
        AttrSpec(
            "backpack",
            red,
            0.35,
            (0.30, 0.35, 0.22, 0.30),
            # rear: full pack on the back; front: narrow strap; side views: pack behind the torso
            _mods(((0.0, 0.0), (0.6, 0.15)), same, ((0.0, 0.30), (1.0, 0.45)), ((0.0, -0.12), (1.0, 0.45))),
        ),
        AttrSpec(
            "logo",
            green,
            0.5,
            (0.33, 0.4375, 0.10, 0.125),
            _mods(same, None, ((0.0, -0.0625), (1.0, 0.6)), ((0.0, 0.1125), (1.0, 0.6))),
        ),
        AttrSpec(
            "back_print",
            green,
            0.5,
            (0.33, 0.4375, 0.10, 0.125),
            _mods(None, same, ((0.0, 0.1125), (1.0, 0.6)), ((0.0, -0.0625), (1.0, 0.6))),
        ),
        AttrSpec(
            "bag_left_hand",
            yellow,
            0.3,
            (0.70, 0.72, 0.14, 0.14),
            # side views: carried in front of the legs when facing that way, a thin sliver otherwise
            _mods(same, ((0.0, -0.58), (1.0, 1.0)), ((0.0, 19 / 48 - 0.72), (1.0, 1.0)), ((0.0, 19 / 48 - 0.72), (1.0, 0.5))),
        ),
        AttrSpec(
            "bag_right_hand",
            yellow,
            0.3,
            (0.70, 0.14, 0.14, 0.14),
            _mods(same, ((0.0, 0.58), (1.0, 1.0)), ((0.0, 26 / 48 - 0.14), (1.0, 0.5)), ((0.0, 22 / 48 - 0.14), (1.0, 1.0))),
        ),
        AttrSpec(
            "sock_left",
            cyan,
            0.4,
            (0.86, 26 / 48, 0.06, 6 / 48),
            # front: on the image-right leg; rear: image-left leg; side views as the bags
            _mods(same, ((0.0, -10 / 48), (1.0, 1.0)), ((0.0, -7 / 48), (1.0, 7 / 6)), ((0.0, -7 / 48), (1.0, 0.5))),
        ),
        AttrSpec(
            "sock_right",
            cyan,
            0.4,
            (0.86, 16 / 48, 0.06, 6 / 48),
            _mods(same, ((0.0, 10 / 48), (1.0, 1.0)), ((0.0, 10 / 48), (1.0, 0.5)), ((0.0, 6 / 48), (1.0, 7 / 6))),
        ),
    ]


@dataclass
class SynthConfig:
    canvas: tuple[int, int] = (64, 48)
    attributes: list[AttrSpec] = field(default_factory=default_attributes)
    noise: float = 0.08
    color_jitter: float = 0.08
    counts: dict[str, int] = field(default_factory=lambda: {"train": 4000, "val": 500, "test": 1000})
    seed: int = 0

    @property
    def K(self) -> int:
        return len(self.attributes)

    @property
    def attr_names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def validate(self) -> None:
        H, W = self.canvas
        if H < 8 or W < 8:
            raise ConfigError(f"canvas {self.canvas} too small")
        if not self.attributes:
            raise ConfigError("at least one attribute is required")
        names = self.attr_names
        if len(set(names)) != len(names):
            raise ConfigError("attribute names must be unique")
        for a in self.attributes:
            if len(a.views) != 4:
                raise ConfigError(f"attribute {a.name!r}: need modifiers for exactly 4 views")
            if not 0.0 <= a.prob <= 1.0:
                raise ConfigError(f"attribute {a.name!r}: prob must be in [0, 1]")
            if not any(m.visible for m in a.views):
                raise ConfigError(f"attribute {a.name!r} is hidden in every view")
            for v in range(4):
                r = a.rect(v, self.canvas)
                if r is None:
                    continue
                y0, x0, y1, x1 = r
                if y0 < 0 or x0 < 0 or y1 > H or x1 > W:
                    raise ConfigError(f"attribute {a.name!r} escapes the {H}x{W} canvas in view {VIEW_NAMES[v]}: {r}")
        if self.noise < 0 or self.color_jitter < 0:
            raise ConfigError("noise and color_jitter must be non-negative")
        for split, n in self.counts.items():
            if not isinstance(n, int) or n < 0:
                raise ConfigError(f"count for split {split!r} must be a non-negative integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        d = dict(d)
        if "canvas" in d:
            d["canvas"] = tuple(d["canvas"])
        if "attributes" in d:
            attrs = []
            for a in d["attributes"]:
                a = dict(a)
                extra = set(a) - {f.name for f in fields(AttrSpec)}
                if extra:
                    raise ConfigError(f"unknown attribute keys: {sorted(extra)}")
                a["color"] = tuple(a["color"])
                a["base"] = tuple(a["base"])
                a["views"] = [
                    m if isinstance(m, ViewMod) else ViewMod(m.get("visible", True), tuple(m.get("offset", (0, 0))), tuple(m.get("scale", (1, 1))))
                    for m in a["views"]
                ]
                attrs.append(AttrSpec(**a))
            d["attributes"] = attrs
        return cls(**d)


SKIN = np.array([0.93, 0.76, 0.62])
HAIR = np.array([0.16, 0.1, 0.06])
SHIRT = np.array([0.28, 0.33, 0.52])
TROUSERS = np.array([0.3, 0.28, 0.26])
BACKGROUND = 0.55


def _body_layout(view: int, canvas: tuple[int, int]) -> list[tuple[tuple[int, int, int, int], str]]:
    """Rectangles (y0, x0, y1, x1) of the body parts for a view."""
    H, W = canvas

    def r(y0, x0, y1, x1):
        return (round(y0 * H), round(x0 * W), round(y1 * H), round(x1 * W))

    if view in (0, 1):
        head = r(0.06, 0.38, 0.22, 0.62)
        torso = r(0.24, 0.29, 0.62, 0.71)
        legs = [r(0.62, 0.31, 0.96, 0.48), r(0.62, 0.52, 0.96, 0.69)]
    else:
        head = r(0.06, 0.40, 0.22, 0.60)
        torso = r(0.24, 0.375, 0.62, 0.625)
        legs = [r(0.62, 0.39, 0.96, 0.61)]
    parts = [(torso, "shirt")] + [(leg, "trousers") for leg in legs]
    y0, x0, y1, x1 = head
    if view == 0:  # front: face with a fringe of hair
        parts += [(head, "skin"), ((y0, x0, y0 + max(1, (y1 - y0) // 4), x1), "hair")]
    elif view == 1:  # rear: hair only
        parts += [(head, "hair")]
    else:
        mid = (x0 + x1) // 2
        face, back = ((x0, mid), (mid, x1)) if view == 2 else ((mid, x1), (x0, mid))
        parts += [((y0, face[0], y1, face[1]), "skin"), ((y0, back[0], y1, back[1]), "hair")]
    return parts


def render(cfg: SynthConfig, view: int, attrs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Render one sample as H x W x 3 uint8.  Consumes a fixed number of draws."""
    H, W = cfg.canvas
    jitter = rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=(3, 3))
    palette = {
        "skin": SKIN,
        "hair": HAIR,
        "shirt": np.clip(SHIRT + jitter[0], 0, 1),
        "trousers": np.clip(TROUSERS + jitter[1], 0, 1),
    }
    img = np.empty((H, W, 3))
    img[:] = np.clip(BACKGROUND + jitter[2], 0, 1)
    for (y0, x0, y1, x1), part in _body_layout(view, cfg.canvas):
        img[y0:y1, x0:x1] = palette[part]
    for spec, present in zip(cfg.attributes, attrs):
        if not present:
            continue
        rect = spec.rect(view, cfg.canvas)
        if rect is not None:
            y0, x0, y1, x1 = rect
            img[y0:y1, x0:x1] = spec.color
    img += rng.uniform(-cfg.noise, cfg.noise, size=img.shape)
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


SPLITS = ("train", "val", "test")


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    split_id = SPLITS.index(split) if split in SPLITS else 1000 + sum(map(ord, split))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, split_id, index])))


def draw_sample(cfg: SynthConfig, split: str, index: int) -> tuple[int, np.ndarray, np.ndarray]:
    """(view, attrs, rgb) for one sample; a pure function of (cfg, split, index)."""
    rng = sample_rng(cfg.seed, split, index)
    view = int(rng.integers(0, 4))
    probs = np.array([a.prob for a in cfg.attributes])
    attrs = (rng.random(len(probs)) < probs).astype(np.int64)
    return view, attrs, render(cfg, view, attrs, rng)


def synth_generate(cfg: SynthConfig, out_dir) -> dict[str, Path]:
    """Write images and one manifest per split; returns manifest paths."""
    cfg.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, n in cfg.counts.items():
        records = []
        for i in range(n):
            view, attrs, rgb = draw_sample(cfg, split, i)
            sid = f"{split}-{i:06d}"
            rel = f"images/{sid}.ppm"
            write_ppm(out / rel, rgb)
            records.append({"id": sid, "image": rel, "attrs": attrs.tolist(), "view": view})
        paths[split] = out / f"{split}.jsonl"
        write_manifest(paths[split], cfg.attr_names, records)
    with open(out / "synth_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    return paths
