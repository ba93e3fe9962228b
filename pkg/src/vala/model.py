"""The view-conditioned attribute network.

Layout (defaults in parentheses)::

    image -> stage A -> [view predictor, view modulation] -> stage B -> stage C
                                                                      |
                                      regional attention (per view) <-+
                                                   |
                            fuse: sum_t y_vp2[t] * Y_a^t -> spatial mean -> BN

Ablation flags on :class:`ModelConfig` switch pieces off or move the taps;
:data:`VARIANTS` names the combinations used by the ablation suite.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Protocol

import numpy as np

from . import numerics as nx
from .errors import CheckpointError, ConfigError
from .numerics import RunningStats, Tensor

VIEW_NAMES = ("front", "rear", "left", "right")
ATTENTION_MODES = ("full", "height_only", "width_only", "none", "external")


@dataclass(frozen=True)
class BackboneConfig:
    input_shape: tuple[int, int, int] = (3, 64, 48)
    channels: tuple[int, int, int] = (64, 96, 128)
    strides: tuple[int, int, int] = (4, 2, 1)
    blocks: tuple[int, int, int] = (2, 1, 1)

    @classmethod
    def full_scale(cls) -> "BackboneConfig":
        """Channel widths and the 17x17 stage-A grid of the Inception-A tap."""
        return cls(input_shape=(3, 136, 136), channels=(384, 1024, 1536), strides=(8, 1, 1), blocks=(3, 1, 1))

    def validate(self) -> None:
        if len(self.channels) != 3 or len(self.strides) != 3 or len(self.blocks) != 3:
            raise ConfigError("backbone needs exactly three stages")
        c, h, w = self.input_shape
        if min(c, h, w) < 1:
            raise ConfigError(f"bad input shape {self.input_shape}")
        total = 1
        for name, s, b, ch in zip("ABC", self.strides, self.blocks, self.channels):
            if s < 1 or s & (s - 1):
                raise ConfigError(f"stage {name}: stride {s} is not a power of two")
            if b < max(1, int(math.log2(s))):
                raise ConfigError(f"stage {name}: {b} blocks cannot realise stride {s} with stride-2 convs")
            if ch < 1:
                raise ConfigError(f"stage {name}: channel count must be positive")
            total *= s
            if h % total or w % total:
                raise ConfigError(f"input {h}x{w} not divisible by cumulative stride {total} at stage {name}")

    def output_shapes(self) -> dict[str, tuple[int, int, int]]:
        self.validate()
        _, h, w = self.input_shape
        out = {}
        for name, s, ch in zip("ABC", self.strides, self.channels):
            h, w = h // s, w // s
            out[name] = (ch, h, w)
        return out


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_attrs: int = 8
    view_channels: int = 32
    view_hidden: int = 32
    use_view_feedback: bool = True
    use_view_weights: bool = True
    num_views: int = 4
    attention: str = "full"
    view_tap: str = "A"
    attn_tap: str = "C"
    # stop Loss_vp (and any view-branch gradient) at the branch input
    detach_view_input: bool = False

    @property
    def has_view_branch(self) -> bool:
        return self.use_view_feedback or self.use_view_weights

    def validate(self) -> None:
        self.backbone.validate()
        if self.num_attrs < 1:
            raise ConfigError("num_attrs must be >= 1")
        if self.num_views not in (3, 4):
            raise ConfigError(f"num_views must be 3 or 4, got {self.num_views}")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")
        if self.view_tap not in ("A", "B"):
            raise ConfigError(f"view_tap must be 'A' or 'B', got {self.view_tap!r}")
        if self.attn_tap not in ("B", "C"):
            raise ConfigError(f"attn_tap must be 'B' or 'C', got {self.attn_tap!r}")
        tap_channels = self.backbone.channels["AB".index(self.view_tap)]
        if self.use_view_feedback and tap_channels % 4:
            raise ConfigError(f"view modulation needs channels divisible by 4, stage {self.view_tap} has {tap_channels}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = {k: list(v) for k, v in d["backbone"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if "backbone" in d and not isinstance(d["backbone"], BackboneConfig):
            bb = dict(d["backbone"])
            bknown = {f.name for f in fields(BackboneConfig)}
            if set(bb) - bknown:
                raise ConfigError(f"unknown backbone config keys: {sorted(set(bb) - bknown)}")
            d["backbone"] = BackboneConfig(**{k: tuple(v) for k, v in bb.items()})
        return cls(**d)


# Table-5 analogues.  Baseline has no view branch at all; "+VF" trains the
# view branch and feeds y_vp1 back but fuses with constant weights.
VARIANTS: dict[str, dict] = {
    "baseline": dict(use_view_feedback=False, use_view_weights=False, attention="none"),
    "vf": dict(use_view_feedback=True, use_view_weights=False, attention="none"),
    "vf_3vp": dict(use_view_feedback=True, use_view_weights=True, num_views=3, attention="none"),
    "vf_4vp": dict(use_view_feedback=True, use_view_weights=True, attention="none"),
    "ra": dict(use_view_feedback=False, use_view_weights=False, attention="full"),
    "vf_4vp_rah": dict(use_view_feedback=True, use_view_weights=True, attention="height_only"),
    "vf_4vp_raw": dict(use_view_feedback=True, use_view_weights=True, attention="width_only"),
    "vfb_vpb_ra": dict(use_view_feedback=True, use_view_weights=True, attention="full", view_tap="B"),
    "vf_4vp_rab": dict(use_view_feedback=True, use_view_weights=True, attention="full", attn_tap="B"),
    "vala": dict(use_view_feedback=True, use_view_weights=True, attention="full"),
}
_FLAG_DEFAULTS = dict(use_view_feedback=True, use_view_weights=True, num_views=4, attention="full", view_tap="A", attn_tap="C")


def variant_config(name: str, base: ModelConfig | None = None) -> ModelConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    base = base or ModelConfig()
    return replace(base, **{**_FLAG_DEFAULTS, **VARIANTS[name]})


def variant_of(cfg: ModelConfig) -> str | None:
    """Name of the ablation row a config corresponds to, if any."""
    flags = {k: getattr(cfg, k) for k in _FLAG_DEFAULTS}
    for name, spec in VARIANTS.items():
        if flags == {**_FLAG_DEFAULTS, **spec}:
            return name
    return None


class AttentionSlot(Protocol):
    """Interface for a drop-in attention module (``attention="external"``).

    Called with the tapped feature map ``N x c x h x w``; must return per-view
    maps as ``N x (V*K) x h x w`` (view-major) with values in (0, 1).  ``parameters()`` returns
    the module's named parameter tensors; they are trained with the deep group.
    """

    def __call__(self, feat: Tensor, num_views: int, num_attrs: int) -> Tensor: ...

    def parameters(self) -> dict[str, Tensor]: ...


@dataclass
class ViewWeights:
    logits: Tensor  # N x 4
    y_vp1: Tensor  # N x 4, sigmoid
    y_vp2: Tensor  # N x V, softmax over the active views


@dataclass
class RegionalWeights:
    """Per-view attention maps.

    Tensors are capped at rank 4, so the maps travel as ``N x (V*K) x h x w``
    with view-major channel order; :attr:`array` exposes ``N x V x K x h x w``.
    """

    flat: Tensor
    num_views: int

    @property
    def shape(self) -> tuple[int, int, int, int, int]:
        n, vk, h, w = self.flat.shape
        return (n, self.num_views, vk // self.num_views, h, w)

    @property
    def array(self) -> np.ndarray:
        return self.flat.data.reshape(self.shape)

    def view(self, t: int) -> np.ndarray:
        return self.array[:, t]


# ---------------------------------------------------------------------------
# stateless building blocks
# ---------------------------------------------------------------------------

def view_modulate(feat: Tensor, y_vp1: Tensor) -> Tensor:
    """Scale four contiguous channel groups of ``feat`` by the four view weights."""
    n, c, h, w = feat.shape
    if c % 4:
        raise ConfigError(f"view modulation needs channels divisible by 4, got {c}")
    if y_vp1.shape != (n, 4):
        raise nx.ShapeError(f"y_vp1 must be N x 4, got {y_vp1.shape}")
    grouped = feat.reshape(n, 4, c // 4, h * w)
    scaled = nx.mul(grouped, y_vp1.reshape(n, 4, 1, 1))
    return scaled.reshape(n, c, h, w)


def fuse_maps(weights: Tensor, regional: RegionalWeights) -> Tensor:
    """``S = sum_t weights[:, t] * Y_a^t``; returns ``N x K x h x w``."""
    n, v, k, h, w = regional.shape
    if weights.shape != (n, v):
        raise nx.ShapeError(f"view weights {weights.shape} do not match {v} maps")
    flat = regional.flat.reshape(n, v, k * h * w)
    s = nx.mul(flat, weights.reshape(n, v, 1)).sum(axis=1)
    return s.reshape(n, k, h, w)


def _kaiming(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float = 2.0) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(gain / fan_in), size=shape)


@dataclass
class ForwardOutput:
    attr_logits: Tensor  # N x K
    view: ViewWeights | None
    regional: RegionalWeights
    fused: Tensor  # N x K x h x w, before spatial pooling
    features: dict[str, Tensor]

    @property
    def view_logits(self) -> Tensor | None:
        return None if self.view is None else self.view.logits


class VALAModel:
    """Named parameters, batch-norm buffers and the forward wiring.

    Forward passes take ``N x 3 x H x W`` batches (a single ``3 x H x W`` image
    is promoted to ``N = 1``).
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, external_attention: AttentionSlot | None = None):
        self.config = config = config or ModelConfig()
        config.validate()
        if config.attention == "external" and external_attention is None:
            raise ConfigError("attention='external' needs an external_attention module")
        self.external = external_attention
        self.params: dict[str, Tensor] = {}
        self.stats: dict[str, RunningStats] = {}
        rng = nx.make_rng(seed)
        bb = config.backbone
        self._blocks: dict[str, list[tuple[str, int]]] = {}

        in_ch = bb.input_shape[0]
        for stage, ch, stride, nblocks in zip("ABC", bb.channels, bb.strides, bb.blocks):
            n_down = int(math.log2(stride))
            blocks = []
            for i in range(nblocks):
                prefix = f"backbone.{stage}.{i}"
                self._conv(prefix + ".conv", ch, in_ch, 3, rng, bias=False)
                self._bn(prefix + ".bn", ch)
                blocks.append((prefix, 2 if i < n_down else 1))
                in_ch = ch
            self._blocks[stage] = blocks

        shapes = bb.output_shapes()
        if config.has_view_branch:
            tap_c = shapes[config.view_tap][0]
            self._conv("view.reduce", config.view_channels, tap_c, 1, rng)
            self._linear("view.fc1", config.view_hidden, config.view_channels, rng, gain=1.0)
            self._linear("view.fc2", 4, config.view_hidden, rng, zero=True)

        attn_c = shapes[config.attn_tap][0]
        vk = config.num_views * config.num_attrs
        if config.attention in ("full", "height_only", "width_only"):
            self._conv("attn.trunk", attn_c, attn_c, 1, rng)
            if config.attention != "width_only":
                self._conv("attn.f1", vk, attn_c, 1, rng, zero=True)
            if config.attention != "height_only":
                self._conv("attn.f2", vk, attn_c, 1, rng, zero=True)
        if config.attention != "external":
            self._conv("head.f3", vk, attn_c, 1, rng, zero=True)
        self._bn("fuse.bn", config.num_attrs)

    # -- parameter construction ---------------------------------------------
    def _conv(self, name, out_c, in_c, k, rng, bias=True, zero=False):
        shape = (out_c, in_c, k, k)
        w = np.zeros(shape) if zero else _kaiming(rng, shape, in_c * k * k)
        self.params[name + ".weight"] = Tensor.param(w, name + ".weight")
        if bias:
            self.params[name + ".bias"] = Tensor.param(np.zeros(out_c), name + ".bias")

    def _linear(self, name, out_f, in_f, rng, gain=2.0, zero=False):
        w = np.zeros((out_f, in_f)) if zero else _kaiming(rng, (out_f, in_f), in_f, gain)
        self.params[name + ".weight"] = Tensor.param(w, name + ".weight")
        self.params[name + ".bias"] = Tensor.param(np.zeros(out_f), name + ".bias")

    def _bn(self, name, c):
        self.params[name + ".gamma"] = Tensor.param(np.ones(c), name + ".gamma")
        self.params[name + ".beta"] = Tensor.param(np.zeros(c), name + ".beta")
        self.stats[name] = RunningStats(c)

    # -- parameter access ---------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        if self.external is not None:
            out.update({f"external.{k}": v for k, v in self.external.parameters().items()})
        return out

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def param_groups(self) -> dict[str, list[str]]:
        """``shallow``: the view branch; ``deep``: everything else."""
        names = list(self.parameters())
        shallow = [n for n in names if n.startswith("view.")]
        deep = [n for n in names if not n.startswith("view.")]
        return {"shallow": shallow, "deep": deep}

    def param_count(self) -> int:
        return param_count(self)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.parameters().items()}
        for name, st in self.stats.items():
            out[f"stats.{name}.mean"] = st.mean
            out[f"stats.{name}.var"] = st.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = set(expected) - set(arrays)
        if missing:
            raise ConfigError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, ref in expected.items():
            if arrays[name].shape != ref.shape:
                raise ConfigError(f"shape mismatch for {name}: {arrays[name].shape} vs {ref.shape}")
        params = self.parameters()
        for name, p in params.items():
            p.data = np.array(arrays[name], dtype=np.float64)
        for name, st in self.stats.items():
            st.mean = np.array(arrays[f"stats.{name}.mean"], dtype=np.float64)
            st.var = np.array(arrays[f"stats.{name}.var"], dtype=np.float64)

    # -- forward pieces -----------------------------------------------------
    def _stage(self, stage: str, x: Tensor, mode: str, update_stats: bool) -> Tensor:
        p = self.params
        for prefix, stride in self._blocks[stage]:
            x = nx.conv2d(x, p[prefix + ".conv.weight"], None, stride=stride, padding=1)
            x = nx.batch_norm(x, p[prefix + ".bn.gamma"], p[prefix + ".bn.beta"], self.stats[prefix + ".bn"], mode, update_stats=update_stats)
            x = nx.relu(x)
        return x

    def backbone_forward(self, image: Tensor, mode: str = "eval", update_stats: bool = True) -> tuple[Tensor, Tensor, Tensor]:
        """Unmodulated stage outputs (A, B, C)."""
        x = _as_batch(image, self.config.backbone.input_shape)
        fa = self._stage("A", x, mode, update_stats)
        fb = self._stage("B", fa, mode, update_stats)
        fc = self._stage("C", fb, mode, update_stats)
        return fa, fb, fc

    def view_predict(self, feat: Tensor) -> ViewWeights:
        p = self.params
        if self.config.detach_view_input:
            feat = nx.stop_gradient(feat)
        if feat.ndim == 3:
            feat = feat.reshape((1,) + feat.shape)
        x = nx.avg_pool2d(feat, 2) if min(feat.shape[2:]) >= 2 else feat
        x = nx.relu(nx.conv2d(x, p["view.reduce.weight"], p["view.reduce.bias"]))
        x = nx.global_avg_pool(x)  # F': N x Cv x 1 x 1
        x = x.reshape(x.shape[0], x.shape[1])
        x = nx.linear(x, p["view.fc1.weight"], p["view.fc1.bias"])
        logits = nx.linear(x, p["view.fc2.weight"], p["view.fc2.bias"])
        y_vp1 = nx.sigmoid(logits)
        active = logits if self.config.num_views == 4 else nx.take(logits, (slice(None), slice(0, 3)))
        y_vp2 = nx.softmax(active, axis=-1)
        return ViewWeights(logits, y_vp1, y_vp2)

    def regional_attention(self, feat: Tensor) -> RegionalWeights:
        cfg, p = self.config, self.params
        if feat.ndim == 3:
            feat = feat.reshape((1,) + feat.shape)
        n, c, h, w = feat.shape
        if cfg.attention == "external":
            flat = self.external(feat, cfg.num_views, cfg.num_attrs)
            if flat.shape != (n, cfg.num_views * cfg.num_attrs, h, w):
                raise nx.ShapeError(f"external attention returned {flat.shape}")
            return RegionalWeights(flat, cfg.num_views)
        lift = nx.conv2d(feat, p["head.f3.weight"], p["head.f3.bias"])
        if cfg.attention == "none":
            return RegionalWeights(lift, cfg.num_views)

        y = nx.sigmoid(lift)
        trunk = lambda j: nx.h_swish(nx.conv2d(j, p["attn.trunk.weight"], p["attn.trunk.bias"]))  # noqa: E731
        if cfg.attention == "full":
            joint = nx.concat_hw(nx.directional_pool(feat, "width", "max"), nx.directional_pool(feat, "height", "avg"))
            f1, f2 = nx.split_hw(trunk(joint), h, w)
        elif cfg.attention == "height_only":
            f1, f2 = trunk(nx.directional_pool(feat, "width", "max")), None
        else:
            wb = nx.directional_pool(feat, "height", "avg")
            f1, f2 = None, nx.transpose(trunk(nx.transpose(wb, (0, 1, 3, 2))), (0, 1, 3, 2))
        if f1 is not None:
            y = y * nx.sigmoid(nx.conv2d(f1, p["attn.f1.weight"], p["attn.f1.bias"]))
        if f2 is not None:
            y = y * nx.sigmoid(nx.conv2d(f2, p["attn.f2.weight"], p["attn.f2.bias"]))
        return RegionalWeights(y, cfg.num_views)

    def fuse(self, y_vp2: Tensor | None, regional: RegionalWeights, mode: str = "eval", update_stats: bool = True) -> tuple[Tensor, Tensor]:
        """Weighted sum of the per-view maps, spatial mean, batch norm.

        Returns ``(attr_logits N x K, fused map N x K x h x w)``.  ``y_vp2=None``
        uses uniform weights.
        """
        n, v, k, h, w = regional.shape
        if k != self.config.num_attrs:
            raise nx.ShapeError(f"regional maps carry {k} classes, model has K={self.config.num_attrs}")
        if y_vp2 is None:
            y_vp2 = Tensor(np.full((n, v), 1.0 / v))
        fused = fuse_maps(y_vp2, regional)
        pooled = fused.mean(axis=(2, 3))
        p = self.params
        logits = nx.batch_norm(pooled, p["fuse.bn.gamma"], p["fuse.bn.beta"], self.stats["fuse.bn"], mode, update_stats=update_stats)
        return logits, fused

    def forward(self, images, mode: str = "eval", update_stats: bool = True) -> ForwardOutput:
        cfg = self.config
        x = _as_batch(images, cfg.backbone.input_shape)
        feats: dict[str, Tensor] = {}
        view = None
        fa = self._stage("A", x, mode, update_stats)
        if cfg.has_view_branch and cfg.view_tap == "A":
            view = self.view_predict(fa)
            if cfg.use_view_feedback:
                fa = view_modulate(fa, view.y_vp1)
        feats["A"] = fa
        fb = self._stage("B", fa, mode, update_stats)
        if cfg.has_view_branch and cfg.view_tap == "B":
            view = self.view_predict(fb)
            if cfg.use_view_feedback:
                fb = view_modulate(fb, view.y_vp1)
        feats["B"] = fb
        fc = self._stage("C", fb, mode, update_stats)
        feats["C"] = fc
        regional = self.regional_attention(feats[cfg.attn_tap])
        weights = view.y_vp2 if (view is not None and cfg.use_view_weights) else None
        logits, fused = self.fuse(weights, regional, mode, update_stats)
        return ForwardOutput(logits, view, regional, fused, feats)

    __call__ = forward


def _as_batch(images, input_shape) -> Tensor:
    x = nx.as_tensor(images)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(input_shape):
        raise nx.ShapeError(f"expected images N x {' x '.join(map(str, input_shape))}, got {x.shape}")
    return x


def vala_forward(images, model: VALAModel, mode: str = "eval") -> ForwardOutput:
    return model.forward(images, mode=mode)


def param_count(model: VALAModel) -> int:
    """Total number of trainable scalars (batch-norm buffers excluded)."""
    return int(sum(p.size for p in model.parameters().values()))


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
#
#   b"VALA1" | uint32 LE manifest length | manifest (UTF-8 JSON) | payload
#
# The manifest is {"meta": {...}, "tensors": [{"name", "shape", "offset"}]}
# with byte offsets relative to the payload start; the payload is the
# little-endian float64 data of each tensor, back to back.

CHECKPOINT_MAGIC = b"VALA1"


def encode_checkpoint(arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<I", len(manifest)) + manifest + b"".join(chunks)


def decode_checkpoint(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    head = len(CHECKPOINT_MAGIC)
    if raw[:head] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a VALA1 checkpoint (bad magic)")
    if len(raw) < head + 4:
        raise CheckpointError("truncated checkpoint header")
    (mlen,) = struct.unpack("<I", raw[head : head + 4])
    start = head + 4 + mlen
    if start > len(raw):
        raise CheckpointError("manifest length exceeds file size")
    try:
        manifest = json.loads(raw[head + 4 : start].decode("utf-8"))
        entries = manifest["tensors"]
        meta = manifest["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest ({exc})") from None
    payload = memoryview(raw)[start:]
    arrays, expected = {}, 0
    for e in entries:
        try:
            name, shape, offset = e["name"], tuple(int(s) for s in e["shape"]), int(e["offset"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError(f"bad tensor entry {e!r}") from None
        n = int(np.prod(shape)) if shape else 1
        if offset != expected or offset + 8 * n > len(payload):
            raise CheckpointError(f"tensor {name!r} lies outside the payload")
        arrays[name] = np.frombuffer(payload[offset : offset + 8 * n], dtype="<f8").astype(np.float64).reshape(shape)
        expected = offset + 8 * n
    if expected != len(payload):
        raise CheckpointError(f"payload has {len(payload) - expected} trailing bytes")
    return arrays, meta


def save_checkpoint_file(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(arrays, meta))


def load_checkpoint_file(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
    return decode_checkpoint(raw)
