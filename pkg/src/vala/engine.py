"""SGD training loop, checkpoints, evaluation and the ablation runner."""
from __future__ import annotations

import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import random_crop, normalize_resize
from .errors import CheckpointError, ConfigError, TrainingError
from .losses import attr_loss, positive_rates, view_loss
from .metrics import MetricsReport, compute_report
from .model import (
    VARIANTS,
    ModelConfig,
    VALAModel,
    decode_checkpoint,
    encode_checkpoint,
    variant_config,
)

LR_SCHEDULES = ("groups", "phases")
EVAL_BATCH = 250


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-5
    lr_shallow: float = 0.1
    lr_deep: float = 0.01
    epochs: int = 30
    seed: int = 0
    alpha: float = 1.0
    beta: float = 1.0
    eval_every: int = 0
    crop_pad: int = 4
    lr_schedule: str = "groups"
    # phases mode: the first `shallow_epochs` use lr_shallow for every parameter
    shallow_epochs: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for name in ("momentum", "weight_decay", "lr_shallow", "lr_deep", "alpha", "beta"):
            v = getattr(self, name)
            if not (v >= 0 and np.isfinite(v)):
                raise ConfigError(f"{name} must be a finite non-negative number, got {v!r}")
        if self.epochs < 0 or self.eval_every < 0 or self.crop_pad < 0 or self.shallow_epochs < 0:
            raise ConfigError("epochs, eval_every, crop_pad and shallow_epochs must be >= 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config key(s): {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def group_lrs(self, epoch: int) -> dict[str, float]:
        """Learning rate per parameter group for a 0-based epoch index."""
        if self.lr_schedule == "groups":
            return {"shallow": self.lr_shallow, "deep": self.lr_deep}
        lr = self.lr_shallow if epoch < self.shallow_epochs else self.lr_deep
        return {"shallow": lr, "deep": lr}


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], velocities: Sequence[np.ndarray],
             lr: float, momentum: float = 0.9, weight_decay: float = 5e-5) -> None:
    """In-place momentum SGD with L2 folded into the gradient.

    ``v <- momentum * v + g + weight_decay * p``; ``p <- p - lr * v``.
    """
    if not (len(params) == len(grads) == len(velocities)):
        raise ValueError("params, grads and velocities differ in length")
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape or p.shape != v.shape:
            raise nx.ShapeError(f"sgd_step: shapes {p.shape}, {g.shape}, {v.shape} are not aligned")
        if not np.all(np.isfinite(g)):
            raise TrainingError("sgd_step: non-finite gradient")
        v *= momentum
        v += g
        v += weight_decay * p
        p -= lr * v


# ---------------------------------------------------------------------------
# datasets held in memory
# ---------------------------------------------------------------------------


@dataclass
class ArrayDataset:
    """Decoded split: ``images`` is ``N x 3 x H x W`` uint8, ``views`` uses -1 for missing."""

    images: np.ndarray
    attrs: np.ndarray
    views: np.ndarray
    attr_names: list[str]

    @property
    def K(self) -> int:
        return self.attrs.shape[1]

    def __len__(self) -> int:
        return self.images.shape[0]

    def has_views(self) -> bool:
        return bool(len(self) == 0 or np.all(self.views >= 0))

    def subset(self, idx) -> "ArrayDataset":
        idx = np.asarray(idx)
        return ArrayDataset(self.images[idx], self.attrs[idx], self.views[idx], self.attr_names)

    @classmethod
    def from_manifest(cls, ds) -> "ArrayDataset":
        return cls(ds.load_images(), ds.attr_matrix(), ds.views(), list(ds.attr_names))


def as_arrays(dataset) -> ArrayDataset:
    return dataset if isinstance(dataset, ArrayDataset) else ArrayDataset.from_manifest(dataset)


def prepare_batch(images: np.ndarray, input_shape, pad: int = 0, rng: np.random.Generator | None = None) -> np.ndarray:
    """uint8 ``N x 3 x H x W`` -> normalized float batch at the model input size.

    With ``rng`` each image is randomly cropped first (two draws per image).
    """
    x = images.astype(np.float64) / 255.0
    if rng is not None:
        x = np.stack([random_crop(img, pad, rng) for img in x]) if len(x) else x
    return normalize_resize(x, tuple(input_shape[1:]))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    doc = json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    state: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray]
    epoch: int
    rng_state: dict
    positive_rates: list[float]
    attr_names: list[str]

    @property
    def config_hash(self) -> str:
        return config_hash(self.model_config, self.train_config)

    @property
    def K(self) -> int:
        return self.model_config.num_attrs

    def to_bytes(self) -> bytes:
        arrays = {f"state.{k}": v for k, v in self.state.items()}
        arrays.update({f"velocity.{k}": v for k, v in self.velocities.items()})
        meta = {
            "format_version": 1,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "positive_rates": self.positive_rates,
            "attr_names": self.attr_names,
            "config_hash": self.config_hash,
        }
        return encode_checkpoint(arrays, meta)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        arrays, meta = decode_checkpoint(raw)
        try:
            mcfg = ModelConfig.from_dict(meta["model_config"])
            tcfg = TrainConfig.from_dict(meta["train_config"])
            ckpt = cls(
                model_config=mcfg,
                train_config=tcfg,
                state={k[6:]: v for k, v in arrays.items() if k.startswith("state.")},
                velocities={k[9:]: v for k, v in arrays.items() if k.startswith("velocity.")},
                epoch=int(meta["epoch"]),
                rng_state=meta["rng_state"],
                positive_rates=[float(r) for r in meta["positive_rates"]],
                attr_names=list(meta["attr_names"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"checkpoint metadata is invalid ({exc})") from None
        if meta.get("config_hash") != ckpt.config_hash:
            raise CheckpointError("checkpoint config hash does not match its configuration")
        return ckpt

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
        return cls.from_bytes(raw)

    def build_model(self) -> VALAModel:
        model = VALAModel(self.model_config)
        try:
            model.load_state_arrays(self.state)
        except ConfigError as exc:
            raise CheckpointError(str(exc)) from None
        return model


def make_checkpoint(model: VALAModel, cfg: TrainConfig, velocities, epoch: int, rng: np.random.Generator,
                    rates, attr_names) -> Checkpoint:
    return Checkpoint(
        model_config=model.config,
        train_config=cfg,
        state={k: v.copy() for k, v in model.state_arrays().items()},
        velocities={k: v.copy() for k, v in velocities.items()},
        epoch=epoch,
        rng_state=rng.bit_generator.state,
        positive_rates=[float(r) for r in rates],
        attr_names=list(attr_names),
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class StepLosses:
    total: float
    view: float
    attr: float


def _loss_terms(model: VALAModel, out, attrs, views, rates, cfg: TrainConfig):
    l_a = attr_loss(out.attr_logits, attrs, rates)
    if model.config.has_view_branch and cfg.alpha != 0:
        l_vp = view_loss(out.view_logits, views, model.config.num_views)
    else:
        l_vp = nx.Tensor(0.0)
    total = l_vp * cfg.alpha + l_a * cfg.beta
    return total, l_vp, l_a


def _batches(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _mean_losses(steps: list[StepLosses]) -> dict[str, float]:
    if not steps:
        return {"loss": float("nan"), "loss_vp": float("nan"), "loss_a": float("nan")}
    return {
        "loss": float(np.mean([s.total for s in steps])),
        "loss_vp": float(np.mean([s.view for s in steps])),
        "loss_a": float(np.mean([s.attr for s in steps])),
    }


def initial_loss(model: VALAModel, data: ArrayDataset, cfg: TrainConfig, rates) -> dict[str, float]:
    """Mean training-objective components over one pass with no updates.

    Uses the same batching, augmentation and train-mode normalisation as an
    epoch, driven by a separate rng stream so the training stream is untouched.
    """
    rng = nx.make_rng([cfg.seed, 1])
    order = rng.permutation(len(data))
    steps = []
    with nx.no_grad():
        for idx in _batches(len(data), cfg.batch_size, order):
            x = prepare_batch(data.images[idx], model.config.backbone.input_shape, cfg.crop_pad, rng)
            out = model.forward(x, mode="train", update_stats=False)
            total, l_vp, l_a = _loss_terms(model, out, data.attrs[idx], data.views[idx], rates, cfg)
            steps.append(StepLosses(total.item(), l_vp.item(), l_a.item()))
    return _mean_losses(steps)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    model: VALAModel


def train(model: VALAModel, dataset, cfg: TrainConfig, val=None, out_dir=None,
          progress: Callable[[str], None] | None = None, record_steps: bool = True, rates=None) -> TrainResult:
    """Train ``model`` in place and return the final checkpoint plus the per-epoch log.

    The log holds an ``epoch 0`` entry with the initialisation loss, then one
    entry per epoch with mean loss components, per-step triples
    ``[total, loss_vp, loss_a]`` and, when ``val`` is given, a validation
    report.  With ``out_dir`` the log is written as ``train_log.jsonl`` and
    checkpoints as ``epoch_XXXX.ckpt`` every ``eval_every`` epochs plus
    ``final.ckpt``.  ``rates`` overrides the positive rates measured on the
    training labels.
    """
    cfg.validate()
    data = as_arrays(dataset)
    mcfg = model.config
    if data.K != mcfg.num_attrs:
        raise ConfigError(f"dataset has K={data.K} attributes, model expects {mcfg.num_attrs}")
    if len(data) == 0:
        raise ConfigError("training set is empty")
    if mcfg.has_view_branch and not data.has_views():
        raise ConfigError("the view branch is enabled but the training set lacks view labels")
    val_data = as_arrays(val) if val is not None else None

    rates = positive_rates(data.attrs) if rates is None else np.asarray(rates, dtype=np.float64)
    if rates.shape != (mcfg.num_attrs,):
        raise ConfigError(f"need {mcfg.num_attrs} positive rates, got shape {rates.shape}")
    rng = nx.make_rng(cfg.seed)
    params = model.parameters()
    groups = model.param_groups()
    velocities = {name: np.zeros_like(p.data) for name, p in params.items()}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"
        log_path.write_text("")

    log: list[dict] = []

    def emit(entry: dict, seconds: float | None = None) -> None:
        log.append(entry)
        if out is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if progress is not None:
            msg = f"epoch {entry['epoch']}: loss {entry['loss']:.6f} (vp {entry['loss_vp']:.6f}, a {entry['loss_a']:.6f})"
            if entry.get("val"):
                msg += f" val mA {entry['val']['mA']:.4f}"
            if seconds is not None:
                # wall time stays out of the log so identical runs write identical logs
                msg += f" ({seconds:.1f} s)"
            progress(msg)

    emit({"epoch": 0, "phase": "init", **initial_loss(model, data, cfg, rates)})

    input_shape = mcfg.backbone.input_shape
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lrs = cfg.group_lrs(epoch)
        order = rng.permutation(len(data))
        steps: list[StepLosses] = []
        for idx in _batches(len(data), cfg.batch_size, order):
            x = prepare_batch(data.images[idx], input_shape, cfg.crop_pad, rng)
            out_fw = model.forward(x, mode="train")
            total, l_vp, l_a = _loss_terms(model, out_fw, data.attrs[idx], data.views[idx], rates, cfg)
            model.zero_grad()
            total.backward()
            bad = [n for n, p in params.items() if p.grad is not None and not np.all(np.isfinite(p.grad))]
            if bad or not np.isfinite(total.item()):
                raise TrainingError(
                    f"non-finite gradient at epoch {epoch + 1}, step {len(steps) + 1} "
                    f"(loss {total.item()!r}); parameters: {', '.join(bad[:8]) or 'none'}"
                )
            for group, names in groups.items():
                ps = [params[n] for n in names]
                sgd_step(
                    [p.data for p in ps],
                    [p.grad if p.grad is not None else np.zeros_like(p.data) for p in ps],
                    [velocities[n] for n in names],
                    lrs[group], cfg.momentum, cfg.weight_decay,
                )
            steps.append(StepLosses(total.item(), l_vp.item(), l_a.item()))
        entry = {"epoch": epoch + 1, "phase": "train", "lr": lrs, **_mean_losses(steps),
                 "alpha": cfg.alpha, "beta": cfg.beta}
        if record_steps:
            entry["steps"] = [[s.total, s.view, s.attr] for s in steps]
        if val_data is not None and len(val_data):
            entry["val"] = evaluate_model(model, val_data).to_dict()
        emit(entry, time.perf_counter() - t0)
        if out is not None and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            make_checkpoint(model, cfg, velocities, epoch + 1, rng, rates, data.attr_names).save(out / f"epoch_{epoch + 1:04d}.ckpt")

    ckpt = make_checkpoint(model, cfg, velocities, cfg.epochs, rng, rates, data.attr_names)
    if out is not None:
        ckpt.save(out / "final.ckpt")
    return TrainResult(ckpt, log, model)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict(model: VALAModel, images: np.ndarray, batch: int = EVAL_BATCH) -> tuple[np.ndarray, np.ndarray | None]:
    """Eval-mode attribute logits ``N x K`` and view logits ``N x 4`` (or None)."""
    attr, view = [], []
    with nx.no_grad():
        for i in range(0, len(images), batch):
            x = prepare_batch(images[i : i + batch], model.config.backbone.input_shape)
            out = model.forward(x, mode="eval")
            attr.append(out.attr_logits.data)
            if out.view_logits is not None:
                view.append(out.view_logits.data)
    k = model.config.num_attrs
    attr_all = np.concatenate(attr) if attr else np.zeros((0, k))
    return attr_all, (np.concatenate(view) if view else None)


def evaluate_model(model: VALAModel, dataset) -> MetricsReport:
    data = as_arrays(dataset)
    if data.K != model.config.num_attrs:
        raise ConfigError(f"dataset has K={data.K} attributes, checkpoint expects {model.config.num_attrs}")
    attr_logits, view_logits = predict(model, data.images)
    preds = (attr_logits > 0).astype(np.int64)  # sigmoid(z) > 0.5
    pred_views = None
    if view_logits is not None:
        nv = model.config.num_views
        pred_views = np.argmax(view_logits[:, :nv], axis=1)
    return compute_report(preds, data.attrs, pred_views, data.views if pred_views is not None else None)


def evaluate(checkpoint, dataset) -> MetricsReport:
    """Metrics of a checkpoint (object or path) on a dataset split."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    return evaluate_model(ckpt.build_model(), dataset)


# ---------------------------------------------------------------------------
# ablation suite
# ---------------------------------------------------------------------------

TABLE_METRICS = ("mA", "accuracy", "precision", "recall", "f1")


@dataclass
class AblationResult:
    rows: list[dict]
    runs: list[dict]

    def to_dict(self) -> dict:
        return {"metrics": list(TABLE_METRICS), "rows": self.rows, "runs": self.runs}

    def row(self, variant: str) -> dict:
        for r in self.rows:
            if r["variant"] == variant:
                return r
        raise KeyError(variant)

    def text_table(self) -> str:
        header = ["variant", *TABLE_METRICS]
        body = [[r["variant"], *(f"{100 * r[m]:.2f}" for m in TABLE_METRICS)] for r in self.rows]
        widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
        lines = []
        for row in [header, *body]:
            cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
            lines.append("  ".join(cells))
        return "\n".join(lines) + "\n"


def run_ablation_suite(base: ModelConfig, train_cfg: TrainConfig, train_data, test_data,
                       variants: Sequence[str] | None = None, seeds: Sequence[int] = (0, 1, 2),
                       progress: Callable[[str], None] | None = None) -> AblationResult:
    """Train every variant under every seed; rows report the per-metric median over seeds."""
    variants = list(variants) if variants is not None else list(VARIANTS)
    if not variants:
        raise ConfigError("no ablation variants configured")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
    train_arr, test_arr = as_arrays(train_data), as_arrays(test_data)
    runs, rows = [], []
    for v in variants:
        mcfg = variant_config(v, base)
        per_seed = []
        for seed in seeds:
            t0 = time.perf_counter()
            model = VALAModel(mcfg, seed=seed)
            cfg = TrainConfig(**{**train_cfg.to_dict(), "seed": seed})
            train(model, train_arr, cfg, record_steps=False)
            report = evaluate_model(model, test_arr)
            run = {"variant": v, "seed": seed, **{m: getattr(report, m) for m in TABLE_METRICS}}
            runs.append(run)
            per_seed.append(run)
            if progress is not None:
                progress(f"{v} seed {seed}: mA {report.mA:.4f} f1 {report.f1:.4f} ({time.perf_counter() - t0:.1f} s)")
        rows.append({"variant": v, **{m: float(np.median([r[m] for r in per_seed])) for m in TABLE_METRICS}})
    return AblationResult(rows, runs)


def stderr_progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)
