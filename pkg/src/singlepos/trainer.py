"""Training loop: augmentation, losses, running-average stores, mining and model selection."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import containers
from .augment import apply_to_image, canonical_size, sample_rng, sample_transform
from .consistency import HeatmapStore, ScoreStore
from .data import DatasetRecord, stack
from .losses import CONSISTENCY_LOSSES, PRIMARY_LOSSES, combined_loss, gamma_schedule
from .metrics import EvaluationReport, evaluate, mean_average_precision
from .miner import class_budgets, initial_masks, mine, write_mask_dump
from .model import ConvClassifier, ModelConfig, init_params
from .numerics import bilinear_resize

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "singlepos-train-state"
MODEL_FORMAT = "singlepos-model"


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------

@dataclass
class ModelSection:
    input_size: int = 32
    channels: list = field(default_factory=lambda: [16, 32, 48])
    global_pool: str = "logit"


@dataclass
class AugSection:
    area_min: float = 0.25
    area_max: float = 1.0
    square: bool = True
    hflip_prob: float = 0.5


@dataclass
class LossSection:
    primary: str = "an"
    consistency: str = "none"
    gamma_warmup_epochs: int = 5
    gamma_max: float = 1.0  # plateau of the consistency weight after warmup
    k: float = 0.0          # 0 means: mean positives per image of the validation split
    normalized_l2: bool = False


@dataclass
class OptimSection:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class ConsistencySection:
    score_momentum: float = 0.8
    heatmap_momentum: float = 0.8
    heatmap_scale: int = 2
    heatmap_dtype: str = "float32"
    topk: int = 0
    topk_after_epoch: int = 5


@dataclass
class TrainSection:
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    dtype: str = "float32"
    freeze_backbone_epochs: int = 0
    eval_train: bool = False
    eval_batch_size: int = 64


@dataclass
class DataSection:
    path: str = ""
    val_fraction: float = 0.2
    split_seed: int = 0
    annotation: str = "single"  # "single": one random positive per training image; "full"


@dataclass
class TrainConfig:
    model: ModelSection = field(default_factory=ModelSection)
    aug: AugSection = field(default_factory=AugSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    consistency: ConsistencySection = field(default_factory=ConsistencySection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)

    def validate(self) -> "TrainConfig":
        if self.loss.primary not in PRIMARY_LOSSES:
            raise ConfigError(f"loss.primary must be one of {PRIMARY_LOSSES}, got {self.loss.primary!r}")
        if self.loss.consistency not in CONSISTENCY_LOSSES:
            raise ConfigError(
                f"loss.consistency must be one of {CONSISTENCY_LOSSES}, got {self.loss.consistency!r}")
        if self.loss.primary in ("en", "ep") and self.loss.consistency == "none":
            raise ConfigError(
                f"loss.primary={self.loss.primary} mines expected positives from the running-average "
                "scores, which are maintained by a consistency store; set loss.consistency to cl or scl")
        for name in ("score_momentum", "heatmap_momentum"):
            if not 0 <= getattr(self.consistency, name) <= 1:
                raise ConfigError(f"consistency.{name} must lie in [0, 1]")
        if self.optim.lr <= 0:
            raise ConfigError("optim.lr must be positive")
        if self.train.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.loss.gamma_max < 0:
            raise ConfigError("loss.gamma_max must be >= 0")
        if self.loss.gamma_warmup_epochs < 1:
            raise ConfigError("loss.gamma_warmup_epochs must be >= 1")
        if self.consistency.heatmap_dtype not in ("float16", "float32"):
            raise ConfigError("consistency.heatmap_dtype must be float16 or float32")
        if self.train.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")
        if self.data.annotation not in ("single", "full"):
            raise ConfigError("data.annotation must be single or full")
        if not 0 < self.data.val_fraction < 1:
            raise ConfigError("data.val_fraction must lie in (0, 1)")
        if self.loss.k < 0:
            raise ConfigError("loss.k must be positive (or 0 for automatic)")
        return self

    def to_flat(self) -> dict[str, object]:
        out = {}
        for sec in dataclasses.fields(self):
            for f in dataclasses.fields(getattr(self, sec.name)):
                out[f"{sec.name}.{f.name}"] = getattr(getattr(self, sec.name), f.name)
        return out

    def update(self, flat: dict[str, object]) -> "TrainConfig":
        """Set dotted keys such as ``aug.area_min``; string values are parsed."""
        known = self.to_flat()
        for key, value in flat.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            sec, name = key.split(".", 1)
            section = getattr(self, sec)
            hint = typing.get_type_hints(type(section))[name]
            setattr(section, name, _coerce(key, value, hint))
        return self

    @classmethod
    def from_flat(cls, flat: dict[str, object]) -> "TrainConfig":
        return cls().update(flat).validate()


def _coerce(key, value, hint):
    if not isinstance(value, str):
        return list(value) if hint is list else value
    text = value.strip()
    try:
        if hint is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is list:
            return [int(v) for v in text.strip("[]").replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key}") from None
    return text


def format_value(v) -> str:
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


# -- schedules and optimizer -----------------------------------------------------

def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    return base_lr * 0.5 * (1 + math.cos(math.pi * epoch / total_epochs))


class Adam:
    """Adam with bias correction and optional L2 weight decay added to the gradient."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
             skip=()) -> dict[str, np.ndarray]:
        for name, g in grads.items():
            if name in skip:
                continue
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            if self.weight_decay:
                g = g + self.weight_decay * p
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
        return params

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m/{name}"] = self.m[name]
            out[f"adam.v/{name}"] = self.v[name]
            out[f"adam.t/{name}"] = np.array([self.t[name]], dtype=np.int64)
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for key, arr in arrays.items():
            if key.startswith("adam.m/"):
                name = key[len("adam.m/"):]
                self.m[name] = arr.copy()
                self.v[name] = arrays[f"adam.v/{name}"].copy()
                self.t[name] = int(arrays[f"adam.t/{name}"][0])


# -- state -----------------------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    model: ConvClassifier
    optimizer: Adam
    scores: ScoreStore
    heatmaps: HeatmapStore | None
    masks: np.ndarray
    k: float
    epoch: int = 0
    best_params: dict[str, np.ndarray] | None = None
    best_map: float = -1.0
    best_epoch: int = -1
    history: list[tuple[int, str, str, float]] = field(default_factory=list)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.model.params.items()}
        out.update(self.optimizer.state())
        out.update(self.scores.state())
        if self.heatmaps is not None:
            out.update(self.heatmaps.state())
        out["masks"] = self.masks
        if self.best_params is not None:
            out.update({f"best/{k}": v for k, v in self.best_params.items()})
        return out

    def meta(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT, "epoch": self.epoch, "k": self.k,
            "best_map": repr(self.best_map), "best_epoch": self.best_epoch,
            "config": {k: format_value(v) for k, v in self.config.to_flat().items()},
            "history": [[e, s, m, repr(v)] for e, s, m, v in self.history],
        }

    def save(self, path) -> None:
        containers.save(path, self.arrays(), self.meta())


def model_config_for(config: TrainConfig, num_classes: int) -> ModelConfig:
    return ModelConfig(input_size=config.model.input_size, channels=list(config.model.channels),
                       num_classes=num_classes, global_pool=config.model.global_pool)


def save_model(path, model: ConvClassifier, meta: dict | None = None) -> None:
    c = model.config
    info = {"format": MODEL_FORMAT, "input_size": c.input_size, "channels": c.channels,
            "num_classes": c.num_classes, "global_pool": c.global_pool}
    info.update(meta or {})
    containers.save(path, {f"param/{k}": v for k, v in model.params.items()}, info)


def load_model(path) -> tuple[ConvClassifier, dict]:
    arrays, meta = containers.load(path)
    if not meta or meta.get("format") not in (MODEL_FORMAT, CHECKPOINT_FORMAT):
        raise containers.ContainerError(f"{path} is not a model checkpoint")
    if meta["format"] == CHECKPOINT_FORMAT:
        cfg = TrainConfig.from_flat(meta["config"])
        params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
        config = model_config_for(cfg, params["head.bias"].shape[0])
    else:
        config = ModelConfig(input_size=meta["input_size"], channels=meta["channels"],
                             num_classes=meta["num_classes"], global_pool=meta["global_pool"])
        params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    return ConvClassifier(config, params), meta


# -- data preparation ----------------------------------------------------------------

def resize_images(images: np.ndarray, size: int, dtype=np.float32) -> np.ndarray:
    """uint8 ``(N, S, S, 3)`` images to float ``(N, size, size, 3)`` in ``[0, 1]``."""
    out = np.empty((len(images), size, size, images.shape[-1]), dtype=dtype)
    for i, img in enumerate(images):
        out[i] = bilinear_resize(img.astype(np.float64) / 255.0, size, size)
    return out


def evaluation_inputs(records: list[DatasetRecord], input_size: int, dtype=np.float32):
    images, y, _ = stack(records)
    primary = np.array([r.primary if r.primary >= 0 else int(np.argmax(r.y)) for r in records])
    return resize_images(images, input_size, dtype), y, primary


def evaluate_model(model: ConvClassifier, images, y, primary, batch_size=64) -> EvaluationReport:
    return evaluate(model.predict(images, batch_size), y, primary)


# -- training ---------------------------------------------------------------------

def init_state(config: TrainConfig, train_records: list[DatasetRecord],
               val_records: list[DatasetRecord]) -> TrainState:
    config.validate()
    _, _, z = stack(train_records)
    L = z.shape[1]
    k = config.loss.k or float(np.mean([r.y.sum() for r in val_records]))
    dtype = np.dtype(config.train.dtype)
    mcfg = model_config_for(config, L)
    prior = min(max(k / L, 0.01), 0.99)
    model = ConvClassifier(mcfg, init_params(mcfg, np.random.default_rng([config.train.seed, 0]),
                                             prior, dtype))
    scores = ScoreStore(z, config.consistency.score_momentum, dtype=np.float32)
    heatmaps = None
    if config.loss.consistency == "scl":
        W = config.consistency.heatmap_scale * mcfg.grid_size
        heatmaps = HeatmapStore(z, W, config.consistency.heatmap_momentum,
                                np.dtype(config.consistency.heatmap_dtype))
    opt = Adam(config.optim.beta1, config.optim.beta2, config.optim.eps, config.optim.weight_decay)
    return TrainState(config=config, model=model, optimizer=opt, scores=scores, heatmaps=heatmaps,
                      masks=initial_masks(z), k=k)


def load_state(path, train_records, val_records) -> TrainState:
    arrays, meta = containers.load(path)
    if not meta or meta.get("format") != CHECKPOINT_FORMAT:
        raise containers.ContainerError(f"{path} is not a training checkpoint")
    config = TrainConfig.from_flat(meta["config"])
    state = init_state(config, train_records, val_records)
    for key in state.model.params:
        state.model.params[key] = arrays[f"param/{key}"].copy()
    state.optimizer.load_state(arrays)
    state.scores.load_state(arrays)
    if state.heatmaps is not None:
        state.heatmaps.load_state(arrays)
    state.masks = arrays["masks"].copy()
    state.k = float(meta["k"])
    state.epoch = int(meta["epoch"])
    state.best_map = float(meta["best_map"])
    state.best_epoch = int(meta["best_epoch"])
    best = {k[len("best/"):]: v.copy() for k, v in arrays.items() if k.startswith("best/")}
    state.best_params = best or None
    state.history = [(int(e), s, m, float(v)) for e, s, m, v in meta["history"]]
    return state


def write_metrics(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "metric", "value"])
        for e, s, m, v in history:
            w.writerow([e, s, m, repr(float(v))])


@dataclass
class TrainResult:
    state: TrainState
    reports: list[EvaluationReport]


def train(config: TrainConfig, train_records: list[DatasetRecord], val_records: list[DatasetRecord],
          run_dir=None, state: TrainState | None = None, stop_after: int | None = None) -> TrainResult:
    """Run (or continue) training and return the final state with per-epoch reports.

    With ``run_dir`` the directory receives ``metrics.csv``, ``checkpoints/``
    (``last.ckpt`` full state, ``best.ckpt`` model), ``masks/`` and
    ``heatmaps/store.bin``. ``stop_after`` ends the call after that many
    epochs, leaving a resumable state.
    """
    if state is None:
        state = init_state(config, train_records, val_records)
    config = state.config
    model = state.model
    c_aug, c_loss, c_train = config.aug, config.loss, config.train
    dtype = np.dtype(c_train.dtype)
    G = model.config.grid_size
    S = canonical_size(model.config.input_size)

    images, _, z = stack(train_records)
    canon = resize_images(images, S, dtype)
    val_x, val_y, val_primary = evaluation_inputs(val_records, model.config.input_size, dtype)
    if c_train.eval_train:
        tr_x, tr_y, tr_primary = evaluation_inputs(train_records, model.config.input_size, dtype)
    ids = [r.id for r in train_records]
    budgets = class_budgets(z, state.k) if c_loss.primary in ("en", "ep") else None
    head_only = {k for k in model.params if not k.startswith("head.")}

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        for sub in ("checkpoints", "heatmaps", "masks"):
            (run_dir / sub).mkdir(parents=True, exist_ok=True)

    reports: list[EvaluationReport] = []
    N = len(train_records)
    bs = c_train.batch_size
    last = c_train.epochs if stop_after is None else min(c_train.epochs, state.epoch + stop_after)
    while state.epoch < last:
        epoch = state.epoch
        lr = cosine_lr(epoch, c_train.epochs, config.optim.lr)
        gamma = c_loss.gamma_max * gamma_schedule(epoch, c_loss.gamma_warmup_epochs) if c_loss.consistency != "none" else 0.0
        skip = head_only if epoch < c_train.freeze_backbone_epochs else ()
        order = np.random.default_rng([c_train.seed, epoch, 1]).permutation(N)
        loss_sum = 0.0
        for start in range(0, N, bs):
            batch = order[start:start + bs]
            transforms = [sample_transform(sample_rng(c_train.seed, epoch, n), c_aug.area_min,
                                           c_aug.area_max, c_aug.square, c_aug.hflip_prob)
                          for n in batch]
            x = np.stack([apply_to_image(canon[n], t, model.config.input_size)
                          for n, t in zip(batch, transforms)])
            out = model.forward(x)
            target = None
            if c_loss.consistency == "scl":
                target = np.stack([state.heatmaps.read_target(n, t, G) for n, t in zip(batch, transforms)])
            loss, df, dF = combined_loss(
                c_loss.primary, c_loss.consistency, gamma, out.f, z[batch], zhat=state.masks[batch],
                k=state.k, s_prev=state.scores.s[batch], F=out.F, target=target,
                normalized=c_loss.normalized_l2)
            if not np.all(np.isfinite(loss)):
                bad = [ids[batch[i]] for i in np.flatnonzero(~np.isfinite(loss))]
                raise TrainingError(f"non-finite loss in epoch {epoch} for samples {bad}")
            loss_sum += float(loss.sum())
            B = len(batch)
            dU, du = model.logit_gradients(out, None if dF is None else dF / B, df / B)
            grads = model.backward(dU, du)
            state.optimizer.step(model.params, grads, lr, skip)
            for i, n in enumerate(batch):
                state.scores.update_scores(n, out.f[i], epoch)
                if state.heatmaps is not None:
                    state.heatmaps.update_heatmap(n, out.F[i], transforms[i])

        cc = config.consistency
        if state.heatmaps is not None and cc.topk > 0 and epoch + 1 == cc.topk_after_epoch:
            for n in range(N):
                state.heatmaps.retain_topk(n, cc.topk, state.scores.s[n])
        if budgets is not None:
            state.masks = mine(state.scores.s, z, budgets)
            if run_dir is not None:
                write_mask_dump(run_dir / "masks" / "expected_positives.csv", epoch, state.masks, z, ids)

        report = evaluate_model(model, val_x, val_y, val_primary, c_train.eval_batch_size)
        reports.append(report)
        train_loss = loss_sum / N
        rows = [(epoch, "train", "lr", lr), (epoch, "train", "gamma", gamma),
                (epoch, "train", "loss", train_loss)]
        if c_train.eval_train:
            pred = model.predict(tr_x, c_train.eval_batch_size)
            rows.append((epoch, "train", "mAP", mean_average_precision(pred, tr_y)))
        rows += [(epoch, "val", m, v) for m, v in report.rows()]
        state.history.extend(rows)
        if report.map > state.best_map:
            state.best_map = report.map
            state.best_epoch = epoch
            state.best_params = {k: v.copy() for k, v in model.params.items()}
            if run_dir is not None:
                save_model(run_dir / "checkpoints" / "best.ckpt", model,
                           {"epoch": epoch, "val_mAP": repr(report.map),
                            "config": {k: format_value(v) for k, v in config.to_flat().items()}})
        state.epoch = epoch + 1
        log.info("epoch=%d lr=%.6g gamma=%.3f train_loss=%.5f val_mAP=%.5f",
                 epoch, lr, gamma, train_loss, report.map)
        if run_dir is not None:
            write_metrics(run_dir / "metrics.csv", state.history)
            state.save(run_dir / "checkpoints" / "last.ckpt")
            if state.heatmaps is not None:
                containers.save(run_dir / "heatmaps" / "store.bin", state.heatmaps.state(),
                                {"ids": ids})
    if run_dir is not None and not (run_dir / "metrics.csv").exists():
        write_metrics(run_dir / "metrics.csv", state.history)
        state.save(run_dir / "checkpoints" / "last.ckpt")
        if state.heatmaps is not None:
            containers.save(run_dir / "heatmaps" / "store.bin", state.heatmaps.state(), {"ids": ids})
    return TrainResult(state=state, reports=reports)
