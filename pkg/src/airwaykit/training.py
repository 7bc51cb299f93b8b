"""Training loops for the refiner and the ellipse regressor, plus the
checkpoint container.

Checkpoints are ZIP files written with fixed timestamps and no compression so
identical runs produce byte-identical files. Each holds `meta.json`
(architecture tag, model config, training metadata, tensor directory),
`params.bin` (parameter tensors concatenated as little-endian float32, in
state-dict order) and `history.csv`.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentConfig, augment_patch, center_crop, standardize_array
from .bundles import DatasetBundle
from .errors import ConfigError, DataError
from .labels import AirwayLabel, Patch, encode_label
from .models import EllipseRegressor, Refiner, model_from_config
from .perceptual import PerceptualLossConfig, refinement_loss
from .util import derive_int_seed, format_float, item_rng

CHECKPOINT_VERSION = 1
_META_NAME = "meta.json"
_PARAMS_NAME = "params.bin"
_HISTORY_NAME = "history.csv"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

REFINER_HISTORY_HEADER = ("step", "total", "feature", "style", "reg")
REGRESSOR_HISTORY_HEADER = ("epoch", "train_mse", "val_mse")


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, model: torch.nn.Module, history_header, history_rows,
                    extra_meta: dict | None = None) -> None:
    state = model.state_dict()
    tensors = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    blob = b"".join(
        np.ascontiguousarray(v.detach().cpu().numpy(), dtype="<f4").tobytes()
        for v in state.values())
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": model.architecture,
        "config": model.config_dict(),
        "tensors": tensors,
        "history_header": list(history_header),
    }
    if extra_meta:
        meta.update(extra_meta)
    history = io.StringIO()
    writer = csv.writer(history, lineterminator="\n")
    writer.writerow(history_header)
    for row in history_rows:
        writer.writerow([v if isinstance(v, (int, str)) else format_float(v) for v in row])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, _META_NAME, json.dumps(meta, sort_keys=True, indent=1).encode())
        _zip_write(zf, _PARAMS_NAME, blob)
        _zip_write(zf, _HISTORY_NAME, history.getvalue().encode())


@dataclass
class Checkpoint:
    meta: dict
    state_dict: dict[str, torch.Tensor]
    history_header: list[str]
    history: list[list[float]]

    @property
    def architecture(self) -> str:
        return self.meta["architecture"]


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read(_META_NAME))
            blob = zf.read(_PARAMS_NAME)
            history_text = zf.read(_HISTORY_NAME).decode()
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: not a valid checkpoint ({exc})") from None
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    state: dict[str, torch.Tensor] = {}
    offset = 0
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        chunk = blob[offset:offset + 4 * n]
        if len(chunk) != 4 * n:
            raise DataError(f"{path}: parameter blob truncated at tensor {entry['name']}")
        state[entry["name"]] = torch.from_numpy(
            np.frombuffer(chunk, dtype="<f4").copy().reshape(shape))
        offset += 4 * n
    if offset != len(blob):
        raise DataError(f"{path}: parameter blob has {len(blob) - offset} trailing bytes")
    rows = list(csv.reader(io.StringIO(history_text)))
    header = rows[0] if rows else []
    history = [[float(v) for v in row] for row in rows[1:]]
    return Checkpoint(meta=meta, state_dict=state,
                      history_header=header, history=history)


def load_model(path) -> tuple[torch.nn.Module, Checkpoint]:
    ckpt = load_checkpoint(path)
    model = model_from_config(ckpt.architecture, ckpt.meta["config"])
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    return model, ckpt


class BundleSampler:
    """Draws augmented, standardized crop batches from a dataset bundle.

    Batches are a pure function of (seed, key): index choice and per-item
    augmentation seeds are derived, never consumed from a shared stream.
    """

    def __init__(self, bundle: DatasetBundle, augment_config: AugmentConfig,
                 is_real: bool, seed: int):
        augment_config.validate()
        self.bundle = bundle
        self.config = augment_config
        self.is_real = is_real
        self.seed = seed

    def __len__(self) -> int:
        return self.bundle.count

    def item(self, index: int, *key: int) -> Patch:
        label = self.bundle.labels[index] if self.bundle.labels is not None else None
        patch = Patch(pixels=np.array(self.bundle.patches[index]),
                      spacing_mm=self.bundle.pixel_spacing_mm, label=label)
        return augment_patch(patch, self.config, self.is_real,
                             seed=derive_int_seed(self.seed, index, *key))

    def batch(self, size: int, *key: int, with_targets: bool = False):
        rng = item_rng(self.seed, *key)
        indices = rng.integers(0, self.bundle.count, size=size)
        return self.gather(indices, *key, with_targets=with_targets)

    def gather(self, indices, *key: int, with_targets: bool = False):
        crop = self.config.crop_size_px
        out = np.empty((len(indices), 1, crop, crop), dtype=np.float32)
        targets = np.empty((len(indices), 8), dtype=np.float32) if with_targets else None
        for j, index in enumerate(indices):
            patch = self.item(int(index), *key, j)
            out[j, 0] = patch.pixels
            if with_targets:
                if patch.label is None:
                    raise DataError("bundle has no labels, cannot build regression targets")
                targets[j] = encode_label(patch.label)
        x = torch.from_numpy(out)
        if with_targets:
            return x, torch.from_numpy(targets)
        return x


@dataclass
class RefinerTrainConfig:
    steps: int = 10000
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_interval: int = 0  # 0 = final checkpoint only

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("steps >= 0, batch_size >= 1 and learning_rate > 0 required")


@dataclass
class RefinerTrainResult:
    model: Refiner
    history: list[tuple]
    diverged: bool
    steps_run: int


def _clone_state(model: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train_refiner(refiner: Refiner, extractor, synth_sampler: BundleSampler,
                  real_sampler: BundleSampler, loss_config: PerceptualLossConfig,
                  config: RefinerTrainConfig,
                  checkpoint_path=None) -> RefinerTrainResult:
    """Minimize the composite perceptual loss over synthetic batches.

    Style targets come from the real-domain sampler. A non-finite loss stops
    training and restores the last parameters that produced a finite loss.
    """
    config.validate()
    loss_config.validate()
    optimizer = torch.optim.Adam(refiner.parameters(), lr=config.learning_rate)
    history: list[tuple] = []
    last_good = _clone_state(refiner)
    diverged = False
    refiner.train()
    for step in range(1, config.steps + 1):
        x = synth_sampler.batch(config.batch_size, 0, step)
        y_style = real_sampler.batch(config.batch_size, 1, step)
        y_hat = refiner(x)
        loss = refinement_loss(extractor, loss_config, x, y_hat, y_style)
        total = loss.total.detach().item()
        if not math.isfinite(total):
            refiner.load_state_dict(last_good)
            diverged = True
            break
        last_good = _clone_state(refiner)
        optimizer.zero_grad()
        loss.total.backward()
        optimizer.step()
        history.append((step, total, loss.feature, loss.style, loss.reg))
        if (checkpoint_path is not None and config.checkpoint_interval > 0
                and step % config.checkpoint_interval == 0 and step < config.steps):
            p = Path(checkpoint_path)
            save_checkpoint(p.with_name(f"{p.stem}.step{step}{p.suffix}"), refiner,
                            REFINER_HISTORY_HEADER, history, _train_meta(config, loss_config))
    if not all(torch.isfinite(v).all() for v in refiner.state_dict().values()):
        refiner.load_state_dict(last_good)
        diverged = True
    refiner.eval()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, refiner, REFINER_HISTORY_HEADER, history,
                        _train_meta(config, loss_config, diverged=diverged))
    return RefinerTrainResult(model=refiner, history=history, diverged=diverged,
                              steps_run=len(history))


def _train_meta(config, loss_config=None, **extra) -> dict:
    meta = {"train_config": asdict(config)}
    if loss_config is not None:
        meta["loss_config"] = asdict(loss_config)
    meta.update(extra)
    return meta


@dataclass
class RegressorTrainConfig:
    epochs: int = 40
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    early_stop_patience: int = 0  # 0 = disabled
    treat_as_real: bool = False  # enables the real-only scale augmentation

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be >= 0")


@dataclass
class RegressorTrainResult:
    model: EllipseRegressor
    history: list[tuple]
    epochs_run: int


def train_regressor(model: EllipseRegressor, bundle: DatasetBundle,
                    augment_config: AugmentConfig, config: RegressorTrainConfig,
                    refiner: Refiner | None = None,
                    checkpoint_path=None) -> RegressorTrainResult:
    """MSE regression of encoded labels from augmented (optionally refined) crops."""
    config.validate()
    if bundle.labels is None:
        raise DataError(f"{bundle.path}: bundle has no labels, cannot train the regressor")
    sampler = BundleSampler(bundle, augment_config, is_real=config.treat_as_real,
                            seed=config.seed)
    split = item_rng(config.seed, 0).permutation(bundle.count)
    n_val = int(round(bundle.count * config.val_fraction))
    val_idx, train_idx = split[:n_val], split[n_val:]
    if len(train_idx) == 0:
        raise DataError("no training items left after the validation split")

    if refiner is not None:
        refiner.eval()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history: list[tuple] = []
    best_val = math.inf
    best_state = None
    since_best = 0
    for epoch in range(1, config.epochs + 1):
        order = item_rng(config.seed, 1, epoch).permutation(train_idx)
        model.train()
        sq_sum = 0.0
        n_seen = 0
        for start in range(0, len(order), config.batch_size):
            ids = order[start:start + config.batch_size]
            x, targets = sampler.gather(ids, 2, epoch, start, with_targets=True)
            if refiner is not None:
                with torch.no_grad():
                    x = refiner(x)
            pred = model(x)
            loss = torch.nn.functional.mse_loss(pred, targets)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sq_sum += loss.detach().item() * len(ids)
            n_seen += len(ids)
        train_mse = sq_sum / n_seen
        val_mse = (_regressor_val_mse(model, sampler, val_idx, config.batch_size, refiner)
                   if len(val_idx) else math.nan)
        history.append((epoch, train_mse, val_mse))
        if len(val_idx) and config.early_stop_patience > 0:
            if val_mse < best_val - 1e-12:
                best_val, best_state, since_best = val_mse, _clone_state(model), 0
            else:
                since_best += 1
                if since_best >= config.early_stop_patience:
                    model.load_state_dict(best_state)
                    break
    model.eval()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, REGRESSOR_HISTORY_HEADER, history,
                        _train_meta(config, refined=refiner is not None))
    return RegressorTrainResult(model=model, history=history, epochs_run=len(history))


def _regressor_val_mse(model, sampler, val_idx, batch_size, refiner) -> float:
    # fixed augmentation key: the validation set is identical every epoch
    model.eval()
    sq_sum = 0.0
    with torch.no_grad():
        for start in range(0, len(val_idx), batch_size):
            ids = val_idx[start:start + batch_size]
            x, targets = sampler.gather(ids, 3, with_targets=True)
            if refiner is not None:
                x = refiner(x)
            pred = model(x)
            sq_sum += float(((pred - targets) ** 2).mean().item()) * len(ids)
    return sq_sum / len(val_idx)


def eval_crops(bundle: DatasetBundle, crop_size: int = 32) -> np.ndarray:
    """Standardized center crops for deterministic evaluation, shape (N, crop, crop)."""
    out = np.empty((bundle.count, crop_size, crop_size), dtype=np.float32)
    for i in range(bundle.count):
        pixels = standardize_array(np.array(bundle.patches[i]))
        out[i] = center_crop(pixels, crop_size)
    return out


def lumen_radius_mae(model: EllipseRegressor, bundle: DatasetBundle,
                     batch_size: int = 256) -> float:
    """Mean absolute error of the mean lumen radius, in mm, on center crops."""
    if bundle.labels is None:
        raise DataError(f"{bundle.path}: bundle has no labels to evaluate against")
    crops = eval_crops(bundle, model.input_size)
    errors = []
    with torch.no_grad():
        for start in range(0, len(crops), batch_size):
            chunk = torch.from_numpy(crops[start:start + batch_size]).unsqueeze(1)
            pred = model(chunk).numpy()
            for j, vec in enumerate(pred):
                truth: AirwayLabel = bundle.labels[start + j]
                pred_lr = 0.5 * (vec[0] + vec[1])
                errors.append(abs(pred_lr - truth.lumen_radius))
    return float(np.mean(errors))
