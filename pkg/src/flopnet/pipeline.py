"""Experiment protocol: stochastic-gate training with the FLOPs penalty,
structural pruning at a fixed epoch, then finetuning on the frozen
support.

The run emits one JSONL metrics stream (header + subsampled step records
+ one record per epoch), a checkpoint of the gated model just before
pruning, a prune mapping report, and a final checkpoint holding the
temporally averaged parameters.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import data as dataio
from . import flopcount
from . import layers as L
from . import objective
from .autodiff import Tensor
from .gates import deterministic_gate
from .optim import AdamState

CHECKPOINT_MAGIC = b"FNCK"
FORMAT_VERSION = 1
STEP_LOG_EVERY = 100  # steps between ObjectiveReport records in the stream


class ConfigError(ValueError):
    """Invalid run configuration (unknown key or bad value)."""


class LayerCollapsedError(RuntimeError):
    """Pruning removed every group of one layer."""


@dataclass
class TrainConfig:
    """Every hyperparameter of a run; the whole object is echoed into the
    metrics header so a run is re-executable from its own log."""

    # protocol
    epochs: int = 35
    prune_epoch: int = 30
    finetune_epochs: int = 5
    lambda_f: float = 1e-6
    target: int = 200_000
    sample_count: int = 1000
    baseline: str = "none"
    batch_size: int = 128
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    ema_decay: float = 0.999
    # gates
    gate_beta: float = 2.0 / 3.0
    gate_gamma: float = -0.1
    gate_zeta: float = 1.1
    gate_noise_std: float = 0.01
    # run
    seed: int = 0
    model: str = "lenet5caffe"
    dataset: str = "mnist"  # mnist | synthetic
    data_dir: str = ""
    dataset_limit: int = 0  # 0 = full training split
    synthetic_train: int = 8000
    synthetic_test: int = 2000
    dtype: str = "float32"
    out_dir: str = "runs/run"

    def validate(self):
        if self.epochs < 0 or self.prune_epoch < 0 or self.finetune_epochs < 0:
            raise ConfigError("epochs, prune_epoch, finetune_epochs must be >= 0")
        if self.prune_epoch + self.finetune_epochs != self.epochs:
            raise ConfigError(
                f"prune_epoch ({self.prune_epoch}) + finetune_epochs "
                f"({self.finetune_epochs}) must equal epochs ({self.epochs})"
            )
        if self.target < 0:
            raise ConfigError("target must be >= 0")
        if self.lambda_f < 0:
            raise ConfigError("lambda_f must be >= 0")
        if self.sample_count < 1:
            raise ConfigError("sample_count must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.dataset not in ("mnist", "synthetic"):
            raise ConfigError(f"dataset must be mnist or synthetic, got {self.dataset!r}")
        if self.model != "lenet5caffe":
            raise ConfigError(f"unknown model {self.model!r}")
        if self.baseline not in ("none", "sample_mean"):
            raise ConfigError(f"unknown baseline {self.baseline!r}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = [k for k in d if k not in known]
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        return cls(**d).validate()

    def with_overrides(self, **kw):
        d = self.to_dict()
        explicit = {k: v for k, v in kw.items() if v is not None}
        if "epochs" in explicit and "prune_epoch" not in explicit:
            # keep the finetune tail, shrink/expand the stochastic phase
            ft = explicit.get("finetune_epochs", self.finetune_epochs)
            ft = min(ft, explicit["epochs"])
            explicit["prune_epoch"] = explicit["epochs"] - ft
            explicit["finetune_epochs"] = ft
        d.update(explicit)
        return TrainConfig.from_dict(d)


@dataclass
class TrainResult:
    model: L.GatedModel
    metrics: list
    out_dir: str
    metrics_path: str
    checkpoint_path: str
    prune_checkpoint_path: str = ""
    prune_report: dict = None


def np_dtype(cfg):
    return np.float32 if cfg.dtype == "float32" else np.float64


def build_model(cfg, rng=None):
    if cfg.model != "lenet5caffe":
        raise ConfigError(f"unknown model {cfg.model!r}")
    return L.build_lenet5_caffe(
        rng, dtype=np_dtype(cfg), gate_noise_std=cfg.gate_noise_std,
        beta=cfg.gate_beta, gamma=cfg.gate_gamma, zeta=cfg.gate_zeta,
    )


def resolve_datasets(cfg):
    dtype = np_dtype(cfg)
    if cfg.dataset == "mnist":
        train = dataio.load_mnist(cfg.data_dir or None, "train", dtype=dtype)
        test = dataio.load_mnist(cfg.data_dir or None, "test", dtype=dtype)
    else:
        train = dataio.synthetic_images(10, cfg.synthetic_train, seed=cfg.seed + 101)
        test = dataio.synthetic_images(10, cfg.synthetic_test, seed=cfg.seed + 202, split="test")
        train.images = train.images.astype(dtype)
        test.images = test.images.astype(dtype)
    if cfg.dataset_limit:
        train = train.limit(cfg.dataset_limit)
    return train, test


# --- pruning ---------------------------------------------------------------


@dataclass
class PruneReport:
    layers: list = field(default_factory=list)
    transforms: dict = field(default_factory=dict)  # param name -> array transform

    def to_dict(self):
        return {"layers": self.layers}


def prune_model(model):
    """Drop every group whose deterministic gate is zero and bake the
    surviving gate values into the weights.

    Conv filters disappear together with their downstream input slices
    (through the flatten map for a following dense layer); a dense
    layer's dead inputs drop its weight rows and, when the producer is
    another dense layer, that producer's output columns. The pruned model
    has no gates left.
    """
    report = PruneReport()
    new_layers = []
    sel = None  # indices of surviving features/channels at the walk point
    dense_out_keep = _dense_output_keeps(model)

    for layer in model.layers:
        if isinstance(layer, L.Conv2d):
            det = _det_values(layer)
            keep = np.flatnonzero(det > 0)
            if layer.gated and keep.size == 0:
                raise LayerCollapsedError(f"layer collapsed: {layer.name}")
            in_sel = np.arange(layer.in_channels) if sel is None else sel
            scale = det[keep]
            w_t = _conv_w_transform(keep, in_sel, scale, layer.weight.dtype)
            b_t = _scaled_take(keep, scale)
            new_layers.append(L.Conv2d(
                layer.name, Tensor(w_t(layer.weight.data), requires_grad=True),
                Tensor(b_t(layer.bias.data), requires_grad=True),
                stride=layer.stride, padding=layer.padding,
            ))
            report.transforms[f"{layer.name}.weight"] = w_t
            report.transforms[f"{layer.name}.bias"] = b_t
            _note(report, layer, det, keep)
            sel = keep
        elif isinstance(layer, L.Dense):
            det = _det_values(layer)
            gate_keep = det > 0
            if layer.gated and not gate_keep.any():
                raise LayerCollapsedError(f"layer collapsed: {layer.name}")
            in_sel = np.arange(layer.in_features) if sel is None else sel
            kept_in = in_sel[gate_keep[in_sel]]
            if kept_in.size == 0:
                raise LayerCollapsedError(f"layer collapsed: {layer.name}")
            out_keep = dense_out_keep[layer.name]
            scale = det[kept_in]
            w_t = _dense_w_transform(kept_in, out_keep, scale, layer.weight.dtype)
            b_t = _plain_take(out_keep)
            new_layers.append(L.Dense(
                layer.name, Tensor(w_t(layer.weight.data), requires_grad=True),
                Tensor(b_t(layer.bias.data), requires_grad=True),
            ))
            report.transforms[f"{layer.name}.weight"] = w_t
            report.transforms[f"{layer.name}.bias"] = b_t
            _note(report, layer, det, kept_in)
            sel = out_keep
        elif isinstance(layer, L.Flatten):
            c, h, w = layer.in_shape
            if sel is None:
                sel = np.arange(c)
            sel = (sel[:, None] * (h * w) + np.arange(h * w)[None, :]).reshape(-1)
            new_layers.append(L.Flatten(layer.name))
        elif isinstance(layer, L.MaxPool2x2):
            new_layers.append(L.MaxPool2x2(layer.name))
        elif isinstance(layer, L.Relu):
            new_layers.append(L.Relu(layer.name))
        else:  # pragma: no cover
            raise TypeError(f"unknown layer type {type(layer).__name__}")

    pruned = L.GatedModel(new_layers, model.input_shape, model.num_classes,
                          name=model.name)
    return pruned, report


def _det_values(layer):
    if not layer.gated:
        n = layer.out_channels if isinstance(layer, L.Conv2d) else layer.in_features
        return np.ones(n)
    return deterministic_gate(layer.gate_group())


def _dense_output_keeps(model):
    """For each dense layer, the output columns that survive: the next
    dense layer's live input gates, or everything for the classifier."""
    counted = [l for l in model.layers if isinstance(l, (L.Conv2d, L.Dense))]
    keeps = {}
    for i, layer in enumerate(counted):
        if not isinstance(layer, L.Dense):
            continue
        nxt = counted[i + 1] if i + 1 < len(counted) else None
        if isinstance(nxt, L.Dense) and nxt.gated:
            keeps[layer.name] = np.flatnonzero(_det_values(nxt) > 0)
        else:
            keeps[layer.name] = np.arange(layer.out_features)
    return keeps


def _conv_w_transform(keep_out, keep_in, scale, dtype):
    def t(arr):
        return (arr[keep_out][:, keep_in] * scale[:, None, None, None]).astype(dtype)

    return t


def _dense_w_transform(keep_in, keep_out, scale, dtype):
    def t(arr):
        return (arr[keep_in][:, keep_out] * scale[:, None]).astype(dtype)

    return t


def _scaled_take(idx, scale):
    def t(arr):
        return (arr[idx] * scale).astype(arr.dtype)

    return t


def _plain_take(idx):
    def t(arr):
        return arr[idx]

    return t


def _note(report, layer, det, kept):
    n = det.shape[0]
    report.layers.append({
        "layer": layer.name,
        "gated": layer.gated,
        "groups": int(n),
        "kept": int(kept.size),
        "dropped": int(n - kept.size) if layer.gated else 0,
        "kept_indices": [int(i) for i in kept] if layer.gated else "all",
    })


# --- evaluation ------------------------------------------------------------


def evaluate(model, dataset, batch_size=500):
    """Top-1 error on a dataset plus the deterministic-support ledger."""
    wrong = 0
    for images, labels in dataio.batches(dataset, batch_size):
        pred = L.predict(model, images)
        wrong += int((pred != labels).sum())
    error = wrong / len(dataset) if len(dataset) else 0.0
    if model.is_gated:
        ledger = flopcount.network_flops(model, flopcount.support_realization(model))
    else:
        ledger = flopcount.static_flops(model)
    return error, ledger


def active_group_counts(model):
    out = {}
    for layer in model.layers:
        if isinstance(layer, (L.Conv2d, L.Dense)):
            if layer.gated:
                out[layer.name] = int((deterministic_gate(layer.gate_group()) > 0).sum())
            else:
                out[layer.name] = int(layer.out_channels if isinstance(layer, L.Conv2d)
                                      else layer.in_features)
    return out


# --- checkpoints -----------------------------------------------------------


def _layer_descriptor(layer):
    if isinstance(layer, L.Conv2d):
        d = {"kind": "conv2d", "name": layer.name,
             "out_channels": int(layer.out_channels), "in_channels": int(layer.in_channels),
             "k_h": int(layer.kernel[0]), "k_w": int(layer.kernel[1]),
             "stride": int(layer.stride), "padding": int(layer.padding),
             "gated": layer.gated}
    elif isinstance(layer, L.Dense):
        d = {"kind": "dense", "name": layer.name,
             "in_features": int(layer.in_features), "out_features": int(layer.out_features),
             "gated": layer.gated}
    elif isinstance(layer, L.MaxPool2x2):
        return {"kind": "maxpool2x2", "name": layer.name}
    elif isinstance(layer, L.Relu):
        return {"kind": "relu", "name": layer.name}
    elif isinstance(layer, L.Flatten):
        return {"kind": "flatten", "name": layer.name}
    else:  # pragma: no cover
        raise TypeError(f"unknown layer type {type(layer).__name__}")
    if d["gated"]:
        d["gate"] = {
            "log_alpha": [float(v) for v in layer.log_alpha.data],
            "beta": layer.beta, "gamma": layer.gamma, "zeta": layer.zeta,
        }
    return d


def save_checkpoint(path, model, cfg):
    """Versioned container: magic, u32 header length, JSON header (topology,
    config, gate parameters), then raw little-endian float32 weight blobs."""
    blobs = []
    blob_index = []
    for name, tensor, kind in model.parameters():
        if kind == "log_alpha":
            continue  # gate parameters live in the JSON header
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        blobs.append(arr.tobytes())
        blob_index.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
    header = {
        "format_version": FORMAT_VERSION,
        "model": {
            "name": model.name,
            "input_shape": list(model.input_shape),
            "num_classes": model.num_classes,
            "layers": [_layer_descriptor(l) for l in model.layers],
        },
        "config": cfg.to_dict() if cfg is not None else {},
        "blobs": blob_index,
    }
    payload = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for b in blobs:
            f.write(b)
    return path


def load_checkpoint(path):
    """Returns (model, TrainConfig or None). Weights load as float32."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a flopnet checkpoint (magic {magic!r})")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format_version "
                             f"{header.get('format_version')}")
        arrays = {}
        for spec in header["blobs"]:
            n = int(np.prod(spec["shape"])) if spec["shape"] else 1
            raw = f.read(4 * n)
            if len(raw) != 4 * n:
                raise ValueError(f"{path}: truncated blob {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(spec["shape"]).copy()

    layers = []
    for d in header["model"]["layers"]:
        kind = d["kind"]
        if kind == "conv2d":
            la = None
            if d["gated"]:
                la = Tensor(np.asarray(d["gate"]["log_alpha"], dtype=np.float32),
                            requires_grad=True)
            layers.append(L.Conv2d(
                d["name"], Tensor(arrays[f"{d['name']}.weight"], requires_grad=True),
                Tensor(arrays[f"{d['name']}.bias"], requires_grad=True),
                stride=d["stride"], padding=d["padding"], log_alpha=la,
                **(_gate_hyper(d) if d["gated"] else {}),
            ))
        elif kind == "dense":
            la = None
            if d["gated"]:
                la = Tensor(np.asarray(d["gate"]["log_alpha"], dtype=np.float32),
                            requires_grad=True)
            layers.append(L.Dense(
                d["name"], Tensor(arrays[f"{d['name']}.weight"], requires_grad=True),
                Tensor(arrays[f"{d['name']}.bias"], requires_grad=True),
                log_alpha=la, **(_gate_hyper(d) if d["gated"] else {}),
            ))
        elif kind == "maxpool2x2":
            layers.append(L.MaxPool2x2(d["name"]))
        elif kind == "relu":
            layers.append(L.Relu(d["name"]))
        elif kind == "flatten":
            layers.append(L.Flatten(d["name"]))
        else:
            raise ValueError(f"{path}: unknown layer kind {kind!r}")
    model = L.GatedModel(layers, tuple(header["model"]["input_shape"]),
                         header["model"]["num_classes"], name=header["model"]["name"])
    cfg = None
    if header.get("config"):
        cfg = TrainConfig.from_dict(header["config"])
    return model, cfg


def _gate_hyper(d):
    g = d["gate"]
    return {"beta": g["beta"], "gamma": g["gamma"], "zeta": g["zeta"]}


# --- training loop ----------------------------------------------------------


def _make_optimizer(model, cfg):
    return AdamState(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                     eps=cfg.eps, weight_decay=cfg.weight_decay, ema_decay=cfg.ema_decay)


def _epoch_record(epoch, model, nll, penalty, test_error):
    if model.is_gated:
        expected = flopcount.expected_flops(model)
        actual = flopcount.network_flops(model, flopcount.support_realization(model)).total
    else:
        expected = actual = flopcount.static_flops(model).total
    return {
        "type": "epoch",
        "epoch": epoch,
        "train_nll": nll,
        "penalty": penalty,
        "expected_flops": float(expected),
        "actual_flops": int(actual),
        "test_error": test_error,
        "active_groups": active_group_counts(model),
    }


def train(cfg: TrainConfig, verbose=False) -> TrainResult:
    """Run the full protocol and return the final (pruned) model.

    Epoch indices are 0-based: with epochs=200 and prune_epoch=190 the
    model trains stochastically through epoch 189, is pruned at the start
    of epoch 190, and finetunes for the remaining 10 epochs with the
    penalty dropped (the support is frozen, so it is a constant).
    """
    cfg.validate()
    train_ds, test_ds = resolve_datasets(cfg)  # fail before any training

    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")
    final_ckpt = os.path.join(cfg.out_dir, "checkpoint_final.ckpt")
    prune_ckpt = os.path.join(cfg.out_dir, "checkpoint_prune.ckpt")

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng = np.random.default_rng(seeds[0])
    data_rng = np.random.default_rng(seeds[1])
    step_rng = np.random.default_rng(seeds[2])

    model = build_model(cfg, init_rng)
    opt = _make_optimizer(model, cfg)
    pcfg = objective.PenaltyConfig(cfg.lambda_f, cfg.target, cfg.sample_count, cfg.baseline)
    no_penalty = objective.PenaltyConfig(0.0, cfg.target, 1)

    metrics = []
    prune_report = None
    step_index = 0
    with open(metrics_path, "w") as log:
        header = {"type": "header", "format_version": FORMAT_VERSION,
                  "config": cfg.to_dict(),
                  "gate_groups": {l.name: len(l.log_alpha.data) for l in model.gated_layers()}}
        log.write(json.dumps(header) + "\n")

        for epoch in range(cfg.epochs):
            if epoch == cfg.prune_epoch and model.is_gated:
                model, opt, prune_report = _prune_and_swap(model, opt, cfg, prune_ckpt)
            nll_sum = penalty_sum = 0.0
            n_steps = 0
            for batch in dataio.batches(train_ds, cfg.batch_size, rng=data_rng):
                step_cfg = pcfg if model.is_gated else no_penalty
                loss, grads, report = objective.training_loss_step(model, batch, step_cfg, step_rng)
                opt.step(grads)
                opt.ema_update()
                nll_sum += loss
                penalty_sum += report.penalty_value
                if step_index % STEP_LOG_EVERY == 0:
                    log.write(json.dumps({"type": "step", "epoch": epoch,
                                          "step": step_index, **report.to_dict()}) + "\n")
                step_index += 1
                n_steps += 1

            with opt.averaged_parameters():
                test_error, _ = evaluate(model, test_ds)
            record = _epoch_record(epoch, model,
                                   nll_sum / max(n_steps, 1), penalty_sum / max(n_steps, 1),
                                   test_error)
            metrics.append(record)
            log.write(json.dumps(record) + "\n")
            log.flush()
            if verbose:
                print(f"epoch {epoch}: nll {record['train_nll']:.4f} "
                      f"err {record['test_error']:.4f} flops {record['actual_flops']:,}")

        if cfg.epochs > 0 and cfg.prune_epoch == cfg.epochs and model.is_gated:
            model, opt, prune_report = _prune_and_swap(model, opt, cfg, prune_ckpt)

    if opt.step_count > 0:
        with opt.averaged_parameters():
            save_checkpoint(final_ckpt, model, cfg)
    else:
        save_checkpoint(final_ckpt, model, cfg)
    if prune_report is not None:
        with open(os.path.join(cfg.out_dir, "prune_report.json"), "w") as f:
            json.dump(prune_report, f, indent=2)

    return TrainResult(
        model=model, metrics=metrics, out_dir=cfg.out_dir, metrics_path=metrics_path,
        checkpoint_path=final_ckpt,
        prune_checkpoint_path=prune_ckpt if prune_report is not None else "",
        prune_report=prune_report,
    )


def _prune_and_swap(model, opt, cfg, prune_ckpt_path):
    """Checkpoint the gated model, prune it, and rebuild the optimizer.

    Adam moments restart for the finetune phase; the EMA shadow is carried
    through the prune mapping (sliced and scaled like its parameters).
    """
    if opt.step_count > 0:
        with opt.averaged_parameters():
            save_checkpoint(prune_ckpt_path, model, cfg)
        old_shadow = {name: opt.shadow_value(t).copy() for name, t, _ in model.parameters()}
    else:
        save_checkpoint(prune_ckpt_path, model, cfg)
        old_shadow = None

    pruned, report = prune_model(model)
    new_opt = _make_optimizer(pruned, cfg)
    if old_shadow is not None:
        seeded = {}
        for name, t, kind in pruned.parameters():
            seeded[name] = report.transforms[name](old_shadow[name])
        new_opt.seed_shadow(seeded)
    return pruned, new_opt, report.to_dict()
