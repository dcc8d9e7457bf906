"""Training configuration, the end-to-end network, the estimator, checkpoints.

Training follows a fixed order: extract features once per batch, predict
attributes through the prototypes, pool for the class head and the hash head,
assemble the weighted joint objective, and step an AdamW optimizer. Pair sets
are built once from ground-truth attributes before the epoch loop. Each
``losses.csv`` row is a full-training-set evaluation taken at the start of an
epoch, before that epoch's updates, so row 0 reflects the initial parameters.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch import nn

from .backbone import ConvBackbone, IdentityBackbone, global_average_pool
from .classwise import CompatibilityHead, classwise_loss, classwise_loss_literal
from .contrast import build_pair_sets, pairwise_loss
from .data import AttributedDataset
from .evaluation import CodeDatabase
from .hashing import HashHead, hypersphere_loss, total_loss
from .prototypes import PrototypeBank, pointwise_loss

CHECKPOINT_MAGIC = b"CMCK1"
LOSS_COLUMNS = ("pointwise", "pairwise", "classwise", "hash", "total")
COMPONENTS = ("pointwise", "pairwise", "classwise", "hash")

_DTYPES = {"float64": np.float64, "float32": np.float32, "uint8": np.uint8, "int64": np.int64}


class NonFiniteLossError(RuntimeError):
    """A loss component stopped being finite during training."""

    def __init__(self, component, epoch, batch=None):
        self.component = component
        self.epoch = epoch
        self.batch = batch
        where = f"epoch {epoch}" + ("" if batch is None else f", batch {batch}")
        super().__init__(f"non-finite {component} loss at {where}")


@dataclass
class TrainConfig:
    """All knobs of a training run; defaults follow the reference recipe."""

    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    lambda_pointwise: float = 10.0
    lambda_pairwise: float = 1.0
    lambda_classwise: float = 10.0
    lambda_hash: float = 1.0
    epsilon: float = 0.9
    tau: float = 1.0
    neg_count: int = 10
    margin: float = 0.35
    scale: float = 10.0
    bits: int = 16
    seed: int = 0
    backbone: str = "identity"  # identity | conv
    backbone_channels: int = 16
    backbone_hidden: int = 16
    scorer: str = "dot"  # dot | mlp
    scorer_hidden: int = 32
    pair_similarity: str = "per_dim"  # per_dim | dot
    classwise_form: str = "softmax"  # softmax | literal
    hash_input: str = "pooled"  # pooled | flatten
    disable_pointwise: bool = False
    disable_pairwise: bool = False
    disable_classwise: bool = False

    def validate(self):
        for name in ("epochs", "batch_size", "bits"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.neg_count < 0:
            raise ValueError(f"neg_count must be non-negative, got {self.neg_count}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epsilon <= 0 or self.tau <= 0 or self.scale <= 0:
            raise ValueError("epsilon, tau and scale must all be positive")
        if self.margin < 0 or self.weight_decay < 0:
            raise ValueError("margin and weight_decay must be non-negative")
        for lam in ("lambda_pointwise", "lambda_pairwise", "lambda_classwise", "lambda_hash"):
            if getattr(self, lam) < 0:
                raise ValueError(f"{lam} must be non-negative")
        if self.backbone not in ("identity", "conv"):
            raise ValueError(f"backbone must be 'identity' or 'conv', got {self.backbone!r}")
        if self.hash_input not in ("pooled", "flatten"):
            raise ValueError(f"hash_input must be 'pooled' or 'flatten', got {self.hash_input!r}")
        return self

    @classmethod
    def field_names(cls):
        return tuple(f.name for f in dataclasses.fields(cls))

    @classmethod
    def from_mapping(cls, mapping):
        """Build from string-valued key=value pairs; unknown keys are rejected."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in mapping.items():
            if key not in fields:
                raise ValueError(
                    f"unknown config key {key!r}; valid keys: {', '.join(sorted(fields))}"
                )
            kind = fields[key].type
            if isinstance(raw, str):
                if kind == "bool":
                    lowered = raw.strip().lower()
                    if lowered not in ("true", "false", "1", "0"):
                        raise ValueError(f"config key {key!r} expects a boolean, got {raw!r}")
                    values[key] = lowered in ("true", "1")
                elif kind == "int":
                    values[key] = int(raw)
                elif kind == "float":
                    values[key] = float(raw)
                else:
                    values[key] = raw.strip()
            else:
                values[key] = raw
        return cls(**values).validate()

    def to_mapping(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @property
    def lambdas(self):
        return (
            self.lambda_pointwise,
            self.lambda_pairwise,
            self.lambda_classwise,
            self.lambda_hash,
        )

    def enabled(self, component):
        if component == "hash":
            return True
        return not getattr(self, f"disable_{component}")


class ComaeNetwork(nn.Module):
    """Backbone plus the three attribute heads and the hash head.

    Construction order is fixed so that seeding the torch RNG before building
    the network makes initialization reproducible.
    """

    def __init__(self, config, in_channels, num_attributes, num_seen, height, width,
                 dtype=torch.float64):
        super().__init__()
        config.validate()
        self.config = config
        if config.backbone == "identity":
            self.backbone = IdentityBackbone(channels=in_channels)
            channels = in_channels
        else:
            self.backbone = ConvBackbone(
                in_channels, config.backbone_channels, config.backbone_hidden
            )
            channels = config.backbone_channels
        self.prototypes = PrototypeBank(
            num_attributes, channels, config.scorer, config.scorer_hidden
        )
        self.compatibility = CompatibilityHead(channels, num_attributes)
        hash_in = channels if config.hash_input == "pooled" else height * width * channels
        self.hash_head = HashHead(hash_in, config.bits)
        centers = torch.randn(num_seen, config.bits)
        self.centers = nn.Parameter(centers / centers.norm(dim=1, keepdim=True))
        self.to(dtype)

    def hash_features(self, fmap, pooled):
        if self.config.hash_input == "pooled":
            return pooled
        return fmap.reshape(fmap.shape[0], -1)

    def renormalize_centers(self):
        """Project center rows back onto the unit sphere (run after each step)."""
        with torch.no_grad():
            self.centers /= self.centers.norm(dim=1, keepdim=True)

    def component_losses(self, x, true_attrs, targets, seen_attrs, pair_sets=None,
                         subset=None):
        """Forward pass producing the four loss components (None when disabled)."""
        cfg = self.config
        fmap = self.backbone(x)
        pooled = global_average_pool(fmap)

        need_attrs = (
            cfg.enabled("pointwise")
            or cfg.enabled("pairwise")
            or (cfg.enabled("classwise") and cfg.classwise_form == "literal")
        )
        predicted = self.prototypes.predict_attributes(fmap) if need_attrs else None

        losses = {name: None for name in COMPONENTS}
        if cfg.enabled("pointwise"):
            losses["pointwise"] = pointwise_loss(true_attrs, predicted)
        if cfg.enabled("pairwise"):
            if pair_sets is None:
                raise ValueError("pair sets are required while the pairwise loss is enabled")
            losses["pairwise"] = pairwise_loss(
                predicted, pair_sets, cfg.tau, subset=subset, similarity=cfg.pair_similarity
            )
        if cfg.enabled("classwise"):
            if cfg.classwise_form == "softmax":
                logits = self.compatibility.class_logits(pooled, seen_attrs)
                losses["classwise"] = classwise_loss(logits, targets)
            else:
                losses["classwise"] = classwise_loss_literal(
                    pooled, self.compatibility, true_attrs, predicted
                )
        relaxed = self.hash_head(self.hash_features(fmap, pooled), mode="train")
        losses["hash"] = hypersphere_loss(
            relaxed, targets, self.centers, cfg.margin, cfg.scale
        )
        return losses

    def joint_loss(self, *args, **kwargs):
        """Weighted sum of the enabled components (disabled ones contribute 0)."""
        losses = self.component_losses(*args, **kwargs)
        values, weights = [], []
        for name, lam in zip(COMPONENTS, self.config.lambdas):
            if losses[name] is not None:
                values.append(losses[name])
                weights.append(lam)
        return total_loss(values, weights)

    def encode(self, x):
        fmap = self.backbone(x)
        pooled = global_average_pool(fmap)
        return self.hash_head(self.hash_features(fmap, pooled), mode="infer")


@dataclass
class Checkpoint:
    """Named parameter tensors plus everything needed to rebuild the model."""

    parameters: dict
    config: TrainConfig
    epoch: int
    rng_state: dict
    meta: dict


def save_checkpoint(checkpoint, path):
    """Write the self-describing CMCK1 container."""
    tensors = dict(checkpoint.parameters)
    torch_state = checkpoint.rng_state.get("torch")
    if torch_state is not None:
        tensors["__rng_torch__"] = np.asarray(torch_state, dtype=np.uint8)
    table = []
    blobs = []
    offset = 0
    for name, array in tensors.items():
        array = np.ascontiguousarray(array)
        blob = array.tobytes()
        table.append(
            {
                "name": name,
                "dtype": array.dtype.name,
                "shape": list(array.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {
            "config": checkpoint.config.to_mapping(),
            "epoch": checkpoint.epoch,
            "meta": checkpoint.meta,
            "numpy_rng": checkpoint.rng_state.get("numpy"),
            "tensors": table,
        }
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if len(raw) < 9 or raw[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file (bad magic): {path}")
    header_len = struct.unpack("<I", raw[5:9])[0]
    header = json.loads(raw[9 : 9 + header_len].decode())
    base = 9 + header_len
    tensors = {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        array = np.frombuffer(raw, dtype=dtype, count=count, offset=base + entry["offset"])
        tensors[entry["name"]] = array.reshape(entry["shape"]).copy()
    torch_state = tensors.pop("__rng_torch__", None)
    rng_state = {"numpy": header.get("numpy_rng"), "torch": torch_state}
    config = TrainConfig.from_mapping(header["config"])
    return Checkpoint(
        parameters=tensors,
        config=config,
        epoch=int(header["epoch"]),
        rng_state=rng_state,
        meta=header["meta"],
    )


class ComaeHasher(BaseEstimator):
    """Attribute-guided zero-shot hashing with a scikit-learn style API.

    fit() consumes an :class:`AttributedDataset` and trains on its seen-class
    samples only; transform() maps sample tensors to +/-1 codes. Parameters
    mirror :class:`TrainConfig` one-to-one.
    """

    def __init__(self, *, epochs=10, batch_size=64, learning_rate=1e-4,
                 weight_decay=5e-4, lambda_pointwise=10.0, lambda_pairwise=1.0,
                 lambda_classwise=10.0, lambda_hash=1.0, epsilon=0.9, tau=1.0,
                 neg_count=10, margin=0.35, scale=10.0, bits=16, seed=0,
                 backbone="identity", backbone_channels=16, backbone_hidden=16,
                 scorer="dot", scorer_hidden=32, pair_similarity="per_dim",
                 classwise_form="softmax", hash_input="pooled",
                 disable_pointwise=False, disable_pairwise=False,
                 disable_classwise=False):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.lambda_pointwise = lambda_pointwise
        self.lambda_pairwise = lambda_pairwise
        self.lambda_classwise = lambda_classwise
        self.lambda_hash = lambda_hash
        self.epsilon = epsilon
        self.tau = tau
        self.neg_count = neg_count
        self.margin = margin
        self.scale = scale
        self.bits = bits
        self.seed = seed
        self.backbone = backbone
        self.backbone_channels = backbone_channels
        self.backbone_hidden = backbone_hidden
        self.scorer = scorer
        self.scorer_hidden = scorer_hidden
        self.pair_similarity = pair_similarity
        self.classwise_form = classwise_form
        self.hash_input = hash_input
        self.disable_pointwise = disable_pointwise
        self.disable_pairwise = disable_pairwise
        self.disable_classwise = disable_classwise

    # -- config plumbing ---------------------------------------------------
    def config(self):
        return TrainConfig(
            **{name: getattr(self, name) for name in TrainConfig.field_names()}
        ).validate()

    @classmethod
    def from_config(cls, config):
        return cls(**config.to_mapping())

    # -- training ------------------------------------------------------------
    def fit(self, dataset, y=None, batch_hook=None):
        """Run the full training loop on the dataset's seen-class samples.

        batch_hook, when given, is called as batch_hook(epoch, sample_indices)
        with the dataset-level indices of every batch that contributes a
        gradient step (an instrumentation point for the zero-shot contract).
        """
        if not isinstance(dataset, AttributedDataset):
            raise TypeError("fit expects an AttributedDataset")
        cfg = self.config()
        seen = sorted(dataset.split.seen)
        if not seen:
            raise ValueError("training requires at least one seen class")

        torch.manual_seed(cfg.seed)
        torch.set_num_threads(1)
        dtype = torch.float64

        train_idx = dataset.indices_of(seen)
        if train_idx.size == 0:
            raise ValueError("no samples belong to a seen class")
        labels = dataset.labels[train_idx]
        seen_position = {c: i for i, c in enumerate(seen)}
        x = torch.from_numpy(dataset.samples[train_idx].astype(np.float64))
        true_attrs = torch.from_numpy(
            dataset.class_attributes[labels].astype(np.float64)
        )
        targets = torch.from_numpy(
            np.asarray([seen_position[int(c)] for c in labels], dtype=np.int64)
        )
        seen_attrs = torch.from_numpy(dataset.class_attributes[seen].astype(np.float64))

        net = ComaeNetwork(
            cfg,
            in_channels=dataset.channels,
            num_attributes=dataset.num_attributes,
            num_seen=len(seen),
            height=dataset.height,
            width=dataset.width,
            dtype=dtype,
        )
        pair_sets = None
        if cfg.enabled("pairwise"):
            pair_sets = build_pair_sets(
                dataset.class_attributes[labels], cfg.epsilon, cfg.neg_count, cfg.seed
            )
        optimizer = torch.optim.AdamW(
            net.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
        )
        shuffle_rng = np.random.default_rng(cfg.seed)

        n = train_idx.size
        trace = np.zeros((cfg.epochs, 1 + len(LOSS_COLUMNS)))
        for epoch in range(cfg.epochs):
            with torch.no_grad():
                row = self._loss_row(net, cfg, x, true_attrs, targets, seen_attrs, pair_sets)
            for j, value in enumerate(row):
                if not math.isfinite(value):
                    raise NonFiniteLossError(("epoch-eval " + LOSS_COLUMNS[j]), epoch)
            trace[epoch] = (epoch, *row)

            order = shuffle_rng.permutation(n)
            for batch_no, start in enumerate(range(0, n, cfg.batch_size)):
                batch = order[start : start + cfg.batch_size]
                if batch_hook is not None:
                    batch_hook(epoch, train_idx[batch])
                subset = batch if cfg.enabled("pairwise") else None
                losses = net.component_losses(
                    x[batch], true_attrs[batch], targets[batch], seen_attrs,
                    pair_sets=pair_sets, subset=subset,
                )
                values, weights = [], []
                for name, lam in zip(COMPONENTS, cfg.lambdas):
                    if losses[name] is None:
                        continue
                    if not torch.isfinite(losses[name]):
                        raise NonFiniteLossError(name, epoch, batch_no)
                    values.append(losses[name])
                    weights.append(lam)
                joint = total_loss(values, weights)
                optimizer.zero_grad()
                joint.backward()
                optimizer.step()
                net.renormalize_centers()

        self.network_ = net
        self.seen_classes_ = tuple(seen)
        self.num_attributes_ = dataset.num_attributes
        self.in_channels_ = dataset.channels
        self.input_shape_ = (dataset.height, dataset.width, dataset.channels)
        self.loss_trace_ = trace
        self.final_epoch_ = cfg.epochs
        self.rng_state_ = {
            "numpy": shuffle_rng.bit_generator.state,
            "torch": torch.get_rng_state().numpy().copy(),
        }
        return self

    @staticmethod
    def _loss_row(net, cfg, x, true_attrs, targets, seen_attrs, pair_sets):
        losses = net.component_losses(
            x, true_attrs, targets, seen_attrs, pair_sets=pair_sets, subset=None
        )
        values = [0.0 if losses[n] is None else float(losses[n]) for n in COMPONENTS]
        joint = sum(
            lam * v
            for lam, v, n in zip(cfg.lambdas, values, COMPONENTS)
            if losses[n] is not None
        )
        return (*values, joint)

    # -- inference --------------------------------------------------------
    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise RuntimeError("this estimator is not fitted yet; call fit() first")

    def transform(self, samples):
        """Map sample tensors (n, h, w, c) to an (n, bits) int8 matrix of +/-1."""
        self._check_fitted()
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim == 3:
            samples = samples[None]
        if samples.ndim != 4 or samples.shape[3] != self.in_channels_:
            raise ValueError(
                f"expected samples shaped (n, h, w, {self.in_channels_}),"
                f" got {samples.shape}"
            )
        if samples.shape[0] == 0:
            return np.zeros((0, self.config().bits), dtype=np.int8)
        with torch.no_grad():
            codes = self.network_.encode(torch.from_numpy(samples))
        return codes.numpy().astype(np.int8)

    def fit_transform(self, dataset, y=None):
        return self.fit(dataset).transform(dataset.samples)

    def encode_database(self, dataset, indices=None):
        """Inference-mode codes for a dataset subset, tagged with labels."""
        self._check_fitted()
        if indices is None:
            indices = np.arange(dataset.num_samples)
        indices = np.asarray(indices, dtype=np.int64)
        codes = self.transform(dataset.samples[indices])
        return CodeDatabase.from_codes(codes, dataset.labels[indices], bits=self.config().bits)

    # -- checkpointing -----------------------------------------------------
    def to_checkpoint(self):
        self._check_fitted()
        params = {
            name: tensor.detach().numpy().copy()
            for name, tensor in self.network_.state_dict().items()
        }
        height, width, _ = self.input_shape_
        meta = {
            "seen_classes": list(self.seen_classes_),
            "num_attributes": self.num_attributes_,
            "in_channels": self.in_channels_,
            "height": height,
            "width": width,
        }
        return Checkpoint(
            parameters=params,
            config=self.config(),
            epoch=self.final_epoch_,
            rng_state=self.rng_state_,
            meta=meta,
        )

    def save(self, path):
        save_checkpoint(self.to_checkpoint(), path)

    @classmethod
    def from_checkpoint(cls, checkpoint):
        est = cls.from_config(checkpoint.config)
        meta = checkpoint.meta
        torch.manual_seed(checkpoint.config.seed)
        net = ComaeNetwork(
            checkpoint.config,
            in_channels=int(meta["in_channels"]),
            num_attributes=int(meta["num_attributes"]),
            num_seen=len(meta["seen_classes"]),
            height=int(meta["height"]),
            width=int(meta["width"]),
            dtype=torch.float64,
        )
        state = {
            name: torch.from_numpy(np.asarray(array)).to(torch.float64)
            for name, array in checkpoint.parameters.items()
        }
        net.load_state_dict(state)
        est.network_ = net
        est.seen_classes_ = tuple(int(c) for c in meta["seen_classes"])
        est.num_attributes_ = int(meta["num_attributes"])
        est.in_channels_ = int(meta["in_channels"])
        est.input_shape_ = (int(meta["height"]), int(meta["width"]), int(meta["in_channels"]))
        est.loss_trace_ = None
        est.final_epoch_ = checkpoint.epoch
        est.rng_state_ = checkpoint.rng_state
        return est

    @classmethod
    def load(cls, path):
        return cls.from_checkpoint(load_checkpoint(path))


def write_loss_trace(trace, path):
    """Serialize a loss trace as CSV with full-precision, reproducible floats."""
    lines = ["epoch," + ",".join(LOSS_COLUMNS)]
    for row in trace:
        lines.append(",".join([str(int(row[0]))] + [repr(float(v)) for v in row[1:]]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_loss_trace(path):
    lines = Path(path).read_text().splitlines()
    rows = [[float(tok) for tok in line.split(",")] for line in lines[1:] if line.strip()]
    return np.asarray(rows)
