"""Run configuration: a flat JSON object mirroring the training-settings table.

Unknown keys are rejected.  Every key has a default; see ``RunConfig`` for the
schema.  The config hash (sha256 of the canonical JSON) is stored in
checkpoints.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidConfig
from .layers import ActivationKind


@dataclass
class RunConfig:
    run_id: str = "run"
    out: Optional[str] = None
    seed: int = 0
    dtype: str = "float32"
    # architecture
    arch: str = "mini-vanillanet"
    depth: int = 5
    width: int = 32
    blocks: list = field(default_factory=lambda: [1, 1])
    n_terms: int = 3
    base: str = "relu"
    insertion: str = "full"
    lslu_mask: Optional[list] = None
    blend: bool = False
    dropout: float = 0.0
    head: str = "gap"
    stem_stride: int = 1
    # data
    dataset: str = "synthetic"
    data_dir: Optional[str] = None
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None
    synthetic_classes: int = 2
    synthetic_per_class: int = 100
    synthetic_channels: int = 1
    synthetic_size: int = 16
    synthetic_noise: float = 0.05
    # optimization
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_min: float = 0.0
    schedule: str = "cosine"
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 64
    loss: str = "cross_entropy"
    patience: Optional[int] = None
    eval_batch_size: int = 256

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(msg):
            raise InvalidConfig(msg)

        if self.dtype in ("f32",):
            self.dtype = "float32"
        if self.dtype in ("f64",):
            self.dtype = "float64"
        if self.insertion == "downsampling_only":
            self.insertion = "downsampling"
        if self.dtype not in ("float32", "float64"):
            bad(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.arch not in ("mini-vanillanet", "mini-resnet"):
            bad(f"unknown arch {self.arch!r}")
        if self.insertion not in ("full", "downsampling"):
            bad(f"unknown insertion mode {self.insertion!r}")
        if self.head not in ("gap", "flatten"):
            bad(f"unknown head {self.head!r}")
        if self.stem_stride < 1:
            bad("stem_stride must be >= 1")
        if self.dataset not in ("cifar10", "mnist", "folder", "synthetic"):
            bad(f"unknown dataset {self.dataset!r}")
        if self.optimizer not in ("adam", "sgd"):
            bad(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            bad(f"unknown schedule {self.schedule!r}")
        if self.loss not in ("cross_entropy", "bce_with_logits"):
            bad(f"unknown loss {self.loss!r}")
        if self.lr <= 0:
            bad("lr must be > 0")
        if self.epochs < 1:
            bad("epochs must be >= 1")
        if self.batch_size < 1:
            bad("batch_size must be >= 1")
        if not 0 <= self.dropout < 1:
            bad("dropout must lie in [0, 1)")
        if self.n_terms < 0:
            bad("n_terms must be >= 0")
        if self.patience is not None and self.patience < 1:
            bad("patience must be >= 1")
        try:
            ActivationKind.parse(self.base)
        except ValueError as exc:
            raise InvalidConfig(str(exc)) from exc

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def out_dir(self) -> Path:
        return Path(self.out) if self.out else Path("runs") / self.run_id

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise InvalidConfig(f"{path}: top level must be a JSON object")
        return cls.from_dict(data)

    def replace(self, **overrides) -> "RunConfig":
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **overrides)

    def seeds(self) -> dict:
        """Independent per-component seeds derived from the master seed.

        ``SeedSequence(seed).spawn(3)`` gives the init, dropout and shuffle
        streams in that order; each child is reduced to one uint32 seed.
        """
        children = np.random.SeedSequence(self.seed).spawn(3)
        init, drop, shuffle = (int(c.generate_state(1)[0]) for c in children)
        return {"init": init, "dropout": drop, "shuffle": shuffle}
