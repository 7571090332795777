"""scikit-learn compatible classifier that trains a layer graph end to end."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .analysis import record_trajectories
from .config import RunConfig
from .data import Dataset, batches, load_dataset, normalize
from .errors import EmptyDataset, ShapeMismatch
from .layers import loss as loss_fn
from .networks import LayerGraph, build_from_meta, build_mini_resnet, build_mini_vanillanet
from .optim import Adam, EarlyStopping, SGD, cosine_lr
from .series import BlendedActivation
from .tensor import Tensor
from .validation import check_images, check_images_labels

_CONFIG_PARAMS = (
    "arch", "depth", "width", "blocks", "n_terms", "base", "insertion", "lslu_mask", "blend",
    "dropout", "head", "stem_stride", "optimizer", "lr", "lr_min", "schedule", "momentum", "adam_beta1", "adam_beta2",
    "adam_eps", "epochs", "batch_size", "loss", "patience", "eval_batch_size", "seed", "dtype",
)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class LSLUClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier built from a mini-VanillaNet or mini-ResNet graph.

    ``X`` is an ``(n_samples, C, H, W)`` array.  Inputs are standardized with
    per-channel statistics of the training set (kept as ``mean_``/``std_``).

    Fitted attributes: ``graph_``, ``classes_``, ``mean_``, ``std_``,
    ``history_`` (one dict per epoch: epoch, train_loss, val_acc, lr) and
    ``trajectories_`` (series-activation parameter records, epoch 0 = init).
    """

    def __init__(
        self,
        arch="mini-vanillanet",
        depth=5,
        width=32,
        blocks=(1, 1),
        n_terms=3,
        base="relu",
        insertion="full",
        lslu_mask=None,
        blend=False,
        dropout=0.0,
        head="gap",
        stem_stride=1,
        optimizer="adam",
        lr=1e-3,
        lr_min=0.0,
        schedule="cosine",
        momentum=0.9,
        adam_beta1=0.9,
        adam_beta2=0.999,
        adam_eps=1e-8,
        epochs=10,
        batch_size=64,
        loss="cross_entropy",
        patience=None,
        eval_batch_size=256,
        seed=0,
        dtype="float32",
    ):
        self.arch = arch
        self.depth = depth
        self.width = width
        self.blocks = blocks
        self.n_terms = n_terms
        self.base = base
        self.insertion = insertion
        self.lslu_mask = lslu_mask
        self.blend = blend
        self.dropout = dropout
        self.head = head
        self.stem_stride = stem_stride
        self.optimizer = optimizer
        self.lr = lr
        self.lr_min = lr_min
        self.schedule = schedule
        self.momentum = momentum
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.adam_eps = adam_eps
        self.epochs = epochs
        self.batch_size = batch_size
        self.loss = loss
        self.patience = patience
        self.eval_batch_size = eval_batch_size
        self.seed = seed
        self.dtype = dtype

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "LSLUClassifier":
        return cls(**{k: getattr(cfg, k) for k in _CONFIG_PARAMS})

    def _run_config(self) -> RunConfig:
        params = {k: getattr(self, k) for k in _CONFIG_PARAMS}
        params["blocks"] = list(params["blocks"])
        return RunConfig(**params)

    # -- construction ---------------------------------------------------------------
    def build_graph(self, in_shape: tuple, n_classes: int, rng: np.random.Generator) -> LayerGraph:
        c, h, w = in_shape
        if h != w:
            raise ShapeMismatch(f"square inputs required, got {h}x{w}")
        dtype = np.dtype(self._run_config().dtype)
        if self.arch == "mini-vanillanet":
            return build_mini_vanillanet(
                self.depth, self.width, self.n_terms, self.base, self.dropout,
                in_channels=c, input_size=h, n_classes=n_classes, blend=self.blend, head=self.head, dtype=dtype, rng=rng,
            )
        return build_mini_resnet(
            self.blocks, self.width, self.n_terms, self.base, self.insertion, self.lslu_mask, self.dropout,
            in_channels=c, input_size=h, n_classes=n_classes, head=self.head, stem_stride=self.stem_stride,
            dtype=dtype, rng=rng,
        )

    # -- training ----------------------------------------------------------------------
    def fit(self, X, y, X_val=None, y_val=None, epoch_callback: Optional[Callable] = None, run_id: str = "run"):
        """Train for ``epochs`` epochs (or until early stopping on validation accuracy).

        Validation accuracy is measured on ``(X_val, y_val)`` when given,
        otherwise on the training set.  ``epoch_callback(self, epoch, row)`` runs
        after every epoch, including a call for epoch 0 before any update.
        """
        cfg = self._run_config()
        X, y = check_images_labels(X, y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        if X_val is None:
            X_val, yv_enc = X, y_enc
        else:
            X_val, y_val = check_images_labels(X_val, y_val)
            yv_enc = self._encode(y_val)
        dtype = cfg.np_dtype
        x64 = X.astype(np.float64)
        self.mean_ = x64.mean(axis=(0, 2, 3))
        std = x64.std(axis=(0, 2, 3))
        self.std_ = np.where(std == 0, 1.0, std)
        Xn = normalize(X, self.mean_, self.std_, dtype)
        Xv = normalize(X_val, self.mean_, self.std_, dtype)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_shape_ = tuple(X.shape[1:])

        seeds = cfg.seeds()
        g = self.build_graph(self.input_shape_, len(self.classes_), np.random.default_rng(seeds["init"]))
        self.graph_ = g
        drop_rng = np.random.default_rng(seeds["dropout"])
        params = g.parameters()
        if self.optimizer == "adam":
            opt = Adam(params, self.lr, self.adam_beta1, self.adam_beta2, self.adam_eps)
        else:
            opt = SGD(params, self.lr, self.momentum)
        stopper = EarlyStopping(self.patience) if self.patience else None
        blends = [n for n in g.walk() if isinstance(n, BlendedActivation)]

        self.history_ = []
        self.trajectories_ = []
        self._log_trajectories(0, run_id)
        if epoch_callback is not None:
            epoch_callback(self, 0, None)
        train_ds = Dataset(Xn, y_enc, len(self.classes_))
        for epoch in range(self.epochs):
            lr = cosine_lr(epoch, self.epochs, self.lr, self.lr_min) if self.schedule == "cosine" else self.lr
            opt.lr = lr
            for node in blends:
                # 1-based epoch ratio, so the final epoch trains with the identity
                node.lam = (epoch + 1) / self.epochs
            g.train()
            total, seen = 0.0, 0
            for xb, yb in batches(train_ds, self.batch_size, seeds["shuffle"], epoch):
                if len(yb) < 2:
                    # batch norm needs two samples per channel; skip a trailing singleton
                    continue
                out = g.forward(Tensor(xb, dtype=dtype), drop_rng)
                loss = loss_fn(self.loss, out, yb)
                loss.backward()
                opt.step()
                opt.zero_grad()
                total += loss.item() * len(yb)
                seen += len(yb)
            g.eval()
            val_acc = float(np.mean(self._predict_encoded(Xv) == yv_enc))
            row = {"epoch": epoch + 1, "train_loss": total / max(seen, 1), "val_acc": val_acc, "lr": lr}
            self.history_.append(row)
            self._log_trajectories(epoch + 1, run_id)
            if epoch_callback is not None:
                epoch_callback(self, epoch + 1, row)
            if stopper is not None and stopper.update(val_acc):
                break
        g.eval()
        return self

    def _log_trajectories(self, epoch: int, run_id: str) -> None:
        if self.graph_.lslu_layers():
            self.trajectories_.extend(record_trajectories(self.graph_, epoch, run_id))

    def _encode(self, y) -> np.ndarray:
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == y):
            raise ValueError("labels contain classes unseen during fit")
        return idx

    # -- inference -----------------------------------------------------------------------
    def _prepare(self, X) -> np.ndarray:
        check_is_fitted(self, "graph_")
        X = check_images(X)
        if tuple(X.shape[1:]) != self.input_shape_:
            raise ShapeMismatch(f"expected samples of shape {self.input_shape_}, got {X.shape[1:]}")
        return normalize(X, self.mean_, self.std_, self.graph_.dtype)

    def _predict_encoded(self, Xn: np.ndarray) -> np.ndarray:
        return self.graph_.predict_logits(Xn, self.eval_batch_size).argmax(axis=1)

    def decision_function(self, X) -> np.ndarray:
        self.graph_.eval()
        return self.graph_.predict_logits(self._prepare(X), self.eval_batch_size)

    def predict_proba(self, X) -> np.ndarray:
        """Softmax probabilities; per-class sigmoids for ``loss='bce_with_logits'``."""
        z = self.decision_function(X).astype(np.float64)
        if self.loss == "bce_with_logits":
            return 1.0 / (1.0 + np.exp(-z))
        return _softmax(z)

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def evaluate(self, X, y) -> dict:
        """Top-1 accuracy, per-class accuracy and mean loss."""
        X, y = check_images_labels(X, y)
        if len(y) == 0:
            raise EmptyDataset("cannot evaluate on an empty dataset")
        z = self.decision_function(X)
        y_enc = self._encode(y)
        pred = z.argmax(axis=1)
        with T.no_grad():
            loss_value = loss_fn(self.loss, Tensor(z), y_enc).item()
        per_class = {}
        for k, cls in enumerate(self.classes_):
            mask = y_enc == k
            if mask.any():
                per_class[cls.item() if hasattr(cls, "item") else cls] = float(np.mean(pred[mask] == k))
        return {"top1": float(np.mean(pred == y_enc)), "per_class": per_class, "loss": float(loss_value), "n": int(len(y))}

    # -- persistence ------------------------------------------------------------------------
    def checkpoint_tensors(self) -> dict:
        check_is_fitted(self, "graph_")
        tensors = dict(self.graph_.state_dict())
        tensors["norm.mean"] = np.asarray(self.mean_, dtype=np.float64)
        tensors["norm.std"] = np.asarray(self.std_, dtype=np.float64)
        tensors["classes"] = np.asarray(self.classes_, dtype=np.int64)
        return tensors

    def checkpoint_meta(self, **extra) -> dict:
        cfg = self._run_config()
        meta = {
            "format": "lslu-classifier",
            "graph": self.graph_.meta,
            "input_shape": list(self.input_shape_),
            "estimator": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()},
            "config_hash": cfg.hash(),
            "epochs_run": len(self.history_),
        }
        meta.update(extra)
        return meta

    @classmethod
    def from_checkpoint(cls, ckpt) -> "LSLUClassifier":
        meta = ckpt.meta
        clf = cls(**meta["estimator"])
        dtype = np.dtype(clf._run_config().dtype)
        graph = build_from_meta(meta["graph"], dtype=dtype)
        tensors = dict(ckpt.tensors)
        clf.mean_ = tensors.pop("norm.mean")
        clf.std_ = tensors.pop("norm.std")
        clf.classes_ = tensors.pop("classes")
        graph.load_state_dict(tensors)
        graph.eval()
        clf.graph_ = graph
        clf.input_shape_ = tuple(meta["input_shape"])
        clf.n_features_in_ = int(np.prod(clf.input_shape_))
        clf.history_, clf.trajectories_ = [], []
        return clf


def load_split(cfg: RunConfig) -> tuple:
    """(train, test) datasets named by a run config, with optional subsetting."""
    synthetic = dict(
        n_classes=cfg.synthetic_classes,
        n_per_class=cfg.synthetic_per_class,
        channels=cfg.synthetic_channels,
        height=cfg.synthetic_size,
        width=cfg.synthetic_size,
        seed=cfg.seed,
        noise=cfg.synthetic_noise,
    )
    kw = synthetic if cfg.dataset == "synthetic" else {}
    train = load_dataset(cfg.dataset, cfg.data_dir, "train", **kw)
    test = load_dataset(cfg.dataset, cfg.data_dir, "test", **kw)
    return train.subset(cfg.train_subset, cfg.seed), test.subset(cfg.test_subset, cfg.seed)
