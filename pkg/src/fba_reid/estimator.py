"""scikit-learn style front end: ``FBAReID().fit(X, y).transform(X)``.

``X`` is anything :func:`check_reid_inputs` accepts: a :class:`ReIDData`, a
sequence of :class:`SampleRecord` together with ``root=``, or a mapping with
``images``, ``fg_tokens`` and ``bg_tokens`` (and optionally ``camids``).
"""

from __future__ import annotations

import copy
from typing import Any, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .config import Config, apply_overrides
from .evaluator import COMPOSITIONS, compose, forward_all, map_cmc, GallerySet
from .model import FBAModel
from .synthdata import ReIDData, SampleRecord, load_dataset, pad_tokens
from .trainer import train_model


def check_reid_inputs(X, y=None, max_len: int = 12, pad_id: int = 0, root=None) -> ReIDData:
    """Normalise supported input forms into a validated :class:`ReIDData`."""
    if isinstance(X, ReIDData):
        data = X
    elif isinstance(X, Mapping):
        missing = {"images", "fg_tokens", "bg_tokens"} - set(X)
        if missing:
            raise ValueError(f"input mapping lacks {sorted(missing)}")
        images = np.asarray(X["images"], dtype=np.float32)
        n = len(images)
        fg, bg = X["fg_tokens"], X["bg_tokens"]
        data = ReIDData(
            images=images,
            pids=np.asarray(X.get("pids", np.full(n, -1)), dtype=np.int64),
            camids=np.asarray(X.get("camids", np.full(n, -1)), dtype=np.int64),
            fg_tokens=np.asarray(fg, dtype=np.int64) if _is_padded(fg, max_len) else pad_tokens(fg, max_len, pad_id),
            bg_tokens=np.asarray(bg, dtype=np.int64) if _is_padded(bg, max_len) else pad_tokens(bg, max_len, pad_id),
        )
    elif isinstance(X, Sequence) and X and isinstance(X[0], SampleRecord):
        if root is None:
            raise ValueError("SampleRecord input needs root= (the manifest directory)")
        data = load_dataset(f"{root}/manifest.jsonl", max_len, pad_id, records=X)
    else:
        raise TypeError(f"unsupported input type {type(X).__name__}")

    if data.images.ndim != 4 or data.images.shape[-1] != 3:
        raise ValueError(f"images must be (n, H, W, 3), got {data.images.shape}")
    if not np.isfinite(data.images).all():
        raise ValueError("images contain non-finite values")
    n = len(data.images)
    for name in ("pids", "camids", "fg_tokens", "bg_tokens"):
        if len(getattr(data, name)) != n:
            raise ValueError(f"{name} has {len(getattr(data, name))} rows, images have {n}")
    if y is not None:
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (n,):
            raise ValueError(f"y must have shape ({n},), got {y.shape}")
        data = ReIDData(data.images, y, data.camids, data.fg_tokens, data.bg_tokens)
    return data


def _is_padded(tokens, max_len: int) -> bool:
    arr = np.asarray(tokens, dtype=object)
    return arr.ndim == 2 and arr.shape[1] == max_len


class FBAReID(TransformerMixin, BaseEstimator):
    """Foreground/background adversarial ReID model behind fit/transform.

    Parameters
    ----------
    config : Config or dict, optional
        Full configuration; ``None`` uses the desk-scale defaults.
    overrides : sequence of str
        Dotted ``key=value`` overrides applied on top of ``config``.
    composition : {"backbone", "cross", "concat"}
        Which features form the retrieval embedding returned by ``transform``.
    random_state : int, optional
        Overrides ``train.seed`` when given.
    """

    def __init__(self, config=None, overrides: Sequence[str] = (), composition: str = "concat",
                 random_state: int | None = None):
        self.config = config
        self.overrides = overrides
        self.composition = composition
        self.random_state = random_state

    def _resolved_config(self) -> Config:
        if self.config is None:
            cfg = Config()
        elif isinstance(self.config, Config):
            cfg = copy.deepcopy(self.config)
        else:
            cfg = Config.from_dict(self.config)
        cfg = apply_overrides(cfg, self.overrides)
        if self.random_state is not None:
            cfg.train.seed = int(self.random_state)
        if self.composition not in COMPOSITIONS:
            raise ValueError(f"composition must be one of {COMPOSITIONS}")
        return cfg.validate()

    def fit(self, X, y=None, root=None):
        cfg = self._resolved_config()
        data = check_reid_inputs(X, y, cfg.encoder.max_text_len, cfg.encoder.pad_id, root)
        if (data.pids < 0).any():
            raise ValueError("fit needs person ids (pass y or include pids)")
        self.classes_ = np.unique(data.pids)
        label_map = {int(p): i for i, p in enumerate(self.classes_)}
        model = FBAModel.build(cfg, len(self.classes_), seed=cfg.train.seed)
        self.history_ = train_model(model, data, cfg, label_map)
        self.model_ = model
        self.config_ = cfg
        return self

    def _check(self):
        check_is_fitted(self, "model_")

    def transform(self, X, root=None) -> np.ndarray:
        """L2-normalised retrieval embeddings, one row per image."""
        self._check()
        cfg = self.config_
        data = check_reid_inputs(X, None, cfg.encoder.max_text_len, cfg.encoder.pad_id, root)
        feats = forward_all(self.model_, data, cross=self.composition != "backbone")
        return compose(feats, self.composition)

    def score(self, X, y=None, is_query=None, root=None) -> float:
        """mAP under the cross-camera protocol; ``is_query`` flags query rows."""
        self._check()
        cfg = self.config_
        data = check_reid_inputs(X, y, cfg.encoder.max_text_len, cfg.encoder.pad_id, root)
        if is_query is None:
            raise ValueError("score needs is_query flags")
        gallery = GallerySet(self.transform(data), data.pids, data.camids, np.asarray(is_query, bool))
        return map_cmc(gallery).mAP


__all__ = ["FBAReID", "check_reid_inputs", "NotFittedError"]
