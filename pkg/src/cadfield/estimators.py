"""scikit-learn style wrappers around retrieval and reconstruction."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evalkit import psnr
from .library import Library, load_library
from .retrieval import assigned_poses, retrieve
from .trainer import TrainConfig, desk_preset, run_full
from .validation import check_images, check_masks, check_positive_int


def _resolve_library(library):
    return library if isinstance(library, Library) else load_library(library)


class PoseRetriever(BaseEstimator):
    """Model vote plus order-constrained pose assignment.

    ``fit`` binds the library; ``predict`` maps ordered masks to a
    ``RetrievalResult``.
    """

    def __init__(self, library=None, k=10, max_discard=2):
        self.library = library
        self.k = k
        self.max_discard = max_discard

    def fit(self, X=None, y=None):
        check_positive_int(self.k, "k")
        self.library_ = _resolve_library(self.library)
        return self

    def predict(self, X):
        check_is_fitted(self, "library_")
        return retrieve(check_masks(X), self.library_, self.k, self.max_discard)

    def predict_poses(self, X):
        masks = check_masks(X)
        result = self.predict(masks)
        h, w = masks[0].shape
        return assigned_poses(result, self.library_, w, h)


class FieldReconstructor(BaseEstimator):
    """Full pipeline estimator: ``fit(images, masks)`` then ``predict(poses)`` renders."""

    def __init__(self, library=None, total_iters=2000, seed=0, config=None, k=10, max_discard=2):
        self.library = library
        self.total_iters = total_iters
        self.seed = seed
        self.config = config
        self.k = k
        self.max_discard = max_discard

    def _train_config(self):
        if isinstance(self.config, TrainConfig):
            return self.config.replace(seed=self.seed)
        overrides = dict(self.config or {})
        overrides.setdefault("seed", self.seed)
        return desk_preset(check_positive_int(self.total_iters, "total_iters"), **overrides)

    def fit(self, X, y):
        images = check_images(X)
        masks = check_masks(y, images.shape[1:3])
        if len(masks) != len(images):
            raise ValueError("need one mask per image")
        self.state_, self.report_ = run_full(images, masks, _resolve_library(self.library),
                                             self._train_config(), None, self.k, self.max_discard)
        self.poses_ = self.state_.current_poses()
        return self

    def predict(self, X):
        """Render each camera pose in ``X`` -> (N, H, W, 3)."""
        check_is_fitted(self, "state_")
        return np.stack([self.state_.render(pose)[0] for pose in X])

    def score(self, X, y):
        """Mean PSNR of renders at poses ``X`` against images ``y``."""
        images = check_images(y)
        return float(np.mean([psnr(r, t) for r, t in zip(self.predict(X), images)]))
