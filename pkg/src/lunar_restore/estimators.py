"""scikit-learn compatible estimators wrapping the functional pipeline.

``UNetInpainter`` learns corrupted -> clean crops; ``StripeCorruptor`` learns
stripe templates from real striped crops and stamps them onto clean ones.
Both follow the usual ``get_params``/``set_params`` contract, so they can be
cloned, grid-searched and dropped into a ``Pipeline``.

Image collections are accepted as ``(h, w)``, ``(n, h, w)`` or
``(n, 1, h, w)`` arrays; outputs come back in the caller's layout.
"""

import hashlib

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .dataset import sample_seed
from .errors import NoStripesError, ValidationError
from .stripes import (
    DEFAULT_COL_FRAC_THRESH,
    DEFAULT_MAX_COVERAGE,
    DEFAULT_ZERO_THRESH,
    detect_stripes,
    extract_template,
    superimpose,
)
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train_arrays
from .unet import UNetConfig, check_params, forward
from .validation import as_image_batch, check_same_shape


def _restore_layout(batch, like):
    ndim = np.ndim(like)
    if ndim == 2:
        return batch[0, 0]
    if ndim == 3:
        return batch[:, 0]
    return batch


def pad_to_multiple(x, multiple):
    """Reflect-pad ``[N, C, H, W]`` at the bottom/right up to a multiple of ``multiple``."""
    h, w = x.shape[2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return x
    # reflection needs the pad to be smaller than the axis; fall back to edge mode
    mode = "reflect" if ph < h and pw < w else "edge"
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode)


class UNetInpainter(RegressorMixin, BaseEstimator):
    """U-Net trained with L2 loss to map stripe-corrupted crops to clean crops.

    Parameters mirror :class:`UNetConfig` and :class:`TrainConfig`. With
    ``composite=True`` (the default), :meth:`restore` keeps every unmasked
    pixel of the input and only fills masked ones from the network.
    """

    def __init__(
        self,
        depth=2,
        base_channels=8,
        learning_rate=1e-3,
        beta1=0.9,
        beta2=0.999,
        epsilon=1e-8,
        batch_size=4,
        epochs=10,
        seed=0,
        checkpoint_every=10,
        dtype="float64",
        masked_loss=False,
        composite=True,
        predict_batch_size=16,
    ):
        self.depth = depth
        self.base_channels = base_channels
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.checkpoint_every = checkpoint_every
        self.dtype = dtype
        self.masked_loss = masked_loss
        self.composite = composite
        self.predict_batch_size = predict_batch_size

    def _unet_config(self):
        return UNetConfig(depth=self.depth, base_channels=self.base_channels)

    def _train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            checkpoint_every=min(self.checkpoint_every, self.epochs),
            dtype=self.dtype,
            masked_loss=self.masked_loss,
        )

    @property
    def input_multiple(self):
        return 2**self.depth

    def fit(self, X, y, masks=None, validation_data=None, resume=None):
        """Train on corrupted ``X`` with clean targets ``y``.

        ``resume`` continues from a :class:`Checkpoint` until ``epochs``
        total epochs are complete.
        """
        Xb, yb = as_image_batch(X, "X"), as_image_batch(y, "y")
        check_same_shape(Xb, yb, ("X", "y"))
        mb = None if masks is None else as_image_batch(np.asarray(masks, dtype=np.float64), "masks")
        val = None
        if validation_data is not None:
            val = tuple(as_image_batch(v) for v in validation_data)
        cfg = self._unet_config()
        ckpt = train_arrays(Xb, yb, cfg, self._train_config(), masks=mb, val=val, resume=resume)
        self._set_state(ckpt)
        return self

    def _set_state(self, ckpt):
        self.checkpoint_ = ckpt
        self.params_ = ckpt.params
        self.config_ = ckpt.unet_config
        self.loss_history_ = list(ckpt.loss_history)
        self.n_epochs_ = ckpt.epoch

    @classmethod
    def from_checkpoint(cls, ckpt, **overrides):
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        tc, uc = ckpt.train_config, ckpt.unet_config
        kwargs = dict(
            depth=uc.depth,
            base_channels=uc.base_channels,
            learning_rate=tc.learning_rate,
            beta1=tc.beta1,
            beta2=tc.beta2,
            epsilon=tc.epsilon,
            batch_size=tc.batch_size,
            epochs=tc.epochs,
            seed=tc.seed,
            checkpoint_every=tc.checkpoint_every,
            dtype=tc.dtype,
            masked_loss=tc.masked_loss,
        )
        kwargs.update(overrides)
        est = cls(**kwargs)
        check_params(ckpt.params, uc)
        est._set_state(ckpt)
        return est

    @classmethod
    def load(cls, path, **overrides):
        return cls.from_checkpoint(load_checkpoint(path), **overrides)

    def save(self, path):
        check_is_fitted(self, "params_")
        save_checkpoint(self.checkpoint_, path)

    def _predict_batch(self, Xb):
        check_is_fitted(self, "params_")
        h, w = Xb.shape[2:]
        padded = pad_to_multiple(Xb, self.config_.input_multiple)
        out = np.empty(padded.shape, dtype=np.float64)
        step = max(1, int(self.predict_batch_size))
        for s in range(0, len(padded), step):
            out[s : s + step] = forward(self.params_, self.config_, padded[s : s + step])
        return out[:, :, :h, :w]

    def restore_batch(self, Xb):
        """Raw prediction for a validated ``[N, 1, H, W]`` batch (restorer protocol)."""
        return self._predict_batch(Xb)

    @property
    def checkpoint_id(self):
        """Content hash of the fitted weights."""
        check_is_fitted(self, "params_")
        h = hashlib.sha256()
        for name, arr in self.params_.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def predict(self, X):
        """Raw network output (no compositing), same layout as ``X``."""
        return _restore_layout(self._predict_batch(as_image_batch(X)), X)

    def restore(self, X, masks):
        """Fill masked pixels of ``X`` (composited unless ``composite=False``)."""
        from .restorer import restore_batch

        Xb = as_image_batch(X)
        mb = as_image_batch(np.asarray(masks, dtype=np.float64), "masks").astype(bool)
        check_same_shape(Xb, mb, ("X", "masks"))
        return _restore_layout(restore_batch(self, Xb, mb, self.composite), X)

    def score(self, X, y, masks=None, sample_weight=None):
        """Mean PSNR (dB) of restorations against ``y``; higher is better."""
        from .evaluator import psnr

        pred = self.predict(X) if masks is None else self.restore(X, masks)
        pb, yb = as_image_batch(pred), as_image_batch(y)
        vals = np.array([psnr(t[0], p[0]) for t, p in zip(yb, pb)])
        return float(np.average(vals, weights=sample_weight))


class StripeCorruptor(TransformerMixin, BaseEstimator):
    """Learn stripe templates from striped crops; corrupt clean crops with them.

    ``fit`` runs stripe detection on every image of ``X`` and keeps one
    template per image where stripes were found (ignored when ``templates``
    is given). ``transform`` stamps a seeded random template at a seeded
    random column onto each image; image ``i`` uses seed
    ``sample_seed(seed, i)``.
    """

    def __init__(
        self,
        templates=None,
        seed=0,
        zero_thresh=DEFAULT_ZERO_THRESH,
        col_frac_thresh=DEFAULT_COL_FRAC_THRESH,
        max_coverage=DEFAULT_MAX_COVERAGE,
    ):
        self.templates = templates
        self.seed = seed
        self.zero_thresh = zero_thresh
        self.col_frac_thresh = col_frac_thresh
        self.max_coverage = max_coverage

    def fit(self, X=None, y=None):
        if self.templates is not None:
            self.templates_ = list(self.templates)
        else:
            if X is None:
                raise ValidationError("StripeCorruptor.fit needs striped images or explicit templates")
            self.templates_ = []
            for img in as_image_batch(X)[:, 0]:
                mask = detect_stripes(img, self.zero_thresh, self.col_frac_thresh)
                try:
                    self.templates_.append(extract_template(mask))
                except NoStripesError:
                    continue
        if not self.templates_:
            raise NoStripesError("no stripes found in any training image")
        return self

    def corrupt(self, X):
        """Return ``(corrupted, masks)`` in the layout of ``X``."""
        check_is_fitted(self, "templates_")
        Xb = as_image_batch(X)
        corrupted = np.empty_like(Xb)
        masks = np.zeros(Xb.shape, dtype=bool)
        for i, img in enumerate(Xb[:, 0]):
            s = sample_seed(int(self.seed), i)
            t = self.templates_[int(np.random.default_rng(s).integers(len(self.templates_)))]
            corrupted[i, 0], masks[i, 0] = superimpose(img, t, s, self.max_coverage)
        return _restore_layout(corrupted, X), _restore_layout(masks, X)

    def transform(self, X):
        return self.corrupt(X)[0]


class IdentityModel:
    """Stub model returning its input; composited restorations equal the input."""

    input_multiple = 1
    checkpoint_id = "stub:identity"

    def restore_batch(self, Xb):
        return Xb.copy()


class ConstantModel:
    """Stub model predicting one constant intensity everywhere."""

    input_multiple = 1

    def __init__(self, value=0.5):
        self.value = float(value)
        self.checkpoint_id = f"stub:constant:{self.value!r}"

    def restore_batch(self, Xb):
        return np.full(Xb.shape, self.value)


__all__ = [
    "ConstantModel",
    "IdentityModel",
    "NotFittedError",
    "StripeCorruptor",
    "UNetInpainter",
    "pad_to_multiple",
]
