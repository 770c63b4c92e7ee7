"""scikit-learn compatible wrappers around the forecaster and the seasonal-naive baseline."""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dataflow import WindowSet
from .evalbench import seasonal_naive
from .fusion import DTSFormer, ModelConfig
from .numerics import as_tensor
from .training import TrainConfig, train


def check_windows(X, y=None, calendar=None):
    """Validate ``(N, m)`` histories, optional ``(N, n)`` targets and ``(N, m, 4)`` calendars."""
    X = check_array(X, dtype=np.float64, ensure_min_features=2)
    if y is not None:
        y = check_array(y, dtype=np.float64, ensure_2d=False)
        if y.ndim == 1:
            y = y[:, None]
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if calendar is not None:
        calendar = np.asarray(calendar, dtype=np.int64)
        if calendar.shape != (*X.shape, 4):
            raise ValueError(f"calendar must have shape {(*X.shape, 4)}, got {calendar.shape}")
    return X, y, calendar


def _window_set(X, y, calendar) -> WindowSet:
    return WindowSet(X, y, calendar, np.arange(len(X)))


class DTSFormerRegressor(RegressorMixin, BaseEstimator):
    """Multi-step forecaster over history windows.

    ``fit(X, y)`` takes histories ``X`` of shape ``(n_samples, m)`` and targets
    ``y`` of shape ``(n_samples, n)`` in the same (already normalized) units.
    Calendar fields per history step may be passed as ``calendar`` with shape
    ``(n_samples, m, 4)``; without them the temporal embedding is left out.
    ``eval_set=(X_val, y_val[, calendar_val])`` drives early stopping; when it is
    omitted the chronologically last ``validation_fraction`` of the rows is held out.
    """

    def __init__(
        self,
        scales: int = 3,
        d_model: int = 16,
        d_k: int = 0,
        heads: int = 8,
        threshold: float = 0.6,
        e_layers: int = 4,
        d_ff: int = 256,
        variant: str = "FULL",
        fixed_patch_length: int = 6,
        learning_rate: float = 1e-3,
        batch_size: int = 64,
        patience: int = 40,
        max_epochs: int = 200,
        validation_fraction: float = 0.1,
        random_state: int = 0,
    ):
        self.scales = scales
        self.d_model = d_model
        self.d_k = d_k
        self.heads = heads
        self.threshold = threshold
        self.e_layers = e_layers
        self.d_ff = d_ff
        self.variant = variant
        self.fixed_patch_length = fixed_patch_length
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.patience = patience
        self.max_epochs = max_epochs
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _model_config(self, m: int, n: int) -> ModelConfig:
        return ModelConfig(
            input_len=m, horizon=n, scales=self.scales, d_model=self.d_model, d_k=self.d_k,
            heads=self.heads, threshold=self.threshold, e_layers=self.e_layers, d_ff=self.d_ff,
            variant=self.variant, fixed_patch_length=self.fixed_patch_length, seed=self.random_state,
        )

    def fit(self, X, y, calendar=None, eval_set: Optional[tuple] = None):
        X, y, calendar = check_windows(X, y, calendar)
        if eval_set is None:
            cut = len(X) - max(1, int(round(self.validation_fraction * len(X))))
            if cut < 1:
                raise ValueError("not enough rows to hold out a validation split")
            sl_tr, sl_va = slice(0, cut), slice(cut, None)
            train_set = _window_set(X[sl_tr], y[sl_tr], None if calendar is None else calendar[sl_tr])
            val_set = _window_set(X[sl_va], y[sl_va], None if calendar is None else calendar[sl_va])
        else:
            Xv, yv, cv = check_windows(*eval_set) if len(eval_set) == 3 else check_windows(*eval_set, None)
            if (cv is None) != (calendar is None):
                raise ValueError("pass calendars for both the training rows and eval_set, or for neither")
            train_set = _window_set(X, y, calendar)
            val_set = _window_set(Xv, yv, cv)
        self.uses_calendar_ = calendar is not None
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = y.shape[1]
        model = DTSFormer(self._model_config(X.shape[1], y.shape[1]))
        cfg = TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            patience=min(self.patience, self.max_epochs), max_epochs=self.max_epochs, seed=self.random_state,
        )
        self.model_, self.history_ = train(model, train_set, val_set, cfg)
        return self

    def predict(self, X, calendar=None):
        check_is_fitted(self, "model_")
        X, _, calendar = check_windows(X, None, calendar)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} steps, the model expects {self.n_features_in_}")
        if not self.uses_calendar_:
            calendar = None
        self.model_.eval()
        with torch.no_grad():
            out = self.model_(as_tensor(X), calendar).numpy()
        return out


class SeasonalNaiveForecaster(RegressorMixin, BaseEstimator):
    """Repeat the value one ``period`` earlier for each of the ``n`` output steps."""

    def __init__(self, period: int = 48, horizon: Optional[int] = None):
        self.period = period
        self.horizon = horizon

    def fit(self, X, y=None):
        X, y, _ = check_windows(X, y)
        if X.shape[1] < self.period:
            raise ValueError(f"histories of {X.shape[1]} steps are shorter than the period {self.period}")
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = self.horizon or (y.shape[1] if y is not None else 1)
        return self

    def predict(self, X):
        check_is_fitted(self, "n_outputs_")
        X, _, _ = check_windows(X)
        return seasonal_naive(X, self.n_outputs_, self.period)
