"""scikit-learn compatible estimators wrapping the solvers.

Features are used as given: no centering, scaling or intercept. Add a
constant column yourself if an intercept is needed.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.multiclass import check_classification_targets, type_of_target
from sklearn.utils.validation import check_is_fitted, validate_data

from .data import Dataset
from .losses import GlmLoss
from .regularizers import make_regularizer
from .solver import SolverConfig, prox_svrg_run, saga_run, sapphire_run

__all__ = ["SapphireClassifier", "SapphireRegressor"]

_SOLVERS = ("ssn", "nyssn", "proxsvrg", "saga")


class _SapphireBase(BaseEstimator):
    def __init__(
        self,
        penalty="l1",
        alpha=1e-3,
        ridge=0.0,
        penalty_param=None,
        solver="ssn",
        rank=50,
        b_g=None,
        b_h=None,
        max_passes=50,
        tol=0.0,
        random_state=0,
    ):
        self.penalty = penalty
        self.alpha = alpha
        self.ridge = ridge
        self.penalty_param = penalty_param
        self.solver = solver
        self.rank = rank
        self.b_g = b_g
        self.b_h = b_h
        self.max_passes = max_passes
        self.tol = tol
        self.random_state = random_state

    def _regularizer(self):
        kind = self.penalty.lower()
        if kind == "none":
            return make_regularizer("none")
        extra = {}
        if self.penalty_param is not None:
            if kind == "scad":
                extra["a"] = self.penalty_param
            elif kind == "mcp":
                extra["gamma"] = self.penalty_param
        return make_regularizer(kind, lam=self.alpha, **extra)

    def _solve(self, X, y, loss_kind, label_kind):
        if self.solver not in _SOLVERS:
            raise ValueError(f"solver must be one of {_SOLVERS}, got {self.solver!r}")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        seed = self.random_state if self.random_state is not None else 0
        ds = Dataset(sp.csr_matrix(X, dtype=np.float64), np.asarray(y, dtype=np.float64), label_kind)
        loss = GlmLoss(loss_kind, ds, float(self.ridge))
        cfg = SolverConfig(
            precond="nyssn" if self.solver == "nyssn" else "ssn",
            rank=self.rank,
            b_g=self.b_g,
            max_passes=self.max_passes,
            tol=self.tol,
            seed=int(seed),
        )
        b_h = self.b_h
        if b_h is None and self.solver in ("ssn", "nyssn"):
            # a sketch of about p samples is nearly singular; aim for twice that
            n, p = X.shape
            b_h = min(n, max(int(np.ceil(np.sqrt(n))), 2 * p))
        cfg = cfg.replace(b_h=b_h)
        run = {"proxsvrg": prox_svrg_run, "saga": saga_run}.get(self.solver, sapphire_run)
        res = run(loss, self._regularizer(), cfg)
        self.coef_ = res.w_final
        self.trace_ = res.trace
        self.termination_ = res.termination
        return self

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.sparse = True
        return tags

    def _decision(self, X):
        check_is_fitted(self)
        X = validate_data(self, X, accept_sparse="csr", dtype=np.float64, reset=False)
        return np.asarray(X @ self.coef_).ravel()


class SapphireRegressor(RegressorMixin, _SapphireBase):
    """Least squares with a sparse penalty.

    Minimizes ``(1/2n)||Xw - y||^2 + (ridge/2)||w||^2 + r(w)`` where ``r`` is
    ``penalty`` at strength ``alpha``.

    Attributes
    ----------
    coef_ : ndarray of shape (n_features,)
    trace_ : list of TraceRecord
        One record per stage.
    """

    def fit(self, X, y):
        X, y = validate_data(self, X, y, accept_sparse="csr", dtype=np.float64, y_numeric=True)
        return self._solve(X, y, "squared", "real")

    def predict(self, X):
        return self._decision(X)


class SapphireClassifier(ClassifierMixin, _SapphireBase):
    """Binary logistic regression with a sparse penalty.

    The larger of the two labels in ``classes_`` is the positive class.
    """

    def fit(self, X, y):
        X, y = validate_data(self, X, y, accept_sparse="csr", dtype=np.float64)
        check_classification_targets(y)
        self.classes_, yi = np.unique(y, return_inverse=True)
        if self.classes_.size == 1:
            raise ValueError("y contains only one class; a binary target is required")
        if self.classes_.size != 2:
            raise ValueError(
                f"Only binary classification is supported. The type of the target is {type_of_target(y)}."
            )
        return self._solve(X, np.where(yi == 1, 1.0, -1.0), "logistic", "binary")

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.classifier_tags.multi_class = False
        return tags

    def decision_function(self, X):
        return self._decision(X)

    def predict_proba(self, X):
        z = self._decision(X)
        p1 = 0.5 * (1.0 + np.tanh(0.5 * z))
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        z = self._decision(X)
        return self.classes_[(z > 0).astype(int)]
