"""Score test for cluster-specific trend effects.

Fits the model without the trend-interaction columns (unweighted, full
iterative procedure), then asks whether the score of the excluded block,
evaluated at the restricted estimate, is larger than chance. Under the
null of no trend effects the statistic is asymptotically chi-squared
with one degree of freedom per cluster. Only the restricted model is
ever fitted, so the test stays cheap even when the full model would be
expensive or unstable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.stats import chi2

from .covariance import CovarianceParams
from .design import DesignMatrix
from .errors import DomainError, RankError
from .estimation import FittedModel, fit
from .panel import WeeklyPanel


@dataclass(frozen=True)
class LMTestResult:
    statistic: float
    df: int
    p_value: float
    level: float
    reject: bool
    restricted: FittedModel

    def to_dict(self) -> dict:
        return {
            "statistic": float(self.statistic),
            "df": int(self.df),
            "p_value": float(self.p_value),
            "level": float(self.level),
            "reject": bool(self.reject),
            "restricted_converged": bool(self.restricted.converged),
            "restricted_sigma2": float(self.restricted.sigma2),
        }


def lm_test(
    panel: WeeklyPanel,
    design: DesignMatrix,
    params: CovarianceParams,
    level: float = 0.05,
    tol: float = 1e-6,
    max_iter: int = 100,
    engine: str | None = None,
) -> LMTestResult:
    """Lagrange multiplier test of the trend-interaction block."""
    if not (0 < level < 1):
        raise DomainError(f"test level must be in (0, 1), got {level}")
    X_delta = design.restricted
    X_gamma = design.interaction
    K = X_gamma.shape[1]
    if K == 0:
        raise DomainError("design has no interaction columns to test")

    restricted = fit(
        panel,
        X_delta,
        params,
        weights=None,
        labels=design.labels[: X_delta.shape[1]],
        tol=tol,
        max_iter=max_iter,
        engine=engine,
    )
    sigma2 = restricted.sigma2
    resid = restricted.resid
    blocks = restricted.blocks

    if sigma2 == 0.0:
        # Perfect fit of the restricted model: nothing left to explain.
        return LMTestResult(0.0, K, 1.0, level, False, restricted)

    Sg = blocks.solve(X_gamma)
    Sd = blocks.solve(X_delta)
    A_gg = X_gamma.T @ Sg
    A_gd = X_gamma.T @ Sd
    A_dd = X_delta.T @ Sd
    score = Sg.T @ resid / sigma2

    try:
        dd = scipy.linalg.cho_factor((A_dd + A_dd.T) / 2.0, check_finite=False)
        M = A_gg - A_gd @ scipy.linalg.cho_solve(dd, A_gd.T, check_finite=False)
        mfac = scipy.linalg.cho_factor((M + M.T) / 2.0, check_finite=False)
    except scipy.linalg.LinAlgError:
        raise RankError("score information matrix is singular") from None
    statistic = float(score @ scipy.linalg.cho_solve(mfac, score, check_finite=False) * sigma2)
    p_value = float(chi2.sf(statistic, K))
    return LMTestResult(
        statistic=statistic,
        df=K,
        p_value=p_value,
        level=level,
        reject=p_value < level,
        restricted=restricted,
    )


def write_lmtest_json(result: LMTestResult, path: str | Path) -> None:
    payload = result.to_dict()
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
