"""Predictor objects plugged into ``lshaped.solve`` in ml mode.

A predictor exposes ``predict_Q(problem, x)`` and ``predict_relaxed(problem, x)``;
the latter returns ``lshaped.Reductions``.
"""
from __future__ import annotations

import numpy as np

from .families import features_for
from .lshaped import OraclePredictor, Reductions
from .surrogate import Network, forward

__all__ = ["NetworkPredictor", "OraclePredictor", "InflatedPredictor"]


class NetworkPredictor:
    """Wraps an integral-value network and/or a relaxed-value network.

    The relaxed network outputs ``(Qt, E[phi], E[1'psi])`` for families whose
    ``h`` and ``T`` do not vary with the scenario.
    """

    def __init__(self, value_net: Network | None = None, relaxed_net: Network | None = None):
        self.value_net = value_net
        self.relaxed_net = relaxed_net

    def predict_Q(self, problem, x) -> float:
        if self.value_net is None:
            raise RuntimeError("no integral-value network loaded")
        return float(forward(self.value_net, features_for(problem, x))[0])

    def predict_relaxed(self, problem, x) -> Reductions:
        if self.relaxed_net is None:
            raise RuntimeError("no relaxed-value network loaded")
        if not problem.deterministic_hT:
            raise ValueError("relaxed predictions need scenario-independent h and T")
        out = forward(self.relaxed_net, features_for(problem, x))
        s = problem.scenarios[0]
        m = len(s.h)
        if len(out) != m + 2:
            raise ValueError(f"relaxed network has {len(out)} outputs, expected {m + 2}")
        E_phi = out[1:1 + m]
        return Reductions(Q_tilde=float(out[0]), E_phi_h=float(E_phi @ s.h),
                          E_phi_T=E_phi @ s.T, E_one_psi=float(out[-1]), E_phi=E_phi)


class InflatedPredictor:
    """Scales the value predictions of ``base`` by ``factor``.

    Only ``Q`` and ``Qt`` are scaled; the dual aggregates, and hence the
    continuous cuts, stay as ``base`` returns them.
    """

    def __init__(self, base, factor: float = 1.10):
        self.base = base
        self.factor = factor

    def predict_Q(self, problem, x) -> float:
        return self.factor * self.base.predict_Q(problem, x)

    def predict_relaxed(self, problem, x) -> Reductions:
        red = self.base.predict_relaxed(problem, x)
        return Reductions(self.factor * red.Q_tilde, red.E_phi_h, np.array(red.E_phi_T),
                          red.E_one_psi, red.E_phi)
