"""
Solver Tape.

A minimal reverse-mode tape over the operations the Runge-Kutta loop performs:
dynamics evaluations (differentiated through the dynamics' own vjp), stage linear
combinations, state updates, error norms, step-size proposals and time advances.

``TapeTracer`` plugs into the loop in ``acaode.solvers``. The naive gradient records
a whole integration, rejected trials and controller updates included; the adaptive
checkpoint adjoint records one accepted step at a time.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import TapeOverflowError
from .solvers import error_norm, linear_combination, propose_step, controller_factor

logger = logging.getLogger("acaode.tape")

VjpFn = Callable[[Any], Sequence[Optional[Any]]]


@dataclass
class TapeNode:
    """One recorded value.

    Attributes:
        value: The computed value (array or float).
        inputs: Indices of the nodes it was computed from.
        vjp: Maps the adjoint of value to one adjoint per input (None = no dependence).
    """
    value: Any
    inputs: Tuple[int, ...]
    vjp: Optional[VjpFn]


class SolverTape:
    """Append-only, topologically ordered record of a computation."""

    def __init__(self, max_nodes: int = 5_000_000):
        self.max_nodes = max_nodes
        self.nodes: List[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, value: Any, inputs: Sequence[int] = (), vjp: Optional[VjpFn] = None) -> int:
        """Append a node and return its index.

        Raises:
            TapeOverflowError: If the tape already holds max_nodes nodes.
        """
        if len(self.nodes) >= self.max_nodes:
            raise TapeOverflowError(self.max_nodes)
        self.nodes.append(TapeNode(value, tuple(inputs), vjp))
        return len(self.nodes) - 1

    def backward(self, seeds: Dict[int, Any]) -> List[Optional[Any]]:
        """Propagate adjoints from the seeded nodes back to every node.

        Args:
            seeds: Initial adjoint per node index.

        Returns:
            The adjoint of every node (None where nothing flowed).
        """
        adj: List[Optional[Any]] = [None] * len(self.nodes)
        for idx, seed in seeds.items():
            adj[idx] = seed if adj[idx] is None else adj[idx] + seed
        for i in range(len(self.nodes) - 1, -1, -1):
            a = adj[i]
            node = self.nodes[i]
            if a is None or node.vjp is None:
                continue
            for j, g in zip(node.inputs, node.vjp(a)):
                if g is None:
                    continue
                adj[j] = g if adj[j] is None else adj[j] + g
        return adj


def _error_norm_vjp(err, z_old, z_new, atol, rtol, e):
    n = err.size
    absolute_old, absolute_new = np.abs(z_old), np.abs(z_new)
    scale = atol + rtol * np.maximum(absolute_old, absolute_new)
    r = err / scale

    def vjp(a):
        if e == 0.0:
            return None, None, None
        g_err = a * r / (n * e * scale)
        g_scale = -a * r * r / (n * e * scale)
        # ties in max(|z_old|, |z_new|) go to z_old
        old_wins = absolute_old >= absolute_new
        g_old = np.where(old_wins, g_scale * rtol * np.sign(z_old), 0.0)
        g_new = np.where(old_wins, 0.0, g_scale * rtol * np.sign(z_new))
        return g_err, g_old, g_new

    return vjp


class TapeTracer:
    """Tracer for the solver loop whose handles are node indices of a SolverTape.

    Attributes:
        tape: The tape being recorded.
        f_evals: Dynamics evaluations performed while recording.
        vjp_calls: Dynamics vjp evaluations performed during backward passes.
    """

    def __init__(self, tape: SolverTape):
        self.tape = tape
        self.f_evals = 0
        self.vjp_calls = 0

    def leaf(self, x) -> int:
        return self.tape.record(x)

    const = leaf

    def value(self, idx: int):
        return self.tape.nodes[idx].value

    def eval(self, dyn, t, z, theta) -> int:
        zv, thv = self.value(z), self.value(theta)
        self.f_evals += 1

        def vjp(a):
            self.vjp_calls += 1
            return dyn.vjp(t, zv, thv, a)

        return self.tape.record(dyn.eval(t, zv, thv), (z, theta), vjp)

    def lincomb(self, terms) -> Optional[int]:
        terms = [(c, k) for c, k in terms if c != 0.0]
        if not terms:
            return None
        value = linear_combination([(c, self.value(k)) for c, k in terms])
        coefs = [c for c, _ in terms]
        return self.tape.record(value, [k for _, k in terms], lambda a: [c * a for c in coefs])

    def axpy(self, z: int, h: int, acc: int) -> int:
        hv, accv = self.value(h), self.value(acc)
        return self.tape.record(
            self.value(z) + hv * accv, (z, h, acc), lambda a: (a, float(np.dot(accv, a)), hv * a)
        )

    def scale(self, h: int, acc: int) -> int:
        hv, accv = self.value(h), self.value(acc)
        return self.tape.record(hv * accv, (h, acc), lambda a: (float(np.dot(accv, a)), hv * a))

    def error_norm(self, err: int, z_old: int, z_new: int, atol: float, rtol: float) -> int:
        ev, ov, nv = self.value(err), self.value(z_old), self.value(z_new)
        e = error_norm(ev, ov, nv, atol, rtol)
        return self.tape.record(e, (err, z_old, z_new), _error_norm_vjp(ev, ov, nv, atol, rtol, e))

    def propose(self, en: Optional[int], h: int, order_p: int, cfg, h_min: float) -> int:
        hv = self.value(h)
        if en is None:
            h_new = propose_step(float("inf"), hv, order_p, cfg, h_min)
            return self.tape.record(h_new, (h,), lambda a: (a * cfg.min_factor,))
        ev = self.value(en)
        h_new = propose_step(ev, hv, order_p, cfg, h_min)
        factor, raw = controller_factor(ev, order_p, cfg)
        # subgradient: interior-branch derivative on the clamp boundary, zero when strictly clamped
        if ev == 0.0 or raw < cfg.min_factor or raw > cfg.max_factor:
            d_err = 0.0
        else:
            d_err = -hv * raw / ((order_p + 1) * ev)
        return self.tape.record(h_new, (en, h), lambda a: (a * d_err, a * factor))

    def shift(self, t: int, h: int) -> Tuple[int, int]:
        tv = self.value(t)
        t_new = self.tape.record(tv + self.value(h), (t, h), lambda a: (a, a))
        h_eff = self.tape.record(self.value(t_new) - tv, (t_new, t), lambda a: (a, -a))
        return t_new, h_eff

    def span_to(self, T: float, t: int) -> int:
        return self.tape.record(T - self.value(t), (t,), lambda a: (-a,))
