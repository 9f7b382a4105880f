"""Finite-difference gradient checking against the tape's analytic gradients.

Checks run in float64; central differences with a configurable step. Large
parameter tensors are probed at a sampled subset of entries so whole-network
checks stay tractable.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Tape


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    worst_entry: tuple = ()
    checked_entries: int = 0
    nan_at: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.nan_at)


@dataclass
class GradCheckReport:
    tol: float
    step: float
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return all(not c.nan_at and c.max_rel_err <= self.tol for c in self.checks)

    def lines(self):
        for c in self.checks:
            status = "FAIL" if (c.nan_at or c.max_rel_err > self.tol) else "ok"
            extra = f" nan_at={c.nan_at}" if c.nan_at else ""
            yield (f"{status:4s} {c.name}: max_rel_err={c.max_rel_err:.3e} "
                   f"entries={c.checked_entries}{extra}")

    def __str__(self):
        head = f"grad check (tol={self.tol:g}, step={self.step:g}): " + \
               ("PASS" if self.passed else "FAIL")
        return "\n".join([head, *self.lines()])


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(build, params: dict[str, np.ndarray], tol: float = 1e-3,
               step: float = 1e-4, fallback_steps=(1e-3, 1e-5), max_entries: int = 0,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic and central-difference gradients for every parameter.

    `build(tape, leaves)` must record a scalar root node from the given dict
    of leaf nodes (one per parameter, same keys) and be a pure function of the
    leaf values. `max_entries` > 0 probes at most that many randomly chosen
    entries per parameter; 0 probes every entry.

    An entry failing at the base step is re-probed at the fallback steps, plus
    the one-sided quotients of the smallest step, and its error is the minimum
    over the probes. Central differences have step-specific failure modes that
    this removes: a ReLU/max kink inside the probe window biases the quotient
    (a smaller step or the kink-free side recovers it; at a kink exactly on
    the base point the backward quotient matches the value>0 subgradient
    convention), and directions the function is exactly insensitive to drown
    in roundoff (a larger step recovers them). A wrong analytic slope
    disagrees with every probe, so the retries cannot mask a real defect.
    """
    rng = np.random.default_rng(seed)
    p64 = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}

    def evaluate():
        tape = Tape(dtype=np.float64)
        leaves = {k: tape.leaf(v) for k, v in p64.items()}
        root = build(tape, leaves)
        return tape, leaves, root

    tape, leaves, root = evaluate()
    if not np.isfinite(root.value).all():
        raise FloatingPointError("grad check objective is not finite at the base point")
    tape.backward(root)
    analytic = {k: tape.grad(n).copy() for k, n in leaves.items()}
    f0 = float(root.value)

    report = GradCheckReport(tol=tol, step=step)
    for name in params:
        a = analytic[name]
        check = ParamCheck(name=name, max_rel_err=0.0)
        if not np.isfinite(a).all():
            bad = np.argwhere(~np.isfinite(a))[0]
            check.nan_at = f"analytic grad of {name} at {tuple(bad)}"
            check.max_rel_err = np.inf
            report.checks.append(check)
            continue
        size = a.size
        if max_entries and size > max_entries:
            flat_idx = rng.choice(size, size=max_entries, replace=False)
        else:
            flat_idx = np.arange(size)
        base = p64[name]
        flat = base.reshape(-1)

        def values_at(fi, h):
            keep = flat[fi]
            flat[fi] = keep + h
            _, _, r1 = evaluate()
            flat[fi] = keep - h
            _, _, r2 = evaluate()
            flat[fi] = keep
            return float(r1.value), float(r2.value)

        for fi in flat_idx:
            av = float(a.reshape(-1)[fi])
            err = np.inf
            bad_numeric = False
            steps = (step, *fallback_steps)
            for si, h in enumerate(steps):
                fp, fm = values_at(fi, h)
                estimates = [(fp - fm) / (2.0 * h)]
                if si == len(steps) - 1:
                    estimates += [(fp - f0) / h, (f0 - fm) / h]
                for num in estimates:
                    if not np.isfinite(num):
                        bad_numeric = True
                        break
                    err = min(err, _rel_err(av, num))
                if bad_numeric or err <= tol:
                    break
            if bad_numeric:
                check.nan_at = f"numeric grad of {name} at flat index {int(fi)}"
                check.max_rel_err = np.inf
                break
            if err > check.max_rel_err:
                check.max_rel_err = err
                check.worst_entry = tuple(np.unravel_index(int(fi), base.shape))
            check.checked_entries += 1
        report.checks.append(check)
    return report


@contextmanager
def corrupted_vjp(op: str = "matvec"):
    """Swap one backward rule for an off-by-transpose version (checker self-test)."""
    original = autodiff._VJPS[op]
    if op == "matvec":
        def wrong(tape, idx, g):
            im, iv = tape.inputs[idx]
            # transpose deliberately dropped on the vector path
            return np.outer(g, tape.values[iv]), tape.values[im] @ g
    else:
        def wrong(tape, idx, g):
            grads = original(tape, idx, g)
            return tuple(None if gr is None else 2.0 * gr for gr in grads)
    autodiff._VJPS[op] = wrong
    try:
        yield
    finally:
        autodiff._VJPS[op] = original
