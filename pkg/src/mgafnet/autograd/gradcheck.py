"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import backward, record_kinks, verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: dict = field(default_factory=dict)
    coords_checked: int = 0
    tol: float = 1e-4
    kinks_skipped: int = 0
    worst_coord: tuple = ()  # (input name, flat index, analytic, numeric)
    floor: float = 1e-8
    below_floor: int = 0

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        worst = max(self.per_input, key=self.per_input.get) if self.per_input else "-"
        skipped = f", {self.kinks_skipped} skipped at ReLU kinks" if self.kinks_skipped else ""
        small = (f", {self.below_floor} below the {self.floor:.1e} resolution floor"
                 if self.below_floor else "")
        return (f"gradcheck {status}: max rel err {self.max_rel_error:.3e} "
                f"over {self.coords_checked} coords (worst: {worst}){skipped}{small}")


def rel_error(analytic, numeric, floor=1e-8):
    denom = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / denom


def resolution_floor(value, eps, tol, dtype=np.float64):
    """Smallest gradient a central difference can resolve to relative ``tol``.

    Evaluating ``f`` rounds its value by about ``u * |f|``, so the quotient
    carries an absolute error of at least ``u * |f| / eps``. Below
    ``u * |f| / (eps * tol)`` a relative error under ``tol`` is out of reach
    for any implementation; such coordinates are compared in absolute terms.
    """
    u = np.finfo(dtype).eps
    return max(1e-8, u * abs(value) / (eps * tol))


def grad_check(f, inputs, eps=1e-5, tol=1e-4, max_coords=None, seed=0, skip_kinks=False):
    """Compare backward() gradients of scalar ``f()`` with central differences.

    ``inputs`` is a dict name -> Tensor (or a list, named by position). ``f``
    takes no arguments and reads the tensors, which are perturbed in place.
    With ``max_coords`` set, each input checks a random subset of at most that
    many coordinates.

    With ``skip_kinks`` a coordinate whose +eps and -eps evaluations switch
    any ReLU is replaced by another one: the central difference straddles a
    kink there and is no oracle for the derivative. Skips are counted in the
    report. Large networks need this because some unit almost always sits
    within eps of zero.

    The relative error uses :func:`resolution_floor` of ``f``'s value as the
    smallest denominator.
    """
    if not isinstance(inputs, dict):
        inputs = {str(i): t for i, t in enumerate(inputs)}
    rng = np.random.default_rng(seed)
    with verification():
        for t in inputs.values():
            if t.data.dtype != np.float64:
                raise TypeError("grad_check requires double-precision inputs")
            t.requires_grad = True
            t.grad = np.zeros_like(t.data)
        out = f()
        if out.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        backward(out)
        analytic = {k: t.grad.copy() for k, t in inputs.items()}

        report = GradCheckReport(0.0, tol=tol, floor=resolution_floor(float(out.data), eps, tol))
        for name, t in inputs.items():
            flat = t.data.reshape(-1)
            order = np.arange(flat.size)
            want = flat.size
            if max_coords is not None and flat.size > max_coords:
                order = rng.permutation(flat.size)
                want = max_coords
            worst = 0.0
            done = 0
            ga = analytic[name].reshape(-1)
            for i in order:
                if done == want:
                    break
                orig = flat[i]
                with record_kinks() as kp:
                    flat[i] = orig + eps
                    fp = float(f().data)
                with record_kinks() as km:
                    flat[i] = orig - eps
                    fm = float(f().data)
                flat[i] = orig
                if skip_kinks and kp != km:
                    report.kinks_skipped += 1
                    continue
                num = (fp - fm) / (2 * eps)
                err = rel_error(float(ga[i]), num, report.floor)
                if max(abs(float(ga[i])), abs(num)) < report.floor:
                    report.below_floor += 1
                if err > report.max_rel_error:
                    report.max_rel_error = err
                    report.worst_coord = (name, int(i), float(ga[i]), num)
                worst = max(worst, err)
                done += 1
            report.per_input[name] = worst
            report.coords_checked += done
    return report
