"""Shared test utilities: finite-difference oracles and random generators.

The FD oracle is two-stage on purpose.  Gradients are checked against central
differences of plain values (step h); Hessians are checked against central
differences of the already-validated gradient.  One-stage second differences
at h = 1e-5 carry roundoff noise ~ eps/h^2 ~ 1e-6, which sits exactly at the
tolerance being certified and can therefore certify nothing.
"""

from __future__ import annotations

import numpy as np

from legclair.expr import (
    Add,
    Call,
    Div,
    Mul,
    Neg,
    Num,
    Pow,
    Sub,
    Var,
    eval_dual2,
    evaluate,
)

FD_STEP = 1e-5


def fd_gradient(f, x, h=FD_STEP):
    """Central-difference gradient of a scalar callable."""
    x = np.asarray(x, dtype=float)
    g = np.zeros(x.size)
    for i in range(x.size):
        step = np.zeros(x.size)
        step[i] = h
        g[i] = (f(x + step) - f(x - step)) / (2.0 * h)
    return g


def fd_jacobian(g, x, h=FD_STEP):
    """Central-difference Jacobian of a vector callable (used on gradients)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        step = np.zeros(x.size)
        step[j] = h
        cols.append((np.asarray(g(x + step)) - np.asarray(g(x - step))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def ad_gradient(expr, point, active=None):
    return eval_dual2(expr, point, active).grad


def fd_hessian(f, x, h=1e-4):
    """One-stage central second differences of a scalar callable.

    Noisier than the two-stage oracle (~1e-8 absolute at h = 1e-4); use it
    only where no exact gradient of ``f`` is available, with tolerances to
    match.
    """
    x = np.asarray(x, dtype=float)
    d = x.size
    out = np.empty((d, d))
    f0 = f(x)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h
        out[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / (h * h)
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = h
            out[i, j] = out[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4.0 * h * h)
    return out


def rel_err(got, want):
    got = np.asarray(got, dtype=float)
    want = np.asarray(want, dtype=float)
    scale = max(1.0, float(np.max(np.abs(want))) if want.size else 0.0)
    diff = float(np.max(np.abs(got - want))) if want.size else 0.0
    return diff / scale


def check_expr_against_fd(expr, point, tol=1e-6, h=FD_STEP):
    """Assert AD gradient/Hessian match the two-stage FD oracle at ``point``."""
    point = np.asarray(point, dtype=float)
    d = eval_dual2(expr, point)
    g_fd = fd_gradient(lambda x: evaluate(expr, x), point, h)
    assert rel_err(d.grad, g_fd) <= tol, (
        f"gradient mismatch {rel_err(d.grad, g_fd):.3e} for '{expr.source}' at {point}"
    )
    h_fd = fd_jacobian(lambda x: ad_gradient(expr, x), point, h)
    assert rel_err(d.hess, h_fd) <= tol, (
        f"Hessian mismatch {rel_err(d.hess, h_fd):.3e} for '{expr.source}' at {point}"
    )


# --------------------------------------------------------------------------
# Random sources
# --------------------------------------------------------------------------

def random_polynomial_source(rng, names, max_degree=4, max_terms=5):
    """A random polynomial source string of total degree <= max_degree."""
    terms = []
    for _ in range(rng.integers(1, max_terms + 1)):
        coeff = round(float(rng.uniform(-2.0, 2.0)), 3)
        if coeff == 0.0:
            coeff = 1.0
        degrees = np.zeros(len(names), dtype=int)
        for _ in range(int(rng.integers(0, max_degree + 1))):
            degrees[rng.integers(0, len(names))] += 1
        factors = [repr(abs(coeff))]
        for name, d in zip(names, degrees):
            if d == 1:
                factors.append(name)
            elif d > 1:
                factors.append(f"{name}^{d}")
        term = "*".join(factors)
        terms.append(("-" if coeff < 0 else "+") + term)
    src = terms[0].lstrip("+") if terms[0][0] == "+" else terms[0]
    for t in terms[1:]:
        src += t
    return src


def random_smooth_source(rng, names):
    """A random C-infinity expression, safe on the box [-1, 1]^d."""
    def linear():
        a = round(float(rng.uniform(-1.5, 1.5)), 3)
        b = round(float(rng.uniform(-1.0, 1.0)), 3)
        name = names[rng.integers(0, len(names))]
        return f"({a!r}*{name}+{b!r})"

    def part():
        kind = rng.integers(0, 7)
        if kind == 0:
            return random_polynomial_source(rng, names, max_degree=3, max_terms=2)
        if kind == 1:
            return f"sin({linear()})"
        if kind == 2:
            return f"cos({linear()})"
        if kind == 3:
            return f"exp(0.5*{linear()})"
        if kind == 4:
            name = names[rng.integers(0, len(names))]
            return f"ln(2+{name}^2)"
        if kind == 5:
            name = names[rng.integers(0, len(names))]
            return f"sqrt(2+{name}^2)"
        name = names[rng.integers(0, len(names))]
        return f"{linear()}/(2+{name}^2)"

    parts = [part() for _ in range(int(rng.integers(2, 5)))]
    src = parts[0]
    for p in parts[1:]:
        src += ("+" if rng.integers(0, 2) else "-") + p
    return src


def random_tree(rng, names, depth=3):
    """A random AST built directly from node constructors (for round-trips)."""
    if depth == 0 or rng.random() < 0.3:
        if rng.random() < 0.4:
            v = float(rng.integers(0, 5)) if rng.random() < 0.5 else round(
                float(rng.uniform(0.0, 3.0)), 3
            )
            return Num(v)
        i = int(rng.integers(0, len(names)))
        return Var(i, names[i])
    kind = rng.integers(0, 8)
    if kind == 0:
        return Neg(random_tree(rng, names, depth - 1))
    if kind == 1:
        fn = ("sin", "cos", "tan", "exp", "ln", "sqrt")[rng.integers(0, 6)]
        return Call(fn, random_tree(rng, names, depth - 1))
    if kind == 2:
        expo = float(rng.choice([2.0, 3.0, 4.0, -2.0, 0.5, -0.5]))
        return Pow(random_tree(rng, names, depth - 1), expo)
    ctor = (Add, Sub, Mul, Div)[rng.integers(0, 4)]
    return ctor(
        random_tree(rng, names, depth - 1), random_tree(rng, names, depth - 1)
    )
