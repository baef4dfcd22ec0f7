"""Quadrature rules on the reference tetrahedron.

Rules are given as barycentric coordinates (q, 4) and weights (q,) that sum
to one, so an integral over a tet of volume V is V * sum(w_q * f(x_q)).
"""

import numpy as np

__all__ = ["tet_rule", "available_orders"]


def _perm_rows(*groups):
    pts = []
    for row in groups:
        pts.append(row)
    return np.array(pts, dtype=float)


def _symmetric_4(a):
    """All permutations of (a, b, b, b) with b = (1 - a) / 3."""
    b = (1.0 - a) / 3.0
    out = np.full((4, 4), b)
    np.fill_diagonal(out, a)
    return out


def _symmetric_6(a):
    """All permutations of (a, a, b, b) with b = (1 - 2a) / 2."""
    b = 0.5 - a
    rows = []
    for i in range(4):
        for j in range(i + 1, 4):
            r = np.full(4, b)
            r[i] = a
            r[j] = a
            rows.append(r)
    return np.array(rows)


def _rule_order_1():
    return np.full((1, 4), 0.25), np.array([1.0])


def _rule_order_2():
    # 4-point rule, exact through degree 2.
    a = 0.5854101966249685
    return _symmetric_4(a), np.full(4, 0.25)


def _rule_order_3():
    # 8-point rule: vertices plus face centroids, exact through degree 3.
    pts = np.vstack([_symmetric_4(1.0), _symmetric_4(0.0)])
    w = np.concatenate([np.full(4, 1.0 / 40.0), np.full(4, 9.0 / 40.0)])
    return pts, w


def _rule_order_4():
    # Keast 14-point rule, positive weights, exact through degree 4.
    pts = np.vstack(
        [
            _symmetric_4(0.0673422422100983),
            _symmetric_4(0.7217942490673264),
            _symmetric_6(0.0455037041256497),
        ]
    )
    w = np.concatenate(
        [
            np.full(4, 0.1126879257180162),
            np.full(4, 0.0734930431163619),
            np.full(6, 0.0425460207770812),
        ]
    )
    return pts, w


_RULES = {
    1: _rule_order_1,
    2: _rule_order_2,
    3: _rule_order_3,
    4: _rule_order_4,
}


def available_orders():
    return sorted(_RULES)


def tet_rule(order):
    """Return (bary, weights) integrating polynomials up to ``order`` exactly.

    Requests above the highest tabulated order fall back to the highest rule.
    """
    if order < 1:
        raise ValueError("quadrature order must be >= 1")
    key = order if order in _RULES else max(_RULES)
    bary, w = _RULES[key]()
    return bary, w
