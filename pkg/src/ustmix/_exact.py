"""Small exact-arithmetic linear algebra over Fractions."""

from __future__ import annotations

from fractions import Fraction


def to_fraction(x):
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(x)


def det(M) -> Fraction:
    """Determinant by fraction-valued Gaussian elimination."""
    A = [[to_fraction(v) for v in row] for row in M]
    n = len(A)
    if n == 0:
        return Fraction(1)
    sign = 1
    result = Fraction(1)
    for c in range(n):
        piv = next((r for r in range(c, n) if A[r][c] != 0), None)
        if piv is None:
            return Fraction(0)
        if piv != c:
            A[c], A[piv] = A[piv], A[c]
            sign = -sign
        p = A[c][c]
        result *= p
        rowc = A[c]
        for r in range(c + 1, n):
            f = A[r][c]
            if f:
                f = f / p
                rowr = A[r]
                for k in range(c, n):
                    rowr[k] -= f * rowc[k]
    return sign * result


def solve(M, b):
    """Solve M x = b exactly; M square and nonsingular."""
    n = len(M)
    A = [[to_fraction(v) for v in row] + [to_fraction(b[i])] for i, row in enumerate(M)]
    for c in range(n):
        piv = next((r for r in range(c, n) if A[r][c] != 0), None)
        if piv is None:
            raise ZeroDivisionError("singular system")
        A[c], A[piv] = A[piv], A[c]
        p = A[c][c]
        A[c] = [v / p for v in A[c]]
        for r in range(n):
            if r != c and A[r][c]:
                f = A[r][c]
                A[r] = [vr - f * vc for vr, vc in zip(A[r], A[c])]
    return [A[i][n] for i in range(n)]
