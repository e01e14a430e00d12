import math


def ceil_product(p: float, n: int) -> int:
    """``ceil(p * n)`` that ignores binary round-off in the product.

    ``0.1 * 30`` is ``3.0000000000000004`` in floating point; the intended
    count is 3, not 4.
    """
    x = p * n
    r = round(x)
    if abs(x - r) <= 1e-9 * max(1.0, abs(x)):
        return int(r)
    return math.ceil(x)
